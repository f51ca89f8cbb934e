use std::path::Path;

use renorm::data::{
    load_dataset_cache, load_idx, make_gaussian_mixture, sample_batch, save_dataset_cache, split_microbatches, Batch,
    DataError, Dataset, Microbatching, SamplerSpec, SplitRule,
};
use renorm::harness::{run_experiment, DatasetSpec, EvalMode, ExperimentConfig};
use renorm::network::{NormMode, OptimizerConfig};
use renorm::rng::Rng;
use renorm::tensor::Tensor;

/// Writes an IDX image file (u8 pixels, 3 dims) and label file.
fn write_idx(dir: &Path, images: &[Vec<u8>], rows: u32, cols: u32, labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
    let mut img = Vec::new();
    img.extend_from_slice(&[0, 0, 0x08, 0x03]);
    img.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img.extend_from_slice(&rows.to_be_bytes());
    img.extend_from_slice(&cols.to_be_bytes());
    for im in images {
        img.extend_from_slice(im);
    }
    let mut lab = Vec::new();
    lab.extend_from_slice(&[0, 0, 0x08, 0x01]);
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    let (ip, lp) = (dir.join("images.idx"), dir.join("labels.idx"));
    std::fs::write(&ip, img).unwrap();
    std::fs::write(&lp, lab).unwrap();
    (ip, lp)
}

fn synthetic_images(n: usize, width: usize, seed: u64) -> (Vec<Vec<u8>>, Vec<u8>) {
    let mut rng = Rng::new(seed);
    let images = (0..n).map(|_| (0..width).map(|_| rng.below(256) as u8).collect()).collect();
    let labels = (0..n).map(|_| rng.below(10) as u8).collect();
    (images, labels)
}

#[test]
fn idx_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = synthetic_images(37, 12, 1);
    let (ip, lp) = write_idx(dir.path(), &images, 3, 4, &labels);
    let ds = load_idx(&ip, &lp).unwrap();
    assert_eq!(ds.len(), 37);
    assert_eq!(ds.width(), 12);
    for (i, im) in images.iter().enumerate() {
        for (j, &p) in im.iter().enumerate() {
            assert_eq!(ds.features.data()[i * 12 + j], p as f64 / 255.0);
        }
        assert_eq!(ds.labels[i], labels[i] as usize);
    }
    assert_eq!(ds.classes, *labels.iter().max().unwrap() as usize + 1);
}

#[test]
fn idx_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = synthetic_images(5, 4, 2);
    let (ip, lp) = write_idx(dir.path(), &images, 2, 2, &labels);

    let mut bytes = std::fs::read(&ip).unwrap();
    bytes[3] = 0x01;
    let bad = dir.path().join("bad.idx");
    std::fs::write(&bad, &bytes).unwrap();
    assert!(matches!(load_idx(&bad, &lp), Err(DataError::BadMagic { found: 0x801, .. })));

    let bytes = std::fs::read(&ip).unwrap();
    std::fs::write(&bad, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(load_idx(&bad, &lp), Err(DataError::Truncated { .. })));
    std::fs::write(&bad, &bytes[..6]).unwrap();
    assert!(matches!(load_idx(&bad, &lp), Err(DataError::Truncated { .. })));

    let sub = dir.path().join("sub");
    std::fs::create_dir(&sub).unwrap();
    let (_, lp4) = write_idx(&sub, &images[..4], 2, 2, &labels[..4]);
    assert!(matches!(load_idx(&ip, &lp4), Err(DataError::CountMismatch { images: 5, labels: 4 })));

    assert!(matches!(load_idx(dir.path().join("missing"), &lp), Err(DataError::Io { .. })));
}

#[test]
fn cache_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_gaussian_mixture(4, 9, 5, 1.5, 3).unwrap();
    let path = dir.path().join("mix.cache");
    save_dataset_cache(&ds, &path).unwrap();
    assert_eq!(load_dataset_cache(&path).unwrap(), ds);

    let bytes = std::fs::read(&path).unwrap();
    let header = std::str::from_utf8(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()]).unwrap();
    let json: serde_json::Value = serde_json::from_str(header).unwrap();
    assert_eq!(json["format"], "renorm-dataset");
    assert_eq!(json["rows"], 36);
    assert_eq!(json["width"], 5);

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_dataset_cache(&path), Err(DataError::Truncated { .. })));
}

#[test]
fn clustered_distinct_label_count_matches_formula() {
    let classes = 10;
    let ds = make_gaussian_mixture(classes, 20, 2, 1.0, 0).unwrap();
    let spec = SamplerSpec::clustered(16, 2);
    let mut rng = Rng::new(5);
    let n = 10_000;
    let counts: Vec<f64> = (0..n)
        .map(|_| {
            let b = sample_batch(&ds, &spec, &mut rng).unwrap();
            let mut seen = vec![false; classes];
            b.labels.iter().for_each(|&l| seen[l] = true);
            seen.iter().filter(|&&s| s).count() as f64
        })
        .collect();
    let mean = counts.iter().sum::<f64>() / n as f64;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let c = classes as f64;
    let expected = c * (1.0 - (1.0 - 1.0 / c).powi(16));
    assert!((mean - expected).abs() <= 3.0 * (var / n as f64).sqrt(), "mean {mean} expected {expected}");
}

#[test]
fn split_then_concat_restores_batch() {
    let ds = make_gaussian_mixture(6, 10, 3, 1.0, 1).unwrap();
    let mut rng = Rng::new(8);
    for (spec, micro) in [
        (SamplerSpec::iid(32), Microbatching { size: 4, rule: SplitRule::Contiguous }),
        (SamplerSpec::iid(12), Microbatching::whole(12)),
    ] {
        let b = sample_batch(&ds, &spec, &mut rng).unwrap();
        let parts = split_microbatches(&b, &micro).unwrap();
        assert_eq!(Batch::concat(&parts).unwrap(), b);
    }
    let b = sample_batch(&ds, &SamplerSpec::clustered(5, 2), &mut rng).unwrap();
    let halves = split_microbatches(&b, &Microbatching { size: 5, rule: SplitRule::LabelDisjointHalves }).unwrap();
    // each same-label pair contributes one member to each half
    let mut a = halves[0].labels.clone();
    let mut c = halves[1].labels.clone();
    a.sort_unstable();
    c.sort_unstable();
    assert_eq!(a, c);
}

#[test]
fn sampling_sequence_is_reproducible() {
    let ds = make_gaussian_mixture(5, 10, 2, 1.0, 0).unwrap();
    for spec in [SamplerSpec::iid(8), SamplerSpec::clustered(4, 2)] {
        let draw = |seed| {
            let mut rng = Rng::new(seed);
            (0..20).map(|_| sample_batch(&ds, &spec, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }
}

#[test]
fn linear_classifier_separates_wide_mixture() {
    let cfg = ExperimentConfig {
        dataset: DatasetSpec::Mixture { classes: 10, per_class: 200, width: 16, class_sep: 8.0, seed: 0 },
        hidden: vec![],
        norm: NormMode::None,
        optimizer: OptimizerConfig::rmsprop(0.01),
        total_steps: 1500,
        eval_every: 1500,
        eval_modes: vec![EvalMode::MovingAvg],
        ..ExperimentConfig::default()
    };
    let out = run_experiment(&cfg, 1, None).unwrap();
    let acc = out.final_row().val_acc_moving_avg.unwrap();
    assert!(acc > 0.95, "accuracy {acc}");
}

#[test]
fn split_is_by_index() {
    let ds = make_gaussian_mixture(3, 10, 2, 1.0, 0).unwrap();
    let (train, val) = ds.train_validation_split(0.8).unwrap();
    assert_eq!(train.len(), 24);
    assert_eq!(val.len(), 6);
    assert_eq!(train.features, ds.features.slice_rows(0, 24).unwrap());
    assert_eq!(val.labels, ds.labels[24..].to_vec());
    let rebuilt = Dataset::new(Tensor::concat_rows(&[train.features, val.features]).unwrap(), ds.labels.clone(), 3).unwrap();
    assert_eq!(rebuilt, ds);
}
