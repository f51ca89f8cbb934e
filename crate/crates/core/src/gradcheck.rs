//! Central finite-difference checks for every hand-written backward.
//!
//! The renormalization correction is a stop-gradient quantity, so the
//! reference function holds each layer's cached `r` and `d` fixed while the
//! minibatch moments are recomputed from the perturbed input.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{softmax_xent, Mlp, NetworkSpec, NormMode};
use crate::norm::{
    bn_forward_train, brn_backward, brn_forward_train_bounded, forward_with_correction, CorrectionBounds,
    CorrectionSchedule, NormState,
};
use crate::rng::Rng;
use crate::tensor::{Axes, Tensor};

pub const DEFAULT_H: f64 = 1e-4;
/// Max relative error for a single normalization layer.
pub const LAYER_THRESHOLD: f64 = 1e-6;
/// Max relative error end to end through the MLP.
pub const NETWORK_THRESHOLD: f64 = 1e-5;
/// Bounds used by the clipped mode; tight enough that most features clip.
pub const CLIPPED_BOUNDS: CorrectionBounds = CorrectionBounds { r_max: 1.5, d_max: 0.5 };

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn fd_gradient(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let mut grad = Tensor::zeros(x.shape().to_vec());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("f({}) at coordinate {i}", if up.is_finite() { "x-h" } else { "x+h" })));
        }
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamError {
    pub name: String,
    pub max_rel: f64,
    pub max_abs: f64,
}

impl ParamError {
    pub fn compare(name: impl Into<String>, analytic: &Tensor, numeric: &Tensor) -> Result<Self> {
        if analytic.shape() != numeric.shape() {
            return Err(Error::Shape(format!("analytic {:?} vs numeric {:?}", analytic.shape(), numeric.shape())));
        }
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (&a, &f) in analytic.data().iter().zip(numeric.data()) {
            max_rel = max_rel.max(relative_error(a, f));
            max_abs = max_abs.max((a - f).abs());
        }
        Ok(ParamError { name: name.into(), max_rel, max_abs })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FdReport {
    pub label: String,
    pub h: f64,
    pub threshold: f64,
    pub params: Vec<ParamError>,
    pub passed: bool,
}

impl FdReport {
    pub fn new(label: impl Into<String>, h: f64, threshold: f64, params: Vec<ParamError>) -> Self {
        let passed = params.iter().all(|p| p.max_rel <= threshold);
        FdReport { label: label.into(), h, threshold, params, passed }
    }

    pub fn max_rel(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel))
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

impl fmt::Display for FdReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<36} h={:<8.0e} threshold={:<8.0e} {}", self.label, self.h, self.threshold, if self.passed { "PASS" } else { "FAIL" })?;
        for p in &self.params {
            writeln!(f, "    {:<12} max_rel={:<12.3e} max_abs={:.3e}", p.name, p.max_rel, p.max_abs)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckMode {
    Bn,
    BrnUnclipped,
    BrnClipped,
}

impl CheckMode {
    pub const ALL: [CheckMode; 3] = [CheckMode::Bn, CheckMode::BrnUnclipped, CheckMode::BrnClipped];

    pub fn name(self) -> &'static str {
        match self {
            CheckMode::Bn => "bn",
            CheckMode::BrnUnclipped => "brn-unclipped",
            CheckMode::BrnClipped => "brn-clipped",
        }
    }
}

impl FromStr for CheckMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown gradcheck mode {s:?}")))
    }
}

/// Random input, upstream gradient and layer state for a check.
fn norm_fixture(shape: &[usize], seed: u64) -> Result<(Tensor, Tensor, NormState)> {
    if shape.len() != 2 && shape.len() != 4 {
        return Err(Error::Shape(format!("gradcheck shape must be rank 2 or 4, got {shape:?}")));
    }
    let features = shape[1];
    let mut rng = Rng::new(seed);
    let x = rng.normal(shape, 0.5, 2.0)?;
    let d_y = rng.normal(shape, 0.0, 1.0)?;
    let mut state = NormState::new(features, 1e-3, 0.01, true)?;
    state.gamma = rng.normal(&[features], 1.0, 0.5)?;
    state.beta = rng.normal(&[features], 0.0, 1.0)?;
    state.mu = rng.normal(&[features], 0.0, 2.0)?;
    state.sigma = rng.normal(&[features], 0.0, 1.0)?.map(|v| 0.3 + 3.0 * v.abs());
    Ok((x, d_y, state))
}

/// Checks `d_x`, `d_beta`, `d_gamma` of one normalization layer at the default step and threshold.
pub fn check_norm_backward(shape: &[usize], mode: CheckMode, seed: u64) -> Result<FdReport> {
    check_norm_backward_with(shape, mode, seed, DEFAULT_H, CLIPPED_BOUNDS)
}

pub fn check_norm_backward_with(
    shape: &[usize],
    mode: CheckMode,
    seed: u64,
    h: f64,
    clipped: CorrectionBounds,
) -> Result<FdReport> {
    let (x, d_y, state) = norm_fixture(shape, seed)?;
    let axes = Axes::per_feature(shape.len());
    if axes.count(shape) < 2 {
        return Err(Error::DegenerateBatch { m: axes.count(shape) });
    }
    let mut trained = state.clone();
    let (_, cache) = match mode {
        CheckMode::Bn => bn_forward_train(&x, &mut trained, &axes)?,
        CheckMode::BrnUnclipped => brn_forward_train_bounded(&x, &mut trained, &axes, CorrectionBounds::UNCLIPPED)?,
        CheckMode::BrnClipped => brn_forward_train_bounded(&x, &mut trained, &axes, clipped)?,
    };
    // backward reads only gamma from the state, which training leaves alone
    let grads = brn_backward(&d_y, &cache, &state)?;
    let (r, d) = (&cache.r, &cache.d);

    let loss = |x: &Tensor, st: &NormState| -> Result<f64> {
        let y = forward_with_correction(x, st, &axes, r, d)?;
        Ok(y.mul(&d_y)?.sum())
    };
    let num_x = fd_gradient(|x| loss(x, &state), &x, h)?;
    let num_beta = fd_gradient(
        |b| {
            let mut st = state.clone();
            st.beta = b.clone();
            loss(&x, &st)
        },
        &state.beta,
        h,
    )?;
    let num_gamma = fd_gradient(
        |g| {
            let mut st = state.clone();
            st.gamma = g.clone();
            loss(&x, &st)
        },
        &state.gamma,
        h,
    )?;

    let d_gamma = grads.d_gamma.ok_or_else(|| Error::InvalidArgument("gamma gradient missing".into()))?;
    let params = vec![
        ParamError::compare("d_x", &grads.d_x, &num_x)?,
        ParamError::compare("d_beta", &grads.d_beta, &num_beta)?,
        ParamError::compare("d_gamma", &d_gamma, &num_gamma)?,
    ];
    let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
    Ok(FdReport::new(format!("norm {} {} seed={seed}", mode.name(), dims.join("x")), h, LAYER_THRESHOLD, params))
}

/// End-to-end check of every MLP parameter gradient under the frozen-correction loss.
pub fn check_network_backward(mode: NormMode, seed: u64) -> Result<FdReport> {
    let mut rng = Rng::new(seed);
    let mut spec = NetworkSpec::uniform(vec![4, 6, 5, 3], mode);
    spec.learn_gamma = true;
    spec.schedule = CorrectionSchedule { warmup_steps: 0, r_ramp_end: 0, d_ramp_end: 0, r_max_final: 1.5, d_max_final: 0.5 };
    spec.alpha = 0.3;
    let mut net = Mlp::new(spec, &mut rng)?;
    // move beta/gamma and moving stats away from their initial values
    for p in net.params_mut() {
        let noise = rng.normal(p.shape(), 0.0, 0.2)?;
        *p = p.add(&noise)?;
    }
    for _ in 0..3 {
        let warm = rng.normal(&[8, 4], 1.0, 2.0)?;
        net.forward_train(&warm, 1)?;
    }
    let x = rng.normal(&[8, 4], 0.0, 1.5)?;
    let labels: Vec<usize> = (0..8).map(|_| rng.below(3)).collect();

    let mut trained = net.clone();
    let (logits, cache) = trained.forward_train(&x, 1)?;
    let (_, d_logits) = softmax_xent(&logits, &labels)?;
    let grads = trained.backward(&cache, &d_logits)?;
    let corrections = cache.corrections();

    let base = trained;
    let params: Vec<Tensor> = base.params().into_iter().cloned().collect();
    let mut errors = Vec::with_capacity(params.len());
    for (k, p) in params.iter().enumerate() {
        let numeric = fd_gradient(
            |v| {
                let mut probe = base.clone();
                let mut values = params.clone();
                values[k] = v.clone();
                probe.set_params(&values)?;
                let (net_corr, lab) = (&corrections, &labels);
                match mode {
                    NormMode::None => Ok(softmax_xent(&probe.forward_infer(&x)?, lab)?.0),
                    _ => Ok(softmax_xent(&probe.forward_frozen(&x, net_corr)?, lab)?.0),
                }
            },
            p,
            DEFAULT_H,
        )?;
        errors.push(ParamError::compare(format!("param{k}"), &grads.0[k], &numeric)?);
    }
    let name = match mode {
        NormMode::None => "none",
        NormMode::BatchNorm => "bn",
        NormMode::BatchRenorm => "brn",
    };
    Ok(FdReport::new(format!("mlp {name} 8x4 seed={seed}"), DEFAULT_H, NETWORK_THRESHOLD, errors))
}

/// Every layer mode on 2D and 4D shapes over three seeds, then the MLP in every mode.
pub fn default_suite() -> Result<Vec<FdReport>> {
    let mut out = Vec::new();
    for shape in [vec![4, 3], vec![2, 3, 2, 2]] {
        for mode in CheckMode::ALL {
            for seed in [7, 8, 9] {
                out.push(check_norm_backward(&shape, mode, seed)?);
            }
        }
    }
    for mode in [NormMode::None, NormMode::BatchNorm, NormMode::BatchRenorm] {
        out.push(check_network_backward(mode, 7)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_examples() {
        let g = fd_gradient(|x| Ok(x.data().iter().map(|v| v * v).sum()), &Tensor::vector(&[1.0, 2.0]), 1e-4).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-9 && (g.data()[1] - 4.0).abs() < 1e-9);

        let g = fd_gradient(|_| Ok(3.0), &Tensor::vector(&[1.0, 2.0, 3.0]), 1e-4).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));

        let g = fd_gradient(|x| Ok(x.data().iter().map(|v| v.sin()).sum()), &Tensor::zeros([3]), 1e-4).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-8));
    }

    #[test]
    fn fd_rejects_bad_input() {
        assert!(fd_gradient(|_| Ok(0.0), &Tensor::zeros([2]), 0.0).is_err());
        assert!(matches!(fd_gradient(|_| Ok(f64::NAN), &Tensor::zeros([2]), 1e-4), Err(Error::NonFinite(_))));
    }

    #[test]
    fn bn_4x3_seed7_passes() {
        let r = check_norm_backward(&[4, 3], CheckMode::Bn, 7).unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn pinned_clipped_equals_bn() {
        let pinned = check_norm_backward_with(&[4, 3], CheckMode::BrnClipped, 7, DEFAULT_H, CorrectionBounds::BATCHNORM).unwrap();
        let bn = check_norm_backward(&[4, 3], CheckMode::Bn, 7).unwrap();
        assert_eq!(pinned.params, bn.params);
    }

    #[test]
    fn h_sweep_reaches_threshold() {
        let errs: Vec<f64> = [1e-3, 1e-4, 1e-5]
            .iter()
            .map(|&h| check_norm_backward_with(&[4, 3], CheckMode::BrnUnclipped, 7, h, CLIPPED_BOUNDS).unwrap().max_rel())
            .collect();
        assert!(errs.iter().cloned().fold(f64::INFINITY, f64::min) <= 1e-6, "{errs:?}");
        // truncation dominates at the coarse end
        assert!(errs[0] >= errs[1] || errs[0] <= 1e-6, "{errs:?}");
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in CheckMode::ALL {
            assert_eq!(m.name().parse::<CheckMode>().unwrap(), m);
        }
        assert!("nope".parse::<CheckMode>().is_err());
    }
}
