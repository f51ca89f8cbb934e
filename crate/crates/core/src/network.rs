//! Feed-forward classifier: `dense -> [norm] -> relu` blocks and a dense
//! softmax head, with hand-written backprop.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::norm::{
    bn_forward_train, brn_backward, brn_forward_train_bounded, forward_with_correction, norm_forward_inference,
    norm_forward_trainmode_eval, CorrectionSchedule, ForwardCache, NormState,
};
use crate::rng::Rng;
use crate::tensor::{Axes, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    None,
    BatchNorm,
    BatchRenorm,
}

impl std::str::FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormMode::None),
            "batchnorm" | "bn" => Ok(NormMode::BatchNorm),
            "batchrenorm" | "brn" => Ok(NormMode::BatchRenorm),
            _ => Err(Error::InvalidArgument(format!("unknown normalization mode {s:?}"))),
        }
    }
}

/// Static description of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Input width, hidden widths, class count.
    pub widths: Vec<usize>,
    /// One entry per hidden layer.
    pub norms: Vec<NormMode>,
    pub learn_gamma: bool,
    pub epsilon: f64,
    pub alpha: f64,
    pub schedule: CorrectionSchedule,
    /// Multiplies the `1/sqrt(fan_in)` init std.
    pub init_scale: f64,
}

impl NetworkSpec {
    /// Same normalization on every hidden layer, default epsilon/alpha.
    pub fn uniform(widths: Vec<usize>, mode: NormMode) -> Self {
        let hidden = widths.len().saturating_sub(2);
        NetworkSpec {
            widths,
            norms: vec![mode; hidden],
            learn_gamma: false,
            epsilon: crate::norm::DEFAULT_EPSILON,
            alpha: crate::norm::DEFAULT_ALPHA,
            schedule: CorrectionSchedule::DESK,
            init_scale: 1.0,
        }
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad widths {:?}", self.widths)));
        }
        if self.norms.len() != self.widths.len() - 2 {
            return Err(Error::InvalidArgument(format!(
                "{} normalization modes for {} hidden layers",
                self.norms.len(),
                self.widths.len() - 2
            )));
        }
        if !(self.init_scale > 0.0) {
            return Err(Error::InvalidArgument("init_scale must be positive".into()));
        }
        self.schedule.validate()
    }
}

/// `z = x W^T + b`; `b` is absent in front of a normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl DenseLayer {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let z = x.matmul(&self.w.transpose()?)?;
        match &self.b {
            Some(b) => z.add(b),
            None => Ok(z),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: NetworkSpec,
    pub dense: Vec<DenseLayer>,
    /// `Some` for normalized hidden layers.
    pub norms: Vec<Option<NormState>>,
}

/// Per-layer values saved by a training forward.
#[derive(Clone, Debug)]
pub struct LayerCache {
    input: Tensor,
    norm: Option<ForwardCache>,
    /// ReLU input; `None` for the output layer.
    pre_activation: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct NetCache {
    pub layers: Vec<LayerCache>,
}

impl NetCache {
    /// Mean clip fractions of `r` and `d` over the normalization layers.
    pub fn clip_fractions(&self) -> (f64, f64) {
        let caches: Vec<_> = self.layers.iter().filter_map(|l| l.norm.as_ref()).collect();
        if caches.is_empty() {
            return (0.0, 0.0);
        }
        let n = caches.len() as f64;
        (
            caches.iter().map(|c| c.r_clip_fraction()).sum::<f64>() / n,
            caches.iter().map(|c| c.d_clip_fraction()).sum::<f64>() / n,
        )
    }

    /// Cached `(r, d)` per hidden layer.
    pub fn corrections(&self) -> Vec<Option<(Tensor, Tensor)>> {
        self.layers.iter().map(|l| l.norm.as_ref().map(|c| (c.r.clone(), c.d.clone()))).collect()
    }
}

/// Gradients in [`Mlp::params`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients(net.params().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainStepReport {
    pub loss: f64,
    /// L2 norm of each layer's gradients (dense and normalization parameters together).
    pub grad_norms: Vec<f64>,
    pub r_clip_fraction: f64,
    pub d_clip_fraction: f64,
}

fn relu(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

impl Mlp {
    pub fn new(spec: NetworkSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let n_layers = spec.widths.len() - 1;
        let mut dense = Vec::with_capacity(n_layers);
        let mut norms = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let (fan_in, out) = (spec.widths[i], spec.widths[i + 1]);
            let w = rng.normal(&[out, fan_in], 0.0, spec.init_scale / (fan_in as f64).sqrt())?;
            let mode = spec.norms.get(i).copied().unwrap_or(NormMode::None);
            let norm = match mode {
                NormMode::None => None,
                _ => Some(NormState::new(out, spec.epsilon, spec.alpha, spec.learn_gamma)?),
            };
            let b = if norm.is_some() { None } else { Some(Tensor::zeros([out])) };
            dense.push(DenseLayer { w, b });
            norms.push(norm);
        }
        Ok(Mlp { spec, dense, norms })
    }

    fn mode(&self, layer: usize) -> NormMode {
        self.spec.norms.get(layer).copied().unwrap_or(NormMode::None)
    }

    pub fn input_width(&self) -> usize {
        self.spec.widths[0]
    }

    /// Trainable tensors: per layer `W`, `b`?, `beta`?, `gamma`?.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for (d, n) in self.dense.iter().zip(&self.norms) {
            out.push(&d.w);
            if let Some(b) = &d.b {
                out.push(b);
            }
            if let Some(n) = n {
                out.push(&n.beta);
                if n.learn_gamma {
                    out.push(&n.gamma);
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (d, n) in self.dense.iter_mut().zip(self.norms.iter_mut()) {
            out.push(&mut d.w);
            if let Some(b) = &mut d.b {
                out.push(b);
            }
            if let Some(n) = n {
                out.push(&mut n.beta);
                if n.learn_gamma {
                    out.push(&mut n.gamma);
                }
            }
        }
        out
    }

    /// Layer index owning each entry of [`Mlp::params`].
    pub fn param_layers(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, (d, n)) in self.dense.iter().zip(&self.norms).enumerate() {
            let count = 1 + d.b.is_some() as usize + n.as_ref().map_or(0, |n| 1 + n.learn_gamma as usize);
            out.extend(std::iter::repeat_n(i, count));
        }
        out
    }

    pub fn set_params(&mut self, values: &[Tensor]) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return shape_err(format!("{} parameter tensors for {} slots", values.len(), slots.len()));
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return shape_err(format!("parameter {:?} vs {:?}", slot.shape(), v.shape()));
            }
            **slot = v.clone();
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, w) = x.dims2()?;
        if w != self.input_width() {
            return shape_err(format!("input width {w}, network expects {}", self.input_width()));
        }
        Ok(())
    }

    /// Training forward at optimizer step `step`; updates every normalization layer's moving statistics.
    pub fn forward_train(&mut self, x: &Tensor, step: u64) -> Result<(Tensor, NetCache)> {
        self.check_input(x)?;
        let bounds = self.spec.schedule.bounds(step);
        let axes = Axes::per_feature(2);
        let last = self.dense.len() - 1;
        let mut layers = Vec::with_capacity(self.dense.len());
        let mut h = x.clone();
        for i in 0..self.dense.len() {
            let z = self.dense[i].forward(&h)?;
            let mode = self.mode(i);
            let (z, norm) = match (&mut self.norms[i], mode) {
                (Some(state), NormMode::BatchNorm) => {
                    let (y, c) = bn_forward_train(&z, state, &axes)?;
                    (y, Some(c))
                }
                (Some(state), NormMode::BatchRenorm) => {
                    let (y, c) = brn_forward_train_bounded(&z, state, &axes, bounds)?;
                    (y, Some(c))
                }
                _ => (z, None),
            };
            if i == last {
                layers.push(LayerCache { input: h, norm, pre_activation: None });
                h = z;
            } else {
                let next = relu(&z);
                layers.push(LayerCache { input: h, norm, pre_activation: Some(z) });
                h = next;
            }
        }
        Ok((h, NetCache { layers }))
    }

    fn forward_with(&self, x: &Tensor, mut norm_fn: impl FnMut(usize, &Tensor, &NormState) -> Result<Tensor>) -> Result<Tensor> {
        self.check_input(x)?;
        let last = self.dense.len() - 1;
        let mut h = x.clone();
        for i in 0..self.dense.len() {
            let mut z = self.dense[i].forward(&h)?;
            if let Some(state) = &self.norms[i] {
                z = norm_fn(i, &z, state)?;
            }
            h = if i == last { z } else { relu(&z) };
        }
        Ok(h)
    }

    /// Inference forward using moving statistics; each row depends only on itself.
    pub fn forward_infer(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, |_, z, state| norm_forward_inference(z, state))
    }

    /// Forward normalizing with the batch's own moments, no state change.
    pub fn forward_trainmode(&self, x: &Tensor) -> Result<Tensor> {
        let axes = Axes::per_feature(2);
        self.forward_with(x, |_, z, state| norm_forward_trainmode_eval(z, state, &axes))
    }

    /// Training-forward arithmetic with each layer's `(r, d)` fixed; pure.
    pub fn forward_frozen(&self, x: &Tensor, corrections: &[Option<(Tensor, Tensor)>]) -> Result<Tensor> {
        let axes = Axes::per_feature(2);
        self.forward_with(x, |i, z, state| match corrections.get(i) {
            Some(Some((r, d))) => forward_with_correction(z, state, &axes, r, d),
            _ => shape_err(format!("missing correction for layer {i}")),
        })
    }

    /// Backprop `d_logits` through the cached training forward.
    pub fn backward(&self, cache: &NetCache, d_logits: &Tensor) -> Result<Gradients> {
        if cache.layers.len() != self.dense.len() {
            return shape_err("cache does not match network depth");
        }
        let mut per_layer: Vec<Vec<Tensor>> = vec![Vec::new(); self.dense.len()];
        let mut upstream = d_logits.clone();
        for i in (0..self.dense.len()).rev() {
            let lc = &cache.layers[i];
            let mut dz = match &lc.pre_activation {
                Some(pre) => upstream.zip_with(pre, |g, z| if z > 0.0 { g } else { 0.0 })?,
                None => upstream.clone(),
            };
            let mut norm_grads = Vec::new();
            if let (Some(state), Some(nc)) = (&self.norms[i], &lc.norm) {
                let g = brn_backward(&dz, nc, state)?;
                norm_grads.push(g.d_beta);
                if let Some(dg) = g.d_gamma {
                    norm_grads.push(dg);
                }
                dz = g.d_x;
            }
            let layer = &self.dense[i];
            // dz is (m, out), input (m, in)
            per_layer[i].push(dz.transpose()?.matmul(&lc.input)?);
            if layer.b.is_some() {
                per_layer[i].push(dz.reduce_sum(&Axes::new([0]))?);
            }
            per_layer[i].extend(norm_grads);
            if i > 0 {
                upstream = dz.matmul(&layer.w)?;
            }
        }
        Ok(Gradients(per_layer.into_iter().flatten().collect()))
    }

    /// Per-layer L2 gradient norms.
    pub fn grad_norms(&self, grads: &Gradients) -> Vec<f64> {
        let mut sq = vec![0.0; self.dense.len()];
        for (layer, g) in self.param_layers().into_iter().zip(&grads.0) {
            sq[layer] += g.data().iter().map(|v| v * v).sum::<f64>();
        }
        sq.into_iter().map(f64::sqrt).collect()
    }
}

/// Mean softmax cross-entropy and its gradient `(softmax - onehot) / m`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (m, k) = logits.dims2()?;
    if labels.len() != m {
        return shape_err(format!("{} labels for {m} rows", labels.len()));
    }
    let mut grad = vec![0.0; m * k];
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            grad[i * k + j] = (p - if j == label { 1.0 } else { 0.0 }) / m as f64;
        }
    }
    Ok((loss / m as f64, Tensor::new([m, k], grad)?))
}

/// Row-wise argmax.
pub fn predictions(logits: &Tensor) -> Result<Vec<usize>> {
    let (m, k) = logits.dims2()?;
    Ok((0..m)
        .map(|i| {
            let row = &logits.data()[i * k..(i + 1) * k];
            (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect())
}

/// Elementwise mean of several gradient sets.
pub fn aggregate_gradients(sets: &[Gradients]) -> Result<Gradients> {
    let first = sets.first().ok_or_else(|| Error::InvalidArgument("no gradient sets to aggregate".into()))?;
    let inv = 1.0 / sets.len() as f64;
    let mut acc: Vec<Tensor> = first.0.clone();
    for set in &sets[1..] {
        if set.0.len() != acc.len() {
            return shape_err("gradient sets differ in length");
        }
        for (a, g) in acc.iter_mut().zip(&set.0) {
            *a = a.add(g)?;
            if a.shape() != g.shape() {
                return shape_err("gradient shapes differ");
            }
        }
    }
    Ok(Gradients(acc.into_iter().map(|t| t.scale(inv)).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    RmsProp,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "momentum" => Ok(OptimizerKind::Momentum),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            _ => Err(Error::InvalidArgument(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Momentum coefficient.
    pub momentum: f64,
    /// RMSProp squared-gradient decay.
    pub decay: f64,
    /// RMSProp denominator epsilon.
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn rmsprop(lr: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::RmsProp, lr, momentum: 0.0, decay: 0.9, eps: 1e-8 }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::Sgd, lr, momentum: 0.0, decay: 0.9, eps: 1e-8 }
    }
}

/// First-order optimizer with per-parameter slot state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    slots: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        if !(config.lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {}", config.lr)));
        }
        Ok(Optimizer { config, slots: Vec::new() })
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &Gradients) -> Result<()> {
        if params.len() != grads.0.len() {
            return shape_err(format!("{} params, {} grads", params.len(), grads.0.len()));
        }
        if self.slots.is_empty() {
            self.slots = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        }
        let c = self.config;
        for ((p, g), slot) in params.iter_mut().zip(&grads.0).zip(self.slots.iter_mut()) {
            if p.shape() != g.shape() || slot.shape() != g.shape() {
                return shape_err(format!("param {:?} vs grad {:?}", p.shape(), g.shape()));
            }
            let pd = p.data_mut();
            let sd = slot.data_mut();
            for ((pv, &gv), sv) in pd.iter_mut().zip(g.data()).zip(sd.iter_mut()) {
                match c.kind {
                    OptimizerKind::Sgd => *pv -= c.lr * gv,
                    OptimizerKind::Momentum => {
                        *sv = c.momentum * *sv + gv;
                        *pv -= c.lr * *sv;
                    }
                    OptimizerKind::RmsProp => {
                        *sv = c.decay * *sv + (1.0 - c.decay) * gv * gv;
                        *pv -= c.lr * gv / (*sv + c.eps).sqrt();
                    }
                }
            }
        }
        Ok(())
    }
}

/// Exponentially decayed shadow copy of the trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEma {
    pub decay: f64,
    pub shadow: Vec<Tensor>,
}

impl ParamEma {
    pub fn new(net: &Mlp, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!("EMA decay must be in [0, 1), got {decay}")));
        }
        Ok(ParamEma { decay, shadow: net.params().into_iter().cloned().collect() })
    }

    pub fn update(&mut self, params: &[&Tensor]) -> Result<()> {
        if params.len() != self.shadow.len() {
            return shape_err("EMA shadow does not match parameters");
        }
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            *s = s.zip_with(p, |s, p| d * s + (1.0 - d) * p)?;
        }
        Ok(())
    }

    /// Copy of `net` carrying the shadow parameters.
    pub fn apply_to(&self, net: &Mlp) -> Result<Mlp> {
        let mut out = net.clone();
        out.set_params(&self.shadow)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(widths: Vec<usize>, mode: NormMode) -> NetworkSpec {
        NetworkSpec::uniform(widths, mode)
    }

    #[test]
    fn single_dense_is_affine() {
        let mut rng = Rng::new(1);
        let mut net = Mlp::new(spec(vec![3, 2], NormMode::None), &mut rng).unwrap();
        net.dense[0].b = Some(Tensor::vector(&[0.5, -1.0]));
        let x = rng.normal(&[4, 3], 0.0, 1.0).unwrap();
        let logits = net.forward_infer(&x).unwrap();
        let want = x.matmul(&net.dense[0].w.transpose().unwrap()).unwrap().add(&Tensor::vector(&[0.5, -1.0])).unwrap();
        assert!(logits.max_abs_diff(&want).unwrap() < 1e-15);
        let (train, _) = net.clone().forward_train(&x, 0).unwrap();
        assert_eq!(train, logits);
    }

    #[test]
    fn identity_layers_pass_through() {
        let mut rng = Rng::new(2);
        let mut net = Mlp::new(spec(vec![3, 3, 3], NormMode::None), &mut rng).unwrap();
        for d in &mut net.dense {
            let mut eye = Tensor::zeros([3, 3]);
            for i in 0..3 {
                eye.set(&[i, i], 1.0).unwrap();
            }
            d.w = eye;
        }
        // nonnegative input survives the ReLU
        let x = rng.normal(&[5, 3], 0.0, 1.0).unwrap().map(f64::abs);
        assert_eq!(net.forward_infer(&x).unwrap(), x);
    }

    #[test]
    fn inference_is_per_example() {
        let mut rng = Rng::new(3);
        let mut net = Mlp::new(spec(vec![4, 8, 3], NormMode::BatchRenorm), &mut rng).unwrap();
        let x = rng.normal(&[6, 4], 0.0, 1.0).unwrap();
        net.forward_train(&x, 0).unwrap();
        let all = net.forward_infer(&x).unwrap();
        let rows: Vec<_> = (0..6).map(|i| net.forward_infer(&x.slice_rows(i, i + 1).unwrap()).unwrap()).collect();
        assert_eq!(all, Tensor::concat_rows(&rows).unwrap());
    }

    #[test]
    fn xent_examples() {
        let (loss, d) = softmax_xent(&Tensor::zeros([3, 5]), &[0, 1, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-14);
        let (m, k) = d.dims2().unwrap();
        for i in 0..m {
            let s: f64 = d.data()[i * k..(i + 1) * k].iter().sum();
            assert!(s.abs() < 1e-15);
        }
        let logits = Tensor::from_rows(&[vec![50.0, 0.0, 0.0]]).unwrap();
        let (loss, _) = softmax_xent(&logits, &[0]).unwrap();
        assert!(loss < 1e-20);
        assert_eq!(
            softmax_xent(&logits, &[3]).unwrap_err(),
            Error::LabelOutOfRange { label: 3, classes: 3 }
        );
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = Rng::new(4);
        let mut net = Mlp::new(spec(vec![3, 5, 5, 2], NormMode::BatchRenorm), &mut rng).unwrap();
        let x = rng.normal(&[4, 3], 0.0, 1.0).unwrap();
        let (_, cache) = net.forward_train(&x, 0).unwrap();
        let g = net.backward(&cache, &Tensor::zeros([4, 2])).unwrap();
        assert!(g.0.iter().all(|t| t.max_abs() == 0.0));
        assert_eq!(g.0.len(), net.params().len());
    }

    #[test]
    fn single_dense_weight_gradient() {
        let mut rng = Rng::new(5);
        let mut net = Mlp::new(spec(vec![3, 2], NormMode::None), &mut rng).unwrap();
        let x = rng.normal(&[4, 3], 0.0, 1.0).unwrap();
        let dl = rng.normal(&[4, 2], 0.0, 1.0).unwrap();
        let (_, cache) = net.forward_train(&x, 0).unwrap();
        let g = net.backward(&cache, &dl).unwrap();
        assert_eq!(g.0[0], dl.transpose().unwrap().matmul(&x).unwrap());
        assert_eq!(g.0[1], dl.reduce_sum(&Axes::new([0])).unwrap());
    }

    #[test]
    fn norm_layers_drop_dense_bias() {
        let net = Mlp::new(spec(vec![4, 6, 6, 3], NormMode::BatchNorm), &mut Rng::new(0)).unwrap();
        assert!(net.dense[0].b.is_none() && net.dense[1].b.is_none());
        assert!(net.dense[2].b.is_some());
        // W0, beta0, W1, beta1, W2, b2
        assert_eq!(net.params().len(), 6);
        assert_eq!(net.param_layers(), vec![0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn sgd_examples() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1)).unwrap();
        opt.step(&mut [&mut p], &Gradients(vec![Tensor::scalar(2.0)])).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        opt.step(&mut [&mut p], &Gradients(vec![Tensor::scalar(0.0)])).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_constant_gradient_limit() {
        // recurrence oracle: acc_t = 0.9 acc + 0.1 g^2 -> g^2, so |update| -> lr
        let (lr, g) = (0.01, 3.0);
        let mut p = Tensor::scalar(0.0);
        let mut opt = Optimizer::new(OptimizerConfig::rmsprop(lr)).unwrap();
        let mut last = 0.0;
        let mut acc = 0.0f64;
        for _ in 0..200 {
            let before = p.data()[0];
            opt.step(&mut [&mut p], &Gradients(vec![Tensor::scalar(g)])).unwrap();
            last = before - p.data()[0];
            acc = 0.9 * acc + 0.1 * g * g;
        }
        let expected = lr * g / (acc + 1e-8).sqrt();
        assert!((last - expected).abs() < 1e-15);
        assert!((last - lr).abs() < 1e-8);
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut rng = Rng::new(6);
        let mut net = Mlp::new(spec(vec![3, 4, 2], NormMode::BatchRenorm), &mut rng).unwrap();
        let before = net.clone();
        let grads = Gradients(net.params().iter().map(|p| p.map(|_| 1.0)).collect());
        for kind in [OptimizerKind::Sgd, OptimizerKind::Momentum, OptimizerKind::RmsProp] {
            let cfg = OptimizerConfig { kind, lr: 0.0, momentum: 0.9, decay: 0.9, eps: 1e-8 };
            Optimizer::new(cfg).unwrap().step(&mut net.params_mut(), &grads).unwrap();
        }
        assert_eq!(net, before);
    }

    #[test]
    fn ema_examples() {
        let mut net = Mlp::new(spec(vec![2, 1], NormMode::None), &mut Rng::new(0)).unwrap();
        net.dense[0].w = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let mut ema = ParamEma::new(&net, 0.9).unwrap();
        ema.shadow = vec![Tensor::zeros([1, 2]), Tensor::zeros([1])];
        ema.update(&net.params()).unwrap();
        assert!(ema.shadow[0].data().iter().all(|&v| (v - 0.1).abs() < 1e-15));

        let mut ema0 = ParamEma::new(&net, 0.0).unwrap();
        ema0.shadow = vec![Tensor::zeros([1, 2]), Tensor::zeros([1])];
        ema0.update(&net.params()).unwrap();
        assert_eq!(ema0.shadow, net.params().into_iter().cloned().collect::<Vec<_>>());

        let mut gaps = Vec::new();
        for _ in 0..50 {
            ema.update(&net.params()).unwrap();
            gaps.push(1.0 - ema.shadow[0].data()[0]);
        }
        for w in gaps.windows(2) {
            assert!((w[1] / w[0] - 0.9).abs() < 1e-9);
        }
        assert!(ParamEma::new(&net, 1.0).is_err());
    }

    #[test]
    fn aggregation_examples() {
        let g = Gradients(vec![Tensor::vector(&[1.0, -2.0]), Tensor::scalar(3.0)]);
        assert_eq!(aggregate_gradients(std::slice::from_ref(&g)).unwrap(), g);
        let neg = Gradients(g.0.iter().map(|t| t.scale(-1.0)).collect());
        let z = aggregate_gradients(&[g.clone(), neg]).unwrap();
        assert!(z.0.iter().all(|t| t.max_abs() == 0.0));
        assert_eq!(aggregate_gradients(&[g.clone(), g.clone(), g.clone(), g.clone()]).unwrap(), g);
        assert!(aggregate_gradients(&[]).is_err());
    }
}
