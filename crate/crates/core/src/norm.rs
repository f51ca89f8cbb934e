//! Batch normalization and batch renormalization layers.
//!
//! Both layers share one training forward: normalize with minibatch moments,
//! then apply the per-feature correction `x_hat = (x - mu_B) / sigma_B * r + d`.
//! Batchnorm is the special case `r = 1, d = 0`. For batch renormalization
//! `r = clip(sigma_B / sigma, 1/r_max, r_max)` and
//! `d = clip((mu_B - mu) / sigma, -d_max, d_max)` are computed from the moving
//! statistics *before* they are updated, and backward treats both as
//! constants of the step.
//!
//! Inputs are `(batch, features)` or `(batch, channels, height, width)`;
//! statistics are per feature (dim 1), reduced over every other axis.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Axes, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_ALPHA: f64 = 0.01;

/// Moving statistics and affine parameters of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormState {
    /// Moving mean.
    pub mu: Tensor,
    /// Moving standard deviation (averaged directly, not via the variance).
    pub sigma: Tensor,
    pub beta: Tensor,
    pub gamma: Tensor,
    /// When false, `gamma` stays at 1 and gets no gradient.
    pub learn_gamma: bool,
    pub epsilon: f64,
    /// Moving-average update rate.
    pub alpha: f64,
    /// Number of renormalizing training forwards applied to this layer.
    pub step: u64,
}

impl NormState {
    /// Fresh state: `mu = 0`, `sigma = 1`, `beta = 0`, `gamma = 1`.
    ///
    /// `epsilon = 0` is accepted so that exact identities can be checked; a
    /// zero-variance batch then fails instead of dividing by zero.
    pub fn new(features: usize, epsilon: f64, alpha: f64, learn_gamma: bool) -> Result<Self> {
        if features == 0 {
            return Err(Error::InvalidArgument("zero features".into()));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must be in (0, 1], got {alpha}")));
        }
        Ok(NormState {
            mu: Tensor::zeros([features]),
            sigma: Tensor::ones([features]),
            beta: Tensor::zeros([features]),
            gamma: Tensor::ones([features]),
            learn_gamma,
            epsilon,
            alpha,
            step: 0,
        })
    }

    pub fn with_defaults(features: usize) -> Self {
        Self::new(features, DEFAULT_EPSILON, DEFAULT_ALPHA, false).expect("defaults are valid")
    }

    pub fn features(&self) -> usize {
        self.mu.len()
    }

    fn check_input(&self, x: &Tensor, axes: &Axes) -> Result<usize> {
        if x.rank() != 2 && x.rank() != 4 {
            return shape_err(format!("normalization input must be rank 2 or 4, got {:?}", x.shape()));
        }
        axes.validate(x.rank())?;
        let reduced = axes.reduced_shape(x.shape());
        if reduced != [self.features()] {
            return shape_err(format!(
                "axes {:?} leave {reduced:?} for input {:?}, state has {} features",
                axes.as_slice(),
                x.shape(),
                self.features()
            ));
        }
        Ok(axes.count(x.shape()))
    }

    fn per_feature(&self, t: &Tensor, x_shape: &[usize], axes: &Axes) -> Result<Tensor> {
        t.reshape(axes.kept_shape(x_shape))
    }
}

/// Step-indexed limits on the renormalization correction.
///
/// `r_max = 1, d_max = 0` until `warmup_steps`, then each bound rises linearly
/// to its final value at its own ramp end and stays there.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionSchedule {
    pub warmup_steps: u64,
    pub r_ramp_end: u64,
    pub d_ramp_end: u64,
    pub r_max_final: f64,
    pub d_max_final: f64,
}

/// `(r_max, d_max)` in force at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrectionBounds {
    pub r_max: f64,
    pub d_max: f64,
}

impl CorrectionBounds {
    /// Pins `r = 1, d = 0`.
    pub const BATCHNORM: CorrectionBounds = CorrectionBounds { r_max: 1.0, d_max: 0.0 };
    pub const UNCLIPPED: CorrectionBounds = CorrectionBounds { r_max: f64::INFINITY, d_max: f64::INFINITY };

    pub fn new(r_max: f64, d_max: f64) -> Result<Self> {
        if !(r_max >= 1.0) || !(d_max >= 0.0) {
            return Err(Error::InvalidArgument(format!("need r_max >= 1 and d_max >= 0, got {r_max}, {d_max}")));
        }
        Ok(CorrectionBounds { r_max, d_max })
    }
}

impl CorrectionSchedule {
    /// Anchors used for the large-scale runs: 5k warmup, d_max = 5 at 25k, r_max = 3 at 40k.
    pub const REFERENCE: CorrectionSchedule = CorrectionSchedule {
        warmup_steps: 5000,
        r_ramp_end: 40000,
        d_ramp_end: 25000,
        r_max_final: 3.0,
        d_max_final: 5.0,
    };

    /// Reference anchors scaled down by ~16 for short runs.
    pub const DESK: CorrectionSchedule = CorrectionSchedule {
        warmup_steps: 300,
        r_ramp_end: 2400,
        d_ramp_end: 1500,
        r_max_final: 3.0,
        d_max_final: 5.0,
    };

    /// Schedule that never allows any correction.
    pub fn batchnorm() -> Self {
        CorrectionSchedule { warmup_steps: 0, r_ramp_end: 0, d_ramp_end: 0, r_max_final: 1.0, d_max_final: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_max_final >= 1.0) {
            return Err(Error::InvalidArgument(format!("r_max_final must be >= 1, got {}", self.r_max_final)));
        }
        if !(self.d_max_final >= 0.0) {
            return Err(Error::InvalidArgument(format!("d_max_final must be >= 0, got {}", self.d_max_final)));
        }
        if self.r_ramp_end < self.warmup_steps || self.d_ramp_end < self.warmup_steps {
            return Err(Error::InvalidArgument("ramp ends must not precede warmup_steps".into()));
        }
        Ok(())
    }

    pub fn bounds(&self, step: u64) -> CorrectionBounds {
        CorrectionBounds {
            r_max: ramp(step, self.warmup_steps, self.r_ramp_end, 1.0, self.r_max_final),
            d_max: ramp(step, self.warmup_steps, self.d_ramp_end, 0.0, self.d_max_final),
        }
    }
}

fn ramp(step: u64, start: u64, end: u64, from: f64, to: f64) -> f64 {
    if step < start {
        from
    } else if step >= end {
        to
    } else {
        from + (to - from) * (step - start) as f64 / (end - start) as f64
    }
}

/// Values saved by a training forward for the matching backward.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub mu_b: Tensor,
    /// `sqrt(var_B + epsilon)`.
    pub sigma_b: Tensor,
    /// Correction scale, constant for backward.
    pub r: Tensor,
    /// Correction shift, constant for backward.
    pub d: Tensor,
    pub x_hat: Tensor,
    pub x_centered: Tensor,
    /// Elements reduced per feature.
    pub m: usize,
    pub axes: Axes,
    /// Features whose `r` / `d` hit a clip bound.
    pub r_clipped: usize,
    pub d_clipped: usize,
}

impl ForwardCache {
    pub fn r_clip_fraction(&self) -> f64 {
        self.r_clipped as f64 / self.r.len() as f64
    }

    pub fn d_clip_fraction(&self) -> f64 {
        self.d_clipped as f64 / self.d.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormGradients {
    pub d_x: Tensor,
    pub d_beta: Tensor,
    /// `None` when gamma is frozen.
    pub d_gamma: Option<Tensor>,
}

/// Minibatch mean and `sqrt(var + eps)` per feature.
fn batch_moments(x: &Tensor, state: &NormState, axes: &Axes) -> Result<(Tensor, Tensor, usize)> {
    let m = state.check_input(x, axes)?;
    if m < 2 {
        return Err(Error::DegenerateBatch { m });
    }
    let mu_b = x.reduce_mean(axes)?;
    let var = x.reduce_biased_var(axes, &mu_b)?;
    let sigma_b = var.map(|v| (v + state.epsilon).sqrt());
    if sigma_b.data().contains(&0.0) {
        return Err(Error::InvalidArgument("zero minibatch deviation with epsilon = 0".into()));
    }
    Ok((mu_b, sigma_b, m))
}

/// Normalize with minibatch moments and a given correction; pure.
fn normalize(
    x: &Tensor,
    state: &NormState,
    axes: &Axes,
    bounds: Option<CorrectionBounds>,
) -> Result<(Tensor, ForwardCache)> {
    let (mu_b, sigma_b, m) = batch_moments(x, state, axes)?;
    let f = state.features();
    let (r, d, r_clipped, d_clipped) = match bounds {
        None => (Tensor::ones([f]), Tensor::zeros([f]), 0, 0),
        Some(b) => {
            let r_raw = sigma_b.div(&state.sigma)?;
            let d_raw = mu_b.sub(&state.mu)?.div(&state.sigma)?;
            let r = r_raw.clip(1.0 / b.r_max, b.r_max)?;
            let d = d_raw.clip(-b.d_max, b.d_max)?;
            let rc = r.data().iter().zip(r_raw.data()).filter(|(a, b)| a != b).count();
            let dc = d.data().iter().zip(d_raw.data()).filter(|(a, b)| a != b).count();
            (r, d, rc, dc)
        }
    };
    let (y, x_hat, x_centered) = apply_correction(x, state, axes, &mu_b, &sigma_b, &r, &d)?;
    let cache = ForwardCache { mu_b, sigma_b, r, d, x_hat, x_centered, m, axes: axes.clone(), r_clipped, d_clipped };
    Ok((y, cache))
}

fn apply_correction(
    x: &Tensor,
    state: &NormState,
    axes: &Axes,
    mu_b: &Tensor,
    sigma_b: &Tensor,
    r: &Tensor,
    d: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let pf = |t: &Tensor| state.per_feature(t, x.shape(), axes);
    let x_centered = x.sub(&pf(mu_b)?)?;
    let x_hat = x_centered.div(&pf(sigma_b)?)?.mul(&pf(r)?)?.add(&pf(d)?)?;
    let y = x_hat.mul(&pf(&state.gamma)?)?.add(&pf(&state.beta)?)?;
    Ok((y, x_hat, x_centered))
}

/// Training forward with minibatch moments but caller-supplied `r`, `d`.
///
/// This is the frozen-correction function whose derivative `brn_backward`
/// computes; it does not touch `state`.
pub fn forward_with_correction(x: &Tensor, state: &NormState, axes: &Axes, r: &Tensor, d: &Tensor) -> Result<Tensor> {
    let (mu_b, sigma_b, _) = batch_moments(x, state, axes)?;
    if r.shape() != [state.features()] || d.shape() != [state.features()] {
        return shape_err("r and d must be per-feature");
    }
    Ok(apply_correction(x, state, axes, &mu_b, &sigma_b, r, d)?.0)
}

/// Exponential moving average of the minibatch mean and standard deviation.
pub fn update_moving_stats(state: &mut NormState, mu_b: &Tensor, sigma_b: &Tensor) -> Result<()> {
    if mu_b.shape() != state.mu.shape() || sigma_b.shape() != state.sigma.shape() {
        return shape_err(format!(
            "moving stats {:?}, batch stats {:?} / {:?}",
            state.mu.shape(),
            mu_b.shape(),
            sigma_b.shape()
        ));
    }
    let a = state.alpha;
    state.mu = state.mu.zip_with(mu_b, |mu, mb| mu + a * (mb - mu))?;
    state.sigma = state.sigma.zip_with(sigma_b, |s, sb| s + a * (sb - s))?;
    Ok(())
}

/// Batchnorm training forward; updates the moving statistics.
pub fn bn_forward_train(x: &Tensor, state: &mut NormState, axes: &Axes) -> Result<(Tensor, ForwardCache)> {
    let (y, cache) = normalize(x, state, axes, None)?;
    update_moving_stats(state, &cache.mu_b, &cache.sigma_b)?;
    Ok((y, cache))
}

/// Batch renormalization training forward with the bounds scheduled for `state.step`.
pub fn brn_forward_train(
    x: &Tensor,
    state: &mut NormState,
    axes: &Axes,
    sched: &CorrectionSchedule,
) -> Result<(Tensor, ForwardCache)> {
    let bounds = sched.bounds(state.step);
    brn_forward_train_bounded(x, state, axes, bounds)
}

/// Batch renormalization training forward with explicit bounds.
///
/// `r` and `d` use the moving statistics as they were before this call; the
/// statistics are updated afterwards and the step counter incremented.
pub fn brn_forward_train_bounded(
    x: &Tensor,
    state: &mut NormState,
    axes: &Axes,
    bounds: CorrectionBounds,
) -> Result<(Tensor, ForwardCache)> {
    let (y, cache) = normalize(x, state, axes, Some(bounds))?;
    update_moving_stats(state, &cache.mu_b, &cache.sigma_b)?;
    state.step += 1;
    Ok((y, cache))
}

/// Backward through the renormalized forward, with `r` and `d` held constant.
pub fn brn_backward(d_y: &Tensor, cache: &ForwardCache, state: &NormState) -> Result<NormGradients> {
    if d_y.shape() != cache.x_hat.shape() {
        return shape_err(format!("d_y {:?} vs forward output {:?}", d_y.shape(), cache.x_hat.shape()));
    }
    let shape = d_y.shape();
    let axes = &cache.axes;
    let pf = |t: &Tensor| state.per_feature(t, shape, axes);
    let m = cache.m as f64;

    let g = d_y.mul(&pf(&state.gamma)?)?;
    let sigma_b = &cache.sigma_b;
    let r = &cache.r;

    // dl/dsigma_B = sum_i g_i (x_i - mu_B) * (-r / sigma_B^2)
    let d_sigma_b = g
        .mul(&cache.x_centered)?
        .reduce_sum(axes)?
        .mul(&r.zip_with(sigma_b, |r, s| -r / (s * s))?)?;
    // dl/dmu_B = sum_i g_i * (-r / sigma_B)
    let d_mu_b = g.reduce_sum(axes)?.mul(&r.zip_with(sigma_b, |r, s| -r / s)?)?;

    let r_over_sigma = r.div(sigma_b)?;
    let d_x = g
        .mul(&pf(&r_over_sigma)?)?
        .add(&cache.x_centered.mul(&pf(&d_sigma_b.div(&sigma_b.scale(m))?)?)?)?
        .add(&pf(&d_mu_b.scale(1.0 / m))?)?;

    let d_beta = d_y.reduce_sum(axes)?;
    let d_gamma = if state.learn_gamma { Some(d_y.mul(&cache.x_hat)?.reduce_sum(axes)?) } else { None };
    Ok(NormGradients { d_x, d_beta, d_gamma })
}

/// Batchnorm backward; the cache carries `r = 1, d = 0`.
pub fn bn_backward(d_y: &Tensor, cache: &ForwardCache, state: &NormState) -> Result<NormGradients> {
    brn_backward(d_y, cache, state)
}

/// Inference: `gamma * (x - mu) / sigma + beta` with the moving statistics.
pub fn norm_forward_inference(x: &Tensor, state: &NormState) -> Result<Tensor> {
    if x.rank() != 2 && x.rank() != 4 {
        return shape_err(format!("normalization input must be rank 2 or 4, got {:?}", x.shape()));
    }
    let axes = Axes::per_feature(x.rank());
    state.check_input(x, &axes)?;
    let pf = |t: &Tensor| state.per_feature(t, x.shape(), &axes);
    x.sub(&pf(&state.mu)?)?.div(&pf(&state.sigma)?)?.mul(&pf(&state.gamma)?)?.add(&pf(&state.beta)?)
}

/// Batchnorm-style normalization with minibatch moments, leaving `state` untouched.
pub fn norm_forward_trainmode_eval(x: &Tensor, state: &NormState, axes: &Axes) -> Result<Tensor> {
    Ok(normalize(x, state, axes, None)?.0)
}
