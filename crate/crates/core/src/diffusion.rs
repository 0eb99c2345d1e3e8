//! Discrete variance-preserving noise schedules and deterministic (η = 0)
//! DDIM stepping in both time directions.
//!
//! The forward marginal at step `t` is `x_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·ε`. Running
//! the DDIM update with increasing `t` (encoding) traces the probability-flow
//! path from data towards noise; the ε̂ predictions collected on the way form a
//! [`Trajectory`].

use std::f64::consts::FRAC_PI_2;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// Offset `s` of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clamp on per-step β.
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    tag: String,
}

impl NoiseSchedule {
    /// Cosine schedule on `steps` discrete steps. `ᾱ_t = f(t)/f(0)` with
    /// `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`, realized as a cumulative product
    /// of per-step `β_t = min(1 − f(t)/f(t−1), 0.999)`.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(contract(format!("cosine schedule needs T >= 2, got {steps}")));
        }
        let f = |t: usize| {
            let u = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (u * FRAC_PI_2).cos().powi(2)
        };
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for t in 1..=steps {
            let beta = (1.0 - f(t) / f(t - 1)).min(MAX_BETA);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(Self {
            alpha_bar,
            tag: "cosine".into(),
        })
    }

    /// Builds a schedule from explicit cumulative coefficients `ᾱ_0..=ᾱ_T`.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>, tag: impl Into<String>) -> Result<Self> {
        if alpha_bar.len() < 3 {
            return Err(contract("schedule needs at least T = 2 steps"));
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(contract("alpha_bar entries must lie in (0, 1]"));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(contract("alpha_bar must be strictly decreasing"));
        }
        Ok(Self {
            alpha_bar,
            tag: tag.into(),
        })
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Marginal noise scale `σ_t = √(1−ᾱ_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).max(0.0).sqrt()
    }

    /// Per-step `β_t = 1 − ᾱ_t/ᾱ_{t−1}` for `t ≥ 1`; `β_0` is reported as `β_1`.
    pub fn beta(&self, t: usize) -> f64 {
        let t = t.max(1);
        1.0 - self.alpha_bar[t] / self.alpha_bar[t - 1]
    }

    /// Squared diffusion coefficient per step (`g_t² = β_t`).
    pub fn g2(&self, t: usize) -> f64 {
        self.beta(t)
    }

    /// `(1−ᾱ_{t−1})/(1−ᾱ_t)`, the alternative fixed-variance convention.
    /// Defined for `t ≥ 1`.
    pub fn posterior_ratio_variance(&self, t: usize) -> f64 {
        let t = t.max(1);
        (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t])
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(contract(format!("timestep {t} exceeds T = {}", self.steps())));
        }
        Ok(())
    }
}

/// A noise predictor ε̂(x_t, t).
pub trait EpsModel {
    fn data_dim(&self) -> usize;

    /// Predicted noise for a single sample `x_t` of shape `[d]`.
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl<M: EpsModel + ?Sized> EpsModel for &M {
    fn data_dim(&self) -> usize {
        (**self).data_dim()
    }

    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        (**self).predict_eps(x_t, t)
    }
}

/// Always predicts zero noise.
#[derive(Debug, Clone, Copy)]
pub struct ZeroEps {
    pub dim: usize,
}

impl EpsModel for ZeroEps {
    fn data_dim(&self) -> usize {
        self.dim
    }

    fn predict_eps(&self, x_t: &Tensor, _t: usize) -> Result<Tensor> {
        Ok(Tensor::zeros(x_t.shape()))
    }
}

/// Wraps a model and counts its forward evaluations (NFEs).
#[derive(Debug)]
pub struct CountingModel<M> {
    inner: M,
    calls: AtomicUsize,
}

impl<M: EpsModel> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn into_inner(self) -> M {
        self.inner
    }
}

impl<M: EpsModel> EpsModel for CountingModel<M> {
    fn data_dim(&self) -> usize {
        self.inner.data_dim()
    }

    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict_eps(x_t, t)
    }
}

/// Moves `x` from noise level `from` to `to` along the deterministic DDIM map
/// with a fixed ε̂.
fn ddim_transfer(x: &Tensor, eps: &Tensor, from: usize, to: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    if x.shape() != eps.shape() {
        return Err(Error::Shape {
            op: "ddim",
            lhs: x.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    if from == to {
        return Ok(x.clone());
    }
    let (a_from, s_from) = (schedule.alpha_bar(from).sqrt(), schedule.sigma(from));
    let (a_to, s_to) = (schedule.alpha_bar(to).sqrt(), schedule.sigma(to));
    let data = x
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&xi, &ei)| {
            let x0 = (xi - s_from * ei) / a_from;
            a_to * x0 + s_to * ei
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// DDIM step towards noise, `t → t_next` with `t ≤ t_next`.
pub fn ddim_encode_step(x_t: &Tensor, eps: &Tensor, t: usize, t_next: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_step(t_next)?;
    if t_next < t {
        return Err(contract(format!("encode step must move forward in time: {t} -> {t_next}")));
    }
    ddim_transfer(x_t, eps, t, t_next, schedule)
}

/// DDIM step towards data, `t → t_prev` with `t_prev ≤ t`.
pub fn ddim_decode_step(x_t: &Tensor, eps: &Tensor, t: usize, t_prev: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_step(t)?;
    if t_prev > t {
        return Err(contract(format!("decode step must move backward in time: {t} -> {t_prev}")));
    }
    ddim_transfer(x_t, eps, t, t_prev, schedule)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub t: usize,
    pub x: Tensor,
    pub eps: Tensor,
}

/// ε̂ predictions recorded along the forward DDIM path of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sample_id: usize,
    pub steps: Vec<TrajectoryStep>,
    /// State after the last step, at noise level `S·τ`.
    pub end: Tensor,
    pub stride: usize,
    pub total_steps: usize,
    pub schedule_tag: String,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Spacing between recorded levels in unit diffusion time, `τ/T`.
    pub fn dt(&self) -> f64 {
        self.stride as f64 / self.total_steps as f64
    }

    pub fn eps(&self) -> impl Iterator<Item = &Tensor> {
        self.steps.iter().map(|s| &s.eps)
    }
}

/// Encodes `x0` from level `start` through `start + τ, …, start + S·τ`,
/// evaluating the model once per step at the current state and level.
///
/// A positive `start` is reached from level 0 without a model call: at t = 0
/// the noise scale is zero, so the exact predictor is ε̂ = 0 and the DDIM step
/// reduces to `x_start = √ᾱ_start · x0`.
pub fn encode_trajectory<M: EpsModel + ?Sized>(
    model: &M,
    x0: &Tensor,
    start: usize,
    steps: usize,
    stride: usize,
    schedule: &NoiseSchedule,
    sample_id: usize,
) -> Result<Trajectory> {
    if steps == 0 || stride == 0 {
        return Err(contract("trajectory needs S >= 1 and stride >= 1"));
    }
    if start + steps * stride > schedule.steps() {
        return Err(contract(format!(
            "start + S·τ = {} exceeds T = {}",
            start + steps * stride,
            schedule.steps()
        )));
    }
    if x0.len() != model.data_dim() {
        return Err(Error::Shape {
            op: "encode_trajectory",
            lhs: x0.shape().to_vec(),
            rhs: vec![model.data_dim()],
        });
    }
    let mut recorded = Vec::with_capacity(steps);
    let mut x = x0.scale(schedule.alpha_bar(start).sqrt());
    for i in 0..steps {
        let t = start + i * stride;
        let eps = model.predict_eps(&x, t)?;
        let next = ddim_encode_step(&x, &eps, t, t + stride, schedule)?;
        recorded.push(TrajectoryStep { t, x, eps });
        x = next;
    }
    Ok(Trajectory {
        sample_id,
        steps: recorded,
        end: x,
        stride,
        total_steps: schedule.steps(),
        schedule_tag: schedule.tag().to_string(),
    })
}

/// Deterministic DDIM generation along `timesteps` (strictly decreasing,
/// ending at 0). `clip_x0` bounds the intermediate x̂0 estimate.
pub fn ddim_sample<M: EpsModel + ?Sized>(
    model: &M,
    x_start: &Tensor,
    timesteps: &[usize],
    schedule: &NoiseSchedule,
    clip_x0: Option<f64>,
) -> Result<Tensor> {
    if timesteps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(contract("sampling timesteps must be strictly decreasing"));
    }
    let mut x = x_start.clone();
    for w in timesteps.windows(2) {
        let (t, t_prev) = (w[0], w[1]);
        let eps = model.predict_eps(&x, t)?;
        x = match clip_x0 {
            None => ddim_decode_step(&x, &eps, t, t_prev, schedule)?,
            Some(c) => {
                let (a, s) = (schedule.alpha_bar(t).sqrt(), schedule.sigma(t));
                let (a_prev, s_prev) = (schedule.alpha_bar(t_prev).sqrt(), schedule.sigma(t_prev));
                let data = x
                    .data()
                    .iter()
                    .zip(eps.data())
                    .map(|(&xi, &ei)| {
                        let x0 = ((xi - s * ei) / a).clamp(-c, c);
                        let ei = (xi - a * x0) / s;
                        a_prev * x0 + s_prev * ei
                    })
                    .collect();
                Tensor::new(x.shape().to_vec(), data)?
            }
        };
    }
    Ok(x)
}

/// Evenly spaced decreasing timesteps from `start` down to 0 (inclusive), with
/// `count` transitions.
pub fn strided_timesteps(start: usize, count: usize) -> Vec<usize> {
    (0..=count)
        .rev()
        .map(|k| ((start as f64) * k as f64 / count as f64).round() as usize)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_endpoints_and_monotonicity() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        let last = s.alpha_bar(1000);
        assert!(last > 0.0 && last < 0.01, "ᾱ_T = {last}");
        assert!((1..=1000).all(|t| s.beta(t) <= MAX_BETA + 1e-15));
    }

    #[test]
    fn cosine_midpoint_regression() {
        // cos²((0.508/1.008)·π/2) / cos²((0.008/1.008)·π/2), evaluated at 50 digits.
        const ALPHA_BAR_500: f64 = 0.493_843_590_440_637_7;
        let s = NoiseSchedule::cosine(1000).unwrap();
        assert!((s.alpha_bar(500) - ALPHA_BAR_500).abs() < 1e-12, "{}", s.alpha_bar(500));
    }

    #[test]
    fn cosine_rejects_tiny_t() {
        assert!(NoiseSchedule::cosine(1).is_err());
    }

    #[test]
    fn zero_eps_is_pure_rescaling() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let x = Tensor::vector(vec![1.0, -2.0]);
        let y = ddim_encode_step(&x, &Tensor::zeros(&[2]), 20, 60, &s).unwrap();
        let k = (s.alpha_bar(60) / s.alpha_bar(20)).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - k * b).abs() < 1e-15);
        }
    }

    #[test]
    fn same_level_is_identity() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let x = Tensor::vector(vec![0.3]);
        let e = Tensor::vector(vec![0.9]);
        assert_eq!(ddim_encode_step(&x, &e, 40, 40, &s).unwrap(), x);
        assert_eq!(ddim_decode_step(&x, &e, 40, 40, &s).unwrap(), x);
    }

    #[test]
    fn wrong_direction_is_a_contract_error() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let x = Tensor::vector(vec![0.3]);
        assert!(matches!(ddim_encode_step(&x, &x, 10, 5, &s), Err(Error::Contract(_))));
        assert!(matches!(ddim_decode_step(&x, &x, 5, 10, &s), Err(Error::Contract(_))));
        assert!(ddim_encode_step(&x, &x, 10, 101, &s).is_err());
    }

    #[test]
    fn decode_to_zero_recovers_predicted_x0() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let x = Tensor::vector(vec![0.7, -0.2]);
        let eps = x.scale(1.0 / s.sigma(300));
        let x0 = ddim_decode_step(&x, &eps, 300, 0, &s).unwrap();
        assert!(x0.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn encode_counts_model_calls() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let model = CountingModel::new(ZeroEps { dim: 3 });
        let x0 = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let traj = encode_trajectory(&model, &x0, 0, 5, 20, &s, 0).unwrap();
        assert_eq!(model.calls(), 5);
        assert_eq!(traj.len(), 5);
        let ts: Vec<_> = traj.steps.iter().map(|st| st.t).collect();
        assert_eq!(ts, vec![0, 20, 40, 60, 80]);
        assert!(traj.eps().all(|e| e.data().iter().all(|&v| v == 0.0)));
        let k = s.alpha_bar(100).sqrt();
        for (a, b) in traj.end.data().iter().zip(x0.data()) {
            assert!((a - k * b).abs() < 1e-12);
        }

        model.reset();
        let traj = encode_trajectory(&model, &x0, 20, 5, 20, &s, 0).unwrap();
        assert_eq!(model.calls(), 5);
        let ts: Vec<_> = traj.steps.iter().map(|st| st.t).collect();
        assert_eq!(ts, vec![20, 40, 60, 80, 100]);
        let k = s.alpha_bar(20).sqrt();
        for (a, b) in traj.steps[0].x.data().iter().zip(x0.data()) {
            assert!((a - k * b).abs() < 1e-15);
        }
    }

    #[test]
    fn encode_rejects_overlong_trajectory() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let x0 = Tensor::vector(vec![1.0]);
        assert!(encode_trajectory(&ZeroEps { dim: 1 }, &x0, 0, 6, 20, &s, 0).is_err());
        assert!(encode_trajectory(&ZeroEps { dim: 1 }, &x0, 20, 5, 20, &s, 0).is_err());
        assert!(encode_trajectory(&ZeroEps { dim: 2 }, &x0, 0, 2, 20, &s, 0).is_err());
    }

    #[test]
    fn strided_timesteps_cover_range() {
        assert_eq!(strided_timesteps(100, 4), vec![100, 75, 50, 25, 0]);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(
            xs in prop::collection::vec(-3.0f64..3.0, 1..5),
            seed_eps in -2.0f64..2.0,
            t in 0usize..999,
            gap in 1usize..200,
        ) {
            let s = NoiseSchedule::cosine(1000).unwrap();
            let t_next = (t + gap).min(999);
            let x = Tensor::vector(xs.clone());
            let eps = Tensor::vector(xs.iter().map(|v| (v * 1.3 + seed_eps).sin()).collect());
            let up = ddim_encode_step(&x, &eps, t, t_next, &s).unwrap();
            let back = ddim_decode_step(&up, &eps, t_next, t, &s).unwrap();
            prop_assert!(back.max_abs_diff(&x).unwrap() <= 1e-10);
        }
    }
}
