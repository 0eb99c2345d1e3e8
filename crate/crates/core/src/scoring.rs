//! Trajectory anomaly score, KDE calibration over validation scores, and the
//! OOD decision rule.

use crate::diffusion::{encode_trajectory, EpsModel, NoiseSchedule, Trajectory};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Log-density floor; `exp(-745)` is the smallest positive subnormal.
pub const LOG_DENSITY_FLOOR: f64 = -745.0;

/// Convention string written into every report.
pub const FINITE_DIFFERENCE_CONVENTION: &str = "forward, last difference repeated, dt = tau/T";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringConfig {
    /// First recorded level.
    pub start: usize,
    /// Number of recorded steps S.
    pub steps: usize,
    /// Stride τ between recorded levels.
    pub stride: usize,
    pub p: u32,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self { start: 20, steps: 5, stride: 20, p: 3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyScore {
    pub sample_id: usize,
    /// `magnitude + curvature`.
    pub value: f64,
    /// `(‖Σ ε̂_i‖_p)^p`.
    pub magnitude: f64,
    /// `(‖Σ Δε̂_i/Δt‖_p)^p`.
    pub curvature: f64,
    pub steps: usize,
    pub p: u32,
    pub stride: usize,
}

impl AnomalyScore {
    /// p-norm of the concatenated `[Σ ε̂; Σ Δε̂/Δt]` vector, i.e. `value^(1/p)`.
    /// Strictly increasing in `value`, so rankings agree.
    pub fn unpowered(&self) -> f64 {
        self.value.powf(1.0 / f64::from(self.p))
    }
}

fn powered_p_norm(v: &[f64], p: u32) -> f64 {
    let p = i32::try_from(p).unwrap_or(i32::MAX);
    v.iter().map(|x| x.abs().powi(p)).sum()
}

pub fn anomaly_score(traj: &Trajectory, p: u32) -> Result<AnomalyScore> {
    let s = traj.len();
    if s < 2 {
        return Err(contract(format!("anomaly score needs S >= 2 steps, got {s}")));
    }
    if p < 1 {
        return Err(contract("anomaly score needs p >= 1"));
    }
    let d = traj.steps[0].eps.len();
    let dt = traj.dt();
    // summed in sorted order so the result does not depend on step order
    let sum_eps: Vec<f64> = (0..d)
        .map(|k| {
            let mut col: Vec<f64> = traj.eps().map(|e| e.data()[k]).collect();
            col.sort_by(f64::total_cmp);
            col.iter().sum()
        })
        .collect();
    let mut sum_diff = vec![0.0; d];
    for i in 0..s {
        // the last difference repeats the one before it
        let j = i.min(s - 2);
        let (a, b) = (traj.steps[j].eps.data(), traj.steps[j + 1].eps.data());
        for k in 0..d {
            sum_diff[k] += (b[k] - a[k]) / dt;
        }
    }
    let magnitude = powered_p_norm(&sum_eps, p);
    let curvature = powered_p_norm(&sum_diff, p);
    Ok(AnomalyScore {
        sample_id: traj.sample_id,
        value: magnitude + curvature,
        magnitude,
        curvature,
        steps: s,
        p,
        stride: traj.stride,
    })
}

/// Encodes one sample and scores its trajectory; exactly S model calls.
pub fn score_sample<M: EpsModel + ?Sized>(
    model: &M,
    x0: &Tensor,
    cfg: &ScoringConfig,
    schedule: &NoiseSchedule,
    sample_id: usize,
) -> Result<AnomalyScore> {
    let traj = encode_trajectory(model, x0, cfg.start, cfg.steps, cfg.stride, schedule, sample_id)?;
    anomaly_score(&traj, cfg.p)
}

/// Scores every row of `samples`, split across at most `threads` workers.
/// Output order matches row order regardless of the thread count.
pub fn score_rows<M: EpsModel + Sync + ?Sized>(
    model: &M,
    samples: &Tensor,
    cfg: &ScoringConfig,
    schedule: &NoiseSchedule,
    threads: usize,
) -> Result<Vec<AnomalyScore>> {
    let n = samples.rows();
    let score_range = |range: std::ops::Range<usize>| -> Result<Vec<AnomalyScore>> {
        range
            .map(|i| score_sample(model, &Tensor::vector(samples.row(i).to_vec()), cfg, schedule, i))
            .collect()
    };
    let threads = threads.max(1).min(n.max(1));
    if threads == 1 {
        return score_range(0..n);
    }
    let chunk = n.div_ceil(threads);
    let parts: Vec<Result<Vec<AnomalyScore>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|k| {
                let range = (k * chunk).min(n)..((k + 1) * chunk).min(n);
                scope.spawn(move || score_range(range))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scoring worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandwidthRule {
    Silverman,
    /// Zero-spread input: `h = 1e-3·max(|mean|, 1)`.
    DegenerateFallback,
}

impl BandwidthRule {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Silverman => "silverman",
            Self::DegenerateFallback => "degenerate-fallback",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdeModel {
    support: Vec<f64>,
    bandwidth: f64,
    rule: BandwidthRule,
}

impl KdeModel {
    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn rule(&self) -> BandwidthRule {
        self.rule
    }
}

/// Linear-interpolation quantile of sorted data (the "type 7" definition).
fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn kde_fit(val_scores: &[f64]) -> Result<KdeModel> {
    if val_scores.len() < 2 {
        return Err(contract(format!("KDE needs at least 2 scores, got {}", val_scores.len())));
    }
    if val_scores.iter().any(|v| !v.is_finite()) {
        return Err(contract("KDE scores must be finite"));
    }
    let n = val_scores.len() as f64;
    let mean = val_scores.iter().sum::<f64>() / n;
    let var = val_scores.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let mut sorted = val_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = sorted_quantile(&sorted, 0.75) - sorted_quantile(&sorted, 0.25);
    let std = var.sqrt();
    // a zero IQR with nonzero spread would otherwise zero the bandwidth
    let spread = if iqr > 0.0 { std.min(iqr / 1.34) } else { std };
    let h = 0.9 * spread * n.powf(-0.2);
    let (bandwidth, rule) = if h > 0.0 && h.is_finite() {
        (h, BandwidthRule::Silverman)
    } else {
        (1e-3 * mean.abs().max(1.0), BandwidthRule::DegenerateFallback)
    };
    Ok(KdeModel {
        support: val_scores.to_vec(),
        bandwidth,
        rule,
    })
}

/// Log-density of the fitted KDE, max-shifted and floored at
/// [`LOG_DENSITY_FLOOR`].
pub fn kde_logpdf(kde: &KdeModel, s: f64) -> f64 {
    let h = kde.bandwidth;
    let exponents = kde.support.iter().map(|&si| -0.5 * ((s - si) / h).powi(2));
    let max = exponents.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return LOG_DENSITY_FLOOR;
    }
    let sum: f64 = exponents.map(|e| (e - max).exp()).sum();
    let n = kde.support.len() as f64;
    let log = max + sum.ln() - (n * h * (2.0 * std::f64::consts::PI).sqrt()).ln();
    log.max(LOG_DENSITY_FLOOR)
}

/// Higher means more anomalous.
pub fn ood_score(kde: &KdeModel, s: &AnomalyScore) -> f64 {
    -kde_logpdf(kde, s.value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OodThreshold {
    pub alpha: f64,
    pub log_density: f64,
}

/// The α-quantile of validation log-densities: the `⌊α·n⌋`-th smallest.
pub fn calibrate_threshold(kde: &KdeModel, val_scores: &[f64], alpha: f64) -> Result<OodThreshold> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(contract(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if val_scores.is_empty() {
        return Err(contract("threshold calibration needs validation scores"));
    }
    let mut logs: Vec<f64> = val_scores.iter().map(|&v| kde_logpdf(kde, v)).collect();
    logs.sort_by(f64::total_cmp);
    let k = ((alpha * logs.len() as f64).floor() as usize).min(logs.len() - 1);
    Ok(OodThreshold {
        alpha,
        log_density: logs[k],
    })
}

pub fn ood_decision(kde: &KdeModel, s: &AnomalyScore, threshold: &OodThreshold) -> bool {
    kde_logpdf(kde, s.value) < threshold.log_density
}
