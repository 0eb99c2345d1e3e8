//! Detection metrics, the reconstruction baseline, latency measurement and
//! report emission.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_decode_step, encode_trajectory, EpsModel, NoiseSchedule};
use crate::error::{contract, io_err, Result};
use crate::tensor::Tensor;

fn check_scores(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(contract("metric needs non-empty ID and OOD score sets"));
    }
    if id.iter().chain(ood).any(|v| v.is_nan()) {
        return Err(contract("metric scores must not be NaN"));
    }
    Ok(())
}

/// Twice the Mann–Whitney U of OOD over ID: `Σ 2·[ood > id] + [ood = id]`.
pub fn mann_whitney_u2(id: &[f64], ood: &[f64]) -> Result<u64> {
    check_scores(id, ood)?;
    let mut sorted = id.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(ood
        .iter()
        .map(|&s| {
            let below = sorted.partition_point(|&v| v < s);
            let not_above = sorted.partition_point(|&v| v <= s);
            (2 * below + (not_above - below)) as u64
        })
        .sum())
}

/// Probability that a random OOD score exceeds a random ID score, ties ½.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    let u2 = mann_whitney_u2(id, ood)?;
    Ok(u2 as f64 / (2 * id.len() * ood.len()) as f64)
}

/// Per-source AUROC of each OOD tag against the full ID set.
pub fn auroc_by_source(id: &[f64], ood: &[f64], tags: &[String]) -> Result<BTreeMap<String, f64>> {
    if tags.len() != ood.len() {
        return Err(contract("one source tag per OOD score is required"));
    }
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (s, tag) in ood.iter().zip(tags) {
        groups.entry(tag).or_default().push(*s);
    }
    groups
        .into_iter()
        .map(|(tag, scores)| Ok((tag.to_string(), auroc(id, &scores)?)))
        .collect()
}

/// FPR at the highest threshold whose TPR (`#ood ≥ thr / n_ood`) reaches `tpr`.
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], tpr: f64) -> Result<f64> {
    check_scores(id, ood)?;
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(contract(format!("target TPR must lie in (0, 1], got {tpr}")));
    }
    let n = ood.len();
    let mut k = ((tpr * n as f64).ceil() as usize).clamp(1, n);
    while k > 1 && (k - 1) as f64 / n as f64 >= tpr {
        k -= 1;
    }
    while (k as f64 / n as f64) < tpr && k < n {
        k += 1;
    }
    let mut desc = ood.to_vec();
    desc.sort_by(|a, b| b.total_cmp(a));
    let thr = desc[k - 1];
    Ok(id.iter().filter(|&&v| v >= thr).count() as f64 / id.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// `‖x0 − x̂0‖₂`.
    pub error: f64,
    pub nfe: usize,
}

/// DDIM-encodes `x0` to level `S_rec·τ_rec`, decodes back to 0 and measures
/// the L2 error; `2·S_rec` model evaluations.
pub fn reconstruction_baseline<M: EpsModel + ?Sized>(
    model: &M,
    x0: &Tensor,
    s_rec: usize,
    stride: usize,
    schedule: &NoiseSchedule,
) -> Result<Reconstruction> {
    if s_rec < 2 {
        return Err(contract(format!("reconstruction needs S_rec >= 2, got {s_rec}")));
    }
    let traj = encode_trajectory(model, x0, 0, s_rec, stride, schedule, 0)?;
    let mut x = traj.end;
    for k in (1..=s_rec).rev() {
        let t = k * stride;
        let eps = model.predict_eps(&x, t)?;
        x = ddim_decode_step(&x, &eps, t, t - stride, schedule)?;
    }
    Ok(Reconstruction {
        error: x0.sub(&x)?.norm_l2(),
        nfe: 2 * s_rec,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub median_seconds_per_sample: f64,
    pub warmup_calls: usize,
    pub timed_calls: usize,
    pub hardware: String,
}

/// Median wall time of `calls` invocations after `warmup` untimed ones.
pub fn measure_latency(mut f: impl FnMut() -> Result<()>, warmup: usize, calls: usize) -> Result<LatencyReport> {
    if calls == 0 {
        return Err(contract("latency needs at least one timed call"));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(calls);
    for _ in 0..calls {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let median = if calls % 2 == 1 {
        times[calls / 2]
    } else {
        0.5 * (times[calls / 2 - 1] + times[calls / 2])
    };
    Ok(LatencyReport {
        median_seconds_per_sample: median,
        warmup_calls: warmup,
        timed_calls: calls,
        hardware: hardware_string(),
    })
}

pub fn hardware_string() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!("{model} ({}, single-threaded)", std::env::consts::ARCH)
}

/// Resolved scoring and run parameters echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub s: usize,
    /// First recorded noise level.
    pub start: usize,
    pub p: u32,
    pub tau: usize,
    pub t: usize,
    pub alpha: f64,
    pub seeds: BTreeMap<String, u64>,
    pub finite_difference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub benchmark: String,
    pub method: String,
    /// On the method's continuous OOD score.
    pub auroc: f64,
    pub fpr_at_95: f64,
    pub per_source_auroc: BTreeMap<String, f64>,
    /// AUROC of the raw (p-norm)^p anomaly value, and of the unpowered norm.
    pub auroc_raw: Option<f64>,
    pub auroc_raw_unpowered: Option<f64>,
    pub nfe_per_sample: usize,
    /// Present only when latency was measured; kept out of reproducible reports.
    pub wall_time_per_sample: Option<LatencyReport>,
    pub n_id: usize,
    pub n_ood: usize,
    /// Fraction of OOD test samples flagged by the validation-quantile rule.
    pub ood_flag_rate: Option<f64>,
    /// Fraction of ID test samples flagged by the same rule.
    pub id_flag_rate: Option<f64>,
    pub config: ConfigEcho,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.auroc) || !unit(self.fpr_at_95) || !self.per_source_auroc.values().all(|&v| unit(v)) {
            return Err(contract(format!("report {} / {} has metrics outside [0, 1]", self.benchmark, self.method)));
        }
        Ok(())
    }
}

pub const CSV_HEADER: &str = "benchmark,method,auroc,fpr_at_95,auroc_raw,auroc_raw_unpowered,nfe_per_sample,n_id,n_ood,ood_flag_rate,id_flag_rate,median_seconds_per_sample";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn csv_row(r: &EvalReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        r.benchmark,
        r.method,
        r.auroc,
        r.fpr_at_95,
        opt(r.auroc_raw),
        opt(r.auroc_raw_unpowered),
        r.nfe_per_sample,
        r.n_id,
        r.n_ood,
        opt(r.ood_flag_rate),
        opt(r.id_flag_rate),
        opt(r.wall_time_per_sample.as_ref().map(|l| l.median_seconds_per_sample)),
    )
}

/// Writes `report.json` (array of reports) and `summary.csv` (one row per
/// benchmark/method pair) into `dir`.
pub fn emit_report(reports: &[EvalReport], dir: &Path) -> Result<()> {
    for r in reports {
        r.validate()?;
    }
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let json_path = dir.join("report.json");
    let mut json = serde_json::to_string_pretty(reports)?;
    json.push('\n');
    std::fs::write(&json_path, json).map_err(|e| io_err(&json_path, e))?;
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in reports {
        csv.push_str(&csv_row(r));
        csv.push('\n');
    }
    let csv_path = dir.join("summary.csv");
    std::fs::write(&csv_path, csv).map_err(|e| io_err(&csv_path, e))
}

pub fn load_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
