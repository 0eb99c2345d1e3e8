//! Benchmark orchestration: config files, split construction, training,
//! scoring, baselines and the files a run leaves behind.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::{
    gen_checker_texture, gen_gaussian_ring, gen_two_moons, gen_uniform_box, make_far_ood_split, make_near_ood_split,
    BenchmarkSplit, Dataset, Fractions, OodSource, PointToImage, Standardizer,
};
use crate::diffusion::{CountingModel, EpsModel, NoiseSchedule};
use crate::error::{contract, io_err, Error, Result};
use crate::eval::{
    auroc, auroc_by_source, emit_report, fpr_at_tpr, measure_latency, reconstruction_baseline, ConfigEcho, EvalReport,
};
use crate::rng::derive_seed;
use crate::sbdt::{load_tensors, save_tensors, TensorBundle};
use crate::score_net::{manifest_value, train, Init, NoisingVariance, ScoreModel, TrainConfig, DEFAULT_EMBED_DIM, DEFAULT_HIDDEN};
use crate::scoring::{
    calibrate_threshold, kde_fit, kde_logpdf, ood_decision, score_rows, score_sample, AnomalyScore, ScoringConfig,
    FINITE_DIFFERENCE_CONVENTION,
};
use crate::tensor::Tensor;

const BUILTIN: [(&str, &str); 5] = [
    ("B1", include_str!("../../../configs/B1.conf")),
    ("B2", include_str!("../../../configs/B2.conf")),
    ("B3", include_str!("../../../configs/B3.conf")),
    ("B4", include_str!("../../../configs/B4.conf")),
    ("B5", include_str!("../../../configs/B5.conf")),
];

pub fn builtin_ids() -> Vec<&'static str> {
    BUILTIN.iter().map(|(id, _)| *id).collect()
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", no + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", no + 1)));
        }
        if out.insert(k.clone(), v).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", no + 1)));
        }
    }
    Ok(out)
}

struct Fields {
    map: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl Fields {
    fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        self.used.insert(key.to_string());
        self.map
            .get(key)
            .map(|v| v.parse().map_err(|_| Error::Config(format!("cannot parse `{key} = {v}`"))))
            .transpose()
    }

    fn req<T: FromStr>(&mut self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    fn or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn list(&mut self, key: &str) -> Result<Vec<usize>> {
        let raw: String = self.req(key)?;
        raw.split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad list entry in `{key} = {raw}`"))))
            .collect()
    }

    fn finish(self) -> Result<()> {
        let unknown: Vec<&String> = self.map.keys().filter(|k| !self.used.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown config keys: {unknown:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RingParams {
    pub k: usize,
    pub radius: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    RingNear {
        n: usize,
        ring: RingParams,
        holdout: Vec<usize>,
    },
    MoonsBox {
        n: usize,
        noise: f64,
        n_ood: usize,
        half_width: f64,
    },
    CheckerRing {
        n: usize,
        grid: usize,
        w: usize,
        noise: f64,
        n_ood: usize,
        ring: RingParams,
    },
    /// Train on one benchmark's ID data, evaluate on another's split.
    Cross {
        train: Box<BenchConfig>,
        eval: Box<BenchConfig>,
    },
}

impl Scenario {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::RingNear { .. } => "ring-near",
            Self::MoonsBox { .. } => "moons-box",
            Self::CheckerRing { .. } => "checker-ring",
            Self::Cross { .. } => "cross",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub variance: NoisingVariance,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            variance: d.variance,
            hidden: DEFAULT_HIDDEN.to_vec(),
            embed_dim: DEFAULT_EMBED_DIM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconSettings {
    pub steps: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMetric {
    Auroc,
    AurocRaw,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gate {
    pub metric: GateMetric,
    pub min: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub benchmark: String,
    pub seed: u64,
    pub scenario: Scenario,
    pub schedule_steps: usize,
    pub scoring: ScoringConfig,
    pub alpha: f64,
    pub fractions: Fractions,
    pub train: TrainSettings,
    pub reconstruction: Option<ReconSettings>,
    pub gate: Option<Gate>,
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub p: Option<u32>,
    pub tau: Option<usize>,
    pub start: Option<usize>,
    pub alpha: Option<f64>,
    pub epochs: Option<usize>,
    pub schedule_steps: Option<usize>,
}

impl BenchConfig {
    pub fn builtin(id: &str) -> Result<Self> {
        let (_, text) = BUILTIN
            .iter()
            .find(|(name, _)| name.eq_ignore_ascii_case(id))
            .ok_or_else(|| Error::Config(format!("unknown benchmark `{id}`; expected one of {:?}", builtin_ids())))?;
        Self::parse(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut f = Fields {
            map: parse_kv(text)?,
            used: BTreeSet::new(),
        };
        let benchmark: String = f.req("benchmark")?;
        let scenario_tag: String = f.req("scenario")?;
        let ring = |f: &mut Fields| -> Result<RingParams> {
            Ok(RingParams {
                k: f.or("ring_k", 8)?,
                radius: f.or("ring_radius", 4.0)?,
                sigma: f.or("ring_sigma", 0.3)?,
            })
        };
        let scenario = match scenario_tag.as_str() {
            "ring-near" => Scenario::RingNear {
                n: f.req("n")?,
                ring: ring(&mut f)?,
                holdout: f.list("holdout")?,
            },
            "moons-box" => Scenario::MoonsBox {
                n: f.req("n")?,
                noise: f.req("moons_noise")?,
                n_ood: f.req("n_ood")?,
                half_width: f.req("box_half_width")?,
            },
            "checker-ring" => Scenario::CheckerRing {
                n: f.req("n")?,
                grid: f.req("checker_grid")?,
                w: f.req("checker_w")?,
                noise: f.req("checker_noise")?,
                n_ood: f.req("n_ood")?,
                ring: ring(&mut f)?,
            },
            "cross" => {
                let train: String = f.req("train_benchmark")?;
                let eval: String = f.req("eval_benchmark")?;
                let (mut train, eval) = (Self::builtin(&train)?, Self::builtin(&eval)?);
                if let Some(e) = f.get("epochs")? {
                    train.train.epochs = e;
                }
                if let Some(t) = f.get("T")? {
                    train.schedule_steps = t;
                }
                if matches!(train.scenario, Scenario::Cross { .. }) || matches!(eval.scenario, Scenario::Cross { .. }) {
                    return Err(Error::Config("cross benchmarks cannot nest".into()));
                }
                Scenario::Cross {
                    train: Box::new(train),
                    eval: Box::new(eval),
                }
            }
            other => return Err(Error::Config(format!("unknown scenario `{other}`"))),
        };
        let is_cross = matches!(scenario, Scenario::Cross { .. });
        let defaults = ScoringConfig::default();
        let scoring = ScoringConfig {
            steps: f.or("S", defaults.steps)?,
            p: f.or("p", defaults.p)?,
            stride: f.or("tau", defaults.stride)?,
            start: f.or("start", defaults.start)?,
        };
        let (schedule_steps, train, fractions) = if let Scenario::Cross { train, .. } = &scenario {
            (train.schedule_steps, train.train.clone(), train.fractions)
        } else {
            let td = TrainSettings::default();
            let variance = match f.or("noising_variance", "marginal".to_string())?.as_str() {
                "marginal" => NoisingVariance::Marginal,
                "posterior-ratio" => NoisingVariance::PosteriorRatio,
                other => return Err(Error::Config(format!("unknown noising_variance `{other}`"))),
            };
            let hidden = match f.get::<String>("hidden")? {
                Some(h) => h
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad hidden width `{s}`"))))
                    .collect::<Result<Vec<usize>>>()?,
                None => td.hidden.clone(),
            };
            let train = TrainSettings {
                epochs: f.req("epochs")?,
                learning_rate: f.or("learning_rate", td.learning_rate)?,
                batch_size: f.or("batch_size", td.batch_size)?,
                variance,
                hidden,
                embed_dim: f.or("embed_dim", td.embed_dim)?,
            };
            let fd = Fractions::default();
            let fractions = Fractions {
                train: f.or("train_fraction", fd.train)?,
                val: f.or("val_fraction", fd.val)?,
                test: f.or("test_fraction", fd.test)?,
            };
            (f.or("T", 1000)?, train, fractions)
        };
        let recon = ReconSettings {
            steps: f.or("s_rec", 50)?,
            stride: f.or("tau_rec", 10)?,
        };
        let reconstruction = (!is_cross && f.or("reconstruction", false)?).then_some(recon);
        let gate = match f.get::<String>("gate_metric")? {
            None => None,
            Some(m) => Some(Gate {
                metric: match m.as_str() {
                    "auroc" => GateMetric::Auroc,
                    "auroc_raw" => GateMetric::AurocRaw,
                    other => return Err(Error::Config(format!("unknown gate_metric `{other}`"))),
                },
                min: f.req("gate_min")?,
            }),
        };
        let cfg = Self {
            benchmark,
            seed: f.or("seed", 0)?,
            scenario,
            schedule_steps,
            scoring,
            alpha: f.or("alpha", 0.05)?,
            fractions,
            train,
            reconstruction,
            gate,
        };
        f.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let sc = &self.scoring;
        if sc.steps < 2 || sc.stride == 0 || sc.p < 1 {
            return Err(Error::Config(format!("need S >= 2, tau >= 1, p >= 1 (got {sc:?})")));
        }
        if sc.start + sc.steps * sc.stride > self.schedule_steps {
            return Err(Error::Config(format!(
                "start + S·tau = {} exceeds T = {}",
                sc.start + sc.steps * sc.stride,
                self.schedule_steps
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 || !(self.train.learning_rate > 0.0) {
            return Err(Error::Config("epochs, batch_size and learning_rate must be positive".into()));
        }
        if let Some(r) = self.reconstruction {
            if r.steps < 2 || r.steps * r.stride > self.schedule_steps {
                return Err(Error::Config(format!("bad reconstruction settings {r:?}")));
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.steps {
            self.scoring.steps = v;
        }
        if let Some(v) = o.p {
            self.scoring.p = v;
        }
        if let Some(v) = o.tau {
            self.scoring.stride = v;
        }
        if let Some(v) = o.start {
            self.scoring.start = v;
        }
        if let Some(v) = o.alpha {
            self.alpha = v;
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = o.schedule_steps {
            self.schedule_steps = v;
        }
        if let Scenario::Cross { train, .. } = &mut self.scenario {
            let nested = Overrides {
                seed: o.seed,
                epochs: o.epochs,
                schedule_steps: o.schedule_steps,
                ..Overrides::default()
            };
            train.apply(&nested)?;
            self.schedule_steps = train.schedule_steps;
            self.train = train.train.clone();
        }
        self.validate()
    }

    /// Fully resolved configuration as `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("benchmark", self.benchmark.clone());
        kv("scenario", self.scenario.tag().into());
        kv("seed", self.seed.to_string());
        match &self.scenario {
            Scenario::RingNear { n, ring, holdout } => {
                kv("n", n.to_string());
                kv("ring_k", ring.k.to_string());
                kv("ring_radius", ring.radius.to_string());
                kv("ring_sigma", ring.sigma.to_string());
                kv("holdout", holdout.iter().map(ToString::to_string).collect::<Vec<_>>().join(","));
            }
            Scenario::MoonsBox { n, noise, n_ood, half_width } => {
                kv("n", n.to_string());
                kv("moons_noise", noise.to_string());
                kv("n_ood", n_ood.to_string());
                kv("box_half_width", half_width.to_string());
            }
            Scenario::CheckerRing { n, grid, w, noise, n_ood, ring } => {
                kv("n", n.to_string());
                kv("checker_grid", grid.to_string());
                kv("checker_w", w.to_string());
                kv("checker_noise", noise.to_string());
                kv("n_ood", n_ood.to_string());
                kv("ring_k", ring.k.to_string());
                kv("ring_radius", ring.radius.to_string());
                kv("ring_sigma", ring.sigma.to_string());
            }
            Scenario::Cross { train, eval } => {
                kv("train_benchmark", train.benchmark.clone());
                kv("eval_benchmark", eval.benchmark.clone());
            }
        }
        kv("S", self.scoring.steps.to_string());
        kv("p", self.scoring.p.to_string());
        kv("tau", self.scoring.stride.to_string());
        kv("start", self.scoring.start.to_string());
        kv("alpha", self.alpha.to_string());
        if let Scenario::Cross { train, eval } = &self.scenario {
            let _ = writeln!(out, "epochs = {}", train.train.epochs);
            let _ = writeln!(out, "T = {}", train.schedule_steps);
            for (prefix, cfg) in [("train", train), ("eval", eval)] {
                for line in cfg.to_kv().lines() {
                    let _ = writeln!(out, "# {prefix}.{line}");
                }
            }
            return out;
        }
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("T", self.schedule_steps.to_string());
        kv("train_fraction", self.fractions.train.to_string());
        kv("val_fraction", self.fractions.val.to_string());
        kv("test_fraction", self.fractions.test.to_string());
        kv("epochs", self.train.epochs.to_string());
        kv("learning_rate", self.train.learning_rate.to_string());
        kv("batch_size", self.train.batch_size.to_string());
        kv("noising_variance", self.train.variance.tag().into());
        kv("hidden", self.train.hidden.iter().map(ToString::to_string).collect::<Vec<_>>().join(","));
        kv("embed_dim", self.train.embed_dim.to_string());
        kv("reconstruction", self.reconstruction.is_some().to_string());
        if let Some(r) = self.reconstruction {
            kv("s_rec", r.steps.to_string());
            kv("tau_rec", r.stride.to_string());
        }
        if let Some(g) = self.gate {
            kv(
                "gate_metric",
                match g.metric {
                    GateMetric::Auroc => "auroc",
                    GateMetric::AurocRaw => "auroc_raw",
                }
                .into(),
            );
            kv("gate_min", g.min.to_string());
        }
        out
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        ["data", "split", "init", "train", "random-init"]
            .iter()
            .map(|s| (s.to_string(), derive_seed(self.seed, s)))
            .chain(std::iter::once(("master".to_string(), self.seed)))
            .collect()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.schedule_steps)
    }
}

/// Generates the datasets of a (non-cross) scenario and splits them.
pub fn build_split(cfg: &BenchConfig) -> Result<BenchmarkSplit> {
    let data_seed = derive_seed(cfg.seed, "data");
    let ood_seed = derive_seed(cfg.seed, "data-ood");
    let split_seed = derive_seed(cfg.seed, "split");
    match &cfg.scenario {
        Scenario::RingNear { n, ring, holdout } => {
            let ds = gen_gaussian_ring(ring.k, ring.radius, ring.sigma, *n, data_seed)?;
            make_near_ood_split(&ds, holdout, &cfg.fractions, split_seed)
        }
        Scenario::MoonsBox { n, noise, n_ood, half_width } => {
            let id = gen_two_moons(*n, *noise, data_seed)?;
            let src = OodSource {
                name: "uniform-box".into(),
                data: gen_uniform_box(*n_ood, *half_width, 2, ood_seed)?,
                adapter: None,
            };
            make_far_ood_split(&id, &[src], &cfg.fractions, split_seed)
        }
        Scenario::CheckerRing { n, grid, w, noise, n_ood, ring } => {
            let id = gen_checker_texture(*n, *grid, *w, *noise, data_seed)?;
            let src = OodSource {
                name: "ring-image".into(),
                data: gen_gaussian_ring(ring.k, ring.radius, ring.sigma, *n_ood, ood_seed)?,
                adapter: Some(PointToImage::for_ring(*w)),
            };
            make_far_ood_split(&id, &[src], &cfg.fractions, split_seed)
        }
        Scenario::Cross { .. } => Err(contract("a cross benchmark has no split of its own")),
    }
}

/// A trained model together with the input standardization it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ScoreModel,
    pub standardizer: Standardizer,
    pub benchmark: String,
    pub seed: u64,
    pub schedule_steps: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub variance: NoisingVariance,
}

impl Checkpoint {
    pub fn to_bundle(&self) -> TensorBundle {
        let mut bundle = self.model.to_bundle(&[
            ("benchmark", self.benchmark.clone()),
            ("seed", self.seed.to_string()),
            ("T", self.schedule_steps.to_string()),
            ("schedule", "cosine".to_string()),
            ("epochs", self.epochs.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("noising_variance", self.variance.tag().to_string()),
        ]);
        bundle.push("standardizer.mean", Tensor::vector(self.standardizer.mean.clone()));
        bundle.push("standardizer.std", Tensor::vector(self.standardizer.std.clone()));
        bundle
    }

    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        let model = ScoreModel::from_bundle(bundle)?;
        let field = |k: &str| -> Result<String> {
            manifest_value(&bundle.manifest, k)
                .map(str::to_string)
                .ok_or_else(|| Error::Config(format!("checkpoint manifest lacks `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            field(k)?
                .parse()
                .map_err(|_| Error::Config(format!("bad `{k}` in checkpoint manifest")))
        };
        let vec_of = |k: &str| -> Result<Vec<f64>> {
            let t = bundle
                .get(k)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor `{k}`")))?;
            if t.len() != model.data_dim() {
                return Err(contract(format!("`{k}` does not match the model dimension")));
            }
            Ok(t.data().to_vec())
        };
        let variance = match field("noising_variance")?.as_str() {
            "posterior-ratio" => NoisingVariance::PosteriorRatio,
            _ => NoisingVariance::Marginal,
        };
        Ok(Self {
            standardizer: Standardizer {
                mean: vec_of("standardizer.mean")?,
                std: vec_of("standardizer.std")?,
            },
            benchmark: field("benchmark")?,
            seed: field("seed")?
                .parse()
                .map_err(|_| Error::Config("bad `seed` in checkpoint manifest".into()))?,
            schedule_steps: num("T")? as usize,
            epochs: num("epochs")? as usize,
            learning_rate: num("learning_rate")?,
            batch_size: num("batch_size")? as usize,
            variance,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_tensors(path, &self.to_bundle())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bundle(&load_tensors(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub epochs_trained: usize,
    pub loss_curve: Vec<f64>,
    pub source: String,
}

impl TrainLog {
    pub fn render(&self) -> String {
        let mut out = format!("epochs_trained={}\nsource={}\n", self.epochs_trained, self.source);
        if let (Some(first), Some(last)) = (self.loss_curve.first(), self.loss_curve.last()) {
            let _ = writeln!(out, "loss_decreased={}", last < first);
        }
        out.push_str("epoch,mean_loss\n");
        for (i, l) in self.loss_curve.iter().enumerate() {
            let _ = writeln!(out, "{i},{l}");
        }
        out
    }
}

/// Trains a fresh model on `split.train` with the config's settings.
pub fn train_on_split(cfg: &BenchConfig, split: &BenchmarkSplit) -> Result<(Checkpoint, TrainLog)> {
    let schedule = cfg.schedule()?;
    let data = split.standardizer.apply(&split.train.samples)?;
    let ts = &cfg.train;
    let model = ScoreModel::new(data.cols(), &ts.hidden, ts.embed_dim, Init::ZeroOutput, derive_seed(cfg.seed, "init"))?;
    let tc = TrainConfig {
        learning_rate: ts.learning_rate,
        batch_size: ts.batch_size,
        epochs: ts.epochs,
        seed: derive_seed(cfg.seed, "train"),
        variance: ts.variance,
    };
    let trained = train(model, &data, &tc, &schedule)?;
    let ckpt = Checkpoint {
        model: trained.model,
        standardizer: split.standardizer.clone(),
        benchmark: cfg.benchmark.clone(),
        seed: cfg.seed,
        schedule_steps: cfg.schedule_steps,
        epochs: ts.epochs,
        learning_rate: ts.learning_rate,
        batch_size: ts.batch_size,
        variance: ts.variance,
    };
    let log = TrainLog {
        epochs_trained: ts.epochs,
        loss_curve: trained.loss_curve,
        source: format!("trained on {} (seed {})", cfg.benchmark, cfg.seed),
    };
    Ok((ckpt, log))
}

/// Maps raw split data into the model's input space: an optional
/// point-to-image adapter followed by the model's standardization.
#[derive(Debug, Clone)]
pub struct InputMap {
    pub adapter: Option<PointToImage>,
    pub standardizer: Standardizer,
}

impl InputMap {
    pub fn for_model(model_dim: usize, data_dim: usize, standardizer: Standardizer) -> Result<Self> {
        if model_dim == data_dim {
            return Ok(Self { adapter: None, standardizer });
        }
        let w = (model_dim as f64).sqrt().round() as usize;
        if data_dim == 2 && w * w == model_dim && w >= 2 {
            return Ok(Self {
                adapter: Some(PointToImage::for_ring(w)),
                standardizer,
            });
        }
        Err(Error::Shape {
            op: "model input",
            lhs: vec![data_dim],
            rhs: vec![model_dim],
        })
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Tensor> {
        match &self.adapter {
            Some(a) => self.standardizer.apply(&a.apply(ds)?.samples),
            None => self.standardizer.apply(&ds.samples),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub split: &'static str,
    pub score: AnomalyScore,
    pub kde_logpdf: f64,
    pub ood_flag: bool,
}

pub const SCORES_HEADER: &str = "sample_id,split,anomaly_value,magnitude_term,curvature_term,kde_logpdf,ood_flag";

pub fn scores_csv(rows: &[ScoreRow]) -> String {
    let mut out = String::from(SCORES_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.score.sample_id,
            r.split,
            r.score.value,
            r.score.magnitude,
            r.score.curvature,
            r.kde_logpdf,
            u8::from(r.ood_flag)
        );
    }
    out
}

/// Model-ready inputs of one evaluation.
pub struct EvalInputs<'a> {
    pub val: &'a Tensor,
    pub test_id: &'a Tensor,
    pub test_ood: &'a Tensor,
    pub ood_tags: &'a [String],
}

pub struct MethodResult {
    pub report: EvalReport,
    pub rows: Vec<ScoreRow>,
    pub nfe_total: usize,
}

fn echo(cfg: &BenchConfig) -> ConfigEcho {
    ConfigEcho {
        s: cfg.scoring.steps,
        start: cfg.scoring.start,
        p: cfg.scoring.p,
        tau: cfg.scoring.stride,
        t: cfg.schedule_steps,
        alpha: cfg.alpha,
        seeds: cfg.seeds(),
        finite_difference: FINITE_DIFFERENCE_CONVENTION.into(),
    }
}

fn counted_scores<M: EpsModel + Sync>(
    model: &CountingModel<M>,
    xs: &Tensor,
    cfg: &BenchConfig,
    schedule: &NoiseSchedule,
    threads: usize,
) -> Result<Vec<AnomalyScore>> {
    model.reset();
    let out = score_rows(model, xs, &cfg.scoring, schedule, threads)?;
    if model.calls() != cfg.scoring.steps * xs.rows() {
        return Err(contract(format!(
            "scoring used {} model calls for {} samples, expected S = {} each",
            model.calls(),
            xs.rows(),
            cfg.scoring.steps
        )));
    }
    Ok(out)
}

/// Scores validation, ID-test and OOD-test inputs, calibrates the KDE on the
/// validation scores and computes every metric of the trajectory method.
pub fn evaluate_trajectory_method<M: EpsModel + Sync>(
    model: M,
    method: &str,
    cfg: &BenchConfig,
    inputs: &EvalInputs<'_>,
    threads: usize,
    latency: bool,
) -> Result<MethodResult> {
    let schedule = cfg.schedule()?;
    let counted = CountingModel::new(model);
    let val = counted_scores(&counted, inputs.val, cfg, &schedule, threads)?;
    let id = counted_scores(&counted, inputs.test_id, cfg, &schedule, threads)?;
    let ood = counted_scores(&counted, inputs.test_ood, cfg, &schedule, threads)?;
    let nfe_total = cfg.scoring.steps * (inputs.val.rows() + inputs.test_id.rows() + inputs.test_ood.rows());

    let values = |v: &[AnomalyScore]| -> Vec<f64> { v.iter().map(|s| s.value).collect() };
    let kde = kde_fit(&values(&val))?;
    let threshold = calibrate_threshold(&kde, &values(&val), cfg.alpha)?;
    let mut rows = Vec::with_capacity(val.len() + id.len() + ood.len());
    for (split, scores) in [("val_id", &val), ("test_id", &id), ("test_ood", &ood)] {
        for s in scores.iter() {
            rows.push(ScoreRow {
                split,
                kde_logpdf: kde_logpdf(&kde, s.value),
                ood_flag: ood_decision(&kde, s, &threshold),
                score: s.clone(),
            });
        }
    }
    let ood_score = |split: &str| -> Vec<f64> { rows.iter().filter(|r| r.split == split).map(|r| -r.kde_logpdf).collect() };
    let (id_s, ood_s) = (ood_score("test_id"), ood_score("test_ood"));
    let raw = auroc(&values(&id), &values(&ood))?;
    let unpowered = |v: &[AnomalyScore]| -> Vec<f64> { v.iter().map(AnomalyScore::unpowered).collect() };
    let raw_unpowered = auroc(&unpowered(&id), &unpowered(&ood))?;
    if raw != raw_unpowered {
        return Err(contract(format!(
            "AUROC changed under the p-th root ({raw} vs {raw_unpowered}); ranking is not monotone"
        )));
    }
    let flag_rate = |split: &str| -> f64 {
        let (hit, n) = rows
            .iter()
            .filter(|r| r.split == split)
            .fold((0usize, 0usize), |(h, n), r| (h + usize::from(r.ood_flag), n + 1));
        hit as f64 / n as f64
    };
    let wall_time_per_sample = if latency {
        let x = Tensor::vector(inputs.test_id.row(0).to_vec());
        let inner = &counted;
        Some(measure_latency(
            || score_sample(inner, &x, &cfg.scoring, &schedule, 0).map(|_| ()),
            10,
            100,
        )?)
    } else {
        None
    };
    let report = EvalReport {
        benchmark: cfg.benchmark.clone(),
        method: method.to_string(),
        auroc: auroc(&id_s, &ood_s)?,
        fpr_at_95: fpr_at_tpr(&id_s, &ood_s, 0.95)?,
        per_source_auroc: auroc_by_source(&id_s, &ood_s, inputs.ood_tags)?,
        auroc_raw: Some(raw),
        auroc_raw_unpowered: Some(raw_unpowered),
        nfe_per_sample: cfg.scoring.steps,
        wall_time_per_sample,
        n_id: id.len(),
        n_ood: ood.len(),
        ood_flag_rate: Some(flag_rate("test_ood")),
        id_flag_rate: Some(flag_rate("test_id")),
        config: echo(cfg),
    };
    Ok(MethodResult { report, rows, nfe_total })
}

/// The DDIM encode/decode reconstruction-error baseline.
pub fn evaluate_reconstruction<M: EpsModel + Sync>(
    model: M,
    cfg: &BenchConfig,
    recon: ReconSettings,
    inputs: &EvalInputs<'_>,
    latency: bool,
) -> Result<MethodResult> {
    let schedule = cfg.schedule()?;
    let counted = CountingModel::new(model);
    let errors = |xs: &Tensor| -> Result<Vec<f64>> {
        (0..xs.rows())
            .map(|i| {
                let r = reconstruction_baseline(&counted, &Tensor::vector(xs.row(i).to_vec()), recon.steps, recon.stride, &schedule)?;
                Ok(r.error)
            })
            .collect()
    };
    let id = errors(inputs.test_id)?;
    let ood = errors(inputs.test_ood)?;
    let n = inputs.test_id.rows() + inputs.test_ood.rows();
    if counted.calls() != 2 * recon.steps * n {
        return Err(contract(format!(
            "reconstruction used {} model calls for {n} samples, expected {} each",
            counted.calls(),
            2 * recon.steps
        )));
    }
    let wall_time_per_sample = if latency {
        let x = Tensor::vector(inputs.test_id.row(0).to_vec());
        let inner = &counted;
        Some(measure_latency(
            || reconstruction_baseline(inner, &x, recon.steps, recon.stride, &schedule).map(|_| ()),
            10,
            100,
        )?)
    } else {
        None
    };
    let mut echo = echo(cfg);
    echo.s = recon.steps;
    echo.tau = recon.stride;
    echo.start = 0;
    let report = EvalReport {
        benchmark: cfg.benchmark.clone(),
        method: "reconstruction".into(),
        auroc: auroc(&id, &ood)?,
        fpr_at_95: fpr_at_tpr(&id, &ood, 0.95)?,
        per_source_auroc: auroc_by_source(&id, &ood, inputs.ood_tags)?,
        auroc_raw: None,
        auroc_raw_unpowered: None,
        nfe_per_sample: 2 * recon.steps,
        wall_time_per_sample,
        n_id: id.len(),
        n_ood: ood.len(),
        ood_flag_rate: None,
        id_flag_rate: None,
        config: echo,
    };
    Ok(MethodResult {
        report,
        rows: Vec::new(),
        nfe_total: 2 * recon.steps * n,
    })
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub threads: usize,
    pub pretrained: Option<Checkpoint>,
    pub latency: bool,
}

pub struct BenchOutcome {
    pub reports: Vec<EvalReport>,
    /// Newly trained checkpoint; `None` when a pretrained model was supplied.
    pub checkpoint: Option<Checkpoint>,
    pub score_tables: Vec<(String, Vec<ScoreRow>)>,
    pub train_log: TrainLog,
    pub notes: Vec<String>,
}

impl BenchOutcome {
    pub fn report(&self, method: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.method == method)
    }

    /// Writes reports, checkpoint, score tables, training log and notes.
    pub fn write(&self, dir: &Path) -> Result<()> {
        emit_report(&self.reports, dir)?;
        if let Some(ckpt) = &self.checkpoint {
            ckpt.save(&dir.join("checkpoint.sbdt"))?;
        }
        for (method, rows) in &self.score_tables {
            let path = dir.join(format!("scores_{method}.csv"));
            std::fs::write(&path, scores_csv(rows)).map_err(|e| io_err(&path, e))?;
        }
        let path = dir.join("train_log.txt");
        std::fs::write(&path, self.train_log.render()).map_err(|e| io_err(&path, e))?;
        let path = dir.join("notes.txt");
        let mut notes = self.notes.join("\n");
        notes.push('\n');
        std::fs::write(&path, notes).map_err(|e| io_err(&path, e))
    }
}

fn pretrained_log(ckpt: &Checkpoint) -> TrainLog {
    TrainLog {
        epochs_trained: 0,
        loss_curve: Vec::new(),
        source: format!("pretrained checkpoint from {} (seed {})", ckpt.benchmark, ckpt.seed),
    }
}

/// Runs one benchmark end to end: data, training (unless pretrained),
/// trajectory scoring, baselines and metrics.
pub fn run_benchmark(cfg: &BenchConfig, opts: &RunOptions) -> Result<BenchOutcome> {
    cfg.validate()?;
    let threads = opts.threads.max(1);
    let (eval_cfg, trained, train_log) = match &cfg.scenario {
        Scenario::Cross { train, eval } => {
            let (ckpt, log, fresh) = match &opts.pretrained {
                Some(c) => (c.clone(), pretrained_log(c), false),
                None => {
                    let mut train_cfg = (**train).clone();
                    train_cfg.seed = cfg.seed;
                    let (c, l) = train_on_split(&train_cfg, &build_split(&train_cfg)?)?;
                    (c, l, true)
                }
            };
            let mut eval_cfg = (**eval).clone();
            eval_cfg.benchmark = cfg.benchmark.clone();
            eval_cfg.seed = cfg.seed;
            eval_cfg.scoring = cfg.scoring;
            eval_cfg.alpha = cfg.alpha;
            eval_cfg.reconstruction = None;
            eval_cfg.schedule_steps = ckpt.schedule_steps;
            (eval_cfg, (ckpt, fresh), log)
        }
        _ => match &opts.pretrained {
            Some(c) => (cfg.clone(), (c.clone(), false), pretrained_log(c)),
            None => {
                let split = build_split(cfg)?;
                let (c, l) = train_on_split(cfg, &split)?;
                (cfg.clone(), (c, true), l)
            }
        },
    };
    let (ckpt, fresh) = trained;
    let split = build_split(&eval_cfg)?;
    let mut notes = split.notes.clone();
    let cross = matches!(cfg.scenario, Scenario::Cross { .. });
    let pretrained = cross || !fresh;
    let map = if pretrained {
        InputMap::for_model(ckpt.model.data_dim(), split.test_id.dim(), ckpt.standardizer.clone())?
    } else {
        InputMap {
            adapter: None,
            standardizer: split.standardizer.clone(),
        }
    };
    if let Some(a) = &map.adapter {
        notes.push(format!("inputs mapped through {}", a.tag()));
    }
    if pretrained {
        notes.push(format!("model: {}", train_log.source));
    }
    let (val, test_id, test_ood) = (map.apply(&split.val_id)?, map.apply(&split.test_id)?, map.apply(&split.test_ood)?);
    let inputs = EvalInputs {
        val: &val,
        test_id: &test_id,
        test_ood: &test_ood,
        ood_tags: &split.ood_sources,
    };
    let method = if pretrained { "sbddm-p" } else { "sbddm" };
    let mut results = vec![(method.to_string(), evaluate_trajectory_method(&ckpt.model, method, &eval_cfg, &inputs, threads, opts.latency)?)];
    if cross {
        let ts = &ckpt;
        let random = ScoreModel::new(
            ts.model.data_dim(),
            ts.model.hidden(),
            ts.model.embed_dim(),
            Init::Random,
            derive_seed(cfg.seed, "random-init"),
        )?;
        notes.push("random-weights: same architecture, every layer at its random initialization, never trained".into());
        results.push((
            "random-weights".into(),
            evaluate_trajectory_method(&random, "random-weights", &eval_cfg, &inputs, threads, opts.latency)?,
        ));
    }
    if let Some(recon) = eval_cfg.reconstruction {
        results.push((
            "reconstruction".into(),
            evaluate_reconstruction(&ckpt.model, &eval_cfg, recon, &inputs, opts.latency)?,
        ));
    }
    notes.push(format!("finite differences: {FINITE_DIFFERENCE_CONVENTION}"));
    let mut reports = Vec::new();
    let mut score_tables = Vec::new();
    for (name, r) in results {
        notes.push(format!("nfe[{name}] = {} over all scored samples", r.nfe_total));
        reports.push(r.report);
        if !r.rows.is_empty() {
            score_tables.push((name, r.rows));
        }
    }
    Ok(BenchOutcome {
        reports,
        checkpoint: fresh.then_some(ckpt),
        score_tables,
        train_log,
        notes,
    })
}

/// Checks the config's gate against the primary method's report.
pub fn check_gate(cfg: &BenchConfig, outcome: &BenchOutcome) -> Option<(bool, String)> {
    let gate = cfg.gate?;
    let report = outcome.reports.first()?;
    let (name, value) = match gate.metric {
        GateMetric::Auroc => ("auroc", Some(report.auroc)),
        GateMetric::AurocRaw => ("auroc_raw", report.auroc_raw),
    };
    let value = value?;
    let pass = value >= gate.min;
    Some((
        pass,
        format!(
            "{} {} {name} = {value:.4} (gate >= {})",
            if pass { "PASS" } else { "FAIL" },
            report.method,
            gate.min
        ),
    ))
}

/// Writes the split's datasets as CSV (raw units) plus the train-only
/// standardization statistics.
pub fn write_split(split: &BenchmarkSplit, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for (name, ds) in [("train", &split.train), ("val_id", &split.val_id), ("test_id", &split.test_id)] {
        ds.write_csv(&dir.join(format!("{name}.csv")))?;
    }
    let mut csv = split.test_ood.to_csv();
    let mut lines: Vec<String> = csv.lines().map(str::to_string).collect();
    lines[0].push_str(",source");
    for (line, tag) in lines[1..].iter_mut().zip(&split.ood_sources) {
        line.push(',');
        line.push_str(tag);
    }
    csv = lines.join("\n");
    csv.push('\n');
    let path = dir.join("test_ood.csv");
    std::fs::write(&path, csv).map_err(|e| io_err(&path, e))?;
    let stats = format!(
        "kind = {}\nmean = {:?}\nstd = {:?}\n{}\n",
        split.kind.tag(),
        split.standardizer.mean,
        split.standardizer.std,
        split.notes.join("\n")
    );
    let path = dir.join("split.txt");
    std::fs::write(&path, stats).map_err(|e| io_err(&path, e))
}

/// Which split of a benchmark to score.
pub fn split_by_name<'a>(split: &'a BenchmarkSplit, name: &str) -> Result<&'a Dataset> {
    match name {
        "train" => Ok(&split.train),
        "val_id" => Ok(&split.val_id),
        "test_id" => Ok(&split.test_id),
        "test_ood" => Ok(&split.test_ood),
        other => Err(Error::Config(format!(
            "unknown split `{other}`; expected train, val_id, test_id or test_ood"
        ))),
    }
}

pub struct ScoreRun {
    pub rows: Vec<ScoreRow>,
    /// `(split, samples, model evaluations)` for every scored split.
    pub ledger: Vec<(String, usize, usize)>,
}

/// Scores one split with a checkpoint, calibrating the KDE on `val_id`.
pub fn score_split(cfg: &BenchConfig, ckpt: &Checkpoint, split_name: &str, limit: Option<usize>, threads: usize) -> Result<ScoreRun> {
    let eval_cfg = match &cfg.scenario {
        Scenario::Cross { eval, .. } => {
            let mut e = (**eval).clone();
            e.seed = cfg.seed;
            e.scoring = cfg.scoring;
            e.alpha = cfg.alpha;
            e
        }
        _ => cfg.clone(),
    };
    let split = build_split(&eval_cfg)?;
    let map = InputMap::for_model(ckpt.model.data_dim(), split.test_id.dim(), ckpt.standardizer.clone())?;
    let schedule = NoiseSchedule::cosine(ckpt.schedule_steps)?;
    let target = split_by_name(&split, split_name)?;
    let mut xs = map.apply(target)?;
    if let Some(n) = limit {
        let n = n.min(xs.rows());
        if n == 0 {
            return Err(contract("--limit must be positive"));
        }
        xs = Tensor::matrix(n, xs.cols(), xs.data()[..n * xs.cols()].to_vec())?;
    }
    let val = map.apply(&split.val_id)?;
    let counted = CountingModel::new(&ckpt.model);
    let val_scores = counted_scores(&counted, &val, &eval_cfg, &schedule, threads)?;
    let mut ledger = vec![("val_id (calibration)".to_string(), val.rows(), counted.calls())];
    let scores = counted_scores(&counted, &xs, &eval_cfg, &schedule, threads)?;
    ledger.push((split_name.to_string(), xs.rows(), counted.calls()));
    let values: Vec<f64> = val_scores.iter().map(|s| s.value).collect();
    let kde = kde_fit(&values)?;
    let threshold = calibrate_threshold(&kde, &values, cfg.alpha)?;
    let split_tag: &'static str = match split_name {
        "train" => "train",
        "val_id" => "val_id",
        "test_id" => "test_id",
        _ => "test_ood",
    };
    let rows = scores
        .into_iter()
        .map(|s| ScoreRow {
            split: split_tag,
            kde_logpdf: kde_logpdf(&kde, s.value),
            ood_flag: ood_decision(&kde, &s, &threshold),
            score: s,
        })
        .collect();
    Ok(ScoreRun { rows, ledger })
}
