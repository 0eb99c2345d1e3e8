use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sbddm::diffusion::NoiseSchedule;
use sbddm::oracle::{closed_form_gaussian_kl, kl_score_integral, kl_verification_pairs, KlWeighting};
use sbddm::pipeline::{
    build_split, check_gate, score_split, scores_csv, train_on_split, write_split, BenchConfig, Checkpoint, Overrides,
    RunOptions, Scenario,
};
use sbddm::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_GATE: u8 = 4;

#[derive(Parser)]
#[command(name = "sbddm", version, about = "Trajectory-score OOD detection with a small diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark's datasets and write its splits as CSV.
    Gen(Common),
    /// Train a score model on a benchmark's ID training split.
    Train(Common),
    /// Score one split with a trained checkpoint.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val_id, test_id or test_ood
        #[arg(long, default_value = "test_id")]
        split: String,
        /// Score only the first N samples of the split.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run a benchmark end to end and write reports.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Skip training and use this checkpoint.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Measure per-sample wall-clock latency (not reproducible; off by default).
        #[arg(long)]
        latency: bool,
        /// Exit with code 4 if the configured gate fails.
        #[arg(long)]
        gate: bool,
    },
    /// Check the score-difference KL identity on Gaussian pairs.
    Oracle {
        #[arg(long = "T", default_value_t = 1000)]
        schedule_steps: usize,
        /// Quadrature nodes.
        #[arg(long, default_value_t = 1000)]
        nodes: usize,
        #[command(flatten)]
        out: OutArgs,
    },
}

#[derive(Args)]
struct OutArgs {
    /// Output directory; defaults to a per-run directory under $SBDDM_OUT_ROOT (or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "SBDDM_OUT_ROOT", default_value = "runs", hide_env_values = true)]
    out_root: PathBuf,
}

#[derive(Args)]
struct Common {
    /// Built-in benchmark id (B1..B5).
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    benchmark: Option<String>,
    /// Path to a config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Trajectory steps S.
    #[arg(long = "s")]
    steps: Option<usize>,
    #[arg(long)]
    p: Option<u32>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    start: Option<usize>,
    /// Diffusion steps T.
    #[arg(long = "T")]
    schedule_steps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Worker threads for scoring.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[command(flatten)]
    out: OutArgs,
}

enum Failure {
    Lib(Error),
    Gate(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::Lib(e)
    }
}

type CmdResult = Result<(), Failure>;

impl OutArgs {
    fn dir(&self, default_name: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| self.out_root.join(default_name))
    }
}

impl Common {
    fn resolve(&self) -> Result<BenchConfig, Error> {
        let mut cfg = match (&self.benchmark, &self.config) {
            (Some(id), _) => BenchConfig::builtin(id)?,
            (None, Some(path)) => BenchConfig::load(path)?,
            (None, None) => return Err(Error::Config("pass --benchmark or --config".into())),
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            steps: self.steps,
            p: self.p,
            tau: self.tau,
            start: self.start,
            alpha: self.alpha,
            epochs: self.epochs,
            schedule_steps: self.schedule_steps,
        })?;
        Ok(cfg)
    }

    /// Resolves the config, creates the output directory and writes the
    /// config echo before anything else.
    fn prepare(&self, cmd: &str) -> Result<(BenchConfig, PathBuf), Error> {
        let cfg = self.resolve()?;
        let dir = self.out.dir(&format!("{cmd}-{}-seed{}", cfg.benchmark, cfg.seed));
        write_file(&dir.join("config.txt"), &cfg.to_kv())?;
        Ok((cfg, dir))
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| io(path, e))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Error> {
    std::fs::metadata(path).map_err(|e| io(path, e))?;
    Checkpoint::load(path)
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Leaves a diagnostic next to the run's outputs when training diverges.
fn dump_nan(dir: &Path, err: &Error) {
    if let Error::NonFiniteLoss { .. } = err {
        let _ = write_file(&dir.join("nan_dump.txt"), &format!("{err}\n"));
    }
}

fn train_split_config(cfg: &BenchConfig) -> BenchConfig {
    match &cfg.scenario {
        Scenario::Cross { train, .. } => {
            let mut t = (**train).clone();
            t.seed = cfg.seed;
            t
        }
        _ => cfg.clone(),
    }
}

fn cmd_gen(common: &Common) -> CmdResult {
    let (cfg, dir) = common.prepare("gen")?;
    match &cfg.scenario {
        Scenario::Cross { train, eval } => {
            for (name, sub) in [("train", train), ("eval", eval)] {
                let mut sub = (**sub).clone();
                sub.seed = cfg.seed;
                write_split(&build_split(&sub)?, &dir.join(format!("{name}-{}", sub.benchmark)))?;
            }
        }
        _ => write_split(&build_split(&cfg)?, &dir)?,
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_train(common: &Common) -> CmdResult {
    let (cfg, dir) = common.prepare("train")?;
    let train_cfg = train_split_config(&cfg);
    let split = build_split(&train_cfg)?;
    let (ckpt, log) = train_on_split(&train_cfg, &split).inspect_err(|e| dump_nan(&dir, e))?;
    ckpt.save(&dir.join("checkpoint.sbdt"))?;
    write_file(&dir.join("train_log.txt"), &log.render())?;
    println!(
        "trained {} epochs, final loss {:.5}; wrote {}",
        log.epochs_trained,
        log.loss_curve.last().copied().unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(())
}

fn cmd_score(common: &Common, checkpoint: &Path, split: &str, limit: Option<usize>) -> CmdResult {
    let (cfg, dir) = common.prepare("score")?;
    let ckpt = load_checkpoint(checkpoint)?;
    let run = score_split(&cfg, &ckpt, split, limit, common.threads)?;
    write_file(&dir.join(format!("scores_{split}.csv")), &scores_csv(&run.rows))?;
    let mut ledger = String::from("split,samples,nfe_total,nfe_per_sample\n");
    for (name, n, nfe) in &run.ledger {
        let _ = writeln!(ledger, "{name},{n},{nfe},{}", nfe / n);
    }
    write_file(&dir.join("nfe_ledger.csv"), &ledger)?;
    print!("{ledger}");
    Ok(())
}

fn cmd_bench(common: &Common, pretrained: Option<&Path>, latency: bool, gate: bool) -> CmdResult {
    let (cfg, dir) = common.prepare("bench")?;
    let pretrained = pretrained.map(load_checkpoint).transpose()?;
    let opts = RunOptions {
        threads: common.threads,
        pretrained,
        latency,
    };
    let outcome = sbddm::pipeline::run_benchmark(&cfg, &opts).inspect_err(|e| dump_nan(&dir, e))?;
    outcome.write(&dir)?;
    println!("epochs_trained={}", outcome.train_log.epochs_trained);
    for r in &outcome.reports {
        let raw = r.auroc_raw.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{} {:<15} auroc={:.4} auroc_raw={raw} fpr@95={:.4} nfe={}",
            r.benchmark, r.method, r.auroc, r.fpr_at_95, r.nfe_per_sample
        );
    }
    println!("wrote {}", dir.display());
    if gate {
        match check_gate(&cfg, &outcome) {
            Some((true, msg)) => println!("{msg}"),
            Some((false, msg)) => return Err(Failure::Gate(msg)),
            None => println!("no gate configured for {}", cfg.benchmark),
        }
    }
    Ok(())
}

fn cmd_oracle(schedule_steps: usize, nodes: usize, out: &OutArgs) -> CmdResult {
    let dir = out.dir("oracle");
    write_file(&dir.join("config.txt"), &format!("T = {schedule_steps}\nnodes = {nodes}\nschedule = cosine\n"))?;
    let schedule = NoiseSchedule::cosine(schedule_steps)?;
    let mut csv = String::from("pair,closed_form_kl,integral_squared,rel_err_squared,integral_unsquared,rel_err_unsquared\n");
    for pair in kl_verification_pairs()? {
        let kl = closed_form_gaussian_kl(&pair.a, &pair.b)?;
        let sq = kl_score_integral(&pair.a, &pair.b, &schedule, nodes, KlWeighting::Squared)?;
        let un = kl_score_integral(&pair.a, &pair.b, &schedule, nodes, KlWeighting::UnsquaredNorm)?;
        let _ = writeln!(
            csv,
            "\"{}\",{kl},{sq},{},{un},{}",
            pair.name,
            (sq - kl).abs() / kl,
            (un - kl).abs() / kl
        );
    }
    write_file(&dir.join("kl_verification.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Gen(c) => cmd_gen(c),
        Command::Train(c) => cmd_train(c),
        Command::Score {
            common,
            checkpoint,
            split,
            limit,
        } => cmd_score(common, checkpoint, split, *limit),
        Command::Bench {
            common,
            pretrained,
            latency,
            gate,
        } => cmd_bench(common, pretrained.as_deref(), *latency, *gate),
        Command::Oracle {
            schedule_steps,
            nodes,
            out,
        } => cmd_oracle(*schedule_steps, *nodes, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Gate(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(EXIT_GATE)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => EXIT_USAGE,
                Error::NonFiniteLoss { .. } | Error::Contract(_) => EXIT_NUMERIC,
                Error::Shape { .. } | Error::Io { .. } | Error::Sbdt(_) | Error::Json(_) => EXIT_DATA,
            })
        }
    }
}
