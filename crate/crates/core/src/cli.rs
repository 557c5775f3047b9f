//! Command-line surface: `train`, `eval`, `probe`, `grid`, `co-demo`, `timing`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::attacks::{AttackKind, AttackSpec, Classifier};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsWriter};
use crate::models::Mlp;
use crate::probes::{self, ProbeReport};
use crate::regularizers::RegularizerKind;
use crate::rng::{purpose, stream};
use crate::trainer::{self, TimingReport, TrainOutcome};

#[derive(Debug, Parser)]
#[command(
    name = "elle",
    version,
    about = "Single-step adversarial training with local-linearity regularization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration; writes metrics.jsonl, epochs.csv and model.ckpt.
    Train(Common),
    /// Clean and robust accuracy of a checkpoint on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Probe reports (E_lin, misalignment, FD-GradAlign) for a checkpoint.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Monte-Carlo draws for the E_lin estimate.
        #[arg(long, default_value_t = 8)]
        samples: usize,
        /// Finite-difference radius of the FD-GradAlign probe.
        #[arg(long, default_value_t = 1e-3)]
        sigma: f64,
    },
    /// Sweep λ over several seeds; writes summary.csv.
    Grid {
        #[command(flatten)]
        common: Common,
        /// Comma-separated λ values.
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        /// Comma-separated seeds; defaults to the configured seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Paired runs without and with the ELLE term; prints CO verdicts.
    CoDemo {
        #[command(flatten)]
        common: Common,
        /// λ of the regularized run; defaults to the configured λ.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Median per-step forward/backward/total time per method.
    Timing {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 30)]
        steps: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
    },
}

pub fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.validate()?;
    }
    Ok(cfg)
}

/// Trains `cfg`, writing `metrics.jsonl`, `epochs.csv`, `config.toml` and
/// `model.ckpt` into `out`.
pub fn run_training(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out)?;
    let (train_ds, test) = trainer::load_data(cfg)?;
    fs::write(out.join("config.toml"), cfg.canonical())?;
    let log_path = out.join("metrics.jsonl");
    let mut log = MetricsWriter::create(&log_path, cfg)?;
    log.header(cfg, &train_ds.provenance)?;
    let mut io_err = None;
    let result = trainer::train(cfg, &train_ds, &test, &mut |ev| {
        if io_err.is_none() {
            if let Err(e) = log.event(ev) {
                io_err = Some(e);
            }
        }
    });
    log.flush()?;
    if let Some(e) = io_err {
        return Err(e);
    }
    let outcome = result?;
    log.record("summary", &RunSummary::from_outcome(cfg, &outcome))?;
    log.flush()?;
    drop(log);
    let rows = metrics::read_log(&log_path)?;
    metrics::export_epoch_csv(&rows, fs::File::create(out.join("epochs.csv"))?)?;
    checkpoint::save(&outcome.model, &out.join("model.ckpt"))?;
    Ok(outcome)
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub regularizer: &'static str,
    pub lambda: f64,
    pub seed: u64,
    pub final_clean_acc: f64,
    pub final_robust_acc: f64,
    pub best_robust_acc: f64,
    pub max_elin_probe: f64,
    pub co_flag: bool,
    pub co_epoch: Option<usize>,
}

impl RunSummary {
    pub fn from_outcome(cfg: &RunConfig, o: &TrainOutcome) -> Self {
        let last = o.epochs.last();
        Self {
            regularizer: cfg.regularizer.kind.name(),
            lambda: cfg.regularizer.lambda,
            seed: cfg.seed,
            final_clean_acc: last.map_or(f64::NAN, |e| e.clean_acc),
            final_robust_acc: last.map_or(f64::NAN, |e| e.robust_acc),
            best_robust_acc: o
                .epochs
                .iter()
                .map(|e| e.robust_acc)
                .fold(f64::NAN, f64::max),
            max_elin_probe: o
                .epochs
                .iter()
                .map(|e| e.elin_probe)
                .fold(f64::NAN, f64::max),
            co_flag: o.co_epoch.is_some(),
            co_epoch: o.co_epoch,
        }
    }
}

/// The regularized twin of a config, with the given λ.
pub fn with_regularizer(
    cfg: &RunConfig,
    kind: RegularizerKind,
    lambda: f64,
    tag: &str,
) -> RunConfig {
    let mut c = cfg.clone();
    c.regularizer.kind = kind;
    c.regularizer.lambda = lambda;
    c.name = Some(format!("{}-{tag}", cfg.name.as_deref().unwrap_or("run")));
    c
}

/// FGSM run and ELLE run of the CO demonstration.
pub fn co_demo(cfg: &RunConfig, lambda: f64, out: &Path) -> Result<(RunSummary, RunSummary)> {
    let base = with_regularizer(cfg, RegularizerKind::None, 0.0, "fgsm");
    let reg = with_regularizer(cfg, RegularizerKind::Elle, lambda, "elle");
    let a = run_training(&base, &out.join("fgsm"))?;
    let b = run_training(&reg, &out.join("elle"))?;
    Ok((
        RunSummary::from_outcome(&base, &a),
        RunSummary::from_outcome(&reg, &b),
    ))
}

pub const TIMING_METHODS: [&str; 6] = ["fgsm", "elle", "elle_a", "gradalign", "llr_sq", "cure"];

/// Timing table over [`TIMING_METHODS`] with FGSM as the attack.
pub fn timing_table(cfg: &RunConfig, warmup: usize, steps: usize) -> Result<Vec<TimingReport>> {
    let (train_ds, _) = trainer::load_data(cfg)?;
    let mut out = Vec::new();
    for m in TIMING_METHODS {
        let kind = match m {
            "fgsm" => RegularizerKind::None,
            "elle" => RegularizerKind::Elle,
            "elle_a" => RegularizerKind::ElleA,
            "gradalign" => RegularizerKind::Gradalign,
            "llr_sq" => RegularizerKind::LlrSq,
            _ => RegularizerKind::Cure,
        };
        let mut c = with_regularizer(cfg, kind, cfg.regularizer.lambda.max(1.0), m);
        c.attack = AttackSpec::fgsm(cfg.epsilon());
        out.push(trainer::time_steps(&c, &train_ds, m, warmup, steps)?);
    }
    Ok(out)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Contract(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Contract(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn print_json<T: Serialize>(out: &mut impl Write, v: &T) -> Result<()> {
    writeln!(
        out,
        "{}",
        serde_json::to_string(v).map_err(|e| Error::Contract(e.to_string()))?
    )?;
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<Mlp> {
    let m = checkpoint::load(path)?;
    if m.config.input_dim != cfg.model.input_dim || m.config.classes != cfg.model.classes {
        return Err(Error::Checkpoint(
            "checkpoint does not match the configured model".into(),
        ));
    }
    Ok(m)
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: String,
    clean_acc: f64,
    robust_acc: f64,
    attack: AttackKind,
    epsilon: f64,
    examples: usize,
}

#[derive(Serialize)]
struct GridRow {
    lambda: f64,
    seed: u64,
    final_clean_acc: f64,
    final_robust_acc: f64,
    best_robust_acc: f64,
    max_elin_probe: f64,
    co_flag: bool,
}

pub fn run(cli: Cli, stdout: &mut impl Write) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = load_config(&common)?;
            let o = run_training(&cfg, &common.out)?;
            print_json(stdout, &RunSummary::from_outcome(&cfg, &o))
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let model = load_checkpoint(&cfg, &checkpoint)?;
            let (_, test) = trainer::load_data(&cfg)?;
            let attack = cfg.eval_attack();
            let rep = EvalReport {
                checkpoint: checkpoint.display().to_string(),
                clean_acc: trainer::evaluate(&model, &test, None, cfg.seed)?,
                robust_acc: trainer::evaluate(&model, &test, Some(&attack), cfg.seed)?,
                attack: attack.kind,
                epsilon: attack.epsilon,
                examples: test.len(),
            };
            print_json(stdout, &rep)
        }
        Command::Probe {
            common,
            checkpoint,
            samples,
            sigma,
        } => {
            let cfg = load_config(&common)?;
            let model = load_checkpoint(&cfg, &checkpoint)?;
            let (_, test) = trainer::load_data(&cfg)?;
            let probe = test.slice(0, cfg.eval.probe_size.min(test.len()));
            let src = Classifier {
                model: &model,
                labels: probe.labels(),
            };
            let (eps, seed, clamp) = (cfg.epsilon(), cfg.seed, cfg.regularizer.clamp_samples);
            let reports: Vec<ProbeReport> = vec![
                probes::estimate_elin(
                    &src,
                    probe.inputs(),
                    eps,
                    samples,
                    clamp,
                    &mut stream(seed, &[purpose::PROBE, 0]),
                    seed,
                )?,
                probes::grad_misalignment(
                    &src,
                    probe.inputs(),
                    eps,
                    clamp,
                    &mut stream(seed, &[purpose::PROBE, 1]),
                    seed,
                )?,
                probes::fd_gradalign_estimate(
                    &src,
                    probe.inputs(),
                    eps,
                    sigma,
                    &mut stream(seed, &[purpose::PROBE, 2]),
                    seed,
                )?,
            ];
            fs::create_dir_all(&common.out)?;
            let mut log = MetricsWriter::create(&common.out.join("probes.jsonl"), &cfg)?;
            for r in &reports {
                log.record("probe", r)?;
                print_json(stdout, r)?;
            }
            log.flush()
        }
        Command::Grid {
            common,
            lambdas,
            seeds,
        } => {
            let cfg = load_config(&common)?;
            let seeds = if seeds.is_empty() {
                vec![cfg.seed]
            } else {
                seeds
            };
            let kind = match cfg.regularizer.kind {
                RegularizerKind::None => RegularizerKind::Elle,
                k => k,
            };
            let mut rows = Vec::new();
            for &lambda in &lambdas {
                for &seed in &seeds {
                    let mut c =
                        with_regularizer(&cfg, kind, lambda, &format!("lambda{lambda}-seed{seed}"));
                    c.seed = seed;
                    let dir = common.out.join(format!("lambda{lambda}_seed{seed}"));
                    let s = RunSummary::from_outcome(&c, &run_training(&c, &dir)?);
                    let row = GridRow {
                        lambda,
                        seed,
                        final_clean_acc: s.final_clean_acc,
                        final_robust_acc: s.final_robust_acc,
                        best_robust_acc: s.best_robust_acc,
                        max_elin_probe: s.max_elin_probe,
                        co_flag: s.co_flag,
                    };
                    print_json(stdout, &row)?;
                    rows.push(row);
                }
            }
            write_csv(&common.out.join("summary.csv"), &rows)
        }
        Command::CoDemo { common, lambda } => {
            let cfg = load_config(&common)?;
            let lambda = lambda.unwrap_or(cfg.regularizer.lambda);
            let (a, b) = co_demo(&cfg, lambda, &common.out)?;
            print_json(stdout, &a)?;
            print_json(stdout, &b)?;
            write_csv(&common.out.join("verdicts.csv"), &[a, b])
        }
        Command::Timing {
            common,
            steps,
            warmup,
        } => {
            let cfg = load_config(&common)?;
            let table = timing_table(&cfg, warmup, steps)?;
            for r in &table {
                print_json(stdout, r)?;
            }
            fs::create_dir_all(&common.out)?;
            write_csv(&common.out.join("timing.csv"), &table)
        }
    }
}
