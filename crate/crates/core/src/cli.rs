//! `hfres` command line: train, eval, sweep, flops and analyze-freq.
//!
//! Exit codes: 0 success, 1 invalid config or usage, 2 data missing or
//! unreadable, 3 non-finite loss, 4 checkpoint/config mismatch.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::calibration::{
    default_grid, region_decomposition, select_threshold_for_budget, sweep, write_records,
    write_regions, write_sweep,
};
use crate::config::ExperimentConfig;
use crate::data::{load_split, Dataset, NormStats, Split};
use crate::error::{Error, Result};
use crate::flops::{count_base, count_static, format_millions, CostReport};
use crate::freq::{residual_report, write_pgm, write_spectrum_csv, DEFAULT_BAND_RADIUS};
use crate::net::{wrap_multiscale, BaseNetwork, MsNetwork, Parameterized};
use crate::train::{
    capture, evaluate, read_log, restore, train_epochs, write_log, Checkpoint, RunOptions,
    TrainModel, TrainState,
};
use crate::util::{atomic_write, atomic_write_with};

pub const CHECKPOINT_FILE: &str = "checkpoint.mshf";
pub const BASELINE_PREFIX: &str = "baseline_";

#[derive(Debug, Parser)]
#[command(name = "hfres", version, about = "Two-scale high-frequency residual networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Experiment configuration (strict JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset root; overrides HFRES_DATA_DIR and the config.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Overrides the config's output_dir.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Evaluation worker threads.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the two-scale network (or the single-scale baseline).
    Train {
        #[command(flatten)]
        common: Common,
        /// Train the single-scale network at the high resolution instead.
        #[arg(long)]
        baseline: bool,
        /// Continue from this checkpoint up to train.epochs.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Top-1 accuracy of both heads on the evaluation split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Two-scale checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Per-image records, threshold sweep and region decomposition.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Two-scale checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report the largest threshold whose average cost fits this many
        /// million MACs.
        #[arg(long)]
        budget_mmacs: Option<f64>,
    },
    /// Static MAC counts of the configured network.
    Flops {
        #[command(flatten)]
        common: Common,
    },
    /// Spectra of baseline, upsampled low and high residual features.
    AnalyzeFreq {
        #[command(flatten)]
        common: Common,
        /// Two-scale checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Baseline checkpoint written by `train --baseline`.
        #[arg(long)]
        baseline_checkpoint: PathBuf,
        /// Number of evaluation images in the probe batch.
        #[arg(long, default_value_t = 64)]
        probe_size: usize,
        /// Low-band half-width as a fraction of Nyquist.
        #[arg(long, default_value_t = DEFAULT_BAND_RADIUS)]
        band_radius: f64,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::DataMissing(_)
        | Error::BadMagic { .. }
        | Error::Truncated { .. }
        | Error::CountMismatch { .. }
        | Error::CifarLength { .. }
        | Error::EmptyDataset => 2,
        Error::NonFiniteLoss { .. } => 3,
        Error::SpecHashMismatch { .. } => 4,
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

struct Context {
    cfg: ExperimentConfig,
    data_dir: Option<PathBuf>,
    out: PathBuf,
    threads: usize,
}

impl Context {
    fn new(c: &Common) -> Result<Self> {
        let cfg = ExperimentConfig::load(&c.config)?;
        if c.threads == 0 {
            return Err(Error::config("--threads", "must be at least 1"));
        }
        Ok(Context {
            data_dir: cfg.resolve_data_dir(c.data_dir.as_deref()),
            out: c.output_dir.clone().unwrap_or_else(|| cfg.output_dir.clone()),
            threads: c.threads,
            cfg,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn load(&self, split: Split) -> Result<Dataset> {
        let kind = self.cfg.dataset()?;
        let mut ds = load_split(kind, self.data_dir.as_deref(), split, self.cfg.seed)?;
        let limit = match split {
            Split::Train => self.cfg.data.limits.train,
            Split::Eval => self.cfg.data.limits.eval,
        };
        if let Some(n) = limit {
            ds = ds.truncate(n)?;
        }
        let (_, h, _) = ds.image_shape();
        if self.cfg.resolutions.high == 2 * h {
            ds = ds.upscale2x()?;
        }
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(ds)
    }

    fn ms(&self) -> Result<MsNetwork> {
        let r = self.cfg.resolutions;
        wrap_multiscale(&self.cfg.base_spec()?, r.low, self.cfg.fuse_stem, self.cfg.seed)
    }

    fn baseline(&self) -> Result<BaseNetwork> {
        crate::net::build_base(&self.cfg.base_spec()?, self.cfg.resolutions.high, self.cfg.seed)
    }

    fn write_json(&self, name: &str, value: &impl serde::Serialize) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        atomic_write(&self.path(name), format!("{text}\n").as_bytes())
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            common,
            baseline,
            resume,
        } => {
            let ctx = Context::new(&common)?;
            if baseline {
                cmd_train(&ctx, ctx.baseline()?, BASELINE_PREFIX, resume.as_deref())
            } else {
                cmd_train(&ctx, ctx.ms()?, "", resume.as_deref())
            }
        }
        Command::Eval { common, checkpoint } => cmd_eval(&Context::new(&common)?, &checkpoint),
        Command::Sweep {
            common,
            checkpoint,
            budget_mmacs,
        } => cmd_sweep(&Context::new(&common)?, &checkpoint, budget_mmacs),
        Command::Flops { common } => cmd_flops(&Context::new(&common)?),
        Command::AnalyzeFreq {
            common,
            checkpoint,
            baseline_checkpoint,
            probe_size,
            band_radius,
        } => cmd_analyze_freq(
            &Context::new(&common)?,
            &checkpoint,
            &baseline_checkpoint,
            probe_size,
            band_radius,
        ),
    }
}

trait Graphable {
    fn graph_json(&self, ctx: &Context) -> Result<serde_json::Value>;
}

impl Graphable for MsNetwork {
    fn graph_json(&self, _: &Context) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self.graph()?)?)
    }
}

impl Graphable for BaseNetwork {
    fn graph_json(&self, ctx: &Context) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self.graph(ctx.cfg.resolutions.high)?)?)
    }
}

fn cmd_train<M: TrainModel + Graphable>(
    ctx: &Context,
    mut model: M,
    prefix: &str,
    resume: Option<&Path>,
) -> Result<()> {
    let train = Arc::new(ctx.load(Split::Train)?);
    let eval = ctx.load(Split::Eval)?;
    let log_path = ctx.path(&format!("{prefix}train_log.csv"));
    let ckpt_path = ctx.path(&format!("{prefix}{CHECKPOINT_FILE}"));
    let (mut state, norm, mut log) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let (state, norm) = restore(&mut model, &ck)?;
            let mut log = match std::fs::read(&log_path) {
                Ok(bytes) => read_log(&bytes[..])?,
                Err(_) => Vec::new(),
            };
            log.retain(|e| e.epoch <= state.epoch);
            (state, norm, log)
        }
        None => (
            TrainState::new(ctx.cfg.train_seed()),
            NormStats::compute(&train.images)?,
            Vec::new(),
        ),
    };
    ctx.write_json(&format!("{prefix}resolved_config.json"), &ctx.cfg)?;
    ctx.write_json(&format!("{prefix}graph.json"), &model.graph_json(ctx)?)?;
    let opts = RunOptions {
        threads: ctx.threads,
        ..RunOptions::default()
    };
    train_epochs(
        &mut model,
        &mut state,
        &ctx.cfg.train,
        &train,
        &eval,
        &norm,
        ctx.cfg.train.epochs,
        &opts,
        |entry, m, st| {
            log.push(entry.clone());
            capture(m, st, &norm)?.save(&ckpt_path)?;
            atomic_write_with(&log_path, |buf| write_log(buf, &log))?;
            let low = entry.acc_low.map(|a| format!(" acc_L {:.4}", a)).unwrap_or_default();
            println!(
                "epoch {} lr {} loss {:.4}{low} acc_H {:.4}",
                entry.epoch, entry.lr, entry.train_loss, entry.acc_high
            );
            Ok(())
        },
    )?;
    if state.epoch >= ctx.cfg.train.epochs && !ckpt_path.exists() {
        capture(&model, &state, &norm)?.save(&ckpt_path)?;
    }
    atomic_write_with(&log_path, |buf| write_log(buf, &log))
}

fn load_ms(ctx: &Context, path: &Path) -> Result<(MsNetwork, NormStats)> {
    let mut ms = ctx.ms()?;
    let (_, norm) = restore(&mut ms, &Checkpoint::load(path)?)?;
    Ok((ms, norm))
}

fn cmd_eval(ctx: &Context, checkpoint: &Path) -> Result<()> {
    let (ms, norm) = load_ms(ctx, checkpoint)?;
    let eval = ctx.load(Split::Eval)?;
    let ev = evaluate(&ms, &eval, &norm, 256, ctx.threads)?;
    let acc_low = ev.acc_low.unwrap_or(f64::NAN);
    let text = format!("n,acc_L,acc_H\n{},{},{}\n", eval.len(), acc_low, ev.acc_high);
    atomic_write(&ctx.path("eval.csv"), text.as_bytes())?;
    println!("acc_L {acc_low} acc_H {}", ev.acc_high);
    Ok(())
}

fn cmd_sweep(ctx: &Context, checkpoint: &Path, budget_mmacs: Option<f64>) -> Result<()> {
    let (ms, norm) = load_ms(ctx, checkpoint)?;
    let eval = ctx.load(Split::Eval)?;
    let ev = evaluate(&ms, &eval, &norm, 256, ctx.threads)?;
    let costs = count_static(&ms, ms.low_res(), ms.high_res())?;
    let points = sweep(&ev.records, &costs, &default_grid())?;
    let regions = region_decomposition(&ev.records)?;
    atomic_write_with(&ctx.path("records.csv"), |b| write_records(b, &ev.records))?;
    atomic_write_with(&ctx.path("sweep.csv"), |b| write_sweep(b, &points))?;
    atomic_write_with(&ctx.path("regions.csv"), |b| write_regions(b, &regions))?;
    for p in [points.first().unwrap(), points.last().unwrap()] {
        println!(
            "threshold {} accuracy {} exit_fraction {} avg_mmacs {}",
            p.threshold,
            p.accuracy,
            p.exit_fraction,
            format_millions(p.avg_cost)
        );
    }
    println!(
        "regions A {} B {} C {} D {} upper_bound {}",
        regions.a, regions.b, regions.c, regions.d, regions.upper_bound
    );
    if let Some(budget) = budget_mmacs {
        match select_threshold_for_budget(&points, budget * 1e6) {
            Some(p) => println!(
                "budget {budget} MMACs: threshold {} accuracy {} avg_mmacs {}",
                p.threshold,
                p.accuracy,
                format_millions(p.avg_cost)
            ),
            None => println!(
                "budget {budget} MMACs: no threshold fits (minimum {} MMACs)",
                format_millions(costs.f_low as f64)
            ),
        }
    }
    Ok(())
}

fn cmd_flops(ctx: &Context) -> Result<()> {
    let ms = ctx.ms()?;
    let costs = count_static(&ms, ms.low_res(), ms.high_res())?;
    let base = count_base(&ctx.baseline()?, ms.high_res())?;
    let report = CostReport::new(ms.graph()?, costs.clone());
    let mut value = serde_json::to_value(&report)?;
    value["baseline_mmacs"] = json!(base as f64 / 1e6);
    ctx.write_json("costs.json", &value)?;
    println!("F_L {} MFLOPs (MACs)", format_millions(costs.f_low as f64));
    println!("F_H {} MFLOPs (MACs)", format_millions(costs.f_high as f64));
    println!("total {} MFLOPs (MACs)", format_millions(costs.total() as f64));
    println!("baseline {} MFLOPs (MACs)", format_millions(base as f64));
    Ok(())
}

fn cmd_analyze_freq(
    ctx: &Context,
    checkpoint: &Path,
    baseline_checkpoint: &Path,
    probe_size: usize,
    band_radius: f64,
) -> Result<()> {
    let (ms, norm) = load_ms(ctx, checkpoint)?;
    let mut base = ctx.baseline()?;
    restore(&mut base, &Checkpoint::load(baseline_checkpoint)?)?;
    let eval = ctx.load(Split::Eval)?;
    let n = probe_size.clamp(1, eval.len());
    let probe = crate::data::eval_batch(&eval, 0..n, Some(&norm))?;
    let report = residual_report(&ms, &base, &probe.x_high, band_radius)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for (name, s) in [
        ("baseline", &report.baseline),
        ("low", &report.low),
        ("residual", &report.residual),
    ] {
        let io = |p: PathBuf| move |e| Error::io(p, e);
        let csv_path = ctx.path(&format!("spectrum_{name}.csv"));
        atomic_write_with(&csv_path, |b| write_spectrum_csv(b, &s.summary).map_err(io(csv_path.clone())))?;
        let pgm_path = ctx.path(&format!("spectrum_{name}.pgm"));
        atomic_write_with(&pgm_path, |b| write_pgm(b, &s.summary).map_err(io(pgm_path.clone())))?;
    }
    let [b, l, r] = report.hf_ratios();
    ctx.write_json(
        "freq_report.json",
        &json!({
            "hf_ratio_baseline": b,
            "hf_ratio_low": l,
            "hf_ratio_residual": r,
            "band_radius": band_radius,
            "probe_size": n,
            "warnings": report.warnings,
            "spec_hash": format!("{:016x}", ms.spec_hash()),
        }),
    )?;
    println!("hf_ratio baseline {b} low {l} residual {r}");
    Ok(())
}
