//! Command-line interface of the `dabfnet` binary.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 verification
//! failure.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::bwfpn::NeckKind;
use crate::config::RunConfig;
use crate::detector::flops::count_flops;
use crate::detector::{Dataset, HeadKind, ModelConfig};
use crate::error::{Error, Result};
use crate::experiment::{self, Variant};
use crate::losses::{loss_and_center_grad, BBox, LossState, LossVariant};
use crate::verify::{self, Selection, VerifyOptions};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_VERIFY: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "dabfnet",
    version,
    about = "Attention head, weighted feature pyramid and Wise-IoU experiments on synthetic helmet scenes",
    after_help = "Exit codes: 0 success, 1 usage or configuration error, 2 verification failure."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic scenes as PPM images with label files.
    Synth(SynthArgs),
    /// Train a detector; writes config, metrics.csv and model.ckpt.
    Train(TrainArgs),
    /// Score a checkpoint on the validation set of a config.
    Eval(EvalArgs),
    /// Train all eight head/neck/loss combinations over several seeds.
    Ablate(AblateArgs),
    /// Tabulate all nine box losses over a grid of centre offsets.
    Losslab(LosslabArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Per-layer FLOP count of a model config.
    Flops(FlopsArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Run config; only the scene keys are used.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    /// Generator index of the first scene.
    #[arg(long, default_value_t = 0)]
    pub start: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `out_dir` of the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Where eval.csv and the resolved config go; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Overrides `out_dir` of the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LosslabArgs {
    /// Predicted and ground-truth boxes as `cx,cy,w,h`.
    #[arg(long, num_args = 2, value_names = ["PRED", "GT"], required = true)]
    pub pair: Vec<String>,
    /// Offset grid as `extent,step`: offsets -extent..=extent in both axes.
    #[arg(long)]
    pub grid: String,
    /// Running mean of 1 - IoU used by the v2 and v3 rows.
    #[arg(long, default_value_t = 1.0)]
    pub running_mean: f64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// all, tensor, dahead, bwfpn, loss or detector.
    #[arg(long, default_value = "all")]
    pub module: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Adds a deliberately wrong gradient rule, which must be reported.
    #[arg(long)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for flops.csv and the resolved config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `std::env::args` and runs the command.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

pub fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Losslab(a) => losslab(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Flops(a) => flops(a),
    }
}

fn load(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn synth(a: SynthArgs) -> Result<u8> {
    let cfg = load(&a.spec)?;
    cfg.scenes.validate()?;
    let data = Dataset::synthetic(&cfg.scenes, a.start, a.count);
    data.save(&a.out)?;
    cfg.write_resolved(&a.out)?;
    println!("wrote {} scenes to {}", a.count, a.out.display());
    Ok(EXIT_OK)
}

fn train(a: TrainArgs) -> Result<u8> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(out) = a.out {
        cfg.out_dir = out;
    }
    println!("{}", crate::detector::train::METRICS_HEADER);
    let out = experiment::train_run(&cfg, |row| println!("{}", row.csv_row()))?;
    println!("outputs in {} ({:.6} GFLOPs)", out.out_dir.display(), out.gflops);
    Ok(EXIT_OK)
}

fn eval(a: EvalArgs) -> Result<u8> {
    let cfg = RunConfig::load(&a.config)?;
    let row = experiment::evaluate_checkpoint(&cfg, &a.checkpoint)?;
    let out = a.out.unwrap_or_else(|| a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    let text = crate::detector::train::metrics_csv(std::slice::from_ref(&row));
    cfg.write_resolved(&out)?;
    fs::write(out.join("eval.csv"), &text)?;
    print!("{text}");
    Ok(EXIT_OK)
}

fn ablate(a: AblateArgs) -> Result<u8> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(out) = a.out {
        cfg.out_dir = out;
    }
    let out = cfg.out_dir.clone();
    println!("{}", experiment::RUNS_HEADER.rsplit_once(',').map_or("", |(h, _)| h));
    let runs = experiment::ablate(&cfg, &Variant::ALL, &a.seeds, &out, |r| {
        let v = r.variant;
        let e = &r.metrics;
        println!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            v.dahead as u8, v.bwfpn as u8, v.wiou as u8, r.seed, e.precision, e.recall, e.map50, e.map5095, r.gflops
        );
    })?;
    println!();
    print!("{}", experiment::ablation_csv(&runs));
    Ok(EXIT_OK)
}

fn parse_box(s: &str) -> Result<BBox> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| Error::invalid(format!("box `{s}`: {e}"))))
        .collect::<Result<_>>()?;
    match v.as_slice() {
        &[cx, cy, w, h] => BBox::new(cx, cy, w, h),
        _ => Err(Error::invalid(format!("box `{s}` must be cx,cy,w,h"))),
    }
}

/// CSV of every loss and its centre-gradient magnitude over the offset grid.
pub fn losslab_csv(pred: &BBox, gt: &BBox, extent: f64, step: f64, running_mean: f64) -> Result<String> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("grid step must be positive, got {step}")));
    }
    if !(extent >= 0.0 && extent.is_finite()) {
        return Err(Error::invalid(format!("grid extent must be non-negative, got {extent}")));
    }
    let n = (extent / step + 1e-9).floor() as i64;
    let mut s = String::from("dx,dy");
    for v in LossVariant::ALL {
        let _ = write!(s, ",{v}");
    }
    for v in LossVariant::ALL {
        let _ = write!(s, ",grad_{v}");
    }
    s.push('\n');
    for iy in -n..=n {
        for ix in -n..=n {
            let (dx, dy) = (ix as f64 * step, iy as f64 * step);
            let p = pred.translated(dx, dy);
            let mut losses = Vec::new();
            let mut grads = Vec::new();
            for v in LossVariant::ALL {
                let state = LossState { running_mean, ..LossState::new(v) }.eval();
                let (l, g) = loss_and_center_grad(&p, gt, &state)?;
                losses.push(l);
                grads.push(g[0].hypot(g[1]));
            }
            let _ = write!(s, "{dx},{dy}");
            for x in losses.iter().chain(&grads) {
                let _ = write!(s, ",{x:.9}");
            }
            s.push('\n');
        }
    }
    Ok(s)
}

fn losslab(a: LosslabArgs) -> Result<u8> {
    let pred = parse_box(&a.pair[0])?;
    let gt = parse_box(&a.pair[1])?;
    let (extent, step) = a
        .grid
        .split_once(',')
        .ok_or_else(|| Error::invalid(format!("grid `{}` must be extent,step", a.grid)))?;
    let parse = |x: &str| x.trim().parse::<f64>().map_err(|e| Error::invalid(format!("grid `{}`: {e}", a.grid)));
    let csv = losslab_csv(&pred, &gt, parse(extent)?, parse(step)?, a.running_mean)?;
    match a.out {
        Some(path) => fs::write(path, csv)?,
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    Ok(EXIT_OK)
}

fn gradcheck(a: GradcheckArgs) -> Result<u8> {
    let selection: Selection = a.module.parse()?;
    let opts = VerifyOptions { seed: a.seed, inject_fault: a.inject_fault, ..VerifyOptions::default() };
    println!(
        "central differences, step {:e}, tolerance {:e}, {} kink-free points per check",
        opts.eps, opts.tol, opts.points
    );
    let results = verify::run(selection, &opts, |r| println!("{}", r.line()))?;
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed", results.len(), failed);
    Ok(if failed == 0 { EXIT_OK } else { EXIT_VERIFY })
}

fn flops(a: FlopsArgs) -> Result<u8> {
    let cfg = load(&a.config)?;
    let model = &cfg.model;
    let report = count_flops(model)?;
    println!("FLOPs = 2 x MACs; elementwise 1/element, group norm 4/element, max pool K^2/output, bilinear 8/value");
    for l in &report.layers {
        println!("{:<28} {:>12}", l.name, l.flops);
    }
    println!("{:<28} {:>12}", "total", report.total());
    println!("{:<28} {:>12.6}", "GFLOPs", report.gflops());
    let with = |head: HeadKind, neck: NeckKind| count_flops(&ModelConfig { head, neck, ..model.clone() });
    let (fpn, bw) = (with(model.head, NeckKind::Fpn)?, with(model.head, NeckKind::Bwfpn)?);
    let (plain, da) = (with(HeadKind::Plain, model.neck)?, with(HeadKind::DaHead, model.neck)?);
    println!("neck bwfpn - fpn: {:+}", bw.subtotal("neck") as i64 - fpn.subtotal("neck") as i64);
    println!("head dahead - plain: {:+}", da.subtotal("head") as i64 - plain.subtotal("head") as i64);
    if let Some(out) = a.out {
        cfg.write_resolved(&out)?;
        fs::write(out.join("flops.csv"), report.to_csv())?;
    }
    Ok(EXIT_OK)
}
