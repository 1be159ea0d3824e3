//! Command-line driver: synthesize data, train, predict, evaluate, verify
//! gradients, and inspect configurations.
//!
//! Flag values override config-file values (`--config`, flat `key = value`
//! lines), which override built-in defaults. `MSDC_THREADS=1` selects the
//! deterministic single-threaded mode.

mod colormap;
mod config_file;

pub use colormap::{ramp_color, render_colormap, render_colormap_png};
pub use config_file::{parse_config_text, Resolver};

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use crate::data::{
    generate_synthetic_pair, list_indices, load_dataset, load_sample, save_sample, write_kitti_png,
    SynthSpec,
};
use crate::error::Result;
use crate::metrics::MetricReport;
use crate::model::{count_params, ModelConfig, MsdcNet, Variant, REFERENCE_PARAM_COUNT};
use crate::train::{log_to_csv, predict_disparity, run_training, Checkpoint, TrainRunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "msdc",
    version,
    about = "End-to-end stereo disparity estimation: multi-scale dense feature fusion, \
             concatenation cost volume, residual 3D matching, soft-argmin regression"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate a synthetic random-dot stereo dataset with exact ground truth
    Synth(SynthArgs),
    /// Train a model and write the training log and final checkpoint
    Train(TrainArgs),
    /// Predict disparity maps for a dataset with a trained checkpoint
    Predict(PredictArgs),
    /// Evaluate a checkpoint against ground truth and write metric reports
    Eval(EvalArgs),
    /// Run the gradient-check verification suite
    Gradcheck(GradcheckArgs),
    /// Print the layer plan and parameter count of a configuration
    Info(InfoArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Config file with `key = value` defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output dataset directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of stereo pairs
    #[arg(long)]
    count: Option<usize>,
    /// Image height in pixels
    #[arg(long)]
    height: Option<usize>,
    /// Image width in pixels
    #[arg(long)]
    width: Option<usize>,
    /// Generator seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (left/, right/, disp/)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for log.csv and final.ckpt
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optimization steps
    #[arg(long)]
    steps: Option<u64>,
    /// Batch size
    #[arg(long)]
    batch: Option<usize>,
    /// Seed for initialization and shuffling
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum disparity D (multiple of 4)
    #[arg(long)]
    max_disparity: Option<usize>,
    /// Base feature channels F
    #[arg(long)]
    base_channels: Option<usize>,
    /// Architecture variant: full, 2d, 3d, or both
    #[arg(long)]
    variant: Option<String>,
    /// 3D pyramid levels
    #[arg(long)]
    levels_3d: Option<usize>,
    /// Resume from this checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Write intermediate checkpoints every N steps (0 = never)
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Print a progress line every N steps
    #[arg(long)]
    log_every: Option<u64>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory (left/, right/; disp/ optional)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for 16-bit disparity PNGs
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write color-mapped renders
    #[arg(long)]
    colormap: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for per_sample.csv and aggregate.csv
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-operation relative-error tolerance (end-to-end runs at 10x)
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Args, Debug)]
pub struct InfoArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_disparity: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    levels_3d: Option<usize>,
}

fn require(path: Option<PathBuf>, resolver: &Resolver, key: &str) -> Result<PathBuf> {
    if let Some(p) = path {
        return Ok(p);
    }
    if let Some(v) = resolver.resolve_opt::<String>(key, None)? {
        return Ok(PathBuf::from(v));
    }
    Err(crate::error::Error::invalid(format!(
        "missing required flag --{key}"
    )))
}

fn model_config(
    resolver: &Resolver,
    base_channels: Option<usize>,
    max_disparity: Option<usize>,
    variant: Option<String>,
    levels_3d: Option<usize>,
    defaults: (usize, usize),
) -> Result<ModelConfig> {
    let f = resolver.resolve("base-channels", base_channels, defaults.0)?;
    let d = resolver.resolve("max-disparity", max_disparity, defaults.1)?;
    let mut config = ModelConfig::new(f, d);
    if let Some(levels) = resolver.resolve_opt("levels-3d", levels_3d)? {
        config.levels_3d = levels;
    }
    let variant = resolver.resolve("variant", variant, "full".to_string())?;
    config.variant = Variant::parse(&variant)?;
    config.validate()?;
    Ok(config)
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let r = Resolver::from_path(args.config.as_deref())?;
    let out = require(args.out, &r, "out")?;
    let count = r.resolve("count", args.count, 8)?;
    let height = r.resolve("height", args.height, 64)?;
    let width = r.resolve("width", args.width, 128)?;
    let seed = r.resolve("seed", args.seed, 0u64)?;
    for i in 0..count {
        let spec = SynthSpec::two_level(height, width, seed.wrapping_add(i as u64));
        let sample = generate_synthetic_pair(&spec)?;
        save_sample(&out, i, &sample)?;
    }
    println!(
        "wrote {count} samples ({height}x{width}, seed {seed}) under {}",
        out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let r = Resolver::from_path(args.config.as_deref())?;
    let data_dir = require(args.data, &r, "data")?;
    let out = require(args.out, &r, "out")?;
    let config = model_config(
        &r,
        args.base_channels,
        args.max_disparity,
        args.variant,
        args.levels_3d,
        (8, 32),
    )?;
    let mut cfg = TrainRunConfig::new(
        config,
        r.resolve("batch", args.batch, 2)?,
        r.resolve("steps", args.steps, 500)?,
        r.resolve("seed", args.seed, 0)?,
    );
    cfg.checkpoint_every = r.resolve("checkpoint-every", args.checkpoint_every, 0)?;
    cfg.checkpoint_dir = Some(out.clone());
    cfg.log_every = r.resolve("log-every", args.log_every, 50)?;

    let data = load_dataset(&data_dir)?;
    let resume = match args.checkpoint {
        Some(p) => Some(Checkpoint::load(&p)?),
        None => None,
    };
    let outcome = run_training(&cfg, &data, resume, |rec| {
        eprintln!(
            "step {:6}  loss {:.6}  batch-epe {:.4}  {:.1}s",
            rec.step, rec.loss, rec.epe, rec.seconds
        );
    })?;
    std::fs::create_dir_all(&out)?;
    // Timing is wall-clock noise; the deterministic mode zeroes it so equal
    // runs produce byte-identical logs.
    let deterministic = crate::runtime::threads() == 1;
    std::fs::write(out.join("log.csv"), log_to_csv(&outcome.log, deterministic))?;
    outcome.checkpoint.save(&out.join("final.ckpt"))?;
    println!(
        "trained {} steps; wrote {} and {}",
        outcome.checkpoint.step,
        out.join("log.csv").display(),
        out.join("final.ckpt").display()
    );
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let r = Resolver::from_path(args.config.as_deref())?;
    let ckpt_path = require(args.checkpoint, &r, "checkpoint")?;
    let data_dir = require(args.data, &r, "data")?;
    let out = require(args.out, &r, "out")?;
    let colormap = args.colormap || r.resolve("colormap", None::<bool>, false)?;

    let ck = Checkpoint::load(&ckpt_path)?;
    let net = MsdcNet::new(&ck.config)?;
    std::fs::create_dir_all(&out)?;
    for i in list_indices(&data_dir)? {
        let sample = load_sample(&data_dir, i)?;
        let pred = predict_disparity(&net, &ck.params, &sample)?;
        let valid = vec![true; pred.numel()];
        std::fs::write(out.join(format!("{i:04}.png")), write_kitti_png(&pred, &valid)?)?;
        if colormap {
            std::fs::write(
                out.join(format!("{i:04}_color.png")),
                render_colormap_png(&pred, None, ck.config.max_disparity)?,
            )?;
        }
        eprintln!("predicted sample {i:04}");
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let r = Resolver::from_path(args.config.as_deref())?;
    let ckpt_path = require(args.checkpoint, &r, "checkpoint")?;
    let data_dir = require(args.data, &r, "data")?;
    let out = require(args.out, &r, "out")?;

    let ck = Checkpoint::load(&ckpt_path)?;
    let net = MsdcNet::new(&ck.config)?;
    let data = load_dataset(&data_dir)?;
    let (per_sample, aggregate) = crate::train::evaluate_model(&net, &ck.params, &data)?;

    std::fs::create_dir_all(&out)?;
    let mut body = String::from(MetricReport::CSV_HEADER);
    body.push('\n');
    for report in &per_sample {
        body.push_str(&report.csv_row());
        body.push('\n');
    }
    std::fs::write(out.join("per_sample.csv"), body)?;
    let mut agg = String::from(MetricReport::CSV_HEADER);
    agg.push('\n');
    agg.push_str(&aggregate.csv_row());
    agg.push('\n');
    std::fs::write(out.join("aggregate.csv"), agg)?;
    print!("{}", aggregate.key_value_block());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<bool> {
    let r = Resolver::from_path(args.config.as_deref())?;
    let tolerance = r.resolve("tolerance", args.tolerance, 1e-4)?;
    let entries = crate::verify::full_gradient_suite(tolerance)?;
    let mut all_passed = true;
    for e in &entries {
        println!(
            "{:<28} max-rel-err {:>10.3e}  tol {:>8.1e}  {}",
            e.name,
            e.max_rel_err,
            e.tolerance,
            if e.passed { "pass" } else { "FAIL" }
        );
        all_passed &= e.passed;
    }
    println!(
        "gradient suite: {}",
        if all_passed { "all checks passed" } else { "FAILED" }
    );
    Ok(all_passed)
}

fn cmd_info(args: InfoArgs) -> Result<()> {
    let r = Resolver::from_path(args.config.as_deref())?;
    let config = model_config(
        &r,
        args.base_channels,
        args.max_disparity,
        args.variant,
        args.levels_3d,
        (32, 192),
    )?;
    let net = MsdcNet::new(&config)?;
    println!(
        "configuration: F={} D={} fusion={} dense={}x{} levels3d={} variant={}",
        config.base_channels,
        config.max_disparity,
        config.fusion_channels,
        config.dense_groups,
        config.dense_block_depth,
        config.levels_3d,
        config.variant.name()
    );
    for line in net.layer_summary() {
        println!("{line}");
    }
    println!(
        "total parameters: {} (original MSDC-Net: {} at F=32, D=192)",
        count_params(&config)?,
        REFERENCE_PARAM_COUNT
    );
    Ok(())
}

/// Dispatch a parsed invocation. Exit status: 0 success, 1 usage/runtime
/// error, 2 verification failure.
pub fn run(cli: Cli) -> i32 {
    let result: Result<i32> = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a).map(|_| 0),
        Cmd::Train(a) => cmd_train(a).map(|_| 0),
        Cmd::Predict(a) => cmd_predict(a).map(|_| 0),
        Cmd::Eval(a) => cmd_eval(a).map(|_| 0),
        Cmd::Gradcheck(a) => cmd_gradcheck(a).map(|ok| if ok { 0 } else { 2 }),
        Cmd::Info(a) => cmd_info(a).map(|_| 0),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Entry point used by the binary: env setup, parsing, dispatch.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    crate::runtime::init_from_env();
    match Cli::try_parse_from(argv) {
        Ok(cli) => run(cli),
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            code
        }
    }
}

