//! `vheat` command line: verification suites, desk-scale training and
//! evaluation, complexity benchmarking, and heat-conduction visualization.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use vheat::bench::{run_bench, bench_csv, BenchOp, SPREAD_LIMIT};
use vheat::data::{load_digit_dir, synth_dataset, Dataset};
use vheat::error::{Error, Result};
use vheat::model::{build_model, load_checkpoint, peek_config, save_checkpoint, Model, ModelConfig};
use vheat::tensor::{DType, Element, Tensor};
use vheat::trainer::{evaluate, metrics_csv, train, worker_count, TrainConfig};
use vheat::verify::{all_passed, report, run_suite, Suite};
use vheat::viz::{model_diffusivity, visualize_conduction};

#[derive(Parser)]
#[command(
    name = "vheat",
    version,
    about = "Heat-conduction vision backbone: verify, train, eval, bench, visualize"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run numerical invariant suites; exits nonzero if any check fails.
    Verify {
        /// Which family: dct | hco | oracle | grad | all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory holding IDX image/label files.
        #[arg(long, conflicts_with = "synthetic")]
        data: Option<PathBuf>,
        /// Evaluate on the frequency-class synthetic test split instead.
        #[arg(long)]
        synthetic: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time an operator across resolutions and fit the log-log cost slope.
    Bench {
        /// hco | attention | dct.
        #[arg(long)]
        op: String,
        /// Comma-separated strictly increasing square extents.
        #[arg(long, value_delimiter = ',', default_value = "32,64,128,256")]
        resolutions: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 9)]
        repeats: usize,
        /// Also write the records to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Evolve a one-hot heat source and write one PGM image per time.
    Visualize {
        /// Source position "X,Y" (column, row).
        #[arg(long)]
        source: String,
        /// Uniform diffusivity value (mutually exclusive with --ckpt).
        #[arg(long, conflicts_with = "ckpt")]
        k: Option<f64>,
        /// Use a trained model's predicted diffusivity field.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Comma-separated conduction times.
        #[arg(long, value_delimiter = ',', default_value = "1,5,25,100")]
        times: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Grid extent for the uniform-k case (models use their own).
        #[arg(long, default_value_t = 64)]
        extent: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file mirroring the model configuration field names
    /// (layers, channels, mlp_ratio, drop_path, num_classes,
    /// input_extent, dtype, k_mode). Defaults to the micro preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding IDX image/label files.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Train on the frequency-class synthetic dataset instead of files.
    #[arg(long)]
    synthetic: bool,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Single worker, fixed reduction order: bitwise repeatable runs.
    #[arg(long)]
    deterministic: bool,
    /// Also write per-epoch metrics to this CSV file.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Verify { suite, seed } => cmd_verify(&suite, seed),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval { ckpt, data, synthetic, seed } => cmd_eval(&ckpt, data.as_deref(), synthetic, seed),
        Cmd::Bench { op, resolutions, channels, repeats, csv } => {
            cmd_bench(&op, &resolutions, channels, repeats, csv.as_deref())
        }
        Cmd::Visualize { source, k, ckpt, times, out, extent } => {
            cmd_visualize(&source, k, ckpt.as_deref(), &times, &out, extent)
        }
    }
}

fn cmd_verify(suite: &str, seed: u64) -> Result<ExitCode> {
    let suite = Suite::from_str(suite)?;
    let results = run_suite(suite, seed)?;
    print!("{}", report(&results));
    Ok(if all_passed(&results) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn load_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        None => Ok(ModelConfig::micro()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let cfg: ModelConfig = serde_json::from_str(&text)?;
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

/// Load the requested splits, padded/sized to the model's input extent.
fn load_splits(
    data: Option<&Path>,
    synthetic: bool,
    extent: usize,
    classes: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    match (data, synthetic) {
        (Some(dir), false) => {
            let (train, test) = load_digit_dir(dir)?;
            Ok((train.pad_to(extent)?, test.pad_to(extent)?))
        }
        (None, true) => {
            let train = synth_dataset(classes, 2048, extent, seed)?;
            let test = synth_dataset(classes, 512, extent, seed ^ 0x7e57)?;
            Ok((train, test))
        }
        (None, false) => Err(Error::invalid("pass --data DIR or --synthetic")),
        (Some(_), true) => unreachable!("clap conflicts_with guards this"),
    }
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let config = load_config(args.config.as_deref())?;
    match config.dtype {
        DType::F32 => train_typed::<f32>(args, config),
        DType::F64 => train_typed::<f64>(args, config),
    }
}

fn train_typed<T: Element>(args: TrainArgs, config: ModelConfig) -> Result<ExitCode> {
    let mut tcfg = TrainConfig::default();
    if let Some(e) = args.epochs {
        tcfg.epochs = e;
    }
    if let Some(s) = args.seed {
        tcfg.seed = s;
    }
    tcfg.deterministic |= args.deterministic;

    let (train_ds, test_ds) = load_splits(
        args.data.as_deref(),
        args.synthetic,
        config.input_extent,
        config.num_classes,
        tcfg.seed,
    )?;
    println!(
        "training {} parameters on {} samples ({} test), {} epochs, {} workers",
        {
            let probe: Model<T> = build_model(&config, tcfg.seed)?;
            probe.num_params()
        },
        train_ds.n,
        test_ds.n,
        tcfg.epochs,
        if tcfg.deterministic { 1 } else { worker_count() },
    );

    let mut model: Model<T> = build_model(&config, tcfg.seed)?;
    let rows = train(&mut model, &train_ds, Some(&test_ds), &tcfg)?;
    for r in &rows {
        println!("epoch {} {}: loss {:.4} top1 {:.4}", r.epoch, r.split, r.loss, r.top1);
    }
    if let Some(p) = &args.metrics {
        std::fs::write(p, metrics_csv(&rows))?;
        println!("metrics written to {}", p.display());
    }
    save_checkpoint(&model, &args.out)?;
    println!("checkpoint written to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(ckpt: &Path, data: Option<&Path>, synthetic: bool, seed: u64) -> Result<ExitCode> {
    let config = peek_config(ckpt)?;
    match config.dtype {
        DType::F32 => eval_typed::<f32>(ckpt, data, synthetic, seed, config),
        DType::F64 => eval_typed::<f64>(ckpt, data, synthetic, seed, config),
    }
}

fn eval_typed<T: Element>(
    ckpt: &Path,
    data: Option<&Path>,
    synthetic: bool,
    seed: u64,
    config: ModelConfig,
) -> Result<ExitCode> {
    let model: Model<T> = load_checkpoint(ckpt)?;
    let (_, test_ds) =
        load_splits(data, synthetic, config.input_extent, config.num_classes, seed)?;
    let (top1, loss) = evaluate(&model, &test_ds, 64)?;
    println!("test loss {loss:.4} top1 {top1:.4} over {} samples", test_ds.n);
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(
    op: &str,
    resolutions: &[usize],
    channels: usize,
    repeats: usize,
    csv: Option<&Path>,
) -> Result<ExitCode> {
    let op = BenchOp::from_str(op)?;
    println!("benchmarking {op} single-thread (workers configured: {})", worker_count());
    let (records, slope) = run_bench(op, resolutions, channels, repeats)?;
    let text = bench_csv(&records, slope);
    print!("{text}");
    for r in &records {
        if r.unreliable() {
            eprintln!(
                "warning: {} at {} is unreliable (spread {:.0}% > {:.0}%)",
                r.op,
                r.resolution,
                r.spread * 100.0,
                SPREAD_LIMIT * 100.0
            );
        }
    }
    println!("fitted log-log slope: {slope:.4}");
    if let Some(p) = csv {
        std::fs::write(p, &text)?;
        println!("records written to {}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_visualize(
    source: &str,
    k: Option<f64>,
    ckpt: Option<&Path>,
    times: &[f64],
    out: &Path,
    extent: usize,
) -> Result<ExitCode> {
    let (x, y) = parse_pair(source)?;
    let plane = match (k, ckpt) {
        (Some(v), None) => {
            if extent == 0 {
                return Err(Error::invalid("extent must be positive"));
            }
            Tensor::full(vec![extent, extent], v)?
        }
        (None, Some(path)) => {
            let model: Model<f64> = load_checkpoint(path)?;
            model_diffusivity(&model)?
        }
        (None, None) => return Err(Error::invalid("pass --k VALUE or --ckpt PATH")),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with guards this"),
    };
    let frames = visualize_conduction(&plane, (x, y), times, out)?;
    for f in &frames {
        println!("t={:<8} peak {:.6e}  {}", f.time, f.peak, f.path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let mut it = s.split(',');
    let bad = || Error::invalid(format!("expected \"X,Y\", got \"{s}\""));
    let x = it.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
    let y = it.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
    if it.next().is_some() {
        return Err(bad());
    }
    Ok((x, y))
}
