use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use revvolnet::engine::{inject_fault, set_threads, Shape};
use revvolnet::memory::{self, ADAM_MULTIPLIER};
use revvolnet::reversible::Storage;
use revvolnet::training::{
    evaluate, load_dataset, measure_step, synthetic_dataset, train_split, TrainOptions,
    TrainingConfig, CHECKPOINT_DIR, METRICS_FILE,
};
use revvolnet::unet::{load_checkpoint, ArchitectureSpec, Network};
use revvolnet::verify;

const THREADS_VAR: &str = "REVVOLNET_THREADS";
const MODALITIES: usize = 4;

#[derive(Parser)]
#[command(
    name = "revvolnet",
    version,
    about = "Partially reversible 3D U-Net toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check gradients: recomputing vs stored sequences, and finite
    /// differences for every primitive.
    Gradcheck(GradcheckArgs),
    /// Round-trip random inputs through random reversible blocks.
    Invert(InvertArgs),
    /// Analytic training-memory estimate for one step.
    EstimateMemory(EstimateArgs),
    /// Train a network and write metrics and the best checkpoint.
    Train(TrainArgs),
    /// Dice scores of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Step time and peak memory, recomputing vs storing activations.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Tiny,
    Baseline,
    Reversible,
    DeskBaseline,
    DeskReversible,
}

impl Preset {
    fn spec(self) -> ArchitectureSpec {
        match self {
            Preset::Tiny => ArchitectureSpec::tiny(),
            Preset::Baseline => ArchitectureSpec::baseline(),
            Preset::Reversible => ArchitectureSpec::reversible(1, 1),
            Preset::DeskBaseline => ArchitectureSpec::desk_baseline(),
            Preset::DeskReversible => ArchitectureSpec::desk_reversible(1, 1),
        }
    }
}

#[derive(Args)]
struct SpecArgs {
    /// Architecture file (key = value lines).
    #[arg(long, conflicts_with = "preset")]
    spec: Option<PathBuf>,
    /// Built-in architecture.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

impl SpecArgs {
    fn resolve(&self, default: Preset) -> Result<ArchitectureSpec> {
        let spec = match (&self.spec, self.preset) {
            (Some(path), _) => ArchitectureSpec::load(path)
                .with_context(|| format!("reading {}", path.display()))?,
            (None, Some(p)) => p.spec(),
            (None, None) => default.spec(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Blocks per checked sequence.
    #[arg(long, default_value_t = 3)]
    depth: usize,
    /// Test hook: double the backward output of this op.
    #[arg(long, value_name = "OP")]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 8)]
    spatial: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Spatial extents as d,h,w.
    #[arg(long, value_parser = parse_extents)]
    input_shape: [usize; 3],
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Optimizer state per parameter, in multiples of the parameter size.
    #[arg(long, default_value_t = ADAM_MULTIPLIER)]
    multiplier: u64,
    /// Report both totals and their ratio; with --baseline, compare
    /// against that architecture storing all activations.
    #[arg(long)]
    compare: bool,
    /// Architecture file for the comparison.
    #[arg(long, requires = "compare")]
    baseline: Option<PathBuf>,
    /// Also run one real training step and record its peak.
    #[arg(long)]
    measure: bool,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args)]
#[group(id = "source", required = true, multiple = false)]
struct DataArgs {
    /// Dataset directory: `index.tsv` plus one image and one region file
    /// per volume.
    #[arg(long, group = "source")]
    data: Option<PathBuf>,
    /// Generate this many synthetic volumes instead.
    #[arg(long, group = "source")]
    synthetic: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Training configuration (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    source: DataArgs,
    /// Edge length of synthetic volumes.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
    /// Seeds the network, the synthetic data and, when given, overrides
    /// the configured training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Keep every activation instead of recomputing sequences.
    #[arg(long)]
    stored: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: DataArgs,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Edge length of the cubic input patch.
    #[arg(long, default_value_t = 24)]
    spatial: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_extents(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|v: Vec<usize>| format!("expected d,h,w, got {} values", v.len()))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn verdict(passed: bool) -> ExitCode {
    if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn gradcheck(args: &GradcheckArgs) -> Result<ExitCode> {
    let spec = args.spec.resolve(Preset::Tiny)?;
    let fault = match &args.inject_fault {
        Some(op) => Some(
            verify::CHECKED_OPS
                .iter()
                .chain(&["reversible_sequence"])
                .find(|&&name| name == op)
                .copied()
                .ok_or_else(|| anyhow!("unknown op `{op}`"))?,
        ),
        None => None,
    };
    inject_fault(fault);
    let report = verify::gradcheck(&spec, args.seed, args.depth);
    inject_fault(None);
    let report = report?;
    for name in &report.failing {
        log::error!("gradient check failed: {name}");
    }
    print_json(&report)?;
    Ok(verdict(report.passed))
}

fn invert(args: &InvertArgs) -> Result<ExitCode> {
    let report = verify::inversion_trials(args.seed, args.trials, args.channels, args.spatial)?;
    print_json(&report)?;
    Ok(verdict(report.passed))
}

fn estimate_memory(args: &EstimateArgs) -> Result<ExitCode> {
    let spec = args.spec.resolve(Preset::Reversible)?;
    let [d, h, w] = args.input_shape;
    let input = Shape::new(args.batch, spec.in_channels, d, h, w);
    let mut net = Network::build(&spec, 0)?;
    let mut report = memory::estimate(&net, input, args.multiplier)?;
    if args.measure {
        let storage = if spec.reversible {
            Storage::Recompute
        } else {
            Storage::Stored
        };
        report.measured_peak_bytes = Some(measure_step(&mut net, input, storage)?);
    }
    let headline = if spec.reversible {
        report.total_prev_bytes
    } else {
        report.total_nonrev_bytes
    };
    let comparison = if args.compare {
        let (reference, label) = match &args.baseline {
            Some(path) => {
                let base = ArchitectureSpec::load(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                base.validate()?;
                let base_net = Network::build(&base, 0)?;
                let b = memory::estimate(
                    &base_net,
                    input.with_channels(base.in_channels),
                    args.multiplier,
                )?;
                (b.total_nonrev_bytes, "baseline_all_stored")
            }
            None => (report.total_nonrev_bytes, "all_stored"),
        };
        Some(json!({
            "reference": label,
            "reference_bytes": reference,
            "estimate_bytes": headline,
            "ratio": headline as f64 / reference as f64,
        }))
    } else {
        None
    };
    match args.format {
        Format::Json => print_json(&json!({
            "parameters": net.parameter_count(),
            "estimate_bytes": headline,
            "comparison": comparison,
            "report": report,
        }))?,
        Format::Table => {
            print!("{}", report.table());
            if let Some(c) = comparison {
                println!(
                    "compared with {}: {} / {} bytes = {:.4}",
                    c["reference"].as_str().unwrap_or_default(),
                    c["estimate_bytes"],
                    c["reference_bytes"],
                    c["ratio"].as_f64().unwrap_or_default()
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_volumes(
    source: &DataArgs,
    size: usize,
    seed: u64,
) -> Result<Vec<revvolnet::training::LabeledVolume>> {
    match (&source.data, source.synthetic) {
        (Some(dir), _) => load_dataset(dir).with_context(|| format!("loading {}", dir.display())),
        (None, Some(n)) => Ok(synthetic_dataset(n, size, MODALITIES, seed)),
        (None, None) => bail!("one of --data or --synthetic is required"),
    }
}

fn train(args: &TrainArgs) -> Result<ExitCode> {
    let spec = args.spec.resolve(Preset::Tiny)?;
    let mut config = match &args.config {
        Some(path) => {
            TrainingConfig::load(path).with_context(|| format!("reading {}", path.display()))?
        }
        None => TrainingConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let seed = args.seed.unwrap_or(config.seed);
    let data = load_volumes(&args.source, args.size, seed)?;
    log::info!(
        "{} volumes, {} parameters",
        data.len(),
        Network::build(&spec, seed)?.parameter_count()
    );
    let mut net = Network::build(&spec, seed)?;
    let options = TrainOptions {
        storage: if args.stored {
            Storage::Stored
        } else {
            Storage::Recompute
        },
        out_dir: Some(args.out.clone()),
    };
    let report = train_split(&mut net, &config, &data, &options)?;
    print_json(&json!({
        "epochs_run": report.epochs.len(),
        "best_epoch": report.best_epoch,
        "best_dice": { "wt": report.best_dice[0], "tc": report.best_dice[1], "et": report.best_dice[2] },
        "stopped_early": report.stopped_early,
        "train_volumes": report.train_volumes,
        "val_volumes": report.val_volumes,
        "seconds": report.seconds,
        "metrics": args.out.join(METRICS_FILE),
        "checkpoint": args.out.join(CHECKPOINT_DIR),
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn eval(args: &EvalArgs) -> Result<ExitCode> {
    let net = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let data = load_volumes(&args.source, args.size, args.seed)?;
    let dice = evaluate(&net, &data)?;
    print_json(&json!({
        "volumes": data.len(),
        "dice": { "wt": dice[0], "tc": dice[1], "et": dice[2] },
        "mean_dice": dice.iter().sum::<f64>() / dice.len() as f64,
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn bench(args: &BenchArgs) -> Result<ExitCode> {
    let spec = args.spec.resolve(Preset::DeskReversible)?;
    let report = verify::bench(&spec, args.steps, args.seed, args.spatial)?;
    print_json(&report)?;
    Ok(ExitCode::SUCCESS)
}

fn configure_threads() -> Result<()> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .with_context(|| format!("{THREADS_VAR}={v}"))?;
            set_threads(n);
        }
        Err(std::env::VarError::NotPresent) => set_threads(1),
        Err(e) => bail!("{THREADS_VAR}: {e}"),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<ExitCode> {
    configure_threads()?;
    match &cli.command {
        Command::Gradcheck(a) => gradcheck(a),
        Command::Invert(a) => invert(a),
        Command::EstimateMemory(a) => estimate_memory(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
