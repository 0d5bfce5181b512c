use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use idp::bench::{self, sweep_csv, ExperimentConfig};
use idp::data::{self, inspect_checkpoint, load_checkpoint, Dataset, DatasetKind};
use idp::tensor::Tensor;
use idp::{IdpError, Result};
use log::info;

/// Train, sweep and benchmark incomplete-dot-product networks.
#[derive(Parser)]
#[command(name = "idp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model described by a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint over a grid of IDP percentages and write CSV.
    Sweep(SweepArgs),
    /// Time the forward pass at one IDP percentage against the full network.
    Bench(BenchArgs),
    /// Print checkpoint metadata without loading tensors.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Train on the first N training images.
    #[arg(long)]
    subset: Option<usize>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Let profiles run above their range instead of clamping to its upper end.
    #[arg(long)]
    no_clamp: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated IDP percentages.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    /// Evaluate on the first N test images.
    #[arg(long)]
    subset: Option<usize>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory; defaults to the one in the config saved beside the checkpoint.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// One row per profile and grid point instead of per grid point.
    #[arg(long)]
    all_profiles: bool,
    /// Leave wall_ms empty so the CSV is reproducible byte for byte.
    #[arg(long)]
    no_timing: bool,
    #[arg(long)]
    no_clamp: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// IDP percentage.
    #[arg(long, default_value_t = 50.0)]
    idp: f64,
    #[arg(long, default_value_t = 20)]
    repetitions: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| IdpError::io(dir, e))?;
            }
            fs::write(p, text).map_err(|e| IdpError::io(p, e))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if args.subset.is_some() {
        cfg.train_subset = args.subset;
    }
    if let Some(out) = args.out {
        cfg.output.dir = out;
    }
    if args.no_clamp {
        cfg.profiles.clamp = false;
    }
    cfg.validate()?;
    let (train, _) = bench::load_data(&cfg)?;
    info!("training {} ({} profile) on {} images", cfg.architecture, cfg.profiles.kind, train.len());
    let run = bench::train_experiment(&cfg, &train, Some(&cfg.output.dir))?;
    if let Some(last) = run.history.last() {
        info!("final loss {:.4}, train accuracy {:.4}", last.loss, last.train_accuracy);
    }
    println!("{}", cfg.output.dir.join("model.ckpt").display());
    Ok(())
}

fn test_data(checkpoint: &Path, kind: DatasetKind, data_dir: Option<PathBuf>, subset: Option<usize>) -> Result<Dataset> {
    let beside = checkpoint.with_file_name("config.toml");
    let dir = match data_dir {
        Some(d) => d,
        None if beside.exists() => ExperimentConfig::load(&beside)?.data_dir,
        None => PathBuf::from(match kind {
            DatasetKind::Mnist => "data/mnist",
            DatasetKind::Cifar10 => "data/cifar-10-batches-bin",
        }),
    };
    let test = data::load_test(kind, dir)?;
    Ok(match subset {
        Some(n) => test.subset(n),
        None => test,
    })
}

fn dataset_of(input: [usize; 3]) -> DatasetKind {
    if input == [1, 28, 28] {
        DatasetKind::Mnist
    } else {
        DatasetKind::Cifar10
    }
}

fn sweep(args: SweepArgs) -> Result<()> {
    let grid = args.grid.unwrap_or_else(|| (1..=10).map(|i| (i * 10) as f64).collect());
    bench::validate_grid(&grid)?;
    let mut ckpt = load_checkpoint(&args.checkpoint)?;
    if args.no_clamp {
        ckpt.model.clamp = false;
    }
    let test = test_data(&args.checkpoint, dataset_of(ckpt.model.spec.input), args.data_dir, args.subset)?;
    let rows = bench::sweep(&mut ckpt.model, &test, &grid, args.all_profiles, !args.no_timing)?;
    write_out(args.out.as_deref(), &sweep_csv(&rows))
}

fn bench_cmd(args: BenchArgs) -> Result<()> {
    let mut ckpt = load_checkpoint(&args.checkpoint)?;
    let [c, h, w] = ckpt.model.spec.input;
    let x = Tensor::<f32>::zeros(&[args.batch.max(1), c, h, w]);
    let report = bench::bench(&mut ckpt.model, &x, args.idp / 100.0, args.repetitions)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", report.render());
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let h = inspect_checkpoint(path)?;
    println!("format version  {}", h.version);
    println!("network         {} ({} layers, input {:?})", h.spec.name, h.spec.layers.len(), h.spec.input);
    println!("profile         {}", h.spec.profile);
    let ranges: Vec<String> = h.ranges.iter().map(|r| format!("({}, {}]", r.lo, r.hi)).collect();
    println!("ranges          {}", ranges.join(" "));
    println!("clamp           {}", h.clamp);
    println!("macs at 100%    {}", h.spec.count_macs(1.0)?);
    let values: usize = h.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    println!("tensors         {} ({values} values, sha256 {})", h.tensors.len(), h.sha256);
    if let Some(t) = &h.train {
        println!(
            "training        {} epochs, batch {}, lr {}, momentum {}, weight decay {}, seed {}",
            t.epochs, t.batch_size, t.lr, t.momentum, t.weight_decay, t.seed
        );
    }
    for t in &h.tensors {
        println!("  {:<40} {:?}", t.name, t.shape);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Sweep(a) => sweep(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Inspect { checkpoint } => inspect(&checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
