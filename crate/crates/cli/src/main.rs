use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scc_core::bench::{bench, write_csv, Sweep};
use scc_core::data::{synth_dataset, Dataset};
use scc_core::gradcheck::{grad_check_driver, GradCheckOptions, SccCase};
use scc_core::model::{build_network, ModelSpecFile};
use scc_core::train::{train, TrainConfig};
use scc_core::{
    layer_cost, scc_backward, scc_forward, CostReport, Overlap, SccConfig, SccWeights, Tensor4,
};

/// Sliding-channel convolution toolkit: window geometry, cost model,
/// correctness checks, training and benchmarks.
#[derive(Debug, Parser)]
#[command(name = "scc", version)]
struct Cli {
    /// Seed for every random draw made by the subcommand.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads for the data-parallel kernels; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the window of every filter up to the cyclic distance.
    Cycle(CycleArgs),
    /// Per-layer MACs, FLOPs and parameters of a model spec.
    Cost(CostArgs),
    /// Finite-difference, adjoint and oracle-equivalence checks.
    Check(CheckArgs),
    /// Train a model spec with minibatch SGD.
    Train(TrainArgs),
    /// Time the direct kernel against the composition oracles.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct CycleArgs {
    #[arg(long)]
    c_in: usize,
    #[arg(long)]
    c_out: usize,
    #[arg(long, default_value_t = 1)]
    cg: usize,
    /// Overlap as a channel count ("1") or a fraction of the window ("50%", "0.5").
    #[arg(long, default_value = "0")]
    co: Overlap,
}

#[derive(Debug, Args)]
struct CostArgs {
    #[arg(long)]
    model: PathBuf,
    /// Input extent; overrides the model file's input record.
    #[arg(long)]
    spatial: Option<usize>,
    #[arg(long)]
    csv: bool,
}

#[derive(Debug, Args)]
struct CheckArgs {
    /// Check this configuration in every trial instead of random ones.
    #[arg(long, requires_all = ["c_out", "cg"])]
    c_in: Option<usize>,
    #[arg(long, requires = "c_in")]
    c_out: Option<usize>,
    #[arg(long, requires = "c_in")]
    cg: Option<usize>,
    #[arg(long, default_value = "0", requires = "c_in")]
    co: Overlap,
    #[arg(long, default_value_t = 4)]
    spatial: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Write input, cotangent, output and input gradient of the fixed
    /// configuration as fixture files into this directory.
    #[arg(long, requires = "c_in")]
    dump: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// "synthetic" or a directory holding inputs.dsx and labels.dsx.
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    /// Sample count of the synthetic dataset.
    #[arg(long, default_value_t = 512)]
    samples: usize,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value = "")]
    sweep: Sweep,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_cycle(args: &CycleArgs, out: &mut impl Write) -> Result<()> {
    let cfg = SccConfig::new(args.c_in, args.c_out, args.cg, args.co, false)?;
    let cycle = cfg.channel_cycle();
    writeln!(out, "{cfg}")?;
    writeln!(
        out,
        "group_width={} shift={} cyclic_dist={}",
        cfg.group_width(),
        cfg.shift(),
        cycle.cyclic_dist()
    )?;
    for (oc, window) in cycle.windows().iter().enumerate() {
        let channels: Vec<String> = window.channels(cfg.c_in()).map(|c| c.to_string()).collect();
        writeln!(
            out,
            "filter {oc}: start {} channels [{}]",
            window.start,
            channels.join(" ")
        )?;
    }
    Ok(())
}

fn run_cost(args: &CostArgs, out: &mut impl Write) -> Result<()> {
    let spec = ModelSpecFile::from_path(&args.model)
        .with_context(|| format!("reading {}", args.model.display()))?;
    let Some(spatial) = args.spatial.or(spec.input.map(|i| i.spatial)) else {
        bail!(
            "{} has no input record; pass --spatial",
            args.model.display()
        );
    };
    let layers = spec.layer_specs(spatial)?;
    let costs = layers
        .iter()
        .map(layer_cost)
        .collect::<scc_core::Result<Vec<_>>>()?;
    let total: CostReport = costs.iter().copied().sum();
    if args.csv {
        writeln!(out, "layer,kind,c_in,c_out,spatial_out,macs,flops,params")?;
        for (i, (l, c)) in layers.iter().zip(&costs).enumerate() {
            writeln!(
                out,
                "{i},{},{},{},{},{},{},{}",
                l.kind,
                l.c_in,
                l.c_out,
                l.output_spatial()?,
                c.macs,
                c.flops(),
                c.params
            )?;
        }
        writeln!(
            out,
            "total,,,,,{},{},{}",
            total.macs,
            total.flops(),
            total.params
        )?;
    } else {
        writeln!(
            out,
            "{:>5}  {:<16} {:>6} {:>6} {:>5} {:>14} {:>14} {:>10}",
            "layer", "kind", "c_in", "c_out", "out", "MACs", "FLOPs", "params"
        )?;
        for (i, (l, c)) in layers.iter().zip(&costs).enumerate() {
            writeln!(
                out,
                "{i:>5}  {:<16} {:>6} {:>6} {:>5} {:>14} {:>14} {:>10}",
                l.kind.to_string(),
                l.c_in,
                l.c_out,
                l.output_spatial()?,
                c.macs,
                c.flops(),
                c.params
            )?;
        }
        writeln!(
            out,
            "{:>5}  {:<16} {:>6} {:>6} {:>5} {:>14} {:>14} {:>10}",
            "total",
            "",
            "",
            "",
            "",
            total.macs,
            total.flops(),
            total.params
        )?;
    }
    Ok(())
}

fn dump_fixtures(dir: &Path, case: &SccCase, seed: u64) -> Result<()> {
    let cfg = &case.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor4::random(case.batch, cfg.c_in(), case.spatial, case.spatial, &mut rng)?;
    let g = Tensor4::random(
        case.batch,
        cfg.c_out(),
        case.spatial,
        case.spatial,
        &mut rng,
    )?;
    let w = SccWeights::init(cfg, &mut rng);
    let y = scc_forward(&x, &w, cfg)?;
    let grads = scc_backward(&g, &x, &w, cfg)?;
    std::fs::create_dir_all(dir)?;
    x.save(dir.join("input.dsx"))?;
    g.save(dir.join("grad_output.dsx"))?;
    y.save(dir.join("output.dsx"))?;
    grads.grad_input.save(dir.join("grad_input.dsx"))?;
    Ok(())
}

/// Returns whether every trial passed.
fn run_check(args: &CheckArgs, seed: u64, out: &mut impl Write) -> Result<bool> {
    let fixed = match (args.c_in, args.c_out, args.cg) {
        (Some(c_in), Some(c_out), Some(cg)) => Some(SccCase {
            cfg: SccConfig::new(c_in, c_out, cg, args.co, true)?,
            spatial: args.spatial,
            batch: args.batch,
        }),
        _ => None,
    };
    if let (Some(dir), Some(case)) = (&args.dump, &fixed) {
        dump_fixtures(dir, case, seed)?;
    }
    let opts = GradCheckOptions {
        trials: args.trials,
        eps: args.eps,
        tol: args.tol,
        seed,
        fixed,
        ..Default::default()
    };
    let report = grad_check_driver(&opts)?;
    report.write_csv(&mut *out)?;
    for bad in report.failures() {
        log::error!(
            "trial {} failed: {} / {}",
            bad.trial,
            bad.config,
            bad.conv_config
        );
    }
    Ok(report.all_passed())
}

fn load_dataset(args: &TrainArgs, spec: &ModelSpecFile, seed: u64) -> Result<Dataset> {
    if args.dataset == "synthetic" {
        let spatial = spec.input.map_or(8, |i| i.spatial);
        Ok(synth_dataset(
            seed,
            args.samples,
            spec.head.classes,
            spec.input_channels(),
            spatial,
        )?)
    } else {
        Dataset::load_dir(&args.dataset)
            .with_context(|| format!("loading dataset from {}", args.dataset))
    }
}

fn run_train(args: &TrainArgs, seed: u64, out: &mut impl Write) -> Result<()> {
    let spec = ModelSpecFile::from_path(&args.model)
        .with_context(|| format!("reading {}", args.model.display()))?;
    let data = load_dataset(args, &spec, seed)?;
    let mut network = build_network(&spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        learning_rate: args.lr,
        seed,
    };
    let history = train(&mut network, &data, &cfg)?;
    writeln!(out, "epoch,loss,accuracy")?;
    for h in &history {
        writeln!(out, "{},{:.6},{:.4}", h.epoch, h.loss, h.accuracy)?;
    }
    Ok(())
}

fn run_bench(args: &BenchArgs, seed: u64, out: &mut impl Write) -> Result<()> {
    let rows = bench(&args.sweep, args.repeats, seed)?;
    match &args.out {
        Some(path) => {
            let file =
                File::create(path).with_context(|| format!("creating {}", path.display()))?;
            write_csv(&rows, BufWriter::new(file))?;
        }
        None => write_csv(&rows, out)?,
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match &cli.command {
        Command::Cycle(args) => run_cycle(args, &mut out)?,
        Command::Cost(args) => run_cost(args, &mut out)?,
        Command::Check(args) => return run_check(args, cli.seed, &mut out),
        Command::Train(args) => run_train(args, cli.seed, &mut out)?,
        Command::Bench(args) => run_bench(args, cli.seed, &mut out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.threads {
        Some(threads) => rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(anyhow::Error::from)
            .and_then(|pool| pool.install(|| run(&cli))),
        None => run(&cli),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
