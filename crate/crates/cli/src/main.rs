use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use permopt::harness::checkpoint::{write_atomic, Checkpoint};
use permopt::harness::config::Config;
use permopt::harness::eval::{evaluate, write_eval_csv, EvalRow};
use permopt::harness::model::Model;
use permopt::harness::train::{train_with, write_metrics_csv};
use permopt::ordering::dump_comparison_grid;
use permopt::Error;

mod checks;

#[derive(Parser)]
#[command(name = "permopt", version, about = "Learn to permute sets with permutation optimisation")]
struct Cli {
    /// Worker threads for per-set gradient and evaluation passes.
    #[arg(long, global = true, value_name = "K")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and metrics log.
    Train(TrainArgs),
    /// Report exact-match accuracy of a checkpoint on held-out sets.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Dump F(a, b) of a scalar-element checkpoint over a grid.
    Inspect(InspectArgs),
    /// Run the built-in property checks.
    Selftest,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Checkpoint path; the metrics CSV goes next to it unless the config
    /// names one.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "PATH", required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Also write the table as CSV.
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,
    /// Evaluate the exact comparison oracle instead of a checkpoint.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random instances per check.
    #[arg(long, default_value_t = 3, value_name = "K")]
    trials: usize,
    /// Negate every analytic gradient; the run must then fail.
    #[arg(long, hide = true)]
    inject_sign_flip: bool,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Grid as LO:HI:STEPS.
    #[arg(long, value_name = "LO:HI:STEPS", value_parser = parse_grid)]
    grid: GridSpec,
    #[arg(long, value_name = "CSV")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug)]
struct GridSpec {
    lo: f64,
    hi: f64,
    steps: usize,
}

fn parse_grid(s: &str) -> Result<GridSpec, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, steps] = parts[..] else {
        return Err(format!("expected LO:HI:STEPS, got `{s}`"));
    };
    let real = |v: &str| {
        v.parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| format!("`{v}` is not a finite number"))
    };
    let (lo, hi) = (real(lo)?, real(hi)?);
    let steps: usize = steps
        .parse()
        .map_err(|_| format!("`{steps}` is not a step count"))?;
    if !(lo < hi) || steps < 2 {
        return Err(format!("need LO < HI and STEPS >= 2, got `{s}`"));
    }
    Ok(GridSpec { lo, hi, steps })
}

/// Failure with its exit status: 2 for bad input, 1 for everything else.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config { .. }) { 2 } else { 1 };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl Failure {
    fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

fn load_config(path: &Path, threads: Option<usize>) -> Result<Config, Failure> {
    let mut cfg = Config::load(path).map_err(|e| Failure {
        code: 2,
        message: e.to_string(),
    })?;
    if let Some(k) = threads {
        cfg.threads = k.max(1);
    }
    Ok(cfg)
}

fn write_file(path: &Path, fill: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<(), Failure> {
    let mut buf = Vec::new();
    fill(&mut buf).map_err(|e| Failure::runtime(e.to_string()))?;
    write_atomic(path, &buf)?;
    Ok(())
}

fn train(args: TrainArgs, threads: Option<usize>) -> Result<(), Failure> {
    let mut cfg = load_config(&args.config, threads)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args
        .out
        .or_else(|| cfg.checkpoint.clone())
        .unwrap_or_else(|| PathBuf::from("model.popt"));
    let metrics = cfg
        .metrics
        .clone()
        .unwrap_or_else(|| out.with_extension("metrics.csv"));
    println!("epoch,mse,eta,seconds");
    let result = train_with(&cfg, |row| {
        println!("{},{:e},{:e},{:.3}", row.epoch, row.mse, row.eta, row.seconds);
    })?;
    Checkpoint::new(&result.model, &cfg).save(&out)?;
    write_file(&metrics, |buf| write_metrics_csv(&result.log, buf))?;
    println!("checkpoint: {}", out.display());
    println!("metrics: {}", metrics.display());
    Ok(())
}

fn print_table(rows: &[EvalRow]) {
    println!("{:>12} {:>12} {:>10} {:>12}", "interval_lo", "interval_hi", "exact_acc", "hard_mse");
    for r in rows {
        println!(
            "{:>12} {:>12} {:>9.2}% {:>12.3e}",
            r.interval.lo,
            r.interval.hi,
            100.0 * r.exact_acc,
            r.hard_mse
        );
    }
}

fn eval(args: EvalArgs, threads: Option<usize>) -> Result<(), Failure> {
    let cfg = load_config(&args.config, threads)?;
    let model = if args.oracle {
        let dim = match cfg.task {
            permopt::harness::config::TaskName::Sort => 1,
            permopt::harness::config::TaskName::Mosaic => {
                if cfg.mnist_images.is_some() {
                    return Err(Failure::runtime("the oracle needs synthetic mosaic tiles"));
                }
                cfg.tile_dim
            }
        };
        Model::oracle(cfg.structure()?, dim, cfg.eta_init, cfg.po())?
    } else {
        let path = args.checkpoint.expect("required unless --oracle");
        Checkpoint::load(&path)?.model_for(&cfg)?
    };
    let rows = evaluate(&model, &cfg)?;
    print_table(&rows);
    if let Some(path) = &args.csv {
        write_file(path, |buf| write_eval_csv(&rows, buf))?;
    }
    Ok(())
}

fn report(checks: &[checks::Check]) -> Result<(), Failure> {
    for c in checks {
        println!("{c}");
    }
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    if failed.is_empty() {
        println!("all {} checks passed", checks.len());
        Ok(())
    } else {
        Err(Failure::runtime(format!(
            "{} of {} checks failed: {}",
            failed.len(),
            checks.len(),
            failed.join(", ")
        )))
    }
}

fn inspect(args: InspectArgs) -> Result<(), Failure> {
    let model = Checkpoint::load(&args.checkpoint)?.model()?;
    if model.embed.is_some() || model.net.element_dim() != 1 {
        return Err(Failure::runtime(format!(
            "inspect needs a scalar-element model; this one compares {}-dimensional elements",
            model.input_dim()
        )));
    }
    let GridSpec { lo, hi, steps } = args.grid;
    let grid = dump_comparison_grid(&model.net, lo, hi, steps)?;
    write_file(&args.out, |buf| grid.write_csv(buf))?;
    println!("{} grid points written to {}", steps * steps, args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads;
    let result = match cli.command {
        Command::Train(args) => train(args, threads),
        Command::Eval(args) => eval(args, threads),
        Command::Gradcheck(args) => report(&checks::gradcheck(args.trials, args.inject_sign_flip)),
        Command::Inspect(args) => inspect(args),
        Command::Selftest => report(&checks::selftest()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
