use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lastlayer::harness::{self, ExperimentSpec, Fault, SweepSummary, Task};

#[derive(Parser)]
#[command(name = "lastlayer", version, about = "Train networks with a closed-form last layer and check the theory behind it")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration for each seed and write snapshots.
    Train(RunArgs),
    /// Run every cell of a grid over all seeds and pick the best cell.
    Sweep(RunArgs),
    /// Train deep feature instrumental variable regression on the synthetic IV task.
    Dfiv(RunArgs),
    /// Run the theory battery; exits nonzero if any check fails.
    Verify(VerifyArgs),
    /// Write the generated task data as CSV.
    GenData(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// synth_regression, synth_classification or dfiv.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    method: Option<String>,
    /// Comma-separated; several values make a sweep axis. `full` means full batch.
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// DFIV outer iterations.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated list of seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    /// Any configuration key, as `section.key=value` (`key=value` for top-level keys).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Configuration file whose `[theory]` section sets the battery.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write the JSON report; printed to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Inject a fault, as a negative control.
    #[arg(long, value_parser = ["none", "wrong_gradient"])]
    fault: Option<String>,
    /// Run no checks at all.
    #[arg(long)]
    empty: bool,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(args) => {
            let mut spec = build_spec(&args, Task::SynthRegression)?;
            spec.snapshots = true;
            if spec.cells()?.len() != 1 {
                bail!("train runs a single configuration; use `sweep` for grids");
            }
            report(&harness::run_experiment(&spec)?, &spec);
        }
        Command::Sweep(args) => {
            let spec = build_spec(&args, Task::SynthRegression)?;
            report(&harness::run_experiment(&spec)?, &spec);
        }
        Command::Dfiv(args) => {
            let mut spec = build_spec(&args, Task::Dfiv)?;
            if spec.task != Task::Dfiv {
                bail!("the dfiv verb only runs task = dfiv");
            }
            spec.snapshots = true;
            report(&harness::run_experiment(&spec)?, &spec);
        }
        Command::GenData(args) => {
            let spec = build_spec(&args, Task::SynthRegression)?;
            harness::write_task_data(&spec)?;
            println!("wrote {} data to {}", spec.task.as_str(), spec.out.display());
        }
        Command::Verify(args) => return verify(&args),
    }
    Ok(ExitCode::SUCCESS)
}

fn verify(args: &VerifyArgs) -> Result<ExitCode> {
    let mut battery = match &args.config {
        Some(path) => ExperimentSpec::load(path).with_context(|| format!("reading {}", path.display()))?.theory,
        None => harness::TheoryBattery::default(),
    };
    if args.empty {
        battery = harness::TheoryBattery {
            seed: battery.seed,
            ..harness::TheoryBattery::empty()
        };
    }
    if let Some(seed) = args.seed {
        battery.seed = seed;
    }
    if let Some(f) = &args.fault {
        battery.fault = if f == "wrong_gradient" { Fault::WrongGradient } else { Fault::None };
    }
    let report = harness::run_theory_suite(&battery)?;
    match &args.out {
        Some(path) => {
            report.write_json(path)?;
            for c in &report.checks {
                println!(
                    "{} {:<24} measured {:.3e} tolerance {:.1e}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.measured,
                    c.tolerance
                );
            }
        }
        None => println!("{}", report.to_json()?),
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn build_spec(args: &RunArgs, default_task: Task) -> Result<ExperimentSpec> {
    let mut spec = match &args.config {
        Some(path) => ExperimentSpec::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => ExperimentSpec::new(default_task),
    };
    if let Some(t) = &args.task {
        spec.task = t.parse()?;
    }
    if spec.task == Task::TheorySuite {
        bail!("task theory_suite runs through `verify`");
    }
    let dfiv = spec.task == Task::Dfiv;
    if let Some(m) = &args.method {
        if dfiv {
            bail!("--method does not apply to dfiv");
        }
        spec.set("train", "method", m)?;
    }
    if let Some(e) = args.epochs {
        if dfiv {
            bail!("--epochs does not apply to dfiv; use --iterations");
        }
        spec.train.epochs = e;
    }
    if let Some(i) = args.iterations {
        if !dfiv {
            bail!("--iterations only applies to dfiv");
        }
        spec.dfiv.iterations = i;
    }
    for (axis, values) in [
        ("lr", &args.lr),
        ("batch_size", &args.batch_size),
        ("lambda", &args.lambda),
        ("beta", &args.beta),
    ] {
        if let Some(v) = values {
            set_axis(&mut spec, axis, v)?;
        }
    }
    match (args.seed, &args.seeds) {
        (Some(_), Some(_)) => bail!("give either --seed or --seeds"),
        (Some(s), None) => spec.seeds = vec![s],
        (None, Some(list)) => spec.set("", "seeds", list)?,
        (None, None) => {}
    }
    if let Some(out) = &args.out {
        spec.out = out.clone();
    }
    if let Some(t) = args.threads {
        spec.threads = Some(t);
    }
    for o in &args.overrides {
        let (path, value) = o.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got '{o}'"))?;
        let (section, key) = path.rsplit_once('.').unwrap_or(("", path));
        spec.set(section.trim(), key.trim(), value.trim())
            .with_context(|| format!("applying --set {o}"))?;
    }
    spec.validate()?;
    Ok(spec)
}

/// A single value sets the base configuration; a list becomes a sweep axis.
fn set_axis(spec: &mut ExperimentSpec, axis: &str, values: &str) -> Result<()> {
    if values.contains(',') {
        spec.set(&format!("sweep.{axis}"), "values", values)?;
        return Ok(());
    }
    if spec.task != Task::Dfiv {
        spec.set("train", axis, values)?;
        return Ok(());
    }
    match axis {
        "lambda" => {
            spec.set("dfiv", "variant", "proximal")?;
            spec.set("dfiv", "lambda1", values)?;
            spec.set("dfiv", "lambda2", values)?;
        }
        "beta" => {
            spec.set("dfiv", "variant", "ridge")?;
            spec.set("dfiv", "beta1", values)?;
            spec.set("dfiv", "beta2", values)?;
        }
        _ => spec.set("dfiv", axis, values)?,
    }
    Ok(())
}

fn report(summary: &SweepSummary, spec: &ExperimentSpec) {
    for cell in &summary.cells {
        let p = &cell.params;
        let batch = p.batch_size.map_or("full".to_string(), |b| b.to_string());
        let reg = match (p.lambda, p.beta) {
            (Some(l), _) => format!(" lambda={l}"),
            (_, Some(b)) => format!(" beta={b}"),
            _ => String::new(),
        };
        let fmt = |v: Option<f64>| v.map_or("diverged".to_string(), |v| format!("{v:.6}"));
        println!(
            "cell {:03} lr={} batch={batch}{reg}: val {} {} test {}",
            p.id,
            p.lr,
            summary.metric,
            fmt(cell.mean_val),
            fmt(cell.mean_test)
        );
    }
    match summary.best_cell {
        Some(b) => println!(
            "best cell {b:03}, mean test {} {:.6}",
            summary.metric,
            summary.best_test.unwrap_or(f64::NAN)
        ),
        None => println!("every cell diverged"),
    }
    if summary.diverged_runs > 0 {
        println!("{} run(s) diverged", summary.diverged_runs);
    }
    println!("results in {}", spec.out.display());
}
