use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use flowforget::config::RunConfig;
use flowforget::experiments::{
    self, gradcheck, run_multi_identity, run_noise_attack, run_once, run_sweep, run_theorems, source_latents,
    ExperimentOutput, SweepSpec,
};
use flowforget::metrics::{evaluate, CSV_HEADER};
use flowforget::toygen::{build_world, AdapterStack, ToyWorld};
use flowforget::Error;

/// Identity unlearning with Neural ODE adapters on a toy generator.
#[derive(Parser)]
#[command(name = "flowforget", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key=value config file; `#` starts a comment.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key after the file is applied. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run seed; experiments use this and the following `seeds - 1` values.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if absent.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Maximum grid points run at once.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    jobs: u32,
}

#[derive(Subcommand)]
enum Command {
    /// Unlearn the configured identities once and write metrics and checkpoints.
    Unlearn(Common),
    /// Sweep one hyperparameter over its grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "step-size")]
        variable: SweepKind,
    },
    /// Discrete baseline vs Neural ODE without and with trajectory consistency.
    Ablation(Common),
    /// Sequentially unlearn two or three identities.
    MultiId {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        ids: Vec<usize>,
    },
    /// Evaluate trained stacks under latent noise.
    Noise(Common),
    /// Finite-difference and adjoint gradient checks.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
    /// Identity-at-init, smoothness and non-crossing property suites.
    Theorems(Common),
    /// Re-evaluate the checkpoints saved by `unlearn` in `--out`.
    Report(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    StepSize,
    FixedHorizon,
    HiddenDim,
    Solver,
    Lambda,
}

enum Failure {
    Config(String),
    Runtime(String),
    Assertion,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Format(_) | Error::Io { .. } => {
                Failure::Config(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Assertion) => ExitCode::from(1),
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

struct Setup {
    cfg: RunConfig,
    world: ToyWorld,
    out: PathBuf,
    jobs: usize,
}

fn setup(c: &Common, write_resolved: bool) -> Result<Setup, Failure> {
    let mut cfg = RunConfig::resolve(c.config.as_deref(), &c.overrides)?;
    if let Some(s) = c.seed {
        cfg.unlearn.seed = s;
    }
    cfg.validate()?;
    fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
    if write_resolved {
        write(&c.out.join("resolved.cfg"), &cfg.to_text())?;
    }
    let world = build_world(&cfg.world)?;
    Ok(Setup {
        cfg,
        world,
        out: c.out.clone(),
        jobs: c.jobs as usize,
    })
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn emit(out: &ExperimentOutput, dir: &Path) -> Result<(), Failure> {
    out.write(dir)?;
    print!("{}", out.summary());
    Ok(())
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Unlearn(c) => {
            let s = setup(&c, true)?;
            let seed = s.cfg.unlearn.seed;
            let outcome = run_once(&s.world, &s.cfg, seed, &format!("unlearn/s{seed}"))?;
            let mut hist = Vec::new();
            outcome.history.write_csv(&mut hist).expect("writing to memory");
            write(&s.out.join("loss_history.csv"), &String::from_utf8(hist).expect("ascii csv"))?;
            write(&s.out.join("metrics.csv"), &format!("{CSV_HEADER}\n{}\n", outcome.report.csv_row()))?;
            outcome.stack.save(&s.out)?;
            println!("{CSV_HEADER}\n{}", outcome.report.csv_row());
            Ok(())
        }
        Command::Sweep { common, variable } => {
            let s = setup(&common, true)?;
            let spec = match variable {
                SweepKind::StepSize => SweepSpec::step_size(&s.cfg),
                SweepKind::FixedHorizon => SweepSpec::fixed_horizon(&s.cfg),
                SweepKind::HiddenDim => SweepSpec::hidden_dim(&s.cfg),
                SweepKind::Solver => SweepSpec::solver(&s.cfg),
                SweepKind::Lambda => SweepSpec::lambda_ratio(&s.cfg),
            };
            emit(&run_sweep(&s.world, &spec, s.jobs)?.output(), &s.out)
        }
        Command::Ablation(c) => {
            let s = setup(&c, true)?;
            emit(&run_sweep(&s.world, &SweepSpec::ablation(&s.cfg), s.jobs)?.output(), &s.out)
        }
        Command::MultiId { common, ids } => {
            let s = setup(&common, true)?;
            emit(&run_multi_identity(&s.world, &s.cfg, &ids, s.jobs)?.output(), &s.out)
        }
        Command::Noise(c) => {
            let s = setup(&c, true)?;
            emit(&run_noise_attack(&s.world, &s.cfg, s.jobs)?.output(), &s.out)
        }
        Command::Gradcheck { common, instances } => {
            let s = setup(&common, true)?;
            let out = gradcheck(s.cfg.unlearn.seed, instances)?.output();
            emit(&out, &s.out)?;
            gate(&out)
        }
        Command::Theorems(c) => {
            let s = setup(&c, true)?;
            let out = run_theorems(&s.world, &s.cfg, s.cfg.unlearn.seed)?.output();
            emit(&out, &s.out)?;
            gate(&out)
        }
        Command::Report(mut c) => {
            let saved = c.out.join("resolved.cfg");
            if c.config.is_none() && saved.exists() {
                c.config = Some(saved);
            }
            let s = setup(&c, false)?;
            let stack = AdapterStack::load(&s.out, &s.world, s.cfg.unlearn.solver)?;
            let seed = s.cfg.unlearn.seed;
            let sources = source_latents(&s.world, &s.cfg.forget_ids, seed)?;
            let report = evaluate(&s.world, &stack, &s.cfg.eval_spec(sources), &format!("report/s{seed}"), seed)?;
            let body = format!("{CSV_HEADER},J\n{},{:?}\n", report.csv_row(), experiments::composite_j(&report));
            write(&s.out.join("report.csv"), &body)?;
            print!("{body}");
            Ok(())
        }
    }
}

fn gate(out: &ExperimentOutput) -> Result<(), Failure> {
    if out.passed() {
        Ok(())
    } else {
        Err(Failure::Assertion)
    }
}
