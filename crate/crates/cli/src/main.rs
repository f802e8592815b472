//! `evade`: train, evaluate and inspect EVaDE world models, run the built-in
//! numerical self-checks, and reproduce the published aggregate scores.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use evade_core::agent::evaluate_greedy;
use evade_core::checkpoint::Checkpoint;
use evade_core::config::{EvadeMode, RunConfig};
use evade_core::env::{push_frame, Action};
use evade_core::psrl::Trainer;
use evade_core::selfcheck::{gradient_suite, identity_suite, CheckLine};
use evade_core::{dump_activations, reproduce_paper_metrics, Error, Precision, Rng, Scalar, ScoreTables};

#[derive(Debug, Parser)]
#[command(name = "evade", version, about = "EVaDE world models on a toy gridworld")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the full training loop and write reports and checkpoints.
    Train(TrainArgs),
    /// Greedy episodes in the real environment with a checkpointed policy.
    Eval(EvalArgs),
    /// Identity configurations of every noisy layer kind.
    IdentityCheck(SeedArgs),
    /// Finite-difference gradient checks in double precision.
    GradCheck(SeedArgs),
    /// Export per-layer activation maps for one transition.
    DumpActivations(DumpArgs),
    /// Recompute the published aggregate scores from the score tables.
    ReproducePaperMetrics(MetricsArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ActionArg {
    Up,
    Down,
    Left,
    Right,
    Noop,
}

impl From<ActionArg> for Action {
    fn from(a: ActionArg) -> Self {
        match a {
            ActionArg::Up => Action::Up,
            ActionArg::Down => Action::Down,
            ActionArg::Left => Action::Left,
            ActionArg::Right => Action::Right,
            ActionArg::Noop => Action::Noop,
        }
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured EVaDE switch.
    #[arg(long, value_enum)]
    evade: Option<Toggle>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Suppress per-iteration progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run configuration; defaults to `config.json` beside the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SeedArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run configuration; defaults to `config.json` beside the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Layers to export (repeatable or comma-separated); all when omitted.
    #[arg(long, value_delimiter = ',')]
    layers: Vec<String>,
    /// Actions taken from the initial state before the exported transition.
    #[arg(long, value_enum, value_delimiter = ',')]
    prefix: Vec<ActionArg>,
    /// Action of the exported transition.
    #[arg(long, value_enum, default_value = "noop")]
    action: ActionArg,
    /// Draw a reward-model sample with this seed instead of using the mean.
    #[arg(long)]
    sample_seed: Option<u64>,
    #[arg(long, default_value = "activations")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// Directory with the score CSVs; the bundled tables when omitted.
    #[arg(long)]
    tables: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e.chain().any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::NonFinite(_))));
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}

/// Ok(false) means the command ran but a check it performs failed.
fn run(command: Command) -> Result<bool> {
    match command {
        Command::Train(args) => train(args).map(|()| true),
        Command::Eval(args) => eval(args).map(|()| true),
        Command::IdentityCheck(args) => Ok(print_checks(&identity_suite(args.seed)?)),
        Command::GradCheck(args) => Ok(print_checks(&gradient_suite(args.seed)?)),
        Command::DumpActivations(args) => dump(args).map(|()| true),
        Command::ReproducePaperMetrics(args) => {
            let tables = match &args.tables {
                Some(dir) => ScoreTables::load(dir).with_context(|| format!("loading score tables from {}", dir.display()))?,
                None => ScoreTables::bundled()?,
            };
            let report = reproduce_paper_metrics(&tables)?;
            print!("{report}");
            Ok(report.all_pass())
        }
    }
}

fn print_checks(lines: &[CheckLine]) -> bool {
    for line in lines {
        println!("{line}");
    }
    lines.iter().all(|l| l.pass)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn config_beside(checkpoint: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    if explicit.is_some() {
        return load_config(explicit);
    }
    let beside = checkpoint.parent().unwrap_or(Path::new(".")).join("config.json");
    load_config(beside.exists().then_some(beside.as_path()))
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = load_config(args.run.config.as_deref())?;
    if let Some(seed) = args.run.seed {
        config.seed = seed;
    }
    if let Some(out) = args.run.out {
        config.out_dir = out;
    }
    if let Some(t) = args.run.evade {
        config.evade = match t {
            Toggle::On => EvadeMode::On,
            Toggle::Off => EvadeMode::Off,
        };
    }
    config.validate()?;
    match config.precision {
        Precision::Single => train_with::<f32>(config, args.resume.as_deref(), args.quiet),
        Precision::Double => train_with::<f64>(config, args.resume.as_deref(), args.quiet),
    }
}

fn train_with<S: Scalar>(config: RunConfig, resume: Option<&Path>, quiet: bool) -> Result<()> {
    let out = config.out_dir.clone();
    let trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
            if ckpt.seed != config.seed {
                bail!("checkpoint was written with seed {}, config has seed {}", ckpt.seed, config.seed);
            }
            Trainer::<S>::resume(config, &ckpt)?
        }
        None => {
            let root = Rng::new(config.seed);
            Trainer::<S>::new(config, root)?
        }
    };
    let mut trainer = trainer.with_output(&out)?;
    while !trainer.is_finished() {
        let row = trainer.run_iteration()?;
        if !quiet {
            eprintln!(
                "iteration {:>3}  real {:>6.2}  sim {:>6.2}  nll {:.4}  reward acc {:.3}  frame acc {:.4}  {:.1}s",
                row.iteration, row.real_return_mean, row.sim_return_mean, row.model_nll, row.reward_acc, row.frame_acc, row.seconds
            );
        }
    }
    let report = trainer.finish()?;
    println!("final greedy return {:.3} ({} episodes); outputs in {}", report.final_mean(), report.final_returns.len(), out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let config = config_beside(&args.checkpoint, args.config.as_deref())?;
    let ckpt = Checkpoint::load(&args.checkpoint).with_context(|| format!("reading checkpoint {}", args.checkpoint.display()))?;
    let returns = match config.precision {
        Precision::Single => eval_with::<f32>(config, &ckpt, args.episodes, args.seed)?,
        Precision::Double => eval_with::<f64>(config, &ckpt, args.episodes, args.seed)?,
    };
    for (i, r) in returns.iter().enumerate() {
        println!("episode {}  return {r}", i + 1);
    }
    println!("mean return {:.3}", returns.iter().sum::<f64>() / returns.len().max(1) as f64);
    Ok(())
}

fn eval_with<S: Scalar>(config: RunConfig, ckpt: &Checkpoint, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    let trainer = Trainer::<S>::resume(config, ckpt)?;
    Ok(evaluate_greedy(trainer.policy(), trainer.env(), episodes, &mut Rng::new(seed))?)
}

fn dump(args: DumpArgs) -> Result<()> {
    let config = config_beside(&args.checkpoint, args.config.as_deref())?;
    let ckpt = Checkpoint::load(&args.checkpoint).with_context(|| format!("reading checkpoint {}", args.checkpoint.display()))?;
    let written = match config.precision {
        Precision::Single => dump_with::<f32>(config, &ckpt, &args)?,
        Precision::Double => dump_with::<f64>(config, &ckpt, &args)?,
    };
    println!("wrote {written} files to {}", args.out.display());
    Ok(())
}

fn dump_with<S: Scalar>(config: RunConfig, ckpt: &Checkpoint, args: &DumpArgs) -> Result<usize> {
    let trainer = Trainer::<S>::resume(config, ckpt)?;
    let env = trainer.env();
    let (mut state, mut obs) = env.reset::<S>(0);
    for &a in &args.prefix {
        let out = env.step::<S>(&state, a.into())?;
        if out.done {
            bail!("the action prefix ends the episode");
        }
        obs = push_frame(&obs, &out.frame)?;
        state = out.state;
    }
    let model = trainer.model();
    let sample = match args.sample_seed {
        Some(seed) => model.draw_reward_sample(&mut Rng::new(seed)),
        None => model.mean_sample(),
    };
    let action = Action::from(args.action).index();
    Ok(dump_activations(model, &sample, &obs, action, &args.layers, &args.out)?.len())
}
