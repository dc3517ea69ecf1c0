//! Batch experiments: dialogue simulation, preference training, and the
//! neglect threshold sweep.

use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use reflex_core::aae::{threshold_sweep, ToolConfig};
use reflex_core::dpo::{
    prefer_positive, synthetic_pairs, train, win_rate, DiffusionSchedule, PolicyParams, PreferencePair,
    TrainerConfig,
};
use reflex_core::store::{save_params, PairStore};
use reflex_core::toyworld::{run_simulation, SimulationConfig, ToyWorldConfig};

use crate::{Ctx, Format};

fn print_json(value: &impl Serialize) -> Result<(), String> {
    println!("{}", serde_json::to_string_pretty(value).map_err(|e| e.to_string())?);
    Ok(())
}

fn check_prob(name: &str, p: f64) -> Result<(), String> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(format!("{name} must be in [0, 1], got {p}"))
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 500)]
    dialogues: usize,
    #[arg(long, default_value_t = 4)]
    rounds: u32,
    /// Aspects the simulated user states up front.
    #[arg(long, default_value_t = 1)]
    revealed: usize,
    /// Probability that the user answers a question.
    #[arg(long, default_value_t = 1.0)]
    reply_prob: f64,
    /// Probability that the generator ignores a pinned aspect.
    #[arg(long, default_value_t = 0.0)]
    neglect: f64,
}

pub fn simulate(ctx: &Ctx, args: SimulateArgs) -> Result<(), String> {
    check_prob("--reply-prob", args.reply_prob)?;
    check_prob("--neglect", args.neglect)?;
    if args.dialogues == 0 || args.rounds == 0 {
        return Err("--dialogues and --rounds must be positive".into());
    }
    let cfg = SimulationConfig {
        world: ToyWorldConfig::default().with_neglect(args.neglect),
        revealed: args.revealed,
        reply_prob: args.reply_prob,
        seed: ctx.seed,
    };
    let table = run_simulation(args.dialogues, args.rounds, &cfg).map_err(|e| e.to_string())?;
    match ctx.format {
        Format::Text => print!("{table}"),
        Format::Csv => print!("{}", table.to_csv()),
        Format::Json => print_json(&table)?,
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Preference pairs, one JSON object per line.
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    pairs: Option<PathBuf>,
    /// Train on this many freshly drawn synthetic pairs instead of a file.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Latent dimension for synthetic pairs.
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    /// Gradient steps per epoch.
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 40)]
    batch_size: usize,
    /// Paired draws used to estimate the final win rate.
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    /// Write the trained parameters here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct EpochLoss {
    epoch: usize,
    mean_loss: f64,
}

#[derive(Debug, Serialize)]
struct TrainOutput {
    pairs: usize,
    config: TrainerConfig,
    curve: Vec<EpochLoss>,
    kl_to_reference: f64,
    win_rate: f64,
}

fn load_pairs(path: &std::path::Path) -> Result<Vec<PreferencePair>, String> {
    if !path.exists() {
        return Err(format!("pairs file not found: {}", path.display()));
    }
    PairStore::new(path).load().map_err(|e| format!("{}: {e}", path.display()))
}

pub fn train_dpo(ctx: &Ctx, args: TrainArgs) -> Result<(), String> {
    let schedule = DiffusionSchedule::standard();
    let (pairs, dim) = match (&args.pairs, args.synthetic) {
        (Some(path), _) => {
            let pairs = load_pairs(path)?;
            let first = pairs.first().ok_or("pairs file is empty")?;
            let dim = first.winner.output().len();
            (pairs, dim)
        }
        (None, Some(n)) => {
            let reference = PolicyParams::zeros(args.dim, schedule.clone());
            (synthetic_pairs(&reference, n, ctx.seed, &prefer_positive), args.dim)
        }
        (None, None) => return Err("give --pairs FILE or --synthetic N".into()),
    };
    if dim == 0 {
        return Err("trajectories have zero dimension".into());
    }
    let reference = PolicyParams::zeros(dim, schedule);
    let cfg = TrainerConfig {
        beta: args.beta,
        learning_rate: args.lr,
        epochs: args.epochs,
        prompts_per_epoch: args.steps,
        batch_size: args.batch_size,
    };
    let report = train(&reference, &reference, &pairs, &cfg).map_err(|e| e.to_string())?;
    let kl = report.params.kl_to(&reference).map_err(|e| e.to_string())?;
    let rate = win_rate(&report.params, &reference, &prefer_positive, args.samples, ctx.seed);
    if let Some(out) = &args.out {
        save_params(out, &report.params).map_err(|e| e.to_string())?;
    }
    let out = TrainOutput {
        pairs: pairs.len(),
        curve: report
            .epoch_means()
            .into_iter()
            .enumerate()
            .map(|(epoch, mean_loss)| EpochLoss { epoch, mean_loss })
            .collect(),
        config: cfg,
        kl_to_reference: kl,
        win_rate: rate,
    };
    match ctx.format {
        Format::Json => print_json(&out)?,
        Format::Csv => {
            println!("epoch,mean_loss");
            for e in &out.curve {
                println!("{},{:.6}", e.epoch, e.mean_loss);
            }
        }
        Format::Text => {
            println!("{:>5}  {:>9}", "epoch", "mean_loss");
            for e in &out.curve {
                println!("{:>5}  {:>9.6}", e.epoch, e.mean_loss);
            }
            println!("pairs            {}", out.pairs);
            println!("kl_to_reference  {:.6}", out.kl_to_reference);
            println!("win_rate         {:.4}", out.win_rate);
        }
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 120)]
    count: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// Destination file (JSON lines); existing pairs are kept.
    #[arg(long)]
    out: PathBuf,
}

pub fn synth_pairs(ctx: &Ctx, args: SynthArgs) -> Result<(), String> {
    if args.dim == 0 {
        return Err("--dim must be positive".into());
    }
    let reference = PolicyParams::zeros(args.dim, DiffusionSchedule::standard());
    let store = PairStore::new(&args.out);
    for pair in synthetic_pairs(&reference, args.count, ctx.seed, &prefer_positive) {
        store.append(&pair).map_err(|e| e.to_string())?;
    }
    eprintln!("wrote {} pairs to {}", args.count, args.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.75,0.72,0.7,0.68,0.66")]
    thresholds: Vec<f64>,
    #[arg(long, default_value_t = 2000)]
    trials: usize,
    /// Aspects set in each trial prompt.
    #[arg(long, default_value_t = 3)]
    specified: usize,
    /// Probability that the generator ignores a pinned aspect.
    #[arg(long, default_value_t = 0.2)]
    neglect: f64,
    #[arg(long, default_value_t = 5)]
    max_iterations: usize,
}

pub fn aae_sweep(ctx: &Ctx, args: SweepArgs) -> Result<(), String> {
    check_prob("--neglect", args.neglect)?;
    if args.trials == 0 {
        return Err("--trials must be positive".into());
    }
    let base = ToolConfig {
        max_iterations: args.max_iterations,
        ..ToolConfig::default()
    };
    let world = ToyWorldConfig::default().with_neglect(args.neglect);
    let table = threshold_sweep(&args.thresholds, args.trials, args.specified, &base, &world, ctx.seed)
        .map_err(|e| e.to_string())?;
    match ctx.format {
        Format::Text => print!("{table}"),
        Format::Csv => print!("{}", table.to_csv()),
        Format::Json => print_json(&table)?,
    }
    Ok(())
}
