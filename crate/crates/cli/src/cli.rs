//! Command-line surface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::eval::{cmd_eval, policy_id};
use crate::plotdata::cmd_plotdata;
use crate::train::cmd_train;
use crate::transfer::{cmd_transfer, with_protocol};

#[derive(Debug, Parser)]
#[command(name = "ringflow", version, about = "Mixed-autonomy ring-road training and highway transfer")]
pub struct Cli {
    /// Increase log verbosity (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train policies, one run per seed.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or human drivers) on the ring.
    Eval(EvalArgs),
    /// Run checkpoints zero-shot on the bottleneck highway.
    Transfer(TransferArgs),
    /// Export time-space diagram data from a trajectory CSV.
    Plotdata(PlotArgs),
    /// All-human reference on the ring or the highway.
    Baseline(BaselineArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Experiment configuration file (TOML sections).
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// `section.key=value` assignments applied after loading.
    #[arg(long = "override", value_name = "KEY=VALUE", num_args = 1..)]
    pub overrides: Vec<String>,

    /// Output directory; defaults to `<run.output_dir>/<run.experiment_id>/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn load(&self) -> CliResult<ExperimentConfig> {
        ExperimentConfig::load_with_overrides(self.config.as_deref(), &self.overrides)
    }

    fn out_dir(&self, cfg: &ExperimentConfig, parts: &[&str]) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            let mut p = Path::new(&cfg.run.output_dir).join(&cfg.run.experiment_id);
            for part in parts {
                p.push(part);
            }
            p
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,

    /// Train seeds 0..N instead of `train.seeds`.
    #[arg(long)]
    pub seeds: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct RingEvalArgs {
    /// Episodes to run; defaults to `run.eval_episodes`.
    #[arg(long)]
    pub episodes: Option<usize>,

    /// Base seed for episode seeds; defaults to the first of `train.seeds`.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Also write one trajectory CSV per episode.
    #[arg(long)]
    pub traces: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: ConfigArgs,

    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    #[command(flatten)]
    pub ring: RingEvalArgs,
}

#[derive(Debug, Clone, Args)]
pub struct HighwayArgs {
    /// Highway seeds 0..N instead of `train.seeds`.
    #[arg(long)]
    pub seeds: Option<u64>,

    /// Warm-up duration in seconds.
    #[arg(long)]
    pub warmup: Option<f64>,

    /// Evaluation window in seconds.
    #[arg(long = "eval")]
    pub eval: Option<f64>,

    /// Skip the per-run trajectory CSVs.
    #[arg(long)]
    pub no_trajectories: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub common: ConfigArgs,

    /// Checkpoint to transfer (repeatable). Without any, runs humans only.
    #[arg(long = "checkpoint", num_args = 1..)]
    pub checkpoints: Vec<PathBuf>,

    /// Include the all-human reference alongside the checkpoints.
    #[arg(long)]
    pub human: bool,

    #[command(flatten)]
    pub highway: HighwayArgs,
}

#[derive(Debug, Clone, Args)]
pub struct PlotArgs {
    /// Trajectory CSV written by `eval --traces` or `transfer`.
    #[arg(long)]
    pub input: PathBuf,

    #[arg(long, default_value = "timespace")]
    pub kind: String,

    /// Ring circumference in metres; inferred from wrap-arounds when omitted.
    #[arg(long)]
    pub circumference: Option<f64>,

    /// Output directory; defaults to `<input stem>_plotdata` beside the input.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Target {
    Ring,
    Highway,
}

#[derive(Debug, Clone, Args)]
pub struct BaselineArgs {
    #[arg(value_enum)]
    pub target: Target,

    #[command(flatten)]
    pub common: ConfigArgs,

    #[command(flatten)]
    pub ring: RingEvalArgs,

    #[command(flatten)]
    pub highway: HighwayArgs,
}

fn seed_list(count: Option<u64>, cfg: &ExperimentConfig) -> CliResult<Vec<u64>> {
    match count {
        Some(0) => Err(CliError::Usage("--seeds must be at least 1".into())),
        Some(n) => Ok((0..n).collect()),
        None => Ok(cfg.train.seeds.clone()),
    }
}

fn run_ring_eval(common: &ConfigArgs, checkpoint: Option<&Path>, ring: &RingEvalArgs) -> CliResult<()> {
    let cfg = common.load()?;
    let episodes = ring.episodes.unwrap_or(cfg.run.eval_episodes);
    let seed = ring.seed.unwrap_or(cfg.train.seeds[0]);
    let out = common.out_dir(&cfg, &["eval", &policy_id(checkpoint)]);
    let rep = cmd_eval(&cfg, checkpoint, episodes, seed, ring.traces, &out)?;
    println!(
        "{} episodes={} mean_m={:.6} std_m={:.6} -> {}",
        rep.summary.policy_id,
        rep.summary.episodes,
        rep.summary.mean_m,
        rep.summary.std_m,
        rep.dir.display()
    );
    Ok(())
}

fn run_highway(common: &ConfigArgs, checkpoints: &[PathBuf], human: bool, hw: &HighwayArgs) -> CliResult<()> {
    let mut cfg = common.load()?;
    cfg.highway = with_protocol(&cfg.highway, hw.warmup, hw.eval)?;
    let seeds = seed_list(hw.seeds, &cfg)?;
    let out = common.out_dir(&cfg, &["transfer"]);
    let rep = cmd_transfer(&cfg, checkpoints, human, &seeds, !hw.no_trajectories, &out)?;
    for row in &rep.summary {
        println!(
            "{} seed={} avg_stopped_time={:.4} mean_speed={:.4} throughput={:.1}",
            row.policy_id, row.seed, row.avg_stopped_time, row.mean_speed, row.throughput
        );
    }
    println!("-> {}", rep.dir.display());
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.common.load()?;
            let seeds = seed_list(args.seeds, &cfg)?;
            let out = args.common.out_dir(&cfg, &["train"]);
            let rep = cmd_train(&cfg, &seeds, &out)?;
            for r in &rep.runs {
                let last = r.stages.last().and_then(|s| s.final_eval_m);
                println!(
                    "seed={} final_eval_m={} checkpoint={}",
                    r.seed,
                    last.map(|m| format!("{m:.6}")).unwrap_or_else(|| "-".into()),
                    r.final_checkpoint.display()
                );
            }
            Ok(())
        }
        Command::Eval(args) => run_ring_eval(&args.common, args.checkpoint.as_deref(), &args.ring),
        Command::Transfer(args) => run_highway(&args.common, &args.checkpoints, args.human, &args.highway),
        Command::Plotdata(args) => {
            let out = args.out.clone().unwrap_or_else(|| {
                let stem = args.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                args.input.with_file_name(format!("{stem}_plotdata"))
            });
            let rep = cmd_plotdata(&args.input, &args.kind, args.circumference, &out)?;
            for lane in &rep.lanes {
                let slope = lane.band_slope.map(|s| format!("{s:.3}")).unwrap_or_else(|| "-".into());
                println!("lane={} vehicles={} segments={} band_slope={slope}", lane.lane, lane.vehicles, lane.segments);
            }
            println!("-> {}", rep.dir.display());
            Ok(())
        }
        Command::Baseline(args) => match args.target {
            Target::Ring => run_ring_eval(&args.common, None, &args.ring),
            Target::Highway => run_highway(&args.common, &[], true, &args.highway),
        },
    }
}
