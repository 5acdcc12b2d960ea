//! `train`: one curriculum (or single-stage) run per seed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ringflow::policy::PolicyParams;
use ringflow::trpo::{run_curriculum, IterationLog, StageSummary, TrainObserver, TRAINING_LOG_HEADER};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{build_hash, RunDir, RunManifest};

pub const STAGES_HEADER: &str = "stage,n_av,iterations,initial_eval_m,final_eval_m,rollout_m_last100";

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub final_checkpoint: PathBuf,
    pub stages: Vec<StageSummary>,
    pub log: Vec<IterationLog>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub dir: PathBuf,
    pub runs: Vec<SeedRun>,
}

fn seed_dir(seed: u64) -> String {
    format!("seed_{seed}")
}

pub fn iteration_checkpoint(seed: u64, iteration: usize) -> String {
    format!("{}/checkpoints/iter_{iteration:05}.ckpt", seed_dir(seed))
}

pub fn stage_checkpoint(seed: u64, stage: usize) -> String {
    format!("{}/checkpoints/stage_{stage}.ckpt", seed_dir(seed))
}

pub fn final_checkpoint(seed: u64) -> String {
    format!("{}/final.ckpt", seed_dir(seed))
}

pub fn training_log(seed: u64) -> String {
    format!("{}/training_log.csv", seed_dir(seed))
}

pub fn stages_file(seed: u64) -> String {
    format!("{}/stages.csv", seed_dir(seed))
}

/// Every file a training run over `seeds` will write.
pub fn planned_outputs(cfg: &ExperimentConfig, seeds: &[u64]) -> Vec<String> {
    let schedule = cfg.schedule();
    let total = schedule.total_iterations();
    let every = cfg.run.checkpoint_every;
    let mut out = vec!["config.toml".to_string()];
    for &seed in seeds {
        out.push(training_log(seed));
        out.push(stages_file(seed));
        if every > 0 {
            out.extend((every..=total).step_by(every).map(|i| iteration_checkpoint(seed, i)));
        }
        out.extend((0..schedule.stages.len()).map(|k| stage_checkpoint(seed, k)));
        out.push(final_checkpoint(seed));
    }
    out
}

pub fn checkpoint_bytes(params: &PolicyParams) -> Vec<u8> {
    let mut buf = Vec::new();
    params.write_checkpoint(&mut buf).expect("writing to memory cannot fail");
    buf
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

struct Persist<'a> {
    run: &'a RunDir,
    seed: u64,
    every: usize,
    log: BufWriter<File>,
    log_path: PathBuf,
    stages: Vec<StageSummary>,
}

impl Persist<'_> {
    fn io(&self, e: std::io::Error) -> ringflow::Error {
        ringflow::Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", self.log_path.display())))
    }

    fn save(&self, rel: &str, params: &PolicyParams) -> ringflow::Result<()> {
        self.run.write(rel, &checkpoint_bytes(params)).map_err(|e| ringflow::Error::Checkpoint(e.to_string()))
    }
}

impl TrainObserver for Persist<'_> {
    fn on_iteration(&mut self, log: &IterationLog, params: &PolicyParams) -> ringflow::Result<()> {
        writeln!(self.log, "{}", log.csv_row()).and_then(|_| self.log.flush()).map_err(|e| self.io(e))?;
        if self.every > 0 && log.iteration % self.every == 0 {
            self.save(&iteration_checkpoint(self.seed, log.iteration), params)?;
        }
        Ok(())
    }

    fn on_stage_end(&mut self, summary: &StageSummary, params: &PolicyParams) -> ringflow::Result<()> {
        self.save(&stage_checkpoint(self.seed, summary.stage), params)?;
        self.stages.push(summary.clone());
        Ok(())
    }
}

fn stages_csv(stages: &[StageSummary]) -> String {
    let mut text = format!("{STAGES_HEADER}\n");
    for s in stages {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.stage,
            s.n_av,
            s.iterations,
            opt(s.initial_eval_m),
            opt(s.final_eval_m),
            s.rollout_m_last100
        ));
    }
    text
}

fn train_seed(run: &RunDir, cfg: &ExperimentConfig, seed: u64) -> CliResult<SeedRun> {
    let log_path = run.path(&training_log(seed))?;
    let file = File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    writeln!(log, "{TRAINING_LOG_HEADER}").map_err(|e| CliError::io(&log_path, e))?;
    let mut persist = Persist { run, seed, every: cfg.run.checkpoint_every, log, log_path, stages: Vec::new() };
    log::info!("training seed {seed}");
    let result = run_curriculum(&cfg.schedule(), &cfg.train, &cfg.ring_env(), seed, &mut persist);
    let partial = stages_csv(&persist.stages);
    run.write(&stages_file(seed), partial.as_bytes())?;
    let result = result?;
    let final_rel = final_checkpoint(seed);
    run.write(&final_rel, &checkpoint_bytes(&result.params))?;
    Ok(SeedRun { seed, final_checkpoint: run.root().join(final_rel), stages: result.stages, log: result.log })
}

pub fn cmd_train(cfg: &ExperimentConfig, seeds: &[u64], out: &Path) -> CliResult<TrainReport> {
    if seeds.is_empty() {
        return Err(CliError::Usage("no seeds to train".into()));
    }
    let manifest = RunManifest {
        experiment_id: cfg.run.experiment_id.clone(),
        command: "train".into(),
        config_hash: cfg.config_hash(),
        seeds: seeds.to_vec(),
        build_hash: build_hash(),
        outputs: planned_outputs(cfg, seeds),
    };
    let run = RunDir::begin(out, manifest)?;
    run.guard(|run| {
        run.write("config.toml", cfg.to_toml().as_bytes())?;
        let runs = seeds.iter().map(|&s| train_seed(run, cfg, s)).collect::<CliResult<Vec<_>>>()?;
        Ok(TrainReport { dir: run.root().to_path_buf(), runs })
    })
}
