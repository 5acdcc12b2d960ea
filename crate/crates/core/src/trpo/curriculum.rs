//! Training loop, curriculum over ring size and AV count, and deterministic
//! evaluation.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::MlpLayout;
use crate::perturbation::LaneChangeConfig;
use crate::policy::PolicyParams;
use crate::ring_env::{EpisodeTrace, RingEnv, RingEnvConfig};
use crate::rng::{self, SimRng};

use super::rollout::{collect_rollouts, compute_advantages};
use super::value::ValueFunction;
use super::{trpo_update, TrainConfig};

pub const TRAINING_LOG_HEADER: &str = "iteration,stage,n_av,mean_return,metric_m,kl,step_accepted";

const ROLLING_WINDOW: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub n_av: usize,
    pub length_range: [f64; 2],
    pub iterations: usize,
}

impl Stage {
    pub fn for_avs(n_av: usize, iterations: usize) -> Self {
        let n = n_av as f64;
        Self { n_av, length_range: [250.0 * n, 360.0 * n], iterations }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub stages: Vec<Stage>,
    pub lane_change: LaneChangeConfig,
}

impl CurriculumSchedule {
    /// Stages `1..=n_final` AVs: `n_pretrain` iterations each, `n_train` on the last.
    pub fn growing(n_final: usize, n_pretrain: usize, n_train: usize, lane_change: LaneChangeConfig) -> Self {
        let stages = (1..=n_final)
            .map(|n| Stage::for_avs(n, if n == n_final { n_train } else { n_pretrain }))
            .collect();
        Self { stages, lane_change }
    }

    /// Train directly on `n_final` AVs with the same total iteration budget
    /// as [`CurriculumSchedule::growing`].
    pub fn ablation(n_final: usize, n_pretrain: usize, n_train: usize, lane_change: LaneChangeConfig) -> Self {
        let budget = n_pretrain * n_final.saturating_sub(1) + n_train;
        Self { stages: vec![Stage::for_avs(n_final, budget)], lane_change }
    }

    pub fn total_iterations(&self) -> usize {
        self.stages.iter().map(|s| s.iterations).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.stages.is_empty() {
            return bad("curriculum has no stages".into());
        }
        for (k, stage) in self.stages.iter().enumerate() {
            if stage.n_av == 0 {
                return bad(format!("stage {k}: n_av must be >= 1"));
            }
            let expected = Stage::for_avs(stage.n_av, stage.iterations).length_range;
            if stage.length_range != expected {
                return bad(format!("stage {k}: length range must be {expected:?}"));
            }
            if k > 0 && stage.n_av != self.stages[k - 1].n_av + 1 {
                return bad(format!("stage {k}: n_av must grow by exactly one per stage"));
            }
        }
        Ok(())
    }

    pub fn stage_env(&self, base: &RingEnvConfig, stage: usize) -> RingEnvConfig {
        let s = &self.stages[stage];
        RingEnvConfig {
            n_av: s.n_av,
            length_range: Some(s.length_range),
            lane_change: self.lane_change.clone(),
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    /// Global iteration counter, starting at 1.
    pub iteration: usize,
    pub stage: usize,
    pub n_av: usize,
    pub mean_return: f64,
    /// Mean metric over this iteration's training rollouts.
    pub metric_m: f64,
    pub kl: f64,
    pub step_accepted: bool,
    /// Deterministic evaluation metric, on evaluation iterations.
    pub eval_m: Option<f64>,
}

impl IterationLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration, self.stage, self.n_av, self.mean_return, self.metric_m, self.kl, self.step_accepted
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub stage: usize,
    pub n_av: usize,
    pub iterations: usize,
    /// Deterministic evaluation of the incoming (warm-start) parameters.
    pub initial_eval_m: Option<f64>,
    pub final_eval_m: Option<f64>,
    /// Mean metric over the last 100 training rollouts of the stage.
    pub rollout_m_last100: f64,
}

#[derive(Debug, Clone)]
pub struct CurriculumResult {
    pub params: PolicyParams,
    pub stages: Vec<StageSummary>,
    pub log: Vec<IterationLog>,
}

impl CurriculumResult {
    pub fn write_log<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{TRAINING_LOG_HEADER}")?;
        for row in &self.log {
            writeln!(out, "{}", row.csv_row())?;
        }
        Ok(())
    }
}

/// Hooks for persisting progress while training runs.
pub trait TrainObserver {
    fn on_iteration(&mut self, _log: &IterationLog, _params: &PolicyParams) -> Result<()> {
        Ok(())
    }

    fn on_stage_end(&mut self, _summary: &StageSummary, _params: &PolicyParams) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalEpisode {
    pub seed: u64,
    pub circumference: f64,
    pub metric_m: f64,
    pub mean_return: f64,
    pub min_speed: f64,
    pub steps: usize,
    pub collided: bool,
}

/// One deterministic episode: agents apply the policy mean, or behave as
/// humans when `params` is `None`.
pub fn run_eval_episode(
    params: Option<&PolicyParams>,
    env_cfg: &RingEnvConfig,
    seed: u64,
    traced: bool,
) -> Result<(EvalEpisode, Option<EpisodeTrace>)> {
    let cfg = match params {
        Some(p) => {
            if p.obs_dim() != env_cfg.obs_dim() {
                return Err(Error::DimensionMismatch { expected: env_cfg.obs_dim(), got: p.obs_dim() });
            }
            env_cfg.clone()
        }
        None => env_cfg.human_twin(),
    };
    let (mut env, mut obs) =
        if traced { RingEnv::reset_traced(cfg, seed)? } else { RingEnv::reset(cfg, seed)? };
    let circumference = env.state().circumference;
    let mut returns = vec![0.0; env.n_agents()];
    let mut min_speed = f64::INFINITY;
    let mut collided = false;
    while !env.is_done() {
        let actions = match params {
            Some(p) => obs.iter().map(|o| p.forward(o.as_slice()).map(|(m, _)| m)).collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let step = env.step(&actions)?;
        for (acc, r) in returns.iter_mut().zip(&step.rewards) {
            *acc += r;
        }
        min_speed = env.state().vehicles.iter().map(|v| v.speed).fold(min_speed, f64::min);
        collided |= step.collided;
        obs = step.observations;
    }
    let mean_return = if returns.is_empty() { 0.0 } else { returns.iter().sum::<f64>() / returns.len() as f64 };
    let episode = EvalEpisode {
        seed,
        circumference,
        metric_m: env.metric_so_far().unwrap_or(f64::NAN),
        mean_return,
        min_speed,
        steps: env.steps_taken(),
        collided,
    };
    Ok((episode, env.into_trace()))
}

pub fn evaluate_policy(params: Option<&PolicyParams>, env_cfg: &RingEnvConfig, seeds: &[u64]) -> Result<Vec<EvalEpisode>> {
    seeds.iter().map(|&s| run_eval_episode(params, env_cfg, s, false).map(|(e, _)| e)).collect()
}

/// Single-run trainer: owns the policy, the value baseline and the iteration
/// counter that derives every rollout seed.
#[derive(Debug, Clone)]
pub struct Trainer {
    env_cfg: RingEnvConfig,
    cfg: TrainConfig,
    seed: u64,
    params: PolicyParams,
    value_fn: ValueFunction,
    value_rng: SimRng,
    iteration: usize,
    recent_m: VecDeque<f64>,
}

impl Trainer {
    pub fn new(env_cfg: RingEnvConfig, cfg: TrainConfig, seed: u64) -> Result<Self> {
        let layout = MlpLayout::new(env_cfg.obs_dim(), &cfg.policy_hidden);
        let params = PolicyParams::init(layout, &mut rng::stream(seed, "policy-init", 0));
        Self::with_params(env_cfg, cfg, seed, params)
    }

    pub fn with_params(env_cfg: RingEnvConfig, cfg: TrainConfig, seed: u64, params: PolicyParams) -> Result<Self> {
        env_cfg.validate()?;
        cfg.validate(env_cfg.horizon_steps * env_cfg.n_av)?;
        if params.obs_dim() != env_cfg.obs_dim() {
            return Err(Error::DimensionMismatch { expected: env_cfg.obs_dim(), got: params.obs_dim() });
        }
        let value_fn = ValueFunction::new(
            env_cfg.obs_dim() + 1,
            cfg.value_fn.clone(),
            &mut rng::stream(seed, "value-init", 0),
        );
        Ok(Self {
            value_rng: rng::stream(seed, "value-fit", 0),
            env_cfg,
            cfg,
            seed,
            params,
            value_fn,
            iteration: 0,
            recent_m: VecDeque::with_capacity(ROLLING_WINDOW),
        })
    }

    /// Switch environments while keeping parameters, baseline and counters.
    pub fn set_env(&mut self, env_cfg: RingEnvConfig) -> Result<()> {
        env_cfg.validate()?;
        self.cfg.validate(env_cfg.horizon_steps * env_cfg.n_av)?;
        self.env_cfg = env_cfg;
        self.recent_m.clear();
        Ok(())
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn into_params(self) -> PolicyParams {
        self.params
    }

    pub fn env_config(&self) -> &RingEnvConfig {
        &self.env_cfg
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        (0..self.cfg.eval_episodes as u64).map(|k| rng::derive_seed(self.seed, "eval", k)).collect()
    }

    /// Deterministic metric `m` averaged over the evaluation seeds.
    pub fn evaluate(&self) -> Result<Option<f64>> {
        let seeds = self.eval_seeds();
        if seeds.is_empty() {
            return Ok(None);
        }
        let eps = evaluate_policy(Some(&self.params), &self.env_cfg, &seeds)?;
        Ok(Some(eps.iter().map(|e| e.metric_m).sum::<f64>() / eps.len() as f64))
    }

    /// Mean metric over up to the last 100 training rollouts.
    pub fn rolling_metric(&self) -> f64 {
        if self.recent_m.is_empty() {
            return f64::NAN;
        }
        self.recent_m.iter().sum::<f64>() / self.recent_m.len() as f64
    }

    /// One TRPO iteration; `stage` is only recorded in the log.
    pub fn step(&mut self, stage: usize) -> Result<IterationLog> {
        self.iteration += 1;
        let rollout_seed = rng::derive_seed(self.seed, "rollout", self.iteration as u64);
        let mut batch = collect_rollouts(&self.env_cfg, &self.params, &self.cfg, rollout_seed)?;
        compute_advantages(&mut batch, Some(&self.value_fn), &self.cfg);
        let data = batch.surrogate_data()?;
        let (params, stats) = trpo_update(&self.params, &data, &self.cfg)?;
        if !params.is_finite() {
            return Err(Error::NonFinite("policy parameters"));
        }
        self.params = params;

        let inputs = batch.value_inputs();
        let targets = ndarray::Array1::from(batch.returns.clone());
        self.value_fn.fit(inputs.view(), targets.view(), &mut self.value_rng);

        for ep in &batch.episodes {
            if self.recent_m.len() == ROLLING_WINDOW {
                self.recent_m.pop_front();
            }
            self.recent_m.push_back(ep.metric_m);
        }
        let stats_kl = if stats.accepted { stats.kl } else { 0.0 };
        Ok(IterationLog {
            iteration: self.iteration,
            stage,
            n_av: self.env_cfg.n_av,
            mean_return: batch.mean_return(),
            metric_m: batch.mean_metric(),
            kl: stats_kl,
            step_accepted: stats.accepted,
            eval_m: None,
        })
    }
}

/// Train through every stage, warm-starting each from the previous one.
pub fn run_curriculum(
    schedule: &CurriculumSchedule,
    cfg: &TrainConfig,
    base_env: &RingEnvConfig,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<CurriculumResult> {
    schedule.validate()?;
    let mut trainer = Trainer::new(schedule.stage_env(base_env, 0), cfg.clone(), seed)?;
    let mut stages = Vec::with_capacity(schedule.stages.len());
    let mut log = Vec::with_capacity(schedule.total_iterations());
    for (k, stage) in schedule.stages.iter().enumerate() {
        if k > 0 {
            trainer.set_env(schedule.stage_env(base_env, k))?;
        }
        let initial_eval_m = trainer.evaluate()?;
        let mut final_eval_m = initial_eval_m;
        for local in 1..=stage.iterations {
            let mut entry = trainer.step(k)?;
            let due = cfg.eval_every > 0 && local % cfg.eval_every == 0;
            if due || local == stage.iterations {
                entry.eval_m = trainer.evaluate()?;
                final_eval_m = entry.eval_m;
            }
            observer.on_iteration(&entry, trainer.params())?;
            log::info!(
                "iter {} stage {} n_av {} return {:.3} m {:.4} kl {:.5} accepted {}",
                entry.iteration,
                k,
                entry.n_av,
                entry.mean_return,
                entry.metric_m,
                entry.kl,
                entry.step_accepted
            );
            log.push(entry);
        }
        let summary = StageSummary {
            stage: k,
            n_av: stage.n_av,
            iterations: stage.iterations,
            initial_eval_m,
            final_eval_m,
            rollout_m_last100: trainer.rolling_metric(),
        };
        observer.on_stage_end(&summary, trainer.params())?;
        stages.push(summary);
    }
    Ok(CurriculumResult { params: trainer.into_params(), stages, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            batch_env_steps: 400,
            policy_hidden: vec![16, 16],
            eval_every: 2,
            eval_episodes: 1,
            ..TrainConfig::default()
        }
    }

    fn quick_env() -> RingEnvConfig {
        RingEnvConfig { horizon_steps: 200, ..RingEnvConfig::default() }
    }

    #[test]
    fn growing_schedule_lengths() {
        let s = CurriculumSchedule::growing(4, 200, 500, LaneChangeConfig::default());
        let ranges: Vec<[f64; 2]> = s.stages.iter().map(|st| st.length_range).collect();
        assert_eq!(ranges, vec![[250.0, 360.0], [500.0, 720.0], [750.0, 1080.0], [1000.0, 1440.0]]);
        let iters: Vec<usize> = s.stages.iter().map(|st| st.iterations).collect();
        assert_eq!(iters, vec![200, 200, 200, 500]);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn ablation_matches_compute() {
        let g = CurriculumSchedule::growing(4, 200, 500, LaneChangeConfig::default());
        let a = CurriculumSchedule::ablation(4, 200, 500, LaneChangeConfig::default());
        assert_eq!(a.stages.len(), 1);
        assert_eq!(a.stages[0].n_av, 4);
        assert_eq!(a.total_iterations(), g.total_iterations());
    }

    #[test]
    fn invalid_schedules_rejected() {
        let mut s = CurriculumSchedule::growing(3, 1, 1, LaneChangeConfig::default());
        s.stages.swap(0, 1);
        assert!(s.validate().is_err());
        let mut s = CurriculumSchedule::growing(2, 1, 1, LaneChangeConfig::default());
        s.stages[1].length_range = [400.0, 720.0];
        assert!(s.validate().is_err());
    }

    #[test]
    fn single_stage_curriculum_is_plain_training() {
        let cfg = quick_cfg();
        let schedule = CurriculumSchedule::growing(1, 0, 3, LaneChangeConfig::default());
        let result = run_curriculum(&schedule, &cfg, &quick_env(), 17, &mut ()).unwrap();

        let mut trainer = Trainer::new(schedule.stage_env(&quick_env(), 0), cfg, 17).unwrap();
        for _ in 0..3 {
            trainer.step(0).unwrap();
        }
        assert_eq!(&result.params, trainer.params());
    }

    #[test]
    fn warm_start_carries_parameters_into_next_stage() {
        struct Capture(Vec<PolicyParams>);
        impl TrainObserver for Capture {
            fn on_stage_end(&mut self, _s: &StageSummary, p: &PolicyParams) -> Result<()> {
                self.0.push(p.clone());
                Ok(())
            }
        }
        let cfg = quick_cfg();
        let schedule = CurriculumSchedule::growing(2, 2, 2, LaneChangeConfig::default());
        let mut capture = Capture(Vec::new());
        let result = run_curriculum(&schedule, &cfg, &quick_env(), 3, &mut capture).unwrap();
        assert_eq!(result.stages.len(), 2);
        assert_eq!(result.log.len(), 4);
        assert_eq!(result.log[2].n_av, 2);

        let env2 = schedule.stage_env(&quick_env(), 1);
        let trainer = Trainer::with_params(env2, cfg, 3, capture.0[0].clone()).unwrap();
        assert_eq!(result.stages[1].initial_eval_m, trainer.evaluate().unwrap());
    }

    #[test]
    fn curriculum_is_reproducible() {
        let cfg = quick_cfg();
        let schedule = CurriculumSchedule::growing(1, 0, 2, LaneChangeConfig::default());
        let a = run_curriculum(&schedule, &cfg, &quick_env(), 5, &mut ()).unwrap();
        let b = run_curriculum(&schedule, &cfg, &quick_env(), 5, &mut ()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
        let mut csv = Vec::new();
        a.write_log(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("iteration,stage,n_av,mean_return,metric_m,kl,step_accepted\n1,0,1,"));
    }

    #[test]
    fn human_evaluation_matches_all_human_ring() {
        let env = quick_env();
        let (ep, _) = run_eval_episode(None, &env, 8, false).unwrap();
        let twin = env.human_twin();
        let (mut ring, _) = RingEnv::reset(twin, 8).unwrap();
        while !ring.is_done() {
            ring.step(&[]).unwrap();
        }
        assert_eq!(ep.metric_m, ring.metric_so_far().unwrap());
        assert_eq!(ep.circumference, ring.state().circumference);
    }
}
