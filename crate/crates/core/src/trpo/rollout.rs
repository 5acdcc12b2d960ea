//! Joint rollout collection across agents and GAE advantage estimation.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::ring_env::{RingEnv, RingEnvConfig};
use crate::rng;

use super::value::ValueFunction;
use super::TrainConfig;

/// One agent's stream within one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Row-major `len × obs_dim`.
    pub observations: Vec<f64>,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Step index divided by the horizon, fed to the value baseline.
    pub times: Vec<f64>,
}

impl Trajectory {
    fn new() -> Self {
        Self { observations: Vec::new(), actions: Vec::new(), log_probs: Vec::new(), rewards: Vec::new(), times: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub seed: u64,
    pub steps: usize,
    pub metric_m: f64,
    /// Undiscounted return averaged over agents.
    pub mean_return: f64,
    pub collided: bool,
}

/// Trajectories of every agent of every episode gathered for one update.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub obs_dim: usize,
    pub trajectories: Vec<Trajectory>,
    pub episodes: Vec<EpisodeSummary>,
    /// Flattened in trajectory order; filled by [`compute_advantages`].
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Flat arrays consumed by the policy update.
#[derive(Debug, Clone)]
pub struct SurrogateData {
    pub obs: Array2<f64>,
    pub actions: Array1<f64>,
    pub old_log_probs: Array1<f64>,
    pub advantages: Array1<f64>,
}

impl RolloutBatch {
    pub fn agent_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn mean_return(&self) -> f64 {
        mean(self.episodes.iter().map(|e| e.mean_return))
    }

    pub fn mean_metric(&self) -> f64 {
        mean(self.episodes.iter().map(|e| e.metric_m))
    }

    pub fn observations(&self) -> Array2<f64> {
        let flat: Vec<f64> = self.trajectories.iter().flat_map(|t| t.observations.iter().copied()).collect();
        Array2::from_shape_vec((self.agent_steps(), self.obs_dim), flat).expect("aligned observations")
    }

    /// Observation rows with the time feature appended.
    pub fn value_inputs(&self) -> Array2<f64> {
        let d = self.obs_dim;
        let mut out = Array2::zeros((self.agent_steps(), d + 1));
        let mut row = 0;
        for t in &self.trajectories {
            for (k, obs) in t.observations.chunks(d).enumerate() {
                let mut r = out.row_mut(row);
                for (j, v) in obs.iter().enumerate() {
                    r[j] = *v;
                }
                r[d] = t.times[k];
                row += 1;
            }
        }
        out
    }

    pub fn surrogate_data(&self) -> Result<SurrogateData> {
        if self.advantages.len() != self.agent_steps() {
            return Err(Error::InvalidConfig("advantages have not been computed for this batch".into()));
        }
        let flat = |f: fn(&Trajectory) -> &Vec<f64>| -> Array1<f64> {
            self.trajectories.iter().flat_map(|t| f(t).iter().copied()).collect()
        };
        Ok(SurrogateData {
            obs: self.observations(),
            actions: flat(|t| &t.actions),
            old_log_probs: flat(|t| &t.log_probs),
            advantages: Array1::from(self.advantages.clone()),
        })
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Run one stochastic episode under `params`, one trajectory per agent.
pub fn run_stochastic_episode(
    env_cfg: &RingEnvConfig,
    params: &PolicyParams,
    env_seed: u64,
    action_seed: u64,
) -> Result<(Vec<Trajectory>, EpisodeSummary)> {
    let (mut env, mut obs) = RingEnv::reset(env_cfg.clone(), env_seed)?;
    let mut action_rng = rng::seeded(action_seed);
    let n = env.n_agents();
    let horizon = env_cfg.horizon_steps as f64;
    let mut trajs: Vec<Trajectory> = (0..n).map(|_| Trajectory::new()).collect();
    let mut collided = false;
    while !env.is_done() {
        let time = env.steps_taken() as f64 / horizon;
        let mut actions = Vec::with_capacity(n);
        for (traj, o) in trajs.iter_mut().zip(&obs) {
            let s = params.sample(o.as_slice(), &mut action_rng)?;
            traj.observations.extend_from_slice(o.as_slice());
            traj.actions.push(s.action);
            traj.log_probs.push(s.log_prob);
            traj.times.push(time);
            actions.push(s.action);
        }
        let step = env.step(&actions)?;
        for (traj, r) in trajs.iter_mut().zip(&step.rewards) {
            traj.rewards.push(*r);
        }
        collided |= step.collided;
        obs = step.observations;
    }
    let mean_return = mean(trajs.iter().map(|t| t.rewards.iter().sum::<f64>()));
    let summary = EpisodeSummary {
        seed: env_seed,
        steps: env.steps_taken(),
        metric_m: env.metric_so_far().unwrap_or(f64::NAN),
        mean_return,
        collided,
    };
    Ok((trajs, summary))
}

/// Run episodes until at least `cfg.batch_env_steps` agent-steps are gathered.
/// Episode `e` uses environment seed `derive_seed(seed, "env", e)` and action
/// stream `derive_seed(seed, "actions", e)`. Episodes that raise an
/// environment error are dropped.
pub fn collect_rollouts(
    env_cfg: &RingEnvConfig,
    params: &PolicyParams,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<RolloutBatch> {
    let mut batch = RolloutBatch {
        obs_dim: env_cfg.obs_dim(),
        trajectories: Vec::new(),
        episodes: Vec::new(),
        advantages: Vec::new(),
        returns: Vec::new(),
    };
    let mut failures = 0;
    let mut episode = 0u64;
    while batch.agent_steps() < cfg.batch_env_steps {
        let env_seed = rng::derive_seed(seed, "env", episode);
        let action_seed = rng::derive_seed(seed, "actions", episode);
        episode += 1;
        match run_stochastic_episode(env_cfg, params, env_seed, action_seed) {
            Ok((trajs, summary)) => {
                if trajs.iter().all(Trajectory::is_empty) {
                    return Err(Error::Empty("episode produced no agent steps"));
                }
                batch.trajectories.extend(trajs);
                batch.episodes.push(summary);
            }
            Err(err @ Error::InvalidConfig(_)) => return Err(err),
            Err(err) => {
                log::warn!("discarding episode with env seed {env_seed}: {err}");
                failures += 1;
                if failures >= 10 {
                    return Err(err);
                }
            }
        }
    }
    Ok(batch)
}

/// GAE(γ, λ) per trajectory (the final step bootstraps from zero), discounted
/// reward-to-go as value targets, then batch-wide advantage normalisation.
pub fn compute_advantages(batch: &mut RolloutBatch, value_fn: Option<&ValueFunction>, cfg: &TrainConfig) {
    let values: Vec<f64> = match value_fn {
        Some(vf) => vf.predict(batch.value_inputs().view()).to_vec(),
        None => vec![0.0; batch.agent_steps()],
    };
    let (gamma, lambda) = (cfg.gamma, cfg.gae_lambda);
    let mut advantages = Vec::with_capacity(values.len());
    let mut returns = Vec::with_capacity(values.len());
    let mut offset = 0;
    for traj in &batch.trajectories {
        let len = traj.len();
        let v = &values[offset..offset + len];
        let mut adv = vec![0.0; len];
        let mut ret = vec![0.0; len];
        let (mut gae, mut running) = (0.0, 0.0);
        for t in (0..len).rev() {
            let next = if t + 1 < len { v[t + 1] } else { 0.0 };
            let delta = traj.rewards[t] + gamma * next - v[t];
            gae = delta + gamma * lambda * gae;
            running = traj.rewards[t] + gamma * running;
            adv[t] = gae;
            ret[t] = running;
        }
        advantages.extend(adv);
        returns.extend(ret);
        offset += len;
    }
    normalize(&mut advantages);
    batch.advantages = advantages;
    batch.returns = returns;
}

fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for x in xs.iter_mut() {
        *x = if sd > 1e-12 { (*x - mu) / sd } else { 0.0 };
    }
}
