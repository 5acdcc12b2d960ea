//! Trust-region policy optimisation for the shared ring-road policy.
//!
//! One iteration collects a joint batch over all agents, fits the value
//! baseline, estimates GAE advantages and takes a natural-gradient step whose
//! size is fixed by the KL radius, followed by a backtracking line search.

mod curriculum;
mod rollout;
mod value;

pub use curriculum::{
    evaluate_policy, run_curriculum, run_eval_episode, CurriculumResult, CurriculumSchedule, EvalEpisode,
    IterationLog, Stage, StageSummary, TrainObserver, Trainer, TRAINING_LOG_HEADER,
};
pub use rollout::{
    collect_rollouts, compute_advantages, run_stochastic_episode, EpisodeSummary, RolloutBatch, SurrogateData,
    Trajectory,
};
pub use value::{ValueFnConfig, ValueFunction};

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{gaussian_log_density, mean_kl, PolicyParams, DEFAULT_HIDDEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub kl_step: f64,
    pub cg_iters: usize,
    pub cg_damping: f64,
    pub backtrack_ratio: f64,
    pub max_backtracks: usize,
    /// Agent-steps gathered per iteration.
    pub batch_env_steps: usize,
    pub policy_hidden: Vec<usize>,
    pub value_fn: ValueFnConfig,
    /// Deterministic evaluation every this many iterations (0 disables).
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            kl_step: 0.01,
            cg_iters: 10,
            cg_damping: 0.1,
            backtrack_ratio: 0.8,
            max_backtracks: 15,
            batch_env_steps: 20_000,
            policy_hidden: DEFAULT_HIDDEN.to_vec(),
            value_fn: ValueFnConfig::default(),
            eval_every: 10,
            eval_episodes: 5,
            seeds: vec![0],
        }
    }
}

impl TrainConfig {
    /// `horizon_agent_steps` is the agent-step count of one episode.
    pub fn validate(&self, horizon_agent_steps: usize) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("train.gamma must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("train.gae_lambda must be in [0, 1]");
        }
        if !(self.kl_step > 0.0) {
            return bad("train.kl_step must be > 0");
        }
        if !(self.backtrack_ratio > 0.0 && self.backtrack_ratio < 1.0) {
            return bad("train.backtrack_ratio must be in (0, 1)");
        }
        if !(self.cg_damping >= 0.0) || self.cg_iters == 0 {
            return bad("train.cg_iters must be >= 1 and train.cg_damping >= 0");
        }
        if self.batch_env_steps < horizon_agent_steps {
            return bad("train.batch_env_steps must cover at least one episode");
        }
        if self.value_fn.minibatch == 0 {
            return bad("train.value_fn.minibatch must be >= 1");
        }
        Ok(())
    }
}

/// `mean_i exp(log π(a_i|s_i) − log π_old(a_i|s_i)) · A_i`.
pub fn surrogate(params: &PolicyParams, data: &SurrogateData) -> Result<f64> {
    let means = params.means(data.obs.view())?;
    let ls = params.log_std();
    let n = data.actions.len() as f64;
    let total: f64 = (0..data.actions.len())
        .map(|i| {
            let lp = gaussian_log_density(data.actions[i], means[i], ls);
            (lp - data.old_log_probs[i]).exp() * data.advantages[i]
        })
        .sum();
    Ok(total / n)
}

/// Exact gradient of [`surrogate`] with respect to every parameter.
pub fn surrogate_grad(params: &PolicyParams, data: &SurrogateData) -> Result<Vec<f64>> {
    let net = params.shape().bind(&params.theta()[..params.len() - 1]);
    let cache = net.forward(data.obs.view());
    let ls = params.log_std();
    let inv_var = (-2.0 * ls).exp();
    let n = data.actions.len() as f64;
    let mut dmean = Array1::zeros(data.actions.len());
    let mut dls = 0.0;
    for i in 0..data.actions.len() {
        let mu = cache.output[i];
        let diff = data.actions[i] - mu;
        let lp = gaussian_log_density(data.actions[i], mu, ls);
        let w = (lp - data.old_log_probs[i]).exp() * data.advantages[i] / n;
        dmean[i] = w * diff * inv_var;
        dls += w * (diff * diff * inv_var - 1.0);
    }
    let mut grad = vec![0.0; params.len()];
    let last = grad.len() - 1;
    net.backward(&cache, dmean.view(), &mut grad[..last]);
    grad[last] = dls;
    Ok(grad)
}

/// Damped Fisher-vector products of the mean-KL Hessian at fixed parameters.
pub struct FisherOperator<'a> {
    params: &'a PolicyParams,
    cache: crate::mlp::ForwardCache,
    damping: f64,
}

impl<'a> FisherOperator<'a> {
    pub fn new(params: &'a PolicyParams, obs: ndarray::ArrayView2<f64>, damping: f64) -> Self {
        let net = params.shape().bind(&params.theta()[..params.len() - 1]);
        Self { params, cache: net.forward(obs), damping }
    }

    /// `(F + damping·I)·v`, where `F = mean_i J_iᵀJ_i/σ²` on the mean
    /// parameters and `2` on the log standard deviation.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let p = self.params;
        let last = p.len() - 1;
        let net = p.shape().bind(&p.theta()[..last]);
        let jv = net.jvp(&self.cache, &v[..last]);
        let scale = (-2.0 * p.log_std()).exp() / jv.len() as f64;
        let weighted = jv.mapv(|x| x * scale);
        let mut out = vec![0.0; p.len()];
        net.backward(&self.cache, weighted.view(), &mut out[..last]);
        out[last] = 2.0 * v[last];
        for (o, x) in out.iter_mut().zip(v) {
            *o += self.damping * x;
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradient for `A x = b` with `A` symmetric positive definite,
/// stopping early once `‖r‖² < residual_tol`.
pub fn conjugate_gradient(
    mut apply: impl FnMut(&[f64]) -> Vec<f64>,
    b: &[f64],
    iters: usize,
    residual_tol: f64,
) -> Vec<f64> {
    let mut x = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut p = b.to_vec();
    let mut rr = dot(&r, &r);
    for _ in 0..iters {
        if rr < residual_tol {
            break;
        }
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rr / pap;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub accepted: bool,
    /// Measured mean KL of the returned parameters from the old ones.
    pub kl: f64,
    pub improvement: f64,
    pub backtracks: usize,
    pub grad_norm: f64,
}

impl UpdateStats {
    fn rejected(grad_norm: f64) -> Self {
        Self { accepted: false, kl: 0.0, improvement: 0.0, backtracks: 0, grad_norm }
    }
}

/// One natural-gradient step with backtracking. Returns the old parameters
/// unchanged when no candidate improves the surrogate inside the trust region
/// or when the gradient is degenerate.
pub fn trpo_update(params: &PolicyParams, data: &SurrogateData, cfg: &TrainConfig) -> Result<(PolicyParams, UpdateStats)> {
    if data.actions.is_empty() {
        return Err(Error::Empty("surrogate batch"));
    }
    let grad = surrogate_grad(params, data)?;
    let grad_norm = dot(&grad, &grad).sqrt();
    if !grad_norm.is_finite() {
        log::warn!("non-finite policy gradient; keeping parameters");
        return Ok((params.clone(), UpdateStats::rejected(grad_norm)));
    }
    if grad_norm == 0.0 {
        return Ok((params.clone(), UpdateStats::rejected(0.0)));
    }
    let fisher = FisherOperator::new(params, data.obs.view(), cfg.cg_damping);
    let direction = conjugate_gradient(|v| fisher.apply(v), &grad, cfg.cg_iters, 1e-10);
    let shs = dot(&direction, &fisher.apply(&direction));
    if !(shs > 0.0 && shs.is_finite()) {
        log::warn!("degenerate search direction; keeping parameters");
        return Ok((params.clone(), UpdateStats::rejected(grad_norm)));
    }
    let step_scale = (2.0 * cfg.kl_step / shs).sqrt();
    let base = surrogate(params, data)?;
    let old_means = params.means(data.obs.view())?;
    let old_ls = params.log_std();

    let mut fraction = 1.0;
    for k in 0..cfg.max_backtracks {
        let theta: Vec<f64> = params
            .theta()
            .iter()
            .zip(&direction)
            .map(|(t, d)| t + fraction * step_scale * d)
            .collect();
        let candidate = params.with_theta(theta);
        if candidate.is_finite() {
            let improvement = surrogate(&candidate, data)? - base;
            let new_means = candidate.means(data.obs.view())?;
            let kl = mean_kl(&old_means, old_ls, &new_means, candidate.log_std());
            if improvement > 0.0 && kl <= cfg.kl_step {
                let stats = UpdateStats { accepted: true, kl, improvement, backtracks: k, grad_norm };
                return Ok((candidate, stats));
            }
        }
        fraction *= cfg.backtrack_ratio;
    }
    log::debug!("line search exhausted after {} candidates", cfg.max_backtracks);
    Ok((params.clone(), UpdateStats::rejected(grad_norm)))
}

/// Advantage-weighted mean of `log π` gradients; the surrogate gradient at
/// the sampling parameters.
pub fn policy_gradient(params: &PolicyParams, data: &SurrogateData) -> Result<Vec<f64>> {
    let n = data.actions.len() as f64;
    let mut g = vec![0.0; params.len()];
    for i in 0..data.actions.len() {
        let obs: ArrayView1<f64> = data.obs.row(i);
        let gi = params.grad_log_prob(obs.as_slice().expect("standard layout"), data.actions[i])?;
        for (a, b) in g.iter_mut().zip(gi) {
            *a += data.advantages[i] * b / n;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::MlpLayout;
    use crate::rng;
    use ndarray::Array2;
    use rand::Rng;

    fn tiny_data(params: &PolicyParams, n: usize, seed: u64) -> SurrogateData {
        let mut r = rng::seeded(seed);
        let d = params.obs_dim();
        let obs = Array2::from_shape_fn((n, d), |_| r.random_range(-2.0..2.0));
        let mut actions = Array1::zeros(n);
        let mut old = Array1::zeros(n);
        for i in 0..n {
            let s = params.sample(obs.row(i).as_slice().unwrap(), &mut r).unwrap();
            actions[i] = s.action;
            old[i] = s.log_prob;
        }
        let advantages = Array1::from_shape_fn(n, |_| r.random_range(-1.5..1.5));
        SurrogateData { obs, actions, old_log_probs: old, advantages }
    }

    fn spd(n: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::seeded(seed);
        let m = Array2::from_shape_fn((n, n), |_| r.random_range(-1.0..1.0));
        m.t().dot(&m) + Array2::<f64>::eye(n) * 0.5
    }

    #[test]
    fn cg_solves_hand_built_system() {
        let a = ndarray::arr2(&[
            [4.0, 1.0, 0.0, 0.0, 0.5],
            [1.0, 3.0, 0.2, 0.0, 0.0],
            [0.0, 0.2, 5.0, 1.0, 0.0],
            [0.0, 0.0, 1.0, 2.0, 0.3],
            [0.5, 0.0, 0.0, 0.3, 6.0],
        ]);
        let b = [1.0, -2.0, 0.5, 3.0, -1.0];
        let x = conjugate_gradient(|v| a.dot(&Array1::from(v.to_vec())).to_vec(), &b, 10, 1e-30);
        let r = &a.dot(&Array1::from(x)) - &Array1::from(b.to_vec());
        assert!(r.dot(&r).sqrt() < 1e-8);
    }

    #[test]
    fn cg_random_spd_relative_residual() {
        for (k, n) in [2usize, 7, 20, 50].into_iter().enumerate() {
            let a = spd(n, k as u64);
            let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
            let x = conjugate_gradient(|v| a.dot(&Array1::from(v.to_vec())).to_vec(), &b, 4 * n, 1e-30);
            let bv = Array1::from(b);
            let r = &a.dot(&Array1::from(x)) - &bv;
            assert!(r.dot(&r).sqrt() / bv.dot(&bv).sqrt() < 1e-8, "dim {n}");
        }
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let layout = MlpLayout::new(3, &[4]);
        let mut r = rng::seeded(8);
        let old = PolicyParams::init(layout, &mut r);
        let data = tiny_data(&old, 32, 2);
        let theta: Vec<f64> = old.theta().iter().map(|t| t + r.random_range(-0.2..0.2)).collect();
        let p = old.with_theta(theta);
        let g = surrogate_grad(&p, &data).unwrap();
        let h = 1e-5;
        for k in 0..p.len() {
            let mut plus = p.theta().to_vec();
            let mut minus = p.theta().to_vec();
            plus[k] += h;
            minus[k] -= h;
            let fd = (surrogate(&p.with_theta(plus), &data).unwrap() - surrogate(&p.with_theta(minus), &data).unwrap())
                / (2.0 * h);
            let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-8);
            assert!(rel < 1e-4 || (fd - g[k]).abs() < 1e-10, "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn surrogate_gradient_at_sampling_point_is_policy_gradient() {
        let layout = MlpLayout::new(3, &[5, 4]);
        let p = PolicyParams::init(layout, &mut rng::seeded(4));
        let data = tiny_data(&p, 20, 6);
        let a = surrogate_grad(&p, &data).unwrap();
        let b = policy_gradient(&p, &data).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fisher_product_matches_kl_hessian() {
        let layout = MlpLayout::new(3, &[4]);
        let mut r = rng::seeded(12);
        let p = PolicyParams::init(layout, &mut r);
        let p = p.with_theta(p.theta().iter().map(|t| t + r.random_range(-0.3..0.3)).collect());
        let data = tiny_data(&p, 16, 3);
        let v: Vec<f64> = (0..p.len()).map(|_| r.random_range(-1.0..1.0)).collect();
        let fv = FisherOperator::new(&p, data.obs.view(), 0.0).apply(&v);
        // second directional derivative of KL(p ‖ p + εv) at ε = 0
        let h = 1e-4;
        let kl_at = |eps: f64| {
            let q = p.with_theta(p.theta().iter().zip(&v).map(|(t, d)| t + eps * d).collect());
            crate::policy::kl(&p, &q, data.obs.view()).unwrap()
        };
        let vfv_fd = (kl_at(h) - 2.0 * kl_at(0.0) + kl_at(-h)) / (h * h);
        let vfv = dot(&v, &fv);
        assert!((vfv - vfv_fd).abs() / vfv.abs() < 1e-4, "{vfv} vs {vfv_fd}");
    }

    #[test]
    fn zero_advantages_leave_params_unchanged() {
        let p = PolicyParams::init(MlpLayout::new(3, &[4]), &mut rng::seeded(1));
        let mut data = tiny_data(&p, 10, 1);
        data.advantages.fill(0.0);
        let (q, stats) = trpo_update(&p, &data, &TrainConfig::default()).unwrap();
        assert_eq!(p, q);
        assert!(!stats.accepted);
    }

    #[test]
    fn accepted_updates_respect_trust_region_and_improve() {
        let cfg = TrainConfig::default();
        let mut r = rng::seeded(30);
        let mut p = PolicyParams::init(MlpLayout::new(3, &[8, 8]), &mut r);
        let mut accepted = 0;
        for it in 0..30 {
            let data = tiny_data(&p, 64, 100 + it);
            let before = surrogate(&p, &data).unwrap();
            let (q, stats) = trpo_update(&p, &data, &cfg).unwrap();
            if stats.accepted {
                accepted += 1;
                assert!(stats.kl <= cfg.kl_step);
                assert!(crate::policy::kl(&p, &q, data.obs.view()).unwrap() <= 1.5 * cfg.kl_step);
                assert!(surrogate(&q, &data).unwrap() > before);
            } else {
                assert_eq!(p, q);
            }
            p = q;
        }
        assert!(accepted > 20);
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig::default();
        assert!(cfg.validate(3000).is_ok());
        assert!(cfg.validate(30_000).is_err());
        assert!(TrainConfig { gamma: 1.5, ..cfg.clone() }.validate(3000).is_err());
        assert!(TrainConfig { kl_step: 0.0, ..cfg }.validate(3000).is_err());
    }
}
