//! Shared diagonal-Gaussian MLP policy.
//!
//! The mean acceleration comes from a ReLU MLP over the stacked observation;
//! the log standard deviation is a single state-independent parameter stored
//! as the last entry of the flat parameter vector. All agents query the same
//! [`PolicyParams`].

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::mlp::{MlpLayout, MlpShape};

pub const CHECKPOINT_MAGIC: &str = "ringflow-policy v1";
pub const DEFAULT_HIDDEN: [usize; 3] = [64, 64, 64];

#[derive(Debug, Clone, PartialEq)]
pub struct ActionSample {
    /// Acceleration command before clipping (m/s²).
    pub action: f64,
    pub log_prob: f64,
}

/// Flat parameters `[mlp weights and biases…, log_std]` plus their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    shape: MlpShape,
    theta: Vec<f64>,
}

/// `log N(x; mean, exp(log_std)²)`.
pub fn gaussian_log_density(x: f64, mean: f64, log_std: f64) -> f64 {
    let z = (x - mean) * (-log_std).exp();
    -0.5 * z * z - log_std - 0.5 * (2.0 * PI).ln()
}

/// `KL(N(μ₀, σ₀²) ‖ N(μ₁, σ₁²))` for one dimension.
pub fn gaussian_kl(mean_old: f64, log_std_old: f64, mean_new: f64, log_std_new: f64) -> f64 {
    let var_old = (2.0 * log_std_old).exp();
    let var_new = (2.0 * log_std_new).exp();
    let dm = mean_old - mean_new;
    log_std_new - log_std_old + (var_old + dm * dm) / (2.0 * var_new) - 0.5
}

impl PolicyParams {
    pub fn zeros(layout: MlpLayout) -> Self {
        let shape = MlpShape::new(layout);
        let theta = vec![0.0; shape.param_count() + 1];
        Self { shape, theta }
    }

    /// Uniform fan-in initialisation (`U(±sqrt(6/n_in))`), zero biases, output
    /// weights shrunk by 100 so initial commands are near zero, and σ = 1.
    pub fn init<R: Rng + ?Sized>(layout: MlpLayout, rng: &mut R) -> Self {
        let mut params = Self::zeros(layout);
        let dims = params.shape.layer_dims().to_vec();
        let offsets = params.shape.layer_offsets().to_vec();
        let last = dims.len() - 1;
        for (l, (&(n_in, n_out), &(w_off, _))) in dims.iter().zip(&offsets).enumerate() {
            let limit = (6.0 / n_in as f64).sqrt();
            let scale = if l == last { 0.01 } else { 1.0 };
            for w in &mut params.theta[w_off..w_off + n_in * n_out] {
                *w = scale * rng.random_range(-limit..limit);
            }
        }
        params
    }

    pub fn from_theta(layout: MlpLayout, theta: Vec<f64>) -> Result<Self> {
        let shape = MlpShape::new(layout);
        let expected = shape.param_count() + 1;
        if theta.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: theta.len() });
        }
        Ok(Self { shape, theta })
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Self {
        assert_eq!(theta.len(), self.theta.len(), "parameter vector length");
        Self { shape: self.shape.clone(), theta }
    }

    pub fn layout(&self) -> &MlpLayout {
        &self.shape.layout
    }

    pub fn shape(&self) -> &MlpShape {
        &self.shape
    }

    pub fn obs_dim(&self) -> usize {
        self.shape.layout.input
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn log_std(&self) -> f64 {
        *self.theta.last().expect("log_std entry")
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }

    fn mlp_params(&self) -> &[f64] {
        &self.theta[..self.theta.len() - 1]
    }

    fn check_obs(&self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.obs_dim() {
            return Err(Error::DimensionMismatch { expected: self.obs_dim(), got: obs.len() });
        }
        Ok(())
    }

    fn row(obs: &[f64]) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((1, obs.len()), obs).expect("single row")
    }

    /// `(mean, log_std)` for one observation.
    pub fn forward(&self, obs: &[f64]) -> Result<(f64, f64)> {
        self.check_obs(obs)?;
        let out = self.shape.bind(self.mlp_params()).forward(Self::row(obs)).output;
        Ok((out[0], self.log_std()))
    }

    /// Means for a batch of observations (one per row).
    pub fn means(&self, obs: ArrayView2<f64>) -> Result<Array1<f64>> {
        if obs.ncols() != self.obs_dim() {
            return Err(Error::DimensionMismatch { expected: self.obs_dim(), got: obs.ncols() });
        }
        Ok(self.shape.bind(self.mlp_params()).forward(obs).output)
    }

    pub fn sample<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<ActionSample> {
        let (mean, log_std) = self.forward(obs)?;
        let z: f64 = StandardNormal.sample(rng);
        let action = mean + log_std.exp() * z;
        Ok(ActionSample { action, log_prob: gaussian_log_density(action, mean, log_std) })
    }

    pub fn log_prob(&self, obs: &[f64], action: f64) -> Result<f64> {
        let (mean, log_std) = self.forward(obs)?;
        Ok(gaussian_log_density(action, mean, log_std))
    }

    /// Differential entropy `½·ln(2πe) + log σ`.
    pub fn entropy(&self) -> f64 {
        0.5 * (2.0 * PI * std::f64::consts::E).ln() + self.log_std()
    }

    /// Exact gradient of `log π(action | obs)` with respect to every parameter.
    pub fn grad_log_prob(&self, obs: &[f64], action: f64) -> Result<Vec<f64>> {
        self.check_obs(obs)?;
        let net = self.shape.bind(self.mlp_params());
        let cache = net.forward(Self::row(obs));
        let log_std = self.log_std();
        let inv_var = (-2.0 * log_std).exp();
        let diff = action - cache.output[0];
        let mut grad = vec![0.0; self.theta.len()];
        let dmean = Array1::from_elem(1, diff * inv_var);
        let n = grad.len();
        net.backward(&cache, dmean.view(), &mut grad[..n - 1]);
        grad[n - 1] = diff * diff * inv_var - 1.0;
        Ok(grad)
    }

    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{CHECKPOINT_MAGIC}")?;
        writeln!(out, "{}", architecture_line(self.layout()))?;
        for v in &self.theta {
            writeln!(out, "{v}")?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("missing {what}")))?
                .map_err(Error::from)
        };
        let magic = next("header")?;
        if magic.trim() != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("line 1: expected {CHECKPOINT_MAGIC:?}, got {magic:?}")));
        }
        let layout = parse_architecture(next("architecture line")?.trim())
            .map_err(|e| Error::Checkpoint(format!("line 2: {e}")))?;
        let mut theta = Vec::new();
        for (k, line) in lines.enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let v: f64 = line
                .parse()
                .map_err(|_| Error::Checkpoint(format!("line {}: not a number: {line:?}", k + 3)))?;
            theta.push(v);
        }
        Self::from_theta(layout, theta)
            .map_err(|e| Error::Checkpoint(format!("parameter count does not match architecture: {e}")))
    }
}

/// `obs=15 hidden=64,64,64 act=1`.
pub fn architecture_line(layout: &MlpLayout) -> String {
    let hidden: Vec<String> = layout.hidden.iter().map(|h| h.to_string()).collect();
    format!("obs={} hidden={} act=1", layout.input, hidden.join(","))
}

pub fn parse_architecture(line: &str) -> std::result::Result<MlpLayout, String> {
    let mut obs = None;
    let mut hidden = None;
    let mut act = None;
    for token in line.split_whitespace() {
        let (key, value) = token.split_once('=').ok_or_else(|| format!("malformed token {token:?}"))?;
        match key {
            "obs" => obs = Some(value.parse::<usize>().map_err(|e| format!("obs: {e}"))?),
            "hidden" => {
                let sizes = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|h| h.parse::<usize>().map_err(|e| format!("hidden: {e}")))
                        .collect::<std::result::Result<Vec<_>, _>>()?
                };
                hidden = Some(sizes);
            }
            "act" => act = Some(value.parse::<usize>().map_err(|e| format!("act: {e}"))?),
            other => return Err(format!("unknown key {other:?}")),
        }
    }
    if act != Some(1) {
        return Err("only act=1 is supported".into());
    }
    Ok(MlpLayout {
        input: obs.ok_or("missing obs")?,
        hidden: hidden.ok_or("missing hidden")?,
    })
}

/// Mean `KL(π_old ‖ π_new)` over a batch of observations.
pub fn kl(old: &PolicyParams, new: &PolicyParams, obs: ArrayView2<f64>) -> Result<f64> {
    if obs.nrows() == 0 {
        return Err(Error::Empty("observation batch"));
    }
    let mu_old = old.means(obs)?;
    let mu_new = new.means(obs)?;
    Ok(mean_kl(&mu_old, old.log_std(), &mu_new, new.log_std()))
}

pub(crate) fn mean_kl(mu_old: &Array1<f64>, ls_old: f64, mu_new: &Array1<f64>, ls_new: f64) -> f64 {
    let total: f64 = mu_old.iter().zip(mu_new).map(|(&a, &b)| gaussian_kl(a, ls_old, b, ls_new)).sum();
    total / mu_old.len() as f64
}

/// Stack observations into a row-major matrix.
pub fn stack_observations<'a>(obs: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Array2<f64> {
    let flat: Vec<f64> = obs.into_iter().flat_map(|o| o.iter().copied()).collect();
    let rows = flat.len() / dim;
    Array2::from_shape_vec((rows, dim), flat).expect("observations share a dimension")
}
