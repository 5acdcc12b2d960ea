//! State-value baseline: a small MLP over the observation plus a normalised
//! time feature, regressed onto discounted returns with Adam.

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mlp::{MlpLayout, MlpShape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValueFnConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch: usize,
}

impl Default for ValueFnConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], learning_rate: 1e-3, epochs: 5, minibatch: 256 }
    }
}

#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in theta.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ValueFunction {
    shape: MlpShape,
    theta: Vec<f64>,
    adam: Adam,
    cfg: ValueFnConfig,
}

impl ValueFunction {
    /// `input_dim` includes the time feature.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, cfg: ValueFnConfig, rng: &mut R) -> Self {
        let shape = MlpShape::new(MlpLayout::new(input_dim, &cfg.hidden));
        let mut theta = vec![0.0; shape.param_count()];
        let last = shape.layer_dims().len() - 1;
        for (l, (&(n_in, n_out), &(w, _))) in shape.layer_dims().iter().zip(shape.layer_offsets()).enumerate() {
            if l == last {
                continue;
            }
            let limit = (6.0 / n_in as f64).sqrt();
            for p in &mut theta[w..w + n_in * n_out] {
                *p = rng.random_range(-limit..limit);
            }
        }
        let adam = Adam::new(theta.len());
        Self { shape, theta, adam, cfg }
    }

    pub fn input_dim(&self) -> usize {
        self.shape.layout.input
    }

    pub fn predict(&self, inputs: ArrayView2<f64>) -> Array1<f64> {
        self.shape.bind(&self.theta).forward(inputs).output
    }

    /// Mean squared error against `targets`.
    pub fn loss(&self, inputs: ArrayView2<f64>, targets: ArrayView1<f64>) -> f64 {
        let pred = self.predict(inputs);
        (&pred - &targets).mapv(|e| e * e).mean().unwrap_or(0.0)
    }

    /// Shuffled minibatch Adam epochs on the MSE loss.
    pub fn fit<R: Rng + ?Sized>(&mut self, inputs: ArrayView2<f64>, targets: ArrayView1<f64>, rng: &mut R) {
        let n = inputs.nrows();
        if n == 0 {
            return;
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut grad = vec![0.0; self.theta.len()];
        for _ in 0..self.cfg.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(self.cfg.minibatch.max(1)) {
                let x = inputs.select(ndarray::Axis(0), chunk);
                let y = targets.select(ndarray::Axis(0), chunk);
                let net = self.shape.bind(&self.theta);
                let cache = net.forward(x.view());
                let scale = 2.0 / chunk.len() as f64;
                let dout = (&cache.output - &y).mapv(|e| scale * e);
                grad.iter_mut().for_each(|g| *g = 0.0);
                net.backward(&cache, dout.view(), &mut grad);
                self.adam.step(&mut self.theta, &grad, self.cfg.learning_rate);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::Array2;

    #[test]
    fn fitting_reduces_loss() {
        let mut r = rng::seeded(11);
        let x = Array2::from_shape_fn((512, 3), |_| r.random_range(-1.0..1.0));
        let y: Array1<f64> = x.rows().into_iter().map(|row| 2.0 * row[0] - row[1] * row[2] + 0.5).collect();
        let cfg = ValueFnConfig { epochs: 40, minibatch: 64, ..ValueFnConfig::default() };
        let mut vf = ValueFunction::new(3, cfg, &mut r);
        let before = vf.loss(x.view(), y.view());
        vf.fit(x.view(), y.view(), &mut r);
        let after = vf.loss(x.view(), y.view());
        assert!(after < 0.05 * before, "{before} -> {after}");
    }

    #[test]
    fn fresh_value_function_predicts_zero() {
        let mut r = rng::seeded(1);
        let vf = ValueFunction::new(4, ValueFnConfig::default(), &mut r);
        let x = Array2::from_elem((3, 4), 1.5);
        assert!(vf.predict(x.view()).iter().all(|&v| v == 0.0));
    }
}
