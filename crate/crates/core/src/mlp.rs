//! Fully-connected ReLU network over a flat parameter vector.
//!
//! Layer `l` maps `n_in → n_out` and owns `n_in·n_out` weights stored row-major
//! as an `n_in × n_out` matrix, followed by `n_out` biases. Hidden layers apply
//! ReLU; the output layer is affine with a single output.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpLayout {
    pub input: usize,
    pub hidden: Vec<usize>,
}

impl MlpLayout {
    pub fn new(input: usize, hidden: &[usize]) -> Self {
        Self { input, hidden: hidden.to_vec() }
    }

    /// `(n_in, n_out)` of every affine layer, ending with the scalar head.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input);
        dims.extend_from_slice(&self.hidden);
        dims.push(1);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Offsets of `(weights, biases)` for every layer.
    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.layers()
            .iter()
            .map(|&(i, o)| {
                let w = off;
                off += i * o;
                let b = off;
                off += o;
                (w, b)
            })
            .collect()
    }
}

/// Borrowed network: layout plus parameter slice.
#[derive(Debug, Clone, Copy)]
pub struct Mlp<'a> {
    layers: &'a [(usize, usize)],
    offsets: &'a [(usize, usize)],
    params: &'a [f64],
}

/// Precomputed shapes so hot loops don't rebuild them.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpShape {
    pub layout: MlpLayout,
    layers: Vec<(usize, usize)>,
    offsets: Vec<(usize, usize)>,
}

impl MlpShape {
    pub fn new(layout: MlpLayout) -> Self {
        let layers = layout.layers();
        let offsets = layout.offsets();
        Self { layout, layers, offsets }
    }

    pub fn param_count(&self) -> usize {
        self.layout.param_count()
    }

    pub fn bind<'a>(&'a self, params: &'a [f64]) -> Mlp<'a> {
        debug_assert!(params.len() >= self.param_count());
        Mlp { layers: &self.layers, offsets: &self.offsets, params }
    }

    /// Offset and length of the output-layer weights.
    pub fn head_weights(&self) -> (usize, usize) {
        let (i, o) = *self.layers.last().expect("at least one layer");
        (self.offsets.last().expect("at least one layer").0, i * o)
    }

    pub fn layer_dims(&self) -> &[(usize, usize)] {
        &self.layers
    }

    pub fn layer_offsets(&self) -> &[(usize, usize)] {
        &self.offsets
    }
}

/// Inputs of every layer for a batch; hidden entries are post-ReLU.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub inputs: Vec<Array2<f64>>,
    pub output: Array1<f64>,
}

impl<'a> Mlp<'a> {
    fn weights(&self, l: usize) -> ArrayView2<'a, f64> {
        let (i, o) = self.layers[l];
        let w = self.offsets[l].0;
        ArrayView2::from_shape((i, o), &self.params[w..w + i * o]).expect("layout matches params")
    }

    fn bias(&self, l: usize) -> ArrayView1<'a, f64> {
        let (_, o) = self.layers[l];
        let b = self.offsets[l].1;
        ArrayView1::from(&self.params[b..b + o])
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> ForwardCache {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for l in 0..last {
            let mut z = h.dot(&self.weights(l));
            z += &self.bias(l);
            z.mapv_inplace(|v| v.max(0.0));
            inputs.push(std::mem::replace(&mut h, z));
        }
        let mut out = h.dot(&self.weights(last));
        out += &self.bias(last);
        inputs.push(h);
        ForwardCache { inputs, output: out.index_axis_move(Axis(1), 0) }
    }

    /// `Σ_n dout[n] · ∂out[n]/∂θ`, written into `grad` (same layout as θ).
    pub fn backward(&self, cache: &ForwardCache, dout: ArrayView1<f64>, grad: &mut [f64]) {
        let n = dout.len();
        let mut delta: Array2<f64> = dout.to_owned().into_shape_with_order((n, 1)).expect("column");
        for l in (0..self.layers.len()).rev() {
            let (i, o) = self.layers[l];
            let (w_off, b_off) = self.offsets[l];
            let input = &cache.inputs[l];
            let gw = input.t().dot(&delta);
            let gw = gw.as_standard_layout();
            for (g, v) in grad[w_off..w_off + i * o].iter_mut().zip(gw.iter()) {
                *g += v;
            }
            let gb = delta.sum_axis(Axis(0));
            for (g, v) in grad[b_off..b_off + o].iter_mut().zip(gb.iter()) {
                *g += v;
            }
            if l > 0 {
                let mut prev = delta.dot(&self.weights(l).t());
                // relu'(z) = [h > 0] for the post-activation input of layer l
                prev.zip_mut_with(input, |d, &h| {
                    if h <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = prev;
            }
        }
    }

    /// Directional derivative `∂out[n]/∂θ · v` for every sample (forward mode).
    pub fn jvp(&self, cache: &ForwardCache, v: &[f64]) -> Array1<f64> {
        let tangent_net = Mlp { params: v, ..*self };
        let n = cache.output.len();
        let last = self.layers.len() - 1;
        let mut tangent: Option<Array2<f64>> = None;
        for l in 0..=last {
            let input = &cache.inputs[l];
            let mut dz = input.dot(&tangent_net.weights(l));
            dz += &tangent_net.bias(l);
            if let Some(t) = &tangent {
                dz += &t.dot(&self.weights(l));
            }
            if l < last {
                let next_input = &cache.inputs[l + 1];
                dz.zip_mut_with(next_input, |d, &h| {
                    if h <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            tangent = Some(dz);
        }
        let out = tangent.expect("at least one layer");
        debug_assert_eq!(out.dim(), (n, 1));
        out.slice_move(s![.., 0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_params(shape: &MlpShape, seed: u64) -> Vec<f64> {
        let mut r = rng::seeded(seed);
        (0..shape.param_count()).map(|_| r.random_range(-0.5..0.5)).collect()
    }

    fn random_batch(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::seeded(seed);
        Array2::from_shape_fn((n, d), |_| r.random_range(-2.0..2.0))
    }

    #[test]
    fn param_count_of_policy_net() {
        let layout = MlpLayout::new(15, &[64, 64, 64]);
        assert_eq!(layout.param_count(), (15 * 64 + 64) + 2 * (64 * 64 + 64) + (64 + 1));
    }

    #[test]
    fn backward_and_jvp_match_finite_differences() {
        let shape = MlpShape::new(MlpLayout::new(4, &[6, 5]));
        let theta = random_params(&shape, 1);
        let x = random_batch(7, 4, 2);
        let dout = Array1::from_vec((0..7).map(|k| (k as f64 - 3.0) * 0.3).collect());
        let v = random_params(&shape, 3);

        let net = shape.bind(&theta);
        let cache = net.forward(x.view());
        let mut grad = vec![0.0; theta.len()];
        net.backward(&cache, dout.view(), &mut grad);
        let jv = net.jvp(&cache, &v);

        let objective = |p: &[f64]| -> f64 { shape.bind(p).forward(x.view()).output.dot(&dout) };
        let eps = 1e-6;
        for k in 0..theta.len() {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[k] += eps;
            minus[k] -= eps;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps);
            assert!((fd - grad[k]).abs() < 1e-6, "param {k}: fd {fd} vs {}", grad[k]);
        }

        let plus: Vec<f64> = theta.iter().zip(&v).map(|(t, d)| t + eps * d).collect();
        let minus: Vec<f64> = theta.iter().zip(&v).map(|(t, d)| t - eps * d).collect();
        let out_p = shape.bind(&plus).forward(x.view()).output;
        let out_m = shape.bind(&minus).forward(x.view()).output;
        for n in 0..7 {
            let fd = (out_p[n] - out_m[n]) / (2.0 * eps);
            assert!((fd - jv[n]).abs() < 1e-6, "sample {n}: fd {fd} vs {}", jv[n]);
        }
    }
}
