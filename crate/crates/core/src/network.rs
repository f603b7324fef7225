//! Fully connected decoder with explicit forward and reverse-mode backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    /// No nonlinearity; the network collapses to a product of affine maps.
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Layer `k` stores an `out x in` row-major weight block followed by `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
    offsets: Vec<usize>,
}

/// Activations recorded by a batched forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    batch: usize,
    /// Input to each layer, `batch x sizes[k]`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // fixed four-lane summation order, independent of where the row sits in a batch
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl Mlp {
    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let mut offsets = vec![0];
        for w in sizes.windows(2) {
            let last = *offsets.last().unwrap();
            offsets.push(last + w[0] * w[1] + w[1]);
        }
        let total = *offsets.last().unwrap();
        Ok(Self { sizes: sizes.to_vec(), activation, params: vec![0.0; total], offsets })
    }

    /// Kaiming-uniform hidden weights (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`), zero biases,
    /// and an all-zero final layer so the initial output is exactly zero.
    pub fn init(sizes: &[usize], activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        let mut m = Self::zeros(sizes, activation)?;
        for k in 0..m.layers() - 1 {
            let fan_in = m.sizes[k];
            let bound = (6.0 / fan_in as f64).sqrt();
            let (w, _) = m.layer_mut(k);
            for v in w {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(m)
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `(weights, biases)` of layer `k`.
    pub fn layer(&self, k: usize) -> (&[f64], &[f64]) {
        let (i, o) = (self.sizes[k], self.sizes[k + 1]);
        let block = &self.params[self.offsets[k]..self.offsets[k + 1]];
        block.split_at(i * o)
    }

    pub fn layer_mut(&mut self, k: usize) -> (&mut [f64], &mut [f64]) {
        let (i, o) = (self.sizes[k], self.sizes[k + 1]);
        let block = &mut self.params[self.offsets[k]..self.offsets[k + 1]];
        block.split_at_mut(i * o)
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        self.forward_batch(input, 1)
    }

    /// Row-major `batch x input_dim` in, `batch x output_dim` out.
    pub fn forward_batch(&self, input: &[f64], batch: usize) -> Result<(Vec<f64>, MlpCache)> {
        if input.len() != batch * self.input_dim() {
            return Err(Error::Dimension(format!(
                "MLP expects {} inputs per row, got {} values for {batch} rows",
                self.input_dim(),
                input.len()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers());
        let mut pre = Vec::with_capacity(self.layers() - 1);
        let mut x = input.to_vec();
        for k in 0..self.layers() {
            let (n_in, n_out) = (self.sizes[k], self.sizes[k + 1]);
            let (w, b) = self.layer(k);
            let mut z = vec![0.0; batch * n_out];
            for r in 0..batch {
                let xr = &x[r * n_in..(r + 1) * n_in];
                for o in 0..n_out {
                    z[r * n_out + o] = b[o] + dot(&w[o * n_in..(o + 1) * n_in], xr);
                }
            }
            inputs.push(x);
            if k + 1 < self.layers() {
                let act = z.iter().map(|v| self.activation.apply(*v)).collect();
                pre.push(z);
                x = act;
            } else {
                x = z;
            }
        }
        Ok((x, MlpCache { batch, inputs, pre }))
    }

    /// Reverse pass for a cached batch. Returns `(parameter gradient summed over the
    /// batch, input gradient batch x input_dim)`.
    pub fn backward(&self, cache: &MlpCache, upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let batch = cache.batch;
        assert_eq!(upstream.len(), batch * self.output_dim(), "upstream gradient shape");
        let mut grad = vec![0.0; self.params.len()];
        let mut delta = upstream.to_vec();
        for k in (0..self.layers()).rev() {
            let (n_in, n_out) = (self.sizes[k], self.sizes[k + 1]);
            let (w, _) = self.layer(k);
            let x = &cache.inputs[k];
            let block = &mut grad[self.offsets[k]..self.offsets[k + 1]];
            let (gw, gb) = block.split_at_mut(n_in * n_out);
            let mut dx = vec![0.0; batch * n_in];
            for r in 0..batch {
                let xr = &x[r * n_in..(r + 1) * n_in];
                let dxr = &mut dx[r * n_in..(r + 1) * n_in];
                for o in 0..n_out {
                    let d = delta[r * n_out + o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    let wo = &w[o * n_in..(o + 1) * n_in];
                    for ((g, xi), (dxi, wi)) in gw[o * n_in..(o + 1) * n_in]
                        .iter_mut()
                        .zip(xr)
                        .zip(dxr.iter_mut().zip(wo))
                    {
                        *g += d * xi;
                        *dxi += d * wi;
                    }
                }
            }
            if k > 0 {
                let z = &cache.pre[k - 1];
                for (v, zi) in dx.iter_mut().zip(z) {
                    *v *= self.activation.derivative(*zi);
                }
            }
            delta = dx;
        }
        (grad, delta)
    }

    pub(crate) fn from_parts(sizes: &[usize], activation: Activation, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(sizes, activation)?;
        if params.len() != m.params.len() {
            return Err(Error::Checkpoint(format!(
                "MLP block has {} values, layer sizes imply {}",
                params.len(),
                m.params.len()
            )));
        }
        m.params = params;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_mlp(sizes: &[usize], act: Activation, seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Mlp::zeros(sizes, act).unwrap();
        for p in m.params_mut() {
            *p = rng.random_range(-0.15..0.15);
        }
        m
    }

    /// Plain nested-loop evaluation from explicit weight matrices.
    fn oracle(m: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for k in 0..m.layers() {
            let (w, b) = m.layer(k);
            let n_in = m.sizes()[k];
            let mut next = Vec::new();
            for o in 0..m.sizes()[k + 1] {
                let mut s = b[o];
                for i in 0..n_in {
                    s += w[o * n_in + i] * h[i];
                }
                next.push(if k + 1 < m.layers() && m.activation() == Activation::Relu { s.max(0.0) } else { s });
            }
            h = next;
        }
        h
    }

    #[test]
    fn zero_params_give_zero_output() {
        let m = Mlp::zeros(&[64, 128, 64, 12], Activation::Relu).unwrap();
        let (y, _) = m.forward(&vec![0.7; 64]).unwrap();
        assert_eq!(y, vec![0.0; 12]);
    }

    #[test]
    fn init_has_zero_final_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Mlp::init(&[64, 128, 64, 12], Activation::Relu, &mut rng).unwrap();
        let (w, b) = m.layer(2);
        assert!(w.iter().chain(b).all(|v| *v == 0.0));
        assert!(m.layer(0).0.iter().any(|v| *v != 0.0));
        let (y, _) = m.forward(&vec![1.3; 64]).unwrap();
        assert_eq!(y, vec![0.0; 12]);
    }

    #[test]
    fn forward_matches_oracle_and_is_batch_invariant() {
        let m = random_mlp(&[13, 128, 64, 12], Activation::Relu, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch: Vec<f64> = (0..5 * 13).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (yb, _) = m.forward_batch(&batch, 5).unwrap();
        for r in 0..5 {
            let row = &batch[r * 13..(r + 1) * 13];
            let (y, _) = m.forward(row).unwrap();
            assert_eq!(y, yb[r * 12..(r + 1) * 12].to_vec(), "batched row must be bitwise equal");
            for (a, b) in y.iter().zip(oracle(&m, row)) {
                assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let m = Mlp::zeros(&[4, 3, 2], Activation::Relu).unwrap();
        assert!(matches!(m.forward(&[0.0; 5]), Err(Error::Dimension(_))));
    }

    fn check_gradients(act: Activation) {
        let m = random_mlp(&[4, 128, 64, 12], act, 3);
        let x = [0.3, -0.2, 0.9, -0.5];
        let up: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let loss = |m: &Mlp, x: &[f64]| m.forward(x).unwrap().0.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
        let (_, cache) = m.forward(&x).unwrap();
        let (gp, gx) = m.backward(&cache, &up);
        let h = 1e-5;
        for i in 0..m.params().len() {
            let mut a = m.clone();
            a.params_mut()[i] += h;
            let mut b = m.clone();
            b.params_mut()[i] -= h;
            let num = (loss(&a, &x) - loss(&b, &x)) / (2.0 * h);
            let err = (gp[i] - num).abs() / gp[i].abs().max(num.abs()).max(1e-3);
            assert!(err < 1e-6, "param {i}: {} vs {num}", gp[i]);
        }
        for i in 0..4 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let num = (loss(&m, &xp) - loss(&m, &xm)) / (2.0 * h);
            assert!((gx[i] - num).abs() / num.abs().max(1e-6) < 1e-6);
        }
    }

    #[test]
    fn relu_gradients_match_finite_differences() {
        check_gradients(Activation::Relu);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        check_gradients(Activation::Identity);
    }

    #[test]
    fn linear_input_gradient_is_transposed_chain_product() {
        let m = random_mlp(&[3, 5, 4, 2], Activation::Identity, 4);
        let up = [0.7, -1.1];
        let (_, cache) = m.forward(&[0.1, 0.2, 0.3]).unwrap();
        let (_, gx) = m.backward(&cache, &up);
        // g = W0^T W1^T W2^T up
        let mut g = up.to_vec();
        for k in (0..3).rev() {
            let (w, _) = m.layer(k);
            let (n_in, n_out) = (m.sizes()[k], m.sizes()[k + 1]);
            g = (0..n_in).map(|i| (0..n_out).map(|o| w[o * n_in + i] * g[o]).sum()).collect();
        }
        for (a, b) in gx.iter().zip(&g) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = random_mlp(&[4, 8, 3], Activation::Relu, 5);
        let (_, cache) = m.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let (gp, gx) = m.backward(&cache, &[0.0; 3]);
        assert!(gp.iter().chain(&gx).all(|v| *v == 0.0));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let m = random_mlp(&[6, 16, 12], Activation::Relu, 6);
        let x = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        assert_eq!(m.forward(&x).unwrap().0, m.forward(&x).unwrap().0);
    }
}
