//! Small dense networks with hand-written reverse-mode gradients, the Adam
//! optimizer, and a running observation normalizer.
//!
//! The networks are deliberately tiny (two or three tanh layers), so a
//! hand-rolled tape keeps the full loss differentiable and property-testable
//! against finite differences without an external framework.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Fully connected tanh network with a linear output layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    /// Row-major `out x in` weight matrices.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Per-layer pre-activations and activations from one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// `activations[0]` is the input; the last entry is the linear output.
    pub activations: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Mlp {
    /// Xavier-uniform initialization; the output layer is scaled down so
    /// initial actions and values stay near zero.
    pub fn init(sizes: &[usize], out_scale: f64, rng: &mut ChaCha8Rng) -> Self {
        assert!(sizes.len() >= 2);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..sizes.len() - 1 {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let bound = (6.0 / (n_in + n_out) as f64).sqrt();
            let scale = if l == sizes.len() - 2 { out_scale } else { 1.0 };
            let w: Vec<f64> =
                (0..n_in * n_out).map(|_| rng.random_range(-bound..bound) * scale).collect();
            weights.push(w);
            biases.push(vec![0.0; n_out]);
        }
        Mlp { sizes: sizes.to_vec(), weights, biases }
    }

    pub fn zeros_like_grads(&self) -> MlpGrads {
        MlpGrads {
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn forward(&self, input: &[f64], cache: &mut ForwardCache) {
        cache.activations.clear();
        cache.activations.push(input.to_vec());
        let layers = self.weights.len();
        for l in 0..layers {
            let n_in = self.sizes[l];
            let n_out = self.sizes[l + 1];
            let x = cache.activations[l].clone();
            let mut out = vec![0.0; n_out];
            let w = &self.weights[l];
            for o in 0..n_out {
                let mut acc = self.biases[l][o];
                let row = &w[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    acc += row[i] * x[i];
                }
                out[o] = if l + 1 < layers { acc.tanh() } else { acc };
            }
            cache.activations.push(out);
        }
    }

    pub fn output<'c>(&self, cache: &'c ForwardCache) -> &'c [f64] {
        cache.activations.last().expect("forward ran")
    }

    /// Accumulates parameter gradients for one sample given the loss
    /// gradient at the output.
    pub fn backward(&self, cache: &ForwardCache, dl_dout: &[f64], grads: &mut MlpGrads) {
        let layers = self.weights.len();
        let mut delta = dl_dout.to_vec();
        for l in (0..layers).rev() {
            let n_in = self.sizes[l];
            let n_out = self.sizes[l + 1];
            // Non-final layers have tanh applied after the affine map.
            if l + 1 < layers {
                let act = &cache.activations[l + 1];
                for o in 0..n_out {
                    delta[o] *= 1.0 - act[o] * act[o];
                }
            }
            let x = &cache.activations[l];
            let gw = &mut grads.weights[l];
            for o in 0..n_out {
                let row = &mut gw[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    row[i] += delta[o] * x[i];
                }
                grads.biases[l][o] += delta[o];
            }
            if l > 0 {
                let w = &self.weights[l];
                let mut next = vec![0.0; n_in];
                for o in 0..n_out {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    for i in 0..n_in {
                        next[i] += row[i] * delta[o];
                    }
                }
                delta = next;
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }
}

impl MlpGrads {
    pub fn zero(&mut self) {
        for w in self.weights.iter_mut() {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        for b in self.biases.iter_mut() {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn add(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in self.weights.iter_mut() {
            w.iter_mut().for_each(|v| *v *= s);
        }
        for b in self.biases.iter_mut() {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        let mut n = 0.0;
        for w in &self.weights {
            n += w.iter().map(|v| v * v).sum::<f64>();
        }
        for b in &self.biases {
            n += b.iter().map(|v| v * v).sum::<f64>();
        }
        n
    }
}

/// Adam state over one parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len] }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, t: usize) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let bc1 = 1.0 - B1.powi(t as i32);
        let bc2 = 1.0 - B2.powi(t as i32);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

/// Adam over a whole network plus auxiliary vectors.
#[derive(Debug, Clone)]
pub struct MlpAdam {
    weights: Vec<AdamState>,
    biases: Vec<AdamState>,
}

impl MlpAdam {
    pub fn new(mlp: &Mlp) -> Self {
        MlpAdam {
            weights: mlp.weights.iter().map(|w| AdamState::new(w.len())).collect(),
            biases: mlp.biases.iter().map(|b| AdamState::new(b.len())).collect(),
        }
    }

    pub fn step(&mut self, mlp: &mut Mlp, grads: &MlpGrads, lr: f64, t: usize) {
        for l in 0..mlp.weights.len() {
            self.weights[l].step(&mut mlp.weights[l], &grads.weights[l], lr, t);
            self.biases[l].step(&mut mlp.biases[l], &grads.biases[l], lr, t);
        }
    }
}

/// Running mean/variance normalizer (Welford over batches), frozen during
/// evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunningNorm {
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
    pub count: f64,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        RunningNorm { mean: vec![0.0; dim], m2: vec![0.0; dim], count: 1e-4 }
    }

    pub fn update(&mut self, sample: &[f64]) {
        self.count += 1.0;
        for i in 0..sample.len() {
            let delta = sample[i] - self.mean[i];
            self.mean[i] += delta / self.count;
            self.m2[i] += delta * (sample[i] - self.mean[i]);
        }
    }

    pub fn std(&self, i: usize) -> f64 {
        (self.m2[i] / self.count).sqrt().max(1e-6)
    }

    pub fn normalize(&self, obs: &[f64], out: &mut [f64]) {
        for i in 0..obs.len() {
            out[i] = ((obs[i] - self.mean[i]) / self.std(i)).clamp(-10.0, 10.0);
        }
    }
}
