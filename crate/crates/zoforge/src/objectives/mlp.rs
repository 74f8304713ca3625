//! A small two-layer perceptron for regression — the objective with matrix
//! parameter groups, used to exercise low-rank adapters and staged training.
//!
//! Architecture: `out = W2 tanh(W1 x + b1) + b2` with scalar output and
//! squared-error loss. Weight matrices are read through
//! [`ParamStore::effective_matrix`], so an attached adapter changes the
//! network without the objective knowing.

use crate::objectives::Objective;
use crate::paramspace::{ParamStore, StoragePrecision};
use crate::randcore::{NoiseStream, Seed};

/// Two-layer tanh regressor over a fixed dataset.
#[derive(Debug, Clone)]
pub struct TwoLayerMlp {
    in_dim: usize,
    hidden: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl TwoLayerMlp {
    pub fn new(in_dim: usize, hidden: usize, xs: Vec<f64>, ys: Vec<f64>) -> Self {
        assert_eq!(xs.len(), ys.len() * in_dim, "features do not match labels");
        assert!(hidden >= 1 && in_dim >= 1);
        Self { in_dim, hidden, xs, ys }
    }

    /// Build the parameter store this network reads: `w1` (hidden x in) and
    /// `w2` (1 x hidden) with fan-in-scaled Gaussian init, zero biases.
    pub fn init_store(&self, seed: Seed, precision: StoragePrecision) -> ParamStore {
        let mut init = NoiseStream::gaussian(seed);
        let mut store = ParamStore::new(precision);
        let w1_scale = 1.0 / (self.in_dim as f64).sqrt();
        let w1: Vec<f64> = (0..self.hidden * self.in_dim).map(|_| init.next() * w1_scale).collect();
        store.add_matrix("w1", self.hidden, self.in_dim, &w1, true).unwrap();
        store.add_vector("b1", &vec![0.0; self.hidden], true).unwrap();
        let w2_scale = 1.0 / (self.hidden as f64).sqrt();
        let w2: Vec<f64> = (0..self.hidden).map(|_| init.next() * w2_scale).collect();
        store.add_matrix("w2", 1, self.hidden, &w2, true).unwrap();
        store.add_vector("b2", &[0.0], true).unwrap();
        store
    }

    fn forward(&self, store: &ParamStore, i: usize, w1: &[f64], w2: &[f64]) -> (Vec<f64>, f64) {
        let b1_off = store.groups()[store.group_index("b1").unwrap()].offset;
        let b2_off = store.groups()[store.group_index("b2").unwrap()].offset;
        let x = &self.xs[i * self.in_dim..(i + 1) * self.in_dim];
        let mut a1 = Vec::with_capacity(self.hidden);
        for j in 0..self.hidden {
            let mut z = store.get(b1_off + j);
            for (k, &xk) in x.iter().enumerate() {
                z += w1[j * self.in_dim + k] * xk;
            }
            a1.push(z.tanh());
        }
        let mut out = store.get(b2_off);
        for (j, &a) in a1.iter().enumerate() {
            out += w2[j] * a;
        }
        (a1, out)
    }
}

impl Objective for TwoLayerMlp {
    /// Base parameter count (before any adapter groups are appended).
    fn dim(&self) -> usize {
        self.hidden * self.in_dim + self.hidden + self.hidden + 1
    }

    fn dataset_size(&self) -> usize {
        self.ys.len()
    }

    fn eval(&self, store: &ParamStore, batch: &[usize]) -> f64 {
        let w1 = store.effective_matrix("w1").expect("store built by init_store");
        let w2 = store.effective_matrix("w2").expect("store built by init_store");
        let mut acc = 0.0;
        for &i in batch {
            let (_, out) = self.forward(store, i, &w1, &w2);
            let r = out - self.ys[i];
            acc += 0.5 * r * r;
        }
        acc / batch.len() as f64
    }

    /// Backpropagated gradient in the store's coordinate layout. Only defined
    /// for the plain network; with adapters attached (extra groups, frozen
    /// base) the caller should fall back to finite differences.
    fn analytic_grad(&self, store: &ParamStore, batch: &[usize]) -> Option<Vec<f64>> {
        if !store.adapters().is_empty() {
            return None;
        }
        let w1 = store.effective_matrix("w1").ok()?;
        let w2 = store.effective_matrix("w2").ok()?;
        let w1_off = store.groups()[store.group_index("w1")?].offset;
        let b1_off = store.groups()[store.group_index("b1")?].offset;
        let w2_off = store.groups()[store.group_index("w2")?].offset;
        let b2_off = store.groups()[store.group_index("b2")?].offset;
        let mut grad = vec![0.0; store.dim()];
        let scale = 1.0 / batch.len() as f64;
        for &i in batch {
            let (a1, out) = self.forward(store, i, &w1, &w2);
            let r = (out - self.ys[i]) * scale;
            let x = &self.xs[i * self.in_dim..(i + 1) * self.in_dim];
            grad[b2_off] += r;
            for j in 0..self.hidden {
                grad[w2_off + j] += r * a1[j];
                let dz = r * w2[j] * (1.0 - a1[j] * a1[j]);
                grad[b1_off + j] += dz;
                for (k, &xk) in x.iter().enumerate() {
                    grad[w1_off + j * self.in_dim + k] += dz * xk;
                }
            }
        }
        Some(grad)
    }
}
