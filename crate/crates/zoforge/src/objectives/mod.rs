//! Loss functions over a [`ParamStore`], plus gradient utilities.
//!
//! An [`Objective`] maps `(parameters, minibatch)` to a scalar loss; that is
//! the *only* interface the optimizer sees, which is what lets the training
//! loop run on non-differentiable losses like negative accuracy. Objectives
//! that do have closed-form gradients expose them through
//! [`Objective::analytic_grad`] so finite differences can be validated
//! against an exact oracle.

pub mod dataset;
pub mod logistic;
pub mod metric;
pub mod mlp;
pub mod quadratic;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::paramspace::ParamStore;

/// A scalar loss over parameters and a set of example indices.
pub trait Objective {
    /// Parameter coordinate count the objective expects in the store.
    fn dim(&self) -> usize;

    /// Number of examples; `1` for pure functions of the parameters.
    fn dataset_size(&self) -> usize;

    /// Mean loss over the given example indices.
    fn eval(&self, store: &ParamStore, batch: &[usize]) -> f64;

    /// Closed-form gradient of the mean loss over `batch`, if known.
    fn analytic_grad(&self, _store: &ParamStore, _batch: &[usize]) -> Option<Vec<f64>> {
        None
    }
}

impl<O: Objective + ?Sized> Objective for Box<O> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn dataset_size(&self) -> usize {
        (**self).dataset_size()
    }
    fn eval(&self, store: &ParamStore, batch: &[usize]) -> f64 {
        (**self).eval(store, batch)
    }
    fn analytic_grad(&self, store: &ParamStore, batch: &[usize]) -> Option<Vec<f64>> {
        (**self).analytic_grad(store, batch)
    }
}

impl<O: Objective + ?Sized> Objective for &O {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn dataset_size(&self) -> usize {
        (**self).dataset_size()
    }
    fn eval(&self, store: &ParamStore, batch: &[usize]) -> f64 {
        (**self).eval(store, batch)
    }
    fn analytic_grad(&self, store: &ParamStore, batch: &[usize]) -> Option<Vec<f64>> {
        (**self).analytic_grad(store, batch)
    }
}

/// All example indices, for full-dataset evaluations.
pub fn full_batch(dataset_size: usize) -> Vec<usize> {
    (0..dataset_size).collect()
}

/// Wrapper that counts loss evaluations. The count is atomic so concurrent
/// Monte Carlo replicas can share one counter.
pub struct CountingObjective<O> {
    inner: O,
    count: AtomicU64,
}

impl<O: Objective> CountingObjective<O> {
    pub fn new(inner: O) -> Self {
        Self { inner, count: AtomicU64::new(0) }
    }

    /// Loss evaluations since construction (or the last reset).
    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }

    pub fn reset_count(&self) {
        self.count.store(0, Ordering::Relaxed);
    }

    pub fn into_inner(self) -> O {
        self.inner
    }
}

impl<O: Objective> Objective for CountingObjective<O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn dataset_size(&self) -> usize {
        self.inner.dataset_size()
    }
    fn eval(&self, store: &ParamStore, batch: &[usize]) -> f64 {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.eval(store, batch)
    }
    fn analytic_grad(&self, store: &ParamStore, batch: &[usize]) -> Option<Vec<f64>> {
        self.inner.analytic_grad(store, batch)
    }
}

/// Central-difference gradient of the batch loss: coordinate `i` gets
/// `(L(theta + h e_i) - L(theta - h e_i)) / 2h`. The store is bumped in
/// place and restored bit-exactly from the saved value.
pub fn finite_difference_grad(
    obj: &dyn Objective,
    store: &mut ParamStore,
    batch: &[usize],
    h: f64,
) -> Vec<f64> {
    let d = store.dim();
    let mut grad = Vec::with_capacity(d);
    for i in 0..d {
        let saved = store.get(i);
        store.set(i, saved + h);
        let up = obj.eval(store, batch);
        store.set(i, saved - h);
        let down = obj.eval(store, batch);
        store.set(i, saved);
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// Trace of the per-example gradient covariance at the current parameters:
/// `mean_i ||g_i - g_mean||^2` with each `g_i` a central-difference gradient
/// of example `i`'s loss. For minibatches of size `B` drawn iid this equals
/// `B * tr Cov(grad of batch loss)`, independent of `B`.
pub fn sigma_trace_fd(obj: &dyn Objective, store: &mut ParamStore, h: f64) -> f64 {
    let n = obj.dataset_size();
    let d = store.dim();
    let mut mean = vec![0.0; d];
    let mut grads = Vec::with_capacity(n);
    for i in 0..n {
        let g = finite_difference_grad(obj, store, &[i], h);
        for (m, gi) in mean.iter_mut().zip(&g) {
            *m += gi / n as f64;
        }
        grads.push(g);
    }
    grads
        .iter()
        .map(|g| g.iter().zip(&mean).map(|(gi, m)| (gi - m) * (gi - m)).sum::<f64>())
        .sum::<f64>()
        / n as f64
}

/// Euclidean norm of the full-dataset gradient, analytic when available and
/// central-difference otherwise.
pub fn grad_norm(obj: &dyn Objective, store: &mut ParamStore, h: f64) -> f64 {
    let batch = full_batch(obj.dataset_size());
    let g = obj
        .analytic_grad(store, &batch)
        .unwrap_or_else(|| finite_difference_grad(obj, store, &batch, h));
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}
