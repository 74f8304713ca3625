//! Classification metrics and the non-differentiable training objective
//! built from one of them.
//!
//! Zeroth-order updates only ever consume loss *values*, so a piecewise
//! constant loss like negative accuracy is a legitimate training target —
//! there is no gradient anywhere in the loop to be undefined.

use crate::objectives::Objective;
use crate::paramspace::{ParamStore, StoragePrecision};

/// Fraction of positions where `pred == truth`.
pub fn accuracy(truth: &[i64], pred: &[i64]) -> f64 {
    assert_eq!(truth.len(), pred.len());
    assert!(!truth.is_empty());
    let hits = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
    hits as f64 / truth.len() as f64
}

/// Macro-averaged F1: per-class F1 = 2TP / (2TP + FP + FN), averaged
/// unweighted over the classes present in `truth`. A class with no true or
/// predicted instances contributes F1 = 0 by the 0/0 := 0 convention.
pub fn macro_f1(truth: &[i64], pred: &[i64]) -> f64 {
    assert_eq!(truth.len(), pred.len());
    assert!(!truth.is_empty());
    let mut classes: Vec<i64> = truth.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut acc = 0.0;
    for &c in &classes {
        let tp = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p == c).count();
        let fp = truth.iter().zip(pred).filter(|(t, p)| **t != c && **p == c).count();
        let fnn = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p != c).count();
        let denom = 2 * tp + fp + fnn;
        if denom > 0 {
            acc += 2.0 * tp as f64 / denom as f64;
        }
    }
    acc / classes.len() as f64
}

/// Negative classification accuracy of a linear scorer `sign(theta . x)` on
/// a fixed +/-1-labelled dataset. Piecewise constant in the parameters.
#[derive(Debug, Clone)]
pub struct NegAccuracy {
    xs: Vec<f64>,
    ys: Vec<f64>,
    d: usize,
}

impl NegAccuracy {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, d: usize) -> Self {
        assert_eq!(xs.len(), ys.len() * d, "features do not match labels");
        assert!(ys.iter().all(|&y| y == 1.0 || y == -1.0), "labels must be +/-1");
        Self { xs, ys, d }
    }

    pub fn with_store(xs: Vec<f64>, ys: Vec<f64>, theta0: &[f64]) -> (Self, ParamStore) {
        let mut store = ParamStore::new(StoragePrecision::F64);
        store.add_vector("theta", theta0, true).unwrap();
        (Self::new(xs, ys, theta0.len()), store)
    }

    /// Accuracy (not negated) over the whole dataset, for reporting.
    pub fn full_accuracy(&self, store: &ParamStore) -> f64 {
        let all: Vec<usize> = (0..self.ys.len()).collect();
        -self.eval(store, &all)
    }
}

impl Objective for NegAccuracy {
    fn dim(&self) -> usize {
        self.d
    }

    fn dataset_size(&self) -> usize {
        self.ys.len()
    }

    fn eval(&self, store: &ParamStore, batch: &[usize]) -> f64 {
        let mut hits = 0usize;
        for &i in batch {
            let row = &self.xs[i * self.d..(i + 1) * self.d];
            let score: f64 = row.iter().enumerate().map(|(j, &x)| x * store.get(j)).sum();
            let pred = if score > 0.0 { 1.0 } else { -1.0 };
            if pred == self.ys[i] {
                hits += 1;
            }
        }
        -(hits as f64) / batch.len() as f64
    }
}
