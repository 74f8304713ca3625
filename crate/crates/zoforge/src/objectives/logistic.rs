//! Linear-model losses over a labelled dataset: logistic and exponential.
//!
//! Both score an example as `f_i = theta . x_i` with labels in {-1, +1}.
//! Logistic loss is the smooth training objective; the exponential loss
//! `exp(-y_i f_i)` exists because its per-example gradient covariance obeys
//! a clean closed-form ceiling (`N * L * tr Hessian`) that the theory suites
//! verify by Monte Carlo.

use crate::objectives::Objective;
use crate::paramspace::{ParamStore, StoragePrecision};

fn softplus(m: f64) -> f64 {
    if m > 0.0 {
        m + (-m).exp().ln_1p()
    } else {
        m.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Row-major labelled dataset shared by the linear models.
#[derive(Debug, Clone)]
struct LinearData {
    xs: Vec<f64>,
    ys: Vec<f64>,
    d: usize,
}

impl LinearData {
    fn new(xs: Vec<f64>, ys: Vec<f64>, d: usize) -> Self {
        assert_eq!(xs.len(), ys.len() * d, "features do not match labels");
        assert!(ys.iter().all(|&y| y == 1.0 || y == -1.0), "labels must be +/-1");
        Self { xs, ys, d }
    }

    fn score(&self, store: &ParamStore, i: usize) -> f64 {
        let row = &self.xs[i * self.d..(i + 1) * self.d];
        row.iter().enumerate().map(|(j, &x)| x * store.get(j)).sum()
    }
}

/// Binary logistic regression with optional L2 penalty:
/// `mean_i ln(1 + exp(-y_i theta.x_i)) + (l2 / 2) ||theta||^2`.
#[derive(Debug, Clone)]
pub struct LogisticRegression {
    data: LinearData,
    l2: f64,
}

impl LogisticRegression {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, d: usize, l2: f64) -> Self {
        assert!(l2 >= 0.0);
        Self { data: LinearData::new(xs, ys, d), l2 }
    }

    /// Convenience: the objective plus a single-group store at `theta0`.
    pub fn with_store(
        xs: Vec<f64>,
        ys: Vec<f64>,
        theta0: &[f64],
        l2: f64,
    ) -> (Self, ParamStore) {
        let mut store = ParamStore::new(StoragePrecision::F64);
        store.add_vector("theta", theta0, true).unwrap();
        (Self::new(xs, ys, theta0.len(), l2), store)
    }
}

impl Objective for LogisticRegression {
    fn dim(&self) -> usize {
        self.data.d
    }

    fn dataset_size(&self) -> usize {
        self.data.ys.len()
    }

    fn eval(&self, store: &ParamStore, batch: &[usize]) -> f64 {
        let mut acc = 0.0;
        for &i in batch {
            acc += softplus(-self.data.ys[i] * self.data.score(store, i));
        }
        let mut penalty = 0.0;
        for j in 0..self.data.d {
            let t = store.get(j);
            penalty += t * t;
        }
        acc / batch.len() as f64 + 0.5 * self.l2 * penalty
    }

    fn analytic_grad(&self, store: &ParamStore, batch: &[usize]) -> Option<Vec<f64>> {
        let mut grad = vec![0.0; self.data.d];
        for &i in batch {
            let y = self.data.ys[i];
            let w = -y * sigmoid(-y * self.data.score(store, i)) / batch.len() as f64;
            let row = &self.data.xs[i * self.data.d..(i + 1) * self.data.d];
            for (g, &x) in grad.iter_mut().zip(row) {
                *g += w * x;
            }
        }
        for (j, g) in grad.iter_mut().enumerate() {
            *g += self.l2 * store.get(j);
        }
        Some(grad)
    }
}

/// Exponential loss on a linear scorer: `mean_i exp(-y_i theta.x_i)`.
#[derive(Debug, Clone)]
pub struct ExpLinearLoss {
    data: LinearData,
}

impl ExpLinearLoss {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, d: usize) -> Self {
        Self { data: LinearData::new(xs, ys, d) }
    }

    pub fn with_store(xs: Vec<f64>, ys: Vec<f64>, theta0: &[f64]) -> (Self, ParamStore) {
        let mut store = ParamStore::new(StoragePrecision::F64);
        store.add_vector("theta", theta0, true).unwrap();
        (Self::new(xs, ys, theta0.len()), store)
    }

    /// Trace of the Hessian of the batch-mean loss:
    /// `mean_i ||x_i||^2 exp(-y_i f_i)`.
    pub fn hessian_trace(&self, store: &ParamStore, batch: &[usize]) -> f64 {
        let mut acc = 0.0;
        for &i in batch {
            let row = &self.data.xs[i * self.data.d..(i + 1) * self.data.d];
            let normsq: f64 = row.iter().map(|x| x * x).sum();
            acc += normsq * (-self.data.ys[i] * self.data.score(store, i)).exp();
        }
        acc / batch.len() as f64
    }
}

impl Objective for ExpLinearLoss {
    fn dim(&self) -> usize {
        self.data.d
    }

    fn dataset_size(&self) -> usize {
        self.data.ys.len()
    }

    fn eval(&self, store: &ParamStore, batch: &[usize]) -> f64 {
        let mut acc = 0.0;
        for &i in batch {
            acc += (-self.data.ys[i] * self.data.score(store, i)).exp();
        }
        acc / batch.len() as f64
    }

    fn analytic_grad(&self, store: &ParamStore, batch: &[usize]) -> Option<Vec<f64>> {
        let mut grad = vec![0.0; self.data.d];
        for &i in batch {
            let y = self.data.ys[i];
            let w = -y * (-y * self.data.score(store, i)).exp() / batch.len() as f64;
            let row = &self.data.xs[i * self.data.d..(i + 1) * self.data.d];
            for (g, &x) in grad.iter_mut().zip(row) {
                *g += w * x;
            }
        }
        Some(grad)
    }
}
