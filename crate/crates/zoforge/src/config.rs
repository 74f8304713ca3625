//! Run configuration files: a strict TOML format with `[run]`,
//! `[optimizer]`, `[estimator]`, `[objective]`, and `[trajectory]` sections
//! that builds into the engine's native types.
//!
//! Unknown keys are rejected everywhere — a typo'd knob must fail loudly, not
//! silently fall back to a default. Every omitted key has a documented
//! default; only the objective (which has no sensible universal shape) must
//! be spelled out.

use serde::Deserialize;
use thiserror::Error;

use crate::estimators::{EstimatorConfig, EstimatorKind, ScaleSource};
use crate::objectives::dataset::{planted_regression, two_blobs};
use crate::objectives::logistic::{ExpLinearLoss, LogisticRegression};
use crate::objectives::metric::NegAccuracy;
use crate::objectives::mlp::TwoLayerMlp;
use crate::objectives::quadratic::DiagQuadratic;
use crate::objectives::Objective;
use crate::optimizers::{Algo, HistoryMode, LrSchedule, OptimizerConfig, RunConfig, StageSpec};
use crate::paramspace::{ParamStore, StoragePrecision};
use crate::randcore::Seed;
use crate::trajectory::GradPrecision;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn d_steps() -> u64 {
    1000
}
fn d_lr() -> f64 {
    0.01
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps_adam() -> f64 {
    1e-8
}
fn d_probes() -> usize {
    1
}
fn d_epsilon() -> f64 {
    1e-3
}
fn d_scale_probes() -> usize {
    2
}
fn d_center_norm() -> f64 {
    2.0
}
fn d_data_seed() -> u64 {
    1
}
fn d_init_seed() -> u64 {
    2
}
fn d_theta0() -> f64 {
    1.0
}

/// `[run]`: the shape of the training run.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Master seed; every stream in the run derives from it.
    pub seed: u64,
    pub steps: u64,
    /// Examples per step; omitted means the full dataset.
    pub batch_size: Option<usize>,
    /// Loss evaluation cadence for metrics rows; 0 = final step only.
    pub eval_every: u64,
    /// Record wall-clock nanoseconds in metrics (breaks byte-determinism).
    pub timings: bool,
    /// Optional staged group schedule; empty = all groups the whole run.
    pub stage: Vec<StageSection>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: d_steps(),
            batch_size: None,
            eval_every: 0,
            timings: false,
            stage: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub start_step: u64,
    /// Group names to train from `start_step` on; omitted = all groups.
    pub groups: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum AlgoName {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ScheduleName {
    Constant,
    Linear,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum HistoryName {
    Dense,
    Reconstruct,
}

/// `[optimizer]`: update rule and its hyperparameters.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    algo: AlgoName,
    pub lr: f64,
    lr_schedule: ScheduleName,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    history: HistoryName,
    /// Probe-count breakpoints as `[[from_step, n], ...]`.
    pub probe_schedule: Vec<(u64, usize)>,
    /// Scale the learning rate with the probe count (relative to step 0).
    pub couple_lr_to_probes: bool,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            algo: AlgoName::Sgd,
            lr: d_lr(),
            lr_schedule: ScheduleName::Constant,
            weight_decay: 0.0,
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps_adam: d_eps_adam(),
            history: HistoryName::Dense,
            probe_schedule: Vec::new(),
            couple_lr_to_probes: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum KindName {
    Central,
    OnePoint,
    VarianceScaled,
    ExpectationScaled,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum DistName {
    Sphere,
    Gaussian,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ScaleName {
    Ones,
    ParamNorm,
    GradNorm,
    External,
}

/// `[estimator]`: the gradient estimator variant.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSection {
    kind: KindName,
    pub probes: usize,
    pub epsilon: f64,
    dist: DistName,
    scale: ScaleName,
    /// Per-group factors for `scale = "external"`.
    pub scale_factors: Option<Vec<f64>>,
    /// Probe pairs per group for `scale = "grad_norm"`.
    pub scale_probes: usize,
    /// Refresh cadence for `scale = "grad_norm"`; 0 = compute once.
    pub scale_refresh_every: u64,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self {
            kind: KindName::Central,
            probes: d_probes(),
            epsilon: d_epsilon(),
            dist: DistName::Sphere,
            scale: ScaleName::Ones,
            scale_factors: None,
            scale_probes: d_scale_probes(),
            scale_refresh_every: 0,
        }
    }
}

/// `[objective]`: the loss surface and its dataset, tagged by `kind`.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveSection {
    /// Diagonal quadratic. `eigenvalues` wins if given; otherwise `rank`
    /// unit eigenvalues out of `dim` (omitted rank = all of them).
    Quadratic {
        dim: usize,
        rank: Option<usize>,
        eigenvalues: Option<Vec<f64>>,
        /// Initial value of every coordinate.
        #[serde(default = "d_theta0")]
        theta0: f64,
    },
    /// Logistic regression on a two-blob synthetic set; zero init.
    BlobsLogistic {
        examples: usize,
        dim: usize,
        #[serde(default = "d_center_norm")]
        center_norm: f64,
        #[serde(default)]
        l2: f64,
        #[serde(default = "d_data_seed")]
        data_seed: u64,
    },
    /// Exponential loss on a two-blob synthetic set; zero init.
    BlobsExp {
        examples: usize,
        dim: usize,
        #[serde(default = "d_center_norm")]
        center_norm: f64,
        #[serde(default = "d_data_seed")]
        data_seed: u64,
    },
    /// Negated accuracy of a linear classifier on two blobs; zero init.
    /// Piecewise constant — the non-differentiable stress case.
    BlobsAccuracy {
        examples: usize,
        dim: usize,
        #[serde(default = "d_center_norm")]
        center_norm: f64,
        #[serde(default = "d_data_seed")]
        data_seed: u64,
    },
    /// Two-layer tanh regressor on a planted-teacher dataset.
    Mlp {
        examples: usize,
        in_dim: usize,
        hidden: usize,
        #[serde(default = "d_data_seed")]
        data_seed: u64,
        #[serde(default = "d_init_seed")]
        init_seed: u64,
    },
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum PrecisionName {
    Bf16,
    F32,
    F64,
}

/// `[trajectory]`: on-disk scalar precision.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySection {
    precision: PrecisionName,
}

impl Default for TrajectorySection {
    fn default() -> Self {
        Self { precision: PrecisionName::Bf16 }
    }
}

/// A whole parsed config file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub estimator: EstimatorSection,
    pub objective: ObjectiveSection,
    #[serde(default)]
    pub trajectory: TrajectorySection,
}

/// Everything `train` needs, constructed from a config file.
pub struct BuiltRun {
    pub objective: Box<dyn Objective + Send + Sync>,
    pub store: ParamStore,
    /// Stage specs; empty means one all-groups stage.
    pub stages: Vec<StageSpec>,
    pub run: RunConfig,
    pub opt: OptimizerConfig,
    pub est: EstimatorConfig,
    pub precision: GradPrecision,
}

impl ConfigFile {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Override the master seed (command line and environment beat the file).
    pub fn set_seed(&mut self, seed: u64) {
        self.run.seed = seed;
    }

    /// Override the seed of any seeded parameter initializer. Objectives
    /// whose initial parameters are fixed constants are unaffected.
    pub fn set_init_seed(&mut self, seed: u64) {
        if let ObjectiveSection::Mlp { init_seed, .. } = &mut self.objective {
            *init_seed = seed;
        }
    }

    pub fn build(&self) -> Result<BuiltRun, ConfigError> {
        let (objective, store) = self.build_objective()?;

        let opt = OptimizerConfig {
            algo: match self.optimizer.algo {
                AlgoName::Sgd => Algo::Sgd,
                AlgoName::Momentum => Algo::Momentum,
                AlgoName::Adam => Algo::Adam,
            },
            lr0: self.optimizer.lr,
            lr_schedule: match self.optimizer.lr_schedule {
                ScheduleName::Constant => LrSchedule::Constant,
                ScheduleName::Linear => LrSchedule::LinearDecay,
            },
            weight_decay: self.optimizer.weight_decay,
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            eps_adam: self.optimizer.eps_adam,
            history: match self.optimizer.history {
                HistoryName::Dense => HistoryMode::Dense,
                HistoryName::Reconstruct => HistoryMode::Reconstruct,
            },
            n_schedule: self.optimizer.probe_schedule.clone(),
            couple_lr_to_n: self.optimizer.couple_lr_to_probes,
        };
        opt.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let scale = match self.estimator.scale {
            ScaleName::Ones => ScaleSource::Ones,
            ScaleName::ParamNorm => ScaleSource::ParamNorm,
            ScaleName::GradNorm => ScaleSource::GradNorm {
                probes: self.estimator.scale_probes,
                refresh_every: self.estimator.scale_refresh_every,
            },
            ScaleName::External => {
                let factors = self
                    .estimator
                    .scale_factors
                    .clone()
                    .ok_or_else(|| {
                        ConfigError::Invalid(
                            "estimator.scale = \"external\" requires estimator.scale_factors"
                                .into(),
                        )
                    })?;
                if factors.len() != store.num_groups() {
                    return Err(ConfigError::Invalid(format!(
                        "estimator.scale_factors has {} entries but the store has {} groups",
                        factors.len(),
                        store.num_groups()
                    )));
                }
                ScaleSource::External(factors)
            }
        };
        let est = EstimatorConfig {
            kind: match self.estimator.kind {
                KindName::Central => EstimatorKind::Central,
                KindName::OnePoint => EstimatorKind::OnePoint,
                KindName::VarianceScaled => EstimatorKind::VarianceScaled,
                KindName::ExpectationScaled => EstimatorKind::ExpectationScaled,
            },
            n_probes: self.estimator.probes,
            epsilon: self.estimator.epsilon,
            dist: match self.estimator.dist {
                DistName::Sphere => crate::randcore::ZDist::Sphere,
                DistName::Gaussian => crate::randcore::ZDist::Gaussian,
            },
            scale,
        };

        let dataset = objective.dataset_size();
        let batch_size = self.run.batch_size.unwrap_or(dataset);
        if batch_size == 0 || batch_size > dataset {
            return Err(ConfigError::Invalid(format!(
                "run.batch_size {batch_size} is outside 1..={dataset} (the dataset size)"
            )));
        }
        let run = RunConfig {
            master_seed: Seed(self.run.seed),
            steps: self.run.steps,
            batch_size,
            eval_every: self.run.eval_every,
            collect_timings: self.run.timings,
        };

        let stages: Vec<StageSpec> = self
            .run
            .stage
            .iter()
            .map(|s| StageSpec { start_step: s.start_step, groups: s.groups.clone() })
            .collect();

        let precision = match self.trajectory.precision {
            PrecisionName::Bf16 => GradPrecision::Bf16,
            PrecisionName::F32 => GradPrecision::F32,
            PrecisionName::F64 => GradPrecision::F64,
        };

        Ok(BuiltRun { objective, store, stages, run, opt, est, precision })
    }

    fn build_objective(
        &self,
    ) -> Result<(Box<dyn Objective + Send + Sync>, ParamStore), ConfigError> {
        match &self.objective {
            ObjectiveSection::Quadratic { dim, rank, eigenvalues, theta0 } => {
                let evs = match (eigenvalues, rank) {
                    (Some(evs), _) => {
                        if evs.len() != *dim {
                            return Err(ConfigError::Invalid(format!(
                                "objective.eigenvalues has {} entries for dim {dim}",
                                evs.len()
                            )));
                        }
                        evs.clone()
                    }
                    (None, Some(r)) => {
                        if *r > *dim {
                            return Err(ConfigError::Invalid(format!(
                                "objective.rank {r} exceeds dim {dim}"
                            )));
                        }
                        DiagQuadratic::low_rank(*dim, *r).eigenvalues().to_vec()
                    }
                    (None, None) => vec![1.0; *dim],
                };
                let (q, store) = DiagQuadratic::with_store(&evs, &vec![*theta0; *dim]);
                Ok((Box::new(q), store))
            }
            ObjectiveSection::BlobsLogistic { examples, dim, center_norm, l2, data_seed } => {
                let (xs, ys) = two_blobs(Seed(*data_seed), *examples, *dim, *center_norm);
                let (obj, store) =
                    LogisticRegression::with_store(xs, ys, &vec![0.0; *dim], *l2);
                Ok((Box::new(obj), store))
            }
            ObjectiveSection::BlobsExp { examples, dim, center_norm, data_seed } => {
                let (xs, ys) = two_blobs(Seed(*data_seed), *examples, *dim, *center_norm);
                let (obj, store) = ExpLinearLoss::with_store(xs, ys, &vec![0.0; *dim]);
                Ok((Box::new(obj), store))
            }
            ObjectiveSection::BlobsAccuracy { examples, dim, center_norm, data_seed } => {
                let (xs, ys) = two_blobs(Seed(*data_seed), *examples, *dim, *center_norm);
                let (obj, store) = NegAccuracy::with_store(xs, ys, &vec![0.0; *dim]);
                Ok((Box::new(obj), store))
            }
            ObjectiveSection::Mlp { examples, in_dim, hidden, data_seed, init_seed } => {
                let (xs, ys) = planted_regression(Seed(*data_seed), *examples, *in_dim);
                let obj = TwoLayerMlp::new(*in_dim, *hidden, xs, ys);
                let store = obj.init_store(Seed(*init_seed), StoragePrecision::F64);
                Ok((Box::new(obj), store))
            }
        }
    }
}
