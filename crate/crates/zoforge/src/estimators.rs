//! Zeroth-order gradient estimators built on seeded in-place perturbation.
//!
//! The central estimator runs, per probe, the five-phase cycle
//! `perturb(+eps) -> eval -> perturb(-2 eps) -> eval -> perturb(+eps)` with
//! every perturbation regenerated from the same per-probe seed, so the
//! parameters come back to their starting values without any copy of them
//! ever existing. What the cycle produces is one *scalar* per probe — the
//! projected gradient `(L+ - L-) / (2 eps)` — and `(seed, scalar)` is all an
//! optimizer or a trajectory file ever needs to reconstruct the full update
//! direction.
//!
//! Multi-probe steps reuse one minibatch across probes and later apply each
//! probe's update at `lr / n`. The scaled variants divide the perturbation
//! per parameter group by a factor; applying the update with the factors
//! multiplied back preserves the estimator's expectation while reshaping its
//! variance, and applying without them preconditions the expected step
//! instead.

use thiserror::Error;

use crate::objectives::Objective;
use crate::paramspace::{Mask, ParamError, ParamStore, ScaleOp};
use crate::randcore::{
    derive_step_seed, probe_noise_lane, scale_probe_lane, Seed, ZDist,
};

/// Which estimator turns loss evaluations into projected-gradient scalars.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    /// Two evaluations per probe: `(L+ - L-) / (2 eps)`.
    Central,
    /// One evaluation per step against the previous step's evaluation:
    /// `(L(theta_t + eps z_t) - L_prev) / eps`, zero at the first step.
    OnePoint,
    /// Central with per-group scaled perturbation; the update multiplies the
    /// factors back in, preserving the estimator's expectation.
    VarianceScaled,
    /// Central with per-group scaled perturbation applied as-is, which
    /// preconditions the expected update by the inverse factors.
    ExpectationScaled,
}

/// Where per-group scale factors come from for the scaled estimators.
#[derive(Debug, Clone, PartialEq)]
pub enum ScaleSource {
    /// Factor 1 everywhere (the scaled estimators degenerate to `Central`).
    Ones,
    /// Root-mean-square of each group's current values, refreshed every step.
    /// Replayable from the trajectory alone: factors are a function of the
    /// evolving parameters, not of any extra evaluation.
    ParamNorm,
    /// Per-group gradient-norm estimate from dedicated probe pairs, cached
    /// and refreshed every `refresh_every` steps. Costs evaluations, so runs
    /// using it cannot be replayed without re-evaluating.
    GradNorm { probes: usize, refresh_every: u64 },
    /// Caller-fixed factors, one per group.
    External(Vec<f64>),
}

/// Full estimator configuration for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub n_probes: usize,
    pub epsilon: f64,
    pub dist: ZDist,
    pub scale: ScaleSource,
}

impl EstimatorConfig {
    pub fn central(n_probes: usize, epsilon: f64, dist: ZDist) -> Self {
        Self { kind: EstimatorKind::Central, n_probes, epsilon, dist, scale: ScaleSource::Ones }
    }
}

/// The scalar trace of one optimization step: everything a replay needs
/// beyond the run header. Seeds are *not* stored — they are re-derived from
/// the master seed and the step index.
#[derive(Debug, Clone, PartialEq)]
pub struct GradRecord {
    pub step: u64,
    pub epsilon: f64,
    pub projected_grads: Vec<f64>,
}

/// Result of one estimation step.
#[derive(Debug, Clone)]
pub struct EstimateOutcome {
    pub record: GradRecord,
    /// Factors the update walker must combine back in (`None` for unscaled
    /// estimators and the expectation-scaled variant).
    pub apply_scale: Option<(Vec<f64>, ScaleOp)>,
    /// Factors the perturbation used (`None` for unscaled estimators); the
    /// update walker must regenerate `z` under the same scaling.
    pub perturb_scale: Option<Vec<f64>>,
    /// Largest |loss| observed, for divergence tripwires.
    pub max_abs_loss: f64,
}

/// Estimation errors. Non-finite losses restore the parameters before
/// returning, so a caller can abort cleanly.
#[derive(Debug, Error, PartialEq)]
pub enum EstimError {
    #[error("non-finite loss at step {step}, probe {probe}, {point} point")]
    NonFiniteLoss { step: u64, probe: usize, point: &'static str },
    #[error("the one-point estimator runs a single probe per step")]
    OnePointNeedsSingleProbe,
    #[error("estimator needs at least one probe")]
    ZeroProbes,
    #[error("perturbation size must be positive and finite")]
    BadEpsilon,
    #[error("gradient-norm scaling needs loss evaluations, which replay forbids")]
    NotReplayable,
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Seed for probe `j` of `step`.
pub fn probe_seed(master: Seed, step: u64, probe: usize) -> Seed {
    derive_step_seed(master, step, probe_noise_lane(probe))
}

/// A configured estimator with its small amount of cross-step state (cached
/// scale factors, the one-point reference loss).
#[derive(Debug, Clone)]
pub struct Estimator {
    cfg: EstimatorConfig,
    cached_scale: Option<Vec<f64>>,
    last_loss: Option<f64>,
}

impl Estimator {
    pub fn new(cfg: EstimatorConfig) -> Result<Self, EstimError> {
        if cfg.n_probes == 0 {
            return Err(EstimError::ZeroProbes);
        }
        if cfg.kind == EstimatorKind::OnePoint && cfg.n_probes != 1 {
            return Err(EstimError::OnePointNeedsSingleProbe);
        }
        if !(cfg.epsilon.is_finite() && cfg.epsilon > 0.0) {
            return Err(EstimError::BadEpsilon);
        }
        Ok(Self { cfg, cached_scale: None, last_loss: None })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    /// True when every quantity this estimator consumes is derivable from
    /// the parameters and the trajectory alone (no extra loss evaluations),
    /// i.e. when a recorded run can be replayed with zero forward passes.
    pub fn replayable_without_evals(&self) -> bool {
        !matches!(self.cfg.scale, ScaleSource::GradNorm { .. })
    }

    /// Run one estimation step at the current parameters. The parameters are
    /// bit-identical before and after this call (including on the non-finite
    /// error path), except for f32 stores where the perturb cycle's rounding
    /// is itself deterministic.
    pub fn estimate(
        &mut self,
        obj: &dyn Objective,
        store: &mut ParamStore,
        mask: &Mask,
        batch: &[usize],
        master: Seed,
        step: u64,
    ) -> Result<EstimateOutcome, EstimError> {
        self.estimate_with_probes(obj, store, mask, batch, master, step, self.cfg.n_probes)
    }

    /// [`Estimator::estimate`] with the probe count overridden for this step
    /// (probe-count schedules vary `n` over a run).
    pub fn estimate_with_probes(
        &mut self,
        obj: &dyn Objective,
        store: &mut ParamStore,
        mask: &Mask,
        batch: &[usize],
        master: Seed,
        step: u64,
        n_probes: usize,
    ) -> Result<EstimateOutcome, EstimError> {
        if n_probes == 0 {
            return Err(EstimError::ZeroProbes);
        }
        if self.cfg.kind == EstimatorKind::OnePoint && n_probes != 1 {
            return Err(EstimError::OnePointNeedsSingleProbe);
        }
        let factors = self.refresh_scale(obj, store, mask, master, step)?;
        match self.cfg.kind {
            EstimatorKind::OnePoint => self.estimate_one_point(obj, store, mask, batch, master, step),
            EstimatorKind::Central => {
                self.estimate_central(obj, store, mask, batch, master, step, None, n_probes)
            }
            EstimatorKind::VarianceScaled => {
                let f = factors.expect("scaled estimator always has factors");
                let out =
                    self.estimate_central(obj, store, mask, batch, master, step, Some(&f), n_probes)?;
                Ok(EstimateOutcome {
                    apply_scale: Some((f.clone(), ScaleOp::Multiply)),
                    perturb_scale: Some(f),
                    ..out
                })
            }
            EstimatorKind::ExpectationScaled => {
                let f = factors.expect("scaled estimator always has factors");
                let out =
                    self.estimate_central(obj, store, mask, batch, master, step, Some(&f), n_probes)?;
                Ok(EstimateOutcome { apply_scale: None, perturb_scale: Some(f), ..out })
            }
        }
    }

    /// Reproduce the parameter side effects of [`Estimator::estimate`]
    /// without evaluating the objective: the identical walker passes in the
    /// identical order. The perturb/restore cycle leaves an ulp-level
    /// floating-point residue on the parameters, so a replay that skipped it
    /// would drift off the training trajectory; running the same arithmetic
    /// (which needs no forward passes) keeps replay bit-exact.
    pub fn replay_cycle(
        &mut self,
        store: &mut ParamStore,
        mask: &Mask,
        master: Seed,
        step: u64,
    ) -> Result<(), EstimError> {
        let eps = self.cfg.epsilon;
        let dist = self.cfg.dist;
        if self.cfg.kind == EstimatorKind::OnePoint {
            let seed = probe_seed(master, step, 0);
            store.perturb_in_place(eps, seed, dist, mask)?;
            store.perturb_in_place(-eps, seed, dist, mask)?;
            return Ok(());
        }
        let factors = self.replay_factors(store)?;
        let scaled = factors.as_deref().map(|f| (f, ScaleOp::Divide));
        for probe in 0..self.cfg.n_probes {
            let seed = probe_seed(master, step, probe);
            store.add_scaled_noise(eps, seed, dist, scaled, mask)?;
            store.add_scaled_noise(-2.0 * eps, seed, dist, scaled, mask)?;
            store.add_scaled_noise(eps, seed, dist, scaled, mask)?;
        }
        Ok(())
    }

    /// The per-group factors a replayed step would use, computed from the
    /// current (pre-cycle) parameters without any objective evaluation.
    /// `None` for the unscaled estimators; an error for gradient-norm
    /// scaling, whose factors existed only at training time.
    pub fn replay_factors(&self, store: &ParamStore) -> Result<Option<Vec<f64>>, EstimError> {
        match (&self.cfg.kind, &self.cfg.scale) {
            (EstimatorKind::Central | EstimatorKind::OnePoint, _) => Ok(None),
            (_, ScaleSource::Ones) => Ok(Some(vec![1.0; store.num_groups()])),
            (_, ScaleSource::External(f)) => Ok(Some(f.clone())),
            (_, ScaleSource::ParamNorm) => Ok(Some(param_rms_factors(store))),
            (_, ScaleSource::GradNorm { .. }) => Err(EstimError::NotReplayable),
        }
    }

    /// Current per-group factors for the scaled estimators; `None` for the
    /// plain ones. Refreshes the gradient-norm cache on its schedule.
    pub fn refresh_scale(
        &mut self,
        obj: &dyn Objective,
        store: &mut ParamStore,
        mask: &Mask,
        master: Seed,
        step: u64,
    ) -> Result<Option<Vec<f64>>, EstimError> {
        if !matches!(self.cfg.kind, EstimatorKind::VarianceScaled | EstimatorKind::ExpectationScaled) {
            return Ok(None);
        }
        let factors = match &self.cfg.scale {
            ScaleSource::Ones => vec![1.0; store.num_groups()],
            ScaleSource::External(f) => f.clone(),
            ScaleSource::ParamNorm => param_rms_factors(store),
            ScaleSource::GradNorm { probes, refresh_every } => {
                let due = self.cached_scale.is_none()
                    || (*refresh_every > 0 && step % *refresh_every == 0);
                if due {
                    let f = grad_norm_factors(
                        obj, store, mask, master, step, *probes, self.cfg.epsilon,
                    )?;
                    self.cached_scale = Some(f);
                }
                self.cached_scale.clone().unwrap()
            }
        };
        Ok(Some(factors))
    }

    #[allow(clippy::too_many_arguments)]
    fn estimate_central(
        &mut self,
        obj: &dyn Objective,
        store: &mut ParamStore,
        mask: &Mask,
        batch: &[usize],
        master: Seed,
        step: u64,
        factors: Option<&[f64]>,
        n_probes: usize,
    ) -> Result<EstimateOutcome, EstimError> {
        let eps = self.cfg.epsilon;
        let dist = self.cfg.dist;
        let scaled = factors.map(|f| (f, ScaleOp::Divide));
        let mut pgs = Vec::with_capacity(n_probes);
        let mut max_abs_loss: f64 = 0.0;
        for probe in 0..n_probes {
            let seed = probe_seed(master, step, probe);
            store.add_scaled_noise(eps, seed, dist, scaled, mask)?;
            let plus = obj.eval(store, batch);
            if !plus.is_finite() {
                store.add_scaled_noise(-eps, seed, dist, scaled, mask)?;
                return Err(EstimError::NonFiniteLoss { step, probe, point: "forward" });
            }
            store.add_scaled_noise(-2.0 * eps, seed, dist, scaled, mask)?;
            let minus = obj.eval(store, batch);
            store.add_scaled_noise(eps, seed, dist, scaled, mask)?;
            if !minus.is_finite() {
                return Err(EstimError::NonFiniteLoss { step, probe, point: "backward" });
            }
            max_abs_loss = max_abs_loss.max(plus.abs()).max(minus.abs());
            pgs.push((plus - minus) / (2.0 * eps));
        }
        Ok(EstimateOutcome {
            record: GradRecord { step, epsilon: eps, projected_grads: pgs },
            apply_scale: None,
            perturb_scale: None,
            max_abs_loss,
        })
    }

    fn estimate_one_point(
        &mut self,
        obj: &dyn Objective,
        store: &mut ParamStore,
        mask: &Mask,
        batch: &[usize],
        master: Seed,
        step: u64,
    ) -> Result<EstimateOutcome, EstimError> {
        let eps = self.cfg.epsilon;
        let seed = probe_seed(master, step, 0);
        store.perturb_in_place(eps, seed, self.cfg.dist, mask)?;
        let loss = obj.eval(store, batch);
        store.perturb_in_place(-eps, seed, self.cfg.dist, mask)?;
        if !loss.is_finite() {
            return Err(EstimError::NonFiniteLoss { step, probe: 0, point: "forward" });
        }
        // First step has no reference evaluation: record a zero gradient and
        // seed the reference for the next step.
        let pg = match self.last_loss {
            Some(prev) => (loss - prev) / eps,
            None => 0.0,
        };
        self.last_loss = Some(loss);
        Ok(EstimateOutcome {
            record: GradRecord { step, epsilon: eps, projected_grads: vec![pg] },
            apply_scale: None,
            perturb_scale: None,
            max_abs_loss: loss.abs(),
        })
    }
}

/// Root-mean-square of each group's values, floored at 1e-8 so a zero group
/// cannot blow up the divided perturbation. Frozen groups get factor 1.
fn param_rms_factors(store: &ParamStore) -> Vec<f64> {
    store
        .groups()
        .iter()
        .enumerate()
        .map(|(g, desc)| {
            if !desc.trainable || desc.len == 0 {
                return 1.0;
            }
            let vals = store.group_values(g);
            let rms = (vals.iter().map(|x| x * x).sum::<f64>() / desc.len as f64).sqrt();
            rms.max(1e-8)
        })
        .collect()
}

/// Per-group gradient-norm estimate: for each trainable group, run probe
/// pairs with Gaussian noise confined to that group; `E[pg^2] = ||g_group||^2`
/// for Gaussian probes, so the RMS of the projected gradients estimates the
/// group's gradient norm. Normalized per coordinate to match the
/// root-mean-square convention of the other sources.
fn grad_norm_factors(
    obj: &dyn Objective,
    store: &mut ParamStore,
    mask: &Mask,
    master: Seed,
    step: u64,
    probes: usize,
    eps: f64,
) -> Result<Vec<f64>, EstimError> {
    let probes = probes.max(1);
    let num_groups = store.num_groups();
    let mut factors = vec![1.0; num_groups];
    let full: Vec<usize> = (0..obj.dataset_size()).collect();
    for g in 0..num_groups {
        if !store.groups()[g].trainable || !mask.on(g) || store.groups()[g].len == 0 {
            continue;
        }
        let mut solo = Mask::all_on(num_groups);
        for other in 0..num_groups {
            solo.set(other, other == g);
        }
        let mut sumsq = 0.0;
        for j in 0..probes {
            let seed = derive_step_seed(master, step, scale_probe_lane(g, probes, j));
            store.perturb_in_place(eps, seed, ZDist::Gaussian, &solo)?;
            let plus = obj.eval(store, &full);
            store.perturb_in_place(-2.0 * eps, seed, ZDist::Gaussian, &solo)?;
            let minus = obj.eval(store, &full);
            store.perturb_in_place(eps, seed, ZDist::Gaussian, &solo)?;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(EstimError::NonFiniteLoss { step, probe: j, point: "scale" });
            }
            let pg = (plus - minus) / (2.0 * eps);
            sumsq += pg * pg;
        }
        let norm = (sumsq / probes as f64).sqrt();
        factors[g] = (norm / (store.groups()[g].len as f64).sqrt()).max(1e-8);
    }
    Ok(factors)
}
