//! Python bindings: run training jobs from TOML config text, replay recorded
//! trajectories with zero loss evaluations, inspect the seed derivation, and
//! execute the theory-validation suites — all returning plain Python values.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use zoforge::config::ConfigFile;
use zoforge::optimizers::{
    make_trajectory, replay as replay_traj, train as train_run, ReplayOverrides, StagePlan,
};
use zoforge::randcore::{self, Seed};
use zoforge::theorylab::{all_suites, run_suite as run_suite_impl, SuiteConfig};
use zoforge::trajectory::Trajectory;

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Deterministic per-(step, lane) seed derivation used by every stream.
#[pyfunction]
fn derive_step_seed(master: u64, step: u64, lane: u32) -> u64 {
    randcore::derive_step_seed(Seed(master), step, lane).0
}

/// One perturbation direction drawn uniformly from the radius-sqrt(dim)
/// sphere, regenerated bitwise from its seed.
#[pyfunction]
fn sample_sphere(seed: u64, dim: usize) -> PyResult<Vec<f64>> {
    randcore::sample_sphere(Seed(seed), dim).map_err(value_err)
}

/// Result of a training run, with everything needed to replay it.
#[pyclass]
struct RunOutcome {
    #[pyo3(get)]
    initial_loss: f64,
    #[pyo3(get)]
    final_loss: f64,
    #[pyo3(get)]
    best_loss: f64,
    #[pyo3(get)]
    forward_passes: u64,
    /// Final parameter values, in store order.
    #[pyo3(get)]
    params: Vec<f64>,
    /// Initial parameter values, in store order.
    #[pyo3(get)]
    init_params: Vec<f64>,
    /// Encoded trajectory file bytes.
    #[pyo3(get)]
    trajectory: Vec<u8>,
    /// (step, loss) metrics rows.
    #[pyo3(get)]
    metrics: Vec<(u64, f64)>,
}

/// Run a training job described by TOML config text. `seed` overrides the
/// config's master seed.
#[pyfunction]
#[pyo3(signature = (config_text, seed=None))]
fn train(config_text: &str, seed: Option<u64>) -> PyResult<RunOutcome> {
    let mut cfg = ConfigFile::from_toml_str(config_text).map_err(value_err)?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    let built = cfg.build().map_err(value_err)?;
    let mut store = built.store;
    let init_params: Vec<f64> = (0..store.dim()).map(|i| store.get(i)).collect();
    let plan = if built.stages.is_empty() {
        StagePlan::single(&store)
    } else {
        StagePlan::resolve(&built.stages, &store).map_err(value_err)?
    };
    let result = train_run(
        &built.objective,
        &mut store,
        &plan,
        &built.run,
        &built.opt,
        &built.est,
        built.precision,
    )
    .map_err(runtime_err)?;
    let traj = make_trajectory(
        &result,
        &built.run,
        &built.opt,
        &built.est,
        built.precision,
        store.layout_hash(),
    )
    .map_err(runtime_err)?;
    Ok(RunOutcome {
        initial_loss: result.initial_loss,
        final_loss: result.final_loss,
        best_loss: result.best_loss,
        forward_passes: result.forward_passes,
        params: (0..store.dim()).map(|i| store.get(i)).collect(),
        init_params,
        trajectory: traj.encode().map_err(runtime_err)?,
        metrics: result.metrics.iter().map(|m| (m.step, m.loss)).collect(),
    })
}

/// Replay a recorded trajectory with zero loss evaluations. The config text
/// rebuilds the parameter layout (and supplies the estimator/history/stage
/// context the header does not carry); `init_params` overrides the config's
/// initial values. Returns `(params, steps_applied, forward_passes)`.
#[pyfunction]
#[pyo3(signature = (config_text, trajectory, init_params=None))]
fn replay(
    config_text: &str,
    trajectory: Vec<u8>,
    init_params: Option<Vec<f64>>,
) -> PyResult<(Vec<f64>, u64, u64)> {
    let cfg = ConfigFile::from_toml_str(config_text).map_err(value_err)?;
    let built = cfg.build().map_err(value_err)?;
    let mut store = built.store;
    if let Some(vals) = init_params {
        if vals.len() != store.dim() {
            return Err(PyValueError::new_err(format!(
                "init_params has {} values; the store holds {}",
                vals.len(),
                store.dim()
            )));
        }
        for (i, v) in vals.iter().enumerate() {
            store.set(i, *v);
        }
    }
    let traj = Trajectory::decode(&trajectory).map_err(value_err)?;
    let overrides = ReplayOverrides {
        est_kind: built.est.kind,
        scale: built.est.scale.clone(),
        history: built.opt.history,
        stages: (!built.stages.is_empty()).then(|| built.stages.clone()),
    };
    let report = replay_traj(&mut store, &traj, &overrides).map_err(runtime_err)?;
    Ok((
        (0..store.dim()).map(|i| store.get(i)).collect(),
        report.steps_applied,
        report.forward_passes,
    ))
}

/// Run one theory-validation suite; returns `(passed, summary_line, csv)`.
#[pyfunction]
#[pyo3(signature = (name, seed=None, workers=1))]
fn run_suite(name: &str, seed: Option<u64>, workers: usize) -> PyResult<(bool, String, String)> {
    let mut cfg = SuiteConfig::default();
    cfg.workers = workers.max(1);
    if let Some(s) = seed {
        cfg.seed = Seed(s);
    }
    let report = run_suite_impl(name, &cfg).ok_or_else(|| {
        PyValueError::new_err(format!("unknown suite `{name}`; valid: {}", all_suites().join(", ")))
    })?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(runtime_err)?;
    let csv = String::from_utf8(csv).map_err(runtime_err)?;
    Ok((report.pass, report.summary_line(), csv))
}

/// Names of all theory-validation suites.
#[pyfunction]
fn suites() -> Vec<String> {
    all_suites().iter().map(|s| s.to_string()).collect()
}

#[pymodule]
fn zoforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(derive_step_seed, m)?)?;
    m.add_function(wrap_pyfunction!(sample_sphere, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    m.add_function(wrap_pyfunction!(suites, m)?)?;
    m.add_class::<RunOutcome>()?;
    Ok(())
}
