//! `zoforge`: train with seed-replay zeroth-order optimization, replay
//! recorded trajectories with zero loss evaluations, and run the Monte Carlo
//! theory-validation suites.
//!
//! Exit codes are a stable contract: 0 success (or all suites passing),
//! 1 usage or configuration error, 2 numerical divergence.

mod params_io;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{ArgGroup, Parser, Subcommand};
use zoforge::config::ConfigFile;
use zoforge::optimizers::{
    make_trajectory, replay, train, MetricsRow, ReplayOverrides, RunError, StagePlan,
};
use zoforge::theorylab::{all_suites, run_suite, SuiteConfig};
use zoforge::trajectory::Trajectory;

/// Every config key, with default and unit; kept next to the parser so
/// `--help` stays the single reference for the file format.
const CONFIG_HELP: &str = "\
CONFIG FILE KEYS (TOML; unknown keys are rejected):

  [run]
    seed         = 0        master seed (u64); overridden by --seed, then ZOFORGE_SEED
    steps        = 1000     optimization steps (count)
    batch_size   = <all>    examples per step (count; default: full dataset)
    eval_every   = 0        metrics cadence in steps; 0 = final step only
    timings      = false    record wall-clock ns in metrics (breaks byte-determinism)
    [[run.stage]]           optional staged schedule; each stage:
      start_step = <u64>    first step of the stage (steps)
      groups     = [..]     group names trained from then on (default: all)

  [optimizer]
    algo                 = \"sgd\"      sgd | momentum | adam
    lr                   = 0.01       learning rate (loss units per unit gradient)
    lr_schedule          = \"constant\" constant | linear (linear decay to 0 over the run)
    weight_decay         = 0.0        decoupled shrink coefficient (1/step)
    beta1                = 0.9        first-moment decay (dimensionless)
    beta2                = 0.999      second-moment decay (dimensionless)
    eps_adam             = 1e-8       adam denominator floor (gradient units)
    history              = \"dense\"    dense | reconstruct (moments from scalar history)
    probe_schedule       = []         [[from_step, probes], ..] breakpoints
    couple_lr_to_probes  = false      scale lr with probe count relative to step 0

  [estimator]
    kind                = \"central\"  central | one_point | variance_scaled | expectation_scaled
    probes              = 1          probe directions per step (count)
    epsilon             = 1e-3       perturbation radius (parameter units)
    dist                = \"sphere\"   sphere | gaussian
    scale               = \"ones\"     ones | param_norm | grad_norm | external
    scale_factors       = <none>     per-group factors, required for external
    scale_probes        = 2          probe pairs per group for grad_norm
    scale_refresh_every = 0          grad_norm refresh cadence in steps; 0 = once

  [objective]  (required; fields depend on kind)
    kind = \"quadratic\"       dim, rank?, eigenvalues?, theta0 = 1.0
    kind = \"blobs_logistic\"  examples, dim, center_norm = 2.0, l2 = 0.0, data_seed = 1
    kind = \"blobs_exp\"       examples, dim, center_norm = 2.0, data_seed = 1
    kind = \"blobs_accuracy\"  examples, dim, center_norm = 2.0, data_seed = 1
    kind = \"mlp\"             examples, in_dim, hidden, data_seed = 1, init_seed = 2

  [trajectory]
    precision = \"bf16\"    bf16 | f32 | f64 (stored gradient scalar width)
";

#[derive(Parser)]
#[command(
    name = "zoforge",
    version,
    about = "Seed-replay zeroth-order optimization: train, replay, validate"
)]
struct Cli {
    /// Worker threads for Monte Carlo suites. Training and replay are
    /// sequential by construction; every output is worker-count invariant.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a training job described by a TOML config file.
    #[command(after_help = CONFIG_HELP)]
    Train {
        /// Path to the config file.
        #[arg(long)]
        config: PathBuf,
        /// Write the recorded trajectory (binary) here.
        #[arg(long)]
        out_trajectory: Option<PathBuf>,
        /// Write per-evaluation metrics CSV here.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Master seed; beats ZOFORGE_SEED, which beats the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the final parameters here (params container).
        #[arg(long)]
        out_params: Option<PathBuf>,
        /// Write the initial parameters here before training starts.
        #[arg(long)]
        out_init_params: Option<PathBuf>,
        /// Record wall-clock nanoseconds in metrics rows.
        #[arg(long)]
        timings: bool,
    },
    /// Rebuild final parameters from a trajectory with zero loss evaluations.
    #[command(group(
        ArgGroup::new("init").required(true).args(["init_params", "init_seed"])
    ))]
    Replay {
        /// Recorded trajectory file.
        #[arg(long)]
        trajectory: PathBuf,
        /// Initial parameters as a params container file.
        #[arg(long)]
        init_params: Option<PathBuf>,
        /// Rebuild initial parameters from --config, reseeding any seeded
        /// initializer with this value.
        #[arg(long)]
        init_seed: Option<u64>,
        /// Config of the original run; required with --init-seed, and the
        /// only way to replay runs that used non-default estimator scaling,
        /// moment history, or stage schedules.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the reconstructed parameters.
        #[arg(long)]
        out_params: PathBuf,
    },
    /// Run theory-validation suites and write evidence CSVs.
    Validate {
        /// Suite name, or `all`.
        #[arg(long, default_value = "all")]
        suite: String,
        /// Directory for per-suite evidence CSVs (created if missing).
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Suite seed; beats ZOFORGE_SEED, which beats the built-in default.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print a trajectory file's header and size.
    Inspect {
        /// Recorded trajectory file.
        #[arg(long)]
        trajectory: PathBuf,
    },
}

/// Failure carrying its process exit code (1 = usage/config, 2 = divergence).
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
    fn divergence(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
    fn from_run_error(e: RunError) -> Self {
        match e {
            RunError::Diverged { .. } => Self::divergence(e.to_string()),
            other => Self::config(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let workers = cli.workers.max(1);
    let result = match cli.command {
        Cmd::Train {
            config,
            out_trajectory,
            metrics,
            seed,
            out_params,
            out_init_params,
            timings,
        } => cmd_train(
            &config,
            out_trajectory.as_deref(),
            metrics.as_deref(),
            seed,
            out_params.as_deref(),
            out_init_params.as_deref(),
            timings,
        ),
        Cmd::Replay { trajectory, init_params, init_seed, config, out_params } => cmd_replay(
            &trajectory,
            init_params.as_deref(),
            init_seed,
            config.as_deref(),
            &out_params,
        ),
        Cmd::Validate { suite, csv, seed } => cmd_validate(&suite, csv.as_deref(), seed, workers),
        Cmd::Inspect { trajectory } => cmd_inspect(&trajectory),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// --seed beats ZOFORGE_SEED; a malformed environment value is an error, not
/// a silent fallback.
fn seed_override(flag: Option<u64>) -> Result<Option<u64>, Failure> {
    if let Some(s) = flag {
        return Ok(Some(s));
    }
    match std::env::var("ZOFORGE_SEED") {
        Ok(text) => text
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Failure::config(format!("ZOFORGE_SEED is not a u64: `{text}`"))),
        Err(_) => Ok(None),
    }
}

fn load_config(path: &Path) -> Result<ConfigFile, Failure> {
    let text = fs::read_to_string(path).map_err(|e| {
        Failure::config(format!("cannot read config file {}: {e}", path.display()))
    })?;
    ConfigFile::from_toml_str(&text)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<(), Failure> {
    let mut out = String::from("step,loss,lr,n_probes,grad_norm_est,elapsed_ns\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:e},{:e},{},{:e},{}\n",
            r.step, r.loss, r.lr, r.n_probes, r.grad_norm_est, r.elapsed_ns
        ));
    }
    fs::write(path, out)
        .map_err(|e| Failure::config(format!("cannot write metrics {}: {e}", path.display())))
}

fn cmd_train(
    config: &Path,
    out_trajectory: Option<&Path>,
    metrics: Option<&Path>,
    seed: Option<u64>,
    out_params: Option<&Path>,
    out_init_params: Option<&Path>,
    timings: bool,
) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed_override(seed)? {
        cfg.set_seed(s);
    }
    if timings {
        cfg.run.timings = true;
    }
    let built = cfg.build().map_err(|e| Failure::config(e.to_string()))?;
    let mut store = built.store;
    if let Some(path) = out_init_params {
        params_io::write_params(&store, path)
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    }
    let plan = if built.stages.is_empty() {
        StagePlan::single(&store)
    } else {
        StagePlan::resolve(&built.stages, &store).map_err(Failure::from_run_error)?
    };
    let result = train(
        &built.objective,
        &mut store,
        &plan,
        &built.run,
        &built.opt,
        &built.est,
        built.precision,
    )
    .map_err(Failure::from_run_error)?;

    if let Some(path) = out_trajectory {
        let traj = make_trajectory(
            &result,
            &built.run,
            &built.opt,
            &built.est,
            built.precision,
            store.layout_hash(),
        )
        .map_err(|e| Failure::config(e.to_string()))?;
        traj.write_to(path)
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    }
    if let Some(path) = metrics {
        write_metrics_csv(path, &result.metrics)?;
    }
    if let Some(path) = out_params {
        params_io::write_params(&store, path)
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    }
    println!(
        "train steps={} initial_loss={:e} final_loss={:e} best_loss={:e} forward_passes={}",
        built.run.steps,
        result.initial_loss,
        result.final_loss,
        result.best_loss,
        result.forward_passes
    );
    Ok(())
}

fn cmd_replay(
    trajectory: &Path,
    init_params: Option<&Path>,
    init_seed: Option<u64>,
    config: Option<&Path>,
    out_params: &Path,
) -> Result<(), Failure> {
    let traj = Trajectory::read_from(trajectory)
        .map_err(|e| Failure::config(format!("{}: {e}", trajectory.display())))?;

    let built = match config {
        Some(path) => {
            let mut cfg = load_config(path)?;
            if let Some(s) = init_seed {
                cfg.set_init_seed(s);
            }
            Some(cfg.build().map_err(|e| Failure::config(e.to_string()))?)
        }
        None => None,
    };

    let mut store = match (init_params, &built) {
        (Some(path), _) => params_io::read_params(path)
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?,
        (None, Some(b)) => b.store.clone(),
        (None, None) => {
            return Err(Failure::config(
                "--init-seed requires --config to rebuild the initial parameters",
            ))
        }
    };

    let overrides = match &built {
        Some(b) => ReplayOverrides {
            est_kind: b.est.kind,
            scale: b.est.scale.clone(),
            history: b.opt.history,
            stages: (!b.stages.is_empty()).then(|| b.stages.clone()),
        },
        None => ReplayOverrides::default(),
    };

    let report = replay(&mut store, &traj, &overrides).map_err(Failure::from_run_error)?;
    params_io::write_params(&store, out_params)
        .map_err(|e| Failure::config(format!("{}: {e}", out_params.display())))?;
    println!(
        "replay steps_applied={} forward_passes={}",
        report.steps_applied, report.forward_passes
    );
    Ok(())
}

fn cmd_validate(
    suite: &str,
    csv: Option<&Path>,
    seed: Option<u64>,
    workers: usize,
) -> Result<(), Failure> {
    let mut cfg = SuiteConfig::default();
    cfg.workers = workers;
    if let Some(s) = seed_override(seed)? {
        cfg.seed = zoforge::randcore::Seed(s);
    }

    let names: Vec<&str> = if suite == "all" {
        all_suites().to_vec()
    } else if all_suites().contains(&suite) {
        vec![suite]
    } else {
        return Err(Failure::config(format!(
            "unknown suite `{suite}`; valid: all, {}",
            all_suites().join(", ")
        )));
    };

    if let Some(dir) = csv {
        fs::create_dir_all(dir).map_err(|e| {
            Failure::config(format!("cannot create csv directory {}: {e}", dir.display()))
        })?;
    }

    let mut all_pass = true;
    for name in names {
        let report = run_suite(name, &cfg).expect("suite names were validated above");
        println!("{}", report.summary_line());
        for row in &report.rows {
            println!(
                "  row={} {} measured={} predicted={} tol={}",
                row.label,
                if row.pass { "PASS" } else { "FAIL" },
                row.measured,
                row.predicted,
                row.tolerance
            );
        }
        if let Some(dir) = csv {
            let path = dir.join(format!("{name}.csv"));
            let file = fs::File::create(&path).map_err(|e| {
                Failure::config(format!("cannot write {}: {e}", path.display()))
            })?;
            let mut w = std::io::BufWriter::new(file);
            report
                .write_csv(&mut w)
                .and_then(|()| w.flush())
                .map_err(|e| Failure::config(format!("cannot write {}: {e}", path.display())))?;
        }
        all_pass &= report.pass;
    }
    if all_pass {
        Ok(())
    } else {
        Err(Failure::config("one or more suites failed"))
    }
}

fn cmd_inspect(trajectory: &Path) -> Result<(), Failure> {
    let bytes = fs::metadata(trajectory)
        .map(|m| m.len())
        .map_err(|e| Failure::config(format!("{}: {e}", trajectory.display())))?;
    let traj = Trajectory::read_from(trajectory)
        .map_err(|e| Failure::config(format!("{}: {e}", trajectory.display())))?;
    let h = &traj.header;
    println!(
        "trajectory file_bytes={bytes} steps={} n_probes={} grad_precision={:?} algo={:?} \
         z_dist={:?} master_seed={} epsilon={:e} lr0={:e} lr_schedule={:?} weight_decay={:e} \
         layout_hash={:#018x}",
        h.steps,
        h.n_probes,
        h.grad_precision,
        h.algo,
        h.z_dist,
        h.master_seed.0,
        h.epsilon,
        h.lr0,
        h.lr_schedule,
        h.weight_decay,
        h.layout_hash
    );
    Ok(())
}
