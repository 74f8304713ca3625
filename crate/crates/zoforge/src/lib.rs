//! zoforge: a zeroth-order optimization engine built around seed replay.
//!
//! The engine estimates gradients from forward passes only (simultaneous
//! perturbation with a shared random seed), updates parameters in place, and
//! records each step as a handful of scalars. Because every perturbation
//! vector is regenerated from a derived seed, a full training run can be
//! stored in ~2 bytes per step and replayed bit-exactly without a single
//! objective evaluation.
//!
//! Module map:
//! - [`randcore`]: seed derivation, Gaussian/sphere noise streams, minibatch
//!   sampling — the deterministic substrate everything else replays against.
//! - [`paramspace`]: flat parameter store with named groups, trainable masks,
//!   in-place perturbation, and low-rank adapters.
//! - [`objectives`]: desk-scale objectives (quadratic, logistic, MLP, metric)
//!   with analytic-gradient oracles and synthetic dataset generators.
//! - [`estimators`]: projected-gradient estimators (two-point, one-point,
//!   scale-modified variants) and per-group gradient-norm probes.
//! - [`optimizers`]: the seed-replay training loop (SGD / momentum / Adam),
//!   schedules, staged trainable masks, and divergence handling.
//! - [`trajectory`]: the binary trajectory codec and the zero-forward-pass
//!   replayer.
//! - [`theorylab`]: Monte Carlo validation suites for the estimator moment
//!   and descent-rate predictions the engine is designed around.
//! - [`config`]: TOML run configuration shared by the CLI and the Python
//!   bindings.

pub mod config;
pub mod estimators;
pub mod objectives;
pub mod optimizers;
pub mod paramspace;
pub mod randcore;
pub mod theorylab;
pub mod trajectory;
