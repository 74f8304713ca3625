//! Deterministic randomness: seed derivation, noise streams, and minibatch
//! sampling.
//!
//! Everything downstream (in-place perturbation, trajectory replay, the Monte
//! Carlo suites) depends on a `(seed, distribution)` pair producing the same
//! scalar sequence on every call, forever. The integer core is therefore a
//! hand-rolled xoshiro256++ seeded by splitmix64 expansion — pinned by golden
//! values below — rather than an external generator whose stream could shift
//! across versions. Gaussians come from Box–Muller on two 53-bit uniforms
//! (both pair members are consumed, cosine first), and sphere samples are `d`
//! Gaussians rescaled to squared norm `d`. None of this is cryptographic;
//! seeds are value-like handles, not secrets.

use thiserror::Error;

/// A replayable random seed. Value-like: deriving, copying, and comparing
/// seeds is cheap and has no hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Seed(pub u64);

/// Noise distribution for perturbation vectors.
///
/// `Sphere` draws lie on the sphere of radius `sqrt(d)` (so coordinates have
/// unit second moment, matching `Gaussian`); the dimension is supplied when a
/// stream is constructed because it equals the trainable parameter count of
/// the masked store being perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZDist {
    Gaussian,
    Sphere,
}

/// Errors from seed-stream construction and minibatch sampling.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum RandError {
    #[error("sphere noise requires dimension >= 1")]
    ZeroSphereDim,
    #[error("minibatch size {batch} exceeds dataset size {dataset}")]
    BatchTooLarge { batch: usize, dataset: usize },
    #[error("minibatch size must be >= 1")]
    EmptyBatch,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Lane for the per-step perturbation seed of probe 0.
pub const NOISE_LANE: u32 = 0;
/// Lane for the per-step minibatch seed.
pub const BATCH_LANE: u32 = 1;

/// Lane for the perturbation seed of probe `j` in a multi-probe step.
///
/// Probe 0 reproduces [`NOISE_LANE`], so single-probe runs are bit-identical
/// to the base scheme; all noise lanes are even and can never collide with
/// the odd minibatch or scale-probe lanes.
pub fn probe_noise_lane(probe: usize) -> u32 {
    2 * probe as u32
}

/// Lane for probe `j` of the per-group gradient-norm estimate of group `g`
/// (`k` probes per group). Odd and >= 3, so disjoint from noise/batch lanes.
pub fn scale_probe_lane(group: usize, probes_per_group: usize, probe: usize) -> u32 {
    3 + 2 * (group * probes_per_group + probe) as u32
}

fn splitmix_finalize(x: u64) -> u64 {
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the seed for `(step, lane)` from a run's master seed.
///
/// One splitmix64 finalizer round over
/// `master XOR ((step + 1) * 0x9E3779B97F4A7C15 + lane)`. Pure: no global
/// state, no step ordering requirement, so any step of a run can be replayed
/// in isolation.
pub fn derive_step_seed(master: Seed, step: u64, lane: u32) -> Seed {
    let mixed = master.0
        ^ (step
            .wrapping_add(1)
            .wrapping_mul(GOLDEN_GAMMA)
            .wrapping_add(lane as u64));
    Seed(splitmix_finalize(mixed))
}

/// xoshiro256++ with splitmix64 state expansion. Hand-rolled so the bit
/// stream is pinned by this crate's own golden tests.
#[derive(Debug, Clone)]
pub(crate) struct Xoshiro256pp {
    s: [u64; 4],
}

impl Xoshiro256pp {
    pub(crate) fn from_seed(seed: Seed) -> Self {
        let mut sm_state = seed.0;
        let mut s = [0u64; 4];
        for slot in &mut s {
            sm_state = sm_state.wrapping_add(GOLDEN_GAMMA);
            *slot = splitmix_finalize(sm_state);
        }
        Self { s }
    }

    pub(crate) fn next_u64(&mut self) -> u64 {
        let result = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in the open-at-zero interval (0, 1), using the top 53 bits.
    pub(crate) fn next_open_unit(&mut self) -> f64 {
        loop {
            let u = ((self.next_u64() >> 11) as f64) * (1.0 / (1u64 << 53) as f64);
            if u > 0.0 {
                return u;
            }
        }
    }
}

/// A replayable scalar noise stream.
///
/// Constructing a stream from the same `(seed, distribution)` always yields
/// the same sequence; `cursor()` counts scalars emitted so far, and a stream
/// advanced by `k` draws continues exactly where a fresh stream's first `k`
/// draws end (cursor additivity). Sphere streams emit exactly `dim` scalars —
/// one whole vector — because the rescale factor is a function of all `dim`
/// Gaussian draws (computed by a throwaway first pass over the same seed, so
/// no `dim`-length buffer is ever held).
#[derive(Debug, Clone)]
pub struct NoiseStream {
    seed: Seed,
    kind: StreamKind,
    rng: Xoshiro256pp,
    spare: Option<f64>,
    cursor: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum StreamKind {
    Gaussian,
    Sphere { dim: usize, scale: f64 },
}

impl NoiseStream {
    /// Unbounded stream of standard Gaussians.
    pub fn gaussian(seed: Seed) -> Self {
        Self {
            seed,
            kind: StreamKind::Gaussian,
            rng: Xoshiro256pp::from_seed(seed),
            spare: None,
            cursor: 0,
        }
    }

    /// Stream of the `dim` coordinates of one sample from the sphere of
    /// radius `sqrt(dim)`.
    pub fn sphere(seed: Seed, dim: usize) -> Result<Self, RandError> {
        if dim == 0 {
            return Err(RandError::ZeroSphereDim);
        }
        // First pass: accumulate the squared norm of the raw Gaussian vector
        // without storing it. The second (emitting) pass regenerates the same
        // draws from a fresh generator and rescales them.
        let mut scratch = Self::gaussian(seed);
        let mut sumsq = 0.0;
        for _ in 0..dim {
            let g = scratch.next();
            sumsq += g * g;
        }
        assert!(sumsq > 0.0, "degenerate all-zero sphere sample");
        let scale = (dim as f64 / sumsq).sqrt();
        Ok(Self {
            seed,
            kind: StreamKind::Sphere { dim, scale },
            rng: Xoshiro256pp::from_seed(seed),
            spare: None,
            cursor: 0,
        })
    }

    /// Stream for a run's configured distribution. `dim` is the trainable
    /// coordinate count; it is ignored for `Gaussian`.
    pub fn for_dist(seed: Seed, dist: ZDist, dim: usize) -> Result<Self, RandError> {
        match dist {
            ZDist::Gaussian => Ok(Self::gaussian(seed)),
            ZDist::Sphere => Self::sphere(seed, dim),
        }
    }

    pub fn seed(&self) -> Seed {
        self.seed
    }

    /// Count of scalars emitted so far.
    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    /// Next scalar. Panics if a sphere stream is drawn past its dimension;
    /// that is a consumer bug (the perturbation walkers consume exactly the
    /// trainable count the stream was constructed with).
    pub fn next(&mut self) -> f64 {
        let raw = match self.spare.take() {
            Some(second) => second,
            None => {
                // Box–Muller; cosine branch now, sine branch stashed for the
                // next call so both members of each pair are consumed.
                let u1 = self.rng.next_open_unit();
                let u2 = self.rng.next_open_unit();
                let r = (-2.0 * u1.ln()).sqrt();
                let angle = 2.0 * std::f64::consts::PI * u2;
                self.spare = Some(r * angle.sin());
                r * angle.cos()
            }
        };
        let value = match self.kind {
            StreamKind::Gaussian => raw,
            StreamKind::Sphere { dim, scale } => {
                assert!(
                    (self.cursor as usize) < dim,
                    "sphere stream of dimension {dim} drawn past its end"
                );
                raw * scale
            }
        };
        self.cursor += 1;
        value
    }
}

/// Sample one vector from the sphere of radius `sqrt(dim)`. Bit-identical to
/// collecting a [`NoiseStream::sphere`] stream.
pub fn sample_sphere(seed: Seed, dim: usize) -> Result<Vec<f64>, RandError> {
    let mut stream = NoiseStream::sphere(seed, dim)?;
    Ok((0..dim).map(|_| stream.next()).collect())
}

/// Sample `batch` distinct example indices from `0..dataset` by partial
/// Fisher–Yates, driven by the seed's integer stream.
pub fn sample_minibatch(seed: Seed, dataset: usize, batch: usize) -> Result<Vec<usize>, RandError> {
    if batch == 0 {
        return Err(RandError::EmptyBatch);
    }
    if batch > dataset {
        return Err(RandError::BatchTooLarge { batch, dataset });
    }
    let mut rng = Xoshiro256pp::from_seed(seed);
    let mut pool: Vec<usize> = (0..dataset).collect();
    for i in 0..batch {
        // Modulo bias is ~dataset/2^64 — irrelevant at desk scale.
        let j = i + (rng.next_u64() % (dataset - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(batch);
    Ok(pool)
}
