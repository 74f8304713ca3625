//! Parameter storage with named groups, seeded in-place perturbation, and
//! low-rank adapters.
//!
//! A [`ParamStore`] is one flat buffer (f64 or f32) carved into named groups.
//! All perturbation and update walkers regenerate noise from a seed and add
//! it coordinate-by-coordinate into the buffer, so no walker ever allocates a
//! buffer proportional to the parameter count: forward/backward perturbations
//! and updates are pure seed replay. Noise streams are consumed in group
//! order over the *effectively trainable* coordinates only (group marked
//! trainable AND enabled by the step's [`Mask`]), which makes the noise
//! mapping a pure function of `(layout, mask, seed)`.

use serde::Serialize;
use thiserror::Error;

use crate::randcore::{NoiseStream, RandError, Seed, ZDist};

/// Numeric width of the stored parameter values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoragePrecision {
    F64,
    F32,
}

/// Errors from store construction, masking, and walkers.
#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),
    #[error("duplicate parameter group `{0}`")]
    DuplicateGroup(String),
    #[error("group `{0}` is not a matrix; adapters need a (rows, cols) shape")]
    NotAMatrix(String),
    #[error("group `{0}` already has a low-rank adapter")]
    AlreadyAdapted(String),
    #[error("adapter rank must be >= 1")]
    ZeroRank,
    #[error("per-group scale factors must be finite and positive")]
    BadScale,
    #[error("expected {expected} per-group factors, got {got}")]
    FactorCount { expected: usize, got: usize },
    #[error(transparent)]
    Rand(#[from] RandError),
}

/// One named contiguous slice of the parameter buffer.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GroupDesc {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub trainable: bool,
    /// Row-major (rows, cols) for matrix groups; `None` for plain vectors.
    pub shape: Option<(usize, usize)>,
}

/// A low-rank adapter attached to a matrix group: the effective weight is
/// `W + (alpha / rank) * A * B` with `A` (rows x rank) and `B` (rank x cols)
/// living in two appended groups while the base group is frozen.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct AdapterDesc {
    pub target: String,
    pub a_group: usize,
    pub b_group: usize,
    pub rank: usize,
    pub alpha: f64,
}

/// Per-group on/off switch applied on top of the groups' `trainable` flags.
/// Stage schedules produce one mask per step; the store itself is never
/// reshaped mid-run.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    on: Vec<bool>,
}

impl Mask {
    /// Mask enabling every group (the single-stage default).
    pub fn all_on(num_groups: usize) -> Self {
        Self { on: vec![true; num_groups] }
    }

    /// Mask enabling only the named groups.
    pub fn from_named(store: &ParamStore, names: &[String]) -> Result<Self, ParamError> {
        let mut on = vec![false; store.num_groups()];
        for name in names {
            let g = store
                .group_index(name)
                .ok_or_else(|| ParamError::UnknownGroup(name.clone()))?;
            on[g] = true;
        }
        Ok(Self { on })
    }

    pub fn on(&self, group: usize) -> bool {
        self.on[group]
    }

    pub fn set(&mut self, group: usize, enabled: bool) {
        self.on[group] = enabled;
    }

    pub fn len(&self) -> usize {
        self.on.len()
    }

    pub fn is_empty(&self) -> bool {
        self.on.is_empty()
    }
}

/// How per-group factors combine with a walker's base coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleOp {
    /// Effective coefficient `coeff * factor[g]`.
    Multiply,
    /// Effective coefficient `coeff / factor[g]`.
    Divide,
}

#[derive(Debug, Clone)]
enum Storage {
    F64(Vec<f64>),
    F32(Vec<f32>),
}

impl Storage {
    fn len(&self) -> usize {
        match self {
            Storage::F64(v) => v.len(),
            Storage::F32(v) => v.len(),
        }
    }

    fn get(&self, i: usize) -> f64 {
        match self {
            Storage::F64(v) => v[i],
            Storage::F32(v) => v[i] as f64,
        }
    }

    fn set(&mut self, i: usize, x: f64) {
        match self {
            Storage::F64(v) => v[i] = x,
            Storage::F32(v) => v[i] = x as f32,
        }
    }

    fn push(&mut self, x: f64) {
        match self {
            Storage::F64(v) => v.push(x),
            Storage::F32(v) => v.push(x as f32),
        }
    }
}

/// Named, grouped parameter buffer with seed-replay walkers.
#[derive(Debug, Clone)]
pub struct ParamStore {
    storage: Storage,
    groups: Vec<GroupDesc>,
    adapters: Vec<AdapterDesc>,
}

/// 64-bit FNV-1a over a byte string. Used for layout identity, not security.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

impl ParamStore {
    pub fn new(precision: StoragePrecision) -> Self {
        Self {
            storage: match precision {
                StoragePrecision::F64 => Storage::F64(Vec::new()),
                StoragePrecision::F32 => Storage::F32(Vec::new()),
            },
            groups: Vec::new(),
            adapters: Vec::new(),
        }
    }

    /// Append a vector group; returns its group index.
    pub fn add_vector(
        &mut self,
        name: &str,
        values: &[f64],
        trainable: bool,
    ) -> Result<usize, ParamError> {
        self.add_group(name, values, trainable, None)
    }

    /// Append a row-major matrix group; returns its group index.
    pub fn add_matrix(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        values: &[f64],
        trainable: bool,
    ) -> Result<usize, ParamError> {
        assert_eq!(values.len(), rows * cols, "matrix data does not match shape");
        self.add_group(name, values, trainable, Some((rows, cols)))
    }

    fn add_group(
        &mut self,
        name: &str,
        values: &[f64],
        trainable: bool,
        shape: Option<(usize, usize)>,
    ) -> Result<usize, ParamError> {
        if self.group_index(name).is_some() {
            return Err(ParamError::DuplicateGroup(name.to_string()));
        }
        let offset = self.storage.len();
        for &x in values {
            self.storage.push(x);
        }
        self.groups.push(GroupDesc {
            name: name.to_string(),
            offset,
            len: values.len(),
            trainable,
            shape,
        });
        Ok(self.groups.len() - 1)
    }

    /// Total coordinate count (all groups, trainable or not).
    pub fn dim(&self) -> usize {
        self.storage.len()
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[GroupDesc] {
        &self.groups
    }

    pub fn adapters(&self) -> &[AdapterDesc] {
        &self.adapters
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    /// Value at a global coordinate, widened to f64.
    pub fn get(&self, i: usize) -> f64 {
        self.storage.get(i)
    }

    /// Store a value at a global coordinate, rounding to storage precision.
    pub fn set(&mut self, i: usize, x: f64) {
        self.storage.set(i, x);
    }

    /// Dense f64 copy of the whole buffer (diagnostics and objectives only;
    /// walkers never use this).
    pub fn values(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.get(i)).collect()
    }

    /// Dense f64 copy of one group.
    pub fn group_values(&self, group: usize) -> Vec<f64> {
        let g = &self.groups[group];
        (g.offset..g.offset + g.len).map(|i| self.get(i)).collect()
    }

    /// Coordinates the walkers will touch under `mask`: the sum of lengths of
    /// groups that are trainable and enabled.
    pub fn trainable_count(&self, mask: &Mask) -> usize {
        self.active_spans(mask).iter().map(|&(_, len)| len).sum()
    }

    /// `(offset, len)` spans of the active groups, in walker order. The vec
    /// is one entry per group at most — independent of the coordinate count.
    pub fn active_spans(&self, mask: &Mask) -> Vec<(usize, usize)> {
        assert_eq!(mask.len(), self.groups.len(), "mask/group count mismatch");
        self.groups
            .iter()
            .enumerate()
            .filter(|(g, desc)| desc.trainable && mask.on(*g))
            .map(|(_, desc)| (desc.offset, desc.len))
            .collect()
    }

    fn group_of_offset(&self, offset: usize) -> usize {
        self.groups
            .iter()
            .position(|g| g.offset == offset)
            .expect("span offset always comes from a group")
    }

    /// Core walker: `theta[i] += c_g * z_i` over the active coordinates, with
    /// `z` drawn from a fresh stream for `(seed, dist)` and `c_g` the base
    /// coefficient combined with the group's factor (if any).
    pub fn add_scaled_noise(
        &mut self,
        coeff: f64,
        seed: Seed,
        dist: ZDist,
        factors: Option<(&[f64], ScaleOp)>,
        mask: &Mask,
    ) -> Result<(), ParamError> {
        if let Some((f, _)) = factors {
            if f.len() != self.groups.len() {
                return Err(ParamError::FactorCount { expected: self.groups.len(), got: f.len() });
            }
            if f.iter().any(|x| !x.is_finite() || *x <= 0.0) {
                return Err(ParamError::BadScale);
            }
        }
        let spans = self.active_spans(mask);
        let total: usize = spans.iter().map(|&(_, len)| len).sum();
        if total == 0 {
            return Ok(());
        }
        let mut stream = NoiseStream::for_dist(seed, dist, total)?;
        for (offset, len) in spans {
            let c = match factors {
                None => coeff,
                Some((f, op)) => {
                    let factor = f[self.group_of_offset(offset)];
                    match op {
                        ScaleOp::Multiply => coeff * factor,
                        ScaleOp::Divide => coeff / factor,
                    }
                }
            };
            for i in offset..offset + len {
                let z = stream.next();
                self.storage.set(i, self.storage.get(i) + c * z);
            }
        }
        Ok(())
    }

    /// In-place perturbation `theta += eps * z(seed)` over active coords.
    pub fn perturb_in_place(
        &mut self,
        eps: f64,
        seed: Seed,
        dist: ZDist,
        mask: &Mask,
    ) -> Result<(), ParamError> {
        self.add_scaled_noise(eps, seed, dist, None, mask)
    }

    /// Update `theta += coeff * z(seed)` over active coords; callers pass
    /// `coeff = -lr * projected_grad` (or a per-probe variant).
    pub fn apply_projected_grad(
        &mut self,
        coeff: f64,
        seed: Seed,
        dist: ZDist,
        mask: &Mask,
    ) -> Result<(), ParamError> {
        self.add_scaled_noise(coeff, seed, dist, None, mask)
    }

    /// Decoupled weight decay `theta *= 1 - lr * lambda` over active coords.
    pub fn decay_in_place(&mut self, shrink: f64, mask: &Mask) {
        for (offset, len) in self.active_spans(mask) {
            for i in offset..offset + len {
                self.storage.set(i, self.storage.get(i) * shrink);
            }
        }
    }

    /// Attach a low-rank adapter to a matrix group: appends trainable groups
    /// `<target>.lora_a` (rows x rank, Gaussian / sqrt(rank)) and
    /// `<target>.lora_b` (rank x cols, zeros), and freezes the base group.
    /// Because `B` starts at zero the effective weights — and any loss — are
    /// unchanged at the moment of attachment.
    pub fn attach_low_rank_adapter(
        &mut self,
        target: &str,
        rank: usize,
        alpha: f64,
        init_seed: Seed,
    ) -> Result<(), ParamError> {
        if rank == 0 {
            return Err(ParamError::ZeroRank);
        }
        let t = self
            .group_index(target)
            .ok_or_else(|| ParamError::UnknownGroup(target.to_string()))?;
        let (rows, cols) = self.groups[t]
            .shape
            .ok_or_else(|| ParamError::NotAMatrix(target.to_string()))?;
        if self.adapters.iter().any(|a| a.target == target) {
            return Err(ParamError::AlreadyAdapted(target.to_string()));
        }
        let mut init = NoiseStream::gaussian(init_seed);
        let inv_sqrt_rank = 1.0 / (rank as f64).sqrt();
        let a_vals: Vec<f64> = (0..rows * rank).map(|_| init.next() * inv_sqrt_rank).collect();
        let a_group = self.add_group(&format!("{target}.lora_a"), &a_vals, true, Some((rows, rank)))?;
        let b_group = self.add_group(
            &format!("{target}.lora_b"),
            &vec![0.0; rank * cols],
            true,
            Some((rank, cols)),
        )?;
        self.groups[t].trainable = false;
        self.adapters.push(AdapterDesc {
            target: target.to_string(),
            a_group,
            b_group,
            rank,
            alpha,
        });
        Ok(())
    }

    /// Row-major dense view of a matrix group with any adapter applied:
    /// `W + (alpha / rank) * A * B`.
    pub fn effective_matrix(&self, name: &str) -> Result<Vec<f64>, ParamError> {
        let g = self
            .group_index(name)
            .ok_or_else(|| ParamError::UnknownGroup(name.to_string()))?;
        let (rows, cols) = self.groups[g]
            .shape
            .ok_or_else(|| ParamError::NotAMatrix(name.to_string()))?;
        let mut w = self.group_values(g);
        if let Some(ad) = self.adapters.iter().find(|a| a.target == name) {
            let a = self.group_values(ad.a_group);
            let b = self.group_values(ad.b_group);
            let scale = ad.alpha / ad.rank as f64;
            for r in 0..rows {
                for c in 0..cols {
                    let mut acc = 0.0;
                    for k in 0..ad.rank {
                        acc += a[r * ad.rank + k] * b[k * cols + c];
                    }
                    w[r * cols + c] += scale * acc;
                }
            }
        }
        Ok(w)
    }

    /// Identity of the group layout: a 64-bit FNV-1a over each group's name,
    /// a NUL, and its offset/len/trainable fields. Values do not participate,
    /// so the hash is stable across training but changes if groups are
    /// renamed, reordered, resized, or re-flagged.
    pub fn layout_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for g in &self.groups {
            bytes.extend_from_slice(g.name.as_bytes());
            bytes.push(0);
            bytes.extend_from_slice(&(g.offset as u64).to_le_bytes());
            bytes.extend_from_slice(&(g.len as u64).to_le_bytes());
            bytes.push(g.trainable as u8);
        }
        fnv1a64(&bytes)
    }

    /// Raw dump: all values as little-endian f64 bytes, plus a JSON sidecar
    /// describing storage precision, groups, and adapters.
    pub fn export_raw(&self) -> (Vec<u8>, String) {
        let mut bytes = Vec::with_capacity(self.dim() * 8);
        for i in 0..self.dim() {
            bytes.extend_from_slice(&self.get(i).to_le_bytes());
        }
        #[derive(Serialize)]
        struct Sidecar<'a> {
            storage: &'a str,
            dim: usize,
            layout_hash: String,
            groups: &'a [GroupDesc],
            adapters: &'a [AdapterDesc],
        }
        let sidecar = Sidecar {
            storage: match self.storage {
                Storage::F64(_) => "f64",
                Storage::F32(_) => "f32",
            },
            dim: self.dim(),
            layout_hash: format!("{:016x}", self.layout_hash()),
            groups: &self.groups,
            adapters: &self.adapters,
        };
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        (bytes, json)
    }
}
