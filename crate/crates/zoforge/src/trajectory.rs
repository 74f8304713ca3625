//! The trajectory file: a run's entire update history as scalars.
//!
//! Because every update direction is reconstructible from a seed, a training
//! run is fully described by its header (seeds, hyperparameters, layout
//! identity) plus one projected-gradient scalar per probe per step. At two
//! bytes per scalar a 20,000-step single-probe run is a 40,092-byte file,
//! independent of how many parameters were trained.
//!
//! Layout (all little-endian):
//!
//! | offset | bytes | field                                        |
//! |-------:|------:|----------------------------------------------|
//! |      0 |     4 | magic `MZOT`                                 |
//! |      4 |     1 | format version (1)                           |
//! |      5 |     1 | gradient precision: 0 bf16, 1 f32, 2 f64     |
//! |      6 |     1 | optimizer: 0 sgd, 1 momentum, 2 adam         |
//! |      7 |     1 | noise distribution: 0 gaussian, 1 sphere     |
//! |      8 |     8 | master seed                                  |
//! |     16 |     4 | step count `T`                               |
//! |     20 |     2 | probes per step `n`                          |
//! |     22 |     2 | reserved (zero)                              |
//! |     24 |     8 | perturbation size `eps` (f64)                |
//! |     32 |     8 | base learning rate (f64)                     |
//! |     40 |     1 | lr schedule: 0 constant, 1 linear decay      |
//! |     41 |     7 | reserved (zero)                              |
//! |     48 |     8 | weight decay (f64)                           |
//! |     56 |     8 | beta1 (f64)                                  |
//! |     64 |     8 | beta2 (f64)                                  |
//! |     72 |     8 | adam epsilon (f64)                           |
//! |     80 |     8 | parameter-group layout hash                  |
//! |     88 |     4 | CRC-32 of bytes 0..88                        |
//! |     92 |  Tnw | payload: T*n scalars, step-major, width w    |
//!
//! The CRC covers the header only; payload scalars are exactly what the
//! optimizer consumed (quantization happens *before* the update is applied),
//! so replay needs no re-rounding and a corrupted scalar shows up as a
//! parameter mismatch rather than silent drift.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::estimators::GradRecord;
use crate::optimizers::{Algo, LrSchedule};
use crate::randcore::{Seed, ZDist};

pub const MAGIC: [u8; 4] = *b"MZOT";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 92;

/// Width the projected-gradient scalars are stored (and applied) at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradPrecision {
    Bf16,
    F32,
    F64,
}

impl GradPrecision {
    pub fn width(&self) -> usize {
        match self {
            GradPrecision::Bf16 => 2,
            GradPrecision::F32 => 4,
            GradPrecision::F64 => 8,
        }
    }

    /// Round a scalar to this precision's value set. Training quantizes each
    /// projected gradient with this *before* using it, so the file holds the
    /// exact numbers the run consumed.
    pub fn quantize(&self, x: f64) -> f64 {
        match self {
            GradPrecision::Bf16 => bf16_to_f64(f64_to_bf16(x)),
            GradPrecision::F32 => x as f32 as f64,
            GradPrecision::F64 => x,
        }
    }

    fn encode_into(&self, x: f64, out: &mut Vec<u8>) {
        match self {
            GradPrecision::Bf16 => out.extend_from_slice(&f64_to_bf16(x).to_le_bytes()),
            GradPrecision::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            GradPrecision::F64 => out.extend_from_slice(&x.to_le_bytes()),
        }
    }

    fn decode_one(&self, bytes: &[u8]) -> f64 {
        match self {
            GradPrecision::Bf16 => bf16_to_f64(u16::from_le_bytes([bytes[0], bytes[1]])),
            GradPrecision::F32 => {
                f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64
            }
            GradPrecision::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }
}

/// bf16 is the top half of an f32: round to f32 first, then truncate the low
/// 16 mantissa bits.
fn f64_to_bf16(x: f64) -> u16 {
    ((x as f32).to_bits() >> 16) as u16
}

fn bf16_to_f64(bits: u16) -> f64 {
    f32::from_bits((bits as u32) << 16) as f64
}

/// CRC-32 (IEEE 802.3, reflected, zlib-compatible).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc: u32 = 0xFFFF_FFFF;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

/// Everything about a run except the scalars themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryHeader {
    pub grad_precision: GradPrecision,
    pub algo: Algo,
    pub z_dist: ZDist,
    pub master_seed: Seed,
    pub steps: u32,
    pub n_probes: u16,
    pub epsilon: f64,
    pub lr0: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub layout_hash: u64,
}

/// A decoded or in-construction trajectory: header plus `steps * n_probes`
/// already-quantized scalars in step-major, probe-minor order.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub header: TrajectoryHeader,
    pub scalars: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("bad magic: expected MZOT")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("header checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("file truncated: needed {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("invalid {field} byte {value}")]
    BadEnum { field: &'static str, value: u8 },
    #[error("scalar count {got} does not match steps*probes = {expected}")]
    ScalarCount { expected: usize, got: usize },
    #[error("record at step {step} has {got} probes, header says {expected}")]
    ProbeCount { step: u64, expected: usize, got: usize },
    #[error("probe count must be >= 1")]
    ZeroProbes,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Trajectory {
    /// Assemble from per-step records, enforcing the v1 constraint that every
    /// step has the same probe count.
    pub fn from_records(
        header: TrajectoryHeader,
        records: &[GradRecord],
    ) -> Result<Self, CodecError> {
        let n = header.n_probes as usize;
        if n == 0 {
            return Err(CodecError::ZeroProbes);
        }
        let mut scalars = Vec::with_capacity(records.len() * n);
        for rec in records {
            if rec.projected_grads.len() != n {
                return Err(CodecError::ProbeCount {
                    step: rec.step,
                    expected: n,
                    got: rec.projected_grads.len(),
                });
            }
            scalars.extend_from_slice(&rec.projected_grads);
        }
        let expected = header.steps as usize * n;
        if scalars.len() != expected {
            return Err(CodecError::ScalarCount { expected, got: scalars.len() });
        }
        Ok(Self { header, scalars })
    }

    /// The scalars of one step.
    pub fn step_scalars(&self, step: u64) -> &[f64] {
        let n = self.header.n_probes as usize;
        let start = step as usize * n;
        &self.scalars[start..start + n]
    }

    /// Serialized byte size: header plus `steps * probes * width`.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.scalars.len() * self.header.grad_precision.width()
    }

    pub fn encode(&self) -> Result<Vec<u8>, CodecError> {
        let h = &self.header;
        let n = h.n_probes as usize;
        if n == 0 {
            return Err(CodecError::ZeroProbes);
        }
        let expected = h.steps as usize * n;
        if self.scalars.len() != expected {
            return Err(CodecError::ScalarCount { expected, got: self.scalars.len() });
        }
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.push(FORMAT_VERSION);
        out.push(match h.grad_precision {
            GradPrecision::Bf16 => 0,
            GradPrecision::F32 => 1,
            GradPrecision::F64 => 2,
        });
        out.push(match h.algo {
            Algo::Sgd => 0,
            Algo::Momentum => 1,
            Algo::Adam => 2,
        });
        out.push(match h.z_dist {
            ZDist::Gaussian => 0,
            ZDist::Sphere => 1,
        });
        out.extend_from_slice(&h.master_seed.0.to_le_bytes());
        out.extend_from_slice(&h.steps.to_le_bytes());
        out.extend_from_slice(&h.n_probes.to_le_bytes());
        out.extend_from_slice(&[0u8; 2]);
        out.extend_from_slice(&h.epsilon.to_le_bytes());
        out.extend_from_slice(&h.lr0.to_le_bytes());
        out.push(match h.lr_schedule {
            LrSchedule::Constant => 0,
            LrSchedule::LinearDecay => 1,
        });
        out.extend_from_slice(&[0u8; 7]);
        out.extend_from_slice(&h.weight_decay.to_le_bytes());
        out.extend_from_slice(&h.beta1.to_le_bytes());
        out.extend_from_slice(&h.beta2.to_le_bytes());
        out.extend_from_slice(&h.eps_adam.to_le_bytes());
        out.extend_from_slice(&h.layout_hash.to_le_bytes());
        debug_assert_eq!(out.len(), 88);
        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        debug_assert_eq!(out.len(), HEADER_LEN);
        for &x in &self.scalars {
            h.grad_precision.encode_into(x, &mut out);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < HEADER_LEN {
            return Err(CodecError::Truncated { needed: HEADER_LEN, got: bytes.len() });
        }
        if bytes[0..4] != MAGIC {
            return Err(CodecError::BadMagic);
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(CodecError::UnsupportedVersion(bytes[4]));
        }
        let stored = u32::from_le_bytes(bytes[88..92].try_into().unwrap());
        let computed = crc32(&bytes[0..88]);
        if stored != computed {
            return Err(CodecError::CrcMismatch { stored, computed });
        }
        let grad_precision = match bytes[5] {
            0 => GradPrecision::Bf16,
            1 => GradPrecision::F32,
            2 => GradPrecision::F64,
            v => return Err(CodecError::BadEnum { field: "gradient precision", value: v }),
        };
        let algo = match bytes[6] {
            0 => Algo::Sgd,
            1 => Algo::Momentum,
            2 => Algo::Adam,
            v => return Err(CodecError::BadEnum { field: "optimizer", value: v }),
        };
        let z_dist = match bytes[7] {
            0 => ZDist::Gaussian,
            1 => ZDist::Sphere,
            v => return Err(CodecError::BadEnum { field: "noise distribution", value: v }),
        };
        let master_seed = Seed(u64::from_le_bytes(bytes[8..16].try_into().unwrap()));
        let steps = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
        let n_probes = u16::from_le_bytes(bytes[20..22].try_into().unwrap());
        if n_probes == 0 {
            return Err(CodecError::ZeroProbes);
        }
        let epsilon = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
        let lr0 = f64::from_le_bytes(bytes[32..40].try_into().unwrap());
        let lr_schedule = match bytes[40] {
            0 => LrSchedule::Constant,
            1 => LrSchedule::LinearDecay,
            v => return Err(CodecError::BadEnum { field: "lr schedule", value: v }),
        };
        let weight_decay = f64::from_le_bytes(bytes[48..56].try_into().unwrap());
        let beta1 = f64::from_le_bytes(bytes[56..64].try_into().unwrap());
        let beta2 = f64::from_le_bytes(bytes[64..72].try_into().unwrap());
        let eps_adam = f64::from_le_bytes(bytes[72..80].try_into().unwrap());
        let layout_hash = u64::from_le_bytes(bytes[80..88].try_into().unwrap());

        let count = steps as usize * n_probes as usize;
        let needed = HEADER_LEN + count * grad_precision.width();
        if bytes.len() < needed {
            return Err(CodecError::Truncated { needed, got: bytes.len() });
        }
        let w = grad_precision.width();
        let scalars = (0..count)
            .map(|i| grad_precision.decode_one(&bytes[HEADER_LEN + i * w..]))
            .collect();
        Ok(Self {
            header: TrajectoryHeader {
                grad_precision,
                algo,
                z_dist,
                master_seed,
                steps,
                n_probes,
                epsilon,
                lr0,
                lr_schedule,
                weight_decay,
                beta1,
                beta2,
                eps_adam,
                layout_hash,
            },
            scalars,
        })
    }

    pub fn write_to(&self, path: &Path) -> Result<(), CodecError> {
        let bytes = self.encode()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self, CodecError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_header(steps: u32, n: u16, prec: GradPrecision) -> TrajectoryHeader {
        TrajectoryHeader {
            grad_precision: prec,
            algo: Algo::Adam,
            z_dist: ZDist::Sphere,
            master_seed: Seed(0xDEAD_BEEF_0123_4567),
            steps,
            n_probes: n,
            epsilon: 1e-3,
            lr0: 0.05,
            lr_schedule: LrSchedule::LinearDecay,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            layout_hash: 0x0123_4567_89AB_CDEF,
        }
    }

    #[test]
    fn crc32_golden_vectors() {
        assert_eq!(crc32(b""), 0);
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn bf16_golden_values() {
        assert_eq!(f64_to_bf16(2.0), 0x4000);
        assert_eq!(f64_to_bf16(0.0), 0x0000);
        assert_eq!(f64_to_bf16(-2.0), 0xC000);
        assert_eq!(bf16_to_f64(f64_to_bf16(std::f64::consts::PI)), 3.140625);
        // Truncation, not rounding: the bit just below bf16's mantissa drops.
        assert_eq!(GradPrecision::Bf16.quantize(1.0 + 1.0 / 256.0), 1.0);
        assert_eq!(GradPrecision::Bf16.quantize(1.0 + 1.0 / 128.0), 1.0 + 1.0 / 128.0);
    }

    #[test]
    fn quantize_widths_and_idempotence() {
        assert_eq!(GradPrecision::Bf16.width(), 2);
        assert_eq!(GradPrecision::F32.width(), 4);
        assert_eq!(GradPrecision::F64.width(), 8);
        for prec in [GradPrecision::Bf16, GradPrecision::F32, GradPrecision::F64] {
            for x in [0.0, 1.5, -2.75e-3, 1234.5678, -1e-30] {
                let q = prec.quantize(x);
                assert_eq!(prec.quantize(q), q, "{prec:?} quantize must be idempotent");
            }
        }
        assert_eq!(GradPrecision::F64.quantize(0.1), 0.1);
    }

    #[test]
    fn twenty_thousand_step_file_is_40092_bytes() {
        let header = sample_header(20_000, 1, GradPrecision::Bf16);
        let scalars: Vec<f64> = (0..20_000)
            .map(|i| GradPrecision::Bf16.quantize((i as f64 * 0.01).sin()))
            .collect();
        let traj = Trajectory { header, scalars };
        assert_eq!(traj.encoded_len(), 40_092);
        assert_eq!(traj.encode().unwrap().len(), 40_092);
    }

    #[test]
    fn roundtrip_all_precisions() {
        for prec in [GradPrecision::Bf16, GradPrecision::F32, GradPrecision::F64] {
            let header = sample_header(7, 3, prec);
            let scalars: Vec<f64> =
                (0..21).map(|i| prec.quantize((i as f64 - 10.0) * 0.37)).collect();
            let traj = Trajectory { header, scalars };
            let bytes = traj.encode().unwrap();
            let back = Trajectory::decode(&bytes).unwrap();
            assert_eq!(back, traj, "{prec:?}");
            assert_eq!(back.step_scalars(2), &traj.scalars[6..9]);
        }
    }

    #[test]
    fn header_corruption_is_detected_payload_is_not_checksummed() {
        let header = sample_header(4, 1, GradPrecision::F64);
        let scalars = vec![1.0, -2.0, 3.0, -4.0];
        let mut bytes = Trajectory { header, scalars }.encode().unwrap();

        bytes[24] ^= 0x01; // flip a bit inside epsilon
        match Trajectory::decode(&bytes) {
            Err(CodecError::CrcMismatch { .. }) => {}
            other => panic!("expected CRC mismatch, got {other:?}"),
        }
        bytes[24] ^= 0x01;

        // Payload flips decode fine by design; replay surfaces them instead.
        bytes[HEADER_LEN] ^= 0x01;
        let decoded = Trajectory::decode(&bytes).unwrap();
        assert_ne!(decoded.scalars[0], 1.0);
    }

    #[test]
    fn decode_rejects_malformed_inputs() {
        let header = sample_header(2, 1, GradPrecision::F32);
        let good = Trajectory { header, scalars: vec![0.5, -0.5] }.encode().unwrap();

        assert!(matches!(
            Trajectory::decode(&good[..50]),
            Err(CodecError::Truncated { .. })
        ));
        assert!(matches!(
            Trajectory::decode(&good[..HEADER_LEN + 4]),
            Err(CodecError::Truncated { .. })
        ));

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Trajectory::decode(&bad_magic), Err(CodecError::BadMagic)));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(matches!(
            Trajectory::decode(&bad_version),
            Err(CodecError::UnsupportedVersion(9))
        ));

        // A bad enum byte must fail *as* a bad enum, so re-stamp the CRC.
        let mut bad_enum = good.clone();
        bad_enum[6] = 7;
        let crc = crc32(&bad_enum[0..88]);
        bad_enum[88..92].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            Trajectory::decode(&bad_enum),
            Err(CodecError::BadEnum { field: "optimizer", value: 7 })
        ));
    }

    #[test]
    fn from_records_enforces_uniform_probe_count() {
        use crate::estimators::GradRecord;
        let header = sample_header(2, 2, GradPrecision::F64);
        let good = vec![
            GradRecord { step: 0, epsilon: 1e-3, projected_grads: vec![1.0, 2.0] },
            GradRecord { step: 1, epsilon: 1e-3, projected_grads: vec![3.0, 4.0] },
        ];
        let traj = Trajectory::from_records(header.clone(), &good).unwrap();
        assert_eq!(traj.scalars, vec![1.0, 2.0, 3.0, 4.0]);

        let ragged = vec![
            GradRecord { step: 0, epsilon: 1e-3, projected_grads: vec![1.0, 2.0] },
            GradRecord { step: 1, epsilon: 1e-3, projected_grads: vec![3.0] },
        ];
        assert!(matches!(
            Trajectory::from_records(header.clone(), &ragged),
            Err(CodecError::ProbeCount { step: 1, expected: 2, got: 1 })
        ));

        let short = vec![GradRecord { step: 0, epsilon: 1e-3, projected_grads: vec![1.0, 2.0] }];
        assert!(matches!(
            Trajectory::from_records(header, &short),
            Err(CodecError::ScalarCount { expected: 4, got: 2 })
        ));
    }

    #[test]
    fn disk_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.traj");
        let header = sample_header(3, 1, GradPrecision::Bf16);
        let scalars: Vec<f64> = [0.5, -1.25, 2.0]
            .iter()
            .map(|&x| GradPrecision::Bf16.quantize(x))
            .collect();
        let traj = Trajectory { header, scalars };
        traj.write_to(&path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 92 + 6);
        let back = Trajectory::read_from(&path).unwrap();
        assert_eq!(back, traj);
    }
}
