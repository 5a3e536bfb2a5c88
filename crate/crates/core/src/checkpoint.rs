//! Versioned little-endian checkpoint files.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "MDSCCKPT"
//! 8       4     format version (u32, currently 1)
//! 12      1     scalar width in bytes: 4 (f32) or 8 (f64)
//! 13      3     zero padding
//! 16      8     config length L (u64), then L bytes of compact JSON
//!         8×3   global epoch, stage, epoch within the stage (u64)
//!         1     stage mode: 0 base, 1 resume, 2 scratch
//!         8×4   seeds: model, augment, bank, data (u64)
//!         ...   parameters, then velocities: count (u32), and per tensor
//!               rank (u32), dims (u64 each), values
//!         8×5   bank n, dim (u64), momentum (f64), version, cancelled (u64)
//!         ...   bank rows, n × dim values
//!         8     group count n (u64), then n parent indices (u64)
//! ```
//!
//! Random streams are pure functions of the seeds and the global epoch, so
//! the seeds plus the epoch counter are the complete generator state.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::TrainConfig;
use crate::encoder::{Encoder, EncoderParams};
use crate::membank::{GroupTable, MemoryBank};
use crate::numkernel::Tensor;
use crate::real::{Precision, Real};
use crate::train::{Phase, StageMode, TrainState};

pub const MAGIC: &[u8; 8] = b"MDSCCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("unsupported scalar width {0}")]
    Dtype(u8),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after checkpoint")]
    Trailing(usize),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint holds {found:?} values, expected {expected:?}")]
    Precision { expected: Precision, found: Precision },
}

/// A training state together with the configuration that produced it.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Real> {
    pub config: TrainConfig,
    pub state: TrainState<T>,
}

/// A checkpoint of either precision.
#[derive(Clone, Debug)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl From<Checkpoint<f32>> for AnyCheckpoint {
    fn from(c: Checkpoint<f32>) -> Self {
        AnyCheckpoint::F32(c)
    }
}

impl From<Checkpoint<f64>> for AnyCheckpoint {
    fn from(c: Checkpoint<f64>) -> Self {
        AnyCheckpoint::F64(c)
    }
}

impl AnyCheckpoint {
    pub fn config(&self) -> &TrainConfig {
        match self {
            AnyCheckpoint::F32(c) => &c.config,
            AnyCheckpoint::F64(c) => &c.config,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            AnyCheckpoint::F32(c) => c.to_bytes(),
            AnyCheckpoint::F64(c) => c.to_bytes(),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        read_header(&mut r)?;
        match r.u8()? {
            4 => Ok(AnyCheckpoint::F32(Checkpoint::from_bytes(bytes)?)),
            8 => Ok(AnyCheckpoint::F64(Checkpoint::from_bytes(bytes)?)),
            other => Err(CheckpointError::Dtype(other)),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn values<T: Real>(&mut self, vals: &[T]) {
        for &v in vals {
            v.write_le(&mut self.0);
        }
    }
    fn tensors<T: Real>(&mut self, ts: &[Tensor<T>]) {
        self.u32(ts.len() as u32);
        for t in ts {
            self.u32(t.shape().len() as u32);
            for &d in t.shape() {
                self.u64(d as u64);
            }
            self.values(t.data());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(len).ok_or(CheckpointError::Truncated(self.pos))?;
        if end > self.bytes.len() {
            return Err(CheckpointError::Truncated(self.bytes.len()));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Corrupt("size overflows usize".into()))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn values<T: Real>(&mut self, count: usize) -> Result<Vec<T>, CheckpointError> {
        let width = T::PRECISION.byte_width();
        let len = count.checked_mul(width).ok_or(CheckpointError::Truncated(self.pos))?;
        Ok(self.take(len)?.chunks_exact(width).map(T::read_le).collect())
    }
    fn tensors<T: Real>(&mut self) -> Result<Vec<Tensor<T>>, CheckpointError> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>, _>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.ok_or_else(|| CheckpointError::Corrupt("tensor size overflow".into()))?;
            let data = self.values(len)?;
            out.push(Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?);
        }
        Ok(out)
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<(), CheckpointError> {
    if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    Ok(())
}

fn mode_byte(mode: Option<StageMode>) -> u8 {
    match mode {
        None => 0,
        Some(StageMode::Resume) => 1,
        Some(StageMode::Scratch) => 2,
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u8(T::PRECISION.byte_width() as u8);
        w.0.extend_from_slice(&[0, 0, 0]);
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        w.u64(json.len() as u64);
        w.0.extend_from_slice(&json);
        w.u64(s.epoch as u64);
        w.u64(s.phase.stage as u64);
        w.u64(s.phase.epoch as u64);
        w.u8(mode_byte(s.phase.mode));
        for seed in [
            self.config.seed_model,
            self.config.seed_augment,
            self.config.seed_bank,
            self.config.seed_data,
        ] {
            w.u64(seed);
        }
        w.tensors(&s.encoder.params().tensors);
        w.tensors(&s.velocity);
        w.u64(s.bank.n() as u64);
        w.u64(s.bank.dim() as u64);
        w.f64(s.bank.momentum());
        w.u64(s.bank.version());
        w.u64(s.bank.cancelled_updates());
        w.values(s.bank.rows());
        w.u64(s.groups.len() as u64);
        for &p in s.groups.parents() {
            w.u64(p as u64);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |e: &dyn std::fmt::Display| CheckpointError::Corrupt(e.to_string());
        let mut r = Reader { bytes, pos: 0 };
        read_header(&mut r)?;
        let width = r.u8()?;
        if width as usize != T::PRECISION.byte_width() {
            let found = match width {
                4 => Precision::F32,
                8 => Precision::F64,
                other => return Err(CheckpointError::Dtype(other)),
            };
            return Err(CheckpointError::Precision {
                expected: T::PRECISION,
                found,
            });
        }
        r.take(3)?;
        let len = r.usize()?;
        let config: TrainConfig = serde_json::from_slice(r.take(len)?).map_err(|e| corrupt(&e))?;
        let epoch = r.usize()?;
        let stage = r.usize()?;
        let phase_epoch = r.usize()?;
        let mode = match r.u8()? {
            0 => None,
            1 => Some(StageMode::Resume),
            2 => Some(StageMode::Scratch),
            other => return Err(CheckpointError::Corrupt(format!("stage mode {other}"))),
        };
        let seeds = [r.u64()?, r.u64()?, r.u64()?, r.u64()?];
        let echoed = [config.seed_model, config.seed_augment, config.seed_bank, config.seed_data];
        if seeds != echoed {
            return Err(CheckpointError::Corrupt("seed section disagrees with config".into()));
        }
        let params = r.tensors()?;
        let velocity = r.tensors()?;
        let encoder = Encoder::new(config.encoder_spec(), EncoderParams { tensors: params }).map_err(|e| corrupt(&e))?;
        if velocity.len() != encoder.params().tensors.len()
            || velocity.iter().zip(&encoder.params().tensors).any(|(v, p)| v.shape() != p.shape())
        {
            return Err(CheckpointError::Corrupt("velocity shapes differ from parameters".into()));
        }
        let n = r.usize()?;
        let dim = r.usize()?;
        let momentum = r.f64()?;
        let version = r.u64()?;
        let cancelled = r.u64()?;
        let count = n.checked_mul(dim).ok_or_else(|| corrupt(&"bank size overflow"))?;
        let rows = r.values(count)?;
        let bank = MemoryBank::from_parts(n, dim, momentum, rows, version, cancelled).map_err(|e| corrupt(&e))?;
        let gn = r.usize()?;
        if gn != n {
            return Err(CheckpointError::Corrupt(format!("{gn} group entries for {n} bank rows")));
        }
        let parents = (0..gn).map(|_| r.usize()).collect::<Result<Vec<_>, _>>()?;
        let groups = GroupTable::from_parents(parents).ok_or_else(|| corrupt(&"group table is not a forest"))?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - r.pos));
        }
        Ok(Self {
            config,
            state: TrainState {
                encoder,
                velocity,
                bank,
                groups,
                epoch,
                phase: Phase {
                    stage,
                    mode,
                    epoch: phase_epoch,
                },
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        // Write-then-rename so a crash never leaves a torn file behind.
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Layer;

    fn sample() -> Checkpoint<f64> {
        let cfg = TrainConfig {
            synthetic_size: 4,
            encoder_layers: Some(vec![Layer::Flatten]),
            embed_dim: 5,
            ..TrainConfig::default()
        };
        let mut state = TrainState::init(&cfg, 6).unwrap();
        state.groups.union(1, 4);
        state.bank.sync_all(&state.groups);
        state.epoch = 7;
        Checkpoint { config: cfg, state }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.state.bank, ck.state.bank);
        assert_eq!(back.state.groups, ck.state.groups);
        assert_eq!(back.config, ck.config);
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bad), Err(CheckpointError::Version(9))));
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::<f64>::from_bytes(&long), Err(CheckpointError::Trailing(1))));
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes),
            Err(CheckpointError::Precision { .. })
        ));
        assert!(matches!(AnyCheckpoint::from_bytes(&bytes), Ok(AnyCheckpoint::F64(_))));
    }
}
