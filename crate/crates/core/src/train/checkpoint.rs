//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "GTR1"  u32 version
//! u32 T  u32 S  u32 N  u32 L  u32 D  u32 P
//! u8 use_revin  u8 gta  u8 variant (FusionKind tag, 255 = no retriever)
//! f64 dropout  u64 seed
//! f64 × Σ|θ|   parameter buffers in `ForecastModel::params` order
//! ```
//!
//! RevIN epsilon is not stored; loaded models use `DEFAULT_REVIN_EPS`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::engine::Tensor;
use crate::gtr::{FusionKind, GtrConfig};
use crate::model::{ForecastModel, ModelConfig, DEFAULT_REVIN_EPS};

pub const MAGIC: [u8; 4] = *b"GTR1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 6 * 4 + 3 + 8 + 8;
const NO_RETRIEVER: u8 = 255;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint (magic {found:?})")]
    BadMagic { path: PathBuf, found: Vec<u8> },
    #[error("{path}: unsupported version {found}")]
    Version { path: PathBuf, found: u32 },
    #[error("{path}: expected {expected} bytes, found {actual}")]
    Length { path: PathBuf, expected: usize, actual: usize },
    #[error("{path}: bad header field {field}: {value}")]
    Header { path: PathBuf, field: &'static str, value: String },
    #[error("{path}: {msg}")]
    Model { path: PathBuf, msg: String },
}

/// Everything in the header besides magic and version.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointHeader {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub cycle_len: usize,
    pub hidden: usize,
    pub period: usize,
    pub use_revin: bool,
    pub gta: bool,
    pub variant: Option<FusionKind>,
    pub dropout: f64,
    pub seed: u64,
}

impl CheckpointHeader {
    /// `cycle_len` and `period` only matter with a retriever; without one
    /// they are stored as given.
    pub fn of(model: &ForecastModel, cycle_len: usize, period: usize, seed: u64) -> Self {
        let c = model.config();
        let gtr = c.gtr.as_ref();
        Self {
            lookback: c.lookback,
            horizon: c.horizon,
            channels: c.channels,
            cycle_len: gtr.map_or(cycle_len, |g| g.cycle_len),
            hidden: c.hidden,
            period: gtr.map_or(period, |g| g.period),
            use_revin: c.use_revin,
            gta: gtr.is_some_and(|g| g.gta),
            variant: gtr.map(|g| g.fusion),
            dropout: c.dropout,
            seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            lookback: self.lookback,
            horizon: self.horizon,
            channels: self.channels,
            hidden: self.hidden,
            use_revin: self.use_revin,
            revin_eps: DEFAULT_REVIN_EPS,
            dropout: self.dropout,
            gtr: self.variant.map(|fusion| GtrConfig {
                lookback: self.lookback,
                channels: self.channels,
                cycle_len: self.cycle_len,
                period: self.period,
                fusion,
                dropout: self.dropout,
                gta: self.gta,
            }),
        }
    }
}

pub fn encode(model: &ForecastModel, header: &CheckpointHeader) -> Vec<u8> {
    let params = model.params();
    let total: usize = params.iter().map(|p| p.len()).sum();
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * total);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for dim in [
        header.lookback,
        header.horizon,
        header.channels,
        header.cycle_len,
        header.hidden,
        header.period,
    ] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    buf.push(u8::from(header.use_revin));
    buf.push(u8::from(header.gta));
    buf.push(header.variant.map_or(NO_RETRIEVER, FusionKind::tag));
    buf.extend_from_slice(&header.dropout.to_le_bytes());
    buf.extend_from_slice(&header.seed.to_le_bytes());
    for p in params {
        for x in p.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &ForecastModel, header: &CheckpointHeader) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&encode(model, header)).map_err(io)?;
    f.sync_all().map_err(io)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn u64_at(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

/// Decodes a checkpoint held in memory; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, ForecastModel), CheckpointError> {
    let path_buf = || path.to_path_buf();
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic {
            path: path_buf(),
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(CheckpointError::Length {
            path: path_buf(),
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(CheckpointError::Version {
            path: path_buf(),
            found: version,
        });
    }
    let dim = |i: usize| u32_at(bytes, 8 + 4 * i) as usize;
    let flag = |field: &'static str, b: u8| match b {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(CheckpointError::Header {
            path: path_buf(),
            field,
            value: other.to_string(),
        }),
    };
    let tag = bytes[34];
    let variant = match tag {
        NO_RETRIEVER => None,
        t => Some(FusionKind::from_tag(t).ok_or_else(|| CheckpointError::Header {
            path: path_buf(),
            field: "variant",
            value: t.to_string(),
        })?),
    };
    let header = CheckpointHeader {
        lookback: dim(0),
        horizon: dim(1),
        channels: dim(2),
        cycle_len: dim(3),
        hidden: dim(4),
        period: dim(5),
        use_revin: flag("use_revin", bytes[32])?,
        gta: flag("gta", bytes[33])?,
        variant,
        dropout: f64::from_bits(u64_at(bytes, 35)),
        seed: u64_at(bytes, 43),
    };
    let model_err = |msg: String| CheckpointError::Model { path: path_buf(), msg };
    let config = header.model_config();
    config.validate().map_err(|e| model_err(e.to_string()))?;
    let shapes: Vec<Vec<usize>> = {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        ForecastModel::new(config, &mut rng)
            .map_err(|e| model_err(e.to_string()))?
            .params()
            .iter()
            .map(|p| p.shape().to_vec())
            .collect()
    };
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let expected = HEADER_LEN + 8 * total;
    if bytes.len() != expected {
        return Err(CheckpointError::Length {
            path: path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    let mut at = HEADER_LEN;
    let mut params = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f64::from_bits(u64_at(bytes, at + 8 * i))).collect();
        at += 8 * n;
        params.push(Tensor::new(&shape, data).map_err(|e| model_err(e.to_string()))?);
    }
    let model = ForecastModel::from_params(config, params).map_err(|e| model_err(e.to_string()))?;
    Ok((header, model))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointHeader, ForecastModel), CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes, path)
}
