//! Run configuration and its flat `key = value` text form.
//!
//! Keys are the `RunConfig` field names. `#` starts a comment. Later
//! assignments override earlier ones, which is how command-line overrides
//! are layered over a file.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::{SplitMode, SplitSpec};
use crate::gtr::{FusionKind, GtrConfig};
use crate::model::{ModelConfig, DEFAULT_REVIN_EPS};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("key {key}: cannot parse {value:?}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("unknown dataset preset {0:?}")]
    UnknownPreset(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Label carried into metric records.
    pub dataset: String,
    pub data_path: Option<PathBuf>,
    pub split: SplitMode,
    pub lookback: usize,
    pub horizon: usize,
    /// 0 means "take it from the data".
    pub channels: usize,
    pub cycle_len: usize,
    pub period: usize,
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub use_revin: bool,
    pub revin_eps: f64,
    /// Shared by the retriever's residual dropout and the pre-output dropout.
    pub dropout: f64,
    pub seed: u64,
    /// `None` trains the bare MLP backbone.
    pub variant: Option<FusionKind>,
    pub gta: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: "custom".into(),
            data_path: None,
            split: SplitMode::Fractional { train: 0.7, val: 0.1 },
            lookback: 96,
            horizon: 96,
            channels: 0,
            cycle_len: 24,
            period: 24,
            hidden: 512,
            lr: 1e-3,
            batch_size: 256,
            epochs: 30,
            use_revin: true,
            revin_eps: DEFAULT_REVIN_EPS,
            dropout: 0.1,
            seed: 2024,
            variant: Some(FusionKind::Conv2d),
            gta: false,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            patience: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "dataset",
    "data_path",
    "split",
    "lookback",
    "horizon",
    "channels",
    "cycle_len",
    "period",
    "hidden",
    "lr",
    "batch_size",
    "epochs",
    "use_revin",
    "revin_eps",
    "dropout",
    "seed",
    "variant",
    "gta",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "patience",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn bad(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
    }
}

/// `a,b,c` is an explicit row split; `a,b` with fractions is fractional.
pub fn parse_split(value: &str) -> Result<SplitMode, ConfigError> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [tr, va, te] => Ok(SplitMode::Explicit {
            train: parse("split", tr)?,
            val: parse("split", va)?,
            test: parse("split", te)?,
        }),
        [tr, va] => Ok(SplitMode::Fractional {
            train: parse("split", tr)?,
            val: parse("split", va)?,
        }),
        _ => Err(bad("split", value, "expected `train,val,test` rows or `train,val` fractions")),
    }
}

fn format_split(split: &SplitMode) -> String {
    match split {
        SplitMode::Explicit { train, val, test } => format!("{train},{val},{test}"),
        SplitMode::Fractional { train, val } => format!("{train},{val}"),
    }
}

fn parse_variant(value: &str) -> Result<Option<FusionKind>, ConfigError> {
    if value == "none" {
        return Ok(None);
    }
    value
        .parse::<FusionKind>()
        .map(Some)
        .map_err(|e| bad("variant", value, &e.to_string()))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

impl RunConfig {
    /// Published hyperparameters and row splits for the benchmark datasets.
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let base = Self::default();
        let (split, cycle_len, lr, batch_size, epochs, use_revin) = match name {
            "ETTm1" => ((34465, 11521, 11521), 96, 1e-3, 256, 30, true),
            "ETTm2" => ((34465, 11521, 11521), 96, 1e-3, 256, 30, true),
            "ETTh1" => ((8545, 2881, 2881), 24, 1e-3, 256, 30, true),
            "ETTh2" => ((8545, 2881, 2881), 24, 1e-3, 256, 30, true),
            "Weather" => ((36792, 5271, 10540), 144, 1e-3, 64, 30, true),
            "Traffic" => ((12185, 1757, 3509), 168, 3e-3, 16, 30, true),
            "Electricity" => ((18317, 2633, 5261), 168, 3e-3, 32, 30, true),
            "Solar" => ((36601, 5161, 10417), 144, 3e-3, 64, 30, false),
            "PEMS03" => ((15617, 5135, 5135), 288, 3e-3, 32, 30, false),
            "PEMS04" => ((10172, 3375, 3375), 288, 3e-3, 32, 30, false),
            "PEMS07" => ((16911, 5622, 5622), 288, 3e-3, 32, 30, false),
            "PEMS08" => ((10690, 3548, 3548), 288, 3e-3, 32, 30, true),
            _ => return Err(ConfigError::UnknownPreset(name.into())),
        };
        Ok(Self {
            dataset: name.into(),
            split: SplitMode::Explicit {
                train: split.0,
                val: split.1,
                test: split.2,
            },
            cycle_len,
            lr,
            batch_size,
            epochs,
            use_revin,
            ..base
        })
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key.trim() {
            "dataset" => self.dataset = value.into(),
            "data_path" => self.data_path = (!value.is_empty() && value != "none").then(|| PathBuf::from(value)),
            "split" => self.split = parse_split(value)?,
            "lookback" => self.lookback = parse(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "cycle_len" => self.cycle_len = parse(key, value)?,
            "period" => self.period = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "use_revin" => self.use_revin = parse_bool(key, value)?,
            "revin_eps" => self.revin_eps = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "variant" => self.variant = parse_variant(value)?,
            "gta" => self.gta = parse_bool(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "patience" => self.patience = if value == "none" { None } else { Some(parse(key, value)?) },
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Parses `key=value` (one override).
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: assignment.into(),
        })?;
        self.set(k, v)
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.into(),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Starts from the preset named by a `dataset` key when one matches,
    /// then applies the text.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut probe = Self::default();
        probe.apply_text(text)?;
        let mut cfg = Self::preset(&probe.dataset).unwrap_or_default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Every key in canonical order; `from_text(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for &key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }

    pub fn value_of(&self, key: &str) -> String {
        match key {
            "dataset" => self.dataset.clone(),
            "data_path" => self
                .data_path
                .as_ref()
                .map_or_else(|| "none".into(), |p| p.display().to_string()),
            "split" => format_split(&self.split),
            "lookback" => self.lookback.to_string(),
            "horizon" => self.horizon.to_string(),
            "channels" => self.channels.to_string(),
            "cycle_len" => self.cycle_len.to_string(),
            "period" => self.period.to_string(),
            "hidden" => self.hidden.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "use_revin" => self.use_revin.to_string(),
            "revin_eps" => self.revin_eps.to_string(),
            "dropout" => self.dropout.to_string(),
            "seed" => self.seed.to_string(),
            "variant" => self.variant.map_or_else(|| "none".into(), |v| v.name().into()),
            "gta" => self.gta.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "patience" => self.patience.map_or_else(|| "none".into(), |p| p.to_string()),
            _ => String::new(),
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            mode: self.split,
            lookback: self.lookback,
            horizon: self.horizon,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        if self.lookback == 0 || self.horizon == 0 {
            return fail("lookback and horizon must be at least 1".into());
        }
        if self.hidden == 0 || self.batch_size == 0 {
            return fail("hidden and batch_size must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0 && self.revin_eps > 0.0) {
            return fail("adam_eps and revin_eps must be positive".into());
        }
        if self.variant.is_some() && self.cycle_len == 0 {
            return fail("cycle_len must be at least 1".into());
        }
        if self.gta && self.variant.is_none() {
            return fail("gta needs a retriever variant".into());
        }
        Ok(())
    }

    /// Model configuration for `channels` data channels.
    pub fn model_config(&self, channels: usize) -> Result<ModelConfig, ConfigError> {
        self.validate()?;
        if self.channels != 0 && self.channels != channels {
            return Err(ConfigError::Invalid(format!(
                "config says {} channels, data has {channels}",
                self.channels
            )));
        }
        Ok(ModelConfig {
            lookback: self.lookback,
            horizon: self.horizon,
            channels,
            hidden: self.hidden,
            use_revin: self.use_revin,
            revin_eps: self.revin_eps,
            dropout: self.dropout,
            gtr: self.variant.map(|fusion| GtrConfig {
                lookback: self.lookback,
                channels,
                cycle_len: self.cycle_len,
                period: self.period,
                fusion,
                dropout: self.dropout,
                gta: self.gta,
            }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::preset("ETTm1").unwrap();
        cfg.data_path = Some("data/ETTm1.csv".into());
        cfg.patience = Some(3);
        cfg.variant = None;
        cfg.lr = 0.1 + 0.2;
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn preset_then_overrides() {
        let cfg = RunConfig::from_text("dataset = ETTh1\nepochs = 2 # short\n\nvariant=inception").unwrap();
        assert_eq!(cfg.cycle_len, 24);
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.variant, Some(FusionKind::Inception));
        assert_eq!(
            cfg.split,
            SplitMode::Explicit {
                train: 8545,
                val: 2881,
                test: 2881
            }
        );
    }

    #[test]
    fn errors_name_the_problem() {
        assert_eq!(
            RunConfig::from_text("lookback = 96\nnonsense").unwrap_err(),
            ConfigError::Syntax {
                line: 2,
                text: "nonsense".into()
            }
        );
        assert!(matches!(
            RunConfig::from_text("warmup = 3"),
            Err(ConfigError::UnknownKey(k)) if k == "warmup"
        ));
        assert!(matches!(
            RunConfig::default().apply_override("lr=fast"),
            Err(ConfigError::BadValue { .. })
        ));
        let mut cfg = RunConfig {
            channels: 3,
            ..RunConfig::default()
        };
        assert!(cfg.model_config(7).is_err());
        cfg.gta = true;
        cfg.variant = None;
        assert!(cfg.validate().is_err());
    }
}
