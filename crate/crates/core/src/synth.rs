//! Seeded synthetic series with a long global cycle.
//!
//! Channel `c` at step `t` is
//! `A·pattern_c[t mod L*] + B·sin(2π (t mod p*) / p*) + σ·noise`.
//! The pattern is one standard normal draw per cycle step, rescaled to zero
//! mean and unit variance, so a lookback shorter than `L*` never sees the
//! part of the cycle it has to forecast.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::rng::{standard_normal, substream, Purpose};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth parameters: {0}")]
    Invalid(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Pattern plus sine plus noise.
    GlobalCycle,
    /// Sine plus noise.
    Sine,
    /// Noise only.
    Noise,
}

impl FromStr for SynthKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, SynthError> {
        match s {
            "global-cycle" => Ok(Self::GlobalCycle),
            "sine" => Ok(Self::Sine),
            "noise" => Ok(Self::Noise),
            other => Err(SynthError::Invalid(format!(
                "unknown kind {other:?} (global-cycle, sine, noise)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub kind: SynthKind,
    pub length: usize,
    pub channels: usize,
    pub cycle_len: usize,
    pub period: usize,
    pub noise: f64,
    pub pattern_amp: f64,
    pub sine_amp: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            kind: SynthKind::GlobalCycle,
            length: 20_000,
            channels: 4,
            cycle_len: 168,
            period: 24,
            noise: 0.2,
            pattern_amp: 1.0,
            sine_amp: 4.0,
            seed: 11,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.length < 2 || self.channels == 0 {
            return bad(format!("length {} and channels {} too small", self.length, self.channels));
        }
        if self.cycle_len < 2 || self.period == 0 {
            return bad(format!("cycle_len {} must be >= 2 and period {} >= 1", self.cycle_len, self.period));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("pattern_amp", self.pattern_amp),
            ("sine_amp", self.sine_amp),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} {v} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Zero-mean, unit-variance random profile of length `cycle_len`.
fn profile(cycle_len: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    let mut p: Vec<f64> = (0..cycle_len).map(|_| standard_normal(rng)).collect();
    let n = cycle_len as f64;
    let m = p.iter().sum::<f64>() / n;
    let sd = (p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
    for v in &mut p {
        *v = (*v - m) / sd;
    }
    p
}

/// Row-major `length × channels` values.
pub fn generate(p: &SynthParams) -> Result<Vec<f64>, SynthError> {
    p.validate()?;
    let (a, b) = match p.kind {
        SynthKind::GlobalCycle => (p.pattern_amp, p.sine_amp),
        SynthKind::Sine => (0.0, p.sine_amp),
        SynthKind::Noise => (0.0, 0.0),
    };
    let profiles: Vec<Vec<f64>> = (0..p.channels)
        .map(|c| profile(p.cycle_len, &mut substream(p.seed, Purpose::Synth, 1 + c as u64)))
        .collect();
    let mut noise_rng = substream(p.seed, Purpose::Synth, 0);
    let mut out = Vec::with_capacity(p.length * p.channels);
    for t in 0..p.length {
        let phase = (t % p.period) as f64 / p.period as f64;
        let sine = (2.0 * std::f64::consts::PI * phase).sin();
        for prof in &profiles {
            let mut v = a * prof[t % p.cycle_len] + b * sine;
            if p.noise > 0.0 {
                v += p.noise * standard_normal(&mut noise_rng);
            }
            out.push(v);
        }
    }
    Ok(out)
}

/// CSV text with a `date` step-index column and channels `c0..`.
pub fn to_csv(values: &[f64], channels: usize) -> String {
    let mut s = String::from("date");
    for c in 0..channels {
        let _ = write!(s, ",c{c}");
    }
    s.push('\n');
    for (t, row) in values.chunks(channels).enumerate() {
        let _ = write!(s, "{t}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn write_csv(path: impl AsRef<Path>, p: &SynthParams) -> Result<(), SynthError> {
    let path = path.as_ref();
    let text = to_csv(&generate(p)?, p.channels);
    fs::write(path, text).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_is_periodic_in_lcm() {
        let p = SynthParams {
            length: 2000,
            channels: 1,
            cycle_len: 10,
            period: 4,
            noise: 0.0,
            ..SynthParams::default()
        };
        let v = generate(&p).unwrap();
        for t in 0..v.len() - 20 {
            assert_eq!(v[t], v[t + 20]);
        }
        assert!((0..v.len() - 10).any(|t| v[t] != v[t + 10]));
    }

    #[test]
    fn profile_is_standardized() {
        let pr = profile(168, &mut substream(3, Purpose::Synth, 1));
        let m = pr.iter().sum::<f64>() / 168.0;
        let var = pr.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 168.0;
        assert!(m.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }
}
