//! Forecast metrics, correlation diagnostics, ACF cycle estimation and a
//! Monte Carlo check of the fused-estimator correlation bound.

use std::fmt::Write as _;

use serde::Serialize;

use crate::rng::{standard_normal, substream, Purpose};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("input is constant; correlation is undefined")]
    Constant,
    #[error("need at least 2 segments of length {segment_len}, series has {len} values")]
    TooFewSegments { len: usize, segment_len: usize },
    #[error("max_lag {max_lag} needs a series longer than {len}")]
    LagTooLong { max_lag: usize, len: usize },
    #[error("no local ACF maximum in lags [{min_lag}, {max_lag}]")]
    NoLocalMaximum { min_lag: usize, max_lag: usize },
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<(), AnalysisError> {
    if pred.len() != truth.len() {
        return Err(AnalysisError::Length(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(AnalysisError::Empty);
    }
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64, AnalysisError> {
    check_pair(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64, AnalysisError> {
    check_pair(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample Pearson correlation, clamped to [−1, 1].
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, AnalysisError> {
    if a.len() != b.len() {
        return Err(AnalysisError::Length(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(AnalysisError::Empty);
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(AnalysisError::Constant);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Symmetric matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl CorrelationMatrix {
    /// Pairwise Pearson correlation of `rows`.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, AnalysisError> {
        let dim = rows.len();
        let mut entries = vec![0.0; dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = 1.0;
            for j in i + 1..dim {
                let r = pearson(rows[i], rows[j])?;
                entries[i * dim + j] = r;
                entries[j * dim + i] = r;
            }
        }
        if dim == 1 {
            pearson(rows[0], rows[0])?;
        }
        Ok(Self { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.dim {
            let row: Vec<String> = (0..self.dim).map(|j| self.get(i, j).to_string()).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }
}

/// Correlations between consecutive non-overlapping segments; a trailing
/// partial segment is dropped.
pub fn segment_correlation(series: &[f64], segment_len: usize) -> Result<CorrelationMatrix, AnalysisError> {
    let count = series.len().checked_div(segment_len).unwrap_or(0);
    if count < 2 {
        return Err(AnalysisError::TooFewSegments {
            len: series.len(),
            segment_len,
        });
    }
    let segs: Vec<&[f64]> = series.chunks_exact(segment_len).take(count).collect();
    CorrelationMatrix::from_rows(&segs)
}

/// `r_k = Σ_{t<T−k} (y_t − ȳ)(y_{t+k} − ȳ) / Σ_t (y_t − ȳ)²` for k = 0..=max_lag.
pub fn acf(series: &[f64], max_lag: usize) -> Result<Vec<f64>, AnalysisError> {
    let n = series.len();
    if n <= max_lag {
        return Err(AnalysisError::LagTooLong { max_lag, len: n });
    }
    let m = mean(series);
    let d: Vec<f64> = series.iter().map(|y| y - m).collect();
    let g0: f64 = d.iter().map(|x| x * x).sum();
    if g0 == 0.0 {
        return Err(AnalysisError::Constant);
    }
    Ok((0..=max_lag)
        .map(|k| {
            if k == 0 {
                1.0
            } else {
                d[..n - k].iter().zip(&d[k..]).map(|(a, b)| a * b).sum::<f64>() / g0
            }
        })
        .collect())
}

/// Lag of the highest strict local ACF maximum in `[min_lag, max_lag]`;
/// equal heights resolve to the smaller lag.
pub fn estimate_cycle_length(series: &[f64], max_lag: usize, min_lag: usize) -> Result<usize, AnalysisError> {
    if min_lag < 2 || max_lag < min_lag {
        return Err(AnalysisError::Invalid(format!(
            "need 2 <= min_lag <= max_lag, got min_lag {min_lag}, max_lag {max_lag}"
        )));
    }
    // r at max_lag + 1 decides whether max_lag itself is a peak
    let r = acf(series, max_lag + 1)?;
    let mut best: Option<usize> = None;
    for k in min_lag..=max_lag {
        if r[k - 1] < r[k] && r[k] > r[k + 1] && best.is_none_or(|b| r[k] > r[b]) {
            best = Some(k);
        }
    }
    best.ok_or(AnalysisError::NoLocalMaximum { min_lag, max_lag })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoremParams {
    pub sigma_y2: f64,
    pub sigma_eta2: f64,
    pub sigma_eps2: f64,
    pub rho: f64,
    pub samples: usize,
    pub seed: u64,
}

impl TheoremParams {
    pub const MIN_SAMPLES: usize = 1000;

    pub fn validate(&self) -> Result<(), AnalysisError> {
        let vars = [self.sigma_y2, self.sigma_eta2, self.sigma_eps2];
        if vars.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(AnalysisError::Invalid(format!("variances must be positive, got {vars:?}")));
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(AnalysisError::Invalid(format!("rho {} outside [-1, 1]", self.rho)));
        }
        if self.samples < Self::MIN_SAMPLES {
            return Err(AnalysisError::Invalid(format!(
                "{} samples, need at least {}",
                self.samples,
                Self::MIN_SAMPLES
            )));
        }
        Ok(())
    }

    /// The bound is only claimed when the embedding is the sharper estimate.
    pub fn hypothesis(&self) -> bool {
        self.sigma_eps2 < self.sigma_eta2
    }

    /// Noise variance of the fused estimate, `σ_ε²σ_η² / (σ_η² + σ_ε²)`.
    pub fn fused_noise(&self) -> f64 {
        self.sigma_eps2 * self.sigma_eta2 / (self.sigma_eta2 + self.sigma_eps2)
    }

    pub fn closed_form_corr_raw(&self) -> f64 {
        (self.rho * self.sigma_y2 + self.sigma_eta2) / (self.sigma_y2 + self.sigma_eta2)
    }

    pub fn closed_form_corr_fused(&self) -> f64 {
        let s = self.fused_noise();
        (self.rho * self.sigma_y2 + s) / (self.sigma_y2 + s)
    }

    /// `err_fused / err_raw` in closed form; independent of ρ.
    pub fn closed_form_ratio(&self) -> f64 {
        let (y, eta, eps) = (self.sigma_y2, self.sigma_eta2, self.sigma_eps2);
        eps * (y + eta) / (y * (eta + eps) + eps * eta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoremReport {
    pub params: TheoremParams,
    pub hypothesis: bool,
    pub corr_raw: f64,
    pub corr_fused: f64,
    pub err_raw: f64,
    pub err_fused: f64,
    pub closed_corr_raw: f64,
    pub closed_corr_fused: f64,
    pub closed_err_raw: f64,
    pub closed_err_fused: f64,
    pub closed_form_ratio: f64,
    pub inequality_holds: bool,
}

struct Moments {
    n: f64,
    sa: f64,
    sb: f64,
    saa: f64,
    sbb: f64,
    sab: f64,
}

impl Moments {
    fn new() -> Self {
        Self {
            n: 0.0,
            sa: 0.0,
            sb: 0.0,
            saa: 0.0,
            sbb: 0.0,
            sab: 0.0,
        }
    }

    fn push(&mut self, a: f64, b: f64) {
        self.n += 1.0;
        self.sa += a;
        self.sb += b;
        self.saa += a * a;
        self.sbb += b * b;
        self.sab += a * b;
    }

    fn corr(&self) -> f64 {
        let cov = self.sab - self.sa * self.sb / self.n;
        let va = self.saa - self.sa * self.sa / self.n;
        let vb = self.sbb - self.sb * self.sb / self.n;
        (cov / (va * vb).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Draws `(Y_n, Y_m)` with correlation ρ, observes both through one common
/// observation error η and one common embedding error ε, and compares how
/// far the raw (`x = Y + η`) and fused
/// (`z = (σ_ε²x + σ_η²Q)/(σ_η² + σ_ε²)`, `Q = Y + ε`) correlations land
/// from ρ.
///
/// The errors are shared by the pair because that is the dependence under
/// which the closed forms hold; with independent per-point errors both
/// correlations shrink toward 0 instead.
pub fn verify_theorem1(p: &TheoremParams) -> Result<TheoremReport, AnalysisError> {
    p.validate()?;
    let mut rng = substream(p.seed, Purpose::MonteCarlo, 0);
    let sy = p.sigma_y2.sqrt();
    let seta = p.sigma_eta2.sqrt();
    let seps = p.sigma_eps2.sqrt();
    let ortho = (1.0 - p.rho * p.rho).max(0.0).sqrt();
    let w = 1.0 / (p.sigma_eta2 + p.sigma_eps2);
    let mut raw = Moments::new();
    let mut fused = Moments::new();
    for _ in 0..p.samples {
        let g1 = standard_normal(&mut rng);
        let g2 = standard_normal(&mut rng);
        let yn = sy * g1;
        let ym = sy * (p.rho * g1 + ortho * g2);
        let eta = seta * standard_normal(&mut rng);
        let eps = seps * standard_normal(&mut rng);
        let (xn, xm) = (yn + eta, ym + eta);
        let (qn, qm) = (yn + eps, ym + eps);
        let zn = w * (p.sigma_eps2 * xn + p.sigma_eta2 * qn);
        let zm = w * (p.sigma_eps2 * xm + p.sigma_eta2 * qm);
        raw.push(xn, xm);
        fused.push(zn, zm);
    }
    let corr_raw = raw.corr();
    let corr_fused = fused.corr();
    let err_raw = (corr_raw - p.rho).abs();
    let err_fused = (corr_fused - p.rho).abs();
    let closed_corr_raw = p.closed_form_corr_raw();
    let closed_corr_fused = p.closed_form_corr_fused();
    Ok(TheoremReport {
        params: *p,
        hypothesis: p.hypothesis(),
        corr_raw,
        corr_fused,
        err_raw,
        err_fused,
        closed_corr_raw,
        closed_corr_fused,
        closed_err_raw: (closed_corr_raw - p.rho).abs(),
        closed_err_fused: (closed_corr_fused - p.rho).abs(),
        closed_form_ratio: p.closed_form_ratio(),
        inequality_holds: err_fused < err_raw,
    })
}

/// The grid ρ × σ_η² × σ_ε² at σ_Y² = 1, with σ_ε² ∈ {0.1, 0.25, σ_η²/2}.
pub fn default_theorem_grid(samples: usize, seed: u64) -> Vec<TheoremParams> {
    let mut grid = Vec::new();
    for rho in [0.0, 0.3, 0.5, 0.9] {
        for eta in [0.5, 1.0, 2.0] {
            for eps in [0.1, 0.25, 0.5 * eta] {
                grid.push(TheoremParams {
                    sigma_y2: 1.0,
                    sigma_eta2: eta,
                    sigma_eps2: eps,
                    rho,
                    samples,
                    seed,
                });
            }
        }
    }
    grid
}
