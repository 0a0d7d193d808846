//! CSV ingestion, train-split standardization and sliding windows.
//!
//! Row 0 of the file is absolute time step 0. Every window records the
//! absolute row index of its first lookback step so downstream code can
//! place it on the global cycle.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed csv: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: no data columns")]
    NoColumns { path: PathBuf },
    #[error("{path}: row {row} has {found} cells, header has {expected}")]
    RaggedRow {
        path: PathBuf,
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}: row {row}, column {column} ({name}): {cell:?} is not a finite number")]
    BadCell {
        path: PathBuf,
        row: usize,
        column: usize,
        name: String,
        cell: String,
    },
    #[error("channel {name} is constant over the train split")]
    ConstantChannel { name: String },
    #[error("split needs {needed} rows but the data has {available}")]
    SplitTooLong { needed: usize, available: usize },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("{split:?} split: window of {needed} rows exceeds the {available} available")]
    WindowTooLong {
        split: Split,
        needed: usize,
        available: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitMode {
    /// Train and validation shares of the rows, each rounded down; the
    /// remainder is the test split.
    Fractional { train: f64, val: f64 },
    Explicit { train: usize, val: usize, test: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub lookback: usize,
    pub horizon: usize,
}

/// Per-channel z-score statistics; `std` uses the population denominator.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits on `rows` consecutive rows of a row-major matrix.
    pub fn fit(values: &[f64], rows: usize, channels: usize) -> Self {
        let mut mean = vec![0.0; channels];
        for r in 0..rows {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += values[r * channels + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; channels];
        for r in 0..rows {
            for (c, v) in var.iter_mut().enumerate() {
                let d = values[r * channels + c] - mean[c];
                *v += d * d;
            }
        }
        let std = var.into_iter().map(|v| (v / rows as f64).sqrt()).collect();
        Self { mean, std }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, value: f64, channel: usize) -> f64 {
        (value - self.mean[channel]) / self.std[channel]
    }

    /// Maps a `[S, N]` standardized prediction back to data units.
    pub fn destandardize(&self, pred: &Tensor) -> Result<Tensor, DataError> {
        let shape = pred.shape();
        if shape.len() != 2 || shape[1] != self.channels() {
            return Err(DataError::Shape(format!(
                "prediction {shape:?} vs {} standardizer channels",
                self.channels()
            )));
        }
        let n = shape[1];
        let data = pred
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * self.std[i % n] + self.mean[i % n])
            .collect();
        Ok(Tensor::new(shape, data).expect("same shape"))
    }
}

#[derive(Debug, Clone)]
pub struct TimeSeriesDataset {
    values: Vec<f64>,
    channel_names: Vec<String>,
    num_steps: usize,
    train_len: usize,
    val_len: usize,
    test_len: usize,
    standardizer: Standardizer,
}

/// One batch of windows; tensors are `[B, T, N]` and `[B, S, N]`.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub start_positions: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.start_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start_positions.is_empty()
    }
}

/// Raw table: channel names and row-major values, before any split.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl RawTable {
    pub fn rows(&self) -> usize {
        self.values.len() / self.names.len()
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(self.names.len()).copied().collect()
    }
}

pub fn ingest_csv(path: impl AsRef<Path>, spec: &SplitSpec) -> Result<TimeSeriesDataset, DataError> {
    let RawTable { names, values } = read_csv(path)?;
    TimeSeriesDataset::from_values(values, names, spec)
}

/// Reads a numeric CSV; a leading `date` column is skipped.
pub fn read_csv(path: impl AsRef<Path>) -> Result<RawTable, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let skip = usize::from(header.first().is_some_and(|h| h.eq_ignore_ascii_case("date")));
    let names: Vec<String> = header[skip..].to_vec();
    if names.is_empty() {
        return Err(DataError::NoColumns {
            path: path.to_path_buf(),
        });
    }
    let mut values = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        // header is line 1
        let line = r + 2;
        if record.len() != header.len() {
            return Err(DataError::RaggedRow {
                path: path.to_path_buf(),
                row: line,
                expected: header.len(),
                found: record.len(),
            });
        }
        for (c, cell) in record.iter().enumerate().skip(skip) {
            let parsed = cell.trim().parse::<f64>().ok().filter(|v| v.is_finite());
            match parsed {
                Some(v) => values.push(v),
                None => {
                    return Err(DataError::BadCell {
                        path: path.to_path_buf(),
                        row: line,
                        column: c + 1,
                        name: header[c].clone(),
                        cell: cell.to_string(),
                    })
                }
            }
        }
    }
    Ok(RawTable { names, values })
}

impl TimeSeriesDataset {
    /// Builds a dataset from a row-major `rows × channels` matrix.
    pub fn from_values(values: Vec<f64>, channel_names: Vec<String>, spec: &SplitSpec) -> Result<Self, DataError> {
        let channels = channel_names.len();
        if channels == 0 || !values.len().is_multiple_of(channels) {
            return Err(DataError::Shape(format!(
                "{} values do not divide into {channels} channels",
                values.len()
            )));
        }
        if spec.lookback == 0 || spec.horizon == 0 {
            return Err(DataError::InvalidSplit("lookback and horizon must be at least 1".into()));
        }
        let num_steps = values.len() / channels;
        let (train_len, val_len, test_len) = match spec.mode {
            SplitMode::Explicit { train, val, test } => {
                let needed = train + val + test;
                if needed > num_steps {
                    return Err(DataError::SplitTooLong {
                        needed,
                        available: num_steps,
                    });
                }
                (train, val, test)
            }
            SplitMode::Fractional { train, val } => {
                if !(train > 0.0 && val > 0.0 && train + val < 1.0) {
                    return Err(DataError::InvalidSplit(format!(
                        "fractions train={train}, val={val} must be positive with sum below 1"
                    )));
                }
                let tr = (num_steps as f64 * train).floor() as usize;
                let va = (num_steps as f64 * val).floor() as usize;
                (tr, va, num_steps - tr - va)
            }
        };
        if train_len == 0 || val_len == 0 || test_len == 0 {
            return Err(DataError::InvalidSplit(format!(
                "empty split ({train_len}, {val_len}, {test_len})"
            )));
        }
        let standardizer = Standardizer::fit(&values, train_len, channels);
        if let Some(c) = standardizer.std.iter().position(|&s| s <= 0.0) {
            return Err(DataError::ConstantChannel {
                name: channel_names[c].clone(),
            });
        }
        let ds = Self {
            values,
            channel_names,
            num_steps,
            train_len,
            val_len,
            test_len,
            standardizer,
        };
        for split in [Split::Train, Split::Val, Split::Test] {
            ds.window_starts(split, spec.lookback, spec.horizon)?;
        }
        Ok(ds)
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn split_lens(&self) -> (usize, usize, usize) {
        (self.train_len, self.val_len, self.test_len)
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    /// Raw (unstandardized) value.
    pub fn raw(&self, row: usize, channel: usize) -> f64 {
        self.values[row * self.channels() + channel]
    }

    pub fn standardized(&self, row: usize, channel: usize) -> f64 {
        self.standardizer.standardize(self.raw(row, channel), channel)
    }

    /// Raw values of one channel over all rows.
    pub fn channel(&self, channel: usize) -> Vec<f64> {
        (0..self.num_steps).map(|r| self.raw(r, channel)).collect()
    }

    /// Half-open row range holding the split's target rows.
    pub fn split_rows(&self, split: Split) -> (usize, usize) {
        let (tr, va, te) = (self.train_len, self.val_len, self.test_len);
        match split {
            Split::Train => (0, tr),
            Split::Val => (tr, tr + va),
            Split::Test => (tr + va, tr + va + te),
        }
    }

    /// Absolute start rows of every stride-1 window of the split.
    ///
    /// Train windows lie entirely inside the train rows. Validation and test
    /// windows may start up to `lookback` rows before their split so the
    /// first target row is the split's first row.
    pub fn window_starts(&self, split: Split, lookback: usize, horizon: usize) -> Result<Vec<usize>, DataError> {
        let (lo, hi) = self.split_rows(split);
        let first = match split {
            Split::Train => lo,
            Split::Val | Split::Test => lo.saturating_sub(lookback),
        };
        let needed = lookback + horizon;
        let available = hi - first;
        if needed > available {
            return Err(DataError::WindowTooLong {
                split,
                needed,
                available,
            });
        }
        Ok((first..=hi - needed).collect())
    }

    /// Windows of a split in batches of `batch_size`, optionally shuffled by
    /// a seeded permutation.
    pub fn make_batches(
        &self,
        split: Split,
        lookback: usize,
        horizon: usize,
        batch_size: usize,
        shuffle_seed: Option<u64>,
    ) -> Result<Batches<'_>, DataError> {
        if batch_size == 0 {
            return Err(DataError::InvalidSplit("batch size must be at least 1".into()));
        }
        let mut starts = self.window_starts(split, lookback, horizon)?;
        if let Some(seed) = shuffle_seed {
            starts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Ok(self.batches_from_starts(starts, lookback, horizon, batch_size))
    }

    /// Batches over an explicit window order.
    pub fn batches_from_starts(&self, starts: Vec<usize>, lookback: usize, horizon: usize, batch_size: usize) -> Batches<'_> {
        Batches {
            ds: self,
            starts,
            lookback,
            horizon,
            batch_size: batch_size.max(1),
            pos: 0,
        }
    }

    pub fn window(&self, starts: &[usize], lookback: usize, horizon: usize) -> WindowBatch {
        let n = self.channels();
        let b = starts.len();
        let mut inputs = Vec::with_capacity(b * lookback * n);
        let mut targets = Vec::with_capacity(b * horizon * n);
        for &s in starts {
            for row in s..s + lookback {
                inputs.extend((0..n).map(|c| self.standardized(row, c)));
            }
            for row in s + lookback..s + lookback + horizon {
                targets.extend((0..n).map(|c| self.standardized(row, c)));
            }
        }
        WindowBatch {
            inputs: Tensor::new(&[b, lookback, n], inputs).expect("window shape"),
            targets: Tensor::new(&[b, horizon, n], targets).expect("window shape"),
            start_positions: starts.to_vec(),
        }
    }
}

/// Lazy batch stream; the window order is fixed at construction.
#[derive(Debug, Clone)]
pub struct Batches<'a> {
    ds: &'a TimeSeriesDataset,
    starts: Vec<usize>,
    lookback: usize,
    horizon: usize,
    batch_size: usize,
    pos: usize,
}

impl Batches<'_> {
    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn num_windows(&self) -> usize {
        self.starts.len()
    }
}

impl Iterator for Batches<'_> {
    type Item = WindowBatch;

    fn next(&mut self) -> Option<WindowBatch> {
        if self.pos >= self.starts.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.starts.len());
        let batch = self.ds.window(&self.starts[self.pos..end], self.lookback, self.horizon);
        self.pos = end;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.starts.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}
