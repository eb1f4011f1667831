//! Dataset ingestion, the standard long-horizon split/normalize/window
//! protocol, and a synthetic generator with planted channel-dependency
//! variation for desk-scale experiments.

mod synth;

pub use synth::{synth_cdt, ChannelMeta, Regime, SynthConfig, SynthMeta};

use crate::error::{Error, Result};
use crate::numerics::{Elem, Tensor};
use chrono::NaiveDateTime;

/// A complete multivariate series: strictly increasing timestamps, a dense
/// `[rows, channels]` value matrix, no gaps.
#[derive(Clone, Debug)]
pub struct SeriesTable {
    pub timestamps: Vec<NaiveDateTime>,
    pub values: Tensor<f64>,
    pub channel_names: Vec<String>,
}

impl SeriesTable {
    pub fn rows(&self) -> usize {
        self.timestamps.len()
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S"))
        .ok()
        .or_else(|| {
            chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
}

/// Loads the ETT-family layout: a `date` column of timestamps followed by
/// one numeric column per channel. Gaps, non-numeric cells, and
/// non-monotone timestamps are rejected with the offending row number.
pub fn load_csv(path: impl AsRef<std::path::Path>) -> Result<SeriesTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())
        .map_err(|e| Error::data(format!("{}: {e}", path.as_ref().display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::data(format!("header: {e}")))?
        .clone();
    if headers.is_empty() || headers.get(0).map(str::trim) != Some("date") {
        return Err(Error::data("first column must be named `date`"));
    }
    if headers.len() < 2 {
        return Err(Error::data("no channel columns"));
    }
    let channel_names: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
    let c = channel_names.len();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // 1-based, after header
        let record = record.map_err(|e| Error::data_at(row, e.to_string()))?;
        if record.len() != c + 1 {
            return Err(Error::data_at(
                row,
                format!("expected {} fields, got {}", c + 1, record.len()),
            ));
        }
        let ts = parse_timestamp(record.get(0).unwrap_or("").trim())
            .ok_or_else(|| Error::data_at(row, format!("bad timestamp `{}`", &record[0])))?;
        if let Some(prev) = timestamps.last() {
            if ts <= *prev {
                return Err(Error::data_at(
                    row,
                    format!("timestamp {ts} not strictly increasing"),
                ));
            }
        }
        timestamps.push(ts);
        for k in 0..c {
            let cell = record.get(k + 1).unwrap_or("").trim();
            if cell.is_empty() {
                return Err(Error::data_at(
                    row,
                    format!("missing value in column `{}`", channel_names[k]),
                ));
            }
            let v: f64 = cell.parse().map_err(|_| {
                Error::data_at(row, format!("non-numeric `{cell}` in column `{}`", channel_names[k]))
            })?;
            if !v.is_finite() {
                return Err(Error::data_at(row, format!("non-finite value in `{}`", channel_names[k])));
            }
            values.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::data("no data rows"));
    }
    Ok(SeriesTable {
        values: Tensor::from_vec(vec![timestamps.len(), c], values)?,
        timestamps,
        channel_names,
    })
}

pub fn save_csv(table: &SeriesTable, path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())
        .map_err(|e| Error::data(format!("{}: {e}", path.as_ref().display())))?;
    let mut header = vec!["date".to_string()];
    header.extend(table.channel_names.iter().cloned());
    w.write_record(&header).map_err(|e| Error::data(e.to_string()))?;
    let c = table.channels();
    for (r, ts) in table.timestamps.iter().enumerate() {
        let mut rec = vec![ts.format("%Y-%m-%d %H:%M:%S").to_string()];
        for k in 0..c {
            rec.push(format!("{}", table.values.at(&[r, k])));
        }
        w.write_record(&rec).map_err(|e| Error::data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// How to place the train/val/test boundaries.
#[derive(Copy, Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitStrategy {
    /// Fractions of the row count; test takes the remainder.
    Ratios { train: f64, val: f64 },
    /// Explicit row boundaries (the ETT-subset convention).
    Fixed { train_end: usize, val_end: usize },
}

impl Default for SplitStrategy {
    fn default() -> Self {
        SplitStrategy::Ratios {
            train: 0.7,
            val: 0.1,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Resolved split boundaries plus train-only z-score statistics.
#[derive(Clone, Debug)]
pub struct SplitSpec {
    pub train_end: usize,
    pub val_end: usize,
    pub rows: usize,
    pub lookback: usize,
    pub horizon: usize,
    /// Per-channel mean over train rows only.
    pub mean: Vec<f64>,
    /// Per-channel std over train rows only; strictly positive.
    pub std: Vec<f64>,
    pub instance_norm: bool,
}

/// A dataset bound to a forecasting protocol: the raw table, the split
/// spec, and the z-scored value matrix windows are materialized from.
#[derive(Clone, Debug)]
pub struct ForecastTask {
    pub table: SeriesTable,
    pub spec: SplitSpec,
    normalized: Tensor<f64>,
}

/// Builds boundaries, computes train-row statistics, and validates that
/// every split holds at least one window. Val/test windows reach back into
/// earlier rows for lookback context (standard protocol).
pub fn make_splits(
    table: SeriesTable,
    strategy: SplitStrategy,
    lookback: usize,
    horizon: usize,
    instance_norm: bool,
) -> Result<ForecastTask> {
    let rows = table.rows();
    let c = table.channels();
    let (train_end, val_end) = match strategy {
        SplitStrategy::Ratios { train, val } => {
            if !(0.0..1.0).contains(&train) || !(0.0..1.0).contains(&val) || train + val >= 1.0 {
                return Err(Error::Config(format!("bad split ratios {train}/{val}")));
            }
            let train_end = (rows as f64 * train).floor() as usize;
            let val_len = (rows as f64 * val).floor() as usize;
            (train_end, train_end + val_len)
        }
        SplitStrategy::Fixed { train_end, val_end } => (train_end, val_end),
    };
    if !(train_end < val_end && val_end <= rows) {
        return Err(Error::data(format!(
            "split boundaries must satisfy train_end < val_end <= rows, got {train_end}/{val_end}/{rows}"
        )));
    }
    let min_rows = lookback + horizon;
    if train_end < min_rows {
        return Err(Error::data(format!(
            "train split has {train_end} rows, needs at least {min_rows} (lookback {lookback} + horizon {horizon})"
        )));
    }
    if val_end - train_end < horizon || rows - val_end < horizon {
        return Err(Error::data(format!(
            "val/test splits need at least horizon ({horizon}) rows each"
        )));
    }

    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for k in 0..c {
        let mut acc = 0.0;
        for r in 0..train_end {
            acc += table.values.at(&[r, k]);
        }
        let m = acc / train_end as f64;
        let mut var = 0.0;
        for r in 0..train_end {
            let d = table.values.at(&[r, k]) - m;
            var += d * d;
        }
        let s = (var / train_end as f64).sqrt();
        if s == 0.0 {
            return Err(Error::data(format!(
                "channel `{}` is constant over the train split; drop the channel",
                table.channel_names[k]
            )));
        }
        mean[k] = m;
        std[k] = s;
    }

    let normalized = {
        let mut data = Vec::with_capacity(rows * c);
        for r in 0..rows {
            for k in 0..c {
                data.push((table.values.at(&[r, k]) - mean[k]) / std[k]);
            }
        }
        Tensor::from_vec(vec![rows, c], data)?
    };

    Ok(ForecastTask {
        table,
        spec: SplitSpec {
            train_end,
            val_end,
            rows,
            lookback,
            horizon,
            mean,
            std,
            instance_norm,
        },
        normalized,
    })
}

impl ForecastTask {
    /// Window origins (index of the first lookback row) for a split.
    /// A window is `x = rows[o, o+lookback)`, `y = rows[o+lookback,
    /// o+lookback+horizon)`; targets never straddle the split boundary.
    pub fn origins(&self, split: Split) -> Vec<usize> {
        let s = &self.spec;
        let total = s.lookback + s.horizon;
        let (lo, hi) = match split {
            Split::Train => (0, s.train_end),
            Split::Val => (s.train_end - s.lookback, s.val_end),
            Split::Test => (s.val_end - s.lookback, s.rows),
        };
        if hi < lo + total {
            return Vec::new();
        }
        (lo..=hi - total).collect()
    }

    /// Gathers a batch of z-scored windows: `x [b, c, lookback]`,
    /// `y [b, c, horizon]`.
    pub fn window_batch<T: Elem>(&self, origins: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let s = &self.spec;
        let c = self.table.channels();
        let (b, lb, h) = (origins.len(), s.lookback, s.horizon);
        let mut x = Vec::with_capacity(b * c * lb);
        let mut y = Vec::with_capacity(b * c * h);
        for &o in origins {
            if o + lb + h > s.rows {
                return Err(Error::data(format!("window origin {o} out of range")));
            }
            for k in 0..c {
                for r in 0..lb {
                    x.push(T::from_f64(self.normalized.at(&[o + r, k])));
                }
            }
            for k in 0..c {
                for r in 0..h {
                    y.push(T::from_f64(self.normalized.at(&[o + lb + r, k])));
                }
            }
        }
        Ok((
            Tensor::from_vec(vec![b, c, lb], x)?,
            Tensor::from_vec(vec![b, c, h], y)?,
        ))
    }

    /// Maps z-scored values back to the original scale.
    pub fn denormalize(&self, z: &Tensor<f64>) -> Result<Tensor<f64>> {
        // expects [.., c, len] layout
        let shape = z.shape().to_vec();
        let c = shape[shape.len() - 2];
        if c != self.table.channels() {
            return Err(Error::invalid("denormalize", "channel count mismatch"));
        }
        let len = shape[shape.len() - 1];
        let mut out = z.clone();
        let outer = z.numel() / (c * len);
        for o in 0..outer {
            for k in 0..c {
                for r in 0..len {
                    let i = (o * c + k) * len + r;
                    out.data_mut()[i] = z.data()[i] * self.spec.std[k] + self.spec.mean[k];
                }
            }
        }
        Ok(out)
    }
}
