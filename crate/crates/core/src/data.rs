//! Daily OHLCV series: CSV ingestion, min-max normalization, the
//! chronological train/validation split and moving-window examples.
//!
//! Channel order is fixed everywhere as
//! `(open, high, low, close, adj_close, volume)`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use thiserror::Error;

use crate::fmt::format_f64;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 6;
pub const CLOSE_CHANNEL: usize = 3;
pub const CSV_HEADER: [&str; 7] = [
    "Date",
    "Open",
    "High",
    "Low",
    "Close",
    "Adj Close",
    "Volume",
];
const DATE_FORMAT: &str = "%Y-%m-%d";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("no usable rows ({skipped} skipped)")]
    Empty { skipped: usize },
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("insufficient data: {context} needs at least {required} bars, got {available}")]
    Insufficient {
        context: &'static str,
        required: usize,
        available: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl DataError {
    /// Source line of a format error, if any.
    pub fn line(&self) -> Option<usize> {
        match self {
            DataError::Format { line, .. } => Some(*line),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub adj_close: f64,
    pub volume: f64,
}

impl Bar {
    /// Values in channel order.
    pub fn channels(&self) -> [f64; CHANNELS] {
        [
            self.open,
            self.high,
            self.low,
            self.close,
            self.adj_close,
            self.volume,
        ]
    }

    pub fn prices(&self) -> [f64; 5] {
        [self.open, self.high, self.low, self.close, self.adj_close]
    }

    /// Checks price positivity, the high/low envelope and volume sign.
    pub fn validate(&self) -> Result<(), String> {
        if self.prices().iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(format!("{}: prices must be positive", self.date));
        }
        if !(self.volume.is_finite() && self.volume >= 0.0) {
            return Err(format!("{}: volume must be nonnegative", self.date));
        }
        if self.low > self.open.min(self.close) || self.high < self.open.max(self.close) {
            return Err(format!(
                "{}: high/low do not bracket open and close",
                self.date
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    pub symbol: String,
    bars: Vec<Bar>,
}

impl PriceSeries {
    /// Sorts bars by date and rejects duplicate dates.
    pub fn new(symbol: impl Into<String>, mut bars: Vec<Bar>) -> Result<Self, DataError> {
        bars.sort_by_key(|b| b.date);
        if let Some(w) = bars.windows(2).find(|w| w[0].date == w[1].date) {
            return Err(DataError::InvalidArgument(format!(
                "duplicate date {}",
                w[0].date
            )));
        }
        Ok(Self {
            symbol: symbol.into(),
            bars,
        })
    }

    pub fn bars(&self) -> &[Bar] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct LoadedSeries {
    pub series: PriceSeries,
    /// Rows dropped because a field held the literal `null`.
    pub skipped: usize,
}

fn parse_field(raw: &str, name: &str, line: usize) -> Result<f64, DataError> {
    raw.trim().parse::<f64>().map_err(|_| DataError::Format {
        line,
        message: format!("unparsable {name} value {raw:?}"),
    })
}

/// Reads a Yahoo-style daily CSV from any reader.
pub fn read_csv<R: Read>(reader: R, symbol: &str) -> Result<LoadedSeries, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| DataError::Format {
        line: 1,
        message: e.to_string(),
    })?;
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != CSV_HEADER {
        return Err(DataError::Format {
            line: 1,
            message: format!(
                "expected header {:?}, found {:?}",
                CSV_HEADER.join(","),
                got.join(",")
            ),
        });
    }

    let mut bars = Vec::new();
    let mut skipped = 0;
    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| DataError::Format {
            line,
            message: e.to_string(),
        })?;
        if record.iter().any(|f| f.trim() == "null") {
            skipped += 1;
            continue;
        }
        if record.len() != CSV_HEADER.len() {
            return Err(DataError::Format {
                line,
                message: format!(
                    "expected {} fields, found {}",
                    CSV_HEADER.len(),
                    record.len()
                ),
            });
        }
        let date = NaiveDate::parse_from_str(record[0].trim(), DATE_FORMAT).map_err(|_| {
            DataError::Format {
                line,
                message: format!("unparsable date {:?}", &record[0]),
            }
        })?;
        let bar = Bar {
            date,
            open: parse_field(&record[1], "Open", line)?,
            high: parse_field(&record[2], "High", line)?,
            low: parse_field(&record[3], "Low", line)?,
            close: parse_field(&record[4], "Close", line)?,
            adj_close: parse_field(&record[5], "Adj Close", line)?,
            volume: parse_field(&record[6], "Volume", line)?,
        };
        bar.validate()
            .map_err(|message| DataError::Format { line, message })?;
        bars.push(bar);
    }
    if skipped > 0 {
        log::warn!("{symbol}: skipped {skipped} row(s) containing null");
    }
    if bars.is_empty() {
        return Err(DataError::Empty { skipped });
    }
    let series = PriceSeries::new(symbol, bars).map_err(|e| DataError::Format {
        line: 0,
        message: e.to_string(),
    })?;
    Ok(LoadedSeries { series, skipped })
}

/// Loads a CSV file; the symbol is the file stem.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LoadedSeries, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let symbol = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_csv(file, &symbol)
}

fn write_row<W: Write>(out: &mut W, bar: &Bar, extra: Option<&str>) -> std::io::Result<()> {
    write!(out, "{}", bar.date.format(DATE_FORMAT))?;
    for v in bar.channels() {
        write!(out, ",{}", format_f64(v))?;
    }
    if let Some(e) = extra {
        write!(out, ",{e}")?;
    }
    writeln!(out)
}

/// Writes bars in the same CSV layout `read_csv` accepts.
pub fn write_csv<W: Write>(mut out: W, series: &PriceSeries) -> std::io::Result<()> {
    writeln!(out, "{}", CSV_HEADER.join(","))?;
    for bar in series.bars() {
        write_row(&mut out, bar, None)?;
    }
    Ok(())
}

/// Debug export: the input schema plus a `split` column.
pub fn write_split_csv<W: Write>(mut out: W, train: &[Bar], val: &[Bar]) -> std::io::Result<()> {
    writeln!(out, "{},split", CSV_HEADER.join(","))?;
    for bar in train {
        write_row(&mut out, bar, Some("train"))?;
    }
    for bar in val {
        write_row(&mut out, bar, Some("val"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Price,
    Volume,
}

/// Min-max extrema: one pair shared by the five price channels and one
/// for volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationStats {
    pub price_min: f64,
    pub price_max: f64,
    pub vol_min: f64,
    pub vol_max: f64,
}

impl NormalizationStats {
    fn bounds(&self, group: Group) -> (f64, f64) {
        match group {
            Group::Price => (self.price_min, self.price_max),
            Group::Volume => (self.vol_min, self.vol_max),
        }
    }

    /// `(x − min) / (max − min)`. Values outside the fitted range map
    /// outside `[0, 1]`.
    pub fn normalize(&self, x: f64, group: Group) -> f64 {
        let (lo, hi) = self.bounds(group);
        (x - lo) / (hi - lo)
    }

    pub fn denormalize(&self, x: f64, group: Group) -> f64 {
        let (lo, hi) = self.bounds(group);
        x * (hi - lo) + lo
    }

    pub fn group_of(channel: usize) -> Group {
        if channel == CHANNELS - 1 {
            Group::Volume
        } else {
            Group::Price
        }
    }
}

/// Extrema over `bars`; both groups must span a nonzero range.
pub fn compute_norm_stats(bars: &[Bar]) -> Result<NormalizationStats, DataError> {
    if bars.is_empty() {
        return Err(DataError::InvalidArgument(
            "empty range for normalization".into(),
        ));
    }
    let mut s = NormalizationStats {
        price_min: f64::INFINITY,
        price_max: f64::NEG_INFINITY,
        vol_min: f64::INFINITY,
        vol_max: f64::NEG_INFINITY,
    };
    for bar in bars {
        for p in bar.prices() {
            s.price_min = s.price_min.min(p);
            s.price_max = s.price_max.max(p);
        }
        s.vol_min = s.vol_min.min(bar.volume);
        s.vol_max = s.vol_max.max(bar.volume);
    }
    if s.price_max <= s.price_min {
        return Err(DataError::Degenerate(format!(
            "constant price {}",
            s.price_min
        )));
    }
    if s.vol_max <= s.vol_min {
        return Err(DataError::Degenerate(format!(
            "constant volume {}",
            s.vol_min
        )));
    }
    Ok(s)
}

/// First `⌊fraction·n⌋` bars train, the rest validate.
pub fn split_train_val(bars: &[Bar], fraction: f64) -> Result<(&[Bar], &[Bar]), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidArgument(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let cut = (fraction * bars.len() as f64).floor() as usize;
    Ok(bars.split_at(cut))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowConfig {
    pub t_x: usize,
    pub t_y: usize,
    pub stride: usize,
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.t_x == 0 || self.t_y == 0 || self.stride == 0 {
            return Err(DataError::InvalidArgument(format!(
                "window lengths and stride must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn span(&self) -> usize {
        self.t_x + self.t_y
    }
}

#[derive(Debug, Clone, Default)]
pub struct WindowedDataset {
    /// `t_x × 6` normalized input matrices.
    pub inputs: Vec<Tensor>,
    /// `t_y` normalized future closes.
    pub targets: Vec<Tensor>,
    /// Index (into the windowed bars) where each input begins.
    pub origin_indices: Vec<usize>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Windows `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> WindowedDataset {
        WindowedDataset {
            inputs: self.inputs[range.clone()].to_vec(),
            targets: self.targets[range.clone()].to_vec(),
            origin_indices: self.origin_indices[range].to_vec(),
        }
    }
}

/// Normalized `bars.len() × 6` matrix in channel order.
pub fn normalize_bars(bars: &[Bar], stats: &NormalizationStats) -> Tensor {
    let mut data = Vec::with_capacity(bars.len() * CHANNELS);
    for bar in bars {
        for (c, v) in bar.channels().into_iter().enumerate() {
            data.push(stats.normalize(v, NormalizationStats::group_of(c)));
        }
    }
    Tensor::new(vec![bars.len(), CHANNELS], data).expect("bars × channels")
}

/// Moving windows: input `i` covers bars `[s, s+t_x)` and its target the
/// closes of `[s+t_x, s+t_x+t_y)`, with `s = i·stride`.
pub fn make_windows(
    bars: &[Bar],
    cfg: &WindowConfig,
    stats: &NormalizationStats,
) -> Result<WindowedDataset, DataError> {
    cfg.validate()?;
    let n = bars.len();
    if n < cfg.span() {
        return Err(DataError::Insufficient {
            context: "windowing",
            required: cfg.span(),
            available: n,
        });
    }
    let count = (n - cfg.span()) / cfg.stride + 1;
    let norm = normalize_bars(bars, stats);
    let row = CHANNELS;
    let mut ds = WindowedDataset::default();
    for i in 0..count {
        let s = i * cfg.stride;
        let input = norm.data()[s * row..(s + cfg.t_x) * row].to_vec();
        let target = (s + cfg.t_x..s + cfg.span())
            .map(|t| norm.data()[t * row + CLOSE_CHANNEL])
            .collect();
        ds.inputs
            .push(Tensor::new(vec![cfg.t_x, CHANNELS], input).expect("window shape"));
        ds.targets.push(Tensor::vector(target));
        ds.origin_indices.push(s);
    }
    Ok(ds)
}

/// Which bars the normalization extrema come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsScope {
    /// Training bars only.
    Train,
    /// Every bar in the series, validation included.
    All,
}

/// A series split into training and validation parts, with the windows
/// built from each.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub stats: NormalizationStats,
    pub train_bars: Vec<Bar>,
    pub val_bars: Vec<Bar>,
    pub train: WindowedDataset,
    /// Validation windows use the last `t_x` training bars as leading
    /// context so every target lies inside the validation period. Their
    /// origin indices refer to the context-prefixed bar list returned by
    /// [`PreparedData::val_context`].
    pub val: WindowedDataset,
    pub t_x: usize,
}

impl PreparedData {
    /// Last `t_x` training bars followed by every validation bar.
    pub fn val_context(&self) -> Vec<Bar> {
        let start = self.train_bars.len().saturating_sub(self.t_x);
        let mut bars = self.train_bars[start..].to_vec();
        bars.extend_from_slice(&self.val_bars);
        bars
    }
}

/// Splits, normalizes and windows `series`. Validation windows always use
/// stride 1.
pub fn prepare(
    series: &PriceSeries,
    split_fraction: f64,
    window: &WindowConfig,
    scope: StatsScope,
) -> Result<PreparedData, DataError> {
    window.validate()?;
    let (train_bars, val_bars) = split_train_val(series.bars(), split_fraction)?;
    if train_bars.len() < window.span() {
        return Err(DataError::Insufficient {
            context: "training split",
            required: window.span(),
            available: train_bars.len(),
        });
    }
    if val_bars.len() < window.t_y {
        return Err(DataError::Insufficient {
            context: "validation split",
            required: window.t_y,
            available: val_bars.len(),
        });
    }
    let stats = match scope {
        StatsScope::Train => compute_norm_stats(train_bars)?,
        StatsScope::All => compute_norm_stats(series.bars())?,
    };
    let train = make_windows(train_bars, window, &stats)?;
    let mut prepared = PreparedData {
        stats,
        train_bars: train_bars.to_vec(),
        val_bars: val_bars.to_vec(),
        train,
        val: WindowedDataset::default(),
        t_x: window.t_x,
    };
    let val_window = WindowConfig {
        stride: 1,
        ..*window
    };
    prepared.val = make_windows(&prepared.val_context(), &val_window, &stats)?;
    Ok(prepared)
}
