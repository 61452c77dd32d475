use std::io::Write;

use super::{AccuracyMetrics, BacktestReport, BacktestSeries, RiskMetrics};
use crate::fmt::{format_f64, format_opt};

pub const METRICS_HEADER: [&str; 10] = [
    "symbol",
    "run",
    "seed",
    "mae",
    "mse",
    "mape",
    "final_net_value",
    "volatility",
    "max_drawdown",
    "sharpe",
];
pub const PREDICTIONS_HEADER: [&str; 4] = ["window_id", "horizon_step", "truth", "pred"];
pub const BACKTEST_HEADER: [&str; 6] = [
    "date",
    "close",
    "pred_next",
    "direction",
    "return",
    "net_value",
];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub symbol: String,
    pub run: String,
    pub seed: u64,
    pub accuracy: AccuracyMetrics,
    pub final_net_value: f64,
    pub risk: RiskMetrics,
}

impl MetricsRow {
    /// Values in [`METRICS_HEADER`] order.
    pub fn fields(&self) -> Vec<String> {
        vec![
            self.symbol.clone(),
            self.run.clone(),
            self.seed.to_string(),
            format_f64(self.accuracy.mae),
            format_f64(self.accuracy.mse),
            format_opt(self.accuracy.mape),
            format_f64(self.final_net_value),
            format_opt(self.risk.volatility),
            format_f64(self.risk.max_drawdown),
            format_opt(self.risk.sharpe),
        ]
    }
}

fn writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

fn finish<W: Write>(w: csv::Writer<W>) -> std::io::Result<()> {
    w.into_inner()
        .map_err(|e| std::io::Error::other(e.to_string()))?
        .flush()
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricsRow]) -> std::io::Result<()> {
    let mut w = writer(out);
    w.write_record(METRICS_HEADER)?;
    for row in rows {
        w.write_record(row.fields())?;
    }
    finish(w)
}

/// One row per window and horizon step. Window ids start at 0, horizon
/// steps at 1.
pub fn write_predictions_csv<W: Write>(
    out: W,
    windows: &[(Vec<f64>, Vec<f64>)],
) -> std::io::Result<()> {
    let mut w = writer(out);
    w.write_record(PREDICTIONS_HEADER)?;
    for (id, (truth, pred)) in windows.iter().enumerate() {
        for (h, (y, p)) in truth.iter().zip(pred).enumerate() {
            w.write_record([
                id.to_string(),
                (h + 1).to_string(),
                format_f64(*y),
                format_f64(*p),
            ])?;
        }
    }
    finish(w)
}

/// One row per traded day: the close reached, the forecast that set the
/// position, the position (`1` long, `-1` short), its return and the net
/// value after it.
pub fn write_backtest_csv<W: Write>(
    out: W,
    series: &BacktestSeries,
    report: &BacktestReport,
) -> std::io::Result<()> {
    let mut w = writer(out);
    w.write_record(BACKTEST_HEADER)?;
    for i in 0..report.returns.len() {
        w.write_record([
            series.dates[i + 1].format("%Y-%m-%d").to_string(),
            format_f64(series.closes[i + 1]),
            format_f64(series.pred_next[i]),
            report.directions[i].to_string(),
            format_f64(report.returns[i]),
            format_f64(report.net_value[i]),
        ])?;
    }
    finish(w)
}
