use chrono::NaiveDate;

use super::{accuracy, backtest, persistence_baseline, AccuracyMetrics, BacktestReport, EvalError};
use crate::config::MetricsScale;
use crate::data::{normalize_bars, Group, PreparedData, CHANNELS, CLOSE_CHANNEL};
use crate::model::ModelParams;
use crate::tensor::Tensor;

/// Source of horizon forecasts.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a ModelParams),
    /// Last observed close repeated.
    Persistence,
    /// The true future closes (perfect foresight).
    Oracle,
}

/// Closes and one-step forecasts over the validation period. `closes[0]`
/// is the last training bar; `pred_next[i]` forecasts `closes[i + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BacktestSeries {
    pub dates: Vec<NaiveDate>,
    pub closes: Vec<f64>,
    pub pred_next: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub accuracy: AccuracyMetrics,
    /// `(truth, pred)` per validation window, on the metrics scale.
    pub windows: Vec<(Vec<f64>, Vec<f64>)>,
    pub series: BacktestSeries,
    pub backtest: BacktestReport,
}

/// Scores `predictor` on the validation windows of `data` and backtests
/// its first-step forecasts on every validation bar in raw prices.
pub fn evaluate(
    predictor: Predictor<'_>,
    data: &PreparedData,
    scale: MetricsScale,
) -> Result<Evaluation, EvalError> {
    let context = data.val_context();
    let t_x = data.t_x;
    let t_y = data
        .val
        .targets
        .first()
        .map(Tensor::len)
        .ok_or(EvalError::Empty("evaluate"))?;
    let norm = normalize_bars(&context, &data.stats);
    let close_norm = |t: usize| norm.data()[t * CHANNELS + CLOSE_CHANNEL];
    let to_scale = |v: f64| match scale {
        MetricsScale::Normalized => v,
        MetricsScale::Raw => data.stats.denormalize(v, Group::Price),
    };

    let mut windows = Vec::with_capacity(data.val.len());
    let mut series = BacktestSeries {
        dates: context[t_x - 1..].iter().map(|b| b.date).collect(),
        closes: context[t_x - 1..].iter().map(|b| b.close).collect(),
        pred_next: Vec::with_capacity(context.len() - t_x),
    };
    for t in t_x..context.len() {
        let input = Tensor::new(
            vec![t_x, CHANNELS],
            norm.data()[(t - t_x) * CHANNELS..t * CHANNELS].to_vec(),
        )
        .expect("window shape");
        let available = (context.len() - t).min(t_y);
        let pred: Vec<f64> = match predictor {
            Predictor::Model(params) => params.predict(&input)?.into_data(),
            Predictor::Persistence => persistence_baseline(&input, t_y).into_data(),
            Predictor::Oracle => (t..t + available).map(close_norm).collect(),
        };
        series
            .pred_next
            .push(data.stats.denormalize(pred[0], Group::Price));
        if available == t_y {
            let truth: Vec<f64> = (t..t + t_y).map(|s| to_scale(close_norm(s))).collect();
            windows.push((truth, pred.into_iter().map(to_scale).collect::<Vec<f64>>()));
        }
    }
    if let Predictor::Oracle = predictor {
        // exact raw closes rather than a normalize/denormalize round trip
        series.pred_next = series.closes[1..].to_vec();
    }
    let (truth, pred): (Vec<f64>, Vec<f64>) = windows
        .iter()
        .flat_map(|(y, p)| y.iter().copied().zip(p.iter().copied()))
        .unzip();
    let accuracy = accuracy(&pred, &truth)?;
    let backtest = backtest(&series.closes, &series.pred_next)?;
    Ok(Evaluation {
        accuracy,
        windows,
        series,
        backtest,
    })
}
