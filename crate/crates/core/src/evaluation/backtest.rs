use super::EvalError;

/// Annualization constant for daily figures.
pub const TRADING_DAYS: f64 = 252.0;

/// `+1` (long) when the predicted next close exceeds the current close,
/// `−1` (short) otherwise, ties included.
pub fn directions(truth: &[f64], pred_next: &[f64]) -> Result<Vec<i8>, EvalError> {
    check_lengths(truth, pred_next)?;
    Ok(truth
        .iter()
        .zip(pred_next)
        .map(|(y, p)| if p > y { 1 } else { -1 })
        .collect())
}

fn check_lengths(truth: &[f64], pred_next: &[f64]) -> Result<(), EvalError> {
    if truth.len() < 2 {
        return Err(EvalError::Empty("strategy_returns"));
    }
    if pred_next.len() + 1 != truth.len() {
        return Err(EvalError::Length(truth.len() - 1, pred_next.len()));
    }
    Ok(())
}

/// Log returns of the strategy. `truth` holds closes `y_1..y_n` and
/// `pred_next[i]` the forecast of `truth[i + 1]`; the result has `n − 1`
/// entries, `ln(y_{t+1}/y_t)·dir`.
pub fn strategy_returns(truth: &[f64], pred_next: &[f64]) -> Result<Vec<f64>, EvalError> {
    check_lengths(truth, pred_next)?;
    if let Some((index, &price)) = truth.iter().enumerate().find(|(_, y)| !(**y > 0.0)) {
        return Err(EvalError::Domain { index, price });
    }
    let dirs = directions(truth, pred_next)?;
    Ok(truth
        .windows(2)
        .zip(dirs)
        .map(|(y, d)| (y[1] / y[0]).ln() * f64::from(d))
        .collect())
}

/// `1 + Σ R` accumulated left to right (additive, not compounded).
pub fn net_value(returns: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    returns
        .iter()
        .map(|r| {
            acc += r;
            1.0 + acc
        })
        .collect()
}

/// Largest fall from the running peak as a fraction of that peak.
/// Points where the running peak is not positive are skipped.
pub fn max_drawdown(net_value: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst: f64 = 0.0;
    for &nv in net_value {
        peak = peak.max(nv);
        if peak > 0.0 {
            worst = worst.max((peak - nv) / peak);
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskMetrics {
    /// Annualized sample standard deviation; `None` below two returns.
    pub volatility: Option<f64>,
    pub max_drawdown: f64,
    /// Annualized, zero risk-free rate; `None` when the deviation is zero
    /// or undefined.
    pub sharpe: Option<f64>,
}

pub fn risk_metrics(returns: &[f64], net_value: &[f64]) -> RiskMetrics {
    let n = returns.len();
    let (volatility, sharpe) = if n < 2 {
        (None, None)
    } else {
        let mean = returns.iter().sum::<f64>() / n as f64;
        let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        let scale = TRADING_DAYS.sqrt();
        (Some(sd * scale), (sd > 0.0).then(|| mean / sd * scale))
    };
    RiskMetrics {
        volatility,
        max_drawdown: max_drawdown(net_value),
        sharpe,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport {
    pub directions: Vec<i8>,
    pub returns: Vec<f64>,
    pub net_value: Vec<f64>,
    pub final_net_value: f64,
    pub risk: RiskMetrics,
}

pub fn backtest(truth: &[f64], pred_next: &[f64]) -> Result<BacktestReport, EvalError> {
    let returns = strategy_returns(truth, pred_next)?;
    let directions = directions(truth, pred_next)?;
    let nv = net_value(&returns);
    let risk = risk_metrics(&returns, &nv);
    Ok(BacktestReport {
        directions,
        final_net_value: *nv.last().expect("at least one return"),
        returns,
        net_value: nv,
        risk,
    })
}
