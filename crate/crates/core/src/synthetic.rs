//! Deterministic synthetic price series for tests, examples and demos.

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Bar, PriceSeries};

fn start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date")
}

/// Bars on consecutive calendar days with the given closes. Each open is
/// the previous close, the high and low sit 0.5% outside both, and volume
/// follows `volumes`.
pub fn bars_from_closes(closes: &[f64], volumes: &[f64]) -> Vec<Bar> {
    assert_eq!(closes.len(), volumes.len(), "one volume per close");
    let mut prev = closes.first().copied().unwrap_or(1.0);
    closes
        .iter()
        .zip(volumes)
        .enumerate()
        .map(|(i, (&close, &volume))| {
            let open = prev;
            prev = close;
            Bar {
                date: start() + Days::new(i as u64),
                open,
                high: open.max(close) * 1.005,
                low: open.min(close) * 0.995,
                close,
                adj_close: close,
                volume,
            }
        })
        .collect()
}

/// `100 + amplitude·sin(2πt/period)`.
pub fn sine_series(n: usize, period: f64, amplitude: f64) -> PriceSeries {
    let closes: Vec<f64> = (0..n)
        .map(|t| 100.0 + amplitude * (std::f64::consts::TAU * t as f64 / period).sin())
        .collect();
    let volumes: Vec<f64> = (0..n)
        .map(|t| 1e6 + 1e5 * (std::f64::consts::TAU * t as f64 / period).cos())
        .collect();
    PriceSeries::new("SINE", bars_from_closes(&closes, &volumes)).expect("distinct dates")
}

/// Geometric Brownian motion with daily drift `mu` and volatility `sigma`,
/// starting at 100.
pub fn gbm_series(n: usize, mu: f64, sigma: f64, seed: u64) -> PriceSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || {
        // Box-Muller; 1 − u keeps the log argument in (0, 1]
        let u: f64 = 1.0 - rng.random::<f64>();
        let v: f64 = rng.random();
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    };
    let mut price = 100.0;
    let mut closes = Vec::with_capacity(n);
    let mut volumes = Vec::with_capacity(n);
    for _ in 0..n {
        closes.push(price);
        volumes.push((1e6 * (0.3 * normal()).exp()).round());
        price *= (mu - 0.5 * sigma * sigma + sigma * normal()).exp();
    }
    PriceSeries::new("GBM", bars_from_closes(&closes, &volumes)).expect("distinct dates")
}
