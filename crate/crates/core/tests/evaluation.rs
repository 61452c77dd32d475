use hidformer::config::MetricsScale;
use hidformer::data::{prepare, PriceSeries, StatsScope, WindowConfig};
use hidformer::evaluation::{
    accuracy, backtest, evaluate, mann_whitney_u, mann_whitney_u_with, net_value, strategy_returns,
    Method, Predictor,
};
use hidformer::model::{init_params, HidformerConfig};
use hidformer::synthetic::{bars_from_closes, gbm_series};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Step-by-step reference: decide, book the log return, add it to the
/// running total.
fn simulate(closes: &[f64], preds: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut returns = Vec::new();
    let mut nvs = Vec::new();
    let mut total = 0.0;
    for t in 0..closes.len() - 1 {
        let long = preds[t] > closes[t];
        let move_ = (closes[t + 1] / closes[t]).ln();
        let r = if long { move_ } else { -move_ };
        total += r;
        returns.push(r);
        nvs.push(1.0 + total);
    }
    (returns, nvs)
}

#[test]
fn ten_step_hand_example() {
    let closes = [
        100.0, 110.0, 110.0, 99.0, 105.0, 105.0, 120.0, 118.0, 121.0, 119.0, 125.0,
    ];
    let preds = [
        105.0, 100.0, 111.0, 101.0, 105.0, 130.0, 119.0, 118.0, 121.0, 126.0,
    ];
    let r = strategy_returns(&closes, &preds).unwrap();
    assert!((r[0] - 0.095310).abs() < 1e-6);
    assert_eq!(r[0], (1.1f64).ln());
    // a flat step, then a long position on a rise
    assert_eq!(r[1], 0.0);
    assert_eq!(r[3], (105.0f64 / 99.0).ln());
    // tie between forecast and close goes short
    assert_eq!(r[7], -(121.0f64 / 118.0).ln());
    let (want_r, want_nv) = simulate(&closes, &preds);
    assert_eq!(r, want_r);
    assert_eq!(net_value(&r), want_nv);
}

proptest! {
    #[test]
    fn matches_step_by_step_simulation(
        closes in prop::collection::vec(1.0f64..200.0, 2..=11),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds: Vec<f64> = closes[1..].iter().map(|c| c * rng.random_range(0.9..1.1)).collect();
        let r = strategy_returns(&closes, &preds).unwrap();
        let (want_r, want_nv) = simulate(&closes, &preds);
        prop_assert_eq!(&r, &want_r);
        prop_assert_eq!(net_value(&r), want_nv);
    }

    #[test]
    fn flipping_every_direction_mirrors_net_value(
        closes in prop::collection::vec(1.0f64..200.0, 2..=12),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds: Vec<f64> = closes[..closes.len() - 1]
            .iter()
            .map(|c| c * rng.random_range(0.9..1.1))
            .collect();
        let flipped: Vec<f64> = preds
            .iter()
            .zip(&closes)
            .map(|(p, y)| if p > y { *y } else { y + 1.0 })
            .collect();
        let r = strategy_returns(&closes, &preds).unwrap();
        let rf = strategy_returns(&closes, &flipped).unwrap();
        for (a, b) in r.iter().zip(&rf) {
            prop_assert_eq!(*a, -*b);
        }
        for (a, b) in net_value(&r).iter().zip(net_value(&rf)) {
            prop_assert!((b - (2.0 - a)).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_inputs_score_exactly_zero(v in prop::collection::vec(0.01f64..10.0, 1..50)) {
        let m = accuracy(&v, &v).unwrap();
        prop_assert_eq!((m.mae, m.mse, m.mape), (0.0, 0.0, Some(0.0)));
    }
}

#[test]
fn perfect_foresight_dominates_every_direction_sequence() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 12;
    for _ in 0..5 {
        let mut closes: Vec<f64> = (0..n).map(|_| rng.random_range(50.0..150.0)).collect();
        closes[4] = closes[3];
        let moves: Vec<f64> = closes.windows(2).map(|w| (w[1] / w[0]).ln()).collect();
        let oracle: f64 = strategy_returns(&closes, &closes[1..])
            .unwrap()
            .iter()
            .sum();
        let abs_total: f64 = moves.iter().map(|m| m.abs()).sum();
        assert!((oracle - abs_total).abs() < 1e-12);

        let mut best = f64::NEG_INFINITY;
        for mask in 0u32..(1 << (n - 1)) {
            let total: f64 = moves
                .iter()
                .enumerate()
                .map(|(i, m)| if mask >> i & 1 == 1 { *m } else { -m })
                .sum();
            best = best.max(total);
        }
        assert!(oracle >= best - 1e-12, "{oracle} < {best}");
    }
}

fn brute_force_u(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for x in a {
        for y in b {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

/// Two-sided p by listing every way to choose which pooled values are
/// labelled `a`.
fn enumerated_p(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (na, n) = (a.len(), pooled.len());
    let center = (na * b.len()) as f64 / 2.0;
    let observed = (brute_force_u(a, b) - center).abs();
    let (mut hit, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != na {
            continue;
        }
        let (sa, sb): (Vec<f64>, Vec<f64>) = {
            let mut sa = Vec::new();
            let mut sb = Vec::new();
            for (i, v) in pooled.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    sa.push(*v);
                } else {
                    sb.push(*v);
                }
            }
            (sa, sb)
        };
        total += 1;
        if (brute_force_u(&sa, &sb) - center).abs() >= observed - 1e-9 {
            hit += 1;
        }
    }
    hit as f64 / total as f64
}

#[test]
fn u_matches_pair_counting_and_p_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..40 {
        let na = rng.random_range(1..=6);
        let nb = rng.random_range(1..=6);
        // coarse values so ties occur
        let mut draw = |n| {
            (0..n)
                .map(|_| f64::from(rng.random_range(0..6)))
                .collect::<Vec<_>>()
        };
        let (a, b) = (draw(na), draw(nb));
        let r = mann_whitney_u(&a, &b).unwrap();
        assert_eq!(r.u_a, brute_force_u(&a, &b));
        assert_eq!(r.u_b, brute_force_u(&b, &a));
        let want = enumerated_p(&a, &b);
        assert!(
            (r.p_value - want).abs() < 1e-12,
            "{a:?} {b:?}: {} vs {want}",
            r.p_value
        );
    }
}

#[test]
fn spec_u_examples() {
    let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
    assert_eq!(r.u_a, 0.0);
    assert!((r.p_value - 0.1).abs() < 1e-15);
    assert_eq!(r.p_value, enumerated_p(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]));
}

#[test]
fn exact_and_normal_agree_at_fifteen() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for shift in [0.0, 0.3, 0.6, 1.0] {
        for _ in 0..10 {
            let a: Vec<f64> = (0..15).map(|_| rng.random::<f64>()).collect();
            let b: Vec<f64> = (0..15).map(|_| rng.random::<f64>() + shift).collect();
            let exact = mann_whitney_u_with(&a, &b, Method::Exact).unwrap();
            let normal = mann_whitney_u_with(&a, &b, Method::Normal).unwrap();
            assert_eq!(exact.method, Method::Exact);
            assert!(
                (exact.p_value - normal.p_value).abs() < 0.01,
                "{} vs {}",
                exact.p_value,
                normal.p_value
            );
        }
    }
}

#[test]
fn identical_model_metric_against_baseline() {
    let model = [0.2; 5];
    let baseline = [0.25, 0.3, 0.22, 0.28, 0.31];
    let r = mann_whitney_u(&model, &baseline).unwrap();
    assert_eq!(r.u_a, 0.0);
    assert_eq!(r.method, Method::Exact);
    assert_eq!(r.p_value, enumerated_p(&model, &baseline));
}

fn toy() -> HidformerConfig {
    HidformerConfig {
        n_t: 4,
        n_e: 4,
        n_b: 2,
        n_d: 2,
        t_x: 8,
        t_y: 4,
        d_ff: 8,
        merge_factor: 2,
        seed: 0,
    }
}

/// Volume must vary for the min-max statistics to be defined.
fn volumes(n: usize) -> Vec<f64> {
    (0..n).map(|t| 1e6 + 1e4 * (t % 3) as f64).collect()
}

fn toy_window() -> WindowConfig {
    WindowConfig {
        t_x: 8,
        t_y: 4,
        stride: 1,
    }
}

#[test]
fn constant_validation_period_earns_nothing() {
    let mut closes: Vec<f64> = (0..80).map(|t| 100.0 + (t % 7) as f64).collect();
    closes.extend(std::iter::repeat_n(104.0, 20));
    let series =
        PriceSeries::new("FLAT", bars_from_closes(&closes, &volumes(closes.len()))).unwrap();
    let data = prepare(&series, 0.8, &toy_window(), StatsScope::Train).unwrap();
    let params = init_params(&toy(), 0).unwrap();
    let eval = evaluate(Predictor::Model(&params), &data, MetricsScale::Normalized).unwrap();
    // the first traded step leaves the last training close, which differs
    assert!(eval.backtest.returns[1..].iter().all(|&r| r == 0.0));
    let last = eval.backtest.net_value.last().unwrap();
    assert_eq!(*last, eval.backtest.net_value[0]);
}

#[test]
fn oracle_predictor_collects_every_move() {
    let series = gbm_series(120, 0.0005, 0.02, 4);
    let data = prepare(&series, 0.8, &toy_window(), StatsScope::Train).unwrap();
    let eval = evaluate(Predictor::Oracle, &data, MetricsScale::Normalized).unwrap();
    let closes = &eval.series.closes;
    assert_eq!(closes.len(), data.val_bars.len() + 1);
    let abs_total: f64 = closes.windows(2).map(|w| (w[1] / w[0]).ln().abs()).sum();
    assert!((eval.backtest.final_net_value - (1.0 + abs_total)).abs() < 1e-12);
    assert_eq!(eval.accuracy.mae, 0.0);
    assert_eq!(eval.accuracy.mse, 0.0);
    assert_eq!(eval.windows.len(), data.val.len());
}

#[test]
fn persistence_never_goes_long() {
    let closes: Vec<f64> = (0..100).map(|t| 50.0 + t as f64).collect();
    let series = PriceSeries::new("UP", bars_from_closes(&closes, &volumes(100))).unwrap();
    let data = prepare(&series, 0.8, &toy_window(), StatsScope::All).unwrap();
    let eval = evaluate(Predictor::Persistence, &data, MetricsScale::Raw).unwrap();
    assert!(eval.backtest.directions.iter().all(|&d| d == -1));
    assert!(eval.backtest.returns.iter().all(|&r| r < 0.0));
}

#[test]
fn persistence_on_constant_prices_has_zero_error() {
    let mut closes: Vec<f64> = (0..60).map(|t| 100.0 + (t % 5) as f64).collect();
    closes.extend(std::iter::repeat_n(102.0, 40));
    let series = PriceSeries::new("C", bars_from_closes(&closes, &volumes(100))).unwrap();
    let data = prepare(&series, 0.6, &toy_window(), StatsScope::Train).unwrap();
    let eval = evaluate(Predictor::Persistence, &data, MetricsScale::Normalized).unwrap();
    // windows whose inputs end inside the flat stretch
    for (truth, pred) in &eval.windows[1..] {
        assert_eq!(accuracy(pred, truth).unwrap().mae, 0.0);
    }
}

#[test]
fn backtest_report_invariants() {
    let closes = [100.0, 101.0, 99.5, 102.0, 102.0, 98.0];
    let preds = [102.0, 100.0, 103.0, 101.0, 99.0];
    let rep = backtest(&closes, &preds).unwrap();
    assert_eq!(rep.returns.len(), rep.net_value.len());
    assert_eq!(rep.net_value[0], 1.0 + rep.returns[0]);
    assert_eq!(rep.final_net_value, *rep.net_value.last().unwrap());
    assert!((0.0..=1.0).contains(&rep.risk.max_drawdown));
}
