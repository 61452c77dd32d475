use statrs::distribution::{ContinuousCDF, Normal};

use super::EvalError;

/// Largest `n_a·n_b` for which the exact distribution is enumerated.
pub const EXACT_LIMIT: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Exact when `n_a·n_b ≤ EXACT_LIMIT`, normal otherwise.
    Auto,
    /// Permutation distribution of the rank sum.
    Exact,
    /// Normal approximation with tie and continuity corrections.
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MannWhitney {
    /// Pairs with `a > b`, plus half the ties.
    pub u_a: f64,
    pub u_b: f64,
    /// Two-sided.
    pub p_value: f64,
    /// `Exact` or `Normal`, never `Auto`.
    pub method: Method,
}

pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney, EvalError> {
    mann_whitney_u_with(a, b, Method::Auto)
}

/// Doubled midranks of the pooled sample (integers even under ties),
/// with the sizes of the tie groups.
fn doubled_ranks(a: &[f64], b: &[f64]) -> (Vec<u64>, Vec<bool>, Vec<u64>) {
    let mut pooled: Vec<(f64, bool)> = a
        .iter()
        .map(|&x| (x, true))
        .chain(b.iter().map(|&x| (x, false)))
        .collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = pooled.len();
    let mut ranks = vec![0; n];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // 1-based positions i+1..=j+1 share the midrank (i+j+2)/2
        for r in &mut ranks[i..=j] {
            *r = (i + j + 2) as u64;
        }
        ties.push((j - i + 1) as u64);
        i = j + 1;
    }
    let in_a = pooled.iter().map(|p| p.1).collect();
    (ranks, in_a, ties)
}

pub fn mann_whitney_u_with(a: &[f64], b: &[f64], method: Method) -> Result<MannWhitney, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::Empty("mann_whitney_u"));
    }
    let (na, nb) = (a.len(), b.len());
    let (ranks, in_a, ties) = doubled_ranks(a, b);
    let doubled_sum: u64 = ranks
        .iter()
        .zip(&in_a)
        .filter(|(_, &x)| x)
        .map(|(r, _)| r)
        .sum();
    let u_a = doubled_sum as f64 / 2.0 - (na * (na + 1)) as f64 / 2.0;
    let u_b = (na * nb) as f64 - u_a;

    let method = match method {
        Method::Auto if na * nb <= EXACT_LIMIT => Method::Exact,
        Method::Auto => Method::Normal,
        m => m,
    };
    let p_value = match method {
        Method::Exact => exact_p(&ranks, na, doubled_sum),
        _ => normal_p(u_a, na, nb, &ties),
    };
    Ok(MannWhitney {
        u_a,
        u_b,
        p_value,
        method,
    })
}

/// Share of the `C(N, n_a)` equally likely label assignments whose
/// doubled rank sum lies at least as far from its mean as the observed.
fn exact_p(ranks: &[u64], na: usize, observed: u64) -> f64 {
    let n = ranks.len() as u64;
    let max_sum: u64 = ranks.iter().sum();
    let width = max_sum as usize + 1;
    // counts[k][s]: subsets of size k with doubled rank sum s
    let mut counts = vec![vec![0u128; width]; na + 1];
    counts[0][0] = 1;
    let mut reach = 0usize;
    for (i, &r) in ranks.iter().enumerate() {
        let r = r as usize;
        reach += r;
        for k in (1..=na.min(i + 1)).rev() {
            let (lower, upper) = counts.split_at_mut(k);
            let (from, to) = (&lower[k - 1], &mut upper[0]);
            for s in (r..=reach).rev() {
                to[s] += from[s - r];
            }
        }
    }
    let mean = na as u64 * (n + 1);
    let dev = observed.abs_diff(mean);
    let (mut hit, mut total) = (0u128, 0u128);
    for (s, &c) in counts[na].iter().enumerate() {
        total += c;
        if (s as u64).abs_diff(mean) >= dev {
            hit += c;
        }
    }
    (hit as f64 / total as f64).min(1.0)
}

fn normal_p(u_a: f64, na: usize, nb: usize, ties: &[u64]) -> f64 {
    let (na, nb) = (na as f64, nb as f64);
    let n = na + nb;
    let mean = na * nb / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if !(var > 0.0) {
        return 1.0;
    }
    let z = ((u_a - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * std.sf(z)).min(1.0)
}
