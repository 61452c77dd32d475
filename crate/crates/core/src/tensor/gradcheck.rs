use super::{Tape, Tensor, TensorError, Var};

/// Magnitude below which gradient coordinates are compared absolutely.
///
/// Relative error for one coordinate is
/// `|analytic − numeric| / max(|analytic|, |numeric|, REL_ERROR_FLOOR)`.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    pub tolerance: f64,
    pub passed: bool,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64, TensorError>
where
    F: Fn(&Tape, &[Var]) -> Result<Var, TensorError>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(TensorError::NotScalar {
            shape: value.shape().to_vec(),
        });
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite {
            op: "finite_diff_check",
        });
    }
    Ok(v)
}

/// Compares tape gradients of a scalar function against central
/// differences `(f(p+h) − f(p−h)) / 2h`, one coordinate at a time.
pub fn finite_diff_check<F>(
    f: F,
    params: &[Tensor],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&Tape, &[Var]) -> Result<Var, TensorError>,
{
    if !(h > 0.0) {
        return Err(TensorError::InvalidArgument(format!(
            "step h must be positive, got {h}"
        )));
    }

    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&tape, &vars)?;
    if !tape.value(out).is_finite() {
        return Err(TensorError::NonFinite {
            op: "finite_diff_check",
        });
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v).clone()).collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0;
    let mut worst = None;
    for pi in 0..params.len() {
        let mut est = Tensor::zeros(params[pi].shape());
        for c in 0..params[pi].len() {
            let orig = params[pi].data()[c];
            work[pi].data_mut()[c] = orig + h;
            let up = evaluate(&f, &work)?;
            work[pi].data_mut()[c] = orig - h;
            let down = evaluate(&f, &work)?;
            work[pi].data_mut()[c] = orig;

            let n = (up - down) / (2.0 * h);
            est.data_mut()[c] = n;
            let a = analytic[pi].data()[c];
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR);
            if rel > max_rel_error || worst.is_none() {
                max_rel_error = rel;
                worst = Some((pi, c));
            }
        }
        numeric.push(est);
    }

    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
        tolerance: tol,
        passed: max_rel_error <= tol,
    })
}
