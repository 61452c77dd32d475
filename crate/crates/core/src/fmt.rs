//! Text formatting shared by every file writer.

/// Formats `x` with 17 significant digits in the style of C's `%.17g`:
/// fixed notation for moderate exponents, scientific otherwise, trailing
/// zeros trimmed. The output parses back to the identical `f64`.
pub fn format_f64(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "NaN".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..17).contains(&exp) {
        return format!("{}e{}", trim_zeros(mantissa), exp);
    }
    let fixed = format!("{:.*}", (16 - exp) as usize, x);
    trim_zeros(&fixed).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Formats an optional value, writing `NA` when it is undefined.
pub fn format_opt(x: Option<f64>) -> String {
    x.map(format_f64).unwrap_or_else(|| "NA".into())
}

/// Parses values written by [`format_opt`].
pub fn parse_opt(s: &str) -> Result<Option<f64>, std::num::ParseFloatError> {
    if s.trim() == "NA" {
        Ok(None)
    } else {
        s.trim().parse().map(Some)
    }
}
