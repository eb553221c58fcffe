//! Float formatting shared by every CSV writer.

/// Formats with 17 significant digits, enough to round-trip any f64.
pub fn fmt17(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let s = format!("{v:.16e}");
    let parsed: f64 = s.parse().expect("valid float");
    debug_assert_eq!(parsed, v);
    let (mantissa, exp) = s.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..17).contains(&exp) {
        let decimals = (16 - exp).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{mantissa}e{exp}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digit_formatting_round_trips() {
        for v in [0.1, 1.0 / 3.0, 0.25, 1e-9, 123456.789, -2.5e20, 0.0, 1.0] {
            let s = fmt17(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
        assert_eq!(fmt17(0.5), "0.50000000000000000");
    }
}
