//! Number formatting shared by CSV writers and the CLI.

/// Formats `x` with 12 significant digits, trimming trailing zeros.
pub fn sig12(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..15).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        let s = if s.contains('.') { s.trim_end_matches('0').trim_end_matches('.').to_string() } else { s };
        if s == "-0" { "0".into() } else { s }
    } else {
        let s = format!("{x:.11e}");
        let (mantissa, e) = s.split_once('e').unwrap();
        let mantissa = if mantissa.contains('.') { mantissa.trim_end_matches('0').trim_end_matches('.') } else { mantissa };
        format!("{mantissa}e{e}")
    }
}

#[cfg(test)]
mod tests {
    use super::sig12;

    #[test]
    fn formats() {
        assert_eq!(sig12(0.0), "0");
        assert_eq!(sig12(5.0), "5");
        assert_eq!(sig12(10.0 / 3.0), "3.33333333333");
        assert_eq!(sig12(-0.125), "-0.125");
        assert_eq!(sig12(1234567.891011121), "1234567.89101");
        assert_eq!(sig12(1e-7), "1e-7");
        assert_eq!(sig12(f64::INFINITY), "inf");
        assert_eq!(sig12(2.5e20), "2.5e20");
    }
}
