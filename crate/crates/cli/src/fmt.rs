//! Number formatting for result files. Rust's formatter never consults the
//! locale, so `.` is always the decimal separator.

pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "NaN".into()
    }
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_else(|| "NA".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_six_decimals() {
        assert_eq!(num(0.2), "0.200000");
        assert_eq!(num(-14.53), "-14.530000");
        assert_eq!(num(f64::NAN), "NaN");
        assert_eq!(opt_num(None), "NA");
    }
}
