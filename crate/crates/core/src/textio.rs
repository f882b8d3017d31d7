//! Text serialization helpers shared by the CSV interfaces.

/// Format with 17 significant digits, enough to round-trip any f64.
pub fn fmt_g17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Parse one CSV line into trimmed fields (plain comma split; none of the
/// crate's formats quote or embed commas).
pub fn split_csv(line: &str) -> Vec<&str> {
    line.split(',').map(|s| s.trim()).collect()
}

pub fn parse_f64(field: &str, file: &str, line_no: usize) -> crate::Result<f64> {
    field.parse::<f64>().map_err(|_| crate::Error::Parse {
        file: file.to_string(),
        line: line_no,
        msg: format!("expected a number, got {field:?}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g17_round_trips() {
        for v in [
            1.0,
            -0.0,
            std::f64::consts::PI,
            1e-300,
            123456789.123456789,
            f64::MIN_POSITIVE,
        ] {
            let s = fmt_g17(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(v.to_bits(), back.to_bits(), "{v} -> {s} -> {back}");
        }
    }
}
