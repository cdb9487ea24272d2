//! Small descriptive-statistics helpers.

/// Linear-interpolated percentile of already sorted data (`q` in `[0, 100]`),
/// matching the default rule of common array libraries.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Same value as [`percentile_sorted`] on the sorted data, found by
/// selection in linear time. Reorders `buf`.
fn percentile_select(buf: &mut [f64], q: f64) -> f64 {
    assert!(!buf.is_empty(), "percentile of empty slice");
    let pos = (q / 100.0).clamp(0.0, 1.0) * (buf.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, &mut a, right) = buf.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || right.is_empty() {
        return a;
    }
    let b = right.iter().copied().min_by(f64::total_cmp).unwrap_or(a);
    a + (b - a) * frac
}

/// Returns the `(q_lo, q_hi)` percentiles of `values`.
pub fn percentile_pair(values: &[f64], q_lo: f64, q_hi: f64) -> (f64, f64) {
    let mut buf = values.to_vec();
    (percentile_select(&mut buf, q_lo), percentile_select(&mut buf, q_hi))
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population variance.
pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64
}
