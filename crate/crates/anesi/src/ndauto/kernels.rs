//! Shared numeric kernels. Both the tape ops and the direct (no-gradient)
//! forward paths call these, so the two routes produce bit-identical values.

pub fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x.iter()) {
            acc += a * b;
        }
        *o = acc;
    }
}

pub fn relu(x: &[f64], out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(x.iter()) {
        *o = if *v > 0.0 { *v } else { 0.0 };
    }
}

/// Log-softmax over the entries where `mask` is true; masked-out entries get
/// `f64::NEG_INFINITY`. `mask: None` means all entries are live.
///
/// Returns `false` when no entry is live (caller decides how to fail).
pub fn log_softmax_masked(x: &[f64], mask: Option<&[bool]>, out: &mut [f64]) -> bool {
    let live = |i: usize| mask.map_or(true, |m| m[i]);
    let mut hi = f64::NEG_INFINITY;
    for (i, v) in x.iter().enumerate() {
        if live(i) && *v > hi {
            hi = *v;
        }
    }
    if hi == f64::NEG_INFINITY {
        return false;
    }
    let mut z = 0.0;
    for (i, v) in x.iter().enumerate() {
        if live(i) {
            z += (*v - hi).exp();
        }
    }
    let lse = hi + z.ln();
    for (i, o) in out.iter_mut().enumerate() {
        *o = if live(i) { x[i] - lse } else { f64::NEG_INFINITY };
    }
    true
}

pub fn softmax(x: &[f64], out: &mut [f64]) {
    let ok = log_softmax_masked(x, None, out);
    debug_assert!(ok);
    for o in out.iter_mut() {
        *o = o.exp();
    }
}

/// `out = x / sum(x)`. Returns `false` when the total is not a positive
/// finite number (caller decides how to fail).
pub fn normalize_sum(x: &[f64], out: &mut [f64]) -> bool {
    let total: f64 = x.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return false;
    }
    for (o, v) in out.iter_mut().zip(x.iter()) {
        *o = v / total;
    }
    true
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`]: `ln(e^y - 1)` for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    if y > 20.0 {
        // e^{-y} underflows the ln_1p path's precision long before this
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}
