//! Dense kernels shared by the forward and backward rules.

/// `c[m×n] = op(a)·op(b)` (or `+=` when `accumulate`), all buffers row-major.
///
/// With `trans_a` the buffer `a` holds a `[k×m]` matrix; with `trans_b`,
/// `b` holds `[n×k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly m*k, k*n and m*n elements and the
    // strides above address only those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically stable log-sum-exp of `row / temp`.
pub(crate) fn log_sum_exp(row: &[f64], temp: f64) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) / temp;
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = row.iter().map(|&v| (v / temp - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of `row / temp` written into `out`.
pub(crate) fn softmax_into(row: &[f64], temp: f64, out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) / temp;
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v / temp - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Softmax over the last axis of a flat buffer with rows of length `n`.
pub fn softmax_rows(data: &[f64], n: usize, temp: f64) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, o) in data.chunks(n).zip(out.chunks_mut(n)) {
        softmax_into(row, temp, o);
    }
    out
}
