//! Raw slice kernels shared by the graph ops.

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a` is stored `m×k` row-major unless `trans_a`, in which case it is stored
/// `k×m`; likewise for `b`. `lda`/`ldb`/`ldc` are row strides, which lets
/// callers address column blocks (attention heads) without copying.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    lda: usize,
    trans_a: bool,
    b: &[f64],
    ldb: usize,
    trans_b: bool,
    c: &mut [f64],
    ldc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, lda) } else { (lda, 1) };
    let (rsb, csb) = if trans_b { (1, ldb) } else { (ldb, 1) };
    if k > 0 {
        let last_a = if trans_a {
            (k - 1) * lda + m - 1
        } else {
            (m - 1) * lda + k - 1
        };
        let last_b = if trans_b {
            (n - 1) * ldb + k - 1
        } else {
            (k - 1) * ldb + n - 1
        };
        assert!(last_a < a.len() && last_b < b.len());
    }
    assert!((m - 1) * ldc + n - 1 < c.len());
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// In-place softmax of one row with max subtraction. Masked entries (`false`)
/// come out exactly zero. Returns `false` if every entry is masked.
pub(crate) fn softmax_row(row: &mut [f64], mask: Option<&[bool]>) -> bool {
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    if !(0..row.len()).any(keep) {
        return false;
    }
    let mut max = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if keep(i) && (v > max || v.is_nan()) {
            max = if max.is_nan() { max } else { v };
        }
    }
    if !max.is_finite() {
        // NaN or no finite score: propagate so the loss check catches it.
        for (i, v) in row.iter_mut().enumerate() {
            *v = if keep(i) { f64::NAN } else { 0.0 };
        }
        return true;
    }
    let mut total = 0.0;
    for (i, v) in row.iter_mut().enumerate() {
        if keep(i) {
            *v = (*v - max).exp();
            total += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= total;
    }
    true
}

/// Softmax backward for one row: `dx = p ⊙ (dp − ⟨dp, p⟩)`.
pub(crate) fn softmax_row_backward(p: &[f64], dp: &[f64], dx: &mut [f64]) {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    for ((d, &pi), &gi) in dx.iter_mut().zip(p).zip(dp) {
        *d += pi * (gi - dot);
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
