//! Thin safe wrappers over `matrixmultiply::sgemm` for row-major slices.

/// `c = a · b + beta · c` with `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn matmul(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize, beta: f32) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds asserted above; strides describe dense row-major layouts.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = a · bᵀ + beta · c` with `a: m×k`, `b: n×k`, `c: m×n`.
pub(crate) fn matmul_bt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize, beta: f32) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    // SAFETY: bounds asserted above; `b` is read through transposed strides.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = aᵀ · b + beta · c` with `a: k×m`, `b: k×n`, `c: m×n`.
pub(crate) fn matmul_at(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize, beta: f32) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds asserted above; `a` is read through transposed strides.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}
