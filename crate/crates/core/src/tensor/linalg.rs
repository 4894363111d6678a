use super::Real;

/// `c = alpha * a @ b + beta * c` on strided row/column layouts.
///
/// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; strides are in elements.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Real,
    a: &[Real],
    a_strides: (usize, usize),
    b: &[Real],
    b_strides: (usize, usize),
    beta: Real,
    c: &mut [Real],
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(span(m, k, a_strides) <= a.len(), "gemm: lhs out of bounds");
    assert!(span(k, n, b_strides) <= b.len(), "gemm: rhs out of bounds");
    assert!(span(m, n, c_strides) <= c.len(), "gemm: out out of bounds");
    // SAFETY: the bounds of every operand were checked above and `c` is
    // uniquely borrowed, so no aliasing writes happen.
    unsafe {
        kernel(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

fn span(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

#[cfg(not(feature = "f64"))]
use matrixmultiply::sgemm as kernel;
#[cfg(feature = "f64")]
use matrixmultiply::dgemm as kernel;
