//! Dense kernels shared by the tape's forward and backward passes.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Error function (exact, via `libm`).
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Exact GELU: `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * FRAC_1_SQRT_2))
}

/// `d/dx [x * Phi(x)] = Phi(x) + x * phi(x)`.
pub fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

/// General strided product `c = alpha * a(m x k) * b(k x n) + beta * c`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    debug_assert!(c.len() >= m * n);
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the debug assertions above spell out the extents; every caller
    // passes contiguous row-major buffers whose lengths match (m, k, n).
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
            n as isize,
            1,
        );
    }
}

/// `c[n x m] (+)= a[n x k] * b[m x k]^T`
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize, accumulate: bool) {
    let beta = if accumulate { 1.0 } else { 0.0 };
    gemm(n, k, m, a, (k, 1), b, (1, k), beta, c);
}

/// `c[n x k] (+)= a[n x m] * b[m x k]`
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, m: usize, k: usize, accumulate: bool) {
    let beta = if accumulate { 1.0 } else { 0.0 };
    gemm(n, m, k, a, (m, 1), b, (k, 1), beta, c);
}

/// `c[m x k] (+)= a[n x m]^T * b[n x k]`
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, m: usize, k: usize, accumulate: bool) {
    let beta = if accumulate { 1.0 } else { 0.0 };
    gemm(m, n, k, a, (1, m), b, (k, 1), beta, c);
}
