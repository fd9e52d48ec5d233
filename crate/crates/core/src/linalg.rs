//! Safe wrappers over the strided gemm kernels.

use crate::scalar::Scalar;

/// `c[m,n] = alpha * op(a) * op(b) + beta * c`, all buffers row-major.
///
/// `op(a)` is `a[m,k]` or, when `ta`, the transpose of `a[k,m]`; same for `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; `c` is a unique borrow so it cannot alias.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
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
