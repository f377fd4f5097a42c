//! Dense f64 arrays and a define-by-run reverse-mode differentiation tape.
//!
//! Everything downstream (drift networks, SDE rollouts, the training
//! objective) is expressed through the primitives in this module, so the
//! whole solver differentiates through a single mechanism: record ops on a
//! [`Tape`], then sweep backward from a scalar output.
//!
//! Two properties are load-bearing for the rest of the crate:
//!
//! * all arithmetic is `f64` — there is no narrower float anywhere, and
//! * reductions over particle axes use correctly rounded summation
//!   ([`fsum`]), which makes them independent of summand order and hence
//!   makes permutation equivariance of the drift networks *bitwise* exact.

mod array;
mod sum;
mod tape;

pub use array::Array;
pub use sum::fsum;
pub use tape::{Binary, Gradients, ReduceKind, Tape, Unary, ValueId};

/// Row-major GEMM on contiguous buffers: `c = alpha * op(a) · op(b) + beta * c`,
/// where `op` is an optional transpose. `a` is logically `(m, k)` and `b` is
/// `(k, n)` after applying the transposes; `c` is `(m, n)`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: a buffer length");
    assert_eq!(b.len(), k * n, "gemm: b buffer length");
    assert_eq!(c.len(), m * n, "gemm: c buffer length");
    // Strides select the transposed view without copying: a stored as (k, m)
    // row-major and read with (rsa, csa) = (1, m) is aᵀ.
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
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
