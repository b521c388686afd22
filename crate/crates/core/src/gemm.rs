//! Thin safe wrapper over `matrixmultiply::dgemm` for row-major buffers.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

/// `c = alpha · op(a) · op(b) + beta · c`, with `c` an `m×n` row-major buffer.
///
/// `lda`/`ldb` are the row strides of `a`/`b` as stored (before `op`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    lda: usize,
    ta: Transpose,
    b: &[f64],
    ldb: usize,
    tb: Transpose,
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    let (rsa, csa) = match ta {
        Transpose::No => {
            assert!(m == 0 || k == 0 || a.len() >= (m - 1) * lda + k);
            (lda as isize, 1)
        }
        Transpose::Yes => {
            assert!(m == 0 || k == 0 || a.len() >= (k - 1) * lda + m);
            (1, lda as isize)
        }
    };
    let (rsb, csb) = match tb {
        Transpose::No => {
            assert!(k == 0 || n == 0 || b.len() >= (k - 1) * ldb + n);
            (ldb as isize, 1)
        }
        Transpose::Yes => {
            assert!(k == 0 || n == 0 || b.len() >= (n - 1) * ldb + k);
            (1, ldb as isize)
        }
    };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches.
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
