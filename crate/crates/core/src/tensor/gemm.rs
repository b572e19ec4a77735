//! Row-blocked GEMM on top of `matrixmultiply`.

use crate::par::*;

/// Output rows per parallel task. Fixed so results never depend on the
/// number of worker threads.
const ROW_BLOCK: usize = 64;

/// Storage layout of a logical matrix operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Layout {
    /// Stored as-is, row-major.
    Normal,
    /// Stored transposed, row-major.
    Transposed,
}

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of shape `m x k`,
/// `op(b)` of shape `k x n` and `c` row-major `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    c.par_chunks_mut(ROW_BLOCK * n)
        .enumerate()
        .for_each(|(block, c_rows)| {
            let row0 = block * ROW_BLOCK;
            let rows = c_rows.len() / n;
            let a_offset = match a_layout {
                Layout::Normal => row0 * k,
                Layout::Transposed => row0,
            };
            // SAFETY: the strides describe in-bounds views: rows `row0..row0+rows`
            // of op(a) and all of op(b); `c_rows` is an exclusive rows x n block.
            unsafe {
                matrixmultiply::dgemm(
                    rows,
                    k,
                    n,
                    alpha,
                    a.as_ptr().add(a_offset),
                    rsa,
                    csa,
                    b.as_ptr(),
                    rsb,
                    csb,
                    beta,
                    c_rows.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
}
