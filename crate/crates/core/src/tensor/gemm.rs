use super::Scalar;

/// Storage order of a row-major matrix operand as seen by the product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Layout {
    /// Use the stored `rows x cols` matrix as is.
    Normal,
    /// Use the transpose of the stored matrix.
    Transposed,
}

impl Layout {
    /// Row and column strides of the logical operand, given the stored
    /// row-major matrix has `stored_cols` columns.
    fn strides(self, stored_cols: usize) -> (isize, isize) {
        match self {
            Layout::Normal => (stored_cols as isize, 1),
            Layout::Transposed => (1, stored_cols as isize),
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of size `m x k`,
/// `op(b)` of size `k x n` and row-major `c` of size `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let a_cols = if la == Layout::Normal { k } else { m };
    let b_cols = if lb == Layout::Normal { n } else { k };
    let (rsa, csa) = la.strides(a_cols);
    let (rsb, csb) = lb.strides(b_cols);
    // SAFETY: the asserts above bound every index reachable through the
    // strides; `c` is uniquely borrowed.
    unsafe {
        T::raw_gemm(
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
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, 1.0, &a, Layout::Transposed, &b, Layout::Normal, 0.0, &mut c);
        // a^T b = [[1,3],[2,4]] * b
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, 1.0, &a, Layout::Normal, &b, Layout::Transposed, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
