/// Strides of a matrix operand stored row-major with leading dimension `ld`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    rs: usize,
    cs: usize,
}

impl Layout {
    pub(crate) fn row_major(ld: usize) -> Self {
        Self { rs: ld, cs: 1 }
    }

    /// Reads the stored row-major matrix as its transpose.
    pub(crate) fn transposed(ld: usize) -> Self {
        Self { rs: 1, cs: ld }
    }

    fn max_index(self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c[m,n] = a[m,k] · b[k,n] + beta · c`, with `c` dense row-major.
pub(crate) fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    c: &mut [f32],
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm: output too small");
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(la.max_index(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(lb.max_index(k, n) < b.len(), "gemm: rhs out of bounds");
    // SAFETY: the asserts above bound every index the kernel touches for
    // the given dimensions and strides; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_operands() {
        // a = [[1,2],[3,4]], b stored as [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm((2, 2, 2), &a, Layout::row_major(2), &b, Layout::transposed(2), &mut c, 0.0);
        // a · bᵀ
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm((2, 2, 2), &a, Layout::row_major(2), &b, Layout::row_major(2), &mut c, 1.0);
        assert_eq!(c, [17.0 + 19.0, 23.0 + 22.0, 39.0 + 43.0, 53.0 + 50.0]);
    }
}
