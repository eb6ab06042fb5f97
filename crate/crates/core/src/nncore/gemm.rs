use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

/// `C (m×n) = alpha * op(A) op(B) + beta * C`, all row-major.
///
/// `op(A)` is m×k: `A` is stored m×k, or k×m when transposed; likewise `B`.
/// With `beta == 0` the prior contents of `C` are ignored.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    ta: Transpose,
    tb: Transpose,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm buffer too small");
    let (rsa, csa) = match ta {
        Transpose::No => (k as isize, 1),
        Transpose::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Transpose::No => (n as isize, 1),
        Transpose::Yes => (1, k as isize),
    };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserted buffer sizes cover every index reachable with
    // these dimensions and strides.
    unsafe {
        T::raw_gemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_transpose_combinations() {
        // A = [[1,2,3],[4,5,6]] (2x3), B = [[1,0],[0,1],[1,1]] (3x2)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let want = [4.0, 5.0, 10.0, 11.0];
        for (ta, aa) in [(Transpose::No, &a), (Transpose::Yes, &at)] {
            for (tb, bb) in [(Transpose::No, &b), (Transpose::Yes, &bt)] {
                let mut c = [0.0f64; 4];
                gemm(ta, tb, 2, 2, 3, 1.0, aa, bb, 0.0, &mut c);
                assert_eq!(c, want);
            }
        }
        let mut c = [1.0f32; 4];
        gemm(Transpose::No, Transpose::No, 2, 2, 3, 2.0, &a.map(|v| v as f32), &b.map(|v| v as f32), 1.0, &mut c);
        assert_eq!(c, [9.0, 11.0, 21.0, 23.0]);
    }
}
