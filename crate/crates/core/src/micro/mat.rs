//! Strided dense products over `matrixmultiply`.

/// Row and column stride of a matrix view.
#[derive(Debug, Clone, Copy)]
pub(crate) struct View {
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub const fn rows(cols: usize) -> Self {
        Self { rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub const fn trans(cols: usize) -> Self {
        Self { rs: 1, cs: cols }
    }

    fn last(self, r: usize, c: usize) -> usize {
        if r == 0 || c == 0 {
            0
        } else {
            (r - 1) * self.rs + (c - 1) * self.cs
        }
    }
}

/// `c ← alpha·a·b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    va: View,
    b: &[f64],
    vb: View,
    beta: f64,
    c: &mut [f64],
    vc: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(
        k == 0 || (va.last(m, k) < a.len() && vb.last(k, n) < b.len()),
        "gemm operand out of bounds"
    );
    assert!(vc.last(m, n) < c.len(), "gemm output out of bounds");
    // SAFETY: every index touched is bounded by the asserts above and the
    // output does not alias the inputs (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr(),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr(),
            vc.rs as isize,
            vc.cs as isize,
        );
    }
}

/// `c = a·b` (+ `beta·c`), all row-major.
pub(crate) fn mm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    gemm(
        m,
        k,
        n,
        1.0,
        a,
        View::rows(k),
        b,
        View::rows(n),
        beta,
        c,
        View::rows(n),
    );
}

/// `c = aᵀ·b` (+ `beta·c`) for row-major `a: k×m`, `b: k×n`.
pub(crate) fn mm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    gemm(
        m,
        k,
        n,
        1.0,
        a,
        View::trans(m),
        b,
        View::rows(n),
        beta,
        c,
        View::rows(n),
    );
}

/// `c = a·bᵀ` (+ `beta·c`) for row-major `a: m×k`, `b: n×k`.
pub(crate) fn mm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    gemm(
        m,
        k,
        n,
        1.0,
        a,
        View::rows(k),
        b,
        View::trans(k),
        beta,
        c,
        View::rows(n),
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_match_naive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3×2
        let mut c = [0.0; 4];
        mm(2, 3, 2, &a, &b, 0.0, &mut c);
        assert_eq!(c, [0.5, 7.0, 2.0, 16.0]);
        let mut d = [0.0; 9];
        mm_tn(3, 2, 3, &a, &a, 0.0, &mut d);
        assert_eq!(d, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
        let mut e = [1.0; 4];
        mm_nt(2, 3, 2, &a, &a, 1.0, &mut e);
        assert_eq!(e, [15.0, 33.0, 33.0, 78.0]);
    }
}
