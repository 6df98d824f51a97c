//! Dense helpers for the handful of unknowns these fits ever have.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{abs, sqrt};

/// Solves `a·x = b` in place by Gaussian elimination with partial pivoting.
/// `a` is row-major `n×n`. Returns `None` for a numerically singular system.
pub(crate) fn solve(a: &mut [f64], b: &mut [f64], n: usize) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let scale = a.iter().fold(0.0f64, |m, v| m.max(abs(*v)));
    if scale == 0.0 || !scale.is_finite() {
        return None;
    }
    for col in 0..n {
        let pivot =
            (col..n).max_by(|&i, &j| abs(a[i * n + col]).total_cmp(&abs(a[j * n + col])))?;
        if abs(a[pivot * n + col]) <= scale * 1e-300 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let d = a[col * n + col];
        for row in col + 1..n {
            let f = a[row * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in row + 1..n {
            s -= a[row * n + k] * x[k];
        }
        x[row] = s / a[row * n + row];
    }
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

/// Linear least squares `min ‖X·c − y‖` via Householder QR.
///
/// `design` is row-major `m×n` with `m ≥ n`. Returns `None` when a column is
/// (numerically) dependent on the others.
pub(crate) fn lstsq(design: &[f64], y: &[f64], m: usize, n: usize) -> Option<Vec<f64>> {
    debug_assert_eq!(design.len(), m * n);
    if m < n {
        return None;
    }
    let mut a = design.to_vec();
    let mut rhs = y.to_vec();
    let col_norms: Vec<f64> = (0..n)
        .map(|j| sqrt((0..m).map(|i| a[i * n + j] * a[i * n + j]).sum()))
        .collect();
    for k in 0..n {
        let norm = sqrt((k..m).map(|i| a[i * n + k] * a[i * n + k]).sum());
        if norm <= 1e-13 * col_norms[k].max(f64::MIN_POSITIVE) {
            return None;
        }
        let alpha = if a[k * n + k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|i| a[i * n + k]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in k..n {
            let dot: f64 = (k..m).map(|i| v[i - k] * a[i * n + j]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..m {
                a[i * n + j] -= f * v[i - k];
            }
        }
        let dot: f64 = (k..m).map(|i| v[i - k] * rhs[i]).sum();
        let f = 2.0 * dot / vnorm2;
        for i in k..m {
            rhs[i] -= f * v[i - k];
        }
    }
    let mut c = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = rhs[row];
        for k in row + 1..n {
            s -= a[row * n + k] * c[k];
        }
        c[row] = s / a[row * n + row];
    }
    Some(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_3x3() {
        let mut a = [2.0, 1.0, -1.0, -3.0, -1.0, 2.0, -2.0, 1.0, 2.0];
        let mut b = [8.0, -11.0, -3.0];
        let x = solve(&mut a, &mut b, 3).unwrap();
        for (got, want) in x.iter().zip([2.0, 3.0, -1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_is_none() {
        let mut a = [1.0, 2.0, 2.0, 4.0];
        let mut b = [1.0, 2.0];
        assert!(solve(&mut a, &mut b, 2).is_none());
    }

    #[test]
    fn lstsq_exact_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let design: Vec<f64> = xs.iter().flat_map(|&x| [1.0, x]).collect();
        let y: Vec<f64> = xs.iter().map(|x| 3.0 - 2.0 * x).collect();
        let c = lstsq(&design, &y, 4, 2).unwrap();
        assert!((c[0] - 3.0).abs() < 1e-13 && (c[1] + 2.0).abs() < 1e-13);
    }

    #[test]
    fn lstsq_dependent_columns() {
        let design = [1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
        assert!(lstsq(&design, &[1.0, 2.0, 3.0], 3, 2).is_none());
    }
}
