//! Small dense helpers for the state dimensions used here (N is 1 or 2 in
//! the shipped problems). Everything works on caller-owned slices so the
//! per-step loops stay allocation free.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Solves `a x = b` in place by Gaussian elimination with partial pivoting.
/// `a` is row-major `n x n` and is destroyed; the solution overwrites `b`.
/// Returns `false` if a pivot vanishes.
pub fn solve_in_place(a: &mut [f64], b: &mut [f64], n: usize) -> bool {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for row in col + 1..n {
            let v = a[row * n + col].abs();
            if v > best {
                best = v;
                piv = row;
            }
        }
        if !(best > 0.0) || !best.is_finite() {
            return false;
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for row in col + 1..n {
            let f = a[row * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= f * a[col * n + j];
            }
            b[row] -= f * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = b[col];
        for j in col + 1..n {
            s -= a[col * n + j] * b[j];
        }
        b[col] = s / a[col * n + col];
    }
    true
}

/// Extreme eigenvalues `(min, max)` of the symmetric part of a row-major
/// square matrix.
pub fn sym_eig_range(m: &[f64], n: usize) -> (f64, f64) {
    match n {
        1 => (m[0], m[0]),
        2 => {
            let a = m[0];
            let d = m[3];
            let b = 0.5 * (m[1] + m[2]);
            let mean = 0.5 * (a + d);
            let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
            (mean - r, mean + r)
        }
        _ => {
            let sym = nalgebra::DMatrix::from_fn(n, n, |i, j| 0.5 * (m[i * n + j] + m[j * n + i]));
            let eig = sym.symmetric_eigenvalues();
            let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        }
    }
}

/// Frobenius norm of a flat slice.
pub fn frobenius(m: &[f64]) -> f64 {
    norm(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_pivoted_system() {
        let mut a = vec![0.0, 2.0, 1.0, 1.0];
        let mut b = vec![4.0, 3.0];
        assert!(solve_in_place(&mut a, &mut b, 2));
        assert!((b[0] - 1.0).abs() < 1e-15);
        assert!((b[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn singular_is_reported() {
        let mut a = vec![1.0, 2.0, 2.0, 4.0];
        let mut b = vec![1.0, 1.0];
        assert!(!solve_in_place(&mut a, &mut b, 2));
    }

    #[test]
    fn eig_range_matches_general_path() {
        let m = [-3.0, -1.0, -1.0, -2.0];
        let (lo, hi) = sym_eig_range(&m, 2);
        let m3 = [-3.0, -1.0, 0.0, -1.0, -2.0, 0.0, 0.0, 0.0, -2.5];
        let (lo3, hi3) = sym_eig_range(&m3, 3);
        assert!((lo - lo3).abs() < 1e-12);
        assert!((hi - hi3).abs() < 1e-12);
    }
}
