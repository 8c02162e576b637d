//! Plain row-major f64 matrix helpers used outside the autodiff tape:
//! closed-form posteriors, PCA, prediction statistics, test oracles.

/// C = A (m x k) * B (k x n).
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (aik, brow) in arow.iter().zip(b.chunks_exact(n)) {
            for (o, bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Lower Cholesky factor of the symmetric part of `a`. None when a pivot is
/// not strictly positive.
pub fn cholesky_lower(a: &[f64], n: usize) -> Option<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.5 * (a[i * n + j] + a[j * n + i]);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0 && s.is_finite()) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solves L X = B in place for lower-triangular L; B is n x k.
pub fn tri_solve_lower(l: &[f64], b: &mut [f64], n: usize, k: usize) {
    assert_eq!(l.len(), n * n);
    assert_eq!(b.len(), n * k);
    for i in 0..n {
        for r in 0..i {
            let lir = l[i * n + r];
            for c in 0..k {
                b[i * k + c] -= lir * b[r * k + c];
            }
        }
        let d = l[i * n + i];
        for c in 0..k {
            b[i * k + c] /= d;
        }
    }
}

/// Solves L^T X = B in place; B is n x k.
pub fn tri_solve_lower_t(l: &[f64], b: &mut [f64], n: usize, k: usize) {
    assert_eq!(l.len(), n * n);
    assert_eq!(b.len(), n * k);
    for i in (0..n).rev() {
        for r in i + 1..n {
            let lri = l[r * n + i];
            for c in 0..k {
                b[i * k + c] -= lri * b[r * k + c];
            }
        }
        let d = l[i * n + i];
        for c in 0..k {
            b[i * k + c] /= d;
        }
    }
}

/// Solves A X = B for symmetric positive definite A via Cholesky.
pub fn spd_solve(a: &[f64], b: &[f64], n: usize, k: usize) -> Option<Vec<f64>> {
    let l = cholesky_lower(a, n)?;
    let mut x = b.to_vec();
    tri_solve_lower(&l, &mut x, n, k);
    tri_solve_lower_t(&l, &mut x, n, k);
    Some(x)
}

pub fn spd_inverse(a: &[f64], n: usize) -> Option<Vec<f64>> {
    spd_solve(a, &identity(n), n, n)
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
    }
    out
}

pub fn logdet_from_chol(l: &[f64], n: usize) -> f64 {
    (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0
}

/// log N(x | 0, A) for symmetric positive definite A.
pub fn gaussian_logpdf_dense(x: &[f64], a: &[f64], n: usize) -> Option<f64> {
    let l = cholesky_lower(a, n)?;
    let mut w = x.to_vec();
    tri_solve_lower(&l, &mut w, n, 1);
    let quad: f64 = w.iter().map(|v| v * v).sum();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    Some(-0.5 * quad - 0.5 * logdet_from_chol(&l, n) - 0.5 * n as f64 * ln2pi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let out = matmul(&a, &identity(3), 2, 3, 3);
        assert_eq!(out, a);
    }

    #[test]
    fn cholesky_known_factor() {
        let a = vec![4.0, 2.0, 2.0, 3.0];
        let l = cholesky_lower(&a, 2).unwrap();
        assert!((l[0] - 2.0).abs() < 1e-15);
        assert!((l[1] - 0.0).abs() < 1e-15);
        assert!((l[2] - 1.0).abs() < 1e-15);
        assert!((l[3] - 2.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = vec![1.0, 2.0, 2.0, 1.0];
        assert!(cholesky_lower(&a, 2).is_none());
    }

    #[test]
    fn solves_invert_products() {
        let a = vec![4.0, 2.0, 2.0, 3.0];
        let l = cholesky_lower(&a, 2).unwrap();
        let mut x = vec![1.0, 0.0, 0.0, 1.0];
        tri_solve_lower(&l, &mut x, 2, 2);
        tri_solve_lower_t(&l, &mut x, 2, 2);
        // x should be A^-1 = [[3,-2],[-2,4]]/8
        assert!((x[0] - 0.375).abs() < 1e-14);
        assert!((x[1] + 0.25).abs() < 1e-14);
        assert!((x[2] + 0.25).abs() < 1e-14);
        assert!((x[3] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn spd_inverse_round_trip() {
        let a = vec![2.0, 0.5, 0.1, 0.5, 1.5, 0.2, 0.1, 0.2, 1.0];
        let inv = spd_inverse(&a, 3).unwrap();
        let prod = matmul(&a, &inv, 3, 3, 3);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[i * 3 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logpdf_standard_normal_at_zero() {
        let v = gaussian_logpdf_dense(&[0.0, 0.0], &identity(2), 2).unwrap();
        let want = -(2.0 * std::f64::consts::PI).ln();
        assert!((v - want).abs() < 1e-14);
    }
}
