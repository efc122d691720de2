//! Small linear-algebra kernels shared by the implicit integrator and the
//! Newton solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solves a tridiagonal system with partial pivoting (the LAPACK `gtsv`
/// elimination).
///
/// Row `j` of the matrix is `sub[j] x[j-1] + diag[j] x[j] + sup[j] x[j+1]`;
/// `sub[0]` and `sup[n-1]` are ignored. Returns `Error::Singular` on an exactly
/// zero pivot or a non-finite solution.
pub fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    assert!(sub.len() == n && sup.len() == n && rhs.len() == n);
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut d = diag.to_vec();
    let mut du = sup.to_vec();
    // dl[i] = A[i+1][i]; after elimination it holds the second superdiagonal.
    let mut dl: Vec<f64> = (0..n).map(|i| if i + 1 < n { sub[i + 1] } else { 0.0 }).collect();
    let mut b = rhs.to_vec();

    for i in 0..n.saturating_sub(1) {
        let last = i + 2 >= n;
        if d[i].abs() >= dl[i].abs() {
            if d[i] == 0.0 {
                return Err(Error::Singular(i));
            }
            let fact = dl[i] / d[i];
            d[i + 1] -= fact * du[i];
            b[i + 1] -= fact * b[i];
            dl[i] = 0.0;
        } else {
            let fact = d[i] / dl[i];
            d[i] = dl[i];
            let temp = d[i + 1];
            d[i + 1] = du[i] - fact * temp;
            if !last {
                dl[i] = du[i + 1];
                du[i + 1] = -fact * dl[i];
            } else {
                dl[i] = 0.0;
            }
            du[i] = temp;
            let tb = b[i];
            b[i] = b[i + 1];
            b[i + 1] = tb - fact * b[i + 1];
        }
    }
    if d[n - 1] == 0.0 {
        return Err(Error::Singular(n - 1));
    }
    b[n - 1] /= d[n - 1];
    if n > 1 {
        b[n - 2] = (b[n - 2] - du[n - 2] * b[n - 1]) / d[n - 2];
    }
    for i in (0..n.saturating_sub(2)).rev() {
        b[i] = (b[i] - du[i] * b[i + 1] - dl[i] * b[i + 2]) / d[i];
    }
    if let Some(i) = b.iter().position(|x| !x.is_finite()) {
        return Err(Error::Singular(i));
    }
    Ok(b)
}

/// Minimum-norm least-squares solution through the SVD pseudo-inverse.
pub fn solve_tridiagonal_pinv(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let m = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            diag[i]
        } else if j + 1 == i {
            sub[i]
        } else if i + 1 == j {
            sup[i]
        } else {
            0.0
        }
    });
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let pinv = m
        .pseudo_inverse(1e-13 * scale)
        .map_err(|e| Error::SolveFailed(format!("pseudo-inverse: {e}")))?;
    let x = pinv * DVector::from_column_slice(rhs);
    Ok(x.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn apply(sub: &[f64], diag: &[f64], sup: &[f64], x: &[f64]) -> Vec<f64> {
        let n = diag.len();
        (0..n)
            .map(|j| {
                let mut v = diag[j] * x[j];
                if j > 0 {
                    v += sub[j] * x[j - 1];
                }
                if j + 1 < n {
                    v += sup[j] * x[j + 1];
                }
                v
            })
            .collect()
    }

    #[test]
    fn solves_system_needing_pivoting() {
        // Zero leading pivot forces an interchange.
        let sub = [0.0, 3.0, 1.0, -2.0, 0.5];
        let diag = [0.0, 1.0, 4.0, 1e-3, 2.0];
        let sup = [1.0, 2.0, -1.0, 5.0, 0.0];
        let x = [1.0, -2.0, 3.0, 0.5, -1.5];
        let b = apply(&sub, &diag, &sup, &x);
        let got = solve_tridiagonal(&sub, &diag, &sup, &b).unwrap();
        for (g, e) in got.iter().zip(&x) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn single_and_pair() {
        assert_eq!(solve_tridiagonal(&[0.0], &[2.0], &[0.0], &[4.0]).unwrap(), vec![2.0]);
        let got = solve_tridiagonal(&[0.0, 1.0], &[1.0, 1.0], &[2.0, 0.0], &[5.0, 3.0]).unwrap();
        assert!((got[0] - 1.0).abs() < 1e-15 && (got[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn singular_is_reported() {
        let r = solve_tridiagonal(&[0.0, 1.0], &[1.0, 1.0], &[1.0, 0.0], &[1.0, 1.0]);
        assert!(matches!(r, Err(Error::Singular(_))));
        let x = solve_tridiagonal_pinv(&[0.0, 1.0], &[1.0, 1.0], &[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-12 && (x[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn random_systems_match_dense_solve() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for n in 1..30 {
            let sub: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let diag: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let sup: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = apply(&sub, &diag, &sup, &x);
            let got = solve_tridiagonal(&sub, &diag, &sup, &b).unwrap();
            let back = apply(&sub, &diag, &sup, &got);
            for (r, e) in back.iter().zip(&b) {
                assert!((r - e).abs() < 1e-9 * (1.0 + e.abs()), "n={n}");
            }
        }
    }
}
