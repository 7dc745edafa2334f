//! Symmetric eigensolver: Householder tridiagonalization followed by
//! implicit-shift QL iteration. Deterministic, dense, intended for the small
//! matrices (p ≤ 64) of the semidefinite constraint family.

use thiserror::Error;

/// Hard cap on the matrix order accepted by [`sym_eigen`].
pub const MAX_ORDER: usize = 64;

const QL_TOL: f64 = 1e-12;
const QL_MAX_SWEEPS: usize = 50;

#[derive(Debug, Error)]
pub enum EigenError {
    #[error("matrix order {0} exceeds the supported maximum {MAX_ORDER}")]
    TooLarge(usize),
    #[error("matrix is not square or rows have inconsistent lengths")]
    NotSquare,
    #[error("QL iteration failed to converge for eigenvalue index {0}")]
    NoConvergence(usize),
}

/// Eigen-decomposition of a symmetric matrix (row-major).
///
/// Returns eigenvalues in ascending order and the matching orthonormal
/// eigenvectors as rows of the second element. Only the lower triangle of
/// the input is referenced.
pub fn sym_eigen(a: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>), EigenError> {
    let n = a.len();
    if n == 0 || a.iter().any(|r| r.len() != n) {
        return Err(EigenError::NotSquare);
    }
    if n > MAX_ORDER {
        return Err(EigenError::TooLarge(n));
    }
    if n == 1 {
        return Ok((vec![a[0][0]], vec![vec![1.0]]));
    }
    // symmetrize defensively against roundoff in caller-assembled matrices
    let mut z = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            z[i][j] = 0.5 * (a[i][j] + a[j][i]);
        }
    }
    let (mut d, mut e) = tred2(&mut z);
    tqli(&mut d, &mut e, &mut z)?;

    // z columns are eigenvectors; sort ascending and transpose to rows
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].total_cmp(&d[j]));
    let values: Vec<f64> = order.iter().map(|&i| d[i]).collect();
    let mut vectors = vec![vec![0.0; n]; n];
    for (row, &src) in order.iter().enumerate() {
        for i in 0..n {
            vectors[row][i] = z[i][src];
        }
    }
    Ok((values, vectors))
}

/// Largest eigenvalue and a matching unit eigenvector.
pub fn max_eigenpair(a: &[Vec<f64>]) -> Result<(f64, Vec<f64>), EigenError> {
    let (values, vectors) = sym_eigen(a)?;
    let last = values.len() - 1;
    Ok((values[last], vectors[last].clone()))
}

/// Householder reduction to tridiagonal form. On exit `z` holds the
/// accumulated orthogonal transform; returns (diagonal, subdiagonal).
fn tred2(z: &mut [Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = z.len();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let scale: f64 = z[i][..=l].iter().map(|v| v.abs()).sum();
            if scale == 0.0 {
                e[i] = z[i][l];
            } else {
                for j in 0..=l {
                    z[i][j] /= scale;
                    h += z[i][j] * z[i][j];
                }
                let mut f = z[i][l];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                z[i][l] = f - g;
                let mut tau = 0.0;
                for j in 0..=l {
                    z[j][i] = z[i][j] / h;
                    let mut g = 0.0;
                    for k in 0..=j {
                        g += z[j][k] * z[i][k];
                    }
                    for k in j + 1..=l {
                        g += z[k][j] * z[i][k];
                    }
                    e[j] = g / h;
                    tau += e[j] * z[i][j];
                }
                let hh = tau / (2.0 * h);
                for j in 0..=l {
                    f = z[i][j];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        let adj = f * e[k] + g * z[i][k];
                        z[j][k] -= adj;
                    }
                }
            }
        } else {
            e[i] = z[i][l];
        }
        d[i] = h;
    }
    d[0] = 0.0;
    e[0] = 0.0;
    for i in 0..n {
        if d[i] != 0.0 {
            for j in 0..i {
                let mut g = 0.0;
                for k in 0..i {
                    g += z[i][k] * z[k][j];
                }
                for k in 0..i {
                    z[k][j] -= g * z[k][i];
                }
            }
        }
        d[i] = z[i][i];
        z[i][i] = 1.0;
        for j in 0..i {
            z[j][i] = 0.0;
            z[i][j] = 0.0;
        }
    }
    (d, e)
}

fn pythag(a: f64, b: f64) -> f64 {
    a.hypot(b)
}

/// Implicit-shift QL iteration on a tridiagonal matrix, accumulating the
/// transforms into `z`.
fn tqli(d: &mut [f64], e: &mut [f64], z: &mut [Vec<f64>]) -> Result<(), EigenError> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= QL_TOL * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > QL_MAX_SWEEPS {
                return Err(EigenError::NoConvergence(l));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = pythag(g, 1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c) = (1.0, 1.0);
            let mut p = 0.0;
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = pythag(f, g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                for row in z.iter_mut() {
                    f = row[i + 1];
                    row[i + 1] = s * row[i] + c * f;
                    row[i] = c * row[i] - s * f;
                }
            }
            if r == 0.0 && m > l + 1 {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;

    fn residual(a: &[Vec<f64>], lam: f64, v: &[f64]) -> f64 {
        let n = a.len();
        (0..n)
            .map(|i| {
                let av = dot(&a[i], v);
                (av - lam * v[i]).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn diagonal_matrix_is_immediate() {
        let a = vec![
            vec![3.0, 0.0, 0.0],
            vec![0.0, -1.0, 0.0],
            vec![0.0, 0.0, 2.0],
        ];
        let (vals, _) = sym_eigen(&a).unwrap();
        assert!((vals[0] + 1.0).abs() < 1e-12);
        assert!((vals[1] - 2.0).abs() < 1e-12);
        assert!((vals[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn known_two_by_two() {
        // eigenvalues of [[2,1],[1,2]] are 1 and 3
        let a = vec![vec![2.0, 1.0], vec![1.0, 2.0]];
        let (vals, vecs) = sym_eigen(&a).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-12 && (vals[1] - 3.0).abs() < 1e-12);
        for (lam, v) in vals.iter().zip(&vecs) {
            assert!(residual(&a, *lam, v) < 1e-12);
        }
    }

    #[test]
    fn random_symmetric_residuals_and_orthonormality() {
        // deterministic pseudo-random fill
        let n = 12;
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let v = 4.0 * next();
                a[i][j] = v;
                a[j][i] = v;
            }
        }
        let (vals, vecs) = sym_eigen(&a).unwrap();
        for w in vals.windows(2) {
            assert!(w[0] <= w[1] + 1e-12);
        }
        for (lam, v) in vals.iter().zip(&vecs) {
            assert!(residual(&a, *lam, v) < 1e-9, "residual {}", residual(&a, *lam, v));
        }
        for i in 0..n {
            for j in 0..n {
                let g = dot(&vecs[i], &vecs[j]);
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((g - expect).abs() < 1e-10);
            }
        }
        // trace equals eigenvalue sum
        let tr: f64 = (0..n).map(|i| a[i][i]).sum();
        let sum: f64 = vals.iter().sum();
        assert!((tr - sum).abs() < 1e-9);
    }

    #[test]
    fn rejects_oversized_and_ragged() {
        let big = vec![vec![0.0; MAX_ORDER + 1]; MAX_ORDER + 1];
        assert!(matches!(sym_eigen(&big), Err(EigenError::TooLarge(_))));
        let ragged = vec![vec![0.0; 2], vec![0.0; 3]];
        assert!(matches!(sym_eigen(&ragged), Err(EigenError::NotSquare)));
    }

    #[test]
    fn max_eigenpair_rayleigh_dominance() {
        let a = vec![
            vec![1.0, 0.4, -0.2],
            vec![0.4, 0.5, 0.1],
            vec![-0.2, 0.1, 2.0],
        ];
        let (lam, v) = max_eigenpair(&a).unwrap();
        // Rayleigh quotient at the eigenvector attains the max eigenvalue
        let av: Vec<f64> = (0..3).map(|i| dot(&a[i], &v)).collect();
        assert!((dot(&av, &v) - lam).abs() < 1e-12);
    }
}
