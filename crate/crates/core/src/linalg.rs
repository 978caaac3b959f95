//! Dense symmetric eigen-solvers and small helpers shared by the PCA lens,
//! classical MDS and the chart frames.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Matrices up to this size are diagonalised in full with Jacobi sweeps.
const DENSE_LIMIT: usize = 128;

#[derive(Debug, Clone)]
pub struct EigenPairs {
    /// Eigenvalues in descending order.
    pub values: Array1<f64>,
    /// One eigenvector per column, matching `values`.
    pub vectors: Array2<f64>,
}

/// Flips `v` so that its largest-magnitude entry is positive (first such
/// entry on ties).
pub fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn fix_column_signs(vectors: &mut Array2<f64>) {
    for mut col in vectors.columns_mut() {
        let mut v = col.to_vec();
        fix_sign(&mut v);
        col.assign(&Array1::from(v));
    }
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigen(a: ArrayView2<f64>, tol: f64) -> Result<EigenPairs> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::arg("jacobi_eigen needs a square matrix"));
    }
    let mut m = a.to_owned();
    let mut v = Array2::<f64>::eye(n);
    let scale = m.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if off.sqrt() <= tol * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].total_cmp(&m[[i, i]]));
    let values = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let vectors = v.select(Axis(1), &order);
    Ok(EigenPairs { values, vectors })
}

/// In-place modified Gram-Schmidt on the columns of `q` (two passes).
fn orthonormalize(q: &mut Array2<f64>) {
    let p = q.ncols();
    for _ in 0..2 {
        for j in 0..p {
            for i in 0..j {
                let proj = q.column(i).dot(&q.column(j));
                let ci = q.column(i).to_owned();
                q.column_mut(j).scaled_add(-proj, &ci);
            }
            let norm = q.column(j).dot(&q.column(j)).sqrt();
            if norm > 1e-300 {
                q.column_mut(j).mapv_inplace(|x| x / norm);
            }
        }
    }
}

/// The `k` algebraically largest eigenpairs of a symmetric matrix.
///
/// Small matrices are solved exactly with Jacobi; larger ones by block
/// subspace iteration with Rayleigh-Ritz extraction. Eigenvectors follow the
/// [`fix_sign`] convention.
pub fn top_eigen(a: ArrayView2<f64>, k: usize, tol: f64) -> Result<EigenPairs> {
    let n = a.nrows();
    if k == 0 || k > n {
        return Err(Error::arg(format!("requested {k} eigenpairs of a {n}x{n} matrix")));
    }
    let mut pairs = if n <= DENSE_LIMIT {
        let full = jacobi_eigen(a, tol)?;
        EigenPairs {
            values: full.values.slice(s![..k]).to_owned(),
            vectors: full.vectors.slice(s![.., ..k]).to_owned(),
        }
    } else {
        subspace_iteration(a, k, tol)?
    };
    fix_column_signs(&mut pairs.vectors);
    Ok(pairs)
}

fn subspace_iteration(a: ArrayView2<f64>, k: usize, tol: f64) -> Result<EigenPairs> {
    let n = a.nrows();
    let p = (k + 8).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_e16e);
    let mut q = Array2::from_shape_fn((n, p), |_| rng.gen::<f64>() - 0.5);
    orthonormalize(&mut q);

    let scale = a.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(f64::MIN_POSITIVE) * n as f64;
    let mut last: Option<Array1<f64>> = None;
    for iter in 0..2000 {
        let z = a.dot(&q);
        let h = q.t().dot(&z);
        let h = (&h + &h.t()) * 0.5;
        let eig = jacobi_eigen(h.view(), 1e-14)?;
        let ritz = q.dot(&eig.vectors);
        let az = z.dot(&eig.vectors);

        let mut converged = true;
        for j in 0..k {
            let resid = &az.column(j) - &(&ritz.column(j) * eig.values[j]);
            if resid.dot(&resid).sqrt() > tol * scale {
                converged = false;
                break;
            }
        }
        // Residuals can plateau at rounding level on large matrices; accept
        // once the Ritz values stop moving.
        if let Some(prev) = &last {
            let stalled = (0..k).all(|j| (prev[j] - eig.values[j]).abs() <= 1e-14 * eig.values[j].abs().max(1.0));
            converged |= stalled && iter > 50;
        }
        if converged {
            return Ok(EigenPairs {
                values: eig.values.slice(s![..k]).to_owned(),
                vectors: ritz.slice(s![.., ..k]).to_owned(),
            });
        }
        last = Some(eig.values.clone());
        q = az;
        orthonormalize(&mut q);
    }
    Err(Error::Rank("subspace iteration did not converge".into()))
}

/// Orthogonal `Q` (n x n, reflections allowed) minimising `|src Q - dst|_F`.
pub fn procrustes(src: ArrayView2<f64>, dst: ArrayView2<f64>) -> Result<Array2<f64>> {
    let m = src.t().dot(&dst);
    // Q = M (M^T M)^{-1/2}
    let mtm = m.t().dot(&m);
    let eig = jacobi_eigen(mtm.view(), 1e-15)?;
    let n = m.ncols();
    let mut inv_sqrt = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let lam = eig.values[j];
        if lam <= 1e-300 {
            return Err(Error::Rank("Procrustes cross-covariance is singular".into()));
        }
        let vj = eig.vectors.column(j);
        for r in 0..n {
            for c in 0..n {
                inv_sqrt[[r, c]] += vj[r] * vj[c] / lam.sqrt();
            }
        }
    }
    Ok(m.dot(&inv_sqrt))
}

/// Principal axes of the rows of `points`: column means and the covariance
/// eigenpairs (descending).
pub fn principal_axes(points: ArrayView2<f64>) -> Result<(Array1<f64>, EigenPairs)> {
    let n = points.nrows();
    if n == 0 {
        return Err(Error::arg("principal axes of an empty point set"));
    }
    let mean = points.mean_axis(Axis(0)).expect("non-empty");
    let centered = &points - &mean;
    let cov = centered.t().dot(&centered) / n as f64;
    let mut eig = jacobi_eigen(cov.view(), 1e-14)?;
    fix_column_signs(&mut eig.vectors);
    Ok((mean, eig))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn jacobi_diagonalises_small_matrix() {
        let a = array![[2.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 5.0]];
        let eig = jacobi_eigen(a.view(), 1e-14).unwrap();
        assert_abs_diff_eq!(eig.values[0], 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eig.values[1], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eig.values[2], 1.0, epsilon = 1e-12);
        let recon = eig.vectors.dot(&Array2::from_diag(&eig.values)).dot(&eig.vectors.t());
        for (x, y) in recon.iter().zip(a.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn subspace_matches_jacobi() {
        let n = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((n, 4), |_| rng.gen::<f64>());
        let a = x.dot(&x.t());
        let top = top_eigen(a.view(), 2, 1e-10).unwrap();
        let full = jacobi_eigen(a.view(), 1e-14).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(top.values[j], full.values[j], epsilon = 1e-8 * full.values[0]);
            let dot = top.vectors.column(j).dot(&full.vectors.column(j)).abs();
            assert_abs_diff_eq!(dot, 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn procrustes_recovers_rotation() {
        let src = array![[1.0, 0.0], [0.0, 2.0], [-1.0, 0.5], [0.3, -1.0]];
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let rot = array![[c, -s], [s, c]];
        let dst = src.dot(&rot);
        let q = procrustes(src.view(), dst.view()).unwrap();
        for (x, y) in q.iter().zip(rot.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
    }

    #[test]
    fn sign_convention() {
        let mut v = vec![0.1, -0.9, 0.3];
        fix_sign(&mut v);
        assert_eq!(v, vec![-0.1, 0.9, -0.3]);
    }
}
