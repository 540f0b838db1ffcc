//! Matrix-free iterative solvers: Jacobi-preconditioned conjugate gradients
//! and a blocked inverse subspace iteration for the lowest eigenpairs of a
//! symmetric positive (semi)definite operator.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::dot;

/// A symmetric linear operator acting on flat vectors.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
    fn diagonal(&self) -> Vec<f64>;
}

/// `shift * I + scale * A` for an operator `A`.
pub struct Shifted<'a, O: LinearOperator + ?Sized> {
    pub base: &'a O,
    pub shift: f64,
    pub scale: f64,
}

impl<O: LinearOperator + ?Sized> LinearOperator for Shifted<'_, O> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.base.apply(x, y);
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi = self.shift * xi + self.scale * *yi;
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        self.base
            .diagonal()
            .into_iter()
            .map(|d| self.shift + self.scale * d)
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CgOptions {
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            max_iter: 20_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CgReport {
    pub iterations: usize,
    pub rel_residual: f64,
}

/// Solves `A x = b` with Jacobi-preconditioned CG, starting from the
/// contents of `x`. The relative residual is measured against `|b|`.
pub fn pcg<O: LinearOperator + ?Sized>(
    op: &O,
    b: &[f64],
    x: &mut [f64],
    opts: CgOptions,
) -> Result<CgReport> {
    let n = op.dim();
    assert_eq!(b.len(), n);
    assert_eq!(x.len(), n);
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgReport {
            iterations: 0,
            rel_residual: 0.0,
        });
    }
    let inv_diag: Vec<f64> = op
        .diagonal()
        .into_iter()
        .map(|d| if d.abs() > 0.0 { 1.0 / d } else { 1.0 })
        .collect();

    let mut r = vec![0.0; n];
    op.apply(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, d)| a * d).collect();
    let mut p = z.clone();
    let mut q = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut history = Vec::new();
    let mut rel = dot(&r, &r).sqrt() / b_norm;
    history.push(rel);
    if rel <= opts.rel_tol {
        return Ok(CgReport {
            iterations: 0,
            rel_residual: rel,
        });
    }
    for it in 1..=opts.max_iter {
        op.apply(&p, &mut q);
        let pq = dot(&p, &q);
        if pq <= 0.0 || !pq.is_finite() {
            // Search direction in the kernel of a semidefinite operator:
            // the residual left is the inconsistent part.
            break;
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        rel = dot(&r, &r).sqrt() / b_norm;
        history.push(rel);
        if rel <= opts.rel_tol {
            return Ok(CgReport {
                iterations: it,
                rel_residual: rel,
            });
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::CgNotConverged {
        iterations: history.len() - 1,
        residual: rel,
        history,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct EigenOptions {
    /// Residual tolerance `|A x - theta x| <= tol * max(theta, 1)`.
    pub tol: f64,
    pub max_iter: usize,
    /// Extra block columns beyond the requested count.
    pub guard: usize,
    /// Shift applied before inversion; needed for semidefinite operators.
    pub shift: f64,
    pub inner: CgOptions,
    pub seed: u64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            guard: 8,
            shift: 0.0,
            inner: CgOptions {
                rel_tol: 1e-12,
                max_iter: 20_000,
            },
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    /// Euclidean-orthonormal eigenvectors.
    pub vectors: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

/// Lowest `k` eigenpairs by blocked inverse subspace iteration with a
/// Rayleigh-Ritz step per sweep. Each block column is pushed through
/// `(A + shift)^{-1}` with preconditioned CG.
pub fn lowest_eigenpairs<O: LinearOperator + ?Sized>(
    op: &O,
    k: usize,
    opts: EigenOptions,
) -> Result<EigenPairs> {
    let n = op.dim();
    if k == 0 || n == 0 {
        return Ok(EigenPairs {
            values: vec![],
            vectors: vec![],
            residuals: vec![],
            iterations: 0,
        });
    }
    let k = k.min(n);
    let block = (k + opts.guard).min(n);
    let shifted = Shifted {
        base: op,
        shift: opts.shift,
        scale: 1.0,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut x = DMatrix::from_fn(n, block, |_, _| rng.random::<f64>() - 0.5);
    let mut theta = vec![0.0; block];
    let mut residuals = vec![f64::INFINITY; block];
    let mut first = true;

    for iter in 1..=opts.max_iter {
        // Y = (A + shift)^{-1} X
        let mut y = DMatrix::zeros(n, block);
        if first {
            y.copy_from(&x);
        } else {
            let cols: Vec<Result<Vec<f64>>> = (0..block)
                .into_par_iter()
                .map(|c| {
                    let rhs: Vec<f64> = x.column(c).iter().copied().collect();
                    let denom = theta[c] + opts.shift;
                    let mut sol: Vec<f64> = if denom.abs() > 0.0 {
                        rhs.iter().map(|v| v / denom).collect()
                    } else {
                        vec![0.0; n]
                    };
                    pcg(&shifted, &rhs, &mut sol, opts.inner)?;
                    Ok(sol)
                })
                .collect();
            for (c, col) in cols.into_iter().enumerate() {
                let col = col?;
                y.column_mut(c).copy_from_slice(&col);
            }
        }
        first = false;

        let q = orthonormalize(y);
        let mut aq = DMatrix::zeros(n, block);
        let mut buf = vec![0.0; n];
        for c in 0..block {
            let col: Vec<f64> = q.column(c).iter().copied().collect();
            op.apply(&col, &mut buf);
            aq.column_mut(c).copy_from_slice(&buf);
        }
        let mut h = q.transpose() * &aq;
        let ht = h.transpose();
        h = (h + ht) * 0.5;
        let eig = SymmetricEigen::new(h);
        let mut order: Vec<usize> = (0..block).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let mut v = DMatrix::zeros(block, block);
        for (dst, &src) in order.iter().enumerate() {
            theta[dst] = eig.eigenvalues[src];
            v.column_mut(dst).copy_from(&eig.eigenvectors.column(src));
        }
        x = &q * &v;
        let ax = &aq * &v;
        for c in 0..block {
            let r: DVector<f64> = ax.column(c) - x.column(c) * theta[c];
            residuals[c] = r.norm();
        }
        let converged = (0..k).all(|c| residuals[c] <= opts.tol * theta[c].abs().max(1.0));
        if converged {
            return Ok(EigenPairs {
                values: theta[..k].to_vec(),
                vectors: (0..k)
                    .map(|c| x.column(c).iter().copied().collect())
                    .collect(),
                residuals: residuals[..k].to_vec(),
                iterations: iter,
            });
        }
    }
    let worst = residuals[..k].iter().cloned().fold(0.0, f64::max);
    Err(Error::EigenNotConverged {
        iterations: opts.max_iter,
        worst,
        values: theta[..k].to_vec(),
        residuals: residuals[..k].to_vec(),
    })
}

/// Orthonormal basis of the column span (two passes of modified Gram-Schmidt).
fn orthonormalize(mut y: DMatrix<f64>) -> DMatrix<f64> {
    let cols = y.ncols();
    for _pass in 0..2 {
        for c in 0..cols {
            for prev in 0..c {
                let proj = y.column(prev).dot(&y.column(c));
                let p = y.column(prev).clone_owned();
                y.column_mut(c).axpy(-proj, &p, 1.0);
            }
            let norm = y.column(c).norm();
            if norm > 1e-300 {
                y.column_mut(c).scale_mut(1.0 / norm);
            }
        }
    }
    y
}

/// Dense symmetric operator, used by tests and tiny problems.
pub struct DenseOperator {
    pub matrix: DMatrix<f64>,
}

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let v = &self.matrix * DVector::from_column_slice(x);
        y.copy_from_slice(v.as_slice());
    }

    fn diagonal(&self) -> Vec<f64> {
        self.matrix.diagonal().iter().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize) -> DenseOperator {
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 2.0;
            if i > 0 {
                m[(i, i - 1)] = -1.0;
            }
            if i + 1 < n {
                m[(i, i + 1)] = -1.0;
            }
        }
        DenseOperator { matrix: m }
    }

    #[test]
    fn cg_solves_spd_system() {
        let op = laplacian_1d(50);
        let b: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut x = vec![0.0; 50];
        let rep = pcg(&op, &b, &mut x, CgOptions::default()).unwrap();
        let mut ax = vec![0.0; 50];
        op.apply(&x, &mut ax);
        let err: f64 = ax
            .iter()
            .zip(&b)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-8, "residual {err}, report {rep:?}");
    }

    #[test]
    fn cg_reports_failure_with_history() {
        let op = laplacian_1d(200);
        let b = vec![1.0; 200];
        let mut x = vec![0.0; 200];
        let err = pcg(
            &op,
            &b,
            &mut x,
            CgOptions {
                rel_tol: 1e-14,
                max_iter: 3,
            },
        )
        .unwrap_err();
        match err {
            Error::CgNotConverged { history, .. } => assert_eq!(history.len(), 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn subspace_iteration_matches_dense_eigenvalues() {
        let n = 40;
        let op = laplacian_1d(n);
        let pairs = lowest_eigenpairs(&op, 5, EigenOptions::default()).unwrap();
        for (k, value) in pairs.values.iter().enumerate() {
            let exact = 4.0
                * (std::f64::consts::PI * (k + 1) as f64 / (2.0 * (n + 1) as f64))
                    .sin()
                    .powi(2);
            assert!((value - exact).abs() < 1e-9, "k={k}: {value} vs {exact}");
        }
        let d = dot(&pairs.vectors[0], &pairs.vectors[1]);
        assert!(d.abs() < 1e-10);
    }
}
