//! Dirichlet eigenpairs of reference inclusions.
//!
//! Numerically, `-Δ` on a mask is the cell-centred five-point stencil with
//! the Dirichlet condition imposed on the outer faces of boundary cells
//! (a half-cell ghost distance, hence the factor `2 n²`). Eigenfunctions are
//! normalised in the discrete `L²(D)` inner product with cell weight `1/n²`.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DomainRaster, ReferenceDomain};
use crate::linalg::{lowest_eigenpairs, EigenOptions, LinearOperator};

/// Relative threshold below which a mode mean counts as zero.
pub const ZERO_MEAN_THRESHOLD: f64 = 1e-8;

/// Default number of modes kept per reference domain.
pub const DEFAULT_MODES: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeBasis {
    pub domain_id: usize,
    /// `|D|` in lattice-cell units.
    pub area: f64,
    /// Nondecreasing Dirichlet eigenvalues.
    pub betas: Vec<f64>,
    /// Means `u_m = ∫ κ_m`.
    pub u: Vec<f64>,
    /// Sampled eigenfunctions on `raster`, one vector per mode. Empty when
    /// the basis is purely analytic and has not been sampled.
    #[serde(skip)]
    pub kappas: Vec<Vec<f64>>,
    #[serde(skip)]
    pub raster: Option<DomainRaster>,
    /// `(m, n)` sine orders for analytic rectangle modes.
    pub orders: Vec<[usize; 2]>,
    /// Eigensolver residuals, empty for analytic bases.
    pub residuals: Vec<f64>,
}

impl ModeBasis {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn is_zero_mean(&self, m: usize) -> bool {
        self.u[m].abs() < ZERO_MEAN_THRESHOLD * self.area.sqrt()
    }

    /// `Σ_m u_m²`, bounded by `|D|`.
    pub fn bessel_sum(&self) -> f64 {
        self.u.iter().map(|u| u * u).sum()
    }

    /// Keeps the first `m` modes.
    pub fn truncated(&self, m: usize) -> ModeBasis {
        let m = m.min(self.len());
        let mut out = self.clone();
        out.betas.truncate(m);
        out.u.truncate(m);
        out.kappas.truncate(m);
        out.orders.truncate(m.min(out.orders.len()));
        out.residuals.truncate(m.min(out.residuals.len()));
        out
    }

    /// Sub-resolution of the sampled eigenfunctions.
    pub fn resolution(&self) -> Option<usize> {
        self.raster.as_ref().map(|r| r.n)
    }

    /// Discrete `L²(D)` inner product of two sampled modes.
    pub fn inner(&self, a: usize, b: usize) -> f64 {
        let n = self.resolution().unwrap_or(1) as f64;
        crate::grid::dot(&self.kappas[a], &self.kappas[b]) / (n * n)
    }
}

/// Closed-form modes of the rectangle `[0, lx] x [0, ly]`, the `count`
/// lowest by eigenvalue.
pub fn modes_rectangle_analytic(lx: f64, ly: f64, count: usize) -> ModeBasis {
    let beta =
        |m: usize, n: usize| PI * PI * ((m * m) as f64 / (lx * lx) + (n * n) as f64 / (ly * ly));
    let mut cutoff = 2.0 * beta(1, 1);
    let mut pairs = Vec::new();
    loop {
        pairs.clear();
        let mmax = (lx * cutoff.sqrt() / PI).floor() as usize;
        let nmax = (ly * cutoff.sqrt() / PI).floor() as usize;
        for m in 1..=mmax {
            for n in 1..=nmax {
                let b = beta(m, n);
                if b <= cutoff {
                    pairs.push((b, m, n));
                }
            }
        }
        if pairs.len() >= count {
            break;
        }
        cutoff *= 2.0;
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    pairs.truncate(count);
    rectangle_basis(lx, ly, &pairs)
}

/// Closed-form modes for every order `m <= mmax`, `n <= nmax`, sorted by
/// eigenvalue.
pub fn modes_rectangle_orders(lx: f64, ly: f64, mmax: usize, nmax: usize) -> ModeBasis {
    let mut pairs = Vec::with_capacity(mmax * nmax);
    for m in 1..=mmax {
        for n in 1..=nmax {
            let b = PI * PI * ((m * m) as f64 / (lx * lx) + (n * n) as f64 / (ly * ly));
            pairs.push((b, m, n));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    rectangle_basis(lx, ly, &pairs)
}

/// Mean of `(2/√(lx ly)) sin(mπx/lx) sin(nπy/ly)` over the rectangle.
pub fn rectangle_mode_mean(lx: f64, ly: f64, m: usize, n: usize) -> f64 {
    let odd = |k: usize| if k % 2 == 1 { 2.0 } else { 0.0 };
    2.0 * (lx * ly).sqrt() * odd(m) * odd(n) / (m as f64 * n as f64 * PI * PI)
}

fn rectangle_basis(lx: f64, ly: f64, pairs: &[(f64, usize, usize)]) -> ModeBasis {
    ModeBasis {
        domain_id: 0,
        area: lx * ly,
        betas: pairs.iter().map(|p| p.0).collect(),
        u: pairs
            .iter()
            .map(|p| rectangle_mode_mean(lx, ly, p.1, p.2))
            .collect(),
        kappas: vec![],
        raster: None,
        orders: pairs.iter().map(|p| [p.1, p.2]).collect(),
        residuals: vec![],
    }
}

/// Samples analytic rectangle modes at the cell centres of an integer
/// rectangle refined `n` times per lattice cell.
pub fn sample_rectangle(
    basis: &ModeBasis,
    domain: &ReferenceDomain,
    n: usize,
) -> Result<ModeBasis> {
    if domain.cell_count() != domain.width * domain.height {
        return Err(Error::InvalidParameter(
            "analytic sampling needs a full rectangle".into(),
        ));
    }
    let (lx, ly) = (domain.width as f64, domain.height as f64);
    let raster = domain.raster(n);
    let norm = 2.0 / (lx * ly).sqrt();
    let kappas = basis
        .orders
        .iter()
        .map(|&[m, k]| {
            let mut v = Vec::with_capacity(raster.nx * raster.ny);
            for iy in 0..raster.ny {
                for ix in 0..raster.nx {
                    let x = (ix as f64 + 0.5) / n as f64;
                    let y = (iy as f64 + 0.5) / n as f64;
                    v.push(norm * (m as f64 * PI * x / lx).sin() * (k as f64 * PI * y / ly).sin());
                }
            }
            v
        })
        .collect();
    Ok(ModeBasis {
        domain_id: domain.id,
        kappas,
        raster: Some(raster),
        ..basis.clone()
    })
}

/// The negative Dirichlet Laplacian restricted to the cells of a mask.
pub struct MaskLaplacian {
    n: usize,
    /// Raster index of each active unknown.
    cells: Vec<usize>,
    /// Neighbour unknowns (`usize::MAX` for a Dirichlet face), order
    /// `+x, -x, +y, -y`.
    nbrs: Vec<[usize; 4]>,
}

impl MaskLaplacian {
    pub fn new(raster: &DomainRaster) -> Self {
        let (nx, ny) = (raster.nx, raster.ny);
        let mut index = vec![usize::MAX; nx * ny];
        let mut cells = Vec::new();
        for (k, &m) in raster.mask.iter().enumerate() {
            if m {
                index[k] = cells.len();
                cells.push(k);
            }
        }
        let nbrs = cells
            .iter()
            .map(|&k| {
                let (x, y) = (k % nx, k / nx);
                let at = |xx: Option<usize>, yy: Option<usize>| match (xx, yy) {
                    (Some(a), Some(b)) if a < nx && b < ny => index[b * nx + a],
                    _ => usize::MAX,
                };
                [
                    at(Some(x + 1), Some(y)),
                    at(x.checked_sub(1), Some(y)),
                    at(Some(x), Some(y + 1)),
                    at(Some(x), y.checked_sub(1)),
                ]
            })
            .collect();
        Self {
            n: raster.n,
            cells,
            nbrs,
        }
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }
}

impl LinearOperator for MaskLaplacian {
    fn dim(&self) -> usize {
        self.cells.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let s = (self.n * self.n) as f64;
        y.par_iter_mut()
            .with_min_len(4096)
            .enumerate()
            .for_each(|(i, yi)| {
                let mut acc = 0.0;
                for &j in &self.nbrs[i] {
                    if j == usize::MAX {
                        acc += 2.0 * x[i];
                    } else {
                        acc += x[i] - x[j];
                    }
                }
                *yi = s * acc;
            });
    }

    fn diagonal(&self) -> Vec<f64> {
        let s = (self.n * self.n) as f64;
        self.nbrs
            .iter()
            .map(|nb| {
                s * nb
                    .iter()
                    .map(|&j| if j == usize::MAX { 2.0 } else { 1.0 })
                    .sum::<f64>()
            })
            .collect()
    }
}

/// Lowest `count` Dirichlet modes of a reference domain at sub-resolution `n`.
pub fn modes_mask_numeric(
    domain: &ReferenceDomain,
    n: usize,
    count: usize,
    tol: f64,
) -> Result<ModeBasis> {
    if n < 2 {
        return Err(Error::ResolutionMismatch(format!("sub-resolution {n} < 2")));
    }
    let raster = domain.raster(n);
    if !raster.is_connected() {
        return Err(Error::DisconnectedMask);
    }
    let op = MaskLaplacian::new(&raster);
    let count = count.min(op.dim());
    let opts = EigenOptions {
        tol,
        guard: 8.max(count / 2),
        ..EigenOptions::default()
    };
    let pairs = lowest_eigenpairs(&op, count, opts)?;

    let h2 = 1.0 / (n * n) as f64;
    let scale = n as f64;
    let mut vecs: Vec<Vec<f64>> = pairs
        .vectors
        .iter()
        .map(|v| v.iter().map(|x| x * scale).collect())
        .collect();
    concentrate_means(&pairs.values, &mut vecs, h2);

    let mut kappas = Vec::with_capacity(vecs.len());
    let mut u = Vec::with_capacity(vecs.len());
    for mut v in vecs {
        let mut mean: f64 = v.iter().sum::<f64>() * h2;
        let flip = if mean.abs() >= ZERO_MEAN_THRESHOLD * domain.area().sqrt() {
            mean < 0.0
        } else {
            // Sign convention for mean-free modes: largest entry positive.
            let big = v
                .iter()
                .cloned()
                .fold(0.0_f64, |a, b| if b.abs() > a.abs() { b } else { a });
            big < 0.0
        };
        if flip {
            v.iter_mut().for_each(|x| *x = -*x);
            mean = -mean;
        }
        let mut full = vec![0.0; raster.nx * raster.ny];
        for (&k, &val) in op.cells().iter().zip(&v) {
            full[k] = val;
        }
        kappas.push(full);
        u.push(mean);
    }
    Ok(ModeBasis {
        domain_id: domain.id,
        area: domain.area(),
        betas: pairs.values,
        u,
        kappas,
        raster: Some(raster),
        orders: vec![],
        residuals: pairs.residuals,
    })
}

/// Rotates each cluster of (numerically) equal eigenvalues so that at most
/// one vector of the cluster carries a nonzero mean.
fn concentrate_means(values: &[f64], vecs: &mut [Vec<f64>], h2: f64) {
    let mut start = 0;
    while start < values.len() {
        let mut end = start + 1;
        while end < values.len()
            && (values[end] - values[start]).abs() <= 1e-7 * values[start].abs()
        {
            end += 1;
        }
        let g = end - start;
        if g > 1 {
            let w: Vec<f64> = (start..end)
                .map(|i| vecs[i].iter().sum::<f64>() * h2)
                .collect();
            let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if wn > 0.0 {
                let q = complete_basis(&w.iter().map(|x| x / wn).collect::<Vec<_>>());
                let old: Vec<Vec<f64>> = vecs[start..end].to_vec();
                for (col, qc) in q.iter().enumerate() {
                    let target = &mut vecs[start + col];
                    target.iter_mut().for_each(|x| *x = 0.0);
                    for (r, &coef) in qc.iter().enumerate() {
                        for (t, o) in target.iter_mut().zip(&old[r]) {
                            *t += coef * o;
                        }
                    }
                }
            }
        }
        start = end;
    }
}

/// Orthonormal basis of `R^g` whose first vector is the unit vector `w`.
fn complete_basis(w: &[f64]) -> Vec<Vec<f64>> {
    let g = w.len();
    let mut basis: Vec<Vec<f64>> = vec![w.to_vec()];
    for e in 0..g {
        if basis.len() == g {
            break;
        }
        let mut v = vec![0.0; g];
        v[e] = 1.0;
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nv > 1e-8 {
            basis.push(v.into_iter().map(|x| x / nv).collect());
        }
    }
    basis
}

/// Numeric bases for a whole catalog, solved in parallel.
pub fn catalog_modes(
    domains: &[ReferenceDomain],
    n: usize,
    count: usize,
    tol: f64,
) -> Result<Vec<ModeBasis>> {
    domains
        .par_iter()
        .map(|d| {
            modes_mask_numeric(d, n, count, tol)
                .map_err(|e| e.at_stage(format!("modes for domain {}", d.id)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(w: usize, h: usize) -> ReferenceDomain {
        ReferenceDomain {
            id: 0,
            width: w,
            height: h,
            cells: vec![true; w * h],
        }
    }

    #[test]
    fn analytic_square_first_mode() {
        let b = modes_rectangle_analytic(1.0, 1.0, 3);
        assert!((b.betas[0] - 2.0 * PI * PI).abs() < 1e-12);
        assert_eq!(b.orders[0], [1, 1]);
        // Midpoint-rule quadrature of the sine product.
        let q = 2000;
        let mut s = 0.0;
        for i in 0..q {
            let x = (i as f64 + 0.5) / q as f64;
            s += (PI * x).sin();
        }
        let quad = 2.0 * (s / q as f64).powi(2);
        assert!((b.u[0] - quad).abs() < 1e-6);
        assert!((b.u[0] - 8.0 / (PI * PI)).abs() < 1e-14);
    }

    #[test]
    fn antisymmetric_mode_has_zero_mean() {
        let b = modes_rectangle_analytic(1.0, 1.0, 3);
        let k = b.orders.iter().position(|&o| o == [1, 2]).unwrap();
        assert_eq!(b.u[k], 0.0);
        assert!(b.is_zero_mean(k));
        assert!((b.betas[k] - 5.0 * PI * PI).abs() < 1e-12);
    }

    #[test]
    fn parseval_on_the_square() {
        let b = modes_rectangle_orders(1.0, 1.0, 63, 63);
        let s = b.bessel_sum();
        assert!((0.98..=1.0).contains(&s), "{s}");
        let lowest = modes_rectangle_analytic(1.0, 1.0, 63 * 63);
        let s2 = lowest.bessel_sum();
        assert!((0.98..=1.0).contains(&s2), "{s2}");
    }

    #[test]
    fn numeric_domino_matches_rectangle() {
        let b = modes_mask_numeric(&rect(1, 2), 16, 3, 1e-9).unwrap();
        let exact = PI * PI * 1.25;
        assert!((b.betas[0] - exact).abs() / exact < 0.01, "{}", b.betas[0]);
        assert!(b.inner(0, 1).abs() < 1e-8);
        assert!((b.inner(0, 0) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn numeric_square_degenerate_pair_is_mean_free() {
        let b = modes_mask_numeric(&rect(1, 1), 16, 4, 1e-9).unwrap();
        assert!(b.u[0] > 0.0);
        assert!(b.is_zero_mean(1) && b.is_zero_mean(2));
    }

    #[test]
    fn disconnected_mask_rejected() {
        let d = ReferenceDomain {
            id: 0,
            width: 2,
            height: 2,
            cells: vec![true, false, false, true],
        };
        assert!(matches!(
            modes_mask_numeric(&d, 8, 2, 1e-8),
            Err(Error::DisconnectedMask)
        ));
    }

    #[test]
    fn sampled_rectangle_is_orthonormal() {
        let b = modes_rectangle_analytic(2.0, 1.0, 4);
        let s = sample_rectangle(&b, &rect(2, 1), 32).unwrap();
        for a in 0..4 {
            for c in 0..4 {
                let expect = if a == c { 1.0 } else { 0.0 };
                assert!((s.inner(a, c) - expect).abs() < 1e-10);
            }
        }
    }
}
