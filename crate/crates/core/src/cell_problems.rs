//! Corrector problems on the matrix region.
//!
//! All solves share one finite-volume operator: the five-point Laplacian on
//! the matrix cells of a grid, with zero flux through faces shared with
//! inclusions (Neumann data enters the right-hand side), and either periodic
//! wrap-around or a homogeneous Dirichlet condition on the outer box.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dirichlet_modes::ModeBasis;
use crate::error::{Error, Result};
use crate::geometry::{Catalog, CellLabel, EnvironmentRealization, FineLayout, VolumeFractions};
use crate::grid::{count_components, dot};
use crate::limit_system::ExtendedState;
use crate::linalg::{pcg, CgOptions, CgReport, LinearOperator};

/// Unit directions in the neighbour order used throughout: `+x, -x, +y, -y`.
pub const DIRECTIONS: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Neighbour {
    Matrix(usize),
    Inclusion(usize),
    /// Outer face of a non-periodic box.
    Boundary,
}

/// Matrix cells of a rectangular grid and their face connectivity.
#[derive(Debug, Clone)]
pub struct MatrixGrid {
    pub nx: usize,
    pub ny: usize,
    pub spacing: f64,
    pub periodic: bool,
    /// Grid index of each unknown.
    pub cells: Vec<usize>,
    /// Unknown index of each grid cell, `usize::MAX` off the matrix.
    pub index: Vec<usize>,
    /// For `Inclusion`, the payload is the grid index of the inclusion cell.
    pub nbrs: Vec<[Neighbour; 4]>,
}

impl MatrixGrid {
    pub fn new(matrix: &[bool], nx: usize, ny: usize, spacing: f64, periodic: bool) -> Self {
        let mut index = vec![usize::MAX; nx * ny];
        let mut cells = Vec::new();
        for (k, &m) in matrix.iter().enumerate() {
            if m {
                index[k] = cells.len();
                cells.push(k);
            }
        }
        let nbrs = cells
            .iter()
            .map(|&k| {
                let (x, y) = ((k % nx) as i64, (k / nx) as i64);
                DIRECTIONS.map(|(dx, dy)| {
                    let (mut a, mut b) = (x + dx, y + dy);
                    if periodic {
                        a = a.rem_euclid(nx as i64);
                        b = b.rem_euclid(ny as i64);
                    } else if a < 0 || b < 0 || a >= nx as i64 || b >= ny as i64 {
                        return Neighbour::Boundary;
                    }
                    let g = b as usize * nx + a as usize;
                    if matrix[g] {
                        Neighbour::Matrix(index[g])
                    } else {
                        Neighbour::Inclusion(g)
                    }
                })
            })
            .collect();
        Self {
            nx,
            ny,
            spacing,
            periodic,
            cells,
            index,
            nbrs,
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Lifts unknowns to the full grid with zeros off the matrix.
    pub fn to_grid(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.nx * self.ny];
        for (&k, &v) in self.cells.iter().zip(u) {
            out[k] = v;
        }
        out
    }

    /// `⟨K u, u⟩ h²`: the discrete Dirichlet energy `∫ |∇u|²`.
    pub fn energy(&self, u: &[f64]) -> f64 {
        let mut ku = vec![0.0; u.len()];
        self.apply(u, &mut ku);
        dot(&ku, u) * self.spacing * self.spacing
    }

    /// Discrete `L²` norm over matrix cells.
    pub fn l2(&self, u: &[f64]) -> f64 {
        (dot(u, u)).sqrt() * self.spacing
    }
}

impl LinearOperator for MatrixGrid {
    fn dim(&self) -> usize {
        self.cells.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let s = 1.0 / (self.spacing * self.spacing);
        y.par_iter_mut()
            .with_min_len(4096)
            .enumerate()
            .for_each(|(i, yi)| {
                let mut acc = 0.0;
                for nb in &self.nbrs[i] {
                    match *nb {
                        Neighbour::Matrix(j) => acc += x[i] - x[j],
                        Neighbour::Boundary => acc += 2.0 * x[i],
                        Neighbour::Inclusion(_) => {}
                    }
                }
                *yi = s * acc;
            });
    }

    fn diagonal(&self) -> Vec<f64> {
        let s = 1.0 / (self.spacing * self.spacing);
        self.nbrs
            .iter()
            .map(|nb| {
                let d: f64 = nb
                    .iter()
                    .map(|n| match n {
                        Neighbour::Matrix(_) => 1.0,
                        Neighbour::Boundary => 2.0,
                        Neighbour::Inclusion(_) => 0.0,
                    })
                    .sum();
                // Isolated cells have an empty row; keep the preconditioner finite.
                if d == 0.0 {
                    s
                } else {
                    s * d
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectorKind {
    H,
    G,
    Phi,
}

/// A (possibly multi-component) field living on matrix cells.
#[derive(Debug, Clone)]
pub struct CorrectorField {
    pub kind: CorrectorKind,
    pub epsilon: Option<f64>,
    pub grid: MatrixGrid,
    /// One vector of unknowns per component.
    pub components: Vec<Vec<f64>>,
    pub zero_mean: bool,
    pub reports: Vec<CgReport>,
}

/// Matrix mask of the periodic `L x L` environment at `n` sub-cells per
/// lattice cell.
pub fn rve_matrix_mask(env: &EnvironmentRealization, catalog: &Catalog, n: usize) -> Vec<bool> {
    let l = env.lattice_size;
    let fp = env.footprint(catalog);
    let nc = l * n;
    (0..nc * nc)
        .map(|k| {
            let (x, y) = (k % nc, k / nc);
            fp[(y / n) * l + x / n].is_none()
        })
        .collect()
}

/// Source of the `k`-th corrector: `(1/δ)([+k face is matrix] - [-k face is matrix])`.
fn corrector_source(grid: &MatrixGrid, k: usize) -> Vec<f64> {
    let (plus, minus) = (2 * k, 2 * k + 1);
    let inv = 1.0 / grid.spacing;
    grid.nbrs
        .iter()
        .map(|nb| {
            let p = matches!(nb[plus], Neighbour::Matrix(_)) as i32 as f64;
            let m = matches!(nb[minus], Neighbour::Matrix(_)) as i32 as f64;
            inv * (p - m)
        })
        .collect()
}

/// Sum of the Neumann data of corrector `k` over the whole inclusion
/// boundary; zero by the divergence theorem.
pub fn corrector_compatibility(grid: &MatrixGrid, k: usize) -> f64 {
    corrector_source(grid, k).iter().sum::<f64>() * grid.spacing * grid.spacing
}

/// Solves the periodic corrector problem on an arbitrary matrix mask with
/// cell size `spacing` (the lattice cell has unit size).
pub fn solve_corrector_on_mask(
    matrix: &[bool],
    nx: usize,
    ny: usize,
    spacing: f64,
    cg: CgOptions,
) -> Result<CorrectorField> {
    if !matrix.iter().any(|&m| m) {
        return Err(Error::EmptyMatrix);
    }
    let components = count_components(matrix, nx, ny, true);
    if components != 1 {
        return Err(Error::DisconnectedMatrix { components });
    }
    let grid = MatrixGrid::new(matrix, nx, ny, spacing, true);
    let solved: Vec<Result<(Vec<f64>, CgReport)>> = (0..2)
        .into_par_iter()
        .map(|k| {
            let b = corrector_source(&grid, k);
            let mut x = vec![0.0; grid.len()];
            let report = pcg(&grid, &b, &mut x, cg)?;
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            x.iter_mut().for_each(|v| *v -= mean);
            Ok((x, report))
        })
        .collect();
    let mut comps = Vec::new();
    let mut reports = Vec::new();
    for s in solved {
        let (x, r) = s.map_err(|e| e.at_stage("corrector h"))?;
        comps.push(x);
        reports.push(r);
    }
    Ok(CorrectorField {
        kind: CorrectorKind::H,
        epsilon: None,
        grid,
        components: comps,
        zero_mean: true,
        reports,
    })
}

/// The corrector `h` on the periodic environment at `n` sub-cells per
/// lattice cell.
pub fn solve_h(
    env: &EnvironmentRealization,
    catalog: &Catalog,
    n: usize,
    cg: CgOptions,
) -> Result<CorrectorField> {
    let nc = env.lattice_size * n;
    let mask = rve_matrix_mask(env, catalog, n);
    solve_corrector_on_mask(&mask, nc, nc, 1.0 / n as f64, cg)
}

impl CorrectorField {
    /// Difference quotient of component `k` across the `dir` face of
    /// unknown `i`, or `None` when the face is not matrix-matrix.
    fn face_gradient(&self, k: usize, i: usize, dir: usize) -> Option<f64> {
        match self.grid.nbrs[i][dir] {
            Neighbour::Matrix(j) => {
                let sign = if dir.is_multiple_of(2) { 1.0 } else { -1.0 };
                Some(sign * (self.components[k][j] - self.components[k][i]) / self.grid.spacing)
            }
            _ => None,
        }
    }

    /// Cell-centred `∂_axis h_k`: the average of the two face values, with
    /// the Neumann value `-δ_{axis,k}` on inclusion faces.
    pub fn cell_gradient(&self, k: usize, i: usize, axis: usize) -> f64 {
        let neumann = if axis == k { -1.0 } else { 0.0 };
        let a = self.face_gradient(k, i, 2 * axis).unwrap_or(neumann);
        let b = self.face_gradient(k, i, 2 * axis + 1).unwrap_or(neumann);
        0.5 * (a + b)
    }

    /// `(1/|box|) Σ |h|²` over matrix cells, all components.
    pub fn mean_square(&self) -> f64 {
        let total: f64 = self.components.iter().map(|c| dot(c, c)).sum();
        total / (self.grid.nx * self.grid.ny) as f64
    }

    /// `(1/|box|) Σ |∇h|²` over matrix-matrix faces, all components.
    pub fn gradient_mean_square(&self) -> f64 {
        let mut total = 0.0;
        for k in 0..self.components.len() {
            for i in 0..self.grid.len() {
                for dir in [0, 2] {
                    if let Some(g) = self.face_gradient(k, i, dir) {
                        total += g * g;
                    }
                }
            }
        }
        total / (self.grid.nx * self.grid.ny) as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThetaReport {
    /// Symmetrised effective matrix.
    pub theta: [[f64; 2]; 2],
    /// Matrix before symmetrisation.
    pub raw: [[f64; 2]; 2],
    /// `|Θ01 - Θ10| / max |Θ|`.
    pub asymmetry: f64,
    pub eigenvalues: [f64; 2],
    /// Matrix-cell fraction of the grid the corrector was solved on.
    pub matrix_fraction: f64,
}

impl ThetaReport {
    pub fn require_positive_definite(&self) -> Result<()> {
        if self.eigenvalues[0] > 0.0 {
            Ok(())
        } else {
            Err(Error::ThetaNotPositiveDefinite {
                eigenvalues: self.eigenvalues,
            })
        }
    }
}

pub fn symmetric_eigenvalues(m: [[f64; 2]; 2]) -> [f64; 2] {
    let tr = m[0][0] + m[1][1];
    let diff = m[0][0] - m[1][1];
    let disc = (0.25 * diff * diff + m[0][1] * m[1][0]).max(0.0).sqrt();
    [0.5 * tr - disc, 0.5 * tr + disc]
}

/// `Θ_ik = (1/|box|) Σ_{matrix faces normal to i} (δ_ik + ∂_i h_k)`.
pub fn assemble_theta(h: &CorrectorField) -> ThetaReport {
    let mut raw = [[0.0; 2]; 2];
    for (i, row) in raw.iter_mut().enumerate() {
        for (k, entry) in row.iter_mut().enumerate() {
            let delta = if i == k { 1.0 } else { 0.0 };
            let mut s = 0.0;
            for c in 0..h.grid.len() {
                if let Some(g) = h.face_gradient(k, c, 2 * i) {
                    s += delta + g;
                }
            }
            *entry = s / (h.grid.nx * h.grid.ny) as f64;
        }
    }
    let off = 0.5 * (raw[0][1] + raw[1][0]);
    let theta = [[raw[0][0], off], [off, raw[1][1]]];
    let scale = raw.iter().flatten().fold(0.0_f64, |a, b| a.max(b.abs()));
    let asymmetry = if scale > 0.0 {
        (raw[0][1] - raw[1][0]).abs() / scale
    } else {
        0.0
    };
    ThetaReport {
        theta,
        raw,
        asymmetry,
        eigenvalues: symmetric_eigenvalues(theta),
        matrix_fraction: h.grid.len() as f64 / (h.grid.nx * h.grid.ny) as f64,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxDiagnostic {
    pub epsilon: f64,
    /// Discrete `H¹` norm over the matrix part of the box.
    pub h1_norm: f64,
    pub cg_iterations: usize,
}

fn box_grid(layout: &FineLayout) -> MatrixGrid {
    let matrix: Vec<bool> = (0..layout.n * layout.n)
        .map(|k| layout.is_matrix(k))
        .collect();
    MatrixGrid::new(&matrix, layout.n, layout.n, layout.spacing(), false)
}

fn h1_norm(grid: &MatrixGrid, u: &[f64]) -> f64 {
    let l2 = grid.l2(u);
    (l2 * l2 + grid.energy(u)).sqrt()
}

/// Constant that makes the per-period source of the second-order corrector
/// problem sum to zero on the discrete grid. Analytically it is `Θ / α₀`.
pub fn second_order_constant(h: &CorrectorField) -> [[f64; 2]; 2] {
    let g = &h.grid;
    let d = g.spacing;
    let mut out = [[0.0; 2]; 2];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, entry) in row.iter_mut().enumerate() {
            let delta = if i == j { 1.0 } else { 0.0 };
            let mut s = 0.0;
            for c in 0..g.len() {
                s += (delta + 2.0 * h.cell_gradient(j, c, i)) * d * d;
                for (dir, nb) in g.nbrs[c].iter().enumerate() {
                    if let Neighbour::Inclusion(_) = nb {
                        let nu = DIRECTIONS[dir];
                        let nu_j = if j == 0 { nu.0 } else { nu.1 } as f64;
                        s -= h.components[i][c] * nu_j * d;
                    }
                }
            }
            *entry = s / (g.len() as f64 * d * d);
        }
    }
    out
}

/// Solves `ΔΨ_ij = C_ij - δ_ij - 2 ∂_i h_j(x/ε)` on the matrix part of the
/// unit box with `∇Ψ_ij·ν = -ε h_i(x/ε) ν_j` on inclusion faces and `Ψ = 0`
/// on the outer boundary. `Ψ` plays the role of `ε² g(x/ε)`.
pub fn solve_g_diagnostic(
    layout: &FineLayout,
    h: &CorrectorField,
    constant: [[f64; 2]; 2],
    cg: CgOptions,
) -> Result<(CorrectorField, BoxDiagnostic)> {
    let nc = h.grid.nx;
    if layout.sub * (nc / layout.sub) != nc || nc * layout.periods != layout.n {
        return Err(Error::ResolutionMismatch(format!(
            "corrector grid {nc} does not tile the fine grid {}",
            layout.n
        )));
    }
    let grid = box_grid(layout);
    let eps = layout.epsilon;
    let hx = grid.spacing;
    let rve = |k: usize| -> usize {
        let (x, y) = (k % layout.n % nc, k / layout.n % nc);
        h.grid.index[y * nc + x]
    };
    let pairs = [(0usize, 0usize), (0, 1), (1, 0), (1, 1)];
    let solved: Vec<Result<(Vec<f64>, CgReport)>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let delta = if i == j { 1.0 } else { 0.0 };
            let b: Vec<f64> = (0..grid.len())
                .map(|c| {
                    let r = rve(grid.cells[c]);
                    let s = constant[i][j] - delta - 2.0 * h.cell_gradient(j, r, i);
                    let mut rhs = -s;
                    for (dir, nb) in grid.nbrs[c].iter().enumerate() {
                        if let Neighbour::Inclusion(_) = nb {
                            let nu = DIRECTIONS[dir];
                            let nu_j = if j == 0 { nu.0 } else { nu.1 } as f64;
                            let q = -eps * h.components[i][r] * nu_j;
                            rhs += q / hx;
                        }
                    }
                    rhs
                })
                .collect();
            let mut x = vec![0.0; grid.len()];
            let report = pcg(&grid, &b, &mut x, cg)?;
            Ok((x, report))
        })
        .collect();
    let mut comps = Vec::new();
    let mut reports = Vec::new();
    for s in solved {
        let (x, r) = s.map_err(|e| e.at_stage("second-order corrector"))?;
        comps.push(x);
        reports.push(r);
    }
    let norm = comps
        .iter()
        .map(|c| h1_norm(&grid, c).powi(2))
        .sum::<f64>()
        .sqrt();
    let iters = reports.iter().map(|r| r.iterations).sum();
    let field = CorrectorField {
        kind: CorrectorKind::G,
        epsilon: Some(eps),
        grid,
        components: comps,
        zero_mean: false,
        reports,
    };
    Ok((
        field,
        BoxDiagnostic {
            epsilon: eps,
            h1_norm: norm,
            cg_iterations: iters,
        },
    ))
}

/// Solves `ΔΦ = Υ(x)` on the matrix part of the unit box, with
/// `Υ = (1/α₀) Σ_j α_j Σ_m β_m u_m c_m(x)` and inclusion data
/// `∇Φ·ν = ε ∂_ν r_j`, where `r_j = Σ_m c_m κ_m` is the inclusion profile of
/// the limit state and `ν` points into the inclusion. `Ψ = 0` on the box
/// boundary. A `scale` multiplies both the source and the data.
pub fn solve_phi_diagnostic(
    layout: &FineLayout,
    state: &ExtendedState,
    bases: &[ModeBasis],
    fractions: &VolumeFractions,
    scale: f64,
    cg: CgOptions,
) -> Result<(CorrectorField, BoxDiagnostic)> {
    for b in bases {
        if b.resolution() != Some(layout.sub) {
            return Err(Error::ResolutionMismatch(format!(
                "mode raster {:?} vs fine sub-resolution {}",
                b.resolution(),
                layout.sub
            )));
        }
    }
    let grid = box_grid(layout);
    let eps = layout.epsilon;
    let hx = grid.spacing;
    let n = layout.n;
    let centre = |k: usize| ((k % n) as f64 + 0.5) / n as f64;
    let centre_y = |k: usize| ((k / n) as f64 + 0.5) / n as f64;
    let upsilon = |x: f64, y: f64| -> f64 {
        let mut s = 0.0;
        for (j, b) in bases.iter().enumerate() {
            for m in 0..state.c[j].len() {
                s += fractions.alpha[j] * b.betas[m] * b.u[m] * state.c[j][m].interpolate(x, y);
            }
        }
        s / fractions.alpha0
    };
    let b: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|c| {
            let k = grid.cells[c];
            let mut rhs = -upsilon(centre(k), centre_y(k));
            for nb in &grid.nbrs[c] {
                if let Neighbour::Inclusion(e) = *nb {
                    let CellLabel::Inclusion { instance, local } = layout.labels[e] else {
                        continue;
                    };
                    let kind = layout.instances[instance].kind;
                    let (x, y) = (centre(e), centre_y(e));
                    let r: f64 = (0..state.c[kind].len())
                        .map(|m| state.c[kind][m].interpolate(x, y) * bases[kind].kappas[m][local])
                        .sum();
                    let q = eps * 2.0 * layout.sub as f64 * r;
                    rhs += q / hx;
                }
            }
            scale * rhs
        })
        .collect();
    let mut x = vec![0.0; grid.len()];
    let report = pcg(&grid, &b, &mut x, cg).map_err(|e| e.at_stage("Φ diagnostic"))?;
    let norm = h1_norm(&grid, &x);
    let iterations = report.iterations;
    let field = CorrectorField {
        kind: CorrectorKind::Phi,
        epsilon: Some(eps),
        grid,
        components: vec![x],
        zero_mean: false,
        reports: vec![report],
    };
    Ok((
        field,
        BoxDiagnostic {
            epsilon: eps,
            h1_norm: norm,
            cg_iterations: iterations,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Inclusion, ReferenceDomain};

    fn cg() -> CgOptions {
        CgOptions::default()
    }

    #[test]
    fn empty_environment_gives_identity() {
        let env = EnvironmentRealization::empty(4);
        let cat = Catalog {
            domains: vec![],
            volume_cap: 1,
        };
        let h = solve_h(&env, &cat, 4, cg()).unwrap();
        assert!(h.components.iter().flatten().all(|&v| v == 0.0));
        let t = assemble_theta(&h);
        assert_eq!(t.theta, [[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn one_dimensional_channel_blocks_flux() {
        // A single row with one inclusion cell: along x the matrix is an
        // interval closed off by the inclusion, so 1 + h' = 0.
        let nx = 12;
        let mut mask = vec![true; nx];
        mask[5] = false;
        mask[6] = false;
        let h = solve_corrector_on_mask(&mask, nx, 1, 0.25, cg()).unwrap();
        for c in 0..h.grid.len() {
            if let Some(g) = h.face_gradient(0, c, 0) {
                assert!((1.0 + g).abs() < 1e-8, "{g}");
            }
        }
        let t = assemble_theta(&h);
        assert!(t.raw[0][0].abs() < 1e-8);
        assert!(t.require_positive_definite().is_err());
    }

    #[test]
    fn neumann_data_integrates_to_zero() {
        let (env, cat) = crate::geometry::generate_environment(16, 0.2, 3, 4).unwrap();
        let mask = rve_matrix_mask(&env, &cat, 4);
        let grid = MatrixGrid::new(&mask, 64, 64, 0.25, true);
        for k in 0..2 {
            assert!(corrector_compatibility(&grid, k).abs() < 1e-12);
        }
    }

    #[test]
    fn theta_bounded_by_matrix_fraction() {
        let mut env = EnvironmentRealization::empty(4);
        env.inclusions.push(Inclusion {
            kind: 0,
            anchor: [1, 1],
        });
        let cat = Catalog {
            domains: vec![ReferenceDomain {
                id: 0,
                width: 2,
                height: 1,
                cells: vec![true, true],
            }],
            volume_cap: 2,
        };
        let h = solve_h(&env, &cat, 4, cg()).unwrap();
        let t = assemble_theta(&h);
        t.require_positive_definite().unwrap();
        assert!(t.asymmetry < 1e-8);
        assert!(t.eigenvalues[1] <= t.matrix_fraction + 1e-12);
        // An x-elongated obstacle obstructs y-flux more than x-flux.
        assert!(t.theta[0][0] > t.theta[1][1]);
        let c = second_order_constant(&h);
        for i in 0..2 {
            for j in 0..2 {
                let expect = t.raw[i][j] / t.matrix_fraction;
                assert!(
                    (c[i][j] - expect).abs() < 0.2 * expect.abs().max(0.05),
                    "{c:?} vs {t:?}"
                );
            }
        }
    }
}
