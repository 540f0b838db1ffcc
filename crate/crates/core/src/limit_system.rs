//! The two-scale limit generator on the extended space.
//!
//! A state is a coarse field `f₀` plus, for every inclusion type `j`, the
//! coefficients `c_m(x)` of `r_j = f_j - f₀` in the Dirichlet basis of the
//! reference domain. Because every `κ_m` vanishes on the boundary, the
//! matching `f_j = f₀` on `∂D_j` holds for any coefficients.
//!
//! The generator is the Galerkin operator of the Dirichlet form
//! `⟨Θ∇f₀, ∇f₀⟩ + Σ_j α_j Σ_m β_m ‖c_m‖²` with respect to the weighted inner
//! product `⟨F, G⟩_α`. In coordinates:
//!
//! ```text
//! α̃₀ (AF)₀   = Θ·∇∇f₀ + Σ_j α_j Σ_m u_m β_m c_m
//! (AF)_{j,m} = -β_m c_m - u_m (AF)₀
//! ```
//!
//! with `α̃₀ = 1 - Σ_j α_j Σ_m u_m²`, which equals `α₀` once the mode sums
//! are complete and stays exactly consistent under truncation.

use rayon::prelude::*;

use crate::dirichlet_modes::ModeBasis;
use crate::error::{Error, Result};
use crate::fine_grid::{step_count, StepRecord};
use crate::geometry::VolumeFractions;
use crate::grid::{dot, ScalarField};
use crate::linalg::{pcg, CgOptions, CgReport, LinearOperator};

#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedState {
    pub f0: ScalarField,
    /// `c[j][m]`: coefficient field of mode `m` of inclusion type `j`.
    pub c: Vec<Vec<ScalarField>>,
}

impl ExtendedState {
    pub fn zeros(n: usize, modes_per_type: &[usize]) -> Self {
        Self {
            f0: ScalarField::zeros(n),
            c: modes_per_type
                .iter()
                .map(|&m| vec![ScalarField::zeros(n); m])
                .collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.f0.n
    }

    pub fn mode_counts(&self) -> Vec<usize> {
        self.c.iter().map(Vec::len).collect()
    }

    /// `self + a * other`.
    pub fn axpy(&self, a: f64, other: &ExtendedState) -> ExtendedState {
        let add = |x: &ScalarField, y: &ScalarField| ScalarField {
            n: x.n,
            values: x
                .values
                .iter()
                .zip(&y.values)
                .map(|(p, q)| p + a * q)
                .collect(),
        };
        ExtendedState {
            f0: add(&self.f0, &other.f0),
            c: self
                .c
                .iter()
                .zip(&other.c)
                .map(|(cs, os)| cs.iter().zip(os).map(|(x, y)| add(x, y)).collect())
                .collect(),
        }
    }

    pub fn scaled(&self, a: f64) -> ExtendedState {
        let sc = |x: &ScalarField| ScalarField {
            n: x.n,
            values: x.values.iter().map(|v| a * v).collect(),
        };
        ExtendedState {
            f0: sc(&self.f0),
            c: self
                .c
                .iter()
                .map(|cs| cs.iter().map(sc).collect())
                .collect(),
        }
    }

    /// Every field as one flat vector, `f₀` first.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.f0.values.clone();
        for cs in &self.c {
            for f in cs {
                out.extend_from_slice(&f.values);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct LimitParameters {
    pub theta: [[f64; 2]; 2],
    pub fractions: VolumeFractions,
    pub bases: Vec<ModeBasis>,
}

impl LimitParameters {
    pub fn new(
        theta: [[f64; 2]; 2],
        fractions: VolumeFractions,
        bases: Vec<ModeBasis>,
    ) -> Result<Self> {
        if bases.len() != fractions.alpha.len() {
            return Err(Error::InvalidParameter(format!(
                "{} mode bases for {} inclusion types",
                bases.len(),
                fractions.alpha.len()
            )));
        }
        for (b, a) in bases.iter().zip(&fractions.alpha) {
            let covered = a * b.area;
            if covered.is_nan() || covered < 0.0 {
                return Err(Error::InvalidParameter("negative volume fraction".into()));
            }
        }
        Ok(Self {
            theta,
            fractions,
            bases,
        })
    }

    pub fn mode_counts(&self) -> Vec<usize> {
        self.bases.iter().map(ModeBasis::len).collect()
    }

    /// `α̃₀ = α₀ + Σ_j α_j (|D_j| - Σ_m u_m²)`.
    pub fn alpha_tilde0(&self) -> f64 {
        let f = &self.fractions;
        f.alpha0
            + self
                .bases
                .iter()
                .zip(&f.alpha)
                .map(|(b, a)| a * (b.area - b.bessel_sum()))
                .sum::<f64>()
    }

    /// `S(m) = α̃₀ + Σ_j α_j Σ_k u_k² β_k / (m + β_k)`, the weight of `m f₀`
    /// once the mode equations are eliminated from the resolvent.
    pub fn schur_weight(&self, m: f64) -> f64 {
        self.alpha_tilde0()
            + self
                .bases
                .iter()
                .zip(&self.fractions.alpha)
                .map(|(b, a)| {
                    a * b
                        .betas
                        .iter()
                        .zip(&b.u)
                        .map(|(beta, u)| u * u * beta / (m + beta))
                        .sum::<f64>()
                })
                .sum::<f64>()
    }

    /// Reduced coarse operator of the resolvent, normalised by `α₀`:
    /// `(m S(m) - Θ·∇∇) / α₀`.
    pub fn reduced_operator(&self, m: f64, n: usize) -> ReducedOperator {
        ReducedOperator {
            stencil: ThetaStencil::new(n, self.theta),
            weight: m * self.schur_weight(m),
            alpha0: self.fractions.alpha0,
        }
    }
}

/// `-Θ·∇∇` on a periodic coarse grid, with the symmetric nine-point
/// discretisation of the cross derivative. Symmetric positive semidefinite.
#[derive(Debug, Clone)]
pub struct ThetaStencil {
    pub n: usize,
    pub theta: [[f64; 2]; 2],
}

impl ThetaStencil {
    pub fn new(n: usize, theta: [[f64; 2]; 2]) -> Self {
        Self { n, theta }
    }
}

impl LinearOperator for ThetaStencil {
    fn dim(&self) -> usize {
        self.n * self.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n = self.n;
        let inv = (n * n) as f64;
        let (txx, tyy) = (self.theta[0][0], self.theta[1][1]);
        let txy = 0.5 * (self.theta[0][1] + self.theta[1][0]);
        y.par_chunks_mut(n).enumerate().for_each(|(iy, row)| {
            let up = ((iy + 1) % n) * n;
            let dn = ((iy + n - 1) % n) * n;
            let here = iy * n;
            for ix in 0..n {
                let r = (ix + 1) % n;
                let l = (ix + n - 1) % n;
                let c = x[here + ix];
                let dxx = x[here + r] - 2.0 * c + x[here + l];
                let dyy = x[up + ix] - 2.0 * c + x[dn + ix];
                let dxy = 0.25 * (x[up + r] - x[up + l] - x[dn + r] + x[dn + l]);
                row[ix] = -inv * (txx * dxx + tyy * dyy + 2.0 * txy * dxy);
            }
        });
    }

    fn diagonal(&self) -> Vec<f64> {
        let inv = (self.n * self.n) as f64;
        vec![2.0 * inv * (self.theta[0][0] + self.theta[1][1]); self.n * self.n]
    }
}

/// `(weight I - Θ·∇∇) / α₀` on the coarse grid.
pub struct ReducedOperator {
    pub stencil: ThetaStencil,
    pub weight: f64,
    pub alpha0: f64,
}

impl LinearOperator for ReducedOperator {
    fn dim(&self) -> usize {
        self.stencil.dim()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.stencil.apply(x, y);
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi = (self.weight * xi + *yi) / self.alpha0;
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        self.stencil
            .diagonal()
            .into_iter()
            .map(|d| (self.weight + d) / self.alpha0)
            .collect()
    }
}

fn check_grid(f: &ExtendedState, p: &LimitParameters) -> Result<()> {
    if f.mode_counts() != p.mode_counts() {
        return Err(Error::GridMismatch(format!(
            "state carries modes {:?}, parameters {:?}",
            f.mode_counts(),
            p.mode_counts()
        )));
    }
    let n = f.n();
    if f.c.iter().flatten().any(|c| c.n != n) {
        return Err(Error::GridMismatch("mode fields on different grids".into()));
    }
    Ok(())
}

/// `Σ_j α_j Σ_m u_m β_m c_m` pointwise.
fn coupling_flux(f: &ExtendedState, p: &LimitParameters) -> Vec<f64> {
    let mut out = vec![0.0; f.n() * f.n()];
    for ((cs, b), a) in f.c.iter().zip(&p.bases).zip(&p.fractions.alpha) {
        for (m, c) in cs.iter().enumerate() {
            let w = a * b.u[m] * b.betas[m];
            if w != 0.0 {
                for (o, v) in out.iter_mut().zip(&c.values) {
                    *o += w * v;
                }
            }
        }
    }
    out
}

pub fn apply_a(f: &ExtendedState, p: &LimitParameters) -> Result<ExtendedState> {
    check_grid(f, p)?;
    let n = f.n();
    let stencil = ThetaStencil::new(n, p.theta);
    let mut row0 = vec![0.0; n * n];
    stencil.apply(&f.f0.values, &mut row0);
    let flux = coupling_flux(f, p);
    let at0 = p.alpha_tilde0();
    for (r, q) in row0.iter_mut().zip(&flux) {
        *r = (-*r + q) / at0;
    }
    let c =
        f.c.par_iter()
            .zip(&p.bases)
            .map(|(cs, b)| {
                cs.iter()
                    .enumerate()
                    .map(|(m, cm)| ScalarField {
                        n,
                        values: cm
                            .values
                            .iter()
                            .zip(&row0)
                            .map(|(v, r)| -b.betas[m] * v - b.u[m] * r)
                            .collect(),
                    })
                    .collect()
            })
            .collect();
    Ok(ExtendedState {
        f0: ScalarField { n, values: row0 },
        c,
    })
}

/// `⟨F, G⟩_α = α₀∫f₀g₀ + Σ_j α_j ∫∫_{D_j} f_j g_j`.
pub fn inner_alpha(f: &ExtendedState, g: &ExtendedState, p: &LimitParameters) -> f64 {
    let h2 = f.f0.cell_area();
    let fr = &p.fractions;
    let mut total = fr.alpha0 * dot(&f.f0.values, &g.f0.values);
    for (j, b) in p.bases.iter().enumerate() {
        let a = fr.alpha[j];
        let mut s = b.area * dot(&f.f0.values, &g.f0.values);
        for m in 0..b.len() {
            s += b.u[m]
                * (dot(&f.f0.values, &g.c[j][m].values) + dot(&g.f0.values, &f.c[j][m].values));
            s += dot(&f.c[j][m].values, &g.c[j][m].values);
        }
        total += a * s;
    }
    total * h2
}

pub fn norm_alpha(f: &ExtendedState, p: &LimitParameters) -> f64 {
    inner_alpha(f, f, p).max(0.0).sqrt()
}

/// `Γ₀(F) = ⟨Θ∇f₀, ∇f₀⟩ + Σ_j α_j Σ_m β_m ‖c_m‖²`, equal to `-⟨AF, F⟩_α`.
pub fn energy_form(f: &ExtendedState, p: &LimitParameters) -> f64 {
    let h2 = f.f0.cell_area();
    let stencil = ThetaStencil::new(f.n(), p.theta);
    let mut lf = vec![0.0; f.n() * f.n()];
    stencil.apply(&f.f0.values, &mut lf);
    let mut total = dot(&lf, &f.f0.values);
    for ((cs, b), a) in f.c.iter().zip(&p.bases).zip(&p.fractions.alpha) {
        for (m, c) in cs.iter().enumerate() {
            total += a * b.betas[m] * dot(&c.values, &c.values);
        }
    }
    total * h2
}

/// `∫ α₀ f₀ + Σ_j α_j ∫_{D_j} f_j`, conserved by the limit evolution.
pub fn extended_mass(f: &ExtendedState, p: &LimitParameters) -> f64 {
    let h2 = f.f0.cell_area();
    let fr = &p.fractions;
    let s0: f64 = f.f0.values.iter().sum();
    let mut total = fr.alpha0 * s0;
    for (j, b) in p.bases.iter().enumerate() {
        let mut s = b.area * s0;
        for m in 0..b.len() {
            s += b.u[m] * f.c[j][m].values.iter().sum::<f64>();
        }
        total += fr.alpha[j] * s;
    }
    total * h2
}

/// Solves `m F - A F = U` by eliminating the modes and one coarse CG solve.
pub fn resolvent_solve(
    m: f64,
    u: &ExtendedState,
    p: &LimitParameters,
    cg: CgOptions,
) -> Result<(ExtendedState, CgReport)> {
    resolvent_solve_from(m, u, p, cg, None)
}

fn resolvent_solve_from(
    m: f64,
    u: &ExtendedState,
    p: &LimitParameters,
    cg: CgOptions,
    guess: Option<&ScalarField>,
) -> Result<(ExtendedState, CgReport)> {
    if m.is_nan() || m <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "resolvent parameter {m} <= 0"
        )));
    }
    check_grid(u, p)?;
    let n = u.n();
    let s = p.schur_weight(m);
    let fr = &p.fractions;
    let mut rhs: Vec<f64> = u.f0.values.iter().map(|v| s * v).collect();
    for (j, b) in p.bases.iter().enumerate() {
        for k in 0..b.len() {
            let w = fr.alpha[j] * b.u[k] * b.betas[k] / (m + b.betas[k]);
            if w == 0.0 {
                continue;
            }
            for (r, v) in rhs.iter_mut().zip(&u.c[j][k].values) {
                *r += w * v;
            }
        }
    }
    rhs.iter_mut().for_each(|r| *r /= fr.alpha0);
    let op = p.reduced_operator(m, n);
    let mut f0 = match guess {
        Some(g) => g.values.clone(),
        None => vec![0.0; n * n],
    };
    let report = pcg(&op, &rhs, &mut f0, cg).map_err(|e| e.at_stage("limit resolvent"))?;
    let c =
        u.c.par_iter()
            .zip(&p.bases)
            .map(|(cs, b)| {
                cs.iter()
                    .enumerate()
                    .map(|(k, uk)| {
                        let (beta, uu) = (b.betas[k], b.u[k]);
                        ScalarField {
                            n,
                            values: uk
                                .values
                                .iter()
                                .zip(&u.f0.values)
                                .zip(&f0)
                                .map(|((um, u0), f)| (um + uu * (u0 - m * f)) / (m + beta))
                                .collect(),
                        }
                    })
                    .collect()
            })
            .collect();
    Ok((
        ExtendedState {
            f0: ScalarField { n, values: f0 },
            c,
        },
        report,
    ))
}

#[derive(Debug, Clone)]
pub struct LimitEvolution {
    pub state: ExtendedState,
    /// `mass` is the extended mass, `l2` the α-norm.
    pub log: Vec<StepRecord>,
}

/// Backward Euler: `F^{n+1} = (1/τ - A)^{-1} F^n / τ`.
pub fn evolve_limit(
    f0: &ExtendedState,
    p: &LimitParameters,
    t: f64,
    tau: f64,
    cg: CgOptions,
) -> Result<LimitEvolution> {
    check_grid(f0, p)?;
    let steps = step_count(t, tau)?;
    let mut state = f0.clone();
    let mut log = vec![StepRecord {
        step: 0,
        time: 0.0,
        mass: extended_mass(&state, p),
        l2: norm_alpha(&state, p),
        cg_iterations: 0,
    }];
    for step in 1..=steps {
        let rhs = state.scaled(1.0 / tau);
        let (next, report) = resolvent_solve_from(1.0 / tau, &rhs, p, cg, Some(&state.f0))
            .map_err(|e| Error::StepFailed {
                step,
                source: Box::new(e),
            })?;
        state = next;
        log.push(StepRecord {
            step,
            time: step as f64 * tau,
            mass: extended_mass(&state, p),
            l2: norm_alpha(&state, p),
            cg_iterations: report.iterations,
        });
    }
    Ok(LimitEvolution { state, log })
}
