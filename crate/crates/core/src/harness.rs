//! Experiment orchestration: configuration, shared setup, and the
//! convergence, spectrum and corrector experiments.

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cell_problems::{
    assemble_theta, second_order_constant, solve_g_diagnostic, solve_h, solve_phi_diagnostic,
    CorrectorField, ThetaReport,
};
use crate::dirichlet_modes::{catalog_modes, ModeBasis, DEFAULT_MODES};
use crate::error::{Error, Result};
use crate::fine_grid::{assemble_fine_operator, evolve_fine, Evolution, StepRecord, TimeScheme};
use crate::geometry::{
    coefficients_from_layout, estimate_fractions, generate_environment, Catalog,
    EnvironmentRealization, FineLayout, VolumeFractions,
};
use crate::grid::ScalarField;
use crate::limit_system::{evolve_limit, ExtendedState, LimitEvolution, LimitParameters};
use crate::linalg::{CgOptions, EigenOptions};
use crate::projection::{
    norm_convergence_check, project_pi_epsilon, strictly_decreasing, NormGapRow,
};
use crate::spectrum::{
    compare_with_bands, eig_fine_lowest, find_band_edges, BandSet, DispersionFunction,
    FineEigenvalue,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub lattice_size: usize,
    pub p: f64,
    pub seed: u64,
    pub volume_cap: usize,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        Self {
            lattice_size: 8,
            p: 0.15,
            seed: 13,
            volume_cap: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscretizationConfig {
    /// Sub-cells per lattice cell, shared by the fine grid, the corrector
    /// grid and the mode rasters.
    pub sub_resolution: usize,
    /// Cells per side of the coarse grid of the limit system.
    pub coarse_grid: usize,
    pub modes: usize,
    pub eigen_tol: f64,
    pub cg_rel_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for DiscretizationConfig {
    fn default() -> Self {
        Self {
            sub_resolution: 16,
            coarse_grid: 128,
            modes: DEFAULT_MODES,
            eigen_tol: 1e-9,
            cg_rel_tol: 1e-10,
            cg_max_iter: 20_000,
        }
    }
}

impl DiscretizationConfig {
    pub fn cg(&self) -> CgOptions {
        CgOptions {
            rel_tol: self.cg_rel_tol,
            max_iter: self.cg_max_iter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Constant,
    GaussianF0,
    GaussianPlusMode,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Constant => "constant",
            Preset::GaussianF0 => "gaussian-f0",
            Preset::GaussianPlusMode => "gaussian-plus-mode",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub eps_list: Vec<f64>,
    pub t: f64,
    pub tau_fine: f64,
    pub tau_limit: f64,
    pub preset: Preset,
    pub scheme: TimeScheme,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            eps_list: vec![1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0],
            t: 0.05,
            tau_fine: 0.0025,
            tau_limit: 0.0025,
            preset: Preset::GaussianF0,
            scheme: TimeScheme::BackwardEuler,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumConfig {
    /// Number of fine eigenvalues for the diagnostic; zero skips it.
    pub fine_eigenvalues: usize,
    pub fine_epsilon: f64,
    pub eigen_max_iter: usize,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self {
            fine_eigenvalues: 0,
            fine_epsilon: 1.0 / 16.0,
            eigen_max_iter: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub eps_list: Vec<f64>,
    pub preset: Preset,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            eps_list: vec![1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0],
            preset: Preset::GaussianPlusMode,
        }
    }
}

/// Full experiment configuration, read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub environment: EnvironmentConfig,
    pub discretization: DiscretizationConfig,
    pub convergence: ConvergenceConfig,
    pub spectrum: SpectrumConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Short SHA-256 of the normalised configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.environment;
        if !(0.0..=1.0).contains(&e.p) {
            return Err(Error::Config(format!("p = {} outside [0, 1]", e.p)));
        }
        let d = &self.discretization;
        if d.sub_resolution < 2 || d.coarse_grid < 4 || d.modes == 0 {
            return Err(Error::Config(
                "sub_resolution >= 2, coarse_grid >= 4 and modes >= 1 required".into(),
            ));
        }
        for list in [&self.convergence.eps_list, &self.diagnostics.eps_list] {
            if list.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::Config("eps_list must be strictly decreasing".into()));
            }
        }
        Ok(())
    }
}

/// Everything derived from the environment that the experiments share.
#[derive(Debug, Clone)]
pub struct Setup {
    pub env: EnvironmentRealization,
    pub catalog: Catalog,
    pub fractions: VolumeFractions,
    pub h: CorrectorField,
    pub theta: ThetaReport,
    pub bases: Vec<ModeBasis>,
    pub params: LimitParameters,
}

pub fn prepare(cfg: &Config) -> Result<Setup> {
    let e = &cfg.environment;
    let d = &cfg.discretization;
    let (env, catalog) = generate_environment(e.lattice_size, e.p, e.seed, e.volume_cap)
        .map_err(|err| err.at_stage("environment"))?;
    let fractions = estimate_fractions(&env, &catalog);
    let h = solve_h(&env, &catalog, d.sub_resolution, d.cg())
        .map_err(|err| err.at_stage("corrector"))?;
    let theta = assemble_theta(&h);
    theta
        .require_positive_definite()
        .map_err(|err| err.at_stage("effective matrix"))?;
    let bases = catalog_modes(&catalog.domains, d.sub_resolution, d.modes, d.eigen_tol)?;
    let params = LimitParameters::new(theta.theta, fractions.clone(), bases.clone())?;
    Ok(Setup {
        env,
        catalog,
        fractions,
        h,
        theta,
        bases,
        params,
    })
}

fn gaussian(x: f64, y: f64, width: f64) -> f64 {
    let r2 = (x - 0.5).powi(2) + (y - 0.5).powi(2);
    (-r2 / (2.0 * width * width)).exp()
}

/// Builds a named initial state on the coarse grid.
pub fn initial_state(preset: Preset, n: usize, bases: &[ModeBasis]) -> ExtendedState {
    let counts: Vec<usize> = bases.iter().map(ModeBasis::len).collect();
    let mut s = ExtendedState::zeros(n, &counts);
    match preset {
        Preset::Constant => s.f0 = ScalarField::constant(n, 1.0),
        Preset::GaussianF0 => s.f0 = ScalarField::from_fn(n, |x, y| gaussian(x, y, 0.1)),
        Preset::GaussianPlusMode => {
            s.f0 = ScalarField::from_fn(n, |x, y| gaussian(x, y, 0.1));
            for (j, b) in bases.iter().enumerate() {
                if !b.is_empty() {
                    s.c[j][0] = ScalarField::from_fn(n, |x, y| {
                        0.5 * gaussian(x, y, 0.08) * (2.0 * PI * x).cos()
                    });
                }
            }
        }
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub epsilon: f64,
    pub t: f64,
    /// `‖T_ε(t) π_ε F - π_ε T(t) F‖` on the fine grid.
    pub error: f64,
    /// `|‖π_ε F‖² - ‖F‖²_α|` of the initial data.
    pub norm_gap: f64,
    pub fine_n: usize,
    pub fine_mass_drift: f64,
    pub limit_mass_drift: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    pub norm_gaps: Vec<NormGapRow>,
    pub errors_decreasing: bool,
    pub initial_rows_match_gap: bool,
}

impl ConvergenceReport {
    pub fn passed(&self) -> bool {
        self.errors_decreasing && self.initial_rows_match_gap
    }
}

/// Mass drift and monotonicity of a step log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConservationCheck {
    /// Largest `|mass_k - mass_0| / |mass_0|`.
    pub max_relative_drift: f64,
    /// Whether the norm column never increases.
    pub norm_nonincreasing: bool,
}

impl ConservationCheck {
    pub fn from_log(log: &[StepRecord]) -> Self {
        let m0 = log.first().map(|r| r.mass).unwrap_or(0.0);
        let max_relative_drift = log
            .iter()
            .map(|r| (r.mass - m0).abs() / m0.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        let norm_nonincreasing = log.windows(2).all(|w| w[1].l2 <= w[0].l2 * (1.0 + 1e-12));
        Self {
            max_relative_drift,
            norm_nonincreasing,
        }
    }

    pub fn passed(&self, drift_tol: f64) -> bool {
        self.max_relative_drift < drift_tol && self.norm_nonincreasing
    }
}

/// Limit evolution of the configured preset.
pub fn run_limit(cfg: &Config, setup: &Setup) -> Result<(ExtendedState, LimitEvolution)> {
    let c = &cfg.convergence;
    let d = &cfg.discretization;
    let initial = initial_state(c.preset, d.coarse_grid, &setup.bases);
    let limit = evolve_limit(&initial, &setup.params, c.t, c.tau_limit, d.cg())
        .map_err(|e| e.at_stage("limit evolution"))?;
    Ok((initial, limit))
}

/// Fine evolution of `π_ε` of the configured preset.
pub fn run_fine(cfg: &Config, setup: &Setup, layout: &FineLayout) -> Result<Evolution> {
    let c = &cfg.convergence;
    let d = &cfg.discretization;
    let stage = format!("fine evolution, epsilon = {}", layout.epsilon);
    let initial = initial_state(c.preset, d.coarse_grid, &setup.bases);
    let op = assemble_fine_operator(&coefficients_from_layout(layout));
    let start =
        project_pi_epsilon(&initial, layout, &setup.bases).map_err(|e| e.at_stage(&stage))?;
    evolve_fine(&op, &start, c.t, c.tau_fine, c.scheme, d.cg()).map_err(|e| e.at_stage(stage))
}

pub fn fine_layouts(cfg: &Config, setup: &Setup, eps_list: &[f64]) -> Result<Vec<FineLayout>> {
    eps_list
        .iter()
        .map(|&eps| {
            FineLayout::new(
                &setup.env,
                &setup.catalog,
                eps,
                cfg.discretization.sub_resolution,
            )
        })
        .collect::<Result<_>>()
        .map_err(|e| e.at_stage("fine layout"))
}

pub fn run_convergence_experiment(cfg: &Config, setup: &Setup) -> Result<ConvergenceReport> {
    let c = &cfg.convergence;
    let (initial, limit) = run_limit(cfg, setup)?;
    let limit_drift = ConservationCheck::from_log(&limit.log).max_relative_drift;
    let layouts = fine_layouts(cfg, setup, &c.eps_list)?;
    let norm_gaps = norm_convergence_check(&initial, &setup.params, &layouts)?;
    let mut rows = Vec::new();
    for (layout, gap) in layouts.iter().zip(&norm_gaps) {
        let fine = run_fine(cfg, setup, layout)?;
        let projected = project_pi_epsilon(&limit.state, layout, &setup.bases)?;
        let diff: Vec<f64> = fine
            .field
            .values
            .iter()
            .zip(&projected.values)
            .map(|(a, b)| a - b)
            .collect();
        let error = ScalarField {
            n: layout.n,
            values: diff,
        }
        .l2_norm();
        let fine_drift = ConservationCheck::from_log(&fine.log).max_relative_drift;
        rows.push(ConvergenceRow {
            epsilon: layout.epsilon,
            t: 0.0,
            error: 0.0,
            norm_gap: gap.gap,
            fine_n: layout.n,
            fine_mass_drift: 0.0,
            limit_mass_drift: 0.0,
        });
        rows.push(ConvergenceRow {
            epsilon: layout.epsilon,
            t: c.t,
            error,
            norm_gap: gap.gap,
            fine_n: layout.n,
            fine_mass_drift: fine_drift,
            limit_mass_drift: limit_drift,
        });
    }
    let errors: Vec<f64> = rows.iter().filter(|r| r.t > 0.0).map(|r| r.error).collect();
    let initial_rows_match_gap = rows
        .iter()
        .filter(|r| r.t == 0.0)
        .zip(&norm_gaps)
        .all(|(r, g)| r.error == 0.0 && r.norm_gap == g.gap);
    Ok(ConvergenceReport {
        errors_decreasing: c.t == 0.0 || strictly_decreasing(&errors),
        rows,
        norm_gaps,
        initial_rows_match_gap,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub bands: BandSet,
    pub dispersion: DispersionFunction,
    pub fine: Vec<FineEigenvalue>,
    pub fine_epsilon: Option<f64>,
    /// Whether the fine eigensolver met its tolerance.
    pub fine_converged: bool,
    pub sorted_and_disjoint: bool,
    pub max_edge_residual: f64,
}

impl SpectrumReport {
    pub fn passed(&self) -> bool {
        self.sorted_and_disjoint && self.max_edge_residual < 1e-8
    }
}

pub fn bands_sorted_and_disjoint(b: &BandSet) -> bool {
    let first_ok = b.bands.first().map(|i| i.start == 0.0).unwrap_or(false);
    first_ok
        && b.bands.iter().all(|i| i.start <= i.end)
        && b.bands.windows(2).all(|w| w[0].end < w[1].start)
}

pub fn run_spectrum_experiment(cfg: &Config, setup: &Setup) -> Result<SpectrumReport> {
    let dispersion = DispersionFunction::new(&setup.fractions, &setup.bases);
    let bands = find_band_edges(&dispersion)?;
    let s = &cfg.spectrum;
    let mut fine = Vec::new();
    let mut fine_converged = true;
    let mut fine_epsilon = None;
    if s.fine_eigenvalues > 0 {
        let layout = FineLayout::new(
            &setup.env,
            &setup.catalog,
            s.fine_epsilon,
            cfg.discretization.sub_resolution,
        )?;
        let op = assemble_fine_operator(&coefficients_from_layout(&layout));
        let opts = EigenOptions {
            tol: 1e-6,
            max_iter: s.eigen_max_iter,
            guard: s.fine_eigenvalues,
            shift: 1.0,
            ..EigenOptions::default()
        };
        let values = match eig_fine_lowest(&op, s.fine_eigenvalues, opts) {
            Ok(v) => v,
            Err(Error::EigenNotConverged {
                values, residuals, ..
            }) => {
                fine_converged = false;
                values.into_iter().zip(residuals).collect()
            }
            Err(e) => return Err(e.at_stage("fine eigenvalues")),
        };
        fine = compare_with_bands(&values, &bands);
        fine_epsilon = Some(s.fine_epsilon);
    }
    let max_edge_residual = bands
        .edge_residuals
        .iter()
        .fold(0.0_f64, |a, r| a.max(r.abs()));
    Ok(SpectrumReport {
        sorted_and_disjoint: bands_sorted_and_disjoint(&bands),
        max_edge_residual,
        bands,
        dispersion,
        fine,
        fine_epsilon,
        fine_converged,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub epsilon: f64,
    /// `‖ε h(·/ε)‖_{L²}` over the unit box.
    pub eps_h_l2: f64,
    /// `‖∇_ξ h(·/ε)‖_{L²}` over the unit box.
    pub grad_h_l2: f64,
    pub g_h1: f64,
    pub phi_h1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub rows: Vec<DiagnosticRow>,
    /// Constant of the second-order problem and its analytic value `Θ/α₀`.
    pub g_constant: [[f64; 2]; 2],
    pub theta_over_alpha0: [[f64; 2]; 2],
    pub h_decreasing: bool,
    pub grad_h_bounded: bool,
    pub g_decreasing: bool,
    pub phi_decreasing: bool,
}

impl DiagnosticsReport {
    pub fn passed(&self) -> bool {
        self.h_decreasing && self.grad_h_bounded && self.g_decreasing && self.phi_decreasing
    }
}

pub fn run_corrector_diagnostics(cfg: &Config, setup: &Setup) -> Result<DiagnosticsReport> {
    let d = &cfg.discretization;
    let dg = &cfg.diagnostics;
    let state = initial_state(dg.preset, d.coarse_grid, &setup.bases);
    let constant = second_order_constant(&setup.h);
    let a0 = setup.theta.matrix_fraction;
    let t = setup.theta.theta;
    let theta_over_alpha0 = [[t[0][0] / a0, t[0][1] / a0], [t[1][0] / a0, t[1][1] / a0]];
    let mean_sq = setup.h.mean_square();
    let grad_sq = setup.h.gradient_mean_square();
    let rows: Vec<Result<DiagnosticRow>> = dg
        .eps_list
        .par_iter()
        .map(|&eps| {
            let layout = FineLayout::new(&setup.env, &setup.catalog, eps, d.sub_resolution)?;
            let (_, g) = solve_g_diagnostic(&layout, &setup.h, constant, d.cg())?;
            let (_, phi) =
                solve_phi_diagnostic(&layout, &state, &setup.bases, &setup.fractions, 1.0, d.cg())?;
            Ok(DiagnosticRow {
                epsilon: eps,
                eps_h_l2: eps * mean_sq.sqrt(),
                grad_h_l2: grad_sq.sqrt(),
                g_h1: g.h1_norm,
                phi_h1: phi.h1_norm,
            })
        })
        .collect();
    let rows: Vec<DiagnosticRow> = rows
        .into_iter()
        .collect::<Result<_>>()
        .map_err(|e| e.at_stage("corrector diagnostics"))?;
    let col = |f: fn(&DiagnosticRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let grads = col(|r| r.grad_h_l2);
    let gmax = grads.iter().cloned().fold(0.0, f64::max);
    let gmin = grads.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(DiagnosticsReport {
        h_decreasing: strictly_decreasing(&col(|r| r.eps_h_l2)),
        grad_h_bounded: rows.is_empty() || gmax <= 1.1 * gmin,
        g_decreasing: strictly_decreasing(&col(|r| r.g_h1)),
        phi_decreasing: strictly_decreasing(&col(|r| r.phi_h1)),
        rows,
        g_constant: constant,
        theta_over_alpha0,
    })
}
