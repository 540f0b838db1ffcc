//! The map from the extended space to fine-grid functions.
//!
//! Outside inclusions the fine value is `f₀` interpolated at the cell
//! centre. Inside an inclusion instance the spatial fields are first
//! averaged over the instance footprint and the profile is rebuilt from the
//! reference modes: `f̄₀ + Σ_m c̄_m κ_m(ξ)`, with `ξ` the position of the fine
//! cell inside the reference raster.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dirichlet_modes::ModeBasis;
use crate::error::{Error, Result};
use crate::geometry::{FineLayout, VolumeFractions};
use crate::grid::ScalarField;
use crate::limit_system::{norm_alpha, ExtendedState, LimitParameters};

fn check_resolution(layout: &FineLayout, bases: &[ModeBasis], state: &ExtendedState) -> Result<()> {
    let used: Vec<usize> = layout.instances.iter().map(|i| i.kind).collect();
    for &kind in &used {
        let b = bases.get(kind).ok_or_else(|| {
            Error::ResolutionMismatch(format!("no mode basis for inclusion type {kind}"))
        })?;
        if b.resolution() != Some(layout.sub) {
            return Err(Error::ResolutionMismatch(format!(
                "type {kind}: mode raster {:?}, fine sub-resolution {}",
                b.resolution(),
                layout.sub
            )));
        }
        if state.c.get(kind).map(Vec::len).unwrap_or(0) > b.kappas.len() {
            return Err(Error::GridMismatch(format!(
                "type {kind}: state has more modes than sampled eigenfunctions"
            )));
        }
    }
    Ok(())
}

pub fn project_pi_epsilon(
    state: &ExtendedState,
    layout: &FineLayout,
    bases: &[ModeBasis],
) -> Result<ScalarField> {
    check_resolution(layout, bases, state)?;
    let n = layout.n;
    let coarse = &state.f0;
    let mut out = ScalarField::from_fn(n, |x, y| coarse.interpolate(x, y));
    let centre = |k: usize| {
        (
            ((k % n) as f64 + 0.5) / n as f64,
            ((k / n) as f64 + 0.5) / n as f64,
        )
    };
    let profiles: Vec<Vec<(usize, f64)>> = layout
        .instances
        .par_iter()
        .map(|inst| {
            let count = inst.cells.len() as f64;
            let mean = |field: &ScalarField| -> f64 {
                inst.cells
                    .iter()
                    .map(|&(k, _)| {
                        let (x, y) = centre(k);
                        field.interpolate(x, y)
                    })
                    .sum::<f64>()
                    / count
            };
            let f0_bar = mean(coarse);
            let c_bar: Vec<f64> = state.c[inst.kind].iter().map(mean).collect();
            let kappas = &bases[inst.kind].kappas;
            inst.cells
                .iter()
                .map(|&(k, local)| {
                    let r: f64 = c_bar
                        .iter()
                        .zip(kappas)
                        .map(|(c, kap)| c * kap[local])
                        .sum();
                    (k, f0_bar + r)
                })
                .collect()
        })
        .collect();
    for (k, v) in profiles.into_iter().flatten() {
        out.values[k] = v;
    }
    Ok(out)
}

/// Constant in `‖π_ε F‖ ≤ C ‖F‖_α`: `C² = max(1/α₀, max_j 1/α°_j)`.
pub fn projection_bound(fractions: &VolumeFractions) -> f64 {
    fractions
        .alpha_o
        .iter()
        .filter(|&&a| a > 0.0)
        .map(|a| 1.0 / a)
        .fold(1.0 / fractions.alpha0, f64::max)
        .sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormGapRow {
    pub epsilon: f64,
    pub projected_sq: f64,
    pub alpha_sq: f64,
    pub gap: f64,
}

/// `(ε, ‖π_ε F‖², ‖F‖²_α, |difference|)` for each layout, in the given order.
pub fn norm_convergence_check(
    state: &ExtendedState,
    params: &LimitParameters,
    layouts: &[FineLayout],
) -> Result<Vec<NormGapRow>> {
    let alpha_sq = norm_alpha(state, params).powi(2);
    layouts
        .iter()
        .map(|layout| {
            let p = project_pi_epsilon(state, layout, &params.bases)?;
            let projected_sq = p.l2_norm().powi(2);
            Ok(NormGapRow {
                epsilon: layout.epsilon,
                projected_sq,
                alpha_sq,
                gap: (projected_sq - alpha_sq).abs(),
            })
        })
        .collect()
}

/// Whether each gap is strictly smaller than the previous one.
pub fn strictly_decreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] < w[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dirichlet_modes::modes_mask_numeric;
    use crate::geometry::{Catalog, EnvironmentRealization, Inclusion, ReferenceDomain};

    fn setup(sub: usize) -> (EnvironmentRealization, Catalog, Vec<ModeBasis>) {
        let mut env = EnvironmentRealization::empty(8);
        env.inclusions.push(Inclusion {
            kind: 0,
            anchor: [2, 3],
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
        let b = modes_mask_numeric(&cat.domains[0], sub, 4, 1e-10).unwrap();
        (env, cat, vec![b])
    }

    #[test]
    fn constant_state_projects_to_constant() {
        let (env, cat, bases) = setup(4);
        let layout = FineLayout::new(&env, &cat, 1.0 / 16.0, 4).unwrap();
        let mut f = ExtendedState::zeros(16, &[4]);
        f.f0.values.iter_mut().for_each(|v| *v = 1.0);
        let p = project_pi_epsilon(&f, &layout, &bases).unwrap();
        assert!(p.values.iter().all(|v| (v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn mode_profile_lands_inside_inclusions_only() {
        let (env, cat, bases) = setup(4);
        let layout = FineLayout::new(&env, &cat, 1.0 / 8.0, 4).unwrap();
        let mut f = ExtendedState::zeros(8, &[4]);
        f.c[0][0].values.iter_mut().for_each(|v| *v = 2.0);
        let p = project_pi_epsilon(&f, &layout, &bases).unwrap();
        for (k, v) in p.values.iter().enumerate() {
            if layout.is_matrix(k) {
                assert_eq!(*v, 0.0);
            }
        }
        let inst = &layout.instances[0];
        for &(k, local) in &inst.cells {
            assert!((p.values[k] - 2.0 * bases[0].kappas[0][local]).abs() < 1e-12);
        }
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let (env, cat, bases) = setup(4);
        let layout = FineLayout::new(&env, &cat, 1.0 / 8.0, 8).unwrap();
        let f = ExtendedState::zeros(8, &[4]);
        assert!(matches!(
            project_pi_epsilon(&f, &layout, &bases),
            Err(Error::ResolutionMismatch(_))
        ));
    }
}
