//! Conservative finite-volume discretisation of `div(a_ε ∇f)` on the fine
//! periodic grid and implicit time stepping of the resulting semigroup.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CoefficientField;
use crate::grid::{dot, ScalarField};
use crate::linalg::{pcg, CgOptions, LinearOperator, Shifted};

/// Harmonic mean of two cell coefficients.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// The fine generator `L`. As a [`LinearOperator`] it acts as `-L`, which is
/// symmetric positive semidefinite with the constants as kernel.
#[derive(Debug, Clone)]
pub struct FineOperator {
    pub n: usize,
    /// Transmissibility of the face between cell `k` and its `+x` neighbour.
    pub tx: Vec<f64>,
    /// Transmissibility of the face between cell `k` and its `+y` neighbour.
    pub ty: Vec<f64>,
}

pub fn assemble_fine_operator(coeff: &CoefficientField) -> FineOperator {
    let n = coeff.n;
    let inv_h2 = (n * n) as f64;
    let a = &coeff.values;
    let mut tx = vec![0.0; n * n];
    let mut ty = vec![0.0; n * n];
    for iy in 0..n {
        for ix in 0..n {
            let k = iy * n + ix;
            tx[k] = harmonic_mean(a[k], a[iy * n + (ix + 1) % n]) * inv_h2;
            ty[k] = harmonic_mean(a[k], a[((iy + 1) % n) * n + ix]) * inv_h2;
        }
    }
    FineOperator { n, tx, ty }
}

impl FineOperator {
    /// `y = L x`.
    pub fn apply_generator(&self, x: &[f64], y: &mut [f64]) {
        self.apply(x, y);
        y.iter_mut().for_each(|v| *v = -*v);
    }

    /// `<L u, v>` in the grid inner product (cell weight `1/n²`).
    pub fn form(&self, u: &[f64], v: &[f64]) -> f64 {
        let mut lu = vec![0.0; u.len()];
        self.apply_generator(u, &mut lu);
        dot(&lu, v) / (self.n * self.n) as f64
    }
}

impl LinearOperator for FineOperator {
    fn dim(&self) -> usize {
        self.n * self.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n = self.n;
        y.par_chunks_mut(n).enumerate().for_each(|(iy, row)| {
            let up = ((iy + 1) % n) * n;
            let down = ((iy + n - 1) % n) * n;
            let here = iy * n;
            for ix in 0..n {
                let k = here + ix;
                let right = here + (ix + 1) % n;
                let left = here + (ix + n - 1) % n;
                let xk = x[k];
                row[ix] = self.tx[k] * (xk - x[right])
                    + self.tx[left] * (xk - x[left])
                    + self.ty[k] * (xk - x[up + ix])
                    + self.ty[down + ix] * (xk - x[down + ix]);
            }
        });
    }

    fn diagonal(&self) -> Vec<f64> {
        let n = self.n;
        (0..n * n)
            .map(|k| {
                let (ix, iy) = (k % n, k / n);
                self.tx[k]
                    + self.tx[iy * n + (ix + n - 1) % n]
                    + self.ty[k]
                    + self.ty[((iy + n - 1) % n) * n + ix]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TimeScheme {
    #[default]
    BackwardEuler,
    CrankNicolson,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub mass: f64,
    pub l2: f64,
    pub cg_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct Evolution {
    pub field: ScalarField,
    pub log: Vec<StepRecord>,
}

/// Number of steps `t / tau`, which must be an integer.
pub fn step_count(t: f64, tau: f64) -> Result<usize> {
    if tau.is_nan() || tau <= 0.0 || t.is_nan() || t < 0.0 {
        return Err(Error::InvalidParameter(format!("t = {t}, tau = {tau}")));
    }
    let k = (t / tau).round();
    if (k * tau - t).abs() > 1e-9 * t.max(tau) {
        return Err(Error::InvalidParameter(format!(
            "t = {t} is not a multiple of tau = {tau}"
        )));
    }
    Ok(k as usize)
}

/// Evolves `f0` to time `t` with step `tau`. The log has one record per
/// step plus the initial state.
pub fn evolve_fine(
    op: &FineOperator,
    f0: &ScalarField,
    t: f64,
    tau: f64,
    scheme: TimeScheme,
    cg: CgOptions,
) -> Result<Evolution> {
    if f0.n != op.n {
        return Err(Error::GridMismatch(format!(
            "field is {}², operator is {}²",
            f0.n, op.n
        )));
    }
    let steps = step_count(t, tau)?;
    let theta = match scheme {
        TimeScheme::BackwardEuler => 1.0,
        TimeScheme::CrankNicolson => 0.5,
    };
    let implicit = Shifted {
        base: op,
        shift: 1.0,
        scale: theta * tau,
    };
    let mut f = f0.values.clone();
    let mut rhs = vec![0.0; f.len()];
    let mut log = vec![StepRecord {
        step: 0,
        time: 0.0,
        mass: f0.mass(),
        l2: f0.l2_norm(),
        cg_iterations: 0,
    }];
    for step in 1..=steps {
        if theta < 1.0 {
            op.apply(&f, &mut rhs);
            for (r, x) in rhs.iter_mut().zip(&f) {
                *r = x - (1.0 - theta) * tau * *r;
            }
        } else {
            rhs.copy_from_slice(&f);
        }
        let report = pcg(&implicit, &rhs, &mut f, cg).map_err(|e| Error::StepFailed {
            step,
            source: Box::new(e),
        })?;
        let field = ScalarField {
            n: op.n,
            values: f.clone(),
        };
        log.push(StepRecord {
            step,
            time: step as f64 * tau,
            mass: field.mass(),
            l2: field.l2_norm(),
            cg_iterations: report.iterations,
        });
    }
    Ok(Evolution {
        field: ScalarField { n: op.n, values: f },
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(n: usize) -> FineOperator {
        assemble_fine_operator(&CoefficientField {
            n,
            epsilon: 1.0,
            values: vec![1.0; n * n],
        })
    }

    #[test]
    fn harmonic_face_value() {
        let e2 = 1.0 / 64.0;
        let coeff = CoefficientField {
            n: 4,
            epsilon: 0.125,
            values: (0..16).map(|k| if k == 5 { e2 } else { 1.0 }).collect(),
        };
        let op = assemble_fine_operator(&coeff);
        let expect = 2.0 * e2 / (1.0 + e2) * 16.0;
        assert!((op.tx[4] - expect).abs() < 1e-14);
        assert!((op.ty[1] - expect).abs() < 1e-14);
        assert_eq!(op.tx[0], 16.0);
    }

    #[test]
    fn constants_in_kernel() {
        let op = uniform(8);
        let mut y = vec![1.0; 64];
        op.apply(&[3.0; 64], &mut y);
        assert!(y.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn two_cell_backward_euler() {
        // N = 2 along x (rows are identical): each cell sees its neighbour
        // through two faces, so -L = 2 n² [[1,-1],[-1,1]] on the pair.
        let op = uniform(2);
        let f0 = ScalarField {
            n: 2,
            values: vec![1.0, 0.0, 1.0, 0.0],
        };
        let tau = 0.01;
        let out = evolve_fine(
            &op,
            &f0,
            tau,
            tau,
            TimeScheme::BackwardEuler,
            CgOptions::default(),
        )
        .unwrap();
        let k = 2.0 * 4.0 * tau;
        // (1 + k) a - k b = 1, -k a + (1 + k) b = 0
        let det = (1.0 + k) * (1.0 + k) - k * k;
        let a = (1.0 + k) / det;
        let b = k / det;
        assert!((out.field.values[0] - a).abs() < 1e-12);
        assert!((out.field.values[1] - b).abs() < 1e-12);
    }

    #[test]
    fn rejects_fractional_step_count() {
        assert!(step_count(0.05, 0.003).is_err());
        assert_eq!(step_count(0.05, 0.0025).unwrap(), 20);
        assert_eq!(step_count(0.0, 0.0025).unwrap(), 0);
    }
}
