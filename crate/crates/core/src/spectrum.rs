//! Dispersion function, band/gap structure and point spectrum of the limit
//! generator, plus a diagnostic comparison with the fine operator.

use serde::{Deserialize, Serialize};

use crate::dirichlet_modes::{ModeBasis, ZERO_MEAN_THRESHOLD};
use crate::error::{Error, Result};
use crate::fine_grid::FineOperator;
use crate::geometry::VolumeFractions;
use crate::linalg::{lowest_eigenpairs, EigenOptions};

/// Relative tolerance for treating two Dirichlet eigenvalues as equal.
pub const POLE_MERGE_TOLERANCE: f64 = 1e-7;

/// One distinct Dirichlet eigenvalue across all inclusion types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pole {
    pub beta: f64,
    /// `(1/α₀) Σ α_j Σ u²` over the merged modes.
    pub weight: f64,
    /// Number of merged modes (across types).
    pub modes: usize,
    /// Number of types whose merged modes carry a nonzero mean.
    pub coupled: usize,
    /// Inclusion types contributing to this eigenvalue.
    pub types: Vec<usize>,
}

impl Pole {
    /// Whether the eigenvalue admits mean-free eigenfunctions.
    pub fn has_point_spectrum(&self) -> bool {
        self.modes > self.coupled.min(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionFunction {
    pub alpha0: f64,
    /// Constant added to `W`, accounting for the mean mass beyond the
    /// truncated modes.
    pub tail: f64,
    /// Every distinct eigenvalue, sorted.
    pub poles: Vec<Pole>,
}

impl DispersionFunction {
    /// `W(λ) = 1 + tail + (1/α₀) Σ_j α_j Σ_m u² β / (β - λ)` with the tail
    /// `(1/α₀) Σ_j α_j (|D_j| - Σ_m u²)`, so that `W(0) = 1/α₀` exactly and
    /// `α₀ W(-m)` is the resolvent weight of the truncated limit system.
    pub fn new(fractions: &VolumeFractions, bases: &[ModeBasis]) -> Self {
        let mut w = Self::truncated(fractions, bases);
        w.tail = bases
            .iter()
            .zip(&fractions.alpha)
            .map(|(b, a)| a * (b.area - b.bessel_sum()))
            .sum::<f64>()
            / fractions.alpha0;
        w
    }

    /// The plain truncated sum without the tail constant.
    pub fn truncated(fractions: &VolumeFractions, bases: &[ModeBasis]) -> Self {
        let mut tagged: Vec<(f64, f64, usize, bool, usize)> = Vec::new();
        for (j, b) in bases.iter().enumerate() {
            let mut m = 0;
            while m < b.len() {
                let mut end = m + 1;
                while end < b.len()
                    && (b.betas[end] - b.betas[m]).abs() <= POLE_MERGE_TOLERANCE * b.betas[m]
                {
                    end += 1;
                }
                let u2: f64 = b.u[m..end].iter().map(|u| u * u).sum();
                let coupled = u2.sqrt() >= ZERO_MEAN_THRESHOLD * b.area.sqrt();
                let weight = if coupled {
                    fractions.alpha[j] * u2 / fractions.alpha0
                } else {
                    0.0
                };
                tagged.push((b.betas[m], weight, end - m, coupled, j));
                m = end;
            }
        }
        // Equal eigenvalues of different types share one pole.
        tagged.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.4.cmp(&b.4)));
        let mut poles: Vec<Pole> = Vec::new();
        for (beta, weight, modes, coupled, j) in tagged {
            match poles.last_mut() {
                Some(p) if (beta - p.beta).abs() <= POLE_MERGE_TOLERANCE * p.beta => {
                    p.weight += weight;
                    p.modes += modes;
                    p.coupled += coupled as usize;
                    if !p.types.contains(&j) {
                        p.types.push(j);
                    }
                }
                _ => poles.push(Pole {
                    beta,
                    weight,
                    modes,
                    coupled: coupled as usize,
                    types: vec![j],
                }),
            }
        }
        Self {
            alpha0: fractions.alpha0,
            tail: 0.0,
            poles,
        }
    }

    /// Poles with a nonzero weight, in increasing order.
    pub fn retained(&self) -> Vec<&Pole> {
        self.poles.iter().filter(|p| p.weight > 0.0).collect()
    }

    fn eval_unchecked(&self, lambda: f64) -> f64 {
        1.0 + self.tail
            + self
                .poles
                .iter()
                .filter(|p| p.weight > 0.0)
                .map(|p| p.weight * p.beta / (p.beta - lambda))
                .sum::<f64>()
    }

    pub fn eval(&self, lambda: f64) -> Result<f64> {
        for p in self.retained() {
            let distance = (lambda - p.beta).abs();
            if distance < 1e-12 * p.beta {
                return Err(Error::PoleProximity {
                    lambda,
                    pole: p.beta,
                    distance,
                });
            }
        }
        Ok(self.eval_unchecked(lambda))
    }

    /// `W'(λ) = (1/α₀) Σ u² β / (β - λ)²`.
    pub fn derivative(&self, lambda: f64) -> f64 {
        self.retained()
            .iter()
            .map(|p| p.weight * p.beta / (p.beta - lambda).powi(2))
            .sum()
    }

    /// Root of `W` strictly between two consecutive retained poles, by
    /// bisection to floating-point resolution.
    pub fn root_between(&self, lo: f64, hi: f64) -> Result<f64> {
        let mut a = lo + (hi - lo) * 1e-15 + f64::EPSILON * lo;
        let mut b = hi - (hi - lo) * 1e-15 - f64::EPSILON * hi;
        while self.eval_unchecked(a) > 0.0 && a > lo {
            a = lo + 0.5 * (a - lo);
            if a <= lo {
                return Err(Error::BracketFailure { lo, hi });
            }
        }
        while self.eval_unchecked(b) < 0.0 && b < hi {
            b = hi - 0.5 * (hi - b);
            if b >= hi {
                return Err(Error::BracketFailure { lo, hi });
            }
        }
        if !(self.eval_unchecked(a) <= 0.0 && self.eval_unchecked(b) >= 0.0) {
            return Err(Error::BracketFailure { lo, hi });
        }
        loop {
            let mid = 0.5 * (a + b);
            if mid <= a || mid >= b {
                break;
            }
            if self.eval_unchecked(mid) < 0.0 {
                a = mid;
            } else {
                b = mid;
            }
        }
        Ok(
            if self.eval_unchecked(a).abs() < self.eval_unchecked(b).abs() {
                a
            } else {
                b
            },
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalKind {
    Band,
    Gap,
    Point,
}

impl IntervalKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            IntervalKind::Band => "band",
            IntervalKind::Gap => "gap",
            IntervalKind::Point => "point",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointEigenvalue {
    pub value: f64,
    /// Always true: mean-free Dirichlet modes have infinite multiplicity.
    pub infinite_multiplicity: bool,
    pub types: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSet {
    pub bands: Vec<Interval>,
    pub gaps: Vec<Interval>,
    pub point_spectrum: Vec<PointEigenvalue>,
    /// Largest retained pole; the spectrum above it is not resolved by the
    /// truncated basis. Infinite when nothing is truncated.
    pub truncation_cap: f64,
    /// `W` at each interior band edge.
    pub edge_residuals: Vec<f64>,
}

impl BandSet {
    /// Distance from `lambda` to the union of bands and point spectrum.
    pub fn distance(&self, lambda: f64) -> f64 {
        let mut d = f64::INFINITY;
        for b in &self.bands {
            if lambda >= b.start && lambda <= b.end {
                return 0.0;
            }
            d = d.min((lambda - b.start).abs()).min((lambda - b.end).abs());
        }
        for p in &self.point_spectrum {
            d = d.min((lambda - p.value).abs());
        }
        d
    }
}

pub fn find_band_edges(w: &DispersionFunction) -> Result<BandSet> {
    let retained = w.retained();
    let point_spectrum = w
        .poles
        .iter()
        .filter(|p| p.has_point_spectrum())
        .map(|p| PointEigenvalue {
            value: p.beta,
            infinite_multiplicity: true,
            types: p.types.clone(),
        })
        .collect();
    if retained.is_empty() {
        return Ok(BandSet {
            bands: vec![Interval {
                start: 0.0,
                end: f64::INFINITY,
            }],
            gaps: vec![],
            point_spectrum,
            truncation_cap: f64::INFINITY,
            edge_residuals: vec![],
        });
    }
    let mut bands = vec![Interval {
        start: 0.0,
        end: retained[0].beta,
    }];
    let mut gaps = Vec::new();
    let mut edge_residuals = Vec::new();
    let roots: Vec<Result<f64>> = retained
        .windows(2)
        .map(|pair| w.root_between(pair[0].beta, pair[1].beta))
        .collect();
    for (pair, root) in retained.windows(2).zip(roots) {
        let root = root?;
        edge_residuals.push(w.eval_unchecked(root));
        gaps.push(Interval {
            start: pair[0].beta,
            end: root,
        });
        bands.push(Interval {
            start: root,
            end: pair[1].beta,
        });
    }
    Ok(BandSet {
        bands,
        gaps,
        point_spectrum,
        truncation_cap: retained[retained.len() - 1].beta,
        edge_residuals,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FineEigenvalue {
    pub index: usize,
    pub value: f64,
    pub residual: f64,
    pub distance: f64,
}

/// Smallest `k` eigenvalues of `-L` by shifted inverse subspace iteration.
pub fn eig_fine_lowest(op: &FineOperator, k: usize, opts: EigenOptions) -> Result<Vec<(f64, f64)>> {
    if k > 50 {
        return Err(Error::InvalidParameter(format!("k = {k} > 50")));
    }
    let pairs = lowest_eigenpairs(op, k, opts)?;
    Ok(pairs.values.into_iter().zip(pairs.residuals).collect())
}

/// Pairs each fine eigenvalue with its distance to the limit spectrum.
pub fn compare_with_bands(values: &[(f64, f64)], bands: &BandSet) -> Vec<FineEigenvalue> {
    values
        .iter()
        .enumerate()
        .map(|(index, &(value, residual))| FineEigenvalue {
            index,
            value,
            residual,
            distance: bands.distance(value),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dirichlet_modes::modes_rectangle_analytic;
    use std::f64::consts::PI;

    fn square(alpha0: f64, count: usize) -> (VolumeFractions, Vec<ModeBasis>) {
        let f = VolumeFractions {
            alpha0,
            alpha_o: vec![1.0 - alpha0],
            alpha: vec![1.0 - alpha0],
        };
        (f, vec![modes_rectangle_analytic(1.0, 1.0, count)])
    }

    #[test]
    fn single_pole_gives_single_band() {
        let (f, b) = square(0.9, 1);
        let w = DispersionFunction::new(&f, &b);
        let bands = find_band_edges(&w).unwrap();
        assert_eq!(bands.bands.len(), 1);
        assert_eq!(bands.bands[0].start, 0.0);
        assert!((bands.bands[0].end - 2.0 * PI * PI).abs() < 1e-12);
        assert!(bands.gaps.is_empty());
    }

    #[test]
    fn negative_arguments_exceed_one() {
        let (f, b) = square(0.9, 20);
        let w = DispersionFunction::truncated(&f, &b);
        for m in [0.1, 1.0, 10.0, 1e4] {
            assert!(w.eval(-m).unwrap() > 1.0);
        }
    }

    #[test]
    fn increasing_between_poles() {
        let (f, b) = square(0.9, 20);
        let w = DispersionFunction::new(&f, &b);
        let r = w.retained();
        for pair in r.windows(2) {
            let (lo, hi) = (pair[0].beta, pair[1].beta);
            let mut prev = f64::NEG_INFINITY;
            for i in 1..200 {
                let x = lo + (hi - lo) * i as f64 / 200.0;
                let v = w.eval(x).unwrap();
                assert!(v > prev);
                let h = 1e-6 * (hi - lo);
                let fd = (w.eval(x + h).unwrap() - w.eval(x - h).unwrap()) / (2.0 * h);
                assert!((fd - w.derivative(x)).abs() < 1e-4 * w.derivative(x));
                prev = v;
            }
        }
    }

    #[test]
    fn square_has_point_spectrum_at_five_pi_squared() {
        let (f, b) = square(0.9, 10);
        let w = DispersionFunction::new(&f, &b);
        let bands = find_band_edges(&w).unwrap();
        assert!(bands
            .point_spectrum
            .iter()
            .any(|p| (p.value - 5.0 * PI * PI).abs() < 1e-9 && p.infinite_multiplicity));
        assert!((bands.bands[0].end - 2.0 * PI * PI).abs() < 1e-12);
        let second = &bands.bands[1];
        assert!(second.start > 2.0 * PI * PI && second.start < 10.0 * PI * PI);
    }

    #[test]
    fn pole_proximity_rejected() {
        let (f, b) = square(0.9, 3);
        let w = DispersionFunction::new(&f, &b);
        assert!(matches!(
            w.eval(2.0 * PI * PI),
            Err(Error::PoleProximity { .. })
        ));
    }

    #[test]
    fn empty_catalog_single_half_line() {
        let f = VolumeFractions {
            alpha0: 1.0,
            alpha_o: vec![],
            alpha: vec![],
        };
        let bands = find_band_edges(&DispersionFunction::new(&f, &[])).unwrap();
        assert_eq!(bands.bands.len(), 1);
        assert!(bands.bands[0].end.is_infinite());
    }
}
