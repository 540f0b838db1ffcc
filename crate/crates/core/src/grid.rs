//! Uniform square grids on the unit torus.
//!
//! Storage is row-major: cell `(ix, iy)` lives at `iy * n + ix`.

use serde::{Deserialize, Serialize};

/// A real-valued field sampled at the cell centres of an `n x n` periodic grid
/// covering `[0, 1)^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    pub n: usize,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            values: vec![0.0; n * n],
        }
    }

    pub fn constant(n: usize, value: f64) -> Self {
        Self {
            n,
            values: vec![value; n * n],
        }
    }

    pub fn from_fn(n: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let h = 1.0 / n as f64;
        let mut values = Vec::with_capacity(n * n);
        for iy in 0..n {
            for ix in 0..n {
                values.push(f((ix as f64 + 0.5) * h, (iy as f64 + 0.5) * h));
            }
        }
        Self { n, values }
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn cell_area(&self) -> f64 {
        let h = self.spacing();
        h * h
    }

    /// Integral of the field over the torus.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_area()
    }

    pub fn l2_norm(&self) -> f64 {
        (dot(&self.values, &self.values) * self.cell_area()).sqrt()
    }

    /// Bilinear periodic interpolation at a physical point.
    pub fn interpolate(&self, x: f64, y: f64) -> f64 {
        let n = self.n;
        let sx = x * n as f64 - 0.5;
        let sy = y * n as f64 - 0.5;
        let fx = sx.floor();
        let fy = sy.floor();
        let wx = sx - fx;
        let wy = sy - fy;
        let i0 = wrap(fx as i64, n);
        let j0 = wrap(fy as i64, n);
        let i1 = (i0 + 1) % n;
        let j1 = (j0 + 1) % n;
        let v = &self.values;
        (1.0 - wy) * ((1.0 - wx) * v[j0 * n + i0] + wx * v[j0 * n + i1])
            + wy * ((1.0 - wx) * v[j1 * n + i0] + wx * v[j1 * n + i1])
    }

    /// Samples this field at the cell centres of a periodic grid of size `m`.
    pub fn resample(&self, m: usize) -> ScalarField {
        if m == self.n {
            return self.clone();
        }
        ScalarField::from_fn(m, |x, y| self.interpolate(x, y))
    }
}

#[inline]
pub fn wrap(i: i64, n: usize) -> usize {
    i.rem_euclid(n as i64) as usize
}

/// Periodic neighbour of a row-major cell index.
#[inline]
pub fn neighbour(idx: usize, n: usize, dx: i64, dy: i64) -> usize {
    let ix = (idx % n) as i64;
    let iy = (idx / n) as i64;
    wrap(iy + dy, n) * n + wrap(ix + dx, n)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Flood-fills a boolean mask with 4-connectivity and returns the number of
/// connected components of `true` cells. `periodic` wraps both axes.
pub fn count_components(mask: &[bool], nx: usize, ny: usize, periodic: bool) -> usize {
    let mut seen = vec![false; mask.len()];
    let mut components = 0;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(c) = stack.pop() {
            let cx = (c % nx) as i64;
            let cy = (c / nx) as i64;
            for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                let (mut x, mut y) = (cx + dx, cy + dy);
                if periodic {
                    x = x.rem_euclid(nx as i64);
                    y = y.rem_euclid(ny as i64);
                } else if x < 0 || y < 0 || x >= nx as i64 || y >= ny as i64 {
                    continue;
                }
                let k = y as usize * nx + x as usize;
                if mask[k] && !seen[k] {
                    seen[k] = true;
                    stack.push(k);
                }
            }
        }
    }
    components
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_reproduces_grid_values_at_centres() {
        let f = ScalarField::from_fn(8, |x, y| (x * 6.0).sin() + y);
        for iy in 0..8 {
            for ix in 0..8 {
                let x = (ix as f64 + 0.5) / 8.0;
                let y = (iy as f64 + 0.5) / 8.0;
                assert!((f.interpolate(x, y) - f.values[iy * 8 + ix]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn component_count_respects_periodicity() {
        // Two vertical stripes touching the opposite edges.
        let n = 4;
        let mut mask = vec![false; n * n];
        for y in 0..n {
            mask[y * n] = true;
            mask[y * n + 3] = true;
        }
        assert_eq!(count_components(&mask, n, n, false), 2);
        assert_eq!(count_components(&mask, n, n, true), 1);
    }
}
