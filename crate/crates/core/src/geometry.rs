//! Percolation environments, the reference-shape catalog, volume fractions
//! and the rasterised high-contrast coefficient.
//!
//! Occupied lattice cells are closed unit squares, so two occupied cells that
//! share only a corner belong to the same cluster: clusters are extracted
//! with 8-connectivity on the periodic `L x L` lattice. A cluster becomes an
//! inclusion when it is small (at most `M` cells after hole filling), does
//! not wrap around the torus, has a 4-connected (Lipschitz) interior, and
//! does not touch any other retained inclusion by an edge or a corner.

use std::collections::BTreeMap;

use petgraph::unionfind::UnionFind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{count_components, wrap};

/// One inclusion shape on the unit lattice, anchored at the lower-left
/// corner of its bounding box.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceDomain {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    /// Lattice cells, row-major over the bounding box.
    pub cells: Vec<bool>,
}

impl ReferenceDomain {
    pub fn cell_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// `|D|` in lattice-cell units.
    pub fn area(&self) -> f64 {
        self.cell_count() as f64
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height && self.cells[y * self.width + x]
    }

    /// Refines every lattice cell into `n x n` sub-cells.
    pub fn raster(&self, n: usize) -> DomainRaster {
        let nx = self.width * n;
        let ny = self.height * n;
        let mut mask = vec![false; nx * ny];
        for y in 0..ny {
            for x in 0..nx {
                mask[y * nx + x] = self.contains(x / n, y / n);
            }
        }
        DomainRaster { n, nx, ny, mask }
    }
}

/// A reference domain refined to `n` sub-cells per lattice cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainRaster {
    pub n: usize,
    pub nx: usize,
    pub ny: usize,
    pub mask: Vec<bool>,
}

impl DomainRaster {
    pub fn area(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / (self.n * self.n) as f64
    }

    pub fn is_connected(&self) -> bool {
        count_components(&self.mask, self.nx, self.ny, false) == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub domains: Vec<ReferenceDomain>,
    pub volume_cap: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inclusion {
    /// Index into the catalog.
    pub kind: usize,
    /// Lattice coordinates of the bounding-box corner, in `[0, L)`.
    pub anchor: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentRealization {
    pub lattice_size: usize,
    /// Occupied cells after hull filling, row-major.
    pub occupancy: Vec<bool>,
    pub inclusions: Vec<Inclusion>,
    pub seed: u64,
    pub p: f64,
}

impl EnvironmentRealization {
    /// Environment without inclusions.
    pub fn empty(lattice_size: usize) -> Self {
        Self {
            lattice_size,
            occupancy: vec![false; lattice_size * lattice_size],
            inclusions: vec![],
            seed: 0,
            p: 0.0,
        }
    }

    /// Lattice cells covered by inclusions, labelled with the inclusion index.
    pub fn footprint(&self, catalog: &Catalog) -> Vec<Option<usize>> {
        let l = self.lattice_size;
        let mut label = vec![None; l * l];
        for (i, inc) in self.inclusions.iter().enumerate() {
            let d = &catalog.domains[inc.kind];
            for y in 0..d.height {
                for x in 0..d.width {
                    if d.contains(x, y) {
                        let gx = (inc.anchor[0] + x) % l;
                        let gy = (inc.anchor[1] + y) % l;
                        label[gy * l + gx] = Some(i);
                    }
                }
            }
        }
        label
    }

    /// Number of 4-connected components of the matrix on the torus.
    pub fn matrix_components(&self, catalog: &Catalog) -> usize {
        let l = self.lattice_size;
        let matrix: Vec<bool> = self
            .footprint(catalog)
            .iter()
            .map(Option::is_none)
            .collect();
        count_components(&matrix, l, l, true)
    }
}

/// Row-major Bernoulli(p) site draw on an `l × l` torus.
pub fn bernoulli_sites(l: usize, p: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..l * l).map(|_| rng.random::<f64>() < p).collect()
}

/// Fraction of lattice sites that are occupied and have no occupied
/// neighbour among their eight torus neighbours.
pub fn isolated_site_fraction(sites: &[bool], l: usize) -> f64 {
    let isolated = (0..l * l)
        .filter(|&idx| {
            let (x, y) = ((idx % l) as i64, (idx / l) as i64);
            sites[idx]
                && (-1..=1).all(|dy| {
                    (-1..=1).all(|dx| {
                        (dx == 0 && dy == 0) || !sites[wrap(y + dy, l) * l + wrap(x + dx, l)]
                    })
                })
        })
        .count();
    isolated as f64 / (l * l) as f64
}

/// Draws a Bernoulli site-percolation environment and extracts inclusions.
pub fn generate_environment(
    lattice_size: usize,
    p: f64,
    seed: u64,
    volume_cap: usize,
) -> Result<(EnvironmentRealization, Catalog)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("p = {p} outside [0, 1]")));
    }
    if lattice_size < 4 {
        return Err(Error::InvalidParameter(format!(
            "lattice size {lattice_size} < 4"
        )));
    }
    if volume_cap < 1 {
        return Err(Error::InvalidParameter("volume cap must be >= 1".into()));
    }
    let l = lattice_size;
    let mut occupancy = bernoulli_sites(l, p, seed);

    let mut uf = UnionFind::<usize>::new(l * l);
    for idx in 0..l * l {
        if !occupancy[idx] {
            continue;
        }
        let (x, y) = ((idx % l) as i64, (idx / l) as i64);
        for (dx, dy) in [(1, 0), (0, 1), (1, 1), (1, -1)] {
            let j = wrap(y + dy, l) * l + wrap(x + dx, l);
            if occupancy[j] {
                uf.union(idx, j);
            }
        }
    }
    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for idx in (0..l * l).filter(|&i| occupancy[i]) {
        clusters.entry(uf.find(idx)).or_default().push(idx);
    }

    let mut candidates: Vec<Candidate> = clusters
        .values()
        .filter(|cells| cells.len() <= volume_cap)
        .filter_map(|cells| candidate_from_cluster(cells, l))
        .filter(|c| c.hull_count() <= volume_cap)
        .collect();

    // A hull may swallow another candidate sitting inside its hole.
    let mut owner: Vec<Option<usize>> = vec![None; l * l];
    let mut swallowed = vec![false; candidates.len()];
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(candidates[i].hull_count()));
    for &i in &order {
        let cells = candidates[i].torus_cells(l);
        if cells.iter().any(|&c| owner[c].is_some()) {
            swallowed[i] = true;
            continue;
        }
        for c in cells {
            owner[c] = Some(i);
        }
    }

    // Edge- or corner-contact between distinct retained hulls discards both.
    let mut touching = vec![false; candidates.len()];
    for idx in 0..l * l {
        let Some(a) = owner[idx] else { continue };
        let (x, y) = ((idx % l) as i64, (idx / l) as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let j = wrap(y + dy, l) * l + wrap(x + dx, l);
                if let Some(b) = owner[j] {
                    if b != a {
                        touching[a] = true;
                        touching[b] = true;
                    }
                }
            }
        }
    }
    let retained: Vec<usize> = (0..candidates.len())
        .filter(|&i| !swallowed[i] && !touching[i])
        .collect();

    // Catalogue distinct shapes up to translation, ordered canonically.
    let mut shapes: BTreeMap<(usize, usize, usize, Vec<bool>), Vec<usize>> = BTreeMap::new();
    for &i in &retained {
        let c = &candidates[i];
        shapes
            .entry((c.hull_count(), c.height, c.width, c.hull.clone()))
            .or_default()
            .push(i);
    }
    let mut domains = Vec::new();
    let mut kind_of = vec![usize::MAX; candidates.len()];
    for (id, ((_, height, width, cells), members)) in shapes.into_iter().enumerate() {
        for m in members {
            kind_of[m] = id;
        }
        domains.push(ReferenceDomain {
            id,
            width,
            height,
            cells,
        });
    }
    let mut inclusions: Vec<Inclusion> = retained
        .iter()
        .map(|&i| Inclusion {
            kind: kind_of[i],
            anchor: candidates[i].anchor,
        })
        .collect();
    inclusions.sort_by_key(|inc| (inc.anchor[1], inc.anchor[0]));

    for &i in &retained {
        for c in candidates[i].torus_cells(l) {
            occupancy[c] = true;
        }
    }
    candidates.clear();

    let env = EnvironmentRealization {
        lattice_size: l,
        occupancy,
        inclusions,
        seed,
        p,
    };
    let catalog = Catalog {
        domains,
        volume_cap,
    };
    let components = env.matrix_components(&catalog);
    if components != 1 {
        return Err(Error::DisconnectedMatrix { components });
    }
    Ok((env, catalog))
}

struct Candidate {
    anchor: [usize; 2],
    width: usize,
    height: usize,
    hull: Vec<bool>,
}

impl Candidate {
    fn hull_count(&self) -> usize {
        self.hull.iter().filter(|&&c| c).count()
    }

    fn torus_cells(&self, l: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.hull[y * self.width + x] {
                    out.push(((self.anchor[1] + y) % l) * l + (self.anchor[0] + x) % l);
                }
            }
        }
        out
    }
}

/// Unwraps a cluster into the plane, rejects wrapping or pinched clusters,
/// and fills holes.
fn candidate_from_cluster(cells: &[usize], l: usize) -> Option<Candidate> {
    let mut pos: BTreeMap<usize, (i64, i64)> = BTreeMap::new();
    let start = cells[0];
    pos.insert(start, (0, 0));
    let members: std::collections::BTreeSet<usize> = cells.iter().copied().collect();
    let mut stack = vec![start];
    while let Some(c) = stack.pop() {
        let (px, py) = pos[&c];
        let (x, y) = ((c % l) as i64, (c / l) as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let j = wrap(y + dy, l) * l + wrap(x + dx, l);
                if !members.contains(&j) {
                    continue;
                }
                let q = (px + dx, py + dy);
                match pos.get(&j) {
                    Some(&existing) if existing != q => return None,
                    Some(_) => {}
                    None => {
                        pos.insert(j, q);
                        stack.push(j);
                    }
                }
            }
        }
    }
    let min_x = pos.values().map(|p| p.0).min()?;
    let min_y = pos.values().map(|p| p.1).min()?;
    let width = (pos.values().map(|p| p.0).max()? - min_x + 1) as usize;
    let height = (pos.values().map(|p| p.1).max()? - min_y + 1) as usize;
    let mut mask = vec![false; width * height];
    for p in pos.values() {
        mask[(p.1 - min_y) as usize * width + (p.0 - min_x) as usize] = true;
    }
    if count_components(&mask, width, height, false) != 1 {
        return None;
    }
    let hull = fill_holes(&mask, width, height);
    let (sx, sy) = ((start % l) as i64, (start / l) as i64);
    Some(Candidate {
        anchor: [wrap(sx + min_x, l), wrap(sy + min_y, l)],
        width,
        height,
        hull,
    })
}

/// Marks every background cell not 4-reachable from outside the box.
fn fill_holes(mask: &[bool], width: usize, height: usize) -> Vec<bool> {
    let (pw, ph) = (width + 2, height + 2);
    let mut outside = vec![false; pw * ph];
    let solid = |x: usize, y: usize| -> bool {
        x >= 1 && y >= 1 && x <= width && y <= height && mask[(y - 1) * width + (x - 1)]
    };
    let mut stack = vec![0usize];
    outside[0] = true;
    while let Some(c) = stack.pop() {
        let (x, y) = (c % pw, c / pw);
        let mut push = |nx: usize, ny: usize| {
            let k = ny * pw + nx;
            if !outside[k] && !solid(nx, ny) {
                outside[k] = true;
                stack.push(k);
            }
        };
        if x > 0 {
            push(x - 1, y);
        }
        if x + 1 < pw {
            push(x + 1, y);
        }
        if y > 0 {
            push(x, y - 1);
        }
        if y + 1 < ph {
            push(x, y + 1);
        }
    }
    let mut hull = vec![false; width * height];
    for y in 0..height {
        for x in 0..width {
            hull[y * width + x] = !outside[(y + 1) * pw + (x + 1)];
        }
    }
    hull
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeFractions {
    pub alpha0: f64,
    /// Probability that a point lies in an inclusion of type `j`.
    pub alpha_o: Vec<f64>,
    /// `alpha_o[j] / |D_j|`.
    pub alpha: Vec<f64>,
}

impl VolumeFractions {
    /// `alpha0 + sum_j alpha[j] |D_j|`, which is one by construction.
    pub fn total(&self, catalog: &Catalog) -> f64 {
        self.alpha0
            + self
                .alpha
                .iter()
                .zip(&catalog.domains)
                .map(|(a, d)| a * d.area())
                .sum::<f64>()
    }
}

/// Empirical volume fractions of one realization.
pub fn estimate_fractions(env: &EnvironmentRealization, catalog: &Catalog) -> VolumeFractions {
    let cells = (env.lattice_size * env.lattice_size) as f64;
    let mut covered = vec![0.0; catalog.domains.len()];
    for inc in &env.inclusions {
        covered[inc.kind] += catalog.domains[inc.kind].area();
    }
    let alpha_o: Vec<f64> = covered.iter().map(|c| c / cells).collect();
    let alpha = alpha_o
        .iter()
        .zip(&catalog.domains)
        .map(|(a, d)| a / d.area())
        .collect();
    // Subtracting the covered count keeps alpha0 + sum alpha_o exact.
    let alpha0 = (cells - covered.iter().sum::<f64>()) / cells;
    VolumeFractions {
        alpha0,
        alpha_o,
        alpha,
    }
}

/// Which region a fine cell belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellLabel {
    Matrix,
    /// Fine cell inside inclusion instance `instance`, at raster index
    /// `local` of the reference domain.
    Inclusion {
        instance: usize,
        local: usize,
    },
}

/// One scaled copy of an inclusion on the fine grid.
#[derive(Debug, Clone)]
pub struct InstanceFootprint {
    pub kind: usize,
    /// Physical position of the reference-domain corner.
    pub anchor: [f64; 2],
    /// `(fine cell index, reference raster index)` pairs.
    pub cells: Vec<(usize, usize)>,
}

/// The fine-grid geometry at scale `epsilon`: the torus `[0,1)^2` holds
/// `periods^2` copies of the `L`-periodic environment, each lattice cell
/// has side `epsilon` and is split into `n x n` fine cells.
#[derive(Debug, Clone)]
pub struct FineLayout {
    pub epsilon: f64,
    pub sub: usize,
    pub periods: usize,
    pub n: usize,
    pub labels: Vec<CellLabel>,
    pub instances: Vec<InstanceFootprint>,
}

impl FineLayout {
    pub fn new(
        env: &EnvironmentRealization,
        catalog: &Catalog,
        epsilon: f64,
        sub: usize,
    ) -> Result<Self> {
        if sub < 2 {
            return Err(Error::ResolutionMismatch(format!(
                "sub-resolution n = {sub} < 2"
            )));
        }
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::InvalidParameter(format!("epsilon = {epsilon}")));
        }
        let l = env.lattice_size;
        let periods_f = 1.0 / (epsilon * l as f64);
        let periods = periods_f.round() as usize;
        if periods == 0 || (periods_f - periods as f64).abs() > 1e-9 * periods_f {
            return Err(Error::ResolutionMismatch(format!(
                "1/(epsilon*L) = {periods_f} is not a positive integer"
            )));
        }
        let n = sub * l * periods;
        let mut labels = vec![CellLabel::Matrix; n * n];
        let mut instances = Vec::new();
        for py in 0..periods {
            for px in 0..periods {
                for inc in &env.inclusions {
                    let d = &catalog.domains[inc.kind];
                    let rx = d.width * sub;
                    let instance = instances.len();
                    let mut cells = Vec::with_capacity(d.cell_count() * sub * sub);
                    for ly in 0..d.height * sub {
                        for lx in 0..rx {
                            if !d.contains(lx / sub, ly / sub) {
                                continue;
                            }
                            let gx = ((px * l + inc.anchor[0]) * sub + lx) % n;
                            let gy = ((py * l + inc.anchor[1]) * sub + ly) % n;
                            let fine = gy * n + gx;
                            let local = ly * rx + lx;
                            labels[fine] = CellLabel::Inclusion { instance, local };
                            cells.push((fine, local));
                        }
                    }
                    instances.push(InstanceFootprint {
                        kind: inc.kind,
                        anchor: [
                            ((px * l + inc.anchor[0]) as f64) * epsilon,
                            ((py * l + inc.anchor[1]) as f64) * epsilon,
                        ],
                        cells,
                    });
                }
            }
        }
        Ok(Self {
            epsilon,
            sub,
            periods,
            n,
            labels,
            instances,
        })
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn is_matrix(&self, idx: usize) -> bool {
        matches!(self.labels[idx], CellLabel::Matrix)
    }
}

/// The high-contrast coefficient `a_eps` on the fine grid.
#[derive(Debug, Clone)]
pub struct CoefficientField {
    pub n: usize,
    pub epsilon: f64,
    pub values: Vec<f64>,
}

pub fn rasterize_coefficients(
    env: &EnvironmentRealization,
    catalog: &Catalog,
    epsilon: f64,
    sub: usize,
) -> Result<CoefficientField> {
    let layout = FineLayout::new(env, catalog, epsilon, sub)?;
    Ok(coefficients_from_layout(&layout))
}

pub fn coefficients_from_layout(layout: &FineLayout) -> CoefficientField {
    let e2 = layout.epsilon * layout.epsilon;
    CoefficientField {
        n: layout.n,
        epsilon: layout.epsilon,
        values: layout
            .labels
            .iter()
            .map(|l| match l {
                CellLabel::Matrix => 1.0,
                CellLabel::Inclusion { .. } => e2,
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn monomino_env(l: usize, at: [usize; 2]) -> (EnvironmentRealization, Catalog) {
        let mut env = EnvironmentRealization::empty(l);
        env.inclusions.push(Inclusion {
            kind: 0,
            anchor: at,
        });
        env.occupancy[at[1] * l + at[0]] = true;
        let catalog = Catalog {
            domains: vec![ReferenceDomain {
                id: 0,
                width: 1,
                height: 1,
                cells: vec![true],
            }],
            volume_cap: 1,
        };
        (env, catalog)
    }

    #[test]
    fn empty_probability_gives_empty_environment() {
        let (env, cat) = generate_environment(64, 0.0, 7, 3).unwrap();
        assert!(env.inclusions.is_empty());
        assert!(cat.domains.is_empty());
        assert!(env.occupancy.iter().all(|&o| !o));
    }

    #[test]
    fn full_occupancy_discards_everything() {
        let (env, cat) = generate_environment(64, 1.0, 7, 3).unwrap();
        assert!(env.inclusions.is_empty());
        assert!(cat.domains.is_empty());
    }

    #[test]
    fn rejects_bad_probability() {
        assert!(generate_environment(16, 1.5, 1, 2).is_err());
        assert!(generate_environment(16, -0.1, 1, 2).is_err());
        assert!(generate_environment(16, f64::NAN, 1, 2).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_environment(48, 0.2, 11, 4).unwrap();
        let b = generate_environment(48, 0.2, 11, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fractions_for_one_monomino() {
        let (env, cat) = monomino_env(8, [3, 5]);
        let f = estimate_fractions(&env, &cat);
        assert_eq!(f.alpha_o, vec![1.0 / 64.0]);
        assert_eq!(f.alpha0, 63.0 / 64.0);
        assert_eq!(f.alpha, vec![1.0 / 64.0]);
    }

    #[test]
    fn empty_fractions() {
        let env = EnvironmentRealization::empty(8);
        let cat = Catalog {
            domains: vec![],
            volume_cap: 3,
        };
        let f = estimate_fractions(&env, &cat);
        assert_eq!(f.alpha0, 1.0);
        assert!(f.alpha_o.is_empty());
    }

    #[test]
    fn monomino_rasterizes_to_sixteen_cells() {
        let (env, cat) = monomino_env(8, [2, 6]);
        let coeff = rasterize_coefficients(&env, &cat, 1.0 / 8.0, 4).unwrap();
        let e2 = 1.0 / 64.0;
        assert_eq!(coeff.values.iter().filter(|&&v| v == e2).count(), 16);
        assert!(coeff.values.iter().all(|&v| v == 1.0 || v == e2));
    }

    #[test]
    fn empty_environment_rasterizes_to_ones() {
        let env = EnvironmentRealization::empty(8);
        let cat = Catalog {
            domains: vec![],
            volume_cap: 1,
        };
        let coeff = rasterize_coefficients(&env, &cat, 1.0 / 16.0, 4).unwrap();
        assert_eq!(coeff.n, 64);
        assert!(coeff.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rasterize_rejects_mismatched_resolution() {
        let env = EnvironmentRealization::empty(8);
        let cat = Catalog {
            domains: vec![],
            volume_cap: 1,
        };
        assert!(rasterize_coefficients(&env, &cat, 1.0 / 12.0, 4).is_err());
        assert!(rasterize_coefficients(&env, &cat, 1.0 / 8.0, 1).is_err());
    }

    #[test]
    fn hole_filling_closes_ring() {
        let mask = vec![
            true, true, true, //
            true, false, true, //
            true, true, true,
        ];
        let hull = fill_holes(&mask, 3, 3);
        assert!(hull.iter().all(|&h| h));
    }

    #[test]
    fn corner_contact_is_one_cluster() {
        // A diagonal pair is one 8-cluster but not 4-connected: discarded.
        let cells = vec![0, 17];
        assert!(candidate_from_cluster(&cells, 16).is_none());
    }

    #[test]
    fn retained_inclusions_are_separated_and_matrix_connected() {
        for seed in 0..10 {
            let (env, cat) = generate_environment(40, 0.25, seed, 5).unwrap();
            let fp = env.footprint(&cat);
            let l = env.lattice_size;
            for idx in 0..l * l {
                let Some(a) = fp[idx] else { continue };
                assert!(env.occupancy[idx]);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let j = wrap((idx / l) as i64 + dy, l) * l + wrap((idx % l) as i64 + dx, l);
                        if let Some(b) = fp[j] {
                            assert_eq!(a, b, "inclusions touch");
                        }
                    }
                }
            }
            assert_eq!(env.matrix_components(&cat), 1);
            for d in &cat.domains {
                assert!(d.cell_count() <= 5);
                assert!(d.raster(2).is_connected());
            }
        }
    }
}
