//! On-disk formats: CSV tables tagged with the config hash, raw `f64` blocks
//! with JSON headers, and the environment manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dirichlet_modes::ModeBasis;
use crate::error::{Error, Result};
use crate::fine_grid::StepRecord;
use crate::geometry::{
    Catalog, EnvironmentRealization, Inclusion, ReferenceDomain, VolumeFractions,
};
use crate::grid::ScalarField;
use crate::harness::{ConvergenceRow, DiagnosticRow};
use crate::limit_system::ExtendedState;
use crate::projection::NormGapRow;
use crate::spectrum::{BandSet, FineEigenvalue};

/// A record that can be written as one CSV row.
pub trait CsvRow {
    const HEADER: &'static [&'static str];
    fn fields(&self) -> Vec<String>;
}

/// Writes `rows` with a leading `config_hash` column.
pub fn write_csv<R: CsvRow>(path: &Path, hash: &str, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["config_hash"];
    header.extend_from_slice(R::HEADER);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![hash.to_string()];
        rec.extend(r.fields());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn num(x: f64) -> String {
    format!("{x:?}")
}

impl CsvRow for ConvergenceRow {
    const HEADER: &'static [&'static str] = &[
        "epsilon",
        "t",
        "error",
        "norm_gap",
        "fine_n",
        "fine_mass_drift",
        "limit_mass_drift",
    ];
    fn fields(&self) -> Vec<String> {
        vec![
            num(self.epsilon),
            num(self.t),
            num(self.error),
            num(self.norm_gap),
            self.fine_n.to_string(),
            num(self.fine_mass_drift),
            num(self.limit_mass_drift),
        ]
    }
}

impl CsvRow for NormGapRow {
    const HEADER: &'static [&'static str] = &["epsilon", "projected_sq", "alpha_sq", "gap"];
    fn fields(&self) -> Vec<String> {
        vec![
            num(self.epsilon),
            num(self.projected_sq),
            num(self.alpha_sq),
            num(self.gap),
        ]
    }
}

impl CsvRow for DiagnosticRow {
    const HEADER: &'static [&'static str] = &["epsilon", "eps_h_l2", "grad_h_l2", "g_h1", "phi_h1"];
    fn fields(&self) -> Vec<String> {
        vec![
            num(self.epsilon),
            num(self.eps_h_l2),
            num(self.grad_h_l2),
            num(self.g_h1),
            num(self.phi_h1),
        ]
    }
}

impl CsvRow for StepRecord {
    const HEADER: &'static [&'static str] = &["step", "time", "mass", "l2", "cg_iterations"];
    fn fields(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            num(self.time),
            num(self.mass),
            num(self.l2),
            self.cg_iterations.to_string(),
        ]
    }
}

impl CsvRow for FineEigenvalue {
    const HEADER: &'static [&'static str] = &["index", "value", "residual", "distance"];
    fn fields(&self) -> Vec<String> {
        vec![
            self.index.to_string(),
            num(self.value),
            num(self.residual),
            num(self.distance),
        ]
    }
}

/// One mode of one reference domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub domain: usize,
    pub mode: usize,
    pub beta: f64,
    pub u: f64,
    pub zero_mean: bool,
    pub residual: f64,
}

impl CsvRow for ModeRow {
    const HEADER: &'static [&'static str] =
        &["domain", "mode", "beta", "u", "zero_mean", "residual"];
    fn fields(&self) -> Vec<String> {
        vec![
            self.domain.to_string(),
            self.mode.to_string(),
            num(self.beta),
            num(self.u),
            self.zero_mean.to_string(),
            num(self.residual),
        ]
    }
}

pub fn mode_rows(bases: &[ModeBasis]) -> Vec<ModeRow> {
    bases
        .iter()
        .flat_map(|b| {
            (0..b.len()).map(move |m| ModeRow {
                domain: b.domain_id,
                mode: m,
                beta: b.betas[m],
                u: b.u[m],
                zero_mean: b.is_zero_mean(m),
                residual: b.residuals.get(m).copied().unwrap_or(0.0),
            })
        })
        .collect()
}

/// One line of the band-structure table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub band_start: f64,
    pub band_end: f64,
    /// `band`, `gap`, `point` or `cap`.
    pub kind: String,
    pub provenance: String,
}

impl CsvRow for BandRow {
    const HEADER: &'static [&'static str] = &["band_start", "band_end", "type", "provenance"];
    fn fields(&self) -> Vec<String> {
        vec![
            num(self.band_start),
            num(self.band_end),
            self.kind.clone(),
            self.provenance.clone(),
        ]
    }
}

/// Flattens a band set into table rows: bands, gaps, point spectrum, then
/// the truncation cap.
pub fn band_rows(b: &BandSet) -> Vec<BandRow> {
    let mut rows = Vec::new();
    for (k, band) in b.bands.iter().enumerate() {
        let provenance = if band.end.is_infinite() {
            "no-poles"
        } else if k == 0 {
            "origin-to-first-pole"
        } else {
            "dispersion-root-to-pole"
        };
        rows.push(BandRow {
            band_start: band.start,
            band_end: band.end,
            kind: "band".into(),
            provenance: provenance.into(),
        });
    }
    for gap in &b.gaps {
        rows.push(BandRow {
            band_start: gap.start,
            band_end: gap.end,
            kind: "gap".into(),
            provenance: "pole-to-dispersion-root".into(),
        });
    }
    for p in &b.point_spectrum {
        let types: Vec<String> = p.types.iter().map(|t| t.to_string()).collect();
        let multiplicity = if p.infinite_multiplicity {
            "infinite"
        } else {
            "finite"
        };
        rows.push(BandRow {
            band_start: p.value,
            band_end: p.value,
            kind: "point".into(),
            provenance: format!(
                "zero-mean-mode multiplicity={multiplicity} types={}",
                types.join("+")
            ),
        });
    }
    rows.push(BandRow {
        band_start: b.truncation_cap,
        band_end: b.truncation_cap,
        kind: "cap".into(),
        provenance: "largest-retained-pole".into(),
    });
    rows
}

/// Header, config hash of the first row, and records, all without the hash column.
pub type CsvTable = (Vec<String>, Option<String>, Vec<Vec<String>>);

/// Reads a CSV written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("config_hash") {
        return Err(Error::Config(format!(
            "{}: missing config_hash column",
            path.display()
        )));
    }
    let mut hash = None;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        hash.get_or_insert_with(|| rec[0].to_string());
        rows.push(rec.iter().skip(1).map(str::to_string).collect());
    }
    Ok((header[1..].to_vec(), hash, rows))
}

/// Header of a raw little-endian `f64` block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawHeader<M> {
    pub dtype: String,
    pub layout: String,
    pub len: usize,
    pub meta: M,
}

fn sibling(base: &Path, ext: &str) -> PathBuf {
    let mut p = base.as_os_str().to_owned();
    p.push(ext);
    PathBuf::from(p)
}

/// Writes `<base>.bin` (row-major, 64-bit little-endian floats) and
/// `<base>.json`.
pub fn write_raw_block<M: Serialize>(base: &Path, meta: &M, data: &[f64]) -> Result<()> {
    let header = RawHeader {
        dtype: "f64-le".into(),
        layout: "row-major".into(),
        len: data.len(),
        meta,
    };
    fs::write(
        sibling(base, ".json"),
        serde_json::to_string_pretty(&header)?,
    )?;
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(sibling(base, ".bin"), bytes)?;
    Ok(())
}

pub fn read_raw_block<M: for<'de> Deserialize<'de>>(base: &Path) -> Result<(M, Vec<f64>)> {
    let header: RawHeader<M> = serde_json::from_str(&fs::read_to_string(sibling(base, ".json"))?)?;
    let bytes = fs::read(sibling(base, ".bin"))?;
    if header.dtype != "f64-le" || bytes.len() != 8 * header.len {
        return Err(Error::GridMismatch(format!(
            "{}: expected {} little-endian f64 values, found {} bytes",
            base.display(),
            header.len,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((header.meta, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldMeta {
    pub n: usize,
}

pub fn write_field(base: &Path, field: &ScalarField) -> Result<()> {
    write_raw_block(base, &FieldMeta { n: field.n }, &field.values)
}

pub fn read_field(base: &Path) -> Result<ScalarField> {
    let (meta, values): (FieldMeta, _) = read_raw_block(base)?;
    if values.len() != meta.n * meta.n {
        return Err(Error::GridMismatch(format!(
            "{}: {} values for n = {}",
            base.display(),
            values.len(),
            meta.n
        )));
    }
    Ok(ScalarField { n: meta.n, values })
}

/// One `c^j_m` block of a serialised extended state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeBlock {
    pub j: usize,
    pub m: usize,
    pub beta: f64,
    pub u: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMeta {
    pub n: usize,
    /// Blocks after the leading `f₀` block, in storage order.
    pub blocks: Vec<ModeBlock>,
}

/// Stores `f₀` followed by every `c^j_m`, each `n²` values.
pub fn write_state(base: &Path, state: &ExtendedState, bases: &[ModeBasis]) -> Result<()> {
    let mut blocks = Vec::new();
    let mut data = state.f0.values.clone();
    for (j, cs) in state.c.iter().enumerate() {
        for (m, c) in cs.iter().enumerate() {
            blocks.push(ModeBlock {
                j,
                m,
                beta: bases[j].betas[m],
                u: bases[j].u[m],
            });
            data.extend_from_slice(&c.values);
        }
    }
    write_raw_block(
        base,
        &StateMeta {
            n: state.n(),
            blocks,
        },
        &data,
    )
}

pub fn read_state(base: &Path) -> Result<(ExtendedState, StateMeta)> {
    let (meta, data): (StateMeta, Vec<f64>) = read_raw_block(base)?;
    let nn = meta.n * meta.n;
    if data.len() != nn * (1 + meta.blocks.len()) {
        return Err(Error::GridMismatch(format!(
            "{}: block count does not match data",
            base.display()
        )));
    }
    let field = |k: usize| ScalarField {
        n: meta.n,
        values: data[k * nn..(k + 1) * nn].to_vec(),
    };
    let types = meta.blocks.iter().map(|b| b.j + 1).max().unwrap_or(0);
    let mut c: Vec<Vec<ScalarField>> = vec![Vec::new(); types];
    for (k, b) in meta.blocks.iter().enumerate() {
        if b.m != c[b.j].len() {
            return Err(Error::GridMismatch(format!(
                "{}: modes out of order",
                base.display()
            )));
        }
        c[b.j].push(field(k + 1));
    }
    Ok((ExtendedState { f0: field(0), c }, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaMeta {
    pub domain_id: usize,
    pub count: usize,
    pub resolution: usize,
    pub nx: usize,
    pub ny: usize,
}

/// Writes `<base>.modes.json` with eigenvalues and means, plus the sampled
/// eigenvectors as a raw block at `<base>`.
pub fn write_mode_basis(base: &Path, basis: &ModeBasis) -> Result<()> {
    fs::write(
        sibling(base, ".modes.json"),
        serde_json::to_string_pretty(basis)?,
    )?;
    if let Some(r) = &basis.raster {
        let meta = KappaMeta {
            domain_id: basis.domain_id,
            count: basis.kappas.len(),
            resolution: r.n,
            nx: r.nx,
            ny: r.ny,
        };
        let data: Vec<f64> = basis.kappas.iter().flatten().copied().collect();
        write_raw_block(base, &meta, &data)?;
    }
    Ok(())
}

/// Reads a basis written by [`write_mode_basis`]. The raster is rebuilt
/// from `domain`.
pub fn read_mode_basis(base: &Path, domain: &ReferenceDomain) -> Result<ModeBasis> {
    let mut basis: ModeBasis =
        serde_json::from_str(&fs::read_to_string(sibling(base, ".modes.json"))?)?;
    if sibling(base, ".json").exists() {
        let (meta, data): (KappaMeta, Vec<f64>) = read_raw_block(base)?;
        let raster = domain.raster(meta.resolution);
        let len = raster.nx * raster.ny;
        if meta.nx != raster.nx || meta.ny != raster.ny || data.len() != len * meta.count {
            return Err(Error::ResolutionMismatch(format!(
                "{}: eigenvector block does not match domain {}",
                base.display(),
                domain.id
            )));
        }
        basis.kappas = data.chunks_exact(len).map(<[f64]>::to_vec).collect();
        basis.raster = Some(raster);
    }
    Ok(basis)
}

/// Run lengths of one mask row, alternating empty and filled and starting
/// with a (possibly zero) empty run.
pub fn rle_encode(row: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0;
    for &c in row {
        if c == current {
            len += 1;
        } else {
            runs.push(len);
            current = c;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn rle_decode(runs: &[usize]) -> Vec<bool> {
    runs.iter()
        .enumerate()
        .flat_map(|(k, &len)| std::iter::repeat_n(k % 2 == 1, len))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    pub cell_count: usize,
    pub rows: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentManifest {
    pub seed: u64,
    pub p: f64,
    pub lattice_size: usize,
    pub volume_cap: usize,
    pub catalog: Vec<DomainEntry>,
    pub inclusions: Vec<Inclusion>,
    pub fractions: VolumeFractions,
    /// Base name of the bit-packed occupancy block, if written.
    pub occupancy: Option<String>,
}

impl EnvironmentManifest {
    pub fn new(
        env: &EnvironmentRealization,
        catalog: &Catalog,
        fractions: &VolumeFractions,
    ) -> Self {
        let catalog_entries = catalog
            .domains
            .iter()
            .map(|d| DomainEntry {
                id: d.id,
                width: d.width,
                height: d.height,
                cell_count: d.cell_count(),
                rows: d.cells.chunks(d.width).map(rle_encode).collect(),
            })
            .collect();
        Self {
            seed: env.seed,
            p: env.p,
            lattice_size: env.lattice_size,
            volume_cap: catalog.volume_cap,
            catalog: catalog_entries,
            inclusions: env.inclusions.clone(),
            fractions: fractions.clone(),
            occupancy: None,
        }
    }

    pub fn catalog(&self) -> Result<Catalog> {
        let domains = self
            .catalog
            .iter()
            .map(|e| {
                let cells: Vec<bool> = e.rows.iter().flat_map(|r| rle_decode(r)).collect();
                if cells.len() != e.width * e.height {
                    return Err(Error::Config(format!(
                        "domain {}: rows do not fill the box",
                        e.id
                    )));
                }
                Ok(ReferenceDomain {
                    id: e.id,
                    width: e.width,
                    height: e.height,
                    cells,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Catalog {
            domains,
            volume_cap: self.volume_cap,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitmapHeader {
    pub width: usize,
    pub height: usize,
    pub layout: String,
    pub bit_order: String,
}

/// Packs a row-major mask eight cells per byte, least significant bit first.
pub fn pack_bits(mask: &[bool]) -> Vec<u8> {
    mask.chunks(8)
        .map(|c| {
            c.iter()
                .enumerate()
                .fold(0u8, |b, (k, &v)| b | ((v as u8) << k))
        })
        .collect()
}

pub fn unpack_bits(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|k| bytes[k / 8] >> (k % 8) & 1 == 1).collect()
}

/// Writes `<dir>/environment.json` and the occupancy bitmap
/// `<dir>/occupancy.{bin,json}`.
pub fn write_environment(
    dir: &Path,
    env: &EnvironmentRealization,
    catalog: &Catalog,
    fractions: &VolumeFractions,
) -> Result<()> {
    let mut manifest = EnvironmentManifest::new(env, catalog, fractions);
    manifest.occupancy = Some("occupancy".into());
    let header = BitmapHeader {
        width: env.lattice_size,
        height: env.lattice_size,
        layout: "row-major".into(),
        bit_order: "lsb-first".into(),
    };
    fs::write(
        dir.join("occupancy.json"),
        serde_json::to_string_pretty(&header)?,
    )?;
    fs::write(dir.join("occupancy.bin"), pack_bits(&env.occupancy))?;
    fs::write(
        dir.join("environment.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn read_environment(
    dir: &Path,
) -> Result<(EnvironmentRealization, Catalog, EnvironmentManifest)> {
    let manifest: EnvironmentManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("environment.json"))?)?;
    let catalog = manifest.catalog()?;
    let l = manifest.lattice_size;
    let occupancy = match &manifest.occupancy {
        Some(name) => {
            let header: BitmapHeader =
                serde_json::from_str(&fs::read_to_string(dir.join(format!("{name}.json")))?)?;
            let bytes = fs::read(dir.join(format!("{name}.bin")))?;
            if header.width != l || header.height != l || bytes.len() * 8 < l * l {
                return Err(Error::GridMismatch(
                    "occupancy bitmap does not match lattice".into(),
                ));
            }
            unpack_bits(&bytes, l * l)
        }
        None => {
            let mut occ = EnvironmentRealization::empty(l);
            occ.inclusions = manifest.inclusions.clone();
            occ.footprint(&catalog)
                .iter()
                .map(Option::is_some)
                .collect()
        }
    };
    let env = EnvironmentRealization {
        lattice_size: l,
        occupancy,
        inclusions: manifest.inclusions.clone(),
        seed: manifest.seed,
        p: manifest.p,
    };
    Ok((env, catalog, manifest))
}
