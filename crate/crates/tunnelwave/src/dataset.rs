//! Simulation parameter grids, coarse/fine pair production, normalization,
//! training windows, augmentation and the `RSSV1` volume container.
//!
//! `RSSV1` layout (all integers little-endian):
//!
//! ```text
//! magic "RSSVOL01" | u32 version | u32 nx | u32 ny | u32 nz
//! f64 delta | f64 delta_z | f64 min_db | f64 max_db
//! u32 json_len | json metadata (config + section + origins)
//! nx * ny * nz f32 values, slice-major, row-major (x, then y) within a slice
//! ```

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::geometry::{self, CrossSection, SectionKind};
use crate::pwe::{self, Material, PweConfig, RssVolume, TxPosition};
use crate::tensor::rng::Rng;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"RSSVOL01";
const VERSION: u32 = 1;

/// Normalization statistics shared by the members of a coarse/fine pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min_db: f64,
    pub max_db: f64,
}

impl NormStats {
    /// Map a dB value to [0, 1] (clamped).
    pub fn normalize(&self, db: f64) -> f64 {
        ((db - self.min_db) / (self.max_db - self.min_db)).clamp(0.0, 1.0)
    }

    /// Exact inverse of [`NormStats::normalize`] on in-range values.
    pub fn denormalize(&self, v01: f64) -> f64 {
        self.min_db + v01 * (self.max_db - self.min_db)
    }
}

/// One fully-specified simulation: a section plus the marching parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub section: CrossSection,
    pub frequency: f64,
    pub material: Material,
    pub tx: TxPosition,
    pub length: f64,
}

impl SimConfig {
    pub fn pwe_config(&self, mesh_factor: f64) -> Result<PweConfig> {
        PweConfig::new(
            self.frequency,
            self.length,
            self.material,
            self.tx,
            mesh_factor,
        )
    }

    /// True when the transmitter lies in the section interior.
    pub fn tx_inside(&self) -> bool {
        self.section.contains(self.tx.x, self.tx.y)
    }
}

/// Axes of the simulation campaign; configurations are the cartesian product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrid {
    pub shapes: Vec<SectionKind>,
    /// Hz.
    pub frequencies: Vec<f64>,
    pub eps_r: Vec<f64>,
    /// S/m.
    pub sigma: Vec<f64>,
    /// Transmitter x offsets from the centerline, m.
    pub tx_x: Vec<f64>,
    /// Transmitter heights, m.
    pub tx_y: Vec<f64>,
}

impl ParamGrid {
    /// The full campaign grid: 4 shapes x 6 frequencies x 3 permittivities
    /// x 3 conductivities x 11 TX offsets x 5 TX heights = 11,880 configs.
    pub fn table() -> Self {
        ParamGrid {
            shapes: vec![
                SectionKind::Rectangular,
                SectionKind::Arched,
                SectionKind::ArchedVerticalWalls,
                SectionKind::Trapezoidal,
            ],
            frequencies: (0..6).map(|i| 0.9e9 + i as f64 * 1.0e9).collect(),
            eps_r: (0..3).map(|i| 5.0 + 2.5 * i as f64).collect(),
            sigma: vec![0.001, 0.01, 0.1],
            tx_x: (0..11).map(|i| 0.2 * i as f64).collect(),
            tx_y: (0..5).map(|i| 0.5 + 0.5 * i as f64).collect(),
        }
    }

    /// Same axes but the four comparison frequencies used for figures.
    pub fn figures() -> Self {
        ParamGrid {
            frequencies: vec![0.9e9, 2.4e9, 4.9e9, 5.8e9],
            ..Self::table()
        }
    }

    /// Massif Central preset: arched section, 0.9/2.1 GHz, eps_r 5,
    /// sigma 0.01 S/m, TX on a 0.5 m lattice.
    pub fn massif() -> Self {
        ParamGrid {
            shapes: vec![SectionKind::Arched],
            frequencies: vec![0.9e9, 2.1e9],
            eps_r: vec![5.0],
            sigma: vec![0.01],
            tx_x: (0..5).map(|i| 0.5 * i as f64).collect(),
            tx_y: (0..6).map(|i| 0.5 + 0.5 * i as f64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
            * self.frequencies.len()
            * self.eps_r.len()
            * self.sigma.len()
            * self.tx_x.len()
            * self.tx_y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Transmitter-placement regimes: disjoint train/test regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    All,
}

const SPLIT_EPS: f64 = 1e-9;

impl Split {
    /// Membership test on the transmitter position.
    pub fn admits(&self, tx_x: f64, tx_y: f64) -> bool {
        let within = |v: f64, lo: f64, hi: f64| v >= lo - SPLIT_EPS && v <= hi + SPLIT_EPS;
        match self {
            Split::Train => within(tx_x, 0.0, 1.0) && within(tx_y, 0.5, 1.0),
            Split::Test => within(tx_x, 1.2, 2.0) && within(tx_y, 2.0, 2.5),
            Split::All => true,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
            Split::All => write!(f, "all"),
        }
    }
}

/// Cartesian product of the grid axes, filtered to `split`, in lexicographic
/// order (shape, frequency, eps_r, sigma, tx_x, tx_y).
pub fn enumerate_configs(grid: &ParamGrid, split: Split, length: f64) -> Result<Vec<SimConfig>> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("parameter grid has an empty axis".into()));
    }
    let mut out = Vec::new();
    for &shape in &grid.shapes {
        let section = CrossSection::default_for(shape);
        for &frequency in &grid.frequencies {
            for &eps_r in &grid.eps_r {
                for &sigma in &grid.sigma {
                    for &tx_x in &grid.tx_x {
                        for &tx_y in &grid.tx_y {
                            if !split.admits(tx_x, tx_y) {
                                continue;
                            }
                            out.push(SimConfig {
                                section,
                                frequency,
                                material: Material { eps_r, sigma },
                                tx: TxPosition { x: tx_x, y: tx_y },
                                length,
                            });
                        }
                    }
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no configuration passes the {split} transmitter filter"
        )));
    }
    Ok(out)
}

/// Run one coarse (3.2λ) and one fine (0.4λ) march on aligned grids.
pub fn generate_pair(config: &SimConfig) -> Result<(RssVolume, RssVolume)> {
    let guard = geometry::default_guard_band(config.frequency);
    let coarse_grid = geometry::grid_from_wavelength(
        config.frequency,
        geometry::COARSE_MESH_FACTOR,
        &config.section,
        guard,
    )?;
    let fine_grid = geometry::grid_from_wavelength(
        config.frequency,
        geometry::FINE_MESH_FACTOR,
        &config.section,
        guard,
    )?;
    debug_assert_eq!(fine_grid.nx, geometry::MESH_RATIO * coarse_grid.nx);
    debug_assert_eq!(fine_grid.ny, geometry::MESH_RATIO * coarse_grid.ny);
    let coarse = pwe::march(
        &config.pwe_config(geometry::COARSE_MESH_FACTOR)?,
        &coarse_grid,
        &config.section,
    )?;
    let fine = pwe::march(
        &config.pwe_config(geometry::FINE_MESH_FACTOR)?,
        &fine_grid,
        &config.section,
    )?;
    debug_assert_eq!(coarse.nz(), fine.nz());
    Ok((coarse, fine))
}

/// Map a raw dB volume to [0, 1]. When `stats` is `None` the min/max over
/// the volume's interior cells is used.
pub fn normalize(volume: &RssVolume, stats: Option<NormStats>) -> Result<(RssVolume, NormStats)> {
    let stats = match stats {
        Some(s) => s,
        None => interior_stats(volume)?,
    };
    if !(stats.min_db < stats.max_db) {
        return Err(Error::InvalidConfig(format!(
            "degenerate normalization range [{}, {}]",
            stats.min_db, stats.max_db
        )));
    }
    let mut out = volume.clone();
    out.data
        .mapv_inplace(|v| stats.normalize(v as f64) as f32);
    out.norm = stats;
    out.normalized = true;
    Ok((out, stats))
}

/// Interior min/max of a raw dB volume.
pub fn interior_stats(volume: &RssVolume) -> Result<NormStats> {
    let mask = volume.mask();
    let mut min_db = f64::INFINITY;
    let mut max_db = f64::NEG_INFINITY;
    for s in 0..volume.nz() {
        for ((i, j), &inside) in mask.indexed_iter() {
            if inside {
                let v = volume.data[[s, i, j]] as f64;
                min_db = min_db.min(v);
                max_db = max_db.max(v);
            }
        }
    }
    if !min_db.is_finite() || !max_db.is_finite() {
        return Err(Error::InvalidConfig("volume has no interior cells".into()));
    }
    Ok(NormStats { min_db, max_db })
}

/// Map a normalized volume back to dB (exact inverse of [`normalize`]).
pub fn denormalize(volume: &RssVolume) -> RssVolume {
    let stats = volume.norm;
    let mut out = volume.clone();
    out.data
        .mapv_inplace(|v| stats.denormalize(v as f64) as f32);
    out.normalized = false;
    out
}

/// A training sample: 2n+1 coarse slices centered on `t` plus the fine
/// target slice at `t`. All slices share the same normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub coarse: Vec<Array2<f32>>,
    pub fine: Array2<f32>,
    pub t_index: usize,
    pub norm: NormStats,
}

impl SamplePair {
    pub fn context_radius(&self) -> usize {
        (self.coarse.len() - 1) / 2
    }
}

/// Cut the window `t-n ..= t+n` out of a normalized pair, replicating the
/// first/last slice at the sequence ends.
pub fn window(coarse01: &RssVolume, fine01: &RssVolume, t: usize, n: usize) -> Result<SamplePair> {
    let nz = coarse01.nz();
    if t >= nz || nz != fine01.nz() {
        return Err(Error::Shape(format!(
            "slice index {t} out of range for {nz} coarse / {} fine slices",
            fine01.nz()
        )));
    }
    let slice_at = |vol: &RssVolume, idx: i64| -> Array2<f32> {
        let clamped = idx.clamp(0, nz as i64 - 1) as usize;
        vol.data.slice(s![clamped, .., ..]).to_owned()
    };
    let coarse = (-(n as i64)..=n as i64)
        .map(|off| slice_at(coarse01, t as i64 + off))
        .collect();
    Ok(SamplePair {
        coarse,
        fine: slice_at(fine01, t as i64),
        t_index: t,
        norm: coarse01.norm,
    })
}

fn flip_x(a: &Array2<f32>) -> Array2<f32> {
    a.slice(s![..;-1, ..]).to_owned()
}

fn rotate_180(a: &Array2<f32>) -> Array2<f32> {
    a.slice(s![..;-1, ..;-1]).to_owned()
}

/// Random shape-preserving augmentation: horizontal flip and 180° rotation
/// with probability 1/2 each, then a crop at a uniformly drawn coarse-cell
/// origin. `crop` is the coarse crop size; the fine crop is the exactly
/// corresponding 8x-scaled region. `None` keeps the full extent.
pub fn augment(pair: &SamplePair, rng: &mut Rng, crop: Option<(usize, usize)>) -> Result<SamplePair> {
    let r = geometry::MESH_RATIO;
    let (h, w) = (pair.coarse[0].shape()[0], pair.coarse[0].shape()[1]);
    let mut coarse = pair.coarse.clone();
    let mut fine = pair.fine.clone();
    if rng.next_f64() < 0.5 {
        coarse = coarse.iter().map(flip_x).collect();
        fine = flip_x(&fine);
    }
    if rng.next_f64() < 0.5 {
        coarse = coarse.iter().map(rotate_180).collect();
        fine = rotate_180(&fine);
    }
    let (ch, cw) = crop.unwrap_or((h, w));
    if ch > h || cw > w || ch == 0 || cw == 0 {
        return Err(Error::Shape(format!(
            "crop {ch}x{cw} does not fit the {h}x{w} coarse slice"
        )));
    }
    let oy = rng.next_below((h - ch + 1) as u64) as usize;
    let ox = rng.next_below((w - cw + 1) as u64) as usize;
    let coarse = coarse
        .iter()
        .map(|a| a.slice(s![oy..oy + ch, ox..ox + cw]).to_owned())
        .collect();
    let fine = fine
        .slice(s![r * oy..r * (oy + ch), r * ox..r * (ox + cw)])
        .to_owned();
    Ok(SamplePair {
        coarse,
        fine,
        t_index: pair.t_index,
        norm: pair.norm,
    })
}

/// Deterministic crop of a coarse/fine volume pair, in coarse-cell units.
/// Used to cut training-sized tiles out of full simulations.
pub fn crop_pair(
    coarse: &RssVolume,
    fine: &RssVolume,
    ox: usize,
    oy: usize,
    w: usize,
    h: usize,
) -> Result<(RssVolume, RssVolume)> {
    let r = geometry::MESH_RATIO;
    if ox + w > coarse.grid.nx || oy + h > coarse.grid.ny {
        return Err(Error::Shape(format!(
            "crop {w}x{h}@({ox},{oy}) exceeds coarse grid {}x{}",
            coarse.grid.nx, coarse.grid.ny
        )));
    }
    let mut c = coarse.clone();
    c.data = coarse
        .data
        .slice(s![.., ox..ox + w, oy..oy + h])
        .to_owned();
    c.grid.nx = w;
    c.grid.ny = h;
    c.grid.x_origin += ox as f64 * c.grid.delta;
    c.grid.y_origin += oy as f64 * c.grid.delta;
    let mut f = fine.clone();
    f.data = fine
        .data
        .slice(s![.., r * ox..r * (ox + w), r * oy..r * (oy + h)])
        .to_owned();
    f.grid.nx = r * w;
    f.grid.ny = r * h;
    f.grid.x_origin += (r * ox) as f64 * f.grid.delta;
    f.grid.y_origin += (r * oy) as f64 * f.grid.delta;
    Ok((c, f))
}

#[derive(Serialize, Deserialize)]
struct VolumeMeta {
    config: PweConfig,
    section: CrossSection,
    z0: f64,
    x_origin: f64,
    y_origin: f64,
    normalized: bool,
}

/// Serialize a volume in the `RSSV1` format. Round-trips bit-exactly.
pub fn save_volume(volume: &RssVolume, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_volume(volume, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_volume<W: Write>(volume: &RssVolume, w: &mut W) -> Result<()> {
    let (nz, nx, ny) = {
        let s = volume.data.shape();
        (s[0], s[1], s[2])
    };
    let meta = VolumeMeta {
        config: volume.config,
        section: volume.section,
        z0: volume.z0,
        x_origin: volume.grid.x_origin,
        y_origin: volume.grid.y_origin,
        normalized: volume.normalized,
    };
    let json = serde_json::to_vec(&meta)?;
    w.write_all(MAGIC)?;
    for v in [VERSION, nx as u32, ny as u32, nz as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in [
        volume.grid.delta,
        volume.config.delta_z,
        volume.norm.min_db,
        volume.norm.max_db,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for s in 0..nz {
        for i in 0..nx {
            for j in 0..ny {
                w.write_all(&volume.data[[s, i, j]].to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<RssVolume> {
    let mut r = BufReader::new(File::open(path)?);
    read_volume(&mut r)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Truncated(format!("while reading {what}")))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R, what: &str) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Truncated(format!("while reading {what}")))?;
    Ok(f64::from_le_bytes(buf))
}

pub fn read_volume<R: Read>(r: &mut R) -> Result<RssVolume> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Truncated("while reading magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::BadMagic {
            expected: "RSSVOL01",
            found: magic.to_vec(),
        });
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            format: "RSSV1",
            version,
        });
    }
    let nx = read_u32(r, "nx")? as usize;
    let ny = read_u32(r, "ny")? as usize;
    let nz = read_u32(r, "nz")? as usize;
    let cells = nx
        .checked_mul(ny)
        .and_then(|v| v.checked_mul(nz))
        .ok_or_else(|| Error::DimensionOverflow(format!("{nx} x {ny} x {nz}")))?;
    if nx == 0 || ny == 0 || nz == 0 || cells > (1 << 33) {
        return Err(Error::DimensionOverflow(format!("{nx} x {ny} x {nz}")));
    }
    let delta = read_f64(r, "delta")?;
    let delta_z = read_f64(r, "delta_z")?;
    let min_db = read_f64(r, "min_db")?;
    let max_db = read_f64(r, "max_db")?;
    let json_len = read_u32(r, "metadata length")? as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)
        .map_err(|_| Error::Truncated("while reading metadata".into()))?;
    let meta: VolumeMeta = serde_json::from_slice(&json)?;
    let mut raw = vec![0u8; cells * 4];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Truncated(format!("payload expects {cells} f32 values")))?;
    let mut data = Array3::<f32>::zeros((nz, nx, ny));
    let flat = data.as_slice_mut().expect("freshly allocated");
    for (dst, chunk) in flat.iter_mut().zip(raw.chunks_exact(4)) {
        *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
    }
    Ok(RssVolume {
        data,
        z0: meta.z0,
        config: meta.config,
        grid: geometry::GridSpec {
            nx,
            ny,
            delta,
            x_origin: meta.x_origin,
            y_origin: meta.y_origin,
        },
        section: meta.section,
        norm: NormStats { min_db, max_db },
        normalized: meta.normalized,
    })
    .and_then(|v| {
        if (v.config.delta_z - delta_z).abs() > 1e-12 {
            return Err(Error::DimensionOverflow(
                "header delta_z disagrees with metadata".into(),
            ));
        }
        Ok(v)
    })
}

/// A dataset entry: the two volume files plus the axes that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairEntry {
    pub coarse_path: PathBuf,
    pub fine_path: PathBuf,
    pub shape_index: u8,
    pub frequency: f64,
    pub eps_r: f64,
    pub sigma: f64,
    pub tx_x: f64,
    pub tx_y: f64,
}

/// Dataset manifest: normalization shared by every listed pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub split: Split,
    pub norm: NormStats,
    pub pairs: Vec<PairEntry>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::MESH_RATIO;

    #[test]
    fn table_grid_counts() {
        let grid = ParamGrid::table();
        assert_eq!(grid.len(), 11_880);
        assert_eq!(grid.frequencies.len(), 6);
        assert!((grid.frequencies[5] - 5.9e9).abs() < 1.0);
        let all = enumerate_configs(&grid, Split::All, 100.0).unwrap();
        assert_eq!(all.len(), 11_880);
    }

    #[test]
    fn split_membership() {
        assert!(Split::Test.admits(1.2, 2.0));
        assert!(!Split::Train.admits(1.2, 0.5));
        assert!(Split::Train.admits(1.0, 1.0));
        // 1.2 produced by stepping 0.2 six times carries float drift.
        assert!(Split::Test.admits(6.0 * 0.2, 2.5));
    }

    #[test]
    fn splits_are_disjoint() {
        let grid = ParamGrid::table();
        for &x in &grid.tx_x {
            for &y in &grid.tx_y {
                assert!(
                    !(Split::Train.admits(x, y) && Split::Test.admits(x, y)),
                    "({x}, {y}) in both splits"
                );
            }
        }
    }

    #[test]
    fn enumeration_is_deterministic() {
        let grid = ParamGrid::figures();
        let a = enumerate_configs(&grid, Split::Train, 50.0).unwrap();
        let b = enumerate_configs(&grid, Split::Train, 50.0).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn empty_filter_is_an_error() {
        let mut grid = ParamGrid::table();
        grid.tx_y = vec![1.5]; // admitted by neither split
        assert!(enumerate_configs(&grid, Split::Train, 50.0).is_err());
        assert!(enumerate_configs(&grid, Split::Test, 50.0).is_err());
    }

    fn tiny_pair() -> (RssVolume, RssVolume) {
        let config = SimConfig {
            section: CrossSection::default_for(SectionKind::Rectangular),
            frequency: 0.9e9,
            material: Material {
                eps_r: 5.0,
                sigma: 0.01,
            },
            tx: TxPosition { x: 0.4, y: 1.0 },
            length: 8.0,
        };
        generate_pair(&config).unwrap()
    }

    #[test]
    fn pair_alignment() {
        let (coarse, fine) = tiny_pair();
        assert_eq!(fine.grid.nx, MESH_RATIO * coarse.grid.nx);
        assert_eq!(fine.grid.ny, MESH_RATIO * coarse.grid.ny);
        assert_eq!(fine.nz(), coarse.nz());
        for t in 0..coarse.nz() {
            assert!((fine.z_of(t) - coarse.z_of(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_roundtrip() {
        let (coarse, _) = tiny_pair();
        let (v01, stats) = normalize(&coarse, None).unwrap();
        assert!(v01.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!((stats.normalize(stats.min_db) - 0.0).abs() < 1e-12);
        assert!((stats.normalize(stats.max_db) - 1.0).abs() < 1e-12);
        assert!((stats.normalize((stats.min_db + stats.max_db) / 2.0) - 0.5).abs() < 1e-12);
        // Affine round trip is exact to a few f32 ulps of the dB range.
        let mask = coarse.mask();
        let back = denormalize(&v01);
        let range = (stats.max_db - stats.min_db) as f32;
        for s in 0..coarse.nz() {
            for ((i, j), &inside) in mask.indexed_iter() {
                if inside {
                    let orig = coarse.data[[s, i, j]];
                    let rt = back.data[[s, i, j]];
                    assert!((orig - rt).abs() <= range * f32::EPSILON * 4.0);
                }
            }
        }
    }

    #[test]
    fn degenerate_normalization_rejected() {
        let (coarse, _) = tiny_pair();
        let err = normalize(
            &coarse,
            Some(NormStats {
                min_db: -10.0,
                max_db: -10.0,
            }),
        );
        assert!(err.is_err());
    }

    #[test]
    fn window_clamps_at_edges() {
        let (coarse, fine) = tiny_pair();
        let (c01, stats) = normalize(&coarse, None).unwrap();
        let (f01, _) = normalize(&fine, Some(stats)).unwrap();
        let n = 2;
        let mid = window(&c01, &f01, 3, n).unwrap();
        assert_eq!(mid.coarse.len(), 5);
        assert_eq!(mid.coarse[n], c01.data.slice(s![3, .., ..]).to_owned());
        let head = window(&c01, &f01, 0, n).unwrap();
        assert_eq!(head.coarse[0], head.coarse[1]);
        assert_eq!(head.coarse[0], head.coarse[2]);
        let single = window(&c01, &f01, 2, 0).unwrap();
        assert_eq!(single.coarse.len(), 1);
    }

    #[test]
    fn flip_is_an_involution() {
        let (coarse, fine) = tiny_pair();
        let (c01, stats) = normalize(&coarse, None).unwrap();
        let (f01, _) = normalize(&fine, Some(stats)).unwrap();
        let pair = window(&c01, &f01, 2, 1).unwrap();
        let flipped_twice = SamplePair {
            coarse: pair.coarse.iter().map(|a| flip_x(&flip_x(a))).collect(),
            fine: flip_x(&flip_x(&pair.fine)),
            t_index: pair.t_index,
            norm: pair.norm,
        };
        assert_eq!(pair, flipped_twice);
    }

    #[test]
    fn augment_shapes_and_determinism() {
        let (coarse, fine) = tiny_pair();
        let (c01, stats) = normalize(&coarse, None).unwrap();
        let (f01, _) = normalize(&fine, Some(stats)).unwrap();
        let pair = window(&c01, &f01, 2, 2).unwrap();
        let crop = Some((6, 9));
        let a = augment(&pair, &mut Rng::seed_from(7), crop).unwrap();
        let b = augment(&pair, &mut Rng::seed_from(7), crop).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.coarse[0].shape(), [6, 9]);
        assert_eq!(a.fine.shape(), [48, 72]);
        // Oversized crops are rejected.
        assert!(augment(&pair, &mut Rng::seed_from(1), Some((1000, 2))).is_err());
        // Shape-preserving transforms only: no crop keeps dims.
        let c = augment(&pair, &mut Rng::seed_from(3), None).unwrap();
        assert_eq!(c.coarse[0].shape(), pair.coarse[0].shape());
        assert_eq!(c.fine.shape(), pair.fine.shape());
    }

    #[test]
    fn volume_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (coarse, _) = tiny_pair();
        let path = dir.path().join("vol.rssv");
        save_volume(&coarse, &path).unwrap();
        let loaded = load_volume(&path).unwrap();
        assert_eq!(coarse.data, loaded.data);
        assert_eq!(coarse.grid, loaded.grid);
        assert_eq!(coarse.norm, loaded.norm);
        let path2 = dir.path().join("vol2.rssv");
        save_volume(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (coarse, _) = tiny_pair();
        let path = dir.path().join("vol.rssv");
        save_volume(&coarse, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::BadMagic { .. })));

        let mut bad_version = bytes.clone();
        bad_version[8] = 2;
        std::fs::write(&path, &bad_version).unwrap();
        assert!(matches!(
            load_volume(&path),
            Err(Error::UnsupportedVersion { format: "RSSV1", version: 2 })
        ));

        let truncated = &bytes[..bytes.len() - 9];
        std::fs::write(&path, truncated).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::Truncated(_))));
    }

    #[test]
    fn crop_pair_tracks_origins() {
        let (coarse, fine) = tiny_pair();
        let (c, f) = crop_pair(&coarse, &fine, 2, 3, 8, 6).unwrap();
        assert_eq!(c.data.shape(), [coarse.nz(), 8, 6]);
        assert_eq!(f.data.shape(), [fine.nz(), 64, 48]);
        assert!((c.grid.x(0) - coarse.grid.x(2)).abs() < 1e-12);
        assert!((f.grid.x(0) - fine.grid.x(16)).abs() < 1e-12);
        assert!(crop_pair(&coarse, &fine, 0, 0, 1000, 2).is_err());
    }
}
