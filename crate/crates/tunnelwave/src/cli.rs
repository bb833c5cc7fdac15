//! Pipeline commands behind the `tunnelwave` binary: simulate one pair,
//! build datasets, train, evaluate, infer, plot, and run the self-check
//! oracle suites.
//!
//! All knobs live in a schema-validated JSON `RunConfig` (unknown keys are
//! rejected); the built-in presets `tableI`, `figures` and `massif` provide
//! complete documents. Heatmaps are written as 16-bit binary PGM (P5) with
//! a JSON sidecar carrying the dB range; axial curves as `z,rss_db` CSV.
//!
//! Exit codes: 0 success, 1 check/runtime failure, 2 usage or config error.

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::dataset::{
    self, generate_pair, normalize, Manifest, NormStats, PairEntry, ParamGrid, SimConfig, Split,
};
use crate::geometry::{CrossSection, GridSpec, SectionKind, MESH_RATIO};
use crate::metrics;
use crate::prbpn::{PrbpnConfig, PrbpnModel};
use crate::pwe::{Material, RssVolume, TxPosition};
use crate::selfcheck;
use crate::tensor::checkpoint;
use crate::train::{TrainConfig, Trainer, TrainingSet};
use crate::{Error, Result};

/// Environment variable naming the scratch/cache directory for raw
/// simulation volumes reused across dataset builds.
pub const CACHE_ENV: &str = "TUNNELWAVE_CACHE";

/// Selection of the single pair `simulate` runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub shape_index: u8,
    pub frequency: f64,
    pub eps_r: f64,
    pub sigma: f64,
    pub tx_x: f64,
    pub tx_y: f64,
    /// Overrides the campaign length when set.
    pub length: Option<f64>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            shape_index: 1,
            frequency: 0.9e9,
            eps_r: 5.0,
            sigma: 0.01,
            tx_x: 0.0,
            tx_y: 1.0,
            length: None,
        }
    }
}

/// Input/output paths commands fall back to when no flag is given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub volume: Option<PathBuf>,
}

/// The complete run document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: ParamGrid,
    pub split: Split,
    /// Tunnel length for dataset campaigns, meters.
    pub length: f64,
    pub simulate: SimulateConfig,
    pub model: PrbpnConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid: ParamGrid::table(),
            split: Split::All,
            length: 1000.0,
            simulate: SimulateConfig::default(),
            model: PrbpnConfig::default(),
            train: TrainConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Built-in configuration presets.
pub fn preset(name: &str) -> Result<RunConfig> {
    match name {
        "tableI" => Ok(RunConfig::default()),
        "figures" => Ok(RunConfig {
            grid: ParamGrid::figures(),
            ..RunConfig::default()
        }),
        "massif" => Ok(RunConfig {
            grid: ParamGrid::massif(),
            length: 2500.0,
            simulate: SimulateConfig {
                shape_index: 2,
                frequency: 0.9e9,
                eps_r: 5.0,
                sigma: 0.01,
                tx_x: 0.0,
                tx_y: 1.0,
                length: Some(2500.0),
            },
            ..RunConfig::default()
        }),
        other => Err(Error::InvalidConfig(format!(
            "unknown preset {other:?} (expected tableI, figures or massif)"
        ))),
    }
}

/// Resolve the run document from `--config` / `--preset`.
pub fn load_config(config: Option<&Path>, preset_name: Option<&str>) -> Result<RunConfig> {
    match (config, preset_name) {
        (Some(_), Some(_)) => Err(Error::InvalidConfig(
            "--config and --preset are mutually exclusive".into(),
        )),
        (Some(path), None) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("config schema: {e}")))
        }
        (None, Some(name)) => preset(name),
        (None, None) => Ok(RunConfig::default()),
    }
}

impl RunConfig {
    fn sim_config(&self) -> Result<SimConfig> {
        let kind = SectionKind::from_index(self.simulate.shape_index).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "shape index {} out of range 1..=4",
                self.simulate.shape_index
            ))
        })?;
        Ok(SimConfig {
            section: CrossSection::default_for(kind),
            frequency: self.simulate.frequency,
            material: Material {
                eps_r: self.simulate.eps_r,
                sigma: self.simulate.sigma,
            },
            tx: TxPosition {
                x: self.simulate.tx_x,
                y: self.simulate.tx_y,
            },
            length: self.simulate.length.unwrap_or(self.length),
        })
    }
}

/// Run one coarse/fine pair and write both raw volumes.
pub fn cmd_simulate(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let sim = cfg.sim_config()?;
    if !sim.tx_inside() {
        return Err(Error::InvalidConfig(format!(
            "transmitter ({}, {}) is outside the shape-{} interior",
            sim.tx.x,
            sim.tx.y,
            sim.section.kind.index()
        )));
    }
    fs::create_dir_all(out_dir)?;
    let (coarse, fine) = generate_pair(&sim)?;
    dataset::save_volume(&coarse, &out_dir.join("coarse.rssv"))?;
    dataset::save_volume(&fine, &out_dir.join("fine.rssv"))?;
    println!(
        "simulated shape {} at {:.2} GHz: {} slices, coarse {}x{}, fine {}x{}, dz {:.4} m",
        sim.section.kind.index(),
        sim.frequency / 1e9,
        coarse.nz(),
        coarse.grid.nx,
        coarse.grid.ny,
        fine.grid.nx,
        fine.grid.ny,
        coarse.config.delta_z
    );
    Ok(())
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325_u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

fn cached_pair(sim: &SimConfig) -> Result<(RssVolume, RssVolume)> {
    let Ok(cache_dir) = std::env::var(CACHE_ENV) else {
        return generate_pair(sim);
    };
    let cache = PathBuf::from(cache_dir);
    fs::create_dir_all(&cache)?;
    let key = fnv1a(&serde_json::to_vec(sim)?);
    let c_path = cache.join(format!("raw_{key:016x}_coarse.rssv"));
    let f_path = cache.join(format!("raw_{key:016x}_fine.rssv"));
    if c_path.exists() && f_path.exists() {
        if let (Ok(c), Ok(f)) = (dataset::load_volume(&c_path), dataset::load_volume(&f_path)) {
            return Ok((c, f));
        }
    }
    let (c, f) = generate_pair(sim)?;
    dataset::save_volume(&c, &c_path)?;
    dataset::save_volume(&f, &f_path)?;
    Ok((c, f))
}

/// Enumerate the grid, simulate every admissible pair, normalize with
/// split-level statistics and write volumes plus a manifest.
pub fn cmd_dataset(
    cfg: &RunConfig,
    split: Split,
    out_dir: &Path,
    limit: Option<usize>,
) -> Result<Manifest> {
    fs::create_dir_all(out_dir)?;
    let configs = dataset::enumerate_configs(&cfg.grid, split, cfg.length)?;
    let (inside, skipped): (Vec<SimConfig>, Vec<SimConfig>) =
        configs.into_iter().partition(|c| c.tx_inside());
    if !skipped.is_empty() {
        eprintln!(
            "skipping {} configurations whose transmitter falls outside the section interior",
            skipped.len()
        );
    }
    if inside.is_empty() {
        return Err(Error::InvalidConfig(
            "no admissible configuration after the interior filter".into(),
        ));
    }
    let selected: Vec<SimConfig> = match limit {
        Some(k) => inside.into_iter().take(k).collect(),
        None => inside,
    };
    let raw: Vec<Result<(RssVolume, RssVolume)>> =
        selected.par_iter().map(cached_pair).collect();
    let mut pairs = Vec::with_capacity(raw.len());
    for r in raw {
        pairs.push(r?);
    }
    // Split-level normalization shared by coarse and fine members.
    let mut stats = NormStats {
        min_db: f64::INFINITY,
        max_db: f64::NEG_INFINITY,
    };
    for (c, f) in &pairs {
        for vol in [c, f] {
            stats.min_db = stats.min_db.min(vol.norm.min_db);
            stats.max_db = stats.max_db.max(vol.norm.max_db);
        }
    }
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, ((coarse, fine), sim)) in pairs.iter().zip(&selected).enumerate() {
        let (c01, _) = normalize(coarse, Some(stats))?;
        let (f01, _) = normalize(fine, Some(stats))?;
        let coarse_path = out_dir.join(format!("pair_{i:04}_coarse.rssv"));
        let fine_path = out_dir.join(format!("pair_{i:04}_fine.rssv"));
        dataset::save_volume(&c01, &coarse_path)?;
        dataset::save_volume(&f01, &fine_path)?;
        entries.push(PairEntry {
            coarse_path,
            fine_path,
            shape_index: sim.section.kind.index(),
            frequency: sim.frequency,
            eps_r: sim.material.eps_r,
            sigma: sim.material.sigma,
            tx_x: sim.tx.x,
            tx_y: sim.tx.y,
        });
    }
    let manifest = Manifest {
        split,
        norm: stats,
        pairs: entries,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    println!(
        "dataset: {} pairs, norm range [{:.2}, {:.2}] dB -> {}",
        manifest.pairs.len(),
        stats.min_db,
        stats.max_db,
        out_dir.display()
    );
    Ok(manifest)
}

/// Load every pair listed in a manifest.
pub fn load_manifest_pairs(manifest: &Manifest) -> Result<Vec<(RssVolume, RssVolume)>> {
    manifest
        .pairs
        .iter()
        .map(|e| {
            Ok((
                dataset::load_volume(&e.coarse_path)?,
                dataset::load_volume(&e.fine_path)?,
            ))
        })
        .collect()
}

/// Train a fresh model on a manifest; writes `train.log` (JSON lines),
/// the resumable `final.prbt` and the exported `model.prbw`.
pub fn cmd_train(
    cfg: &RunConfig,
    manifest_path: &Path,
    out_dir: &Path,
    seed: Option<u64>,
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)?;
    let manifest = Manifest::load(manifest_path)?;
    let data = TrainingSet::new(load_manifest_pairs(&manifest)?)?;
    let mut train_cfg = cfg.train;
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    let model = PrbpnModel::new(cfg.model, train_cfg.seed)?;
    let mut trainer = Trainer::new(model, train_cfg);
    let log_path = out_dir.join("train.log");
    let mut log = BufWriter::new(File::create(&log_path)?);
    trainer.run(&data, None, Some(out_dir), |entry| {
        let line = serde_json::to_string(entry).expect("log entry serializes");
        let _ = writeln!(log, "{line}");
    })?;
    log.flush()?;
    let weights = out_dir.join("model.prbw");
    checkpoint::save_weights(&weights, &trainer.model.named_params(), &trainer.model.meta_json())?;
    println!(
        "trained {} iterations, weights -> {}",
        trainer.iter,
        weights.display()
    );
    Ok(weights)
}

/// Evaluate exported weights against a manifest; prints the metric table
/// and writes `metrics.json`.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    manifest_path: &Path,
    out_dir: &Path,
) -> Result<Vec<metrics::GroupMetrics>> {
    fs::create_dir_all(out_dir)?;
    let (params, meta) = checkpoint::load_weights(checkpoint_path)?;
    let model = PrbpnModel::from_named_params(params, &meta)?;
    let manifest = Manifest::load(manifest_path)?;
    let pairs = load_manifest_pairs(&manifest)?;
    let groups = metrics::evaluate(&model, &pairs, cfg.train.eval_stride)?;
    print!("{}", metrics::format_table(&groups));
    let json = serde_json::to_vec_pretty(&groups)?;
    fs::write(out_dir.join("metrics.json"), json)?;
    Ok(groups)
}

/// Reconstruct the fine slice at index `t` of a coarse volume; writes a
/// one-slice `RSSV1` prediction in dB.
pub fn cmd_infer(
    checkpoint_path: &Path,
    volume_path: &Path,
    t: usize,
    out_dir: &Path,
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)?;
    let (params, meta) = checkpoint::load_weights(checkpoint_path)?;
    let model = PrbpnModel::from_named_params(params, &meta)?;
    let coarse = dataset::load_volume(volume_path)?;
    let coarse01 = if coarse.normalized {
        coarse.clone()
    } else {
        normalize(&coarse, None)?.0
    };
    let n = model.cfg.context_radius;
    // The windowing helper pairs coarse with fine; reuse it against itself
    // for the coarse window only.
    let nz = coarse01.nz();
    if t >= nz {
        return Err(Error::InvalidConfig(format!(
            "slice {t} out of range, volume has {nz} slices"
        )));
    }
    let window: Vec<Array2<f32>> = (-(n as i64)..=n as i64)
        .map(|off| {
            let idx = (t as i64 + off).clamp(0, nz as i64 - 1) as usize;
            coarse01.data.slice(s![idx, .., ..]).to_owned()
        })
        .collect();
    let sr01 = model.infer(&window)?;
    let stats = coarse01.norm;
    let fine_db = sr01.mapv(|v| stats.denormalize((v as f64).clamp(0.0, 1.0)) as f32);

    let r = MESH_RATIO as f64;
    let cg = coarse01.grid;
    let fine_grid = GridSpec {
        nx: MESH_RATIO * cg.nx,
        ny: MESH_RATIO * cg.ny,
        delta: cg.delta / r,
        x_origin: cg.x_origin - cg.delta / 2.0 + cg.delta / (2.0 * r),
        y_origin: cg.y_origin - cg.delta / 2.0 + cg.delta / (2.0 * r),
    };
    let (h8, w8) = (fine_db.shape()[0], fine_db.shape()[1]);
    let mut data = ndarray::Array3::<f32>::zeros((1, h8, w8));
    data.slice_mut(s![0, .., ..]).assign(&fine_db);
    let mut config = coarse01.config;
    config.mesh_factor /= r;
    let prediction = RssVolume {
        data,
        z0: coarse01.z_of(t),
        config,
        grid: fine_grid,
        section: coarse01.section,
        norm: stats,
        normalized: false,
    };
    let path = out_dir.join(format!("prediction_t{t:04}.rssv"));
    dataset::save_volume(&prediction, &path)?;
    println!("prediction for slice {t} -> {}", path.display());
    Ok(path)
}

/// Plot kinds supported by `cmd_plot`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Heatmap,
    Axial,
}

impl std::str::FromStr for PlotKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<PlotKind> {
        match s {
            "heatmap" => Ok(PlotKind::Heatmap),
            "axial" => Ok(PlotKind::Axial),
            other => Err(Error::InvalidConfig(format!(
                "unknown plot kind {other:?} (expected heatmap or axial)"
            ))),
        }
    }
}

/// Render a slice heatmap (16-bit PGM + JSON sidecar) or an axial CSV.
pub fn cmd_plot(
    volume_path: &Path,
    kind: PlotKind,
    t: usize,
    rx: Option<(f64, f64)>,
    out_dir: &Path,
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)?;
    let volume = dataset::load_volume(volume_path)?;
    match kind {
        PlotKind::Heatmap => {
            if t >= volume.nz() {
                return Err(Error::InvalidConfig(format!(
                    "slice {t} out of range, volume has {} slices",
                    volume.nz()
                )));
            }
            let slice = volume.data.slice(s![t, .., ..]);
            let db: Array2<f64> = slice.mapv(|v| {
                if volume.normalized {
                    volume.norm.denormalize(v as f64)
                } else {
                    v as f64
                }
            });
            let path = out_dir.join(format!("slice_t{t:04}.pgm"));
            let (min_db, max_db) = write_pgm16(&path, &db)?;
            let sidecar = serde_json::json!({
                "min_db": min_db,
                "max_db": max_db,
                "width": db.shape()[0],
                "height": db.shape()[1],
                "z": volume.z_of(t),
            });
            fs::write(
                path.with_extension("json"),
                serde_json::to_vec_pretty(&sidecar)?,
            )?;
            println!("heatmap -> {}", path.display());
            Ok(path)
        }
        PlotKind::Axial => {
            let rx = rx.ok_or_else(|| {
                Error::InvalidConfig("axial plots need --rx-x and --rx-y".into())
            })?;
            let series = metrics::axial_curve(&volume, rx)?;
            let path = out_dir.join("axial.csv");
            let mut w = BufWriter::new(File::create(&path)?);
            writeln!(w, "z,rss_db")?;
            for (z, db) in series {
                writeln!(w, "{z},{db}")?;
            }
            w.flush()?;
            println!("axial curve -> {}", path.display());
            Ok(path)
        }
    }
}

/// 16-bit binary PGM, min -> 0 and max -> 65535 over the slice. The image
/// is written with x as columns and y as rows, floor at the bottom.
/// Returns the (min, max) used for scaling.
pub fn write_pgm16(path: &Path, values: &Array2<f64>) -> Result<(f64, f64)> {
    let (nx, ny) = (values.shape()[0], values.shape()[1]);
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in values.iter() {
        min = min.min(v);
        max = max.max(v);
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{nx} {ny}\n65535\n")?;
    for j in (0..ny).rev() {
        for i in 0..nx {
            let level = if max > min {
                (((values[[i, j]] - min) / (max - min)) * 65535.0).round() as u16
            } else {
                0
            };
            w.write_all(&level.to_be_bytes())?;
        }
    }
    w.flush()?;
    Ok((min, max))
}

/// Run the oracle suites; returns true when everything passed.
pub fn cmd_selfcheck(fault: Option<&str>) -> Result<bool> {
    let results = selfcheck::run_all(fault)?;
    let mut all = true;
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {} ({:.0} ms): {}", r.name, r.elapsed_ms, r.detail);
        all &= r.passed;
    }
    Ok(all)
}
