//! Error metrics over denormalized dB fields and grouped evaluation tables.

use ndarray::s;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset;
use crate::prbpn::PrbpnModel;
use crate::pwe::RssVolume;
use crate::{Error, Result};

/// Predictions with |reference| below this (in dB) are excluded from MAPE.
pub const MAPE_GUARD_DB: f64 = 1e-6;

/// MAE / MAPE / RMSE / R² over one evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Mean absolute error, dB.
    pub mae: f64,
    /// Mean absolute percentage error, percent.
    pub mape: f64,
    /// Root mean square error, dB.
    pub rmse: f64,
    /// Coefficient of determination.
    pub r2: f64,
    pub n_points: usize,
    /// Points dropped from MAPE by the zero-reference guard.
    pub excluded_points: usize,
}

/// The four error measures between reference `y` and prediction `y_hat`.
pub fn compute_metrics(y: &[f64], y_hat: &[f64]) -> Result<MetricsRecord> {
    if y.len() != y_hat.len() {
        return Err(Error::Metrics(format!(
            "length mismatch: {} references vs {} predictions",
            y.len(),
            y_hat.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::Metrics("no points to evaluate".into()));
    }
    let n = y.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut pct_sum = 0.0;
    let mut pct_n = 0usize;
    for (&yi, &pi) in y.iter().zip(y_hat) {
        let e = yi - pi;
        abs_sum += e.abs();
        sq_sum += e * e;
        if yi.abs() >= MAPE_GUARD_DB {
            pct_sum += (e / yi).abs();
            pct_n += 1;
        }
    }
    if pct_n == 0 {
        return Err(Error::Metrics(
            "every point was excluded by the MAPE zero guard".into(),
        ));
    }
    let mean = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|&v| (v - mean) * (v - mean)).sum();
    if y.len() < 2 || ss_tot == 0.0 {
        return Err(Error::Metrics(
            "reference has zero variance, R^2 undefined".into(),
        ));
    }
    Ok(MetricsRecord {
        mae: abs_sum / n,
        mape: 100.0 * pct_sum / pct_n as f64,
        rmse: (sq_sum / n).sqrt(),
        r2: 1.0 - sq_sum / ss_tot,
        n_points: y.len(),
        excluded_points: y.len() - pct_n,
    })
}

/// Metrics of one (shape, frequency) group, averaged over its pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub shape_index: u8,
    pub frequency: f64,
    pub pairs: usize,
    pub record: MetricsRecord,
}

/// Reconstruct every `stride`-th slice of each pair, compare against the
/// fine reference in dB over interior cells, and average records within
/// (shape, frequency) groups. Pairs must be normalized.
pub fn evaluate(
    model: &PrbpnModel,
    pairs: &[(RssVolume, RssVolume)],
    stride: usize,
) -> Result<Vec<GroupMetrics>> {
    let stride = stride.max(1);
    let mut per_pair: Vec<(u8, f64, MetricsRecord)> = Vec::new();
    for (coarse, fine) in pairs {
        let record = evaluate_pair(model, coarse, fine, stride)?;
        per_pair.push((
            coarse.section.kind.index(),
            coarse.config.frequency,
            record,
        ));
    }
    let mut keys: Vec<(u8, u64)> = per_pair
        .iter()
        .map(|(s, f, _)| (*s, f.to_bits()))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    let mut groups = Vec::new();
    for (shape_index, fbits) in keys {
        let members: Vec<&MetricsRecord> = per_pair
            .iter()
            .filter(|(s, f, _)| *s == shape_index && f.to_bits() == fbits)
            .map(|(_, _, r)| r)
            .collect();
        let k = members.len() as f64;
        let avg = MetricsRecord {
            mae: members.iter().map(|r| r.mae).sum::<f64>() / k,
            mape: members.iter().map(|r| r.mape).sum::<f64>() / k,
            rmse: members.iter().map(|r| r.rmse).sum::<f64>() / k,
            r2: members.iter().map(|r| r.r2).sum::<f64>() / k,
            n_points: members.iter().map(|r| r.n_points).sum(),
            excluded_points: members.iter().map(|r| r.excluded_points).sum(),
        };
        groups.push(GroupMetrics {
            shape_index,
            frequency: f64::from_bits(fbits),
            pairs: members.len(),
            record: avg,
        });
    }
    Ok(groups)
}

/// One pair's metrics: prediction vs fine reference pooled over the sampled
/// slices, interior cells only, in dB.
pub fn evaluate_pair(
    model: &PrbpnModel,
    coarse: &RssVolume,
    fine: &RssVolume,
    stride: usize,
) -> Result<MetricsRecord> {
    if !coarse.normalized || !fine.normalized {
        return Err(Error::Metrics(
            "evaluation expects normalized volumes".into(),
        ));
    }
    let n = model.cfg.context_radius;
    let stats = fine.norm;
    let fine_mask = fine.mask();
    let ts: Vec<usize> = (0..coarse.nz()).step_by(stride).collect();
    let slices: Vec<Result<(Vec<f64>, Vec<f64>)>> = ts
        .par_iter()
        .map(|&t| {
            let pair = dataset::window(coarse, fine, t, n)?;
            let sr = model.infer(&pair.coarse)?;
            let mut y = Vec::new();
            let mut y_hat = Vec::new();
            let target = fine.data.slice(s![t, .., ..]);
            for ((i, j), &inside) in fine_mask.indexed_iter() {
                if inside {
                    y.push(stats.denormalize(target[[i, j]] as f64));
                    // Export clamp before mapping back to dB.
                    y_hat.push(stats.denormalize((sr[[i, j]] as f64).clamp(0.0, 1.0)));
                }
            }
            Ok((y, y_hat))
        })
        .collect();
    let mut y_all = Vec::new();
    let mut p_all = Vec::new();
    for r in slices {
        let (mut y, mut p) = r?;
        y_all.append(&mut y);
        p_all.append(&mut p);
    }
    compute_metrics(&y_all, &p_all)
}

/// RSS along the tunnel at the cell nearest to the receiver position.
pub fn axial_curve(volume: &RssVolume, rx: (f64, f64)) -> Result<Vec<(f64, f64)>> {
    if !volume.section.contains(rx.0, rx.1) {
        return Err(Error::InvalidConfig(format!(
            "receiver ({}, {}) lies outside the section",
            rx.0, rx.1
        )));
    }
    let (i, j) = volume.grid.nearest_cell(rx.0, rx.1);
    Ok((0..volume.nz())
        .map(|t| {
            let raw = volume.data[[t, i, j]] as f64;
            let db = if volume.normalized {
                volume.norm.denormalize(raw)
            } else {
                raw
            };
            (volume.z_of(t), db)
        })
        .collect())
}

/// Aligned text table in the reporting layout: metric rows, frequency
/// columns, one table per shape.
pub fn format_table(groups: &[GroupMetrics]) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let mut shapes: Vec<u8> = groups.iter().map(|g| g.shape_index).collect();
    shapes.sort_unstable();
    shapes.dedup();
    for shape in shapes {
        let cols: Vec<&GroupMetrics> = groups
            .iter()
            .filter(|g| g.shape_index == shape)
            .collect();
        writeln!(out, "shape {shape}").unwrap();
        write!(out, "{:<12}", "indicator").unwrap();
        for g in &cols {
            write!(out, "{:>14}", format!("{:.1} GHz", g.frequency / 1e9)).unwrap();
        }
        out.push('\n');
        let rows: [(&str, fn(&MetricsRecord) -> String); 4] = [
            ("MAE", |r| format!("{:.4}", r.mae)),
            ("MAPE", |r| format!("{:.2}%", r.mape)),
            ("RMSE", |r| format!("{:.4}", r.rmse)),
            ("R2", |r| format!("{:.4}", r.r2)),
        ];
        for (name, fmt) in rows {
            write!(out, "{name:<12}").unwrap();
            for g in &cols {
                write!(out, "{:>14}", fmt(&g.record)).unwrap();
            }
            out.push('\n');
        }
    }
    out
}
