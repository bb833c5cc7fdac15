//! Deterministic training: uniform window sampling with augmentation, Adam
//! over the reconstruction loss, JSON-lines logging and resumable
//! checkpoints.
//!
//! Each batch sample runs on its own tape (optionally in parallel); sample
//! gradients are summed in index order and averaged, so training is
//! bit-reproducible for a fixed seed regardless of thread count.
//!
//! Trainer checkpoints (`PRBPNT01`) persist parameters, Adam moments and
//! the RNG state in f64 so a resumed run matches an uninterrupted one
//! step for step. Exported weights use the f32 `PRBW1` format.

use ndarray::{Array2, IxDyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use crate::dataset::{self, SamplePair};
use crate::metrics::{self, GroupMetrics};
use crate::prbpn::{self, PrbpnModel};
use crate::pwe::RssVolume;
use crate::tensor::{
    checkpoint::{read_f64_tensor, write_f64_tensor},
    AdamHyper, AdamState, Rng, Tape, Tensor, Var,
};
use crate::{Error, Result};

const TRAINER_MAGIC: &[u8; 8] = b"PRBPNT01";
const TRAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_iters: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Emit a checkpoint every this many iterations (0 = final only).
    pub checkpoint_every: u64,
    /// Constant learning rate.
    pub lr: f64,
    /// Smoothness weight of the loss.
    pub beta: f64,
    /// Evaluate on the held-out set every this many iterations (0 = never).
    pub eval_every: u64,
    /// Slice stride used by evaluations during training.
    pub eval_stride: usize,
    /// Coarse-cell crop applied by augmentation; None trains on full slices.
    pub crop: Option<(usize, usize)>,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iters: 2000,
            batch_size: 4,
            seed: 0,
            checkpoint_every: 0,
            lr: 1e-4,
            beta: 1e-4,
            eval_every: 0,
            eval_stride: 4,
            crop: Some((8, 8)),
            deterministic: true,
        }
    }
}

/// Normalized coarse/fine volume pairs ready for sampling.
pub struct TrainingSet {
    pub pairs: Vec<(RssVolume, RssVolume)>,
}

impl TrainingSet {
    pub fn new(pairs: Vec<(RssVolume, RssVolume)>) -> Result<TrainingSet> {
        if pairs.is_empty() {
            return Err(Error::InvalidConfig("training set is empty".into()));
        }
        for (coarse, fine) in &pairs {
            if !coarse.normalized || !fine.normalized {
                return Err(Error::InvalidConfig(
                    "training volumes must be normalized".into(),
                ));
            }
            if fine.grid.nx != 8 * coarse.grid.nx
                || fine.grid.ny != 8 * coarse.grid.ny
                || fine.nz() != coarse.nz()
            {
                return Err(Error::Shape(format!(
                    "pair geometry mismatch: coarse {}x{}x{}, fine {}x{}x{}",
                    coarse.nz(),
                    coarse.grid.nx,
                    coarse.grid.ny,
                    fine.nz(),
                    fine.grid.nx,
                    fine.grid.ny
                )));
            }
        }
        Ok(TrainingSet { pairs })
    }
}

/// One JSON-lines log record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<Vec<GroupMetrics>>,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iters_run: u64,
}

/// Model + optimizer + RNG: everything a resumable run needs.
pub struct Trainer {
    pub model: PrbpnModel,
    pub adam: AdamState,
    pub rng: Rng,
    pub iter: u64,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(model: PrbpnModel, cfg: TrainConfig) -> Trainer {
        let hyper = AdamHyper {
            lr: cfg.lr,
            ..AdamHyper::default()
        };
        let adam = AdamState::new(model.values(), hyper);
        // Stream 1 of the run seed drives sampling and augmentation;
        // stream 0 is reserved for model init by convention.
        let rng = Rng::seed_from(cfg.seed).split(1);
        Trainer {
            model,
            adam,
            rng,
            iter: 0,
            cfg,
        }
    }

    /// Draw one batch, accumulate averaged gradients, apply Adam.
    /// Returns the mean batch loss.
    pub fn step(&mut self, data: &TrainingSet) -> Result<f64> {
        let n = self.model.cfg.context_radius;
        let mut samples = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let p = self.rng.next_below(data.pairs.len() as u64) as usize;
            let (coarse, fine) = &data.pairs[p];
            let t = self.rng.next_below(coarse.nz() as u64) as usize;
            let pair = dataset::window(coarse, fine, t, n)?;
            samples.push(dataset::augment(&pair, &mut self.rng, self.cfg.crop)?);
        }
        let results: Vec<Result<(f64, Vec<Tensor>)>> = samples
            .par_iter()
            .map(|s| self.sample_gradients(s))
            .collect();
        let mut mean_loss = 0.0;
        let mut acc: Option<Vec<Tensor>> = None;
        for r in results {
            let (loss, grads) = r?;
            if !loss.is_finite() {
                return Err(Error::TrainDiverged { iter: self.iter });
            }
            mean_loss += loss;
            match &mut acc {
                None => acc = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        *a += g;
                    }
                }
            }
        }
        let mut grads = acc.expect("batch_size >= 1");
        let scale = 1.0 / self.cfg.batch_size as f64;
        for g in &mut grads {
            g.mapv_inplace(|v| v * scale);
        }
        self.adam.apply(self.model.values_mut(), &grads)?;
        self.iter += 1;
        Ok(mean_loss * scale)
    }

    fn sample_gradients(&self, sample: &SamplePair) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let window: Vec<Var> = sample
            .coarse
            .iter()
            .map(|a| tape.leaf(slice_tensor(a)))
            .collect();
        let sr = bound.forward(&mut tape, &window)?;
        let hr = tape.leaf(slice_tensor(&sample.fine));
        let loss = prbpn::loss(&mut tape, sr, hr, self.cfg.beta)?;
        let loss_value = tape.scalar_value(loss)?;
        let grads = tape.backward(loss)?;
        let out = bound
            .param_vars()
            .iter()
            .zip(self.model.values())
            .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
            .collect();
        Ok((loss_value, out))
    }

    /// Run until `cfg.max_iters`, logging every step and evaluating /
    /// checkpointing on the configured cadences.
    pub fn run(
        &mut self,
        data: &TrainingSet,
        eval_set: Option<&[(RssVolume, RssVolume)]>,
        out_dir: Option<&Path>,
        mut on_log: impl FnMut(&LogEntry),
    ) -> Result<TrainReport> {
        let mut initial_loss = None;
        let mut final_loss = 0.0;
        let start_iter = self.iter;
        while self.iter < self.cfg.max_iters {
            let t0 = Instant::now();
            let loss = self.step(data)?;
            initial_loss.get_or_insert(loss);
            final_loss = loss;
            let eval = match (eval_set, self.cfg.eval_every) {
                (Some(set), every) if every > 0 && self.iter % every == 0 => {
                    Some(metrics::evaluate(&self.model, set, self.cfg.eval_stride)?)
                }
                _ => None,
            };
            on_log(&LogEntry {
                iter: self.iter,
                loss,
                lr: self.adam.hyper.lr,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                eval,
            });
            if let (Some(dir), every) = (out_dir, self.cfg.checkpoint_every) {
                if every > 0 && self.iter % every == 0 {
                    self.save(&dir.join(format!("checkpoint_{:06}.prbt", self.iter)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.save(&dir.join("final.prbt"))?;
        }
        Ok(TrainReport {
            initial_loss: initial_loss.unwrap_or(0.0),
            final_loss,
            iters_run: self.iter - start_iter,
        })
    }

    /// Persist the full f64 training state.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(TRAINER_MAGIC)?;
        w.write_all(&TRAINER_VERSION.to_le_bytes())?;
        w.write_all(&self.iter.to_le_bytes())?;
        for word in self.rng.state() {
            w.write_all(&word.to_le_bytes())?;
        }
        w.write_all(&self.adam.step.to_le_bytes())?;
        w.write_all(&(self.model.values().len() as u32).to_le_bytes())?;
        for p in self.model.values() {
            write_f64_tensor(&mut w, p)?;
        }
        for m in &self.adam.m {
            write_f64_tensor(&mut w, m)?;
        }
        for v in &self.adam.v {
            write_f64_tensor(&mut w, v)?;
        }
        let meta = serde_json::json!({
            "train": self.cfg,
            "model": self.model.meta_json(),
            "hyper": self.adam.hyper,
        });
        let json = serde_json::to_vec(&meta)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        w.flush()?;
        Ok(())
    }

    /// Restore a trainer saved by [`Trainer::save`].
    pub fn load(path: &Path) -> Result<Trainer> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Truncated("while reading magic".into()))?;
        if &magic != TRAINER_MAGIC {
            return Err(Error::BadMagic {
                expected: "PRBPNT01",
                found: magic.to_vec(),
            });
        }
        let version = read_u32(&mut r)?;
        if version != TRAINER_VERSION {
            return Err(Error::UnsupportedVersion {
                format: "trainer checkpoint",
                version,
            });
        }
        let iter = read_u64(&mut r)?;
        let mut rng_state = [0u64; 5];
        for word in &mut rng_state {
            *word = read_u64(&mut r)?;
        }
        let adam_step = read_u64(&mut r)?;
        let n_params = read_u32(&mut r)? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            params.push(read_f64_tensor(&mut r)?);
        }
        let mut m = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            m.push(read_f64_tensor(&mut r)?);
        }
        let mut v = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            v.push(read_f64_tensor(&mut r)?);
        }
        let json_len = read_u32(&mut r)? as usize;
        let mut json = vec![0u8; json_len];
        r.read_exact(&mut json)
            .map_err(|_| Error::Truncated("while reading metadata".into()))?;
        let meta: serde_json::Value = serde_json::from_slice(&json)?;
        let cfg: TrainConfig = serde_json::from_value(meta["train"].clone())?;
        let hyper: AdamHyper = serde_json::from_value(meta["hyper"].clone())?;
        let model_meta = &meta["model"];
        let mut model = PrbpnModel::new(
            serde_json::from_value(model_meta["config"].clone())?,
            model_meta["seed"].as_u64().unwrap_or(0),
        )?;
        model.set_values(params)?;
        let mut adam = AdamState::new(model.values(), hyper);
        adam.m = m;
        adam.v = v;
        adam.step = adam_step;
        Ok(Trainer {
            model,
            adam,
            rng: Rng::from_state(rng_state),
            iter,
            cfg,
        })
    }
}

fn slice_tensor(a: &Array2<f32>) -> Tensor {
    let (h, w) = (a.shape()[0], a.shape()[1]);
    Tensor::from_shape_vec(
        IxDyn(&[1, 1, h, w]),
        a.iter().map(|&v| v as f64).collect(),
    )
    .expect("slice is contiguous")
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Truncated("u32 field".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Truncated("u64 field".into()))?;
    Ok(u64::from_le_bytes(b))
}
