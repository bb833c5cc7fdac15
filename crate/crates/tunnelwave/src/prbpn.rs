//! Recurrent back-projection super-resolution network for RSS slices.
//!
//! A window of 2n+1 coarse slices is reduced to one fine slice. The target
//! slice contributes features through a single-slice path; every neighbor
//! contributes through a multi-slice path built from pixel differences, with
//! an attention gate over those differences (difference-weighted temporal
//! fusion) emphasizing regions where the field actually evolves. A recurrent
//! cell lifts the running coarse state to a high-resolution state through a
//! learned up-projection, iteratively refines it against its own
//! back-projection (error feedback in the coarse domain, corrections
//! up-projected), then back-projects to update the coarse state for the next
//! neighbor. The collected high-resolution states are concatenated and
//! reduced by a reconstruction head.
//!
//! The ×8 scale uses the projection geometry kernel 12 / stride 8 /
//! padding 2, so coarse spatial dims map to exactly 8× on the way up and
//! back down with no resampling pre-stage.

use ndarray::{Array2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::tensor::{
    self, init_conv_transpose_weight, init_conv_weight, scalar_tensor, Rng, Tape, Tensor, Var,
};
use crate::{Error, Result};

/// Network hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrbpnConfig {
    /// Linear upscale factor between coarse and fine meshes.
    pub scale: usize,
    pub base_channels: usize,
    /// Residual blocks inside each projection net.
    pub resblocks_per_net: usize,
    /// Back-projection refinement iterations N.
    pub refine_iters: usize,
    /// Context radius n: the window holds 2n+1 slices.
    pub context_radius: usize,
    /// Weight of the smoothness penalty in the loss.
    pub beta: f64,
    /// Difference-weighted temporal fusion toggle (ablation switch).
    pub dwtf_enabled: bool,
}

impl Default for PrbpnConfig {
    fn default() -> Self {
        PrbpnConfig {
            scale: 8,
            base_channels: 32,
            resblocks_per_net: 3,
            refine_iters: 3,
            context_radius: 2,
            beta: 1e-4,
            dwtf_enabled: true,
        }
    }
}

impl PrbpnConfig {
    /// Projection kernel/stride/padding for the configured scale.
    pub fn projection_geometry(&self) -> Result<(usize, usize, usize)> {
        match self.scale {
            8 => Ok((12, 8, 2)),
            4 => Ok((8, 4, 2)),
            2 => Ok((6, 2, 2)),
            s => Err(Error::InvalidConfig(format!(
                "no projection geometry for scale {s} (supported: 2, 4, 8)"
            ))),
        }
    }

    pub fn window_len(&self) -> usize {
        2 * self.context_radius + 1
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    w: usize,
    b: usize,
    a: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct ResBlockIdx {
    c1: ConvIdx,
    c2: ConvIdx,
}

#[derive(Debug, Clone)]
struct ProjNetIdx {
    proj: ConvIdx,
    res: Vec<ResBlockIdx>,
}

#[derive(Debug, Clone)]
struct ModelIdx {
    feat_target: ConvIdx,
    feat_neighbor: ConvIdx,
    attn: ConvIdx,
    up: ProjNetIdx,
    down: ProjNetIdx,
    res_blocks: Vec<ResBlockIdx>,
    res_up: ConvIdx,
    recon: ConvIdx,
}

/// The complete set of network parameters in a canonical named order.
///
/// Weight tensor `i` in the canonical order is drawn from RNG stream `i`
/// split off the model seed; biases start at zero and PReLU slopes at 0.25.
#[derive(Debug, Clone)]
pub struct PrbpnModel {
    pub cfg: PrbpnConfig,
    pub seed: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
    idx: ModelIdx,
}

struct ParamBuilder {
    rng: Rng,
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamBuilder {
    fn push(&mut self, name: String, make: impl FnOnce(&mut Rng) -> Tensor) -> usize {
        let ordinal = self.values.len() as u64;
        let mut stream = self.rng.split(ordinal);
        self.values.push(make(&mut stream));
        self.names.push(name);
        self.values.len() - 1
    }

    fn conv(
        &mut self,
        name: &str,
        out_c: usize,
        in_c: usize,
        k: usize,
        prelu: bool,
    ) -> ConvIdx {
        let w = self.push(format!("{name}.w"), |rng| {
            init_conv_weight(rng, out_c, in_c, k, k)
        });
        let b = self.push(format!("{name}.b"), |_| tensor::zeros(&[out_c]));
        let a = prelu.then(|| self.push(format!("{name}.a"), |_| scalar_tensor(0.25)));
        ConvIdx { w, b, a }
    }

    fn conv_transpose(&mut self, name: &str, in_c: usize, out_c: usize, k: usize) -> ConvIdx {
        let w = self.push(format!("{name}.w"), |rng| {
            init_conv_transpose_weight(rng, in_c, out_c, k, k)
        });
        let b = self.push(format!("{name}.b"), |_| tensor::zeros(&[out_c]));
        let a = Some(self.push(format!("{name}.a"), |_| scalar_tensor(0.25)));
        ConvIdx { w, b, a }
    }

    fn resblocks(&mut self, name: &str, count: usize, c: usize) -> Vec<ResBlockIdx> {
        (0..count)
            .map(|i| ResBlockIdx {
                c1: self.conv(&format!("{name}.res{i}.c1"), c, c, 3, true),
                c2: self.conv(&format!("{name}.res{i}.c2"), c, c, 3, false),
            })
            .collect()
    }
}

impl PrbpnModel {
    pub fn new(cfg: PrbpnConfig, seed: u64) -> Result<PrbpnModel> {
        let (k, _, _) = cfg.projection_geometry()?;
        if cfg.base_channels == 0 {
            return Err(Error::InvalidConfig("base_channels must be >= 1".into()));
        }
        let c = cfg.base_channels;
        let mut pb = ParamBuilder {
            rng: Rng::seed_from(seed),
            names: Vec::new(),
            values: Vec::new(),
        };
        let feat_target = pb.conv("feat_target", c, 1, 3, true);
        let feat_neighbor = pb.conv("feat_neighbor", c, 3, 3, true);
        let attn = pb.conv("attn", 1, 1, 3, false);
        let up = ProjNetIdx {
            proj: pb.conv_transpose("up.proj", c, c, k),
            res: pb.resblocks("up", cfg.resblocks_per_net, c),
        };
        let down = ProjNetIdx {
            proj: pb.conv("down.proj", c, c, k, true),
            res: pb.resblocks("down", cfg.resblocks_per_net, c),
        };
        let res_blocks = pb.resblocks("residual", cfg.resblocks_per_net, c);
        let res_up = pb.conv_transpose("residual.up", c, c, k);
        let recon = pb.conv("recon", 1, cfg.window_len() * c, 3, false);
        Ok(PrbpnModel {
            cfg,
            seed,
            names: pb.names,
            values: pb.values,
            idx: ModelIdx {
                feat_target,
                feat_neighbor,
                attn,
                up,
                down,
                res_blocks,
                res_up,
                recon,
            },
        })
    }

    pub fn param_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn set_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "model has {} parameters, got {}",
                self.values.len(),
                values.len()
            )));
        }
        for (cur, new) in self.values.iter().zip(&values) {
            if cur.shape() != new.shape() {
                return Err(Error::Shape(format!(
                    "parameter shape {:?} vs {:?}",
                    cur.shape(),
                    new.shape()
                )));
            }
        }
        self.values = values;
        Ok(())
    }

    /// Named parameters in canonical order (for checkpoints).
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .collect()
    }

    /// Register every parameter as a leaf on `tape`.
    pub fn bind<'m>(&'m self, tape: &mut Tape) -> BoundModel<'m> {
        let vars = self
            .values
            .iter()
            .map(|v| tape.leaf(v.clone()))
            .collect();
        BoundModel {
            cfg: self.cfg,
            idx: &self.idx,
            vars,
        }
    }

    /// Run over parameter leaves that already live on a tape (the gradient
    /// checker owns its own leaves). `vars` must follow the canonical
    /// parameter order.
    pub fn bind_to_vars<'m>(&'m self, vars: &[Var]) -> BoundModel<'m> {
        BoundModel {
            cfg: self.cfg,
            idx: &self.idx,
            vars: vars.to_vec(),
        }
    }

    /// Checkpoint metadata carried next to the weights.
    pub fn meta_json(&self) -> serde_json::Value {
        serde_json::json!({ "config": self.cfg, "seed": self.seed })
    }

    /// Rebuild a model from checkpoint weights + metadata.
    pub fn from_named_params(
        params: Vec<(String, Tensor)>,
        meta: &serde_json::Value,
    ) -> Result<PrbpnModel> {
        let cfg: PrbpnConfig = serde_json::from_value(meta["config"].clone())?;
        let seed = meta["seed"].as_u64().unwrap_or(0);
        let mut model = PrbpnModel::new(cfg, seed)?;
        if params.len() != model.names.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} parameters, model expects {}",
                params.len(),
                model.names.len()
            )));
        }
        for (i, (name, value)) in params.into_iter().enumerate() {
            if name != model.names[i] {
                return Err(Error::Shape(format!(
                    "parameter {i} is named {name}, expected {}",
                    model.names[i]
                )));
            }
            if value.shape() != model.values[i].shape() {
                return Err(Error::Shape(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    model.values[i].shape()
                )));
            }
            model.values[i] = value;
        }
        Ok(model)
    }

    /// Single-sample inference: a window of 2n+1 normalized coarse slices
    /// (nx, ny) to one fine slice (8nx, 8ny). Values are unconstrained;
    /// clamp to [0, 1] only when exporting.
    pub fn infer(&self, window: &[Array2<f32>]) -> Result<Array2<f32>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let vars: Vec<Var> = window
            .iter()
            .map(|s| {
                let (h, w) = (s.shape()[0], s.shape()[1]);
                tape.leaf(
                    Tensor::from_shape_vec(
                        IxDyn(&[1, 1, h, w]),
                        s.iter().map(|&v| v as f64).collect(),
                    )
                    .expect("window slice is contiguous"),
                )
            })
            .collect();
        let sr = bound.forward(&mut tape, &vars)?;
        let out = tape.value(sr);
        let (h8, w8) = (out.shape()[2], out.shape()[3]);
        Ok(Array2::from_shape_fn((h8, w8), |(i, j)| {
            out[IxDyn(&[0, 0, i, j])] as f32
        }))
    }
}

/// Per-neighbor attention products of the fusion stage.
pub struct DwtfOutput {
    /// Attention-weighted difference heatmaps, one per neighbor (B,1,H,W).
    pub wdiffs: Vec<Var>,
    /// Neighbor features modulated by their weighted differences.
    pub modulated: Vec<Var>,
    /// Sum of the modulated features over all neighbors.
    pub fused: Var,
}

/// A model whose parameters live on a tape, ready to run.
pub struct BoundModel<'m> {
    cfg: PrbpnConfig,
    idx: &'m ModelIdx,
    vars: Vec<Var>,
}

impl<'m> BoundModel<'m> {
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    fn conv(&self, tape: &mut Tape, x: Var, c: ConvIdx, stride: usize, pad: usize) -> Result<Var> {
        let y = tape.conv2d(x, self.vars[c.w], self.vars[c.b], stride, pad)?;
        match c.a {
            Some(a) => tape.prelu(y, self.vars[a]),
            None => Ok(y),
        }
    }

    fn conv_t(&self, tape: &mut Tape, x: Var, c: ConvIdx, stride: usize, pad: usize) -> Result<Var> {
        let y = tape.conv_transpose2d(x, self.vars[c.w], self.vars[c.b], stride, pad)?;
        match c.a {
            Some(a) => tape.prelu(y, self.vars[a]),
            None => Ok(y),
        }
    }

    fn resblock(&self, tape: &mut Tape, x: Var, blk: &ResBlockIdx) -> Result<Var> {
        let y = self.conv(tape, x, blk.c1, 1, 1)?;
        let y = self.conv(tape, y, blk.c2, 1, 1)?;
        tape.add(x, y)
    }

    fn resblocks(&self, tape: &mut Tape, mut x: Var, blocks: &[ResBlockIdx]) -> Result<Var> {
        for blk in blocks {
            x = self.resblock(tape, x, blk)?;
        }
        Ok(x)
    }

    /// Target path: 3x3 ConvBlock + PReLU, coarse dims preserved.
    pub fn extract_target(&self, tape: &mut Tape, i_t: Var) -> Result<Var> {
        self.conv(tape, i_t, self.idx.feat_target, 1, 1)
    }

    /// Neighbor path: |I_t - I_k| plus a ConvBlock over [I_t, I_k, diff].
    /// Returns (diff, features).
    pub fn neighbor_features(&self, tape: &mut Tape, i_t: Var, i_k: Var) -> Result<(Var, Var)> {
        let delta = tape.sub(i_t, i_k)?;
        let diff = tape.abs(delta);
        let stacked = tape.concat_channels(&[i_t, i_k, diff])?;
        let feats = self.conv(tape, stacked, self.idx.feat_neighbor, 1, 1)?;
        Ok((diff, feats))
    }

    /// Attention over pixel differences: heat = channel mean of |I_t - I_k|,
    /// gate = sigmoid(conv3x3(heat)), wdiff = gate ⊙ heat; neighbor features
    /// are modulated by their wdiff and the results summed.
    pub fn dwtf(&self, tape: &mut Tape, i_t: Var, neighbors: &[Var]) -> Result<DwtfOutput> {
        if neighbors.is_empty() {
            return Err(Error::InvalidConfig(
                "temporal fusion needs at least one neighbor slice".into(),
            ));
        }
        let mut wdiffs = Vec::with_capacity(neighbors.len());
        let mut modulated = Vec::with_capacity(neighbors.len());
        for &i_k in neighbors {
            let (diff, feats) = self.neighbor_features(tape, i_t, i_k)?;
            let (wdiff, gated) = self.modulate(tape, diff, feats)?;
            wdiffs.push(wdiff);
            modulated.push(gated);
        }
        let mut fused = modulated[0];
        for &m in &modulated[1..] {
            fused = tape.add(fused, m)?;
        }
        Ok(DwtfOutput {
            wdiffs,
            modulated,
            fused,
        })
    }

    fn modulate(&self, tape: &mut Tape, diff: Var, feats: Var) -> Result<(Var, Var)> {
        let heat = tape.channel_mean(diff)?;
        let logits = self.conv(tape, heat, self.idx.attn, 1, 1)?;
        let gate = tape.sigmoid(logits);
        let wdiff = tape.mul(gate, heat)?;
        let gated = tape.mul_chan_broadcast(feats, wdiff)?;
        Ok((wdiff, gated))
    }

    /// Learned coarse-to-fine lift: transposed projection conv + PReLU +
    /// residual blocks. Spatial dims multiply by the scale factor exactly.
    pub fn up_project(&self, tape: &mut Tape, lr: Var) -> Result<Var> {
        let (_, s, p) = self.cfg.projection_geometry()?;
        let h = self.conv_t(tape, lr, self.idx.up.proj, s, p)?;
        self.resblocks(tape, h, &self.idx.up.res)
    }

    /// Learned fine-to-coarse projection, the inverse geometry of
    /// [`BoundModel::up_project`].
    pub fn back_project(&self, tape: &mut Tape, hr: Var) -> Result<Var> {
        let (_, s, p) = self.cfg.projection_geometry()?;
        let l = self.conv(tape, hr, self.idx.down.proj, s, p)?;
        self.resblocks(tape, l, &self.idx.down.res)
    }

    fn residual_correction(&self, tape: &mut Tape, e_lr: Var) -> Result<Var> {
        let (_, s, p) = self.cfg.projection_geometry()?;
        let r = self.resblocks(tape, e_lr, &self.idx.res_blocks)?;
        self.conv_t(tape, r, self.idx.res_up, s, p)
    }

    /// Iterative error feedback: N times, compare the back-projected state
    /// with the coarse reference, refine the residual in the coarse domain
    /// and add the up-projected correction back onto the state.
    pub fn refine(&self, tape: &mut Tape, mut h: Var, l_ref: Var, iters: usize) -> Result<Var> {
        for _ in 0..iters {
            let l_hat = self.back_project(tape, h)?;
            let e_lr = tape.sub(l_ref, l_hat)?;
            let correction = self.residual_correction(tape, e_lr)?;
            h = tape.add(h, correction)?;
        }
        Ok(h)
    }

    /// Full multi-slice forward pass: window of 2n+1 coarse slices
    /// (B, 1, h, w) to one fine slice (B, 1, scale*h, scale*w).
    pub fn forward(&self, tape: &mut Tape, window: &[Var]) -> Result<Var> {
        let n = self.cfg.context_radius;
        if window.len() != 2 * n + 1 {
            return Err(Error::Shape(format!(
                "window holds {} slices, config expects {}",
                window.len(),
                2 * n + 1
            )));
        }
        let i_t = window[n];
        let l_t = self.extract_target(tape, i_t)?;

        // The target's own high-resolution state.
        let h_self = self.up_project(tape, l_t)?;
        let h_self = self.refine(tape, h_self, l_t, self.cfg.refine_iters)?;
        let mut states = vec![h_self];

        // Causal neighbors nearest-last, then anticausal: t-n..t-1, t+1..t+n.
        let order = (0..n).chain(n + 1..2 * n + 1);
        let mut l_cur = l_t;
        for k in order {
            let (diff, feats) = self.neighbor_features(tape, i_t, window[k])?;
            let feats = if self.cfg.dwtf_enabled {
                let (_, gated) = self.modulate(tape, diff, feats)?;
                gated
            } else {
                feats
            };
            let cell_in = tape.add(l_cur, feats)?;
            let h = self.up_project(tape, cell_in)?;
            let h = self.refine(tape, h, cell_in, self.cfg.refine_iters)?;
            l_cur = self.back_project(tape, h)?;
            states.push(h);
        }

        let stacked = tape.concat_channels(&states)?;
        self.conv(tape, stacked, self.idx.recon, 1, 1)
    }
}

/// Training objective: mean absolute reconstruction error plus a weighted
/// mean |forward difference| smoothness penalty on the prediction.
pub fn loss(tape: &mut Tape, sr: Var, hr: Var, beta: f64) -> Result<Var> {
    let err = tape.sub(sr, hr)?;
    let abs_err = tape.abs(err);
    let rec = tape.mean_all(abs_err);
    let smooth = tape.tv_l1(sr)?;
    let weighted = tape.scale(smooth, beta);
    tape.add(rec, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn toy_cfg() -> PrbpnConfig {
        PrbpnConfig {
            scale: 8,
            base_channels: 2,
            resblocks_per_net: 1,
            refine_iters: 1,
            context_radius: 1,
            beta: 1e-4,
            dwtf_enabled: true,
        }
    }

    fn random_slice(rng: &mut Rng, b: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_shape_fn(IxDyn(&[b, 1, h, w]), |_| rng.uniform(0.0, 1.0))
    }

    #[test]
    fn shape_law() {
        let model = PrbpnModel::new(
            PrbpnConfig {
                base_channels: 4,
                resblocks_per_net: 1,
                refine_iters: 1,
                context_radius: 2,
                ..PrbpnConfig::default()
            },
            1,
        )
        .unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let mut rng = Rng::seed_from(2);
        let window: Vec<Var> = (0..5)
            .map(|_| tape.leaf(random_slice(&mut rng, 1, 3, 3)))
            .collect();
        let sr = bound.forward(&mut tape, &window).unwrap();
        assert_eq!(tape.value(sr).shape(), &[1, 1, 24, 24]);
        // The reconstruction head consumed (2n+1) * C channels.
        let recon_w = &model.values()[model.idx.recon.w];
        assert_eq!(recon_w.shape(), &[1, 5 * 4, 3, 3]);
    }

    #[test]
    fn window_length_must_match() {
        let model = PrbpnModel::new(toy_cfg(), 3).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let mut rng = Rng::seed_from(4);
        let window: Vec<Var> = (0..5)
            .map(|_| tape.leaf(random_slice(&mut rng, 1, 3, 3)))
            .collect();
        assert!(bound.forward(&mut tape, &window).is_err());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let model = PrbpnModel::new(toy_cfg(), 5).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let zero = tape.leaf(tensor::zeros(&[1, 1, 4, 4]));
        let l = bound.extract_target(&mut tape, zero).unwrap();
        assert!(tape.value(l).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn neighbor_diff_properties() {
        let model = PrbpnModel::new(toy_cfg(), 6).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let mut rng = Rng::seed_from(7);
        let i_t = tape.leaf(random_slice(&mut rng, 2, 4, 5));
        let i_k = tape.leaf(random_slice(&mut rng, 2, 4, 5));
        let (diff, _) = bound.neighbor_features(&mut tape, i_t, i_k).unwrap();
        assert!(tape.value(diff).iter().all(|&v| v >= 0.0));
        // Identical neighbor: all-zero differences.
        let (diff0, _) = bound.neighbor_features(&mut tape, i_t, i_t).unwrap();
        assert!(tape.value(diff0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dwtf_gate_range_and_null_property() {
        let model = PrbpnModel::new(toy_cfg(), 8).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let mut rng = Rng::seed_from(9);
        let i_t = tape.leaf(random_slice(&mut rng, 1, 6, 6));
        let i_k = tape.leaf(random_slice(&mut rng, 1, 6, 6));
        let out = bound.dwtf(&mut tape, i_t, &[i_k, i_t]).unwrap();
        // Weighted differences of an identical neighbor vanish exactly,
        // regardless of the attention weights.
        assert!(tape.value(out.wdiffs[1]).iter().all(|&v| v == 0.0));
        assert!(tape.value(out.modulated[1]).iter().all(|&v| v == 0.0));
        // Gate stays strictly inside (0, 1): reconstruct it from wdiff/heat.
        let heat = tape.value(out.wdiffs[0]).clone();
        let raw_diff = {
            let mut t2 = Tape::new();
            let b2 = model.bind(&mut t2);
            let a = t2.leaf(tape.value(i_t).clone());
            let b = t2.leaf(tape.value(i_k).clone());
            let (d, _) = b2.neighbor_features(&mut t2, a, b).unwrap();
            t2.value(d).clone()
        };
        for (&wd, &d) in heat.iter().zip(raw_diff.iter()) {
            if d > 0.0 {
                let gate = wd / d;
                assert!(gate > 0.0 && gate < 1.0, "gate {gate} out of range");
            }
        }
        // Empty neighbor list is rejected.
        assert!(bound.dwtf(&mut tape, i_t, &[]).is_err());
    }

    #[test]
    fn projection_round_trip_shapes() {
        let model = PrbpnModel::new(toy_cfg(), 10).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let mut rng = Rng::seed_from(11);
        let lr = tape.leaf(Tensor::from_shape_fn(IxDyn(&[1, 2, 3, 3]), |_| {
            rng.uniform(-1.0, 1.0)
        }));
        let hr = bound.up_project(&mut tape, lr).unwrap();
        assert_eq!(tape.value(hr).shape(), &[1, 2, 24, 24]);
        let back = bound.back_project(&mut tape, hr).unwrap();
        assert_eq!(tape.value(back).shape(), &[1, 2, 3, 3]);
        // Zero features stay zero through both projections (zero biases).
        let zero = tape.leaf(tensor::zeros(&[1, 2, 3, 3]));
        let up = bound.up_project(&mut tape, zero).unwrap();
        assert!(tape.value(up).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn refine_identities() {
        let mut model = PrbpnModel::new(toy_cfg(), 12).unwrap();
        let mut rng = Rng::seed_from(13);
        // Zero out the residual net: refinement must be the identity.
        for (name, value) in model.names.clone().iter().zip(model.values_mut()) {
            if name.starts_with("residual") {
                value.fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let lr = tape.leaf(Tensor::from_shape_fn(IxDyn(&[1, 2, 3, 3]), |_| {
            rng.uniform(-1.0, 1.0)
        }));
        let h = bound.up_project(&mut tape, lr).unwrap();
        let refined = bound.refine(&mut tape, h, lr, 4).unwrap();
        assert_eq!(tape.value(refined), tape.value(h));
        // N = 0 never touches the state, zeroed or not.
        let fresh = PrbpnModel::new(toy_cfg(), 14).unwrap();
        let mut t2 = Tape::new();
        let b2 = fresh.bind(&mut t2);
        let lr2 = t2.leaf(Tensor::from_shape_fn(IxDyn(&[1, 2, 3, 3]), |_| {
            rng.uniform(-1.0, 1.0)
        }));
        let h2 = b2.up_project(&mut t2, lr2).unwrap();
        let same = b2.refine(&mut t2, h2, lr2, 0).unwrap();
        assert_eq!(same, h2);
    }

    #[test]
    fn forward_is_deterministic() {
        let model = PrbpnModel::new(toy_cfg(), 15).unwrap();
        let mut rng = Rng::seed_from(16);
        let slices: Vec<Tensor> = (0..3).map(|_| random_slice(&mut rng, 1, 4, 4)).collect();
        let run = || {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let vars: Vec<Var> = slices.iter().map(|s| tape.leaf(s.clone())).collect();
            let sr = bound.forward(&mut tape, &vars).unwrap();
            tape.value(sr).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ablation_toggles_only_modulation() {
        let enabled = PrbpnModel::new(toy_cfg(), 17).unwrap();
        let disabled = PrbpnModel::new(
            PrbpnConfig {
                dwtf_enabled: false,
                ..toy_cfg()
            },
            17,
        )
        .unwrap();
        assert_eq!(enabled.param_count(), disabled.param_count());
        assert_eq!(enabled.names(), disabled.names());
        for (a, b) in enabled.values().iter().zip(disabled.values()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn loss_examples() {
        let mut rng = Rng::seed_from(18);
        let hr = random_slice(&mut rng, 1, 6, 6);
        let beta = 1e-4;

        // SR = HR: only the smoothness term survives.
        let mut tape = Tape::new();
        let a = tape.leaf(hr.clone());
        let b = tape.leaf(hr.clone());
        let l = loss(&mut tape, a, b, beta).unwrap();
        let tv = tape.tv_l1(a).unwrap();
        let expected = beta * tape.scalar_value(tv).unwrap();
        assert!((tape.scalar_value(l).unwrap() - expected).abs() < 1e-15);

        // Constant prediction: zero smoothness.
        let mut tape = Tape::new();
        let c = tape.leaf(Tensor::from_elem(IxDyn(&[1, 1, 6, 6]), 0.4));
        let t = tape.leaf(hr.clone());
        let l = loss(&mut tape, c, t, beta).unwrap();
        let just_rec = {
            let d = tape.sub(c, t).unwrap();
            let a = tape.abs(d);
            let m = tape.mean_all(a);
            tape.scalar_value(m).unwrap()
        };
        assert!((tape.scalar_value(l).unwrap() - just_rec).abs() < 1e-15);

        // A constant offset of 0.1 gives a reconstruction term of exactly 0.1.
        let mut tape = Tape::new();
        let t = tape.leaf(hr.clone());
        let shifted = tape.leaf(hr.mapv(|v| v + 0.1));
        let err = tape.sub(shifted, t).unwrap();
        let abs_err = tape.abs(err);
        let rec = tape.mean_all(abs_err);
        assert!((tape.scalar_value(rec).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_model() {
        let model = PrbpnModel::new(toy_cfg(), 19).unwrap();
        let restored =
            PrbpnModel::from_named_params(model.named_params(), &model.meta_json()).unwrap();
        assert_eq!(model.cfg, restored.cfg);
        for (a, b) in model.values().iter().zip(restored.values()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn quick_composite_gradient_check() {
        // Small smoke version; the acceptance suite runs the full-size one.
        let cfg = PrbpnConfig {
            scale: 8,
            base_channels: 1,
            resblocks_per_net: 1,
            refine_iters: 1,
            context_radius: 1,
            beta: 1e-3,
            dwtf_enabled: true,
        };
        let model = PrbpnModel::new(cfg, 20).unwrap();
        let mut rng = Rng::seed_from(21);
        let window: Vec<Tensor> = (0..3).map(|_| random_slice(&mut rng, 1, 2, 2)).collect();
        let hr = random_slice(&mut rng, 1, 16, 16);
        let inputs: Vec<Tensor> = model.values().to_vec();
        let err = grad_check(
            |tape, vars| {
                // The checker owns the parameter leaves; run the network
                // directly over them.
                let bound = model.bind_to_vars(vars);
                let w: Vec<Var> = window.iter().map(|s| tape.leaf(s.clone())).collect();
                let sr = bound.forward(tape, &w)?;
                let hr_v = tape.leaf(hr.clone());
                loss(tape, sr, hr_v, cfg.beta)
            },
            &inputs,
            tensor::DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "composite gradient error {err}");
    }
}
