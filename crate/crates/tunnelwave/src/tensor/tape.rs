//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and the identities of
//! its parents; node indices are therefore already a topological order and
//! `backward` is a single reverse sweep. A tape belongs to one logical task:
//! build the forward pass, call [`Tape::backward`] on a scalar, read the
//! gradients off by [`Var`]. All operations are pure with respect to their
//! inputs and single-threaded, so repeated evaluation is bit-identical.

use ndarray::{Array1, ArrayD, Axis, IxDyn};

use super::conv;
use crate::{Error, Result};

/// Dense real tensor; data is row-major, 4-D (batch, channels, h, w) for
/// image-like values and length-1 for scalars.
pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Prelu { x: Var, a: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulChanBroadcast { x: Var, gate: Var },
    Abs { x: Var },
    ChannelMean { x: Var },
    ConcatChannels { xs: Vec<Var> },
    SumAll { x: Var },
    MeanAll { x: Var },
    Scale { x: Var, factor: f64 },
    /// Mean absolute forward difference along both spatial axes.
    TvL1 { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of every tape node after a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`; untouched variables yield zeros of `shape`.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(IxDyn(shape)),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn scalar(v: f64) -> Tensor {
    Tensor::from_shape_vec(IxDyn(&[1]), vec![v]).expect("scalar")
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input (parameter or data) node.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a length-1 node as a plain f64.
    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let t = self.value(v);
        if t.len() != 1 {
            return Err(Error::NonScalar(format!("node has shape {:?}", t.shape())));
        }
        Ok(t.iter().copied().next().unwrap())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn bias1(&self, b: Var) -> Result<Array1<f64>> {
        let t = self.value(b);
        t.view()
            .into_dimensionality()
            .map(|v: ndarray::ArrayView1<f64>| v.to_owned())
            .map_err(|_| Error::Shape(format!("bias must be 1-D, got {:?}", t.shape())))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let bias = self.bias1(b)?;
        let xv = self.value(x).view();
        let wv = self.value(w).view();
        let out = conv::conv2d_forward(
            &conv::view4(&xv, "conv2d input")?,
            &conv::view4(&wv, "conv2d weights")?,
            &bias,
            stride,
            pad,
        )?;
        Ok(self.push(out.into_dyn(), Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let bias = self.bias1(b)?;
        let xv = self.value(x).view();
        let wv = self.value(w).view();
        let out = conv::conv_transpose2d_forward(
            &conv::view4(&xv, "conv_transpose2d input")?,
            &conv::view4(&wv, "conv_transpose2d weights")?,
            &bias,
            stride,
            pad,
        )?;
        Ok(self.push(out.into_dyn(), Op::ConvTranspose2d { x, w, b, stride, pad }))
    }

    /// PReLU with one learnable slope per layer: `y = x if x >= 0 else a*x`.
    pub fn prelu(&mut self, x: Var, a: Var) -> Result<Var> {
        if self.value(a).len() != 1 {
            return Err(Error::Shape(format!(
                "prelu slope must be a scalar, got {:?}",
                self.value(a).shape()
            )));
        }
        let slope = self.value(a)[IxDyn(&[0])];
        let out = self
            .value(x)
            .mapv(|v| if v >= 0.0 { v } else { slope * v });
        Ok(self.push(out, Op::Prelu { x, a }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.push(out, Op::Sigmoid { x })
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what} operands differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// Multiply (B, C, H, W) features by a (B, 1, H, W) gate, broadcast
    /// across channels.
    pub fn mul_chan_broadcast(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let gs = self.value(gate).shape().to_vec();
        if xs.len() != 4 || gs.len() != 4 || gs[1] != 1 || xs[0] != gs[0] || xs[2..] != gs[2..] {
            return Err(Error::Shape(format!(
                "broadcast multiply expects (B,C,H,W) x (B,1,H,W), got {xs:?} x {gs:?}"
            )));
        }
        let g = self.value(gate).clone();
        let out = self.value(x) * &g.broadcast(IxDyn(&xs)).unwrap();
        Ok(self.push(out, Op::MulChanBroadcast { x, gate }))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::abs);
        self.push(out, Op::Abs { x })
    }

    /// Mean across the channel axis of a (B, C, H, W) value -> (B, 1, H, W).
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!(
                "channel_mean expects 4-D input, got {shape:?}"
            )));
        }
        let mean = self
            .value(x)
            .mean_axis(Axis(1))
            .expect("non-empty channel axis")
            .insert_axis(Axis(1));
        Ok(self.push(mean, Op::ChannelMean { x }))
    }

    /// Concatenate (B, C_i, H, W) values along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let views: Vec<_> = xs.iter().map(|&v| self.value(v).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::Shape(format!("concat: {e}")))?;
        Ok(self.push(out, Op::ConcatChannels { xs: xs.to_vec() }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(scalar(s), Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let m = self.value(x).sum() / self.value(x).len() as f64;
        self.push(scalar(m), Op::MeanAll { x })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).mapv(|v| v * factor);
        self.push(out, Op::Scale { x, factor })
    }

    /// Mean |forward difference| of a (B, C, H, W) value over both spatial
    /// axes; the trailing row/column has no forward neighbor and is excluded.
    pub fn tv_l1(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("tv_l1 expects 4-D input, got {shape:?}")));
        }
        let (nb, nc, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let count = nb * nc * (h * (w - 1) + (h - 1) * w);
        if count == 0 {
            return Ok(self.push(scalar(0.0), Op::TvL1 { x }));
        }
        let mut acc = 0.0;
        for b in 0..nb {
            for c in 0..nc {
                for i in 0..h {
                    for j in 0..w {
                        if j + 1 < w {
                            acc += (v[IxDyn(&[b, c, i, j + 1])] - v[IxDyn(&[b, c, i, j])]).abs();
                        }
                        if i + 1 < h {
                            acc += (v[IxDyn(&[b, c, i + 1, j])] - v[IxDyn(&[b, c, i, j])]).abs();
                        }
                    }
                }
            }
        }
        Ok(self.push(scalar(acc / count as f64), Op::TvL1 { x }))
    }

    /// Reverse sweep from a scalar loss. Returns per-node gradients;
    /// leaves the loss does not reach have no gradient entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_val = self.value(loss);
        if loss_val.len() != 1 {
            return Err(Error::NonScalar(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.accumulate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn add_into(grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
        match &mut grads[v.0] {
            Some(existing) => *existing += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }

    fn accumulate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = self.value(*x).view();
                let wv = self.value(*w).view();
                let gv = g.view();
                let cg = conv::conv2d_backward(
                    &conv::view4(&xv, "conv2d input")?,
                    &conv::view4(&wv, "conv2d weights")?,
                    &conv::view4(&gv, "conv2d gradient")?,
                    *stride,
                    *pad,
                )?;
                Self::add_into(grads, *x, cg.x.into_dyn());
                Self::add_into(grads, *w, cg.w.into_dyn());
                Self::add_into(grads, *b, cg.b.into_dyn());
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let xv = self.value(*x).view();
                let wv = self.value(*w).view();
                let gv = g.view();
                let cg = conv::conv_transpose2d_backward(
                    &conv::view4(&xv, "conv_transpose2d input")?,
                    &conv::view4(&wv, "conv_transpose2d weights")?,
                    &conv::view4(&gv, "conv_transpose2d gradient")?,
                    *stride,
                    *pad,
                )?;
                Self::add_into(grads, *x, cg.x.into_dyn());
                Self::add_into(grads, *w, cg.w.into_dyn());
                Self::add_into(grads, *b, cg.b.into_dyn());
            }
            Op::Prelu { x, a } => {
                let slope = self.value(*a)[IxDyn(&[0])];
                let xv = self.value(*x);
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx).and(xv).for_each(|gi, &vi| {
                    if vi < 0.0 {
                        *gi *= slope;
                    }
                });
                let mut ga = 0.0;
                ndarray::Zip::from(g).and(xv).for_each(|&gi, &vi| {
                    if vi < 0.0 {
                        ga += gi * vi;
                    }
                });
                Self::add_into(grads, *x, gx);
                Self::add_into(grads, *a, scalar(ga));
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[idx].value;
                let gx = g * &y.mapv(|v| v * (1.0 - v));
                Self::add_into(grads, *x, gx);
            }
            Op::Add { a, b } => {
                Self::add_into(grads, *a, g.clone());
                Self::add_into(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                Self::add_into(grads, *a, g.clone());
                Self::add_into(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul { a, b } => {
                Self::add_into(grads, *a, g * self.value(*b));
                Self::add_into(grads, *b, g * self.value(*a));
            }
            Op::MulChanBroadcast { x, gate } => {
                let xs = self.value(*x).shape().to_vec();
                let gate_val = self.value(*gate);
                let gx = g * &gate_val.broadcast(IxDyn(&xs)).unwrap();
                let gg = (g * self.value(*x))
                    .sum_axis(Axis(1))
                    .insert_axis(Axis(1));
                Self::add_into(grads, *x, gx);
                Self::add_into(grads, *gate, gg);
            }
            Op::Abs { x } => {
                let gx = g * &self.value(*x).mapv(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                Self::add_into(grads, *x, gx);
            }
            Op::ChannelMean { x } => {
                let xs = self.value(*x).shape().to_vec();
                let c = xs[1] as f64;
                let gx = (g / c).broadcast(IxDyn(&xs)).unwrap().to_owned();
                Self::add_into(grads, *x, gx);
            }
            Op::ConcatChannels { xs } => {
                let mut offset = 0;
                for &v in xs {
                    let c = self.value(v).shape()[1];
                    let part = g
                        .slice_axis(Axis(1), ndarray::Slice::from(offset..offset + c))
                        .to_owned();
                    Self::add_into(grads, v, part);
                    offset += c;
                }
            }
            Op::SumAll { x } => {
                let seed = g[IxDyn(&[0])];
                let gx = Tensor::from_elem(self.value(*x).raw_dim(), seed);
                Self::add_into(grads, *x, gx);
            }
            Op::MeanAll { x } => {
                let seed = g[IxDyn(&[0])] / self.value(*x).len() as f64;
                let gx = Tensor::from_elem(self.value(*x).raw_dim(), seed);
                Self::add_into(grads, *x, gx);
            }
            Op::Scale { x, factor } => {
                Self::add_into(grads, *x, g.mapv(|v| v * factor));
            }
            Op::TvL1 { x } => {
                let v = self.value(*x);
                let shape = v.shape().to_vec();
                let (nb, nc, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let count = nb * nc * (h * (w - 1) + (h - 1) * w);
                if count == 0 {
                    return Ok(());
                }
                let seed = g[IxDyn(&[0])] / count as f64;
                let mut gx = Tensor::zeros(v.raw_dim());
                let sign = |d: f64| {
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                for b in 0..nb {
                    for c in 0..nc {
                        for i in 0..h {
                            for j in 0..w {
                                let here = IxDyn(&[b, c, i, j]);
                                if j + 1 < w {
                                    let next = IxDyn(&[b, c, i, j + 1]);
                                    let s = sign(v[next.clone()] - v[here.clone()]) * seed;
                                    gx[next] += s;
                                    gx[here.clone()] -= s;
                                }
                                if i + 1 < h {
                                    let next = IxDyn(&[b, c, i + 1, j]);
                                    let s = sign(v[next.clone()] - v[here.clone()]) * seed;
                                    gx[next] += s;
                                    gx[here] -= s;
                                }
                            }
                        }
                    }
                }
                Self::add_into(grads, *x, gx);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn t4(shape: (usize, usize, usize, usize), data: Vec<f64>) -> Tensor {
        Array4::from_shape_vec(shape, data).unwrap().into_dyn()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t4((1, 1, 2, 3), vec![1.0, -2.0, 3.0, 0.5, -0.5, 2.0]));
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn unit_conv_grad_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t4((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(t4((1, 1, 1, 1), vec![1.0]));
        let b = tape.leaf(Tensor::zeros(IxDyn(&[1])));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().iter().all(|&g| g == 1.0));
        assert_eq!(grads.get(w).unwrap()[IxDyn(&[0, 0, 0, 0])], 10.0);
        assert_eq!(grads.get(b).unwrap()[IxDyn(&[0])], 4.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t4((1, 1, 2, 2), vec![1.0; 4]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalar(_))));
    }

    #[test]
    fn prelu_values_and_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(t4((1, 1, 1, 2), vec![2.0, -2.0]));
        let a = tape.leaf(scalar(0.25));
        let y = tape.prelu(x, a).unwrap();
        assert_eq!(tape.value(y)[IxDyn(&[0, 0, 0, 0])], 2.0);
        assert_eq!(tape.value(y)[IxDyn(&[0, 0, 0, 1])], -0.5);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        // d/da is 0 at x = 2 and -2 at x = -2.
        assert_eq!(grads.get(a).unwrap()[IxDyn(&[0])], -2.0);
        let gx = grads.get(x).unwrap();
        assert_eq!(gx[IxDyn(&[0, 0, 0, 0])], 1.0);
        assert_eq!(gx[IxDyn(&[0, 0, 0, 1])], 0.25);
    }

    #[test]
    fn sigmoid_is_stable_and_smooth() {
        let mut tape = Tape::new();
        let x = tape.leaf(t4((1, 1, 1, 3), vec![0.0, 40.0, -40.0]));
        let y = tape.sigmoid(x);
        let v = tape.value(y);
        assert_eq!(v[IxDyn(&[0, 0, 0, 0])], 0.5);
        assert!((v[IxDyn(&[0, 0, 0, 1])] - 1.0).abs() < 1e-15);
        assert!(v[IxDyn(&[0, 0, 0, 2])] < 1e-15);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert!((grads.get(x).unwrap()[IxDyn(&[0, 0, 0, 0])] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn concat_splits_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t4((1, 1, 1, 2), vec![1.0, 2.0]));
        let b = tape.leaf(t4((1, 2, 1, 2), vec![3.0, 4.0, 5.0, 6.0]));
        let cat = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(cat).shape(), &[1, 3, 1, 2]);
        let s = tape.sum_all(cat);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().len(), 2);
        assert_eq!(grads.get(b).unwrap().len(), 4);
    }

    #[test]
    fn channel_mean_of_single_channel_is_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(t4((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]));
        let m = tape.channel_mean(a).unwrap();
        assert_eq!(tape.value(m), tape.value(a));
    }

    #[test]
    fn tv_of_constant_is_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_elem(IxDyn(&[1, 1, 3, 4]), 0.7));
        let tv = tape.tv_l1(a).unwrap();
        assert_eq!(tape.scalar_value(tv).unwrap(), 0.0);
    }

    #[test]
    fn untouched_leaf_has_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t4((1, 1, 1, 1), vec![2.0]));
        let unused = tape.leaf(t4((1, 1, 1, 1), vec![5.0]));
        let loss = tape.sum_all(a);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert!(grads
            .get_or_zeros(unused, &[1, 1, 1, 1])
            .iter()
            .all(|&g| g == 0.0));
    }
}
