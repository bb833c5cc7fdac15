//! Minimal differentiable tensor engine.
//!
//! Covers exactly the operations the reconstruction network needs — dense
//! 2-D convolution and its transpose, PReLU, sigmoid, elementwise algebra,
//! channel reductions and concatenation — with reverse-mode gradients on a
//! linear tape, a finite-difference checker, an Adam optimizer and a fully
//! specified RNG so weight draws reproduce across implementations.
//!
//! Training arithmetic is `f64` throughout so gradient checks are
//! meaningful; persisted weights are `f32` (see [`checkpoint`]).

pub mod adam;
pub mod check;
pub mod checkpoint;
mod conv;
pub mod rng;
mod tape;

pub use adam::{AdamHyper, AdamState};
pub use check::{analytic_grads, grad_check, DEFAULT_STEP};
pub use conv::{conv_out_dim, conv_transpose_out_dim};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Tensor, Var};

use ndarray::IxDyn;

/// Fan-in-scaled uniform init: bound = sqrt(1 / (in_c * kh * kw)).
pub fn init_conv_weight(
    rng: &mut Rng,
    out_c: usize,
    in_c: usize,
    kh: usize,
    kw: usize,
) -> Tensor {
    let bound = (1.0 / (in_c * kh * kw) as f64).sqrt();
    Tensor::from_shape_fn(IxDyn(&[out_c, in_c, kh, kw]), |_| {
        rng.uniform(-bound, bound)
    })
}

/// Transposed-conv weight (in_c, out_c, kh, kw), same fan-in scaling.
pub fn init_conv_transpose_weight(
    rng: &mut Rng,
    in_c: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
) -> Tensor {
    let bound = (1.0 / (in_c * kh * kw) as f64).sqrt();
    Tensor::from_shape_fn(IxDyn(&[in_c, out_c, kh, kw]), |_| {
        rng.uniform(-bound, bound)
    })
}

pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(IxDyn(shape))
}

pub fn scalar_tensor(v: f64) -> Tensor {
    Tensor::from_shape_vec(IxDyn(&[1]), vec![v]).expect("scalar")
}
