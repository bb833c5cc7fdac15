//! Dense convolution kernels: im2col / col2im plus matrix products.
//!
//! `conv2d` is plain cross-correlation with zero padding. The transposed
//! convolution is implemented as the exact adjoint of `conv2d` with the same
//! weight tensor, sharing these kernels, so the inner-product identity
//! `<conv(x), y> == <x, conv_t(y)>` holds to rounding error by construction.

use ndarray::{Array1, Array2, Array4, ArrayView4, ArrayViewD};

use crate::{Error, Result};

pub(crate) fn view4<'a>(a: &'a ArrayViewD<'a, f64>, what: &str) -> Result<ArrayView4<'a, f64>> {
    a.view()
        .into_dimensionality()
        .map_err(|_| Error::Shape(format!("{what} must be 4-D, got {:?}", a.shape())))
}

/// Output spatial size of a conv: (dim + 2p - k) / s + 1, exact division.
pub fn conv_out_dim(dim: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = (dim + 2 * pad)
        .checked_sub(k)
        .ok_or_else(|| Error::Shape(format!("kernel {k} larger than padded input {dim}+2*{pad}")))?;
    if span % stride != 0 {
        return Err(Error::Shape(format!(
            "non-integral output dim: ({dim} + 2*{pad} - {k}) not divisible by stride {stride}"
        )));
    }
    Ok(span / stride + 1)
}

/// Output spatial size of a transposed conv: (dim - 1) * s - 2p + k.
pub fn conv_transpose_out_dim(dim: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let grown = (dim - 1) * stride + k;
    grown
        .checked_sub(2 * pad)
        .filter(|&v| v > 0)
        .ok_or_else(|| {
            Error::Shape(format!(
                "transposed conv output dim ({dim}-1)*{stride} - 2*{pad} + {k} is not positive"
            ))
        })
}

/// Gather sliding windows of one (C, H, W) item into (C*kh*kw, Ho*Wo).
fn im2col(
    x: &ArrayView4<f64>,
    b: usize,
    k: (usize, usize),
    stride: usize,
    pad: usize,
    out: (usize, usize),
) -> Array2<f64> {
    let (_, c_in, h, w) = x.dim();
    let (kh, kw) = k;
    let (ho, wo) = out;
    let mut cols = Array2::<f64>::zeros((c_in * kh * kw, ho * wo));
    for c in 0..c_in {
        for u in 0..kh {
            for v in 0..kw {
                let row = (c * kh + u) * kw + v;
                for oy in 0..ho {
                    let iy = (oy * stride + u) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + v) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * wo + ox]] = x[[b, c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add columns back onto one (C, H, W) item: the adjoint of im2col.
fn col2im(
    cols: &Array2<f64>,
    out: &mut Array4<f64>,
    b: usize,
    k: (usize, usize),
    stride: usize,
    pad: usize,
    win: (usize, usize),
) {
    let (_, c_in, h, w) = out.dim();
    let (kh, kw) = k;
    let (ho, wo) = win;
    for c in 0..c_in {
        for u in 0..kh {
            for v in 0..kw {
                let row = (c * kh + u) * kw + v;
                for oy in 0..ho {
                    let iy = (oy * stride + u) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + v) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[[b, c, iy as usize, ix as usize]] += cols[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
}

fn weight_matrix(w: &ArrayView4<f64>) -> Array2<f64> {
    let (o, c, kh, kw) = w.dim();
    w.to_shape((o, c * kh * kw))
        .expect("weights are contiguous")
        .to_owned()
}

pub struct ConvGrads {
    pub x: Array4<f64>,
    pub w: Array4<f64>,
    pub b: Array1<f64>,
}

/// Cross-correlation of x (B, Cin, H, W) with w (Cout, Cin, kh, kw).
pub fn conv2d_forward(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    bias: &Array1<f64>,
    stride: usize,
    pad: usize,
) -> Result<Array4<f64>> {
    let (batch, c_in, h, wd) = x.dim();
    let (c_out, wc_in, kh, kw) = w.dim();
    if c_in != wc_in {
        return Err(Error::Shape(format!(
            "conv2d channels: input has {c_in}, weights expect {wc_in}"
        )));
    }
    if bias.len() != c_out {
        return Err(Error::Shape(format!(
            "conv2d bias length {} vs {c_out} output channels",
            bias.len()
        )));
    }
    let ho = conv_out_dim(h, kh, stride, pad)?;
    let wo = conv_out_dim(wd, kw, stride, pad)?;
    let w2d = weight_matrix(w);
    let mut out = Array4::<f64>::zeros((batch, c_out, ho, wo));
    for b in 0..batch {
        let cols = im2col(x, b, (kh, kw), stride, pad, (ho, wo));
        let prod = w2d.dot(&cols); // (Cout, Ho*Wo)
        for co in 0..c_out {
            let off = bias[co];
            for oy in 0..ho {
                for ox in 0..wo {
                    out[[b, co, oy, ox]] = prod[[co, oy * wo + ox]] + off;
                }
            }
        }
    }
    Ok(out)
}

pub fn conv2d_backward(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    grad_out: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads> {
    let (batch, _, _, _) = x.dim();
    let (c_out, _, kh, kw) = w.dim();
    let (_, _, ho, wo) = grad_out.dim();
    let w2d = weight_matrix(w);
    let mut gx = Array4::<f64>::zeros(x.dim());
    let mut gw2d = Array2::<f64>::zeros(w2d.dim());
    let mut gb = Array1::<f64>::zeros(c_out);
    for b in 0..batch {
        let mut g_flat = Array2::<f64>::zeros((c_out, ho * wo));
        for co in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = grad_out[[b, co, oy, ox]];
                    g_flat[[co, oy * wo + ox]] = g;
                    gb[co] += g;
                }
            }
        }
        let cols = im2col(x, b, (kh, kw), stride, pad, (ho, wo));
        gw2d = gw2d + g_flat.dot(&cols.t());
        let g_cols = w2d.t().dot(&g_flat);
        col2im(&g_cols, &mut gx, b, (kh, kw), stride, pad, (ho, wo));
    }
    let gw = gw2d
        .to_shape(w.dim())
        .expect("gradient matches weight shape")
        .to_owned();
    Ok(ConvGrads { x: gx, w: gw, b: gb })
}

/// Transposed convolution of x (B, Cin, H, W) with w (Cin, Cout, kh, kw):
/// the adjoint of `conv2d` with the same weight tensor.
pub fn conv_transpose2d_forward(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    bias: &Array1<f64>,
    stride: usize,
    pad: usize,
) -> Result<Array4<f64>> {
    let (batch, c_in, h, wd) = x.dim();
    let (wc_in, c_out, kh, kw) = w.dim();
    if c_in != wc_in {
        return Err(Error::Shape(format!(
            "conv_transpose2d channels: input has {c_in}, weights expect {wc_in}"
        )));
    }
    if bias.len() != c_out {
        return Err(Error::Shape(format!(
            "conv_transpose2d bias length {} vs {c_out} output channels",
            bias.len()
        )));
    }
    let ho = conv_transpose_out_dim(h, kh, stride, pad)?;
    let wo = conv_transpose_out_dim(wd, kw, stride, pad)?;
    let w2d = weight_matrix(w); // (Cin, Cout*kh*kw)
    let mut out = Array4::<f64>::zeros((batch, c_out, ho, wo));
    for b in 0..batch {
        let mut x_flat = Array2::<f64>::zeros((c_in, h * wd));
        for c in 0..c_in {
            for i in 0..h {
                for j in 0..wd {
                    x_flat[[c, i * wd + j]] = x[[b, c, i, j]];
                }
            }
        }
        let cols = w2d.t().dot(&x_flat); // (Cout*kh*kw, H*W)
        col2im(&cols, &mut out, b, (kh, kw), stride, pad, (h, wd));
    }
    for co in 0..c_out {
        let off = bias[co];
        if off != 0.0 {
            out.index_axis_mut(ndarray::Axis(1), co).mapv_inplace(|v| v + off);
        }
    }
    Ok(out)
}

pub fn conv_transpose2d_backward(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    grad_out: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads> {
    let (batch, c_in, h, wd) = x.dim();
    let (_, c_out, kh, kw) = w.dim();
    let w2d = weight_matrix(w);
    let mut gx = Array4::<f64>::zeros(x.dim());
    let mut gw2d = Array2::<f64>::zeros(w2d.dim());
    let mut gb = Array1::<f64>::zeros(c_out);
    for ((_, co, _, _), &g) in grad_out.indexed_iter() {
        gb[co] += g;
    }
    for b in 0..batch {
        // Windows of the large gradient, viewed through the conv geometry.
        let g_cols = im2col(grad_out, b, (kh, kw), stride, pad, (h, wd));
        let gx_flat = w2d.dot(&g_cols); // (Cin, H*W)
        for c in 0..c_in {
            for i in 0..h {
                for j in 0..wd {
                    gx[[b, c, i, j]] = gx_flat[[c, i * wd + j]];
                }
            }
        }
        let mut x_flat = Array2::<f64>::zeros((c_in, h * wd));
        for c in 0..c_in {
            for i in 0..h {
                for j in 0..wd {
                    x_flat[[c, i * wd + j]] = x[[b, c, i, j]];
                }
            }
        }
        gw2d = gw2d + x_flat.dot(&g_cols.t());
    }
    let gw = gw2d
        .to_shape(w.dim())
        .expect("gradient matches weight shape")
        .to_owned();
    Ok(ConvGrads { x: gx, w: gw, b: gb })
}
