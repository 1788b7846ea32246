//! Dense compute kernels: convolution, normalization, resampling, coordinate
//! decoding, and the task losses.
//!
//! All loops are sequential with a fixed reduction order. Inputs and outputs
//! are standard-layout `(batch, channel, height, width)` tensors unless noted.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::types::DenseLossForm;

/// Spatial output size of a convolution.
pub fn conv_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Result<(usize, usize)> {
    if stride == 0 || dilation == 0 {
        return Err(Error::Invalid("stride and dilation must be positive".into()));
    }
    let eff_h = dilation * (kh - 1) + 1;
    let eff_w = dilation * (kw - 1) + 1;
    if h + 2 * pad < eff_h || w + 2 * pad < eff_w {
        return Err(Error::Shape(format!(
            "kernel {kh}x{kw} (dilation {dilation}) exceeds padded input {h}x{w}"
        )));
    }
    Ok((
        (h + 2 * pad - eff_h) / stride + 1,
        (w + 2 * pad - eff_w) / stride + 1,
    ))
}

fn im2col(
    xs: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    dilation: usize,
    (oh, ow): (usize, usize),
    col: &mut Array2<f64>,
) {
    col.fill(0.0);
    let cs = col.as_slice_mut().expect("col is standard layout");
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let out_row = &mut cs[row * oh * ow..(row + 1) * oh * ow];
                for oi in 0..oh {
                    let ih = (oi * stride + ki * dilation) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    let dst = &mut out_row[oi * ow..(oi + 1) * ow];
                    for oj in 0..ow {
                        let iw = (oj * stride + kj * dilation) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            dst[oj] = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(
    col: &Array2<f64>,
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    dilation: usize,
    (oh, ow): (usize, usize),
    dxs: &mut [f64],
) {
    let cs = col.as_slice().expect("col is standard layout");
    for ci in 0..c {
        let plane = &mut dxs[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let col_row = &cs[row * oh * ow..(row + 1) * oh * ow];
                for oi in 0..oh {
                    let ih = (oi * stride + ki * dilation) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    let src = &col_row[oi * ow..(oi + 1) * ow];
                    for oj in 0..ow {
                        let iw = (oj * stride + kj * dilation) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            dst[iw as usize] += src[oj];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution via im2col + GEMM.
pub fn conv2d_forward(
    x: &Array4<f64>,
    w: &Array4<f64>,
    b: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Result<Array4<f64>> {
    let (bs, c, h, iw) = x.dim();
    let (o, wc, kh, kw) = w.dim();
    if wc != c {
        return Err(Error::Shape(format!(
            "conv weight expects {wc} input channels, got {c}"
        )));
    }
    if let Some(bias) = b {
        if bias.len() != o {
            return Err(Error::Shape("conv bias length != output channels".into()));
        }
    }
    let (oh, ow) = conv_out_dims(h, iw, kh, kw, stride, pad, dilation)?;
    let ckk = c * kh * kw;
    let mut col = Array2::<f64>::zeros((ckk, oh * ow));
    let mut y = Array4::<f64>::zeros((bs, o, oh, ow));
    let w2 = w
        .view()
        .into_shape_with_order((o, ckk))
        .expect("weights are standard layout");
    for bi in 0..bs {
        let xs = x.index_axis(Axis(0), bi);
        im2col(
            xs.as_slice().expect("x is standard layout"),
            (c, h, iw),
            (kh, kw),
            stride,
            pad,
            dilation,
            (oh, ow),
            &mut col,
        );
        let mut y2 = y
            .index_axis_mut(Axis(0), bi)
            .into_shape_with_order((o, oh * ow))
            .expect("y is standard layout");
        general_mat_mul(1.0, &w2, &col.view(), 0.0, &mut y2);
    }
    if let Some(bias) = b {
        for bi in 0..bs {
            for oc in 0..o {
                let add = bias[oc];
                y.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), oc)
                    .map_inplace(|v| *v += add);
            }
        }
    }
    Ok(y)
}

/// Gradients of a convolution w.r.t. input, weights, and bias.
pub fn conv2d_backward(
    x: &Array4<f64>,
    w: &Array4<f64>,
    dy: &Array4<f64>,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Result<(Array4<f64>, Array4<f64>, Array1<f64>)> {
    let (bs, c, h, iw) = x.dim();
    let (o, _, kh, kw) = w.dim();
    let (_, _, oh, ow) = dy.dim();
    let ckk = c * kh * kw;
    let mut col = Array2::<f64>::zeros((ckk, oh * ow));
    let mut dcol = Array2::<f64>::zeros((ckk, oh * ow));
    let mut dx = Array4::<f64>::zeros((bs, c, h, iw));
    let mut dw2 = Array2::<f64>::zeros((o, ckk));
    let mut db = Array1::<f64>::zeros(o);
    let w2 = w
        .view()
        .into_shape_with_order((o, ckk))
        .expect("weights are standard layout");
    for bi in 0..bs {
        let dy2 = dy
            .index_axis(Axis(0), bi)
            .into_shape_with_order((o, oh * ow))
            .expect("dy is standard layout");
        // Bias gradient: plain sum over spatial positions.
        for oc in 0..o {
            db[oc] += dy2.row(oc).sum();
        }
        let xs = x.index_axis(Axis(0), bi);
        im2col(
            xs.as_slice().expect("x is standard layout"),
            (c, h, iw),
            (kh, kw),
            stride,
            pad,
            dilation,
            (oh, ow),
            &mut col,
        );
        general_mat_mul(1.0, &dy2, &col.t(), 1.0, &mut dw2);
        general_mat_mul(1.0, &w2.t(), &dy2, 0.0, &mut dcol);
        let mut dxb = dx.index_axis_mut(Axis(0), bi);
        col2im_add(
            &dcol,
            (c, h, iw),
            (kh, kw),
            stride,
            pad,
            dilation,
            (oh, ow),
            dxb.as_slice_mut().expect("dx is standard layout"),
        );
    }
    let dw = dw2
        .into_shape_with_order((o, c, kh, kw))
        .expect("dw reshape");
    Ok((dx, dw, db))
}

/// Saved activations a batch-norm backward pass needs.
#[derive(Debug)]
pub struct BnCache {
    pub xhat: Array4<f64>,
    pub inv_std: Vec<f64>,
    /// True when normalization used batch statistics.
    pub batch_stats: bool,
}

/// Batch normalization with batch statistics. Returns the per-channel batch
/// mean and biased variance so the caller can update running averages.
pub fn bn_forward_train(
    x: &Array4<f64>,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Array4<f64>, Vec<f64>, Vec<f64>, BnCache) {
    let (bs, c, h, w) = x.dim();
    let m = (bs * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for bi in 0..bs {
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), bi);
            let plane = plane.index_axis(Axis(0), ci);
            mean[ci] += plane.sum();
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    for bi in 0..bs {
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), bi);
            let plane = plane.index_axis(Axis(0), ci);
            let mu = mean[ci];
            var[ci] += plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>();
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = Array4::<f64>::zeros((bs, c, h, w));
    for bi in 0..bs {
        for ci in 0..c {
            let mu = mean[ci];
            let is = inv_std[ci];
            let g = gamma[ci];
            let be = beta[ci];
            let mut xh = xhat.index_axis_mut(Axis(0), bi);
            let mut xh = xh.index_axis_mut(Axis(0), ci);
            let mut yv = y.index_axis_mut(Axis(0), bi);
            let mut yv = yv.index_axis_mut(Axis(0), ci);
            for (xv, yv) in xh.iter_mut().zip(yv.iter_mut()) {
                *xv = (*xv - mu) * is;
                *yv = g * *xv + be;
            }
        }
    }
    (
        y,
        mean,
        var,
        BnCache {
            xhat,
            inv_std,
            batch_stats: true,
        },
    )
}

/// Batch normalization with frozen (running) statistics.
pub fn bn_forward_eval(
    x: &Array4<f64>,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> (Array4<f64>, BnCache) {
    let (bs, c, h, w) = x.dim();
    let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = Array4::<f64>::zeros((bs, c, h, w));
    for bi in 0..bs {
        for ci in 0..c {
            let mu = running_mean[ci];
            let is = inv_std[ci];
            let g = gamma[ci];
            let be = beta[ci];
            let mut xh = xhat.index_axis_mut(Axis(0), bi);
            let mut xh = xh.index_axis_mut(Axis(0), ci);
            let mut yv = y.index_axis_mut(Axis(0), bi);
            let mut yv = yv.index_axis_mut(Axis(0), ci);
            for (xv, yv) in xh.iter_mut().zip(yv.iter_mut()) {
                *xv = (*xv - mu) * is;
                *yv = g * *xv + be;
            }
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_stats: false,
        },
    )
}

/// Batch-norm backward. Handles both batch-statistics mode (full coupling
/// through mean and variance) and frozen mode (plain affine).
pub fn bn_backward(
    dy: &Array4<f64>,
    gamma: &[f64],
    cache: &BnCache,
) -> (Array4<f64>, Vec<f64>, Vec<f64>) {
    let (bs, c, h, w) = dy.dim();
    let m = (bs * h * w) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for bi in 0..bs {
        for ci in 0..c {
            let dyv = dy.index_axis(Axis(0), bi);
            let dyv = dyv.index_axis(Axis(0), ci);
            let xh = cache.xhat.index_axis(Axis(0), bi);
            let xh = xh.index_axis(Axis(0), ci);
            for (&d, &x) in dyv.iter().zip(xh.iter()) {
                dgamma[ci] += d * x;
                dbeta[ci] += d;
            }
        }
    }
    let mut dx = Array4::<f64>::zeros((bs, c, h, w));
    for bi in 0..bs {
        for ci in 0..c {
            let g = gamma[ci];
            let is = cache.inv_std[ci];
            let dyv = dy.index_axis(Axis(0), bi);
            let dyv = dyv.index_axis(Axis(0), ci);
            let xh = cache.xhat.index_axis(Axis(0), bi);
            let xh = xh.index_axis(Axis(0), ci);
            let mut dxv = dx.index_axis_mut(Axis(0), bi);
            let mut dxv = dxv.index_axis_mut(Axis(0), ci);
            if cache.batch_stats {
                let sum_dy = dbeta[ci];
                let sum_dy_xhat = dgamma[ci];
                for ((&d, &x), o) in dyv.iter().zip(xh.iter()).zip(dxv.iter_mut()) {
                    *o = g * is / m * (m * d - sum_dy - x * sum_dy_xhat);
                }
            } else {
                for (&d, o) in dyv.iter().zip(dxv.iter_mut()) {
                    *o = g * is * d;
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Non-overlapping average pooling with window = stride = `k`.
pub fn avg_pool_forward(x: &Array4<f64>, k: usize) -> Result<Array4<f64>> {
    let (bs, c, h, w) = x.dim();
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::Shape(format!(
            "pool window {k} must evenly divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut y = Array4::<f64>::zeros((bs, c, oh, ow));
    for bi in 0..bs {
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), bi);
            let plane = plane.index_axis(Axis(0), ci);
            let mut out = y.index_axis_mut(Axis(0), bi);
            let mut out = out.index_axis_mut(Axis(0), ci);
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = 0.0;
                    for di in 0..k {
                        for dj in 0..k {
                            acc += plane[[oi * k + di, oj * k + dj]];
                        }
                    }
                    out[[oi, oj]] = acc * norm;
                }
            }
        }
    }
    Ok(y)
}

pub fn avg_pool_backward(dy: &Array4<f64>, k: usize) -> Array4<f64> {
    let (bs, c, oh, ow) = dy.dim();
    let norm = 1.0 / (k * k) as f64;
    let mut dx = Array4::<f64>::zeros((bs, c, oh * k, ow * k));
    for bi in 0..bs {
        for ci in 0..c {
            let dyp = dy.index_axis(Axis(0), bi);
            let dyp = dyp.index_axis(Axis(0), ci);
            let mut dxp = dx.index_axis_mut(Axis(0), bi);
            let mut dxp = dxp.index_axis_mut(Axis(0), ci);
            for oi in 0..oh {
                for oj in 0..ow {
                    let g = dyp[[oi, oj]] * norm;
                    for di in 0..k {
                        for dj in 0..k {
                            dxp[[oi * k + di, oj * k + dj]] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

// Endpoint-aligned source position and interpolation weights for one output
// index. Constant maps stay constant under this scheme.
fn lerp_coeffs(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|i| {
            if out_len == 1 || in_len == 1 {
                return (0, 0, 0.0);
            }
            let src = i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize to `(oh, ow)` with endpoint alignment.
pub fn bilinear_forward(x: &Array4<f64>, oh: usize, ow: usize) -> Array4<f64> {
    let (bs, c, h, w) = x.dim();
    if (oh, ow) == (h, w) {
        return x.clone();
    }
    let rows = lerp_coeffs(oh, h);
    let cols = lerp_coeffs(ow, w);
    let mut y = Array4::<f64>::zeros((bs, c, oh, ow));
    for bi in 0..bs {
        for ci in 0..c {
            let src = x.index_axis(Axis(0), bi);
            let src = src.index_axis(Axis(0), ci);
            let mut dst = y.index_axis_mut(Axis(0), bi);
            let mut dst = dst.index_axis_mut(Axis(0), ci);
            for (oi, &(r0, r1, fr)) in rows.iter().enumerate() {
                for (oj, &(c0, c1, fc)) in cols.iter().enumerate() {
                    let top = src[[r0, c0]] * (1.0 - fc) + src[[r0, c1]] * fc;
                    let bot = src[[r1, c0]] * (1.0 - fc) + src[[r1, c1]] * fc;
                    dst[[oi, oj]] = top * (1.0 - fr) + bot * fr;
                }
            }
        }
    }
    y
}

pub fn bilinear_backward(dy: &Array4<f64>, h: usize, w: usize) -> Array4<f64> {
    let (bs, c, oh, ow) = dy.dim();
    if (oh, ow) == (h, w) {
        return dy.clone();
    }
    let rows = lerp_coeffs(oh, h);
    let cols = lerp_coeffs(ow, w);
    let mut dx = Array4::<f64>::zeros((bs, c, h, w));
    for bi in 0..bs {
        for ci in 0..c {
            let g = dy.index_axis(Axis(0), bi);
            let g = g.index_axis(Axis(0), ci);
            let mut dst = dx.index_axis_mut(Axis(0), bi);
            let mut dst = dst.index_axis_mut(Axis(0), ci);
            for (oi, &(r0, r1, fr)) in rows.iter().enumerate() {
                for (oj, &(c0, c1, fc)) in cols.iter().enumerate() {
                    let gv = g[[oi, oj]];
                    dst[[r0, c0]] += gv * (1.0 - fr) * (1.0 - fc);
                    dst[[r0, c1]] += gv * (1.0 - fr) * fc;
                    dst[[r1, c0]] += gv * fr * (1.0 - fc);
                    dst[[r1, c1]] += gv * fr * fc;
                }
            }
        }
    }
    dx
}

/// Normalized grid coordinate of cell `i` along an axis of `n` cells, with
/// endpoints at 0 and 1.
pub fn grid_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.5
    } else {
        i as f64 / (n - 1) as f64
    }
}

/// Softmax over the joint spatial extent of each `(batch, channel)` heatmap,
/// followed by the expected normalized coordinate. Returns `(coords, probs)`
/// with coords shaped `(batch, channels, 2)` as `(x, y)`.
pub fn soft_argmax_forward(logits: &Array4<f64>) -> (Array3<f64>, Array4<f64>) {
    let (bs, n, h, w) = logits.dim();
    let mut probs = Array4::<f64>::zeros((bs, n, h, w));
    let mut coords = Array3::<f64>::zeros((bs, n, 2));
    for bi in 0..bs {
        for ni in 0..n {
            let lp = logits.index_axis(Axis(0), bi);
            let lp = lp.index_axis(Axis(0), ni);
            let max = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            let mut pp = probs.index_axis_mut(Axis(0), bi);
            let mut pp = pp.index_axis_mut(Axis(0), ni);
            for (p, &l) in pp.iter_mut().zip(lp.iter()) {
                *p = (l - max).exp();
                z += *p;
            }
            let mut ex = 0.0;
            let mut ey = 0.0;
            for i in 0..h {
                for j in 0..w {
                    let p = pp[[i, j]] / z;
                    pp[[i, j]] = p;
                    ex += p * grid_coord(j, w);
                    ey += p * grid_coord(i, h);
                }
            }
            coords[[bi, ni, 0]] = ex;
            coords[[bi, ni, 1]] = ey;
        }
    }
    (coords, probs)
}

pub fn soft_argmax_backward(
    dcoords: &Array3<f64>,
    probs: &Array4<f64>,
    coords: &Array3<f64>,
) -> Array4<f64> {
    let (bs, n, h, w) = probs.dim();
    let mut dlogits = Array4::<f64>::zeros((bs, n, h, w));
    for bi in 0..bs {
        for ni in 0..n {
            let gx = dcoords[[bi, ni, 0]];
            let gy = dcoords[[bi, ni, 1]];
            if gx == 0.0 && gy == 0.0 {
                continue;
            }
            let ex = coords[[bi, ni, 0]];
            let ey = coords[[bi, ni, 1]];
            let pp = probs.index_axis(Axis(0), bi);
            let pp = pp.index_axis(Axis(0), ni);
            let mut dl = dlogits.index_axis_mut(Axis(0), bi);
            let mut dl = dl.index_axis_mut(Axis(0), ni);
            for i in 0..h {
                for j in 0..w {
                    let coef = gx * (grid_coord(j, w) - ex) + gy * (grid_coord(i, h) - ey);
                    dl[[i, j]] = pp[[i, j]] * coef;
                }
            }
        }
    }
    dlogits
}

/// Renders normalized coordinates as Gaussian bumps on an `h`x`w` grid.
/// `sigma_cells` is measured in grid cells.
pub fn gaussian_maps_forward(
    coords: &Array3<f64>,
    h: usize,
    w: usize,
    sigma_cells: f64,
) -> Array4<f64> {
    let (bs, n, _) = coords.dim();
    let sx = sigma_cells / (w.max(2) - 1) as f64;
    let sy = sigma_cells / (h.max(2) - 1) as f64;
    let mut maps = Array4::<f64>::zeros((bs, n, h, w));
    for bi in 0..bs {
        for ni in 0..n {
            let cx = coords[[bi, ni, 0]];
            let cy = coords[[bi, ni, 1]];
            let mut mp = maps.index_axis_mut(Axis(0), bi);
            let mut mp = mp.index_axis_mut(Axis(0), ni);
            for i in 0..h {
                let dy = grid_coord(i, h) - cy;
                for j in 0..w {
                    let dx = grid_coord(j, w) - cx;
                    mp[[i, j]] =
                        (-(dx * dx) / (2.0 * sx * sx) - (dy * dy) / (2.0 * sy * sy)).exp();
                }
            }
        }
    }
    maps
}

pub fn gaussian_maps_backward(
    dmaps: &Array4<f64>,
    maps: &Array4<f64>,
    coords: &Array3<f64>,
    sigma_cells: f64,
) -> Array3<f64> {
    let (bs, n, h, w) = maps.dim();
    let sx = sigma_cells / (w.max(2) - 1) as f64;
    let sy = sigma_cells / (h.max(2) - 1) as f64;
    let mut dc = Array3::<f64>::zeros((bs, n, 2));
    for bi in 0..bs {
        for ni in 0..n {
            let cx = coords[[bi, ni, 0]];
            let cy = coords[[bi, ni, 1]];
            let mp = maps.index_axis(Axis(0), bi);
            let mp = mp.index_axis(Axis(0), ni);
            let gp = dmaps.index_axis(Axis(0), bi);
            let gp = gp.index_axis(Axis(0), ni);
            let mut ax = 0.0;
            let mut ay = 0.0;
            for i in 0..h {
                let dy = grid_coord(i, h) - cy;
                for j in 0..w {
                    let dx = grid_coord(j, w) - cx;
                    let gv = gp[[i, j]] * mp[[i, j]];
                    ax += gv * dx / (sx * sx);
                    ay += gv * dy / (sy * sy);
                }
            }
            dc[[bi, ni, 0]] = ax;
            dc[[bi, ni, 1]] = ay;
        }
    }
    dc
}

/// Per-pixel softmax over the channel axis.
pub fn softmax_channels(logits: &Array4<f64>) -> Array4<f64> {
    let (bs, k, h, w) = logits.dim();
    let mut probs = Array4::<f64>::zeros((bs, k, h, w));
    for bi in 0..bs {
        for i in 0..h {
            for j in 0..w {
                let mut max = f64::NEG_INFINITY;
                for ci in 0..k {
                    max = max.max(logits[[bi, ci, i, j]]);
                }
                let mut z = 0.0;
                for ci in 0..k {
                    let e = (logits[[bi, ci, i, j]] - max).exp();
                    probs[[bi, ci, i, j]] = e;
                    z += e;
                }
                for ci in 0..k {
                    probs[[bi, ci, i, j]] /= z;
                }
            }
        }
    }
    probs
}

/// Floors a probability at the smallest positive normal, without masking
/// NaN the way `f64::max` would.
fn floor_prob(p: f64) -> f64 {
    if p < f64::MIN_POSITIVE {
        f64::MIN_POSITIVE
    } else {
        p
    }
}

/// Pixel-wise softmax cross entropy against integer class targets, averaged
/// over every pixel in the batch. Returns the loss and the softmax
/// probabilities (reused by the backward pass).
pub fn seg_ce_forward(logits: &Array4<f64>, target: &Array3<u8>) -> Result<(f64, Array4<f64>)> {
    let (bs, k, h, w) = logits.dim();
    if target.dim() != (bs, h, w) {
        return Err(Error::Shape(format!(
            "class target {:?} does not match logits {:?}",
            target.dim(),
            logits.dim()
        )));
    }
    if let Some(&bad) = target.iter().find(|&&t| (t as usize) >= k) {
        return Err(Error::Invalid(format!(
            "target class {bad} out of range for {k} channels"
        )));
    }
    let probs = softmax_channels(logits);
    let m = (bs * h * w) as f64;
    let mut loss = 0.0;
    for bi in 0..bs {
        for i in 0..h {
            for j in 0..w {
                let t = target[[bi, i, j]] as usize;
                loss -= floor_prob(probs[[bi, t, i, j]]).ln();
            }
        }
    }
    Ok((loss / m, probs))
}

pub fn seg_ce_backward(probs: &Array4<f64>, target: &Array3<u8>, gy: f64) -> Array4<f64> {
    let (bs, k, h, w) = probs.dim();
    let scale = gy / (bs * h * w) as f64;
    let mut dl = probs * scale;
    for bi in 0..bs {
        for i in 0..h {
            for j in 0..w {
                let t = target[[bi, i, j]] as usize;
                dl[[bi, t, i, j]] -= scale;
            }
        }
    }
    let _ = k;
    dl
}

/// Squared-distance keypoint loss over visible joints, `1/(2V)` normalized
/// per sample, averaged over samples that have any visible joint. Returns
/// the loss and the number of supervised samples.
pub fn pose_l2_forward(
    coords: &Array3<f64>,
    target: &Array3<f64>,
    vis: &Array2<bool>,
) -> Result<(f64, usize)> {
    let (bs, n, _) = coords.dim();
    if target.dim() != coords.dim() || vis.dim() != (bs, n) {
        return Err(Error::Shape("keypoint loss inputs disagree".into()));
    }
    let mut total = 0.0;
    let mut supervised = 0usize;
    for bi in 0..bs {
        let v = (0..n).filter(|&ni| vis[[bi, ni]]).count();
        if v == 0 {
            continue;
        }
        supervised += 1;
        let mut acc = 0.0;
        for ni in 0..n {
            if !vis[[bi, ni]] {
                continue;
            }
            let dx = coords[[bi, ni, 0]] - target[[bi, ni, 0]];
            let dy = coords[[bi, ni, 1]] - target[[bi, ni, 1]];
            acc += dx * dx + dy * dy;
        }
        total += acc / (2.0 * v as f64);
    }
    if supervised == 0 {
        return Ok((0.0, 0));
    }
    Ok((total / supervised as f64, supervised))
}

pub fn pose_l2_backward(
    coords: &Array3<f64>,
    target: &Array3<f64>,
    vis: &Array2<bool>,
    supervised: usize,
    gy: f64,
) -> Array3<f64> {
    let (bs, n, _) = coords.dim();
    let mut dc = Array3::<f64>::zeros((bs, n, 2));
    if supervised == 0 {
        return dc;
    }
    for bi in 0..bs {
        let v = (0..n).filter(|&ni| vis[[bi, ni]]).count();
        if v == 0 {
            continue;
        }
        let scale = gy / (v as f64 * supervised as f64);
        for ni in 0..n {
            if !vis[[bi, ni]] {
                continue;
            }
            dc[[bi, ni, 0]] = scale * (coords[[bi, ni, 0]] - target[[bi, ni, 0]]);
            dc[[bi, ni, 1]] = scale * (coords[[bi, ni, 1]] - target[[bi, ni, 1]]);
        }
    }
    dc
}

/// Huber penalty with threshold `delta`.
pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub fn huber_grad(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}

/// Targets for the dense-surface loss. `valid[b]` marks samples that carry a
/// dense annotation at all; others are excluded from both pixel sets.
pub struct DenseTargets<'a> {
    pub part: &'a Array3<u8>,
    pub uv: &'a Array4<f64>,
    pub valid: &'a [bool],
}

/// Dense-surface loss: on annotated foreground pixels the part-classification
/// cross entropy is combined with the Huber penalty on the two surface
/// coordinates (product or sum form); background pixels contribute the
/// classification term alone. The two pixel populations are averaged
/// separately and added.
pub fn dense_loss_forward(
    part_logits: &Array4<f64>,
    uv: &Array4<f64>,
    t: &DenseTargets,
    form: DenseLossForm,
    delta: f64,
) -> Result<(f64, Array4<f64>, usize, usize)> {
    let (bs, q, h, w) = part_logits.dim();
    if uv.dim() != (bs, 2, h, w) || t.part.dim() != (bs, h, w) || t.uv.dim() != (bs, 2, h, w) {
        return Err(Error::Shape("dense loss inputs disagree".into()));
    }
    if t.valid.len() != bs {
        return Err(Error::Shape("dense validity flags != batch size".into()));
    }
    if let Some(&bad) = t.part.iter().find(|&&p| (p as usize) >= q) {
        return Err(Error::Invalid(format!(
            "part target {bad} out of range for {q} channels"
        )));
    }
    let probs = softmax_channels(part_logits);
    let mut fg_sum = 0.0;
    let mut bg_sum = 0.0;
    let mut fg = 0usize;
    let mut bg = 0usize;
    for bi in 0..bs {
        if !t.valid[bi] {
            continue;
        }
        for i in 0..h {
            for j in 0..w {
                let tp = t.part[[bi, i, j]] as usize;
                let cse = -floor_prob(probs[[bi, tp, i, j]]).ln();
                if tp == 0 {
                    bg_sum += cse;
                    bg += 1;
                } else {
                    let du = uv[[bi, 0, i, j]] - t.uv[[bi, 0, i, j]];
                    let dv = uv[[bi, 1, i, j]] - t.uv[[bi, 1, i, j]];
                    let hub = huber(du, delta) + huber(dv, delta);
                    fg_sum += match form {
                        DenseLossForm::Product => cse * hub,
                        DenseLossForm::Sum => cse + hub,
                    };
                    fg += 1;
                }
            }
        }
    }
    let mut loss = 0.0;
    if fg > 0 {
        loss += fg_sum / fg as f64;
    }
    if bg > 0 {
        loss += bg_sum / bg as f64;
    }
    Ok((loss, probs, fg, bg))
}

#[allow(clippy::too_many_arguments)]
pub fn dense_loss_backward(
    probs: &Array4<f64>,
    uv: &Array4<f64>,
    t: &DenseTargets,
    form: DenseLossForm,
    delta: f64,
    fg: usize,
    bg: usize,
    gy: f64,
) -> (Array4<f64>, Array4<f64>) {
    let (bs, q, h, w) = probs.dim();
    let mut dlogits = Array4::<f64>::zeros((bs, q, h, w));
    let mut duv = Array4::<f64>::zeros((bs, 2, h, w));
    let fg_scale = if fg > 0 { gy / fg as f64 } else { 0.0 };
    let bg_scale = if bg > 0 { gy / bg as f64 } else { 0.0 };
    for bi in 0..bs {
        if !t.valid[bi] {
            continue;
        }
        for i in 0..h {
            for j in 0..w {
                let tp = t.part[[bi, i, j]] as usize;
                if tp == 0 {
                    // d(cse)/d(logit_c) = p_c - [c == target]
                    for ci in 0..q {
                        let ind = if ci == tp { 1.0 } else { 0.0 };
                        dlogits[[bi, ci, i, j]] = bg_scale * (probs[[bi, ci, i, j]] - ind);
                    }
                } else {
                    let du = uv[[bi, 0, i, j]] - t.uv[[bi, 0, i, j]];
                    let dv = uv[[bi, 1, i, j]] - t.uv[[bi, 1, i, j]];
                    let cse = -floor_prob(probs[[bi, tp, i, j]]).ln();
                    let (ce_coef, uv_coef) = match form {
                        DenseLossForm::Product => {
                            (huber(du, delta) + huber(dv, delta), cse)
                        }
                        DenseLossForm::Sum => (1.0, 1.0),
                    };
                    for ci in 0..q {
                        let ind = if ci == tp { 1.0 } else { 0.0 };
                        dlogits[[bi, ci, i, j]] =
                            fg_scale * ce_coef * (probs[[bi, ci, i, j]] - ind);
                    }
                    duv[[bi, 0, i, j]] = fg_scale * uv_coef * huber_grad(du, delta);
                    duv[[bi, 1, i, j]] = fg_scale * uv_coef * huber_grad(dv, delta);
                }
            }
        }
    }
    (dlogits, duv)
}
