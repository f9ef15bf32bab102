//! Forward and backward kernels for the layers of the toy backbone.
//!
//! Convolutions are 3x3, stride 1, zero padding 1, lowered to a matrix
//! product through im2col. Tensors are `(batch, channels, height, width)`.

use ndarray::{Array1, Array2, Array4, ArrayView3, Axis};

/// Lowers one `(C, H, W)` sample to a `(C * 9, H * W)` patch matrix.
pub(crate) fn im2col(x: ArrayView3<'_, f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut cols = Array2::<f64>::zeros((c * 9, h * w));
    let dst = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * h * w;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = ci * h * w + sy as usize * w;
                    let dst_row = row + y * w;
                    // x range where sx = x + kx - 1 stays inside [0, w)
                    let x0 = if kx == 0 { 1 } else { 0 };
                    let x1 = if kx == 2 { w - 1 } else { w };
                    for xx in x0..x1 {
                        dst[dst_row + xx] = src[src_row + xx + kx - 1];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto a `(C, H, W)` sample.
pub(crate) fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize) -> Vec<f64> {
    let src = cols.as_slice().expect("standard layout");
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * h * w;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = ci * h * w + sy as usize * w;
                    let src_row = row + y * w;
                    let x0 = if kx == 0 { 1 } else { 0 };
                    let x1 = if kx == 2 { w - 1 } else { w };
                    for xx in x0..x1 {
                        out[dst_row + xx + kx - 1] += src[src_row + xx];
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct ConvCache {
    cols: Vec<Array2<f64>>,
    in_shape: (usize, usize, usize, usize),
}

pub(crate) fn conv3x3_forward(
    x: &Array4<f64>,
    weight: &Array2<f64>,
    bias: &Array1<f64>,
) -> (Array4<f64>, ConvCache) {
    let (b, c, h, w) = x.dim();
    let cout = weight.nrows();
    debug_assert_eq!(weight.ncols(), c * 9);
    let mut y = Array4::<f64>::zeros((b, cout, h, w));
    let mut cols = Vec::with_capacity(b);
    for bi in 0..b {
        let patch = im2col(x.index_axis(Axis(0), bi));
        let mut out = weight.dot(&patch);
        out += &bias.view().insert_axis(Axis(1));
        y.index_axis_mut(Axis(0), bi)
            .assign(&out.into_shape_with_order((cout, h, w)).expect("contiguous"));
        cols.push(patch);
    }
    (
        y,
        ConvCache {
            cols,
            in_shape: (b, c, h, w),
        },
    )
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub(crate) fn conv3x3_backward(
    grad_y: &Array4<f64>,
    cache: &ConvCache,
    weight: &Array2<f64>,
) -> (Array4<f64>, Array2<f64>, Array1<f64>) {
    let (b, c, h, w) = cache.in_shape;
    let cout = weight.nrows();
    let mut grad_x = Array4::<f64>::zeros((b, c, h, w));
    let mut grad_w = Array2::<f64>::zeros(weight.dim());
    let mut grad_b = Array1::<f64>::zeros(cout);
    let wt = weight.t();
    for bi in 0..b {
        let gy = grad_y
            .index_axis(Axis(0), bi)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((cout, h * w))
            .expect("contiguous");
        grad_b += &gy.sum_axis(Axis(1));
        ndarray::linalg::general_mat_mul(1.0, &gy, &cache.cols[bi].t(), 1.0, &mut grad_w);
        let gcols = wt.dot(&gy);
        let gx = col2im(&gcols, c, h, w);
        grad_x
            .index_axis_mut(Axis(0), bi)
            .as_slice_mut()
            .expect("fresh array")
            .copy_from_slice(&gx);
    }
    (grad_x, grad_w, grad_b)
}

pub(crate) fn relu_inplace(x: &mut Array4<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Gradient of ReLU given its output.
pub(crate) fn relu_backward(grad_y: &mut Array4<f64>, y: &Array4<f64>) {
    ndarray::Zip::from(grad_y).and(y).for_each(|g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
}

pub(crate) struct PoolCache {
    /// Flat input offset of each pooled maximum.
    argmax: Vec<usize>,
    in_shape: (usize, usize, usize, usize),
}

/// 2x2 max pooling with stride 2; a trailing odd row or column is dropped.
pub(crate) fn maxpool2_forward(x: &Array4<f64>) -> (Array4<f64>, PoolCache) {
    let (b, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut y = Array4::<f64>::zeros((b, c, oh, ow));
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for (plane, out) in y
        .as_slice_mut()
        .expect("fresh")
        .chunks_mut(oh * ow)
        .enumerate()
    {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out[oy * ow + ox] = src[best];
                argmax.push(best);
            }
        }
    }
    (
        y,
        PoolCache {
            argmax,
            in_shape: (b, c, h, w),
        },
    )
}

pub(crate) fn maxpool2_backward(grad_y: &Array4<f64>, cache: &PoolCache) -> Array4<f64> {
    let mut grad_x = Array4::<f64>::zeros(cache.in_shape);
    let dst = grad_x.as_slice_mut().expect("fresh");
    let gy = grad_y.as_standard_layout();
    for (&idx, &g) in cache
        .argmax
        .iter()
        .zip(gy.as_slice().expect("standard layout"))
    {
        dst[idx] += g;
    }
    grad_x
}

/// Mean over space: `(B, C, H, W) -> (B, C)`.
pub(crate) fn gap_forward(x: &Array4<f64>) -> Array2<f64> {
    let (_, _, h, w) = x.dim();
    x.sum_axis(Axis(3)).sum_axis(Axis(2)) / (h * w) as f64
}

pub(crate) fn gap_backward(grad: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (b, c) = grad.dim();
    let scale = 1.0 / (h * w) as f64;
    Array4::from_shape_fn((b, c, h, w), |(bi, ci, _, _)| grad[[bi, ci]] * scale)
}

/// Row-wise numerically stable softmax.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub(crate) fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let b = logits.nrows();
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    for (bi, &label) in labels.iter().enumerate() {
        loss -= grad[[bi, label]].max(f64::MIN_POSITIVE).ln();
        grad[[bi, label]] -= 1.0;
    }
    grad /= b as f64;
    (loss / b as f64, grad)
}
