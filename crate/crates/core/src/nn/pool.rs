//! Spatial resampling layers.
//!
//! Downsampling follows the max -> blur -> stride decomposition: a dense
//! (stride-1) max filter, then a fixed 3x3 binomial low-pass, then 2x
//! subsampling. The low-pass keeps out-of-band energy from aliasing into the
//! subsampled grid, which is what makes feature maps approximately
//! shift-equivariant.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BackwardContext, Tensor, TensorOp};

/// Binomial 3x3 kernel [1 2 1; 2 4 2; 1 2 1] / 16.
const BLUR_TAPS: [f64; 9] = [
    1.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
    2.0 / 16.0,
    4.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
];

/// Reflect an index into `[0, n)` about the array edges (edge-inclusive
/// mirroring, so constants and means are preserved exactly).
#[inline]
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - 1 - i
    } else {
        i
    };
    j.clamp(0, n - 1) as usize
}

fn plane_dims<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        });
    }
    Ok((s[0] * s[1], s[2], s[3]))
}

// ---------------------------------------------------------------------------
// fixed anti-aliasing blur
// ---------------------------------------------------------------------------

struct AaBlurOp {
    h: usize,
    w: usize,
}

impl<T: Scalar> TensorOp<T> for AaBlurOp {
    fn name(&self) -> &'static str {
        "aa_blur"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        if !ctx.needs[0] {
            return vec![None];
        }
        let (h, w) = (self.h, self.w);
        let plane = h * w;
        let taps: Vec<T> = BLUR_TAPS.iter().map(|&t| T::cast(t)).collect();
        let mut dx = vec![T::zero(); ctx.grad_out.len()];
        dx.par_chunks_mut(plane)
            .zip(ctx.grad_out.par_chunks(plane))
            .for_each(|(dst, g)| {
                for i in 0..h {
                    for j in 0..w {
                        let gij = g[i * w + j];
                        for di in 0..3 {
                            for dj in 0..3 {
                                let si = mirror(i as isize + di - 1, h);
                                let sj = mirror(j as isize + dj - 1, w);
                                dst[si * w + sj] += gij * taps[(di * 3 + dj) as usize];
                            }
                        }
                    }
                }
            });
        vec![Some(dx)]
    }
}

/// One separable [1 2 1]/4 blur pass over a plane, horizontal then vertical,
/// with mirrored borders. Equals the full 3x3 binomial kernel.
fn blur_plane<T: Scalar>(src: &[T], dst: &mut [T], tmp: &mut [T], h: usize, w: usize) {
    let quarter = T::cast(0.25);
    // horizontal pass into tmp
    for i in 0..h {
        let row = &src[i * w..(i + 1) * w];
        let out = &mut tmp[i * w..(i + 1) * w];
        if w >= 3 {
            // mirrored edges fold the outer tap back onto the edge pixel
            out[0] = (row[0] + row[0] + row[0] + row[1]) * quarter;
            for j in 1..w - 1 {
                out[j] = (row[j - 1] + row[j] + row[j] + row[j + 1]) * quarter;
            }
            out[w - 1] = (row[w - 2] + row[w - 1] + row[w - 1] + row[w - 1]) * quarter;
        } else {
            for j in 0..w {
                let l = row[mirror(j as isize - 1, w)];
                let r = row[mirror(j as isize + 1, w)];
                out[j] = (l + row[j] + row[j] + r) * quarter;
            }
        }
    }
    // vertical pass into dst
    for i in 0..h {
        let up = mirror(i as isize - 1, h) * w;
        let down = mirror(i as isize + 1, h) * w;
        let mid = i * w;
        for j in 0..w {
            dst[mid + j] = (tmp[up + j] + tmp[mid + j] + tmp[mid + j] + tmp[down + j]) * quarter;
        }
    }
}

/// Depthwise 3x3 binomial blur with reflective padding; the kernel is fixed
/// and non-learnable. Constants pass through unchanged.
pub fn aa_blur<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_planes, h, w) = plane_dims(x, "aa_blur")?;
    let plane = h * w;
    let mut out = vec![T::zero(); x.numel()];
    out.par_chunks_mut(plane)
        .zip(x.data().par_chunks(plane))
        .for_each(|(dst, src)| {
            let mut tmp = vec![T::zero(); plane];
            blur_plane(src, dst, &mut tmp, h, w);
        });
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        Box::new(AaBlurOp { h, w }),
        vec![x.clone()],
    ))
}

// ---------------------------------------------------------------------------
// max filters and subsampling
// ---------------------------------------------------------------------------

/// Shared backward for ops that route each output to one saved input index.
struct ScatterOp {
    arg: Vec<u32>,
    in_len: usize,
    name: &'static str,
}

impl<T: Scalar> TensorOp<T> for ScatterOp {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        if !ctx.needs[0] {
            return vec![None];
        }
        let mut dx = vec![T::zero(); self.in_len];
        for (o, &i) in self.arg.iter().enumerate() {
            dx[i as usize] += ctx.grad_out[o];
        }
        vec![Some(dx)]
    }
}

fn max_filter_impl<T: Scalar>(
    x: &Tensor<T>,
    stride: usize,
    name: &'static str,
) -> Result<Tensor<T>> {
    let (planes, h, w) = plane_dims(x, name)?;
    if h < 2 || w < 2 {
        return Err(Error::ShapeMismatch {
            op: name,
            lhs: x.shape().to_vec(),
            rhs: vec![2, 2],
        });
    }
    let out_h = h.div_ceil(stride);
    let out_w = w.div_ceil(stride);
    let (plane, out_plane) = (h * w, out_h * out_w);
    let xd = x.data();
    let mut out = vec![T::zero(); planes * out_plane];
    let mut arg = vec![0u32; planes * out_plane];

    out.par_chunks_mut(out_plane)
        .zip(arg.par_chunks_mut(out_plane))
        .enumerate()
        .for_each(|(p, (dst, argp))| {
            let src = &xd[p * plane..(p + 1) * plane];
            for oi in 0..out_h {
                let i0 = oi * stride;
                let interior_cols = if i0 + 1 < h { (w - 2) / stride + 1 } else { 0 };
                for oj in 0..interior_cols {
                    // full 2x2 window, branch-free
                    let j0 = oj * stride;
                    let a = i0 * w + j0;
                    let c = a + w;
                    let (mut best, mut best_at) = (src[a], a);
                    if src[a + 1] > best {
                        best = src[a + 1];
                        best_at = a + 1;
                    }
                    if src[c] > best {
                        best = src[c];
                        best_at = c;
                    }
                    if src[c + 1] > best {
                        best = src[c + 1];
                        best_at = c + 1;
                    }
                    dst[oi * out_w + oj] = best;
                    argp[oi * out_w + oj] = (p * plane + best_at) as u32;
                }
                for oj in interior_cols..out_w {
                    // clipped window at the bottom/right edges
                    let j0 = oj * stride;
                    let mut best = src[i0 * w + j0];
                    let mut best_at = i0 * w + j0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let (i, j) = (i0 + di, j0 + dj);
                            if i < h && j < w && src[i * w + j] > best {
                                best = src[i * w + j];
                                best_at = i * w + j;
                            }
                        }
                    }
                    dst[oi * out_w + oj] = best;
                    argp[oi * out_w + oj] = (p * plane + best_at) as u32;
                }
            }
        });

    let shape = vec![x.shape()[0], x.shape()[1], out_h, out_w];
    Ok(Tensor::from_op(
        shape,
        out,
        Box::new(ScatterOp {
            arg,
            in_len: xd.len(),
            name,
        }),
        vec![x.clone()],
    ))
}

/// Plain strided 2x2 max pooling (no anti-aliasing), kept for ablation.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    max_filter_impl(x, 2, "max_pool2")
}

/// Keep every second row/column, starting at (0, 0).
fn subsample2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = plane_dims(x, "subsample2")?;
    let out_h = h.div_ceil(2);
    let out_w = w.div_ceil(2);
    let (plane, out_plane) = (h * w, out_h * out_w);
    let xd = x.data();
    let mut out = vec![T::zero(); planes * out_plane];
    let mut arg = vec![0u32; planes * out_plane];
    for p in 0..planes {
        for oi in 0..out_h {
            for oj in 0..out_w {
                let src = p * plane + (oi * 2) * w + oj * 2;
                out[p * out_plane + oi * out_w + oj] = xd[src];
                arg[p * out_plane + oi * out_w + oj] = src as u32;
            }
        }
    }
    let shape = vec![x.shape()[0], x.shape()[1], out_h, out_w];
    Ok(Tensor::from_op(
        shape,
        out,
        Box::new(ScatterOp {
            arg,
            in_len: xd.len(),
            name: "subsample2",
        }),
        vec![x.clone()],
    ))
}

/// Anti-aliased 2x2 max pooling: dense max filter, binomial blur, then
/// 2x subsampling. Output extent is `ceil(extent / 2)`.
pub fn aa_maxpool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    subsample2(&aa_blur(&max_filter_impl(x, 1, "aa_maxpool")?)?)
}

// ---------------------------------------------------------------------------
// average pooling (used by the multi-scale similarity pyramid)
// ---------------------------------------------------------------------------

struct AvgPool2Op {
    h: usize,
    w: usize,
}

impl<T: Scalar> TensorOp<T> for AvgPool2Op {
    fn name(&self) -> &'static str {
        "avg_pool2"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        if !ctx.needs[0] {
            return vec![None];
        }
        let (h, w) = (self.h, self.w);
        let (out_h, out_w) = (h / 2, w / 2);
        let quarter = T::cast(0.25);
        let planes = ctx.grad_out.len() / (out_h * out_w);
        let mut dx = vec![T::zero(); planes * h * w];
        for p in 0..planes {
            for oi in 0..out_h {
                for oj in 0..out_w {
                    let g = ctx.grad_out[p * out_h * out_w + oi * out_w + oj] * quarter;
                    for di in 0..2 {
                        for dj in 0..2 {
                            dx[p * h * w + (oi * 2 + di) * w + oj * 2 + dj] += g;
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

/// 2x2 average pooling with stride 2; a trailing odd row/column is dropped.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = plane_dims(x, "avg_pool2")?;
    let (out_h, out_w) = (h / 2, w / 2);
    if out_h == 0 || out_w == 0 {
        return Err(Error::ShapeMismatch {
            op: "avg_pool2",
            lhs: x.shape().to_vec(),
            rhs: vec![2, 2],
        });
    }
    let xd = x.data();
    let quarter = T::cast(0.25);
    let mut out = vec![T::zero(); planes * out_h * out_w];
    for p in 0..planes {
        for oi in 0..out_h {
            for oj in 0..out_w {
                let base = p * h * w + (oi * 2) * w + oj * 2;
                out[p * out_h * out_w + oi * out_w + oj] =
                    (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]) * quarter;
            }
        }
    }
    let shape = vec![x.shape()[0], x.shape()[1], out_h, out_w];
    Ok(Tensor::from_op(
        shape,
        out,
        Box::new(AvgPool2Op { h, w }),
        vec![x.clone()],
    ))
}

// ---------------------------------------------------------------------------
// nearest-neighbor upsampling
// ---------------------------------------------------------------------------

struct Upsample2Op {
    h: usize,
    w: usize,
}

impl<T: Scalar> TensorOp<T> for Upsample2Op {
    fn name(&self) -> &'static str {
        "upsample_nearest2"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        if !ctx.needs[0] {
            return vec![None];
        }
        let (h, w) = (self.h, self.w);
        let planes = ctx.grad_out.len() / (4 * h * w);
        let mut dx = vec![T::zero(); planes * h * w];
        let (oh, ow) = (h * 2, w * 2);
        for p in 0..planes {
            for i in 0..oh {
                for j in 0..ow {
                    dx[p * h * w + (i / 2) * w + j / 2] += ctx.grad_out[p * oh * ow + i * ow + j];
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Replicate each pixel into a 2x2 block.
pub fn upsample_nearest2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = plane_dims(x, "upsample_nearest2")?;
    let xd = x.data();
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                out[p * oh * ow + i * ow + j] = xd[p * h * w + (i / 2) * w + j / 2];
            }
        }
    }
    let shape = vec![x.shape()[0], x.shape()[1], oh, ow];
    Ok(Tensor::from_op(
        shape,
        out,
        Box::new(Upsample2Op { h, w }),
        vec![x.clone()],
    ))
}
