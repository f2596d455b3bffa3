//! Batched 2-D convolution (cross-correlation semantics, as in every modern
//! framework) lowered to im2col + gemm. The batch dimension is processed in
//! parallel; each image writes a disjoint output slice, so results do not
//! depend on thread count.

use rayon::prelude::*;

use super::matmul::gemm;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BackwardContext, Tensor, TensorOp};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding chosen so that stride 1 preserves the spatial extent.
    Same,
    /// No padding; the kernel must fit inside the input.
    Valid,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn resolve(
        in_shape: &[usize],
        k_shape: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if in_shape.len() != 4 || k_shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: in_shape.to_vec(),
                rhs: k_shape.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("conv2d stride must be >= 1".into()));
        }
        let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let (f, kc, kh, kw) = (k_shape[0], k_shape[1], k_shape[2], k_shape[3]);
        if kc != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: in_shape.to_vec(),
                rhs: k_shape.to_vec(),
            });
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::KernelTooLarge {
                        kernel: k_shape.to_vec(),
                        input: in_shape.to_vec(),
                    });
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let out_h = h.div_ceil(stride);
                let out_w = w.div_ceil(stride);
                let pad_h = ((out_h - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((out_w - 1) * stride + kw).saturating_sub(w);
                (out_h, out_w, pad_h / 2, pad_w / 2)
            }
        };
        Ok(Geometry {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one image `[C, H, W]` into a `[C*kh*kw, out_h*out_w]` matrix.
fn im2col<T: Scalar>(geo: &Geometry, image: &[T], col: &mut [T]) {
    let (h, w) = (geo.h, geo.w);
    let ohw = geo.out_plane();
    let mut row = 0usize;
    for c in 0..geo.c {
        let plane = &image[c * h * w..(c + 1) * h * w];
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                for oi in 0..geo.out_h {
                    let ii = (oi * geo.stride + ki) as isize - geo.pad_top as isize;
                    let base = oi * geo.out_w;
                    if ii < 0 || ii >= h as isize {
                        dst[base..base + geo.out_w].fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[ii as usize * w..(ii as usize + 1) * w];
                    for oj in 0..geo.out_w {
                        let jj = (oj * geo.stride + kj) as isize - geo.pad_left as isize;
                        dst[base + oj] = if jj < 0 || jj >= w as isize {
                            T::zero()
                        } else {
                            src_row[jj as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter a `[C*kh*kw, out_h*out_w]` gradient matrix back onto one image.
fn col2im<T: Scalar>(geo: &Geometry, col: &[T], image_grad: &mut [T]) {
    let (h, w) = (geo.h, geo.w);
    let ohw = geo.out_plane();
    let mut row = 0usize;
    for c in 0..geo.c {
        let plane = &mut image_grad[c * h * w..(c + 1) * h * w];
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let src = &col[row * ohw..(row + 1) * ohw];
                for oi in 0..geo.out_h {
                    let ii = (oi * geo.stride + ki) as isize - geo.pad_top as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let base = oi * geo.out_w;
                    for oj in 0..geo.out_w {
                        let jj = (oj * geo.stride + kj) as isize - geo.pad_left as isize;
                        if jj >= 0 && jj < w as isize {
                            plane[ii as usize * w + jj as usize] += src[base + oj];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

struct Conv2dOp {
    geo: Geometry,
}

impl<T: Scalar> TensorOp<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        let geo = self.geo;
        let input = ctx.inputs[0].data();
        let kernel = ctx.inputs[1].data();
        let g = ctx.grad_out;
        let (ckk, ohw) = (geo.col_rows(), geo.out_plane());
        let in_plane = geo.c * geo.h * geo.w;

        let d_input = ctx.needs[0].then(|| {
            let mut dx = vec![T::zero(); input.len()];
            dx.par_chunks_mut(in_plane)
                .zip(g.par_chunks(geo.f * ohw))
                .for_each(|(dxi, gi)| {
                    // col_grad = K^T @ g_i
                    let mut col_grad = vec![T::zero(); ckk * ohw];
                    gemm(
                        ckk,
                        geo.f,
                        ohw,
                        kernel,
                        1,
                        ckk as isize,
                        gi,
                        ohw as isize,
                        1,
                        &mut col_grad,
                    );
                    col2im(&geo, &col_grad, dxi);
                });
            dx
        });

        let d_kernel = ctx.needs[1].then(|| {
            // Per-image partials computed in parallel, then summed in batch
            // order so accumulation is reproducible.
            let partials: Vec<Vec<T>> = (0..geo.n)
                .into_par_iter()
                .map(|i| {
                    let image = &input[i * in_plane..(i + 1) * in_plane];
                    let gi = &g[i * geo.f * ohw..(i + 1) * geo.f * ohw];
                    let mut col = vec![T::zero(); ckk * ohw];
                    im2col(&geo, image, &mut col);
                    let mut dk = vec![T::zero(); geo.f * ckk];
                    // dK_i = g_i @ col_i^T
                    gemm(
                        geo.f,
                        ohw,
                        ckk,
                        gi,
                        ohw as isize,
                        1,
                        &col,
                        1,
                        ohw as isize,
                        &mut dk,
                    );
                    dk
                })
                .collect();
            let mut dk = vec![T::zero(); kernel.len()];
            for part in partials {
                for (d, p) in dk.iter_mut().zip(part) {
                    *d += p;
                }
            }
            dk
        });

        vec![d_input, d_kernel]
    }
}

/// Convolve `input: [N, C, H, W]` with `kernel: [F, C, kh, kw]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let geo = Geometry::resolve(input.shape(), kernel.shape(), stride, padding)?;
    let (ckk, ohw) = (geo.col_rows(), geo.out_plane());
    let in_plane = geo.c * geo.h * geo.w;

    let kd = kernel.data();
    let mut out = vec![T::zero(); geo.n * geo.f * ohw];
    out.par_chunks_mut(geo.f * ohw)
        .zip(input.data().par_chunks(in_plane))
        .for_each(|(dst, image)| {
            let mut col = vec![T::zero(); ckk * ohw];
            im2col(&geo, image, &mut col);
            gemm(
                geo.f,
                ckk,
                ohw,
                kd,
                ckk as isize,
                1,
                &col,
                ohw as isize,
                1,
                dst,
            );
        });

    Ok(Tensor::from_op(
        vec![geo.n, geo.f, geo.out_h, geo.out_w],
        out,
        Box::new(Conv2dOp { geo }),
        vec![input.clone(), kernel.clone()],
    ))
}
