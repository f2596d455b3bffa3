//! Differentiable network layers: anti-aliased pooling, coordinate-channel
//! augmentation, per-image min-max normalization, upsampling, concatenation,
//! dense layers and softmax.

mod pool;

pub use pool::{aa_blur, aa_maxpool, avg_pool2, max_pool2, upsample_nearest2};

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::{BackwardContext, Tensor, TensorOp};

/// Layer kind plus hyperparameters, as assembled by the model builder.
/// Downsampling kinds must be the anti-aliased variants whenever the model
/// is configured with anti-aliasing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
    },
    Dense {
        units: usize,
    },
    AaMaxPool {
        pool: usize,
    },
    MaxPool {
        pool: usize,
    },
    Upsample {
        factor: usize,
    },
    Concat,
    GlobalAvgPool,
    Softmax,
    CoordConv,
    MinMaxNorm,
    Flatten,
}

impl LayerSpec {
    /// True for kinds that subsample the spatial grid.
    pub fn is_strided(&self) -> bool {
        match self {
            LayerSpec::Conv { stride, .. } => *stride > 1,
            LayerSpec::AaMaxPool { .. } | LayerSpec::MaxPool { .. } => true,
            _ => false,
        }
    }

    /// True when subsampling is preceded by the anti-aliasing filter.
    pub fn is_anti_aliased(&self) -> bool {
        matches!(self, LayerSpec::AaMaxPool { .. })
    }
}

// ---------------------------------------------------------------------------
// concat
// ---------------------------------------------------------------------------

struct ConcatOp {
    axis: usize,
}

impl<T: Scalar> TensorOp<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        let a_shape = ctx.inputs[0].shape();
        let b_shape = ctx.inputs[1].shape();
        let outer: usize = a_shape[..self.axis].iter().product();
        let a_block: usize = a_shape[self.axis..].iter().product();
        let b_block: usize = b_shape[self.axis..].iter().product();
        let g = ctx.grad_out;

        let mut ga = ctx.needs[0].then(|| vec![T::zero(); outer * a_block]);
        let mut gb = ctx.needs[1].then(|| vec![T::zero(); outer * b_block]);
        for o in 0..outer {
            let base = o * (a_block + b_block);
            if let Some(ga) = ga.as_mut() {
                ga[o * a_block..(o + 1) * a_block].copy_from_slice(&g[base..base + a_block]);
            }
            if let Some(gb) = gb.as_mut() {
                gb[o * b_block..(o + 1) * b_block]
                    .copy_from_slice(&g[base + a_block..base + a_block + b_block]);
            }
        }
        vec![ga, gb]
    }
}

/// Concatenate two tensors along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    let compatible = sa.len() == sb.len()
        && axis < sa.len()
        && sa
            .iter()
            .zip(sb)
            .enumerate()
            .all(|(d, (x, y))| d == axis || x == y);
    if !compatible {
        return Err(Error::ConcatMismatch {
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let mut out_shape = sa.to_vec();
    out_shape[axis] = sa[axis] + sb[axis];
    let outer: usize = sa[..axis].iter().product();
    let a_block: usize = sa[axis..].iter().product();
    let b_block: usize = sb[axis..].iter().product();

    let mut data = Vec::with_capacity(outer * (a_block + b_block));
    for o in 0..outer {
        data.extend_from_slice(&a.data()[o * a_block..(o + 1) * a_block]);
        data.extend_from_slice(&b.data()[o * b_block..(o + 1) * b_block]);
    }
    Ok(Tensor::from_op(
        out_shape,
        data,
        Box::new(ConcatOp { axis }),
        vec![a.clone(), b.clone()],
    ))
}

// ---------------------------------------------------------------------------
// reshape / flatten
// ---------------------------------------------------------------------------

struct ReshapeOp;

impl<T: Scalar> TensorOp<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![ctx.needs[0].then(|| ctx.grad_out.to_vec())]
    }
}

pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if shape.iter().product::<usize>() != x.numel() {
        return Err(Error::ShapeMismatch {
            op: "reshape",
            lhs: x.shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    Ok(Tensor::from_op(
        shape.to_vec(),
        x.data().to_vec(),
        Box::new(ReshapeOp),
        vec![x.clone()],
    ))
}

/// Collapse `[N, ...]` to `[N, rest]`.
pub fn flatten<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.shape()[0];
    reshape(x, &[n, x.numel() / n])
}

// ---------------------------------------------------------------------------
// bias
// ---------------------------------------------------------------------------

struct AddBiasOp {
    axis: usize,
}

impl<T: Scalar> TensorOp<T> for AddBiasOp {
    fn name(&self) -> &'static str {
        "add_bias"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        let shape = ctx.inputs[0].shape();
        let len = shape[self.axis];
        let inner: usize = shape[self.axis + 1..].iter().product();
        let g = ctx.grad_out;
        let gx = ctx.needs[0].then(|| g.to_vec());
        let gb = ctx.needs[1].then(|| {
            let mut db = vec![T::zero(); len];
            for (j, gj) in g.iter().enumerate() {
                db[(j / inner) % len] += *gj;
            }
            db
        });
        vec![gx, gb]
    }
}

/// Broadcast-add a rank-1 bias along `axis` of `x`.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() || bias.shape() != [shape[axis]] {
        return Err(Error::ShapeMismatch {
            op: "add_bias",
            lhs: shape.to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let b = bias.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(j, &v)| v + b[(j / inner) % len])
        .collect();
    Ok(Tensor::from_op(
        shape.to_vec(),
        data,
        Box::new(AddBiasOp { axis }),
        vec![x.clone(), bias.clone()],
    ))
}

/// Fully connected layer: `x[N, in] @ w[in, out] + b[out]`.
pub fn dense<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    add_bias(&ops::matmul(x, w)?, b, 1)
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

struct SoftmaxOp;

impl<T: Scalar> TensorOp<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        if !ctx.needs[0] {
            return vec![None];
        }
        let y = ctx.out_data;
        let g = ctx.grad_out;
        let k = ctx.out_shape[1];
        let mut dx = vec![T::zero(); y.len()];
        for r in 0..ctx.out_shape[0] {
            let row = r * k;
            let mut dot = T::zero();
            for j in 0..k {
                dot += g[row + j] * y[row + j];
            }
            for j in 0..k {
                dx[row + j] = y[row + j] * (g[row + j] - dot);
            }
        }
        vec![Some(dx)]
    }
}

/// Row softmax of `x: [N, K]`; each output row is a probability simplex point.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "softmax",
            lhs: shape.to_vec(),
            rhs: vec![],
        });
    }
    let (n, k) = (shape[0], shape[1]);
    let xd = x.data();
    let mut data = vec![T::zero(); n * k];
    for r in 0..n {
        let row = &xd[r * k..(r + 1) * k];
        let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for j in 0..k {
            let e = (row[j] - m).exp();
            data[r * k + j] = e;
            z += e;
        }
        for j in 0..k {
            data[r * k + j] = data[r * k + j] / z;
        }
    }
    Ok(Tensor::from_op(
        shape.to_vec(),
        data,
        Box::new(SoftmaxOp),
        vec![x.clone()],
    ))
}

/// Mean over the spatial grid of `[N, C, H, W]`, yielding `[N, C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "global_avg_pool",
            lhs: x.shape().to_vec(),
            rhs: vec![],
        });
    }
    ops::reduce(x, ops::ReduceKind::Mean, &[2, 3], false)
}

// ---------------------------------------------------------------------------
// per-image min-max normalization
// ---------------------------------------------------------------------------

const MINMAX_EPS: f64 = 1e-7;

struct MinMaxNormOp<T> {
    /// Per sample: (argmin, argmax, denominator).
    saved: Vec<(usize, usize, T)>,
}

impl<T: Scalar> TensorOp<T> for MinMaxNormOp<T> {
    fn name(&self) -> &'static str {
        "minmax_norm"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        if !ctx.needs[0] {
            return vec![None];
        }
        let y = ctx.out_data;
        let g = ctx.grad_out;
        let n = ctx.inputs[0].shape()[0];
        let plane = y.len() / n;
        let mut dx = vec![T::zero(); y.len()];
        for s in 0..n {
            let (imin, imax, denom) = self.saved[s];
            let base = s * plane;
            let mut gsum = T::zero();
            let mut gysum = T::zero();
            for j in 0..plane {
                let gj = g[base + j];
                dx[base + j] = gj / denom;
                gsum += gj;
                gysum += gj * y[base + j];
            }
            // Shifting the minimum moves every output; shifting the maximum
            // rescales. y_i = (x_i - min) / denom.
            dx[base + imin] = dx[base + imin] - gsum / denom + gysum / denom;
            dx[base + imax] = dx[base + imax] - gysum / denom;
        }
        vec![Some(dx)]
    }
}

/// Rescale each sample of `[N, C, H, W]` to `[0, 1]` via
/// `(x - min) / (max - min + eps)`. A constant sample maps to all zeros.
pub fn minmax_normalize<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "minmax_norm",
            lhs: shape.to_vec(),
            rhs: vec![],
        });
    }
    let n = shape[0];
    let plane = x.numel() / n;
    let xd = x.data();
    let eps = T::cast(MINMAX_EPS);
    let mut data = vec![T::zero(); xd.len()];
    let mut saved = Vec::with_capacity(n);
    for s in 0..n {
        let base = s * plane;
        let (mut imin, mut imax) = (0usize, 0usize);
        for j in 1..plane {
            if xd[base + j] < xd[base + imin] {
                imin = j;
            }
            if xd[base + j] > xd[base + imax] {
                imax = j;
            }
        }
        let lo = xd[base + imin];
        let denom = xd[base + imax] - lo + eps;
        for j in 0..plane {
            data[base + j] = (xd[base + j] - lo) / denom;
        }
        saved.push((imin, imax, denom));
    }
    Ok(Tensor::from_op(
        shape.to_vec(),
        data,
        Box::new(MinMaxNormOp { saved }),
        vec![x.clone()],
    ))
}

// ---------------------------------------------------------------------------
// coordinate channels
// ---------------------------------------------------------------------------

/// Normalized zero-centered coordinate maps for an `h x w` grid.
/// Row map: `k/(h-1) - 0.5`; column map: `l/(w-1) - 0.5`. A single-extent
/// dimension yields an all-zero map.
pub fn coord_maps<T: Scalar>(h: usize, w: usize) -> (Vec<T>, Vec<T>) {
    let half = T::cast(0.5);
    let coord = |i: usize, n: usize| {
        if n <= 1 {
            T::zero()
        } else {
            T::cast(i as f64 / (n - 1) as f64) - half
        }
    };
    let mut rows = Vec::with_capacity(h * w);
    let mut cols = Vec::with_capacity(h * w);
    for k in 0..h {
        for l in 0..w {
            rows.push(coord(k, h));
            cols.push(coord(l, w));
        }
    }
    (rows, cols)
}

/// Append two coordinate channels (row map, then column map) to
/// `x: [N, C, H, W]`, giving `[N, C+2, H, W]`. The coordinate channels are
/// functions of the shape only and carry no gradient.
pub fn coordconv_augment<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "coordconv",
            lhs: shape.to_vec(),
            rhs: vec![],
        });
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let (rows, cols) = coord_maps::<T>(h, w);
    let mut maps = Vec::with_capacity(2 * h * w);
    maps.extend_from_slice(&rows);
    maps.extend_from_slice(&cols);
    let mut batched = Vec::with_capacity(n * 2 * h * w);
    for _ in 0..n {
        batched.extend_from_slice(&maps);
    }
    let coords = Tensor::new(&[n, 2, h, w], batched)?;
    concat(x, &coords, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{mean_all, sum_all};
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn concat_channel_mismatch_is_rejected() {
        let a = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let b = Tensor::<f32>::zeros(&[1, 2, 3, 4]);
        assert!(matches!(
            concat(&a, &b, 1),
            Err(Error::ConcatMismatch { .. })
        ));
    }

    #[test]
    fn concat_roundtrips_gradient() {
        let a = Tensor::<f64>::param(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f64>::param(&[1, 2, 2, 2], vec![0.0; 8]).unwrap();
        let y = concat(&a, &b, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 2, 2]);
        sum_all(&y).unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 4]);
        assert_eq!(b.grad().unwrap(), vec![1.0; 8]);
    }

    #[test]
    fn softmax_of_uniform_logits() {
        let x = Tensor::<f32>::zeros(&[1, 4]);
        let y = softmax(&x).unwrap();
        for &v in y.data() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_rows_are_simplex_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..40).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y = softmax(&Tensor::<f32>::new(&[10, 4], data).unwrap()).unwrap();
        for r in 0..10 {
            let row = &y.data()[r * 4..(r + 1) * 4];
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let x = Tensor::<f64>::new(&[2, 3], vec![0.1, -0.4, 0.9, 1.2, 0.0, -0.8]).unwrap();
        let w = Tensor::<f64>::new(&[2, 3], vec![0.5, 1.5, -0.3, 0.2, 0.7, 1.1]).unwrap();
        let err =
            finite_diff_check(|t| mean_all(&crate::ops::mul(&softmax(t)?, &w)?), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn global_avg_pool_direct() {
        let x = Tensor::<f32>::new(&[1, 1, 2, 2], vec![1., 3., 5., 7.]).unwrap();
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn minmax_affine_case() {
        let x = Tensor::<f32>::new(&[1, 1, 1, 3], vec![2.0, 4.0, 6.0]).unwrap();
        let y = minmax_normalize(&x).unwrap();
        let got = y.data();
        assert!((got[0] - 0.0).abs() < 1e-6);
        assert!((got[1] - 0.5).abs() < 1e-6);
        assert!((got[2] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn minmax_constant_maps_to_zero() {
        let x = Tensor::<f32>::full(&[1, 1, 2, 2], 3.7);
        let y = minmax_normalize(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn minmax_hits_unit_range_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f32> = (0..64).map(|_| rng.random_range(-4.0..9.0)).collect();
        let y = minmax_normalize(&Tensor::<f32>::new(&[1, 1, 8, 8], data).unwrap()).unwrap();
        let lo = y.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = y.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert!(lo.abs() < 1e-5, "min = {lo}");
        assert!((hi - 1.0).abs() < 1e-5, "max = {hi}");
    }

    #[test]
    fn minmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let data: Vec<f64> = (0..32).map(|_| rng.random_range(0.0..1.0)).collect();
        let x = Tensor::<f64>::new(&[2, 1, 4, 4], data).unwrap();
        let w: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Tensor::<f64>::new(&[2, 1, 4, 4], w).unwrap();
        let err = finite_diff_check(
            |t| mean_all(&crate::ops::mul(&minmax_normalize(t)?, &w)?),
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "err = {err}");
    }

    #[test]
    fn coord_maps_center_and_corners() {
        let (rows, cols) = coord_maps::<f64>(5, 5);
        // center pixel of an odd-extent map is exactly zero
        assert_eq!(rows[2 * 5 + 2], 0.0);
        assert_eq!(cols[2 * 5 + 2], 0.0);
        // top-left and bottom-right corners hit the range endpoints
        assert_eq!((rows[0], cols[0]), (-0.5, -0.5));
        assert_eq!((rows[24], cols[24]), (0.5, 0.5));
    }

    #[test]
    fn coord_maps_row_values() {
        let (_, cols) = coord_maps::<f64>(1, 3);
        assert_eq!(cols, vec![-0.5, 0.0, 0.5]);
    }

    #[test]
    fn coord_maps_degenerate_extent_is_zero() {
        let (rows, cols) = coord_maps::<f64>(1, 4);
        assert!(rows.iter().all(|&v| v == 0.0));
        assert!(cols.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn coordconv_shapes_and_determinism() {
        let x = Tensor::<f32>::zeros(&[2, 1, 4, 4]);
        let y = coordconv_augment(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4, 4]);
        let y2 = coordconv_augment(&Tensor::<f32>::zeros(&[2, 1, 4, 4])).unwrap();
        assert_eq!(y.data(), y2.data());
    }

    #[test]
    fn dense_bias_gradient() {
        let x = Tensor::<f64>::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let w = Tensor::<f64>::zeros(&[3, 2]);
        let b = Tensor::<f64>::param(&[2], vec![0.0, 0.0]).unwrap();
        sum_all(&dense(&x, &w, &b).unwrap())
            .unwrap()
            .backward()
            .unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0]);
    }
}
