//! Axis reductions: sum, mean, min, max and population standard deviation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BackwardContext, Tensor, TensorOp};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Min,
    Max,
    /// Population convention: divide by the element count, not count - 1.
    Stdev,
}

impl ReduceKind {
    fn name(self) -> &'static str {
        match self {
            ReduceKind::Sum => "reduce_sum",
            ReduceKind::Mean => "reduce_mean",
            ReduceKind::Min => "reduce_min",
            ReduceKind::Max => "reduce_max",
            ReduceKind::Stdev => "reduce_stdev",
        }
    }
}

/// For each input flat index, the flat index of its output cell.
fn out_index_map(shape: &[usize], reduced: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let rank = shape.len();
    let mut out_shape_kept: Vec<usize> = Vec::new();
    for d in 0..rank {
        if !reduced[d] {
            out_shape_kept.push(shape[d]);
        }
    }
    // Strides of the output over the kept dims.
    let mut out_strides = vec![0usize; rank];
    let mut acc = 1usize;
    for d in (0..rank).rev() {
        if !reduced[d] {
            out_strides[d] = acc;
            acc *= shape[d];
        }
    }
    let n: usize = shape.iter().product();
    let mut map = vec![0usize; n];
    let mut idx = vec![0usize; rank];
    for item in map.iter_mut() {
        let mut o = 0usize;
        for d in 0..rank {
            if !reduced[d] {
                o += idx[d] * out_strides[d];
            }
        }
        *item = o;
        // increment multi-index
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (map, out_shape_kept)
}

struct ReduceOp<T> {
    kind: ReduceKind,
    map: Vec<usize>,
    count: usize,
    /// First extremal input index per output cell (min/max).
    arg: Vec<usize>,
    /// Per-cell mean and stdev (stdev only).
    stats: Vec<(T, T)>,
}

impl<T: Scalar> TensorOp<T> for ReduceOp<T> {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        if !ctx.needs[0] {
            return vec![None];
        }
        let x = ctx.inputs[0].data();
        let g = ctx.grad_out;
        let mut dx = vec![T::zero(); x.len()];
        match self.kind {
            ReduceKind::Sum => {
                for (i, &o) in self.map.iter().enumerate() {
                    dx[i] = g[o];
                }
            }
            ReduceKind::Mean => {
                let inv = T::one() / T::cast(self.count as f64);
                for (i, &o) in self.map.iter().enumerate() {
                    dx[i] = g[o] * inv;
                }
            }
            ReduceKind::Min | ReduceKind::Max => {
                for (o, &i) in self.arg.iter().enumerate() {
                    dx[i] = g[o];
                }
            }
            ReduceKind::Stdev => {
                // d sigma / d x_i = (x_i - mu) / (n * sigma); zero when sigma = 0.
                let n = T::cast(self.count as f64);
                for (i, &o) in self.map.iter().enumerate() {
                    let (mu, sigma) = self.stats[o];
                    if sigma > T::zero() {
                        dx[i] = g[o] * (x[i] - mu) / (n * sigma);
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Reduce `x` over `axes`. With `keepdims` the reduced axes stay as size-1;
/// otherwise they are dropped (a full reduction yields shape `[1]`).
pub fn reduce<T: Scalar>(
    x: &Tensor<T>,
    kind: ReduceKind,
    axes: &[usize],
    keepdims: bool,
) -> Result<Tensor<T>> {
    let rank = x.shape().len();
    let mut reduced = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(Error::InvalidAxis {
                op: kind.name(),
                axis: a,
                rank,
            });
        }
        reduced[a] = true;
    }
    if axes.is_empty() {
        reduced.iter_mut().for_each(|r| *r = true);
    }

    let (map, out_shape_kept) = out_index_map(x.shape(), &reduced);
    let out_n: usize = out_shape_kept.iter().product::<usize>().max(1);
    let count = x.numel() / out_n;
    let data = x.data();

    let mut out = vec![T::zero(); out_n];
    let mut arg = Vec::new();
    let mut stats = Vec::new();

    match kind {
        ReduceKind::Sum | ReduceKind::Mean => {
            for (i, &o) in map.iter().enumerate() {
                out[o] += data[i];
            }
            if kind == ReduceKind::Mean {
                let inv = T::one() / T::cast(count as f64);
                out.iter_mut().for_each(|v| *v = *v * inv);
            }
        }
        ReduceKind::Min | ReduceKind::Max => {
            let mut seen = vec![false; out_n];
            arg = vec![0usize; out_n];
            for (i, &o) in map.iter().enumerate() {
                let better = !seen[o]
                    || (kind == ReduceKind::Max && data[i] > out[o])
                    || (kind == ReduceKind::Min && data[i] < out[o]);
                if better {
                    out[o] = data[i];
                    arg[o] = i;
                    seen[o] = true;
                }
            }
        }
        ReduceKind::Stdev => {
            let mut sums = vec![T::zero(); out_n];
            for (i, &o) in map.iter().enumerate() {
                sums[o] += data[i];
            }
            let inv = T::one() / T::cast(count as f64);
            let means: Vec<T> = sums.iter().map(|&s| s * inv).collect();
            let mut vars = vec![T::zero(); out_n];
            for (i, &o) in map.iter().enumerate() {
                let d = data[i] - means[o];
                vars[o] += d * d;
            }
            stats = Vec::with_capacity(out_n);
            for o in 0..out_n {
                let sigma = (vars[o] * inv).sqrt();
                out[o] = sigma;
                stats.push((means[o], sigma));
            }
        }
    }

    let out_shape: Vec<usize> = if keepdims {
        x.shape()
            .iter()
            .enumerate()
            .map(|(d, &s)| if reduced[d] { 1 } else { s })
            .collect()
    } else if out_shape_kept.is_empty() {
        vec![1]
    } else {
        out_shape_kept
    };

    Ok(Tensor::from_op(
        out_shape,
        out,
        Box::new(ReduceOp {
            kind,
            map,
            count,
            arg,
            stats,
        }),
        vec![x.clone()],
    ))
}

/// Sum of all elements as a scalar tensor.
pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    reduce(x, ReduceKind::Sum, &[], false)
}

/// Mean of all elements as a scalar tensor.
pub fn mean_all<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    reduce(x, ReduceKind::Mean, &[], false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;

    #[test]
    fn mean_direct() {
        let x = Tensor::<f32>::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(mean_all(&x).unwrap().item(), 2.5);
    }

    #[test]
    fn stdev_of_constant_is_zero() {
        for c in [0.0f32, -3.5, 11.0] {
            let x = Tensor::<f32>::full(&[3], c);
            assert_eq!(
                reduce(&x, ReduceKind::Stdev, &[], false).unwrap().item(),
                0.0
            );
        }
    }

    #[test]
    fn stdev_uses_population_convention() {
        let x = Tensor::<f64>::new(&[2], vec![0.0, 2.0]).unwrap();
        // population stdev of {0, 2} is 1
        assert!((reduce(&x, ReduceKind::Stdev, &[], false).unwrap().item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_axis_is_rejected() {
        let x = Tensor::<f32>::zeros(&[2, 2]);
        assert!(matches!(
            reduce(&x, ReduceKind::Sum, &[2], false),
            Err(Error::InvalidAxis {
                axis: 2,
                rank: 2,
                ..
            })
        ));
    }

    #[test]
    fn axis_reduction_shapes() {
        let x = Tensor::<f32>::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let m0 = reduce(&x, ReduceKind::Mean, &[0], false).unwrap();
        assert_eq!(m0.shape(), &[3]);
        assert_eq!(m0.data(), &[2.5, 3.5, 4.5]);
        let m1 = reduce(&x, ReduceKind::Sum, &[1], true).unwrap();
        assert_eq!(m1.shape(), &[2, 1]);
        assert_eq!(m1.data(), &[6.0, 15.0]);
    }

    #[test]
    fn max_routes_gradient_to_first_extremum() {
        let x = Tensor::<f64>::param(&[4], vec![1.0, 3.0, 3.0, 2.0]).unwrap();
        reduce(&x, ReduceKind::Max, &[], false)
            .unwrap()
            .backward()
            .unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn reduction_gradients_match_finite_differences() {
        let x = Tensor::<f64>::new(&[2, 3], vec![0.3, -0.9, 1.4, 0.1, 2.2, -0.5]).unwrap();
        for kind in [ReduceKind::Sum, ReduceKind::Mean, ReduceKind::Stdev] {
            let err = finite_diff_check(|t| reduce(t, kind, &[], false), &x, 1e-5).unwrap();
            assert!(err < 1e-6, "{kind:?}: err = {err}");
        }
        // per-axis mean
        let err = finite_diff_check(
            |t| mean_all(&reduce(t, ReduceKind::Mean, &[1], false)?),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "axis mean err = {err}");
    }
}
