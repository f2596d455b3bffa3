//! Elementwise binary and unary operations.
//!
//! Binary operands must have equal shapes, or one operand may be a
//! one-element tensor that broadcasts against the other. No other implicit
//! reshaping is performed.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BackwardContext, Tensor, TensorOp};

/// Fixed chunk length for parallel elementwise loops, so results never
/// depend on the worker count.
const PAR_CHUNK: usize = 1 << 15;

/// Parallel elementwise map with deterministic chunking; falls back to a
/// plain loop for small tensors.
fn map_chunks<T: Scalar>(n: usize, f: impl Fn(usize, &mut [T]) + Sync) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    if n <= PAR_CHUNK {
        f(0, &mut out);
    } else {
        out.par_chunks_mut(PAR_CHUNK)
            .enumerate()
            .for_each(|(c, chunk)| f(c * PAR_CHUNK, chunk));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Max,
    Min,
}

impl BinKind {
    fn name(self) -> &'static str {
        match self {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
            BinKind::Pow => "pow",
            BinKind::Max => "max",
            BinKind::Min => "min",
        }
    }

    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinKind::Add => a + b,
            BinKind::Sub => a - b,
            BinKind::Mul => a * b,
            BinKind::Div => a / b,
            BinKind::Pow => a.powf(b),
            BinKind::Max => {
                if b > a {
                    b
                } else {
                    a
                }
            }
            BinKind::Min => {
                if b < a {
                    b
                } else {
                    a
                }
            }
        }
    }
}

struct BinaryOp {
    kind: BinKind,
}

/// Value of operand `i` at broadcast position `j`.
#[inline]
fn at<T: Scalar>(x: &[T], j: usize) -> T {
    if x.len() == 1 {
        x[0]
    } else {
        x[j]
    }
}

/// Fold a full-size gradient down to a one-element operand if needed.
fn shrink<T: Scalar>(grad: Vec<T>, operand_len: usize) -> Vec<T> {
    if operand_len == 1 && grad.len() != 1 {
        let mut s = T::zero();
        for g in &grad {
            s += *g;
        }
        vec![s]
    } else {
        grad
    }
}

impl<T: Scalar> TensorOp<T> for BinaryOp {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        let a = ctx.inputs[0].data();
        let b = ctx.inputs[1].data();
        let g = ctx.grad_out;
        let n = g.len();

        let ga = ctx.needs[0].then(|| {
            let kind = self.kind;
            let out = map_chunks(n, |base, chunk| {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    let j = base + k;
                    let (av, bv) = (at(a, j), at(b, j));
                    *slot = match kind {
                        BinKind::Add | BinKind::Sub => g[j],
                        BinKind::Mul => g[j] * bv,
                        BinKind::Div => g[j] / bv,
                        // d/da a^b = b * a^(b-1)
                        BinKind::Pow => g[j] * bv * av.powf(bv - T::one()),
                        BinKind::Max => {
                            if av >= bv {
                                g[j]
                            } else {
                                T::zero()
                            }
                        }
                        BinKind::Min => {
                            if av <= bv {
                                g[j]
                            } else {
                                T::zero()
                            }
                        }
                    };
                }
            });
            shrink(out, a.len())
        });

        let gb = ctx.needs[1].then(|| {
            let kind = self.kind;
            let y = ctx.out_data;
            let out = map_chunks(n, |base, chunk| {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    let j = base + k;
                    let (av, bv) = (at(a, j), at(b, j));
                    *slot = match kind {
                        BinKind::Add => g[j],
                        BinKind::Sub => -g[j],
                        BinKind::Mul => g[j] * av,
                        BinKind::Div => -g[j] * av / (bv * bv),
                        // d/db a^b = a^b * ln a, defined for a > 0 only.
                        BinKind::Pow => {
                            if av > T::zero() {
                                g[j] * y[j] * av.ln()
                            } else {
                                T::zero()
                            }
                        }
                        BinKind::Max => {
                            if bv > av {
                                g[j]
                            } else {
                                T::zero()
                            }
                        }
                        BinKind::Min => {
                            if bv < av {
                                g[j]
                            } else {
                                T::zero()
                            }
                        }
                    };
                }
            });
            shrink(out, b.len())
        });

        vec![ga, gb]
    }
}

fn binary<T: Scalar>(kind: BinKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (na, nb) = (a.numel(), b.numel());
    if !(a.shape() == b.shape() || na == 1 || nb == 1) {
        return Err(Error::ShapeMismatch {
            op: kind.name(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let out_shape = if na == 1 { b.shape() } else { a.shape() };
    let n = out_shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data = map_chunks(n, |base, chunk| {
        for (k, slot) in chunk.iter_mut().enumerate() {
            let j = base + k;
            *slot = kind.apply(at(ad, j), at(bd, j));
        }
    });
    Ok(Tensor::from_op(
        out_shape.to_vec(),
        data,
        Box::new(BinaryOp { kind }),
        vec![a.clone(), b.clone()],
    ))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(BinKind::Add, a, b)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(BinKind::Sub, a, b)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(BinKind::Mul, a, b)
}

pub fn div<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(BinKind::Div, a, b)
}

pub fn pow<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(BinKind::Pow, a, b)
}

/// Elementwise maximum; on ties the gradient routes to the first operand.
pub fn max<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(BinKind::Max, a, b)
}

/// Elementwise minimum; on ties the gradient routes to the first operand.
pub fn min<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(BinKind::Min, a, b)
}

#[derive(Clone, Copy, Debug)]
enum UnKind<T> {
    Neg,
    Exp,
    Log,
    Abs,
    Sqrt,
    Relu,
    AddScalar(T),
    MulScalar(T),
    PowScalar(T),
    Clamp(T, T),
}

struct UnaryOp<T> {
    kind: UnKind<T>,
}

impl<T: Scalar> TensorOp<T> for UnaryOp<T> {
    fn name(&self) -> &'static str {
        match self.kind {
            UnKind::Neg => "neg",
            UnKind::Exp => "exp",
            UnKind::Log => "log",
            UnKind::Abs => "abs",
            UnKind::Sqrt => "sqrt",
            UnKind::Relu => "relu",
            UnKind::AddScalar(_) => "add_scalar",
            UnKind::MulScalar(_) => "mul_scalar",
            UnKind::PowScalar(_) => "pow_scalar",
            UnKind::Clamp(..) => "clamp",
        }
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        if !ctx.needs[0] {
            return vec![None];
        }
        let x = ctx.inputs[0].data();
        let y = ctx.out_data;
        let g = ctx.grad_out;
        let kind = self.kind;
        let out = map_chunks(g.len(), |base, chunk| {
            for (k, slot) in chunk.iter_mut().enumerate() {
                let j = base + k;
                *slot = match kind {
                    UnKind::Neg => -g[j],
                    UnKind::Exp => g[j] * y[j],
                    UnKind::Log => g[j] / x[j],
                    UnKind::Abs => {
                        if x[j] > T::zero() {
                            g[j]
                        } else if x[j] < T::zero() {
                            -g[j]
                        } else {
                            T::zero()
                        }
                    }
                    UnKind::Sqrt => g[j] / ((T::one() + T::one()) * y[j]),
                    UnKind::Relu => {
                        if x[j] > T::zero() {
                            g[j]
                        } else {
                            T::zero()
                        }
                    }
                    UnKind::AddScalar(_) => g[j],
                    UnKind::MulScalar(s) => g[j] * s,
                    UnKind::PowScalar(p) => g[j] * p * x[j].powf(p - T::one()),
                    UnKind::Clamp(lo, hi) => {
                        if x[j] >= lo && x[j] <= hi {
                            g[j]
                        } else {
                            T::zero()
                        }
                    }
                };
            }
        });
        vec![Some(out)]
    }
}

fn unary<T: Scalar>(kind: UnKind<T>, x: &Tensor<T>, f: impl Fn(T) -> T + Sync) -> Tensor<T> {
    let xd = x.data();
    let data = map_chunks(xd.len(), |base, chunk| {
        for (k, slot) in chunk.iter_mut().enumerate() {
            *slot = f(xd[base + k]);
        }
    });
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        Box::new(UnaryOp { kind }),
        vec![x.clone()],
    )
}

pub fn neg<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    unary(UnKind::Neg, x, |v| -v)
}

pub fn exp<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    unary(UnKind::Exp, x, |v| v.exp())
}

/// Natural logarithm; rejects non-positive inputs.
pub fn log<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if let Some(v) = x.data().iter().find(|v| **v <= T::zero()) {
        return Err(Error::Domain {
            op: "log",
            detail: format!("log of non-positive value {v}"),
        });
    }
    Ok(unary(UnKind::Log, x, |v| v.ln()))
}

pub fn abs<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    unary(UnKind::Abs, x, |v| v.abs())
}

pub fn sqrt<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    unary(UnKind::Sqrt, x, |v| v.sqrt())
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    unary(
        UnKind::Relu,
        x,
        |v| if v > T::zero() { v } else { T::zero() },
    )
}

pub fn add_scalar<T: Scalar>(x: &Tensor<T>, s: T) -> Tensor<T> {
    unary(UnKind::AddScalar(s), x, |v| v + s)
}

pub fn mul_scalar<T: Scalar>(x: &Tensor<T>, s: T) -> Tensor<T> {
    unary(UnKind::MulScalar(s), x, |v| v * s)
}

pub fn pow_scalar<T: Scalar>(x: &Tensor<T>, p: T) -> Tensor<T> {
    unary(UnKind::PowScalar(p), x, |v| v.powf(p))
}

/// Clamp to `[lo, hi]`; the gradient passes through inside the closed range.
pub fn clamp<T: Scalar>(x: &Tensor<T>, lo: T, hi: T) -> Tensor<T> {
    unary(UnKind::Clamp(lo, hi), x, |v| {
        if v < lo {
            lo
        } else if v > hi {
            hi
        } else {
            v
        }
    })
}
