//! Dense matrix product backed by the tuned gemm kernels of the element type.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BackwardContext, Tensor, TensorOp};

/// `c[m,n] = a[m,k] @ b[k,n]` for row-major slices with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    c: &mut [T],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            T::zero(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct MatmulOp {
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Scalar> TensorOp<T> for MatmulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let a = ctx.inputs[0].data();
        let b = ctx.inputs[1].data();
        let g = ctx.grad_out;

        // dA = g @ B^T, dB = A^T @ g (transposes expressed via strides).
        let ga = ctx.needs[0].then(|| {
            let mut da = vec![T::zero(); m * k];
            gemm(m, n, k, g, n as isize, 1, b, 1, n as isize, &mut da);
            da
        });
        let gb = ctx.needs[1].then(|| {
            let mut db = vec![T::zero(); k * n];
            gemm(k, m, n, a, 1, k as isize, g, n as isize, 1, &mut db);
            db
        });
        vec![ga, gb]
    }
}

/// Matrix product of `a: [m, k]` and `b: [k, n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    if sa[1] != sb[0] {
        return Err(Error::InnerExtentMismatch {
            lhs: sa[1],
            rhs: sb[0],
        });
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![T::zero(); m * n];
    gemm(
        m,
        k,
        n,
        a.data(),
        k as isize,
        1,
        b.data(),
        n as isize,
        1,
        &mut out,
    );
    Ok(Tensor::from_op(
        vec![m, n],
        out,
        Box::new(MatmulOp { m, k, n }),
        vec![a.clone(), b.clone()],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::sum_all;
    use crate::tensor::finite_diff_check;

    #[test]
    fn identity_matrix_is_neutral() {
        let eye = Tensor::<f32>::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::<f32>::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&eye, &x).unwrap().data(), x.data());
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::<f32>::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::new(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn inner_extent_mismatch_is_rejected() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        assert!(matches!(
            matmul(&a, &b),
            Err(Error::InnerExtentMismatch { lhs: 3, rhs: 4 })
        ));
    }

    #[test]
    fn both_gradients_match_finite_differences() {
        let a = Tensor::<f64>::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.3, 1.1, -0.7]).unwrap();
        let b = Tensor::<f64>::new(&[3, 2], vec![1.5, 0.2, -0.4, 0.9, 2.0, -1.3]).unwrap();
        let ea = finite_diff_check(|t| sum_all(&matmul(t, &b)?), &a, 1e-5).unwrap();
        let eb = finite_diff_check(|t| sum_all(&matmul(&a, t)?), &b, 1e-5).unwrap();
        assert!(ea < 1e-4 && eb < 1e-4, "ea = {ea}, eb = {eb}");
    }
}
