use super::parallel::for_row_blocks;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// `c[m×n] = a[m×k] · b[k×n]`; each `c[i,j]` sums over the inner index in ascending order.
pub(crate) fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for_row_blocks(c, n, |row0, block| {
        for (r, c_row) in block.chunks_exact_mut(n).enumerate() {
            let i = row0 + r;
            c_row.fill(T::zero());
            let a_row = &a[i * k..(i + 1) * k];
            for (t, &av) in a_row.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let b_row = &b[t * n..(t + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += av * bv;
                }
            }
        }
    });
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`; sums over `m` in ascending order.
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for_row_blocks(c, n, |row0, block| {
        block.fill(T::zero());
        let rows = block.len() / n.max(1);
        for r in 0..m {
            let a_row = &a[r * k + row0..r * k + row0 + rows];
            let b_row = &b[r * n..(r + 1) * n];
            for (i, &av) in a_row.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let c_row = &mut block[i * n..(i + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += av * bv;
                }
            }
        }
    });
}

/// `c[m×k] = a[m×n] · b[k×n]ᵀ`; each entry is a left-to-right dot product.
pub(crate) fn gemm_nt<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for_row_blocks(c, k, |row0, block| {
        for (r, c_row) in block.chunks_exact_mut(k).enumerate() {
            let i = row0 + r;
            let a_row = &a[i * n..(i + 1) * n];
            for (j, cv) in c_row.iter_mut().enumerate() {
                let b_row = &b[j * n..(j + 1) * n];
                let mut acc = T::zero();
                for (&x, &y) in a_row.iter().zip(b_row) {
                    acc += x * y;
                }
                *cv = acc;
            }
        }
    });
}

/// Matrix product of two rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::dim(
            "matmul",
            format!("expected matrices, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::dim("matmul", format!("inner dimensions {k} and {k2} differ")));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_nn(m, k, n, a.data(), b.data(), &mut out);
    Tensor::from_parts(vec![m, n], out).ensure_finite("matmul")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    /// `x ↦ max(x, 0)`; the second operand is ignored.
    Max0,
    /// Multiplies by a scalar operand.
    Scale,
}

pub enum Operand<'a, T: Scalar> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

pub fn elementwise<T: Scalar>(op: ElementwiseOp, a: &Tensor<T>, b: Operand<'_, T>) -> Result<Tensor<T>> {
    let apply = |x: T, y: T| match op {
        ElementwiseOp::Add => x + y,
        ElementwiseOp::Sub => x - y,
        ElementwiseOp::Mul | ElementwiseOp::Scale => x * y,
        ElementwiseOp::Max0 => x.max(T::zero()),
    };
    let out = match b {
        Operand::Scalar(s) => a.map(|x| apply(x, s)),
        Operand::Tensor(t) if op == ElementwiseOp::Max0 => {
            let _ = t;
            a.map(|x| apply(x, T::zero()))
        }
        Operand::Tensor(t) => {
            if op == ElementwiseOp::Scale {
                return Err(Error::dim("elementwise", "scale needs a scalar operand"));
            }
            if t.shape() != a.shape() {
                return Err(Error::dim("elementwise", format!("{:?} vs {:?}", a.shape(), t.shape())));
            }
            let data = a.data().iter().zip(t.data()).map(|(&x, &y)| apply(x, y)).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        }
    };
    out.ensure_finite("elementwise")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Index of the largest value along the last axis; ties go to the lowest index.
    ArgmaxLastAxis,
}

pub fn reduce<T: Scalar>(op: ReduceOp, a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.is_empty() {
        return Err(Error::EmptyTensor("reduce"));
    }
    match op {
        ReduceOp::Sum => Ok(Tensor::from_vec(vec![sum_in_order(a.data())])),
        ReduceOp::Mean => {
            let n = T::from_f64(a.len() as f64);
            Ok(Tensor::from_vec(vec![sum_in_order(a.data()) / n]))
        }
        ReduceOp::ArgmaxLastAxis => {
            let last = *a.shape().last().expect("non-empty shape");
            let lead = a.shape()[..a.rank() - 1].to_vec();
            let data = a
                .data()
                .chunks_exact(last)
                .map(|row| T::from_f64(argmax(row) as f64))
                .collect();
            let shape = if lead.is_empty() { vec![1] } else { lead };
            Ok(Tensor::from_parts(shape, data))
        }
    }
}

fn sum_in_order<T: Scalar>(values: &[T]) -> T {
    let mut acc = T::zero();
    for &v in values {
        acc += v;
    }
    acc
}

pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
