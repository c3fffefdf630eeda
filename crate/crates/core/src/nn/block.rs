//! Copies between a full tensor and its leading sub-box.

use crate::tensor::{Scalar, Tensor};

/// Contiguous copy of `t[..active[0], ..active[1], …]`.
pub fn gather_leading<T: Scalar>(t: &Tensor<T>, active: &[usize]) -> Tensor<T> {
    if t.shape() == active {
        return t.clone();
    }
    let mut out = Vec::with_capacity(active.iter().product());
    copy_box(t.data(), t.shape(), active, &mut |src, _| out.extend_from_slice(src));
    Tensor::from_parts(active.to_vec(), out)
}

/// Full-shaped zero tensor holding `block` in its leading sub-box.
pub fn scatter_leading<T: Scalar>(block: &Tensor<T>, full: &[usize]) -> Tensor<T> {
    if block.shape() == full {
        return block.clone();
    }
    let mut out = Tensor::zeros(full);
    let active = block.shape().to_vec();
    let mut offsets = Vec::new();
    copy_box(out.data(), full, &active, &mut |_, off| offsets.push(off));
    let run = *active.last().unwrap();
    let dst = out.data_mut();
    for (chunk, off) in block.data().chunks_exact(run).zip(offsets) {
        dst[off..off + run].copy_from_slice(chunk);
    }
    out
}

/// Visits every innermost run of the box in row-major order as `(slice, flat offset)`.
fn copy_box<T>(data: &[T], full: &[usize], active: &[usize], f: &mut impl FnMut(&[T], usize)) {
    let rank = full.len();
    let run = active[rank - 1];
    let mut strides = vec![1; rank];
    for d in (0..rank - 1).rev() {
        strides[d] = strides[d + 1] * full[d + 1];
    }
    let outer: usize = active[..rank - 1].iter().product();
    let mut index = vec![0usize; rank - 1];
    for _ in 0..outer {
        let off: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        f(&data[off..off + run], off);
        for d in (0..rank - 1).rev() {
            index[d] += 1;
            if index[d] < active[d] {
                break;
            }
            index[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gather_then_scatter_keeps_box() {
        let t = Tensor::<f64>::new(vec![3, 4], (0..12).map(f64::from).collect()).unwrap();
        let g = gather_leading(&t, &[2, 3]);
        assert_eq!(g.data(), &[0.0, 1.0, 2.0, 4.0, 5.0, 6.0]);
        let s = scatter_leading(&g, &[3, 4]);
        assert_eq!(s.data(), &[0.0, 1.0, 2.0, 0.0, 4.0, 5.0, 6.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rank_four_box() {
        let t = Tensor::<f64>::new(vec![1, 2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        let g = gather_leading(&t, &[1, 2, 1, 2]);
        assert_eq!(g.data(), &[0.0, 1.0, 6.0, 7.0]);
    }
}
