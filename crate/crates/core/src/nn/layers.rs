//! Stateless layer kernels. Activations are `[rows, channels]` views of NHWC data.

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the old value in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.9;

/// `y = x · w + b` for `x: [n, in]`, `w: [in, out]`.
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&[T]>) -> Result<Tensor<T>> {
    let n = x.batch();
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    if x.row_len() != fan_in {
        return Err(Error::dim(
            "dense",
            format!("input rows have {} values, weight expects {fan_in}", x.row_len()),
        ));
    }
    let mut out = vec![T::zero(); n * fan_out];
    gemm_nn(n, fan_in, fan_out, x.data(), w.data(), &mut out);
    if let Some(b) = b {
        for row in out.chunks_exact_mut(fan_out) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
    Tensor::new(vec![n, fan_out], out)
}

/// Returns `(dx, dw, db)`; `dx` keeps the shape of `x`.
pub fn dense_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let n = x.batch();
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    let mut dw = vec![T::zero(); fan_in * fan_out];
    gemm_tn(n, fan_in, fan_out, x.data(), dy.data(), &mut dw);
    let mut dx = vec![T::zero(); n * fan_in];
    gemm_nt(n, fan_out, fan_in, dy.data(), w.data(), &mut dx);
    let db = column_sums(dy.data(), fan_out);
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        db,
    )
}

pub(crate) fn column_sums<T: Scalar>(data: &[T], cols: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); cols];
    for row in data.chunks_exact(cols) {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    sums
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient through a ReLU given its output `y`.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_parts(dy.shape().to_vec(), data)
}

/// `[n, h, w, c] → [n, c]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.batch();
    let c = *x.shape().last().unwrap();
    let hw = x.row_len() / c;
    let scale = T::from_f64(1.0 / hw as f64);
    let mut out = vec![T::zero(); n * c];
    for (b, sample) in x.data().chunks_exact(hw * c).enumerate() {
        let o = &mut out[b * c..(b + 1) * c];
        for pixel in sample.chunks_exact(c) {
            for (acc, &v) in o.iter_mut().zip(pixel) {
                *acc += v;
            }
        }
        o.iter_mut().for_each(|v| *v *= scale);
    }
    Tensor::from_parts(vec![n, c], out)
}

pub fn global_avg_pool_backward<T: Scalar>(shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let c = *shape.last().unwrap();
    let hw: usize = shape[1..shape.len() - 1].iter().product();
    let scale = T::from_f64(1.0 / hw as f64);
    let mut out = Vec::with_capacity(shape.iter().product());
    for g in dy.data().chunks_exact(c) {
        for _ in 0..hw {
            out.extend(g.iter().map(|&v| v * scale));
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// Values cached by a train-mode batch-norm pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T: Scalar> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Batch statistics for the running-average update: `(mean, unbiased variance)`.
pub type BatchStats<T> = (Vec<T>, Vec<T>);

/// Normalizes each trailing-axis channel with the batch statistics.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    scale: &[T],
    shift: &[T],
) -> Result<(Tensor<T>, BatchNormCache<T>, BatchStats<T>)> {
    let c = check_channels(x, scale.len())?;
    let m = x.len() / c;
    let inv_m = T::from_f64(1.0 / m as f64);
    let mean: Vec<T> = column_sums(x.data(), c).into_iter().map(|s| s * inv_m).collect();
    let mut var = vec![T::zero(); c];
    for row in x.data().chunks_exact(c) {
        for ((v, &xv), &mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = xv - mu;
            *v += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v *= inv_m);
    let eps = T::from_f64(BN_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(c) {
        for ch in 0..c {
            let h = (row[ch] - mean[ch]) * inv_std[ch];
            xhat.push(h);
            y.push(scale[ch] * h + shift[ch]);
        }
    }
    let unbiased = if m > 1 {
        let f = T::from_f64(m as f64 / (m - 1) as f64);
        var.iter().map(|&v| v * f).collect()
    } else {
        var
    };
    Ok((
        Tensor::from_parts(x.shape().to_vec(), y),
        BatchNormCache {
            xhat: Tensor::from_parts(x.shape().to_vec(), xhat),
            inv_std,
        },
        (mean, unbiased),
    ))
}

/// Normalizes with stored running statistics.
pub fn batchnorm_eval<T: Scalar>(x: &Tensor<T>, scale: &[T], shift: &[T], mean: &[T], var: &[T]) -> Result<Tensor<T>> {
    let c = check_channels(x, scale.len())?;
    let eps = T::from_f64(BN_EPS);
    let k: Vec<T> = scale.iter().zip(var).map(|(&g, &v)| g / (v + eps).sqrt()).collect();
    let mut y = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(c) {
        for ch in 0..c {
            y.push(k[ch] * (row[ch] - mean[ch]) + shift[ch]);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

/// Returns `(dx, dscale, dshift)` for a train-mode pass.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    scale: &[T],
    dy: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let c = scale.len();
    let m = dy.len() / c;
    let mut dscale = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    for (g_row, h_row) in dy.data().chunks_exact(c).zip(cache.xhat.data().chunks_exact(c)) {
        for ch in 0..c {
            dshift[ch] += g_row[ch];
            dscale[ch] += g_row[ch] * h_row[ch];
        }
    }
    // Σ dxhat = γ·Σdy and Σ dxhat·xhat = γ·Σ dy·xhat
    let mf = T::from_f64(m as f64);
    let inv_m = T::from_f64(1.0 / m as f64);
    let mut dx = Vec::with_capacity(dy.len());
    for (g_row, h_row) in dy.data().chunks_exact(c).zip(cache.xhat.data().chunks_exact(c)) {
        for ch in 0..c {
            let dxhat = g_row[ch] * scale[ch];
            let v = mf * dxhat - scale[ch] * dshift[ch] - h_row[ch] * scale[ch] * dscale[ch];
            dx.push(v * cache.inv_std[ch] * inv_m);
        }
    }
    (Tensor::from_parts(dy.shape().to_vec(), dx), dscale, dshift)
}

fn check_channels<T: Scalar>(x: &Tensor<T>, c: usize) -> Result<usize> {
    if x.shape().last() != Some(&c) {
        return Err(Error::dim(
            "batchnorm",
            format!("input {:?} vs {c} channels of state", x.shape()),
        ));
    }
    Ok(c)
}

/// Mean cross-entropy of `softmax(logits)` against integer labels and its gradient.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    if logits.rank() != 2 || logits.batch() != labels.len() {
        return Err(Error::dim(
            "softmax_cross_entropy",
            format!("logits {:?} vs {} labels", logits.shape(), labels.len()),
        ));
    }
    let classes = logits.shape()[1];
    let n = labels.len();
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() + max - row[label].as_f64();
        for (j, e) in exps.iter().enumerate() {
            let p = e / sum - if j == label { 1.0 } else { 0.0 };
            grad.push(T::from_f64(p * inv_n));
        }
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy".into()));
    }
    Ok((loss, Tensor::from_parts(logits.shape().to_vec(), grad)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::<f64>::zeros(&[3, 10]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logit_has_no_loss() {
        let logits = Tensor::<f64>::new(vec![1, 3], vec![0.0, 500.0, 0.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!(loss < 1e-12);
        assert!(grad.data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn label_range_checked() {
        let logits = Tensor::<f32>::zeros(&[1, 3]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn constant_batch_normalizes_to_shift() {
        let x = Tensor::<f64>::full(&[4, 2], 3.0);
        let (y, _, (mean, var)) = batchnorm_train(&x, &[2.0, 2.0], &[0.5, -1.0]).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
        assert_eq!(mean, vec![3.0, 3.0]);
        assert_eq!(var, vec![0.0, 0.0]);
    }

    #[test]
    fn eval_with_initial_stats() {
        let x = Tensor::<f64>::from_vec(vec![2.0, -4.0]).reshape(&[1, 2]).unwrap();
        let y = batchnorm_eval(&x, &[3.0, 1.0], &[1.0, 0.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let s = (1.0 + BN_EPS).sqrt();
        assert!((y.data()[0] - (3.0 * 2.0 / s + 1.0)).abs() < 1e-15);
        assert!((y.data()[1] - (-4.0 / s)).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        assert!(batchnorm_train(&x, &[1.0; 2], &[0.0; 2]).is_err());
    }

    #[test]
    fn gap_roundtrip_shapes() {
        let x = Tensor::<f64>::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(global_avg_pool(&x).data(), &[3.0]);
        let g = global_avg_pool_backward(&[1, 2, 2, 1], &Tensor::from_vec(vec![4.0]));
        assert_eq!(g.data(), &[1.0; 4]);
    }
}
