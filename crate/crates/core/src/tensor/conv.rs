use serde::{Deserialize, Serialize};

use super::ops::{gemm_nn, gemm_nt, gemm_tn};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Stride and symmetric zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self { stride: 1, padding: 0 }
    }
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }
}

/// `floor((input + 2·padding − kernel) / stride) + 1`, or an error when that is below 1.
pub fn conv_output_size(input: usize, kernel: usize, geom: ConvGeometry) -> Result<usize> {
    if geom.stride == 0 {
        return Err(Error::dim("conv2d", "stride must be positive"));
    }
    let padded = input + 2 * geom.padding;
    if padded < kernel {
        return Err(Error::dim(
            "conv2d",
            format!("kernel {kernel} larger than padded input {padded}"),
        ));
    }
    Ok((padded - kernel) / geom.stride + 1)
}

/// Unfolds NHWC patches into rows of length `kh·kw·c`, ordered `(ky, kx, channel)`.
pub(crate) fn im2col<T: Scalar>(
    input: &[T],
    dims: [usize; 4],
    kh: usize,
    kw: usize,
    geom: ConvGeometry,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let [n, h, w, c] = dims;
    let row = kh * kw * c;
    let mut cols = vec![T::zero(); n * oh * ow * row];
    let pad = geom.padding as isize;
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ((b * oh + oy) * ow + ox) * row;
                for ky in 0..kh {
                    let iy = (oy * geom.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * geom.stride) as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((b * h + iy as usize) * w + ix as usize) * c;
                        let dst = base + (ky * kw + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&input[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch rows back onto an NHWC buffer.
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    dims: [usize; 4],
    kh: usize,
    kw: usize,
    geom: ConvGeometry,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let [n, h, w, c] = dims;
    let row = kh * kw * c;
    let mut out = vec![T::zero(); n * h * w * c];
    let pad = geom.padding as isize;
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ((b * oh + oy) * ow + ox) * row;
                for ky in 0..kh {
                    let iy = (oy * geom.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * geom.stride) as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + iy as usize) * w + ix as usize) * c;
                        let src = base + (ky * kw + kx) * c;
                        for (o, &g) in out[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *o += g;
                        }
                    }
                }
            }
        }
    }
    out
}

fn check_shapes<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<([usize; 4], [usize; 4], usize, usize)> {
    if input.rank() != 4 || kernel.rank() != 4 {
        return Err(Error::dim(
            "conv2d",
            format!(
                "expected NHWC input and HWIO kernel, got {:?} and {:?}",
                input.shape(),
                kernel.shape()
            ),
        ));
    }
    let d = input.shape();
    let k = kernel.shape();
    if d[3] != k[2] {
        return Err(Error::dim(
            "conv2d",
            format!("input has {} channels, kernel expects {}", d[3], k[2]),
        ));
    }
    let oh = conv_output_size(d[1], k[0], geom)?;
    let ow = conv_output_size(d[2], k[1], geom)?;
    Ok(([d[0], d[1], d[2], d[3]], [k[0], k[1], k[2], k[3]], oh, ow))
}

/// Cross-correlation of an NHWC batch with a `[kh, kw, c_in, c_out]` kernel.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, geom: ConvGeometry) -> Result<Tensor<T>> {
    let (dims, kd, oh, ow) = check_shapes(input, kernel, geom)?;
    let [kh, kw, ci, co] = kd;
    let cols = im2col(input.data(), dims, kh, kw, geom, oh, ow);
    let rows = dims[0] * oh * ow;
    let mut out = vec![T::zero(); rows * co];
    gemm_nn(rows, kh * kw * ci, co, &cols, kernel.data(), &mut out);
    Ok(Tensor::from_parts(vec![dims[0], oh, ow, co], out))
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (dims, kd, oh, ow) = check_shapes(input, kernel, geom)?;
    let [kh, kw, ci, co] = kd;
    if grad_out.shape() != [dims[0], oh, ow, co] {
        return Err(Error::dim(
            "conv2d_backward",
            format!(
                "grad_out {:?} does not match output [{}, {oh}, {ow}, {co}]",
                grad_out.shape(),
                dims[0]
            ),
        ));
    }
    let cols = im2col(input.data(), dims, kh, kw, geom, oh, ow);
    let rows = dims[0] * oh * ow;
    let krows = kh * kw * ci;
    let mut grad_kernel = vec![T::zero(); krows * co];
    gemm_tn(rows, krows, co, &cols, grad_out.data(), &mut grad_kernel);
    let mut grad_cols = vec![T::zero(); rows * krows];
    gemm_nt(rows, co, krows, grad_out.data(), kernel.data(), &mut grad_cols);
    let grad_input = col2im(&grad_cols, dims, kh, kw, geom, oh, ow);
    Ok((
        Tensor::from_parts(dims.to_vec(), grad_input),
        Tensor::from_parts(kd.to_vec(), grad_kernel),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| T::from_f64(rng.gen_range(-1.0..1.0))).collect(),
        )
        .unwrap()
    }

    /// Direct nested-loop cross-correlation.
    fn direct(input: &Tensor<f64>, kernel: &Tensor<f64>, g: ConvGeometry) -> Tensor<f64> {
        let [n, h, w, ci] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
        let [kh, kw, _, co] = [
            kernel.shape()[0],
            kernel.shape()[1],
            kernel.shape()[2],
            kernel.shape()[3],
        ];
        let oh = (h + 2 * g.padding - kh) / g.stride + 1;
        let ow = (w + 2 * g.padding - kw) / g.stride + 1;
        let mut out = Tensor::zeros(&[n, oh, ow, co]);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for o in 0..co {
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for c in 0..ci {
                                    acc += input.get(&[b, iy as usize, ix as usize, c]) * kernel.get(&[ky, kx, c, o]);
                                }
                            }
                        }
                        let off = out.offset(&[b, oy, ox, o]);
                        out.data_mut()[off] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_1x1_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Tensor<f64> = random(&mut rng, &[2, 4, 4, 1]);
        let k = Tensor::ones(&[1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &k, ConvGeometry::default()).unwrap(), x);
    }

    #[test]
    fn full_window_is_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Tensor<f64> = random(&mut rng, &[1, 3, 3, 1]);
        let k: Tensor<f64> = random(&mut rng, &[3, 3, 1, 1]);
        let y = conv2d(&x, &k, ConvGeometry::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        let expected: f64 = x.data().iter().zip(k.data()).map(|(a, b)| a * b).sum();
        assert!((y.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn random_f32_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Tensor<f64> = random(&mut rng, &[1, 8, 8, 3]);
        let k: Tensor<f64> = random(&mut rng, &[3, 3, 3, 4]);
        for g in [
            ConvGeometry::new(1, 0),
            ConvGeometry::new(1, 1),
            ConvGeometry::new(2, 1),
        ] {
            let y = conv2d(&x.cast::<f32>(), &k.cast::<f32>(), g).unwrap();
            let oracle = direct(&x, &k, g);
            assert_eq!(y.shape(), oracle.shape());
            assert!(y.cast::<f64>().max_abs_diff(&oracle) < 1e-5);
        }
    }

    #[test]
    fn channel_mismatch_and_tiny_input_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 4, 4, 2]);
        assert!(conv2d(&x, &Tensor::zeros(&[3, 3, 3, 1]), ConvGeometry::default()).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[5, 5, 2, 1]), ConvGeometry::default()).is_err());
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Tensor<f64> = random(&mut rng, &[2, 5, 5, 2]);
        let k: Tensor<f64> = random(&mut rng, &[3, 3, 2, 3]);
        let g = ConvGeometry::new(1, 1);
        let go = Tensor::zeros(&[2, 5, 5, 3]);
        let (gi, gk) = conv2d_backward(&x, &k, &go, g).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gk.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_kernel_grad_is_transposed_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Tensor<f64> = random(&mut rng, &[2, 3, 3, 2]);
        let k: Tensor<f64> = random(&mut rng, &[1, 1, 2, 3]);
        let go: Tensor<f64> = random(&mut rng, &[2, 3, 3, 3]);
        let (_, gk) = conv2d_backward(&x, &k, &go, ConvGeometry::default()).unwrap();
        for c in 0..2 {
            for o in 0..3 {
                let mut acc = 0.0;
                for p in 0..18 {
                    acc += x.data()[p * 2 + c] * go.data()[p * 3 + o];
                }
                assert!((gk.get(&[0, 0, c, o]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        let h = 1e-5;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let n = rng.gen_range(1..3);
            let size = rng.gen_range(3..6);
            let ci = rng.gen_range(1..4);
            let co = rng.gen_range(1..4);
            let k = rng.gen_range(1..4).min(size);
            let g = ConvGeometry::new(rng.gen_range(1..3), rng.gen_range(0..2));
            let x: Tensor<f64> = random(&mut rng, &[n, size, size, ci]);
            let w: Tensor<f64> = random(&mut rng, &[k, k, ci, co]);
            let y = conv2d(&x, &w, g).unwrap();
            let proj: Tensor<f64> = random(&mut rng, y.shape());
            let loss = |x: &Tensor<f64>, w: &Tensor<f64>| -> f64 {
                let y = conv2d(x, w, g).unwrap();
                y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
            };
            let (gi, gk) = conv2d_backward(&x, &w, &proj, g).unwrap();
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let num = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
                let a = gi.data()[i];
                assert!((a - num).abs() / a.abs().max(num.abs()).max(1e-3) < 1e-4);
            }
            for i in 0..w.len() {
                let mut wp = w.clone();
                wp.data_mut()[i] += h;
                let mut wm = w.clone();
                wm.data_mut()[i] -= h;
                let num = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
                let a = gk.data()[i];
                assert!((a - num).abs() / a.abs().max(num.abs()).max(1e-3) < 1e-4);
            }
        }
    }
}
