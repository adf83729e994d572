//! Zero-padded 2D cross-correlation kernels (forward and both adjoints).
//!
//! Layouts: input `[C_in, H, W]`, kernel `[C_out, C_in, k, k]`,
//! bias `[C_out]`, output `[C_out, H, W]`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Checks the shapes of a "same" convolution and returns `(c_in, c_out, k, h, w)`.
pub fn check_shapes<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    let [c_in, h, w] = *input.shape() else {
        return Err(Error::Shape(format!(
            "conv2d input must be [C,H,W], got {:?}",
            input.shape()
        )));
    };
    let [c_out, kc_in, k, k2] = *kernel.shape() else {
        return Err(Error::Shape(format!(
            "conv2d kernel must be [C_out,C_in,k,k], got {:?}",
            kernel.shape()
        )));
    };
    if kc_in != c_in {
        return Err(Error::Shape(format!(
            "conv2d kernel expects {kc_in} input channels, input has {c_in}"
        )));
    }
    if k != k2 || k % 2 == 0 {
        return Err(Error::Shape(format!("conv2d kernel must be square and odd, got {k}x{k2}")));
    }
    if padding != (k - 1) / 2 {
        return Err(Error::Shape(format!(
            "conv2d padding must be {} for a {k}x{k} kernel, got {padding}",
            (k - 1) / 2
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::Shape(format!(
                "conv2d bias must be [{c_out}], got {:?}",
                b.shape()
            )));
        }
    }
    Ok((c_in, c_out, k, h, w))
}

/// Range of destination indices `x` in `0..n` for which `x + offset` is in
/// bounds.
#[inline]
pub(crate) fn valid_range(n: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (n as isize - offset).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

#[inline]
fn axpy<S: Scalar>(dst: &mut [S], alpha: S, src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn forward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    padding: usize,
) -> Result<Tensor<S>> {
    let (c_in, c_out, k, h, w) = check_shapes(input, kernel, bias, padding)?;
    let p = padding as isize;
    let plane = h * w;
    let src = input.data();
    let ker = kernel.data();
    let mut out = vec![S::zero(); c_out * plane];
    for co in 0..c_out {
        let b = bias.map_or(S::zero(), |b| b.data()[co]);
        let out_plane = &mut out[co * plane..(co + 1) * plane];
        for y in 0..h {
            let out_row = &mut out_plane[y * w..(y + 1) * w];
            out_row.fill(b);
            for ci in 0..c_in {
                let in_plane = &src[ci * plane..(ci + 1) * plane];
                for ky in 0..k {
                    let sy = y as isize + ky as isize - p;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let in_row = &in_plane[sy as usize * w..(sy as usize + 1) * w];
                    let kbase = ((co * c_in + ci) * k + ky) * k;
                    for kx in 0..k {
                        let off = kx as isize - p;
                        let (x0, x1) = valid_range(w, off);
                        let sx0 = (x0 as isize + off) as usize;
                        axpy(&mut out_row[x0..x1], ker[kbase + kx], &in_row[sx0..sx0 + (x1 - x0)]);
                    }
                }
            }
        }
    }
    Tensor::new([c_out, h, w], out)
}

/// Gradient with respect to the input given the output gradient.
pub fn backward_input<S: Scalar>(
    grad_out: &Tensor<S>,
    kernel: &Tensor<S>,
    padding: usize,
) -> Tensor<S> {
    let [c_out, h, w] = *grad_out.shape() else {
        unreachable!("conv2d output is rank 3")
    };
    let c_in = kernel.shape()[1];
    let k = kernel.shape()[2];
    let p = padding as isize;
    let plane = h * w;
    let g = grad_out.data();
    let ker = kernel.data();
    let mut gin = vec![S::zero(); c_in * plane];
    for ci in 0..c_in {
        let gin_plane = &mut gin[ci * plane..(ci + 1) * plane];
        for sy in 0..h {
            let gin_row = &mut gin_plane[sy * w..(sy + 1) * w];
            for co in 0..c_out {
                let g_plane = &g[co * plane..(co + 1) * plane];
                for ky in 0..k {
                    // output row y reads input row sy = y + ky - p
                    let y = sy as isize - ky as isize + p;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let g_row = &g_plane[y as usize * w..(y as usize + 1) * w];
                    let kbase = ((co * c_in + ci) * k + ky) * k;
                    for kx in 0..k {
                        // gin[sx] += wgt * g[sx - off]
                        let off = -(kx as isize - p);
                        let (x0, x1) = valid_range(w, off);
                        let gx0 = (x0 as isize + off) as usize;
                        axpy(&mut gin_row[x0..x1], ker[kbase + kx], &g_row[gx0..gx0 + (x1 - x0)]);
                    }
                }
            }
        }
    }
    Tensor::new([c_in, h, w], gin).expect("consistent gradient shape")
}

/// Gradient with respect to the kernel given the output gradient.
pub fn backward_kernel<S: Scalar>(
    grad_out: &Tensor<S>,
    input: &Tensor<S>,
    k: usize,
    padding: usize,
) -> Tensor<S> {
    let [c_out, h, w] = *grad_out.shape() else {
        unreachable!("conv2d output is rank 3")
    };
    let c_in = input.shape()[0];
    let p = padding as isize;
    let plane = h * w;
    let g = grad_out.data();
    let src = input.data();
    let mut gk = vec![S::zero(); c_out * c_in * k * k];
    for co in 0..c_out {
        let g_plane = &g[co * plane..(co + 1) * plane];
        for ci in 0..c_in {
            let in_plane = &src[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let off = kx as isize - p;
                    let (x0, x1) = valid_range(w, off);
                    let sx0 = (x0 as isize + off) as usize;
                    let mut acc = S::zero();
                    for y in 0..h {
                        let sy = y as isize + ky as isize - p;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let g_row = &g_plane[y * w + x0..y * w + x1];
                        let in_row = &in_plane[sy as usize * w + sx0..sy as usize * w + sx0 + (x1 - x0)];
                        acc += dot(g_row, in_row);
                    }
                    gk[((co * c_in + ci) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    Tensor::new([c_out, c_in, k, k], gk).expect("consistent gradient shape")
}

/// Gradient with respect to the bias: per-channel sum of the output gradient.
pub fn backward_bias<S: Scalar>(grad_out: &Tensor<S>) -> Tensor<S> {
    let c_out = grad_out.shape()[0];
    let data = (0..c_out).map(|c| grad_out.channel(c).iter().copied().sum()).collect();
    Tensor::new([c_out], data).expect("consistent gradient shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    /// Quadruple loop straight from the definition of zero-padded correlation.
    fn oracle(input: &Tensor<f64>, kernel: &Tensor<f64>, bias: Option<&Tensor<f64>>) -> Tensor<f64> {
        let (ci_n, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (co_n, k) = (kernel.shape()[0], kernel.shape()[2]);
        let p = (k / 2) as isize;
        Tensor::from_fn([co_n, h, w], |i| {
            let (co, y, x) = (i[0], i[1] as isize, i[2] as isize);
            let mut acc = bias.map_or(0.0, |b| b.data()[co]);
            for ci in 0..ci_n {
                for ky in 0..k {
                    for kx in 0..k {
                        let (sy, sx) = (y + ky as isize - p, x + kx as isize - p);
                        if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                            acc += kernel.at(&[co, ci, ky, kx]) * input.at(&[ci, sy as usize, sx as usize]);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 6, 5], &mut rng);
        let k = Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(forward(&x, &k, None, 0).unwrap(), x);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let out = forward(&Tensor::zeros([2, 5, 5]), &k, None, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 5, 5], &mut rng);
        let k = random(&[2, 1, 3, 3], &mut rng);
        let b = random(&[2], &mut rng);
        let got = forward(&x, &k, Some(&b), 1).unwrap();
        let want = oracle(&x, &k, Some(&b));
        assert!(got.max_abs_diff(&want).unwrap() < 1e-14);

        let x = random(&[3, 7, 4], &mut rng);
        let k = random(&[2, 3, 5, 5], &mut rng);
        let got = forward(&x, &k, None, 2).unwrap();
        assert!(got.max_abs_diff(&oracle(&x, &k, None)).unwrap() < 1e-13);
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        // <conv(x), g> == <x, conv_in^T(g)> and == <k, conv_k^T(g)>
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 6, 7], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let g = random(&[3, 6, 7], &mut rng);
        let y = forward(&x, &k, None, 1).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let gx = backward_input(&g, &k, 1);
        let rhs_x: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        let gk = backward_kernel(&g, &x, 3, 1);
        let rhs_k: f64 = k.data().iter().zip(gk.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_x).abs() < 1e-12);
        assert!((lhs - rhs_k).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::<f64>::zeros([2, 4, 4]);
        let k = Tensor::<f64>::zeros([1, 3, 3, 3]);
        assert!(matches!(forward(&x, &k, None, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn wrong_padding_is_rejected() {
        let x = Tensor::<f64>::zeros([1, 4, 4]);
        let k = Tensor::<f64>::zeros([1, 1, 3, 3]);
        assert!(forward(&x, &k, None, 0).is_err());
    }
}
