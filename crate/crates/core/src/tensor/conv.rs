//! 2-D cross-correlation via im2col + GEMM, with its gradient routine.

use super::{Param, Tensor};
use crate::error::{Error, Result};

/// `floor((size + 2·padding − k) / stride) + 1`, rejected when < 1.
pub fn output_extent(size: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = size + 2 * padding;
    if padded < k {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {k} larger than padded input extent {padded}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (c_in, h, w) = input.chw()?;
        let [c_out, wc_in, k, k2] = weight.shape()[..] else {
            return Err(Error::Shape {
                op: "conv2d",
                dim: "weight rank".into(),
                expected: 4,
                got: weight.rank(),
            });
        };
        if wc_in != c_in {
            return Err(Error::Shape {
                op: "conv2d",
                dim: "input channels (weight dim 1)".into(),
                expected: wc_in,
                got: c_in,
            });
        }
        if k != k2 {
            return Err(Error::Shape {
                op: "conv2d",
                dim: "kernel width (weight dim 3)".into(),
                expected: k,
                got: k2,
            });
        }
        if k % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel size {k} must be odd")));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::invalid("conv2d", format!("stride {stride} not in {{1,2}}")));
        }
        let ho = output_extent(h, k, stride, padding)?;
        let wo = output_extent(w, k, stride, padding)?;
        Ok(Geometry {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            ho,
            wo,
        })
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(input: &[f64], g: &Geometry, col: &mut [f64]) {
    let cols = g.cols();
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    let out_row = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, o) in out_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        *o = if jj < 0 || jj >= g.w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &Geometry, out: &mut [f64]) {
    let cols = g.cols();
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a·b + beta·c` with explicit strides; all matrices are dense `f64`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    debug_assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    debug_assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    debug_assert!(c.len() >= (m - 1) * rsc + (n - 1) * csc + 1);
    // SAFETY: the asserted extents keep every strided access in bounds and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// State kept by a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache {
    geometry: Geometry,
    col: Vec<f64>,
}

fn forward_raw(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, ConvCache)> {
    let g = Geometry::new(input, weight, stride, padding)?;
    if bias.len() != g.c_out {
        return Err(Error::Shape {
            op: "conv2d",
            dim: "bias length".into(),
            expected: g.c_out,
            got: bias.len(),
        });
    }
    let (rows, cols) = (g.rows(), g.cols());
    let mut col = vec![0.0; rows * cols];
    im2col(input.data(), &g, &mut col);
    let mut out = Vec::with_capacity(g.c_out * cols);
    for &b in bias.data() {
        out.extend(std::iter::repeat_n(b, cols));
    }
    gemm(
        g.c_out,
        rows,
        cols,
        weight.data(),
        (rows, 1),
        &col,
        (cols, 1),
        1.0,
        &mut out,
        (cols, 1),
    );
    let out = Tensor::from_vec(&[g.c_out, g.ho, g.wo], out)?;
    Ok((out, ConvCache { geometry: g, col }))
}

/// Gradients produced by [`conv2d_backward`].
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

fn backward_raw(
    cache: &ConvCache,
    weight: &Tensor,
    grad_out: &Tensor,
    weight_grad: &mut [f64],
    bias_grad: &mut [f64],
    need_input: bool,
) -> Result<Option<Tensor>> {
    let g = &cache.geometry;
    let expected = [g.c_out, g.ho, g.wo];
    for (d, (&e, &got)) in expected.iter().zip(grad_out.shape()).enumerate() {
        if e != got {
            return Err(Error::Shape {
                op: "conv2d_backward",
                dim: format!("output gradient dim {d}"),
                expected: e,
                got,
            });
        }
    }
    let (rows, cols) = (g.rows(), g.cols());
    let go = grad_out.data();
    for (co, bg) in bias_grad.iter_mut().enumerate() {
        *bg += go[co * cols..(co + 1) * cols].iter().sum::<f64>();
    }
    // dW[c_out, rows] += dY[c_out, cols] · colᵀ
    gemm(
        g.c_out,
        cols,
        rows,
        go,
        (cols, 1),
        &cache.col,
        (1, cols),
        1.0,
        weight_grad,
        (rows, 1),
    );
    if !need_input {
        return Ok(None);
    }
    // dcol[rows, cols] = Wᵀ · dY
    let mut dcol = vec![0.0; rows * cols];
    gemm(
        rows,
        g.c_out,
        cols,
        weight.data(),
        (1, rows),
        go,
        (cols, 1),
        0.0,
        &mut dcol,
        (cols, 1),
    );
    let mut dx = vec![0.0; g.c_in * g.h * g.w];
    col2im(&dcol, g, &mut dx);
    Ok(Some(Tensor::from_vec(&[g.c_in, g.h, g.w], dx)?))
}

/// Stateless cross-correlation of `input[C_in,H,W]` with `weight[C_out,C_in,k,k]`.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    forward_raw(input, weight, bias, stride, padding).map(|(out, _)| out)
}

/// Input, weight and bias gradients of [`conv2d`] given the output gradient.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads> {
    let c_out = weight.shape().first().copied().unwrap_or(0);
    let zero_bias = Tensor::zeros(&[c_out.max(1)]);
    let (_, cache) = forward_raw(input, weight, &zero_bias, stride, padding)?;
    let mut wg = Tensor::zeros(weight.shape());
    let mut bg = Tensor::zeros(&[c_out.max(1)]);
    let input_grad = backward_raw(&cache, weight, grad_out, wg.data_mut(), bg.data_mut(), true)?
        .expect("input gradient requested");
    Ok(ConvGrads {
        input: input_grad,
        weight: wg,
        bias: bg,
    })
}

/// Convolution layer owning its weight and bias parameters.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Zero-initialised `k×k` layer with "same" padding.
    pub fn new(name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        Conv2d {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(&[c_out, c_in, k, k])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            stride,
            padding: k / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.shape()[1..].iter().product()
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, ConvCache)> {
        forward_raw(
            input,
            &self.weight.value,
            &self.bias.value,
            self.stride,
            self.padding,
        )
    }

    /// Accumulates parameter gradients; returns the input gradient if asked.
    pub fn backward(
        &mut self,
        cache: &ConvCache,
        grad_out: &Tensor,
        need_input: bool,
    ) -> Result<Option<Tensor>> {
        backward_raw(
            cache,
            &self.weight.value,
            grad_out,
            self.weight.grad.data_mut(),
            self.bias.grad.data_mut(),
            need_input,
        )
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop cross-correlation.
    fn naive(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (c_in, h, w) = input.chw().unwrap();
        let (c_out, k) = (weight.shape()[0], weight.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[c_out, ho, wo]);
        for co in 0..c_out {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = bias.data()[co];
                    for ci in 0..c_in {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ii = (oi * stride + ki) as isize - pad as isize;
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    acc += input.at3(ci, ii as usize, jj as usize)
                                        * weight.data()[((co * c_in + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    out.data_mut()[(co * ho + oi) * wo + oj] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_one_by_one() {
        let x = Tensor::from_vec(&[1, 1, 1], vec![5.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn ones_kernel_center_sums_nine() {
        let x = Tensor::filled(&[1, 3, 3], 1.0);
        let w = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap();
        assert_eq!(y.at3(0, 1, 1), 9.0);
        assert_eq!(y.at3(0, 0, 0), 4.0);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(stride, h, w) in &[(1, 5, 7), (2, 6, 6), (2, 7, 5)] {
            let x = random(&[3, h, w], &mut rng);
            let wt = random(&[4, 3, 3, 3], &mut rng);
            let b = random(&[4], &mut rng);
            let fast = conv2d(&x, &wt, &b, stride, 1).unwrap();
            let slow = naive(&x, &wt, &b, stride, 1);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[2, 4, 4], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let probe = random(&[3, 4, 4], &mut rng);
        let loss = |w: &Tensor| -> f64 {
            let y = conv2d(&x, w, &b, 1, 1).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum()
        };
        let grads = conv2d_backward(&x, &w, &probe, 1, 1).unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for idx in 0..w.len() {
            let mut wp = w.clone();
            wp.data_mut()[idx] += eps;
            let mut wm = w.clone();
            wm.data_mut()[idx] -= eps;
            let numeric = (loss(&wp) - loss(&wm)) / (2.0 * eps);
            let analytic = grads.weight.data()[idx];
            worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6));
        }
        assert!(worst < 1e-6, "max relative error {worst}");
    }

    #[test]
    fn rejects_mismatched_channels() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn rejects_even_kernel_and_bad_stride() {
        let x = Tensor::zeros(&[1, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 1, 2, 2]), &Tensor::zeros(&[1]), 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 1, 3, 3]), &Tensor::zeros(&[1]), 3, 1).is_err());
    }

    #[test]
    fn stride_two_output_extent() {
        assert_eq!(output_extent(64, 3, 2, 1).unwrap(), 32);
        assert_eq!(output_extent(5, 3, 2, 1).unwrap(), 3);
        assert_eq!(output_extent(1, 1, 1, 0).unwrap(), 1);
    }
}
