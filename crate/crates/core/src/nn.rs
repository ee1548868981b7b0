//! Minimal convolutional building blocks with hand-written reverse passes.
//!
//! Feature maps reuse [`Image`] (planar `C x H x W`). Convolutions lower to a single
//! matrix product through an im2col buffer that the forward pass hands back so the
//! backward pass can reuse it.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;

pub const LEAKY_SLOPE: f64 = 0.1;

/// `c = a * b + beta * c` with optional transposes. `a` is `m x k`, `b` is `k x n`
/// after transposition, both row-major as stored.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `out x in x k x k`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Accumulated parameter gradients for one [`Conv2d`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvGrad {
    pub fn zeros_like(conv: &Conv2d) -> Self {
        Self {
            weight: vec![0.0; conv.weight.len()],
            bias: vec![0.0; conv.bias.len()],
        }
    }

    pub fn add(&mut self, other: &ConvGrad) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weight.iter_mut().chain(self.bias.iter_mut()).for_each(|v| *v *= s);
    }
}

impl Conv2d {
    /// He-normal weights, zero bias, "same" padding for odd kernels.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
            weight: (0..out_channels * in_channels * kernel * kernel)
                .map(|_| normal.sample(rng))
                .collect(),
            bias: vec![0.0; out_channels],
        }
    }

    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    #[inline]
    pub fn weight_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &Image, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        let p = oh * ow;
        let mut col = vec![0.0; self.patch_len() * p];
        for ci in 0..self.in_channels {
            let plane = x.plane(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * x.width..(iy as usize + 1) * x.width];
                        let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.width as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Image {
        let k = self.kernel;
        let p = oh * ow;
        let mut out = Image::zeros(self.in_channels, h, w);
        for ci in 0..self.in_channels {
            let plane = out.plane_mut(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn check_input(&self, x: &Image) -> Result<()> {
        if x.channels != self.in_channels {
            return Err(Error::shape(
                format!("{} input channels", self.in_channels),
                x.channels,
            ));
        }
        Ok(())
    }

    /// Forward pass; also returns the lowered input needed by [`Conv2d::backward`].
    pub fn forward(&self, x: &Image) -> Result<(Image, Vec<f64>)> {
        self.check_input(x)?;
        let (oh, ow) = self.output_size(x.height, x.width);
        let p = oh * ow;
        let col = if self.is_pointwise() {
            x.data.clone()
        } else {
            self.im2col(x, oh, ow)
        };
        let mut out = Image::zeros(self.out_channels, oh, ow);
        for (o, b) in self.bias.iter().enumerate() {
            out.data[o * p..(o + 1) * p].fill(*b);
        }
        gemm(
            self.out_channels,
            self.patch_len(),
            p,
            &self.weight,
            false,
            &col,
            false,
            &mut out.data,
            1.0,
        );
        Ok((out, col))
    }

    /// Reverse pass. Accumulates parameter gradients into `grad` when given and returns
    /// the input gradient when `need_input` is set.
    pub fn backward(
        &self,
        col: &[f64],
        input_hw: (usize, usize),
        grad_out: &Image,
        grad: Option<&mut ConvGrad>,
        need_input: bool,
    ) -> Option<Image> {
        let (oh, ow) = (grad_out.height, grad_out.width);
        let p = oh * ow;
        let kk = self.patch_len();
        if let Some(g) = grad {
            gemm(
                self.out_channels,
                p,
                kk,
                &grad_out.data,
                false,
                col,
                true,
                &mut g.weight,
                1.0,
            );
            for (o, gb) in g.bias.iter_mut().enumerate() {
                *gb += grad_out.data[o * p..(o + 1) * p].iter().sum::<f64>();
            }
        }
        if !need_input {
            return None;
        }
        let mut dcol = vec![0.0; kk * p];
        gemm(
            kk,
            self.out_channels,
            p,
            &self.weight,
            true,
            &grad_out.data,
            false,
            &mut dcol,
            0.0,
        );
        let (h, w) = input_hw;
        if self.is_pointwise() {
            Some(Image::from_vec(self.in_channels, h, w, dcol).expect("pointwise shape"))
        } else {
            Some(self.col2im(&dcol, h, w, oh, ow))
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

pub fn leaky_relu_inplace(x: &mut Image) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Multiplies `grad` by the leaky-ReLU derivative, read off the activation output.
pub fn leaky_relu_backward(output: &Image, grad: &mut Image) {
    for (g, o) in grad.data.iter_mut().zip(&output.data) {
        if *o < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(1 + exp(x))`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Binary cross-entropy on a logit; derivative with respect to the logit is
/// `sigmoid(logit) - target`.
#[inline]
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    softplus(logit) - target * logit
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Adam over a flat list of parameter buffers.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Descends along `grads`. Buffers must be supplied in the order given to [`Adam::new`].
    pub fn step(&mut self, params: Vec<&mut Vec<f64>>, grads: Vec<&Vec<f64>>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (slot, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
        let mut img = Image::zeros(c, h, w);
        img.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        img
    }

    /// Direct nested-loop convolution.
    fn naive_conv(conv: &Conv2d, x: &Image) -> Image {
        let (oh, ow) = conv.output_size(x.height, x.width);
        let mut out = Image::zeros(conv.out_channels, oh, ow);
        for o in 0..conv.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = conv.bias[o];
                    for i in 0..conv.in_channels {
                        for ky in 0..conv.kernel {
                            for kx in 0..conv.kernel {
                                let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.height && (ix as usize) < x.width {
                                    s += conv.weight[conv.weight_index(o, i, ky, kx)]
                                        * x.get(i, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.set(o, oy, ox, s);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s) in &[(3, 1), (3, 2), (1, 1), (5, 1)] {
            let mut conv = Conv2d::new(3, 4, k, s, &mut rng);
            conv.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
            let x = random_image(3, 9, 11, &mut rng);
            let (y, _) = conv.forward(&x).unwrap();
            let want = naive_conv(&conv, &x);
            assert_eq!(y.shape_string(), want.shape_string());
            for (a, b) in y.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new(2, 3, 3, 2, &mut rng);
        let x = random_image(2, 7, 6, &mut rng);
        let (y, col) = conv.forward(&x).unwrap();
        let probe = random_image(y.channels, y.height, y.width, &mut rng);
        let loss = |c: &Conv2d, x: &Image| {
            let (y, _) = c.forward(x).unwrap();
            y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = ConvGrad::zeros_like(&conv);
        let dx = conv
            .backward(&col, (x.height, x.width), &probe, Some(&mut g), true)
            .unwrap();
        let eps = 1e-6;
        for i in 0..x.data.len() {
            let mut hi = x.clone();
            hi.data[i] += eps;
            let mut lo = x.clone();
            lo.data[i] -= eps;
            let fd = (loss(&conv, &hi) - loss(&conv, &lo)) / (2.0 * eps);
            assert!((fd - dx.data[i]).abs() < 1e-6);
        }
        for i in 0..conv.weight.len() {
            let mut hi = conv.clone();
            hi.weight[i] += eps;
            let mut lo = conv.clone();
            lo.weight[i] -= eps;
            let fd = (loss(&hi, &x) - loss(&lo, &x)) / (2.0 * eps);
            assert!((fd - g.weight[i]).abs() < 1e-6);
        }
        let probe_sum: Vec<f64> = (0..3)
            .map(|o| probe.plane(o).iter().sum())
            .collect();
        for o in 0..3 {
            assert!((g.bias[o] - probe_sum[o]).abs() < 1e-9);
        }
    }

    #[test]
    fn conv_rejects_wrong_channel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::new(3, 4, 3, 1, &mut rng);
        assert!(conv.forward(&Image::zeros(2, 4, 4)).is_err());
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut adam = Adam::new(0.1, &[2]);
        for _ in 0..500 {
            let g = vec![2.0 * x[0], 2.0 * x[1]];
            adam.step(vec![&mut x], vec![&g]);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }

    #[test]
    fn stable_logistic_helpers() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(-800.0)).abs() < 1e-300);
        assert!((bce_with_logit(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        let p = softmax(&[1000.0, 1000.0]);
        assert!((p[0] - 0.5).abs() < 1e-15);
    }
}
