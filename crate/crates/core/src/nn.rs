//! Layer kernels with hand-written backward passes.
//!
//! Convolutions are lowered to a matrix product over an im2col buffer; all
//! other layers are direct loops. Every layer works on one sample at a time.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Same-padded, stride-1 2-D convolution with bias.
///
/// `weight` is laid out `[out][in][k][k]`. The same struct doubles as the
/// gradient accumulator for its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: vec![T::zero(); out_channels * in_channels * kernel * kernel],
            bias: vec![T::zero(); out_channels],
        }
    }

    /// He-uniform fan-in initialisation with zero biases.
    pub fn he_uniform<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel);
        let fan_in = (in_channels * kernel * kernel) as f64;
        let limit = (6.0 / fan_in).sqrt();
        for w in &mut conv.weight {
            *w = T::lit(rng.gen_range(-limit..limit));
        }
        conv
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_channels, self.out_channels, self.kernel)
    }

    /// Rows of the im2col matrix.
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.in_channels, "conv input channels");
        let (h, w) = (x.height(), x.width());
        let p = h * w;
        let r = self.patch_len();
        let mut out = Tensor::zeros(self.out_channels, h, w);
        {
            let o = out.as_mut_slice();
            for (co, &b) in self.bias.iter().enumerate() {
                o[co * p..(co + 1) * p].fill(b);
            }
        }
        let owned;
        let cols: &[T] = if self.kernel == 1 {
            x.as_slice()
        } else {
            owned = im2col(x, self.kernel);
            &owned
        };
        T::gemm(
            self.out_channels,
            r,
            p,
            T::one(),
            &self.weight,
            (r as isize, 1),
            cols,
            (p as isize, 1),
            T::one(),
            out.as_mut_slice(),
            (p as isize, 1),
        );
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `need_input_grad` is set.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Self, need_input_grad: bool) -> Option<Tensor<T>> {
        let (h, w) = (x.height(), x.width());
        let p = h * w;
        let r = self.patch_len();
        debug_assert_eq!(dy.shape(), (self.out_channels, h, w));
        let owned;
        let cols: &[T] = if self.kernel == 1 {
            x.as_slice()
        } else {
            owned = im2col(x, self.kernel);
            &owned
        };
        // dW += dY · colsᵀ
        T::gemm(
            self.out_channels,
            p,
            r,
            T::one(),
            dy.as_slice(),
            (p as isize, 1),
            cols,
            (1, p as isize),
            T::one(),
            &mut grad.weight,
            (r as isize, 1),
        );
        for (co, gb) in grad.bias.iter_mut().enumerate() {
            *gb += dy.channel(co).iter().copied().sum();
        }
        if !need_input_grad {
            return None;
        }
        // dcols = Wᵀ · dY
        let mut dcols = vec![T::zero(); r * p];
        T::gemm(
            r,
            self.out_channels,
            p,
            T::one(),
            &self.weight,
            (1, r as isize),
            dy.as_slice(),
            (p as isize, 1),
            T::zero(),
            &mut dcols,
            (p as isize, 1),
        );
        if self.kernel == 1 {
            return Some(Tensor::from_vec(self.in_channels, h, w, dcols).expect("shape"));
        }
        let mut dx = Tensor::zeros(self.in_channels, h, w);
        col2im(&dcols, &mut dx, self.kernel);
        Some(dx)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Column range `[lo, hi)` of output pixels whose shifted source `x + dx`
/// stays inside `[0, w)`.
#[inline]
fn valid_span(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &Tensor<T>, k: usize) -> Vec<T> {
    let (c, h, w) = x.shape();
    let p = h * w;
    let pad = (k / 2) as isize;
    let mut cols = vec![T::zero(); c * k * k * p];
    for ci in 0..c {
        let src = x.channel(ci);
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_span(w, dx);
                for y in 0..h {
                    let iy = y as isize + dy;
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        continue;
                    }
                    let s = iy as usize * w;
                    let d = y * w;
                    let s_lo = (lo as isize + dx) as usize;
                    dst[d + lo..d + hi].copy_from_slice(&src[s + s_lo..s + s_lo + (hi - lo)]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], dx_out: &mut Tensor<T>, k: usize) {
    let (c, h, w) = dx_out.shape();
    let p = h * w;
    let pad = (k / 2) as isize;
    for ci in 0..c {
        let dst = dx_out.channel_mut(ci);
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_span(w, dx);
                for y in 0..h {
                    let iy = y as isize + dy;
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        continue;
                    }
                    let d = iy as usize * w + (lo as isize + dx) as usize;
                    let s = y * w + lo;
                    for (a, &b) in dst[d..d + (hi - lo)].iter_mut().zip(&src[s..s + (hi - lo)]) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// In-place ReLU.
pub fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.as_mut_slice() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` in place where the ReLU output was not positive.
pub fn relu_backward_inplace<T: Scalar>(activated: &Tensor<T>, dy: &mut Tensor<T>) {
    for (g, &a) in dy.as_mut_slice().iter_mut().zip(activated.as_slice()) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, per output
/// cell, the winning offset `dy*2 + dx` inside its window.
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    let mut arg = vec![0u8; c * oh * ow];
    for ci in 0..c {
        let src = x.channel(ci);
        let dst = out.channel_mut(ci);
        for y in 0..oh {
            for xx in 0..ow {
                let base = 2 * y * w + 2 * xx;
                let cand = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                let mut best = 0;
                for (i, &v) in cand.iter().enumerate().skip(1) {
                    if v > cand[best] {
                        best = i;
                    }
                }
                dst[y * ow + xx] = cand[best];
                arg[(ci * oh + y) * ow + xx] = best as u8;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(dy: &Tensor<T>, arg: &[u8], in_h: usize, in_w: usize) -> Tensor<T> {
    let (c, oh, ow) = dy.shape();
    let mut dx = Tensor::zeros(c, in_h, in_w);
    for ci in 0..c {
        let g = dy.channel(ci);
        let d = dx.channel_mut(ci);
        for y in 0..oh {
            for xx in 0..ow {
                let a = arg[(ci * oh + y) * ow + xx] as usize;
                let idx = (2 * y + a / 2) * in_w + 2 * xx + a % 2;
                d[idx] += g[y * ow + xx];
            }
        }
    }
    dx
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.shape();
    let ow = 2 * w;
    let mut out = Tensor::zeros(c, 2 * h, ow);
    for ci in 0..c {
        let src = x.channel(ci);
        let dst = out.channel_mut(ci);
        for y in 0..h {
            let row = &mut dst[2 * y * ow..(2 * y + 1) * ow];
            for xx in 0..w {
                let v = src[y * w + xx];
                row[2 * xx] = v;
                row[2 * xx + 1] = v;
            }
            dst.copy_within(2 * y * ow..(2 * y + 1) * ow, (2 * y + 1) * ow);
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (c, h2, w2) = dy.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let g = dy.channel(ci);
        let d = dx.channel_mut(ci);
        for y in 0..h {
            for xx in 0..w {
                let b = 2 * y * w2 + 2 * xx;
                d[y * w + xx] = g[b] + g[b + 1] + g[b + w2] + g[b + w2 + 1];
            }
        }
    }
    dx
}

/// Global average pool: C×H×W → C.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let n = T::lit(x.plane() as f64);
    (0..x.channels())
        .map(|c| x.channel(c).iter().copied().sum::<T>() / n)
        .collect()
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &[T], h: usize, w: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(dy.len(), h, w);
    let n = T::lit((h * w) as f64);
    for (c, &g) in dy.iter().enumerate() {
        dx.channel_mut(c).fill(g / n);
    }
    dx
}

/// Fully connected layer, `weight` laid out `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
        }
    }

    pub fn he_uniform<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let mut d = Self::zeros(inputs, outputs);
        let limit = (6.0 / inputs as f64).sqrt();
        for w in &mut d.weight {
            *w = T::lit(rng.gen_range(-limit..limit));
        }
        d
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.inputs, self.outputs)
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.inputs, "dense input width");
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, &b)| row.iter().zip(x).map(|(&w, &v)| w * v).sum::<T>() + b)
            .collect()
    }

    pub fn backward(&self, x: &[T], dy: &[T], grad: &mut Self, need_input_grad: bool) -> Option<Vec<T>> {
        for ((grow, gb), &g) in grad
            .weight
            .chunks_exact_mut(self.inputs)
            .zip(grad.bias.iter_mut())
            .zip(dy)
        {
            *gb += g;
            for (gw, &v) in grow.iter_mut().zip(x) {
                *gw += g * v;
            }
        }
        if !need_input_grad {
            return None;
        }
        let mut dx = vec![T::zero(); self.inputs];
        for (row, &g) in self.weight.chunks_exact(self.inputs).zip(dy) {
            for (d, &w) in dx.iter_mut().zip(row) {
                *d += g * w;
            }
        }
        Some(dx)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Inverted dropout mask: each entry is 0 with probability `rate`, else
/// `1/(1-rate)`.
pub fn dropout_mask<T: Scalar, R: Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect()
}
