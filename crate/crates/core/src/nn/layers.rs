//! Layer primitives with explicit forward/backward passes.
//!
//! Convolution is im2col + GEMM, processed in bounded spatial chunks so the
//! column buffer never grows with image size. Backward recomputes the
//! columns instead of caching them; only layer inputs are kept.

use super::{Param, Tensor};
use crate::rng::Rng;

/// Spatial positions per GEMM chunk; bounds the im2col buffer.
const CONV_CHUNK: usize = 8192;

fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
    rsc: isize,
    csc: isize,
) {
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// 2-D convolution with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache_x: Option<Tensor>,
}

impl Conv2d {
    /// He-normal initialized convolution; biases start at zero.
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Conv2d {
        let fan_in = in_ch * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let data: Vec<f32> = (0..out_ch * fan_in)
            .map(|_| (rng.next_normal() * std) as f32)
            .collect();
        Conv2d {
            weight: Param::new(format!("{name}.weight"), vec![out_ch, in_ch, kernel, kernel], data),
            bias: Param::new(format!("{name}.bias"), vec![out_ch], vec![0.0; out_ch]),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            cache_x: None,
        }
    }

    /// ICNR re-initialization: each run of r*r consecutive output channels
    /// shares one freshly drawn kernel, so the pixel shuffle that follows
    /// sees identical sub-pixel kernels at start.
    pub fn icnr_init(&mut self, r: usize, rng: &mut Rng) {
        let groups = r * r;
        debug_assert_eq!(self.out_ch % groups, 0);
        let base = self.out_ch / groups;
        let fan_in = self.in_ch * self.kernel * self.kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let fresh: Vec<f32> = (0..base * fan_in)
            .map(|_| (rng.next_normal() * std) as f32)
            .collect();
        for c in 0..self.out_ch {
            let src = c / groups;
            self.weight.data[c * fan_in..(c + 1) * fan_in]
                .copy_from_slice(&fresh[src * fan_in..(src + 1) * fan_in]);
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Fill `cols` (k_rows x len) with the im2col block for spatial output
    /// positions [start, start+len).
    fn im2col_chunk(&self, x: &[f32], h: usize, w: usize, ow: usize, start: usize, len: usize, cols: &mut [f32]) {
        let k = self.kernel;
        let plane = h * w;
        for row in 0..self.in_ch * k * k {
            let c = row / (k * k);
            let ky = (row / k) % k;
            let kx = row % k;
            let base = c * plane;
            let dst = &mut cols[row * len..(row + 1) * len];
            for (i, d) in dst.iter_mut().enumerate() {
                let pos = start + i;
                let oy = pos / ow;
                let ox = pos % ow;
                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                *d = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                    x[base + iy as usize * w + ix as usize]
                } else {
                    0.0
                };
            }
        }
    }

    /// Pure convolution, usable on an immutable model for inference.
    pub fn compute(&self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.in_ch, "{}", self.weight.name);
        let (oh, ow) = self.out_hw(x.h, x.w);
        let spatial = oh * ow;
        let k_rows = self.in_ch * self.kernel * self.kernel;
        let mut y = Tensor::zeros(x.n, self.out_ch, oh, ow);
        let mut cols = vec![0.0f32; k_rows * CONV_CHUNK.min(spatial)];
        for n in 0..x.n {
            let xs = x.sample(n);
            let ys = y.sample_mut(n);
            let mut start = 0;
            while start < spatial {
                let len = CONV_CHUNK.min(spatial - start);
                self.im2col_chunk(xs, x.h, x.w, ow, start, len, &mut cols);
                // y[oc, start..start+len] = W[oc, k_rows] * cols[k_rows, len]
                sgemm(
                    self.out_ch,
                    k_rows,
                    len,
                    1.0,
                    &self.weight.data,
                    k_rows as isize,
                    1,
                    &cols,
                    len as isize,
                    1,
                    0.0,
                    &mut ys[start..],
                    spatial as isize,
                    1,
                );
                start += len;
            }
            for c in 0..self.out_ch {
                let b = self.bias.data[c];
                for v in &mut ys[c * spatial..(c + 1) * spatial] {
                    *v += b;
                }
            }
        }
        y
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let y = self.compute(x);
        if train {
            self.cache_x = Some(x.clone());
        }
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let x = self.cache_x.take().expect("conv backward without forward");
        let (oh, ow) = self.out_hw(x.h, x.w);
        debug_assert_eq!((gy.c, gy.h, gy.w), (self.out_ch, oh, ow));
        let spatial = oh * ow;
        let k_rows = self.in_ch * self.kernel * self.kernel;
        let mut gx = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut cols = vec![0.0f32; k_rows * CONV_CHUNK.min(spatial)];
        let mut gcols = vec![0.0f32; k_rows * CONV_CHUNK.min(spatial)];
        for n in 0..x.n {
            let xs = x.sample(n);
            let gys = gy.sample(n);
            let gxs = gx.sample_mut(n);
            for c in 0..self.out_ch {
                let mut sum = 0.0f32;
                for &v in &gys[c * spatial..(c + 1) * spatial] {
                    sum += v;
                }
                self.bias.grad[c] += sum;
            }
            let mut start = 0;
            while start < spatial {
                let len = CONV_CHUNK.min(spatial - start);
                self.im2col_chunk(xs, x.h, x.w, ow, start, len, &mut cols);
                // grad_w[oc, k_rows] += gy[oc, chunk] * cols[k_rows, chunk]^T
                sgemm(
                    self.out_ch,
                    len,
                    k_rows,
                    1.0,
                    &gys[start..],
                    spatial as isize,
                    1,
                    &cols,
                    1,
                    len as isize,
                    1.0,
                    &mut self.weight.grad,
                    k_rows as isize,
                    1,
                );
                // gcols[k_rows, chunk] = W^T[k_rows, oc] * gy[oc, chunk]
                sgemm(
                    k_rows,
                    self.out_ch,
                    len,
                    1.0,
                    &self.weight.data,
                    1,
                    k_rows as isize,
                    &gys[start..],
                    spatial as isize,
                    1,
                    0.0,
                    &mut gcols,
                    len as isize,
                    1,
                );
                // col2im: scatter-add the chunk back into gx
                let k = self.kernel;
                let plane = x.h * x.w;
                for row in 0..k_rows {
                    let c = row / (k * k);
                    let ky = (row / k) % k;
                    let kx = row % k;
                    let base = c * plane;
                    let src = &gcols[row * len..(row + 1) * len];
                    for (i, &g) in src.iter().enumerate() {
                        let pos = start + i;
                        let oy = pos / ow;
                        let ox = pos % ow;
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if iy >= 0 && iy < x.h as isize && ix >= 0 && ix < x.w as isize {
                            gxs[base + iy as usize * x.w + ix as usize] += g;
                        }
                    }
                }
                start += len;
            }
        }
        gx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Whether batch normalization uses batch statistics (training) or running
/// statistics (inference and frozen groups).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    mode: BnMode,
    shape: (usize, usize, usize, usize),
}

/// Per-channel batch normalization.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(name: &str, ch: usize) -> BatchNorm2d {
        BatchNorm2d {
            gamma: Param::new(format!("{name}.gamma"), vec![ch], vec![1.0; ch]),
            beta: Param::new(format!("{name}.beta"), vec![ch], vec![0.0; ch]),
            running_mean: vec![0.0; ch],
            running_var: vec![1.0; ch],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn ch(&self) -> usize {
        self.gamma.data.len()
    }

    /// Pure normalization with running statistics; the inference path.
    pub fn compute_eval(&self, x: &Tensor) -> Tensor {
        let ch = self.ch();
        debug_assert_eq!(x.c, ch, "{}", self.gamma.name);
        let plane = x.h * x.w;
        let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
        for c in 0..ch {
            let inv_std = 1.0 / (self.running_var[c] + self.eps).sqrt();
            let mean = self.running_mean[c];
            let (g, b) = (self.gamma.data[c], self.beta.data[c]);
            for n in 0..x.n {
                let xs = x.sample(n);
                let base = c * plane;
                let off = n * x.c * plane + base;
                for i in 0..plane {
                    y.data[off + i] = g * (xs[base + i] - mean) * inv_std + b;
                }
            }
        }
        y
    }

    pub fn forward(&mut self, x: &Tensor, mode: BnMode, train: bool) -> Tensor {
        let ch = self.ch();
        debug_assert_eq!(x.c, ch, "{}", self.gamma.name);
        let plane = x.h * x.w;
        let count = x.n * plane;
        let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut xhat = if train { vec![0.0f32; x.numel()] } else { Vec::new() };
        let mut inv_stds = vec![0.0f32; ch];
        for c in 0..ch {
            let (mean, var) = match mode {
                BnMode::Train => {
                    let mut sum = 0.0f64;
                    for n in 0..x.n {
                        for &v in &x.sample(n)[c * plane..(c + 1) * plane] {
                            sum += v as f64;
                        }
                    }
                    let mean = (sum / count as f64) as f32;
                    let mut ss = 0.0f64;
                    for n in 0..x.n {
                        for &v in &x.sample(n)[c * plane..(c + 1) * plane] {
                            let d = v - mean;
                            ss += (d * d) as f64;
                        }
                    }
                    let var = (ss / count as f64) as f32;
                    // running stats use the unbiased estimate
                    let unbiased = if count > 1 {
                        (ss / (count as f64 - 1.0)) as f32
                    } else {
                        var
                    };
                    self.running_mean[c] =
                        (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean;
                    self.running_var[c] =
                        (1.0 - self.momentum) * self.running_var[c] + self.momentum * unbiased;
                    (mean, var)
                }
                BnMode::Eval => (self.running_mean[c], self.running_var[c]),
            };
            let inv_std = 1.0 / (var + self.eps).sqrt();
            inv_stds[c] = inv_std;
            let (g, b) = (self.gamma.data[c], self.beta.data[c]);
            for n in 0..x.n {
                let xs = x.sample(n);
                let base = c * plane;
                let off = n * x.c * plane + base;
                for i in 0..plane {
                    let xh = (xs[base + i] - mean) * inv_std;
                    if train {
                        xhat[off + i] = xh;
                    }
                    y.data[off + i] = g * xh + b;
                }
            }
        }
        if train {
            self.cache = Some(BnCache {
                xhat,
                inv_std: inv_stds,
                mode,
                shape: x.shape(),
            });
        }
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("bn backward without forward");
        let (n_, c_, h_, w_) = cache.shape;
        debug_assert_eq!(gy.shape(), (n_, c_, h_, w_));
        let plane = h_ * w_;
        let count = (n_ * plane) as f64;
        let mut gx = Tensor::zeros(n_, c_, h_, w_);
        for c in 0..c_ {
            let mut dbeta = 0.0f64;
            let mut dgamma = 0.0f64;
            for n in 0..n_ {
                let off = n * c_ * plane + c * plane;
                for i in 0..plane {
                    let g = gy.data[off + i] as f64;
                    dbeta += g;
                    dgamma += g * cache.xhat[off + i] as f64;
                }
            }
            self.beta.grad[c] += dbeta as f32;
            self.gamma.grad[c] += dgamma as f32;
            let gamma = self.gamma.data[c] as f64;
            let inv_std = cache.inv_std[c] as f64;
            match cache.mode {
                BnMode::Train => {
                    let mean_dy = dbeta / count;
                    let mean_dy_xhat = dgamma / count;
                    for n in 0..n_ {
                        let off = n * c_ * plane + c * plane;
                        for i in 0..plane {
                            let g = gy.data[off + i] as f64;
                            let xh = cache.xhat[off + i] as f64;
                            gx.data[off + i] =
                                (gamma * inv_std * (g - mean_dy - xh * mean_dy_xhat)) as f32;
                        }
                    }
                }
                BnMode::Eval => {
                    let scale = gamma * inv_std;
                    for n in 0..n_ {
                        let off = n * c_ * plane + c * plane;
                        for i in 0..plane {
                            gx.data[off + i] = (gy.data[off + i] as f64 * scale) as f32;
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}

/// ReLU with its output cached for the backward mask.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    cache_y: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Relu {
        Relu { cache_y: None }
    }

    pub fn compute(x: &Tensor) -> Tensor {
        let mut y = x.clone();
        for v in &mut y.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        y
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let y = Self::compute(x);
        if train {
            self.cache_y = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let y = self.cache_y.take().expect("relu backward without forward");
        let mut gx = gy.clone();
        for (g, &v) in gx.data.iter_mut().zip(&y.data) {
            if v <= 0.0 {
                *g = 0.0;
            }
        }
        gx
    }
}

/// The 3x3/stride-2/pad-1 max pool of the encoder stem.
#[derive(Debug, Clone, Default)]
pub struct MaxPool3x3s2 {
    cache: Option<(Vec<usize>, (usize, usize, usize, usize))>,
}

impl MaxPool3x3s2 {
    pub fn new() -> Self {
        MaxPool3x3s2 { cache: None }
    }

    pub fn out_hw(h: usize, w: usize) -> (usize, usize) {
        ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1)
    }

    pub fn compute(x: &Tensor) -> Tensor {
        let (y, _) = Self::pool(x, false);
        y
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (y, argmax) = Self::pool(x, train);
        if train {
            self.cache = Some((argmax, x.shape()));
        }
        y
    }

    fn pool(x: &Tensor, track: bool) -> (Tensor, Vec<usize>) {
        let (oh, ow) = Self::out_hw(x.h, x.w);
        let mut y = Tensor::zeros(x.n, x.c, oh, ow);
        let mut argmax = if track { vec![0usize; y.numel()] } else { Vec::new() };
        for n in 0..x.n {
            for c in 0..x.c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_i = 0usize;
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let iy = oy as isize * 2 + ky - 1;
                                let ix = ox as isize * 2 + kx - 1;
                                if iy >= 0 && iy < x.h as isize && ix >= 0 && ix < x.w as isize {
                                    let idx = x.idx(n, c, iy as usize, ix as usize);
                                    let v = x.data[idx];
                                    if v > best {
                                        best = v;
                                        best_i = idx;
                                    }
                                }
                            }
                        }
                        let oi = y.idx(n, c, oy, ox);
                        y.data[oi] = best;
                        if track {
                            argmax[oi] = best_i;
                        }
                    }
                }
            }
        }
        (y, argmax)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let (argmax, (n, c, h, w)) = self.cache.take().expect("pool backward without forward");
        let mut gx = Tensor::zeros(n, c, h, w);
        for (i, &src) in argmax.iter().enumerate() {
            gx.data[src] += gy.data[i];
        }
        gx
    }
}
