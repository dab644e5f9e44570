//! Minimal NCHW tensor machinery for the segmentation network: explicit
//! forward/backward layers over a GEMM core, no tape.
//!
//! Everything is f32, single-threaded, and bit-deterministic: the same seed
//! and inputs produce the same bytes on every run, which the freeze and
//! reproducibility contracts rely on.

mod layers;

pub use layers::{BatchNorm2d, BnMode, Conv2d, MaxPool3x3s2, Relu};

use crate::error::{Error, Result};

/// Dense NCHW activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Tensor> {
        if data.len() != n * c * h * w {
            return Err(Error::shape(format!("{n}x{c}x{h}x{w}"), data.len()));
        }
        Ok(Tensor { n, c, h, w, data })
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(n, c, y, x)]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    /// One sample's contiguous slice.
    pub fn sample(&self, n: usize) -> &[f32] {
        let stride = self.c * self.h * self.w;
        &self.data[n * stride..(n + 1) * stride]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f32] {
        let stride = self.c * self.h * self.w;
        &mut self.data[n * stride..(n + 1) * stride]
    }
}

/// A named, trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Param {
        let len = data.len();
        debug_assert_eq!(shape.iter().product::<usize>(), len);
        Param {
            name: name.into(),
            shape,
            data,
            grad: vec![0.0; len],
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Periodic rearrangement of C*r^2 channels into an r-times larger grid:
/// `out[c, r*h + i, r*w + j] = in[c*r^2 + i*r + j, h, w]` per sample.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    if r == 0 {
        return Err(Error::Config("pixel_shuffle factor must be positive".into()));
    }
    if x.c % (r * r) != 0 {
        return Err(Error::Data(format!(
            "pixel_shuffle: {} channels not divisible by {}",
            x.c,
            r * r
        )));
    }
    if r == 1 {
        return Ok(x.clone());
    }
    let oc = x.c / (r * r);
    let (oh, ow) = (x.h * r, x.w * r);
    let mut out = Tensor::zeros(x.n, oc, oh, ow);
    for n in 0..x.n {
        for c in 0..oc {
            for i in 0..r {
                for j in 0..r {
                    let ic = c * r * r + i * r + j;
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            let v = x.at(n, ic, y, xx);
                            let oi = out.idx(n, c, r * y + i, r * xx + j);
                            out.data[oi] = v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`pixel_shuffle`]; also the backward pass of a shuffle.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    if r == 0 {
        return Err(Error::Config("pixel_unshuffle factor must be positive".into()));
    }
    if x.h % r != 0 || x.w % r != 0 {
        return Err(Error::Data(format!(
            "pixel_unshuffle: {}x{} not divisible by {r}",
            x.h, x.w
        )));
    }
    if r == 1 {
        return Ok(x.clone());
    }
    let oc = x.c * r * r;
    let (oh, ow) = (x.h / r, x.w / r);
    let mut out = Tensor::zeros(x.n, oc, oh, ow);
    for n in 0..x.n {
        for c in 0..x.c {
            for i in 0..r {
                for j in 0..r {
                    let occ = c * r * r + i * r + j;
                    for y in 0..oh {
                        for xx in 0..ow {
                            let v = x.at(n, c, r * y + i, r * xx + j);
                            let oi = out.idx(n, occ, y, xx);
                            out.data[oi] = v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Concatenate along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.n != b.n || a.h != b.h || a.w != b.w {
        return Err(Error::shape(
            format!("{}x*x{}x{}", a.n, a.h, a.w),
            format!("{}x*x{}x{}", b.n, b.h, b.w),
        ));
    }
    let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    let plane = a.h * a.w;
    for n in 0..a.n {
        let dst = out.sample_mut(n);
        dst[..a.c * plane].copy_from_slice(a.sample(n));
        dst[a.c * plane..].copy_from_slice(b.sample(n));
    }
    Ok(out)
}

/// Split a channel-concatenated gradient back into its two halves.
pub fn split_channels(x: &Tensor, c_first: usize) -> (Tensor, Tensor) {
    debug_assert!(c_first <= x.c);
    let c_second = x.c - c_first;
    let mut a = Tensor::zeros(x.n, c_first, x.h, x.w);
    let mut b = Tensor::zeros(x.n, c_second, x.h, x.w);
    let plane = x.h * x.w;
    for n in 0..x.n {
        let src = x.sample(n);
        a.sample_mut(n).copy_from_slice(&src[..c_first * plane]);
        b.sample_mut(n).copy_from_slice(&src[c_first * plane..]);
    }
    (a, b)
}
