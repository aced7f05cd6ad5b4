//! Leaf layer implementations: dense, batch-norm, pooling, activations.
//! Convolution lives in [`super::conv`].

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use super::conv::{matmul, matmul_abt_acc, matmul_atb_acc};

#[derive(Clone, Debug)]
pub struct DenseLayer<F: Element> {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub grad_weight: Tensor<F>,
    pub grad_bias: Tensor<F>,
}

impl<F: Element> DenseLayer<F> {
    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (n, d) = match x.shape() {
            [n, d] => (*n, *d),
            other => {
                return Err(Error::shape("Dense", format!("expected [N,D] input, got {other:?}")))
            }
        };
        if d != self.in_features {
            return Err(Error::shape(
                "Dense",
                format!("expected {} input features, got {}", self.in_features, d),
            ));
        }
        let mut y = Tensor::zeros(&[n, self.out_features]);
        matmul_abt_acc(x.data(), self.weight.data(), y.data_mut(), n, d, self.out_features);
        let b = self.bias.data();
        for row in y.data_mut().chunks_mut(self.out_features) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += *bv;
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
        let n = x.shape()[0];
        // dW += dy^T x ; db += column sums of dy ; dx = dy W
        matmul_atb_acc(
            dy.data(),
            x.data(),
            self.grad_weight.data_mut(),
            n,
            self.out_features,
            self.in_features,
        );
        let db = self.grad_bias.data_mut();
        for row in dy.data().chunks(self.out_features) {
            for (g, v) in db.iter_mut().zip(row) {
                *g += *v;
            }
        }
        let mut dx = Tensor::zeros(&[n, self.in_features]);
        matmul(
            dy.data(),
            self.weight.data(),
            dx.data_mut(),
            n,
            self.out_features,
            self.in_features,
        );
        dx
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormLayer<F: Element> {
    pub ch: usize,
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub grad_gamma: Tensor<F>,
    pub grad_beta: Tensor<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BnCache<F: Element> {
    pub xhat: Tensor<F>,
    pub inv_std: Vec<f64>,
}

impl<F: Element> BatchNormLayer<F> {
    pub fn new(ch: usize) -> Self {
        BatchNormLayer {
            ch,
            gamma: Tensor::filled(&[ch], F::one()),
            beta: Tensor::zeros(&[ch]),
            grad_gamma: Tensor::zeros(&[ch]),
            grad_beta: Tensor::zeros(&[ch]),
            running_mean: Tensor::zeros(&[ch]),
            running_var: Tensor::filled(&[ch], F::one()),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn check(&self, x: &Tensor<F>) -> Result<(usize, usize)> {
        match x.shape() {
            [n, c, h, w] if *c == self.ch => Ok((*n, h * w)),
            other => Err(Error::shape(
                "BatchNorm2d",
                format!("expected [N,{},H,W], got {other:?}", self.ch),
            )),
        }
    }

    /// Training forward: per-batch statistics, updates running stats.
    pub fn forward_train(&mut self, x: &Tensor<F>) -> Result<(Tensor<F>, BnCache<F>)> {
        let (n, hw) = self.check(x)?;
        let m = (n * hw) as f64;
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_std = vec![0.0f64; self.ch];
        let mut y = Tensor::zeros(x.shape());
        for c in 0..self.ch {
            let mut sum = 0.0f64;
            for img in 0..n {
                let off = (img * self.ch + c) * hw;
                for v in &x.data()[off..off + hw] {
                    sum += v.as_f64();
                }
            }
            let mean = sum / m;
            let mut varsum = 0.0f64;
            for img in 0..n {
                let off = (img * self.ch + c) * hw;
                for v in &x.data()[off..off + hw] {
                    let d = v.as_f64() - mean;
                    varsum += d * d;
                }
            }
            let var = varsum / m;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[c] = istd;
            let g = self.gamma.data()[c].as_f64();
            let b = self.beta.data()[c].as_f64();
            for img in 0..n {
                let off = (img * self.ch + c) * hw;
                for i in off..off + hw {
                    let xh = (x.data()[i].as_f64() - mean) * istd;
                    xhat.data_mut()[i] = F::from_f64(xh);
                    y.data_mut()[i] = F::from_f64(g * xh + b);
                }
            }
            // Unbiased variance in the running estimate, per convention.
            let var_unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            let rm = self.running_mean.data_mut();
            rm[c] = F::from_f64(rm[c].as_f64() * (1.0 - self.momentum) + mean * self.momentum);
            let rv = self.running_var.data_mut();
            rv[c] =
                F::from_f64(rv[c].as_f64() * (1.0 - self.momentum) + var_unbiased * self.momentum);
        }
        Ok((y, BnCache { xhat, inv_std }))
    }

    /// Inference forward: running statistics, no state mutation. Works in
    /// place on the owned activation.
    pub fn forward_eval(&self, mut x: Tensor<F>) -> Result<Tensor<F>> {
        let (_, hw) = self.check(&x)?;
        // y = scale*x + shift with per-channel constants
        let mut scale = vec![F::zero(); self.ch];
        let mut shift = vec![F::zero(); self.ch];
        for c in 0..self.ch {
            let istd = 1.0 / (self.running_var.data()[c].as_f64() + self.eps).sqrt();
            let s = self.gamma.data()[c].as_f64() * istd;
            scale[c] = F::from_f64(s);
            shift[c] =
                F::from_f64(self.beta.data()[c].as_f64() - self.running_mean.data()[c].as_f64() * s);
        }
        let img_sz = self.ch * hw;
        x.data_mut().par_chunks_mut(img_sz).for_each(|dst| {
            for c in 0..self.ch {
                let (sc, sh) = (scale[c], shift[c]);
                for d in dst[c * hw..(c + 1) * hw].iter_mut() {
                    *d = sc.mul_add(*d, sh);
                }
            }
        });
        Ok(x)
    }

    pub fn backward(&mut self, cache: &BnCache<F>, dy: &Tensor<F>) -> Tensor<F> {
        let shape = dy.shape();
        let (n, hw) = (shape[0], shape[2] * shape[3]);
        let m = (n * hw) as f64;
        let mut dx = Tensor::zeros(shape);
        for c in 0..self.ch {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for img in 0..n {
                let off = (img * self.ch + c) * hw;
                for i in off..off + hw {
                    let d = dy.data()[i].as_f64();
                    sum_dy += d;
                    sum_dy_xhat += d * cache.xhat.data()[i].as_f64();
                }
            }
            self.grad_beta.data_mut()[c] += F::from_f64(sum_dy);
            self.grad_gamma.data_mut()[c] += F::from_f64(sum_dy_xhat);
            let scale = self.gamma.data()[c].as_f64() * cache.inv_std[c] / m;
            for img in 0..n {
                let off = (img * self.ch + c) * hw;
                for i in off..off + hw {
                    let d = dy.data()[i].as_f64();
                    let xh = cache.xhat.data()[i].as_f64();
                    dx.data_mut()[i] =
                        F::from_f64(scale * (m * d - sum_dy - xh * sum_dy_xhat));
                }
            }
        }
        dx
    }
}

/// Gradient-pass bitmask used by ReLU/ReLU6.
#[derive(Clone)]
pub struct Mask {
    bits: Vec<u64>,
    len: usize,
}

impl Mask {
    pub fn with_len(len: usize) -> Self {
        Mask { bits: vec![0; len.div_ceil(64)], len }
    }
    #[inline]
    pub fn set(&mut self, i: usize) {
        self.bits[i / 64] |= 1 << (i % 64);
    }
    #[inline]
    pub fn get(&self, i: usize) -> bool {
        (self.bits[i / 64] >> (i % 64)) & 1 == 1
    }
    pub fn len(&self) -> usize {
        self.len
    }
}

pub fn relu_forward<F: Element>(x: &mut Tensor<F>, cap: Option<F>) -> Mask {
    let mut mask = Mask::with_len(x.numel());
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        let pass = match cap {
            Some(c) => *v > F::zero() && *v < c,
            None => *v > F::zero(),
        };
        if pass {
            mask.set(i);
        }
        if *v < F::zero() {
            *v = F::zero();
        } else if let Some(c) = cap {
            if *v > c {
                *v = c;
            }
        }
    }
    mask
}

/// Inference-path clamp: no mask, in place, parallel for large tensors.
pub fn relu_forward_eval<F: Element>(x: &mut Tensor<F>, cap: Option<F>) {
    let zero = F::zero();
    let apply = |chunk: &mut [F]| match cap {
        Some(c) => chunk.iter_mut().for_each(|v| *v = (*v).max(zero).min(c)),
        None => chunk.iter_mut().for_each(|v| *v = (*v).max(zero)),
    };
    let n = x.numel();
    if n >= 1 << 20 {
        x.data_mut().par_chunks_mut(1 << 19).for_each(apply);
    } else {
        apply(x.data_mut());
    }
}

pub fn relu_backward<F: Element>(mask: &Mask, dy: &mut Tensor<F>) {
    for (i, v) in dy.data_mut().iter_mut().enumerate() {
        if !mask.get(i) {
            *v = F::zero();
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MaxPoolLayer {
    pub kernel: usize,
    pub stride: usize,
}

impl MaxPoolLayer {
    pub fn out_dim(&self, d: usize) -> Option<usize> {
        if d < self.kernel {
            None
        } else {
            Some((d - self.kernel) / self.stride + 1)
        }
    }

    pub fn forward<F: Element>(&self, x: &Tensor<F>) -> Result<(Tensor<F>, Vec<u32>)> {
        let (n, c, h, w) = match x.shape() {
            [n, c, h, w] => (*n, *c, *h, *w),
            other => {
                return Err(Error::shape("MaxPool", format!("expected [N,C,H,W], got {other:?}")))
            }
        };
        let (oh, ow) = match (self.out_dim(h), self.out_dim(w)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::shape(
                    "MaxPool",
                    format!("kernel {} does not fit input {h}x{w}", self.kernel),
                ))
            }
        };
        let mut y = Tensor::zeros(&[n, c, oh, ow]);
        let mut idx = vec![0u32; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut y.data_mut()[plane * oh * ow..(plane + 1) * oh * ow];
            let ids = &mut idx[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = F::neg_infinity();
                    let mut best_i = 0usize;
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            let i = (oy * self.stride + ky) * w + ox * self.stride + kx;
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    dst[oy * ow + ox] = best;
                    ids[oy * ow + ox] = best_i as u32;
                }
            }
        }
        Ok((y, idx))
    }

    pub fn backward<F: Element>(&self, idx: &[u32], in_shape: &[usize], dy: &Tensor<F>) -> Tensor<F> {
        let mut dx = Tensor::zeros(in_shape);
        let (h, w) = (in_shape[2], in_shape[3]);
        let per_plane_out = dy.shape()[2] * dy.shape()[3];
        for plane in 0..in_shape[0] * in_shape[1] {
            let d_in = &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w];
            let d_out = &dy.data()[plane * per_plane_out..(plane + 1) * per_plane_out];
            let ids = &idx[plane * per_plane_out..(plane + 1) * per_plane_out];
            for (g, &i) in d_out.iter().zip(ids) {
                d_in[i as usize] += *g;
            }
        }
        dx
    }
}

/// Adaptive average pooling region for output index `i` of `out` cells
/// spanning `inp` input cells: `[i*inp/out, ceil((i+1)*inp/out))`.
#[inline]
pub fn adaptive_region(i: usize, out: usize, inp: usize) -> (usize, usize) {
    let start = i * inp / out;
    let end = ((i + 1) * inp).div_ceil(out);
    (start, end)
}

pub fn adaptive_avg_pool_forward<F: Element>(
    x: &Tensor<F>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<F>> {
    let (n, c, h, w) = match x.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        other => {
            return Err(Error::shape(
                "AdaptiveAvgPool",
                format!("expected [N,C,H,W], got {other:?}"),
            ))
        }
    };
    let mut y = Tensor::zeros(&[n, c, out_h, out_w]);
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut y.data_mut()[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for oy in 0..out_h {
            let (y0, y1) = adaptive_region(oy, out_h, h);
            for ox in 0..out_w {
                let (x0, x1) = adaptive_region(ox, out_w, w);
                let mut acc = 0.0f64;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        acc += src[iy * w + ix].as_f64();
                    }
                }
                dst[oy * out_w + ox] = F::from_f64(acc / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    Ok(y)
}

pub fn adaptive_avg_pool_backward<F: Element>(
    in_shape: &[usize],
    dy: &Tensor<F>,
) -> Tensor<F> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (out_h, out_w) = (dy.shape()[2], dy.shape()[3]);
    let mut dx = Tensor::zeros(in_shape);
    for plane in 0..in_shape[0] * in_shape[1] {
        let d_in = &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w];
        let d_out = &dy.data()[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for oy in 0..out_h {
            let (y0, y1) = adaptive_region(oy, out_h, h);
            for ox in 0..out_w {
                let (x0, x1) = adaptive_region(ox, out_w, w);
                let share =
                    F::from_f64(d_out[oy * out_w + ox].as_f64() / ((y1 - y0) * (x1 - x0)) as f64);
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        d_in[iy * w + ix] += share;
                    }
                }
            }
        }
    }
    dx
}

pub fn global_avg_pool_forward<F: Element>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, c, h, w) = match x.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        other => {
            return Err(Error::shape(
                "GlobalAvgPool",
                format!("expected [N,C,H,W], got {other:?}"),
            ))
        }
    };
    let mut y = Tensor::zeros(&[n, c]);
    for plane in 0..n * c {
        let mut acc = 0.0f64;
        for v in &x.data()[plane * h * w..(plane + 1) * h * w] {
            acc += v.as_f64();
        }
        y.data_mut()[plane] = F::from_f64(acc / (h * w) as f64);
    }
    Ok(y)
}

pub fn global_avg_pool_backward<F: Element>(in_shape: &[usize], dy: &Tensor<F>) -> Tensor<F> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let inv = 1.0 / (h * w) as f64;
    let mut dx = Tensor::zeros(in_shape);
    for plane in 0..in_shape[0] * in_shape[1] {
        let g = F::from_f64(dy.data()[plane].as_f64() * inv);
        dx.data_mut()[plane * h * w..(plane + 1) * h * w]
            .iter_mut()
            .for_each(|v| *v = g);
    }
    dx
}
