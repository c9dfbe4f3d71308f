//! Minimal differentiable tensor substrate: NCHW float32 tensors, named
//! parameters, and the handful of layers the backbone and head need, each
//! with an explicit backward pass.
//!
//! Forward passes take `&self` and return a cache; backward passes take the
//! cache and accumulate into parameter gradients. All reductions run in a
//! fixed order, so results are bit-reproducible on a given machine.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * c * h * w {
            bail!(
                Shape,
                "{} values for tensor {}x{}x{}x{}",
                data.len(),
                n,
                c,
                h,
                w
            );
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Values of sample `i`, `C x H x W`.
    pub fn item(&self, i: usize) -> &[f32] {
        let s = self.c * self.plane();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f32] {
        let s = self.c * self.plane();
        &mut self.data[i * s..(i + 1) * s]
    }

    /// Copies out samples `range` as a new batch.
    pub fn slice_batch(&self, start: usize, len: usize) -> Tensor {
        let s = self.c * self.plane();
        Tensor {
            n: len,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data[start * s..(start + len) * s].to_vec(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// A trainable array with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![0.0; len],
            grad: vec![0.0; len],
        }
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], v: f32) -> Self {
        let mut p = Self::zeros(name, shape);
        p.value.fill(v);
        p
    }

    pub fn normal<R: Rng + ?Sized>(name: impl Into<String>, shape: &[usize], std: f32, rng: &mut R) -> Self {
        let mut p = Self::zeros(name, shape);
        let dist = Normal::new(0.0f32, std).expect("finite std");
        for v in &mut p.value {
            *v = dist.sample(rng);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Non-trainable state saved with the model (normalization statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
}

/// Square-kernel convolution without bias, lowered to one GEMM per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `[cout, cin, k, k]`.
    pub weight: Param,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f32>,
    in_shape: [usize; 4],
    out_h: usize,
    out_w: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        // He initialization for ReLU networks.
        let fan_in = (cin * kernel * kernel) as f32;
        let weight = Param::normal(
            format!("{name}.weight"),
            &[cout, cin, kernel, kernel],
            (2.0 / fan_in).sqrt(),
            rng,
        );
        Self {
            weight,
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [f32]) {
        let (k, s, pad) = (self.kernel, self.stride, self.pad as isize);
        let p = oh * ow;
        for ci in 0..self.cin {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - pad;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - pad;
                            *d = if ix >= 0 && ix < w as isize {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f32]) {
        let (k, s, pad) = (self.kernel, self.stride, self.pad as isize);
        let p = oh * ow;
        for ci in 0..self.cin {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            let ix = (ox * s + kx) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor, keep: bool) -> Result<(Tensor, Option<ConvCache>)> {
        if x.c != self.cin {
            bail!(
                Shape,
                "{}: expected {} input channels, got {}",
                self.weight.name,
                self.cin,
                x.c
            );
        }
        let (oh, ow) = self.out_size(x.h, x.w);
        let (kk, p) = (self.patch_len(), oh * ow);
        let mut out = Tensor::zeros(x.n, self.cout, oh, ow);
        let mut cols = vec![0.0f32; if keep { x.n * kk * p } else { kk * p }];
        for i in 0..x.n {
            let col = if keep {
                &mut cols[i * kk * p..(i + 1) * kk * p]
            } else {
                &mut cols[..]
            };
            self.im2col(x.item(i), x.h, x.w, oh, ow, col);
            let y = out.item_mut(i);
            // y[cout x p] = W[cout x kk] * col[kk x p]
            unsafe {
                matrixmultiply::sgemm(
                    self.cout,
                    kk,
                    p,
                    1.0,
                    self.weight.value.as_ptr(),
                    kk as isize,
                    1,
                    col.as_ptr(),
                    p as isize,
                    1,
                    0.0,
                    y.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
        }
        let cache = keep.then(|| ConvCache {
            cols,
            in_shape: x.shape(),
            out_h: oh,
            out_w: ow,
        });
        Ok((out, cache))
    }

    /// Accumulates the weight gradient; returns the input gradient when
    /// `need_dx`.
    pub fn backward(&mut self, cache: &ConvCache, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let [n, _, h, w] = cache.in_shape;
        let (oh, ow) = (cache.out_h, cache.out_w);
        let (kk, p) = (self.patch_len(), oh * ow);
        let mut dx = need_dx.then(|| Tensor::zeros(n, self.cin, h, w));
        let mut dcols = vec![0.0f32; if need_dx { kk * p } else { 0 }];
        for i in 0..n {
            let col = &cache.cols[i * kk * p..(i + 1) * kk * p];
            let g = dy.item(i);
            // dW[cout x kk] += dy[cout x p] * col^T[p x kk]
            unsafe {
                matrixmultiply::sgemm(
                    self.cout,
                    p,
                    kk,
                    1.0,
                    g.as_ptr(),
                    p as isize,
                    1,
                    col.as_ptr(),
                    1,
                    p as isize,
                    1.0,
                    self.weight.grad.as_mut_ptr(),
                    kk as isize,
                    1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                // dcol[kk x p] = W^T[kk x cout] * dy[cout x p]
                unsafe {
                    matrixmultiply::sgemm(
                        kk,
                        self.cout,
                        p,
                        1.0,
                        self.weight.value.as_ptr(),
                        1,
                        kk as isize,
                        g.as_ptr(),
                        p as isize,
                        1,
                        0.0,
                        dcols.as_mut_ptr(),
                        p as isize,
                        1,
                    );
                }
                self.col2im(&dcols, h, w, oh, ow, dx.item_mut(i));
            }
        }
        dx
    }
}

/// Per-channel batch normalization with running estimates for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    pub eps: f32,
    pub momentum: f32,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    train: bool,
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    batch_mean: Vec<f32>,
    batch_var_unbiased: Vec<f32>,
    shape: [usize; 4],
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::filled(format!("{name}.gamma"), &[channels], 1.0),
            beta: Param::zeros(format!("{name}.beta"), &[channels]),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                shape: vec![channels],
                value: vec![0.0; channels],
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                shape: vec![channels],
                value: vec![1.0; channels],
            },
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> (Tensor, BnCache) {
        let (n, c, hw) = (x.n, x.c, x.plane());
        let m = (n * hw) as f64;
        let mut mean = vec![0.0f32; c];
        let mut inv_std = vec![0.0f32; c];
        let mut var_unbiased = vec![0.0f32; c];
        for ch in 0..c {
            if train {
                let mut s = 0.0f64;
                for i in 0..n {
                    s += x.data[(i * c + ch) * hw..][..hw].iter().map(|v| *v as f64).sum::<f64>();
                }
                let mu = s / m;
                let mut ss = 0.0f64;
                for i in 0..n {
                    ss += x.data[(i * c + ch) * hw..][..hw]
                        .iter()
                        .map(|v| (*v as f64 - mu).powi(2))
                        .sum::<f64>();
                }
                let var = ss / m;
                mean[ch] = mu as f32;
                inv_std[ch] = (1.0 / (var + self.eps as f64).sqrt()) as f32;
                var_unbiased[ch] = if m > 1.0 { (ss / (m - 1.0)) as f32 } else { var as f32 };
            } else {
                mean[ch] = self.running_mean.value[ch];
                inv_std[ch] =
                    (1.0 / (self.running_var.value[ch] as f64 + self.eps as f64).sqrt()) as f32;
            }
        }
        let mut xhat = vec![0.0f32; x.data.len()];
        let mut out = Tensor::zeros(n, c, x.h, x.w);
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                let (mu, is, g, b) = (mean[ch], inv_std[ch], self.gamma.value[ch], self.beta.value[ch]);
                for j in off..off + hw {
                    let xh = (x.data[j] - mu) * is;
                    xhat[j] = xh;
                    out.data[j] = g * xh + b;
                }
            }
        }
        let cache = BnCache {
            train,
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var_unbiased: var_unbiased,
            shape: x.shape(),
        };
        (out, cache)
    }

    pub fn update_running(&mut self, cache: &BnCache) {
        if !cache.train {
            return;
        }
        let m = self.momentum;
        for ch in 0..self.channels() {
            let rm = &mut self.running_mean.value[ch];
            *rm = (1.0 - m) * *rm + m * cache.batch_mean[ch];
            let rv = &mut self.running_var.value[ch];
            *rv = (1.0 - m) * *rv + m * cache.batch_var_unbiased[ch];
        }
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Tensor) -> Tensor {
        let [n, c, _, _] = cache.shape;
        let hw = dy.plane();
        let m = (n * hw) as f32;
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
        for ch in 0..c {
            let mut dgamma = 0.0f64;
            let mut dbeta = 0.0f64;
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    dgamma += (dy.data[j] * cache.xhat[j]) as f64;
                    dbeta += dy.data[j] as f64;
                }
            }
            self.gamma.grad[ch] += dgamma as f32;
            self.beta.grad[ch] += dbeta as f32;
            let g = self.gamma.value[ch];
            let is = cache.inv_std[ch];
            if cache.train {
                let scale = g * is / m;
                let (dg, db) = (dgamma as f32, dbeta as f32);
                for i in 0..n {
                    let off = (i * c + ch) * hw;
                    for j in off..off + hw {
                        dx.data[j] = scale * (m * dy.data[j] - db - cache.xhat[j] * dg);
                    }
                }
            } else {
                for i in 0..n {
                    let off = (i * c + ch) * hw;
                    for j in off..off + hw {
                        dx.data[j] = dy.data[j] * g * is;
                    }
                }
            }
        }
        dx
    }
}

/// `conv -> batch norm -> ReLU`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    conv: ConvCache,
    bn: BnCache,
    /// Post-activation output; its sign pattern is the ReLU mask.
    out: Tensor,
}

impl ConvBnRelu {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), cin, cout, kernel, stride, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), cout),
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv.weight.len() + self.bn.gamma.len() + self.bn.beta.len()
    }

    pub fn forward(&self, x: &Tensor, train: bool, keep: bool) -> Result<(Tensor, Option<BlockCache>)> {
        let (y, conv_cache) = self.conv.forward(x, keep)?;
        let (mut y, bn_cache) = self.bn.forward(&y, train);
        for v in &mut y.data {
            *v = v.max(0.0);
        }
        let cache = conv_cache.map(|conv| BlockCache {
            conv,
            bn: bn_cache,
            out: y.clone(),
        });
        Ok((y, cache))
    }

    pub fn update_running(&mut self, cache: &BlockCache) {
        self.bn.update_running(&cache.bn);
    }

    pub fn backward(&mut self, cache: &BlockCache, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let mut g = dy.clone();
        for (d, o) in g.data.iter_mut().zip(&cache.out.data) {
            if *o <= 0.0 {
                *d = 0.0;
            }
        }
        let g = self.bn.backward(&cache.bn, &g);
        self.conv.backward(&cache.conv, &g, need_dx)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.conv.weight, &self.bn.gamma, &self.bn.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.conv.weight, &mut self.bn.gamma, &mut self.bn.beta]
    }

    pub fn buffers(&self) -> Vec<&Buffer> {
        vec![&self.bn.running_mean, &self.bn.running_var]
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        vec![&mut self.bn.running_mean, &mut self.bn.running_var]
    }
}

/// Global average pooling followed by a linear map to logits.
#[derive(Debug, Clone, PartialEq)]
pub struct GapLinear {
    /// `[out, in]`; row `c` is the class-`c` template used for CAMs.
    pub weight: Param,
    pub bias: Param,
}

#[derive(Debug, Clone)]
pub struct GapCache {
    pooled: Vec<f32>,
    in_shape: [usize; 4],
}

impl GapLinear {
    pub fn new<R: Rng + ?Sized>(name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::normal(
                format!("{name}.weight"),
                &[outputs, inputs],
                (1.0 / inputs as f32).sqrt(),
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), &[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn row(&self, class: usize) -> &[f32] {
        let d = self.inputs();
        &self.weight.value[class * d..(class + 1) * d]
    }

    /// Logits as `n x outputs`, row-major.
    pub fn forward(&self, x: &Tensor) -> Result<(Vec<f32>, GapCache)> {
        let d = self.inputs();
        if x.c != d {
            bail!(
                Shape,
                "{}: expected {} channels, got {}",
                self.weight.name,
                d,
                x.c
            );
        }
        let hw = x.plane();
        let mut pooled = vec![0.0f32; x.n * d];
        for i in 0..x.n {
            for ch in 0..d {
                let s: f64 = x.data[(i * d + ch) * hw..][..hw].iter().map(|v| *v as f64).sum();
                pooled[i * d + ch] = (s / hw as f64) as f32;
            }
        }
        let k = self.outputs();
        let mut logits = vec![0.0f32; x.n * k];
        for i in 0..x.n {
            let p = &pooled[i * d..(i + 1) * d];
            for c in 0..k {
                let dot: f64 = self
                    .row(c)
                    .iter()
                    .zip(p)
                    .map(|(w, v)| *w as f64 * *v as f64)
                    .sum();
                logits[i * k + c] = (dot + self.bias.value[c] as f64) as f32;
            }
        }
        Ok((
            logits,
            GapCache {
                pooled,
                in_shape: x.shape(),
            },
        ))
    }

    pub fn backward(&mut self, cache: &GapCache, dlogits: &[f32]) -> Tensor {
        let [n, d, h, w] = cache.in_shape;
        let k = self.outputs();
        let hw = h * w;
        let mut dx = Tensor::zeros(n, d, h, w);
        for i in 0..n {
            let g = &dlogits[i * k..(i + 1) * k];
            let p = &cache.pooled[i * d..(i + 1) * d];
            for c in 0..k {
                self.bias.grad[c] += g[c];
                let row = &mut self.weight.grad[c * d..(c + 1) * d];
                for (wg, v) in row.iter_mut().zip(p) {
                    *wg += g[c] * v;
                }
            }
            for ch in 0..d {
                let mut s = 0.0f32;
                for c in 0..k {
                    s += g[c] * self.weight.value[c * d + ch];
                }
                let v = s / hw as f32;
                dx.data[(i * d + ch) * hw..][..hw].fill(v);
            }
        }
        dx
    }
}

/// Nearest-neighbour upsampling by 2 in both spatial dims.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.n, x.c, h2, w2);
    for plane in 0..x.n * x.c {
        let src = &x.data[plane * x.plane()..][..x.plane()];
        let dst = &mut out.data[plane * h2 * w2..][..h2 * w2];
        for r in 0..h2 {
            for c in 0..w2 {
                dst[r * w2 + c] = src[(r / 2) * x.w + c / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for plane in 0..dy.n * dy.c {
        let src = &dy.data[plane * dy.plane()..][..dy.plane()];
        let dst = &mut dx.data[plane * h * w..][..h * w];
        for r in 0..dy.h {
            for c in 0..dy.w {
                dst[(r / 2) * w + c / 2] += src[r * dy.w + c];
            }
        }
    }
    dx
}

/// Channel concatenation `[a | b]`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.n != b.n || a.h != b.h || a.w != b.w {
        bail!(
            Shape,
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        );
    }
    let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let dst = out.item_mut(i);
        let split = a.c * a.plane();
        dst[..split].copy_from_slice(a.item(i));
        dst[split..].copy_from_slice(b.item(i));
    }
    Ok(out)
}

/// Splits a gradient of `[a | b]` back into its two parts.
pub fn split_channels(dy: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let cb = dy.c - ca;
    let mut a = Tensor::zeros(dy.n, ca, dy.h, dy.w);
    let mut b = Tensor::zeros(dy.n, cb, dy.h, dy.w);
    for i in 0..dy.n {
        let src = dy.item(i);
        let split = ca * dy.plane();
        a.item_mut(i).copy_from_slice(&src[..split]);
        b.item_mut(i).copy_from_slice(&src[split..]);
    }
    (a, b)
}

pub fn sigmoid(z: f32) -> f32 {
    (1.0 / (1.0 + (-(z as f64)).exp())) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0f32)).collect();
        Tensor::from_vec(n, c, h, w, data).unwrap()
    }

    /// Direct convolution used as an oracle for the GEMM lowering.
    fn naive_conv(conv: &Conv2d, x: &Tensor) -> Tensor {
        let (oh, ow) = conv.out_size(x.h, x.w);
        let k = conv.kernel;
        let mut out = Tensor::zeros(x.n, conv.cout, oh, ow);
        for i in 0..x.n {
            for co in 0..conv.cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0f64;
                        for ci in 0..conv.cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.value[((co * conv.cin + ci) * k + ky) * k + kx];
                                    let xv = x.data[((i * x.c + ci) * x.h + iy as usize) * x.w + ix as usize];
                                    s += wv as f64 * xv as f64;
                                }
                            }
                        }
                        out.data[((i * conv.cout + co) * oh + oy) * ow + ox] = s as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (k, s, h, w) in [(3, 1, 5, 6), (3, 2, 8, 8), (3, 2, 7, 5), (1, 1, 4, 4)] {
            let conv = Conv2d::new("c", 3, 4, k, s, &mut rng);
            let x = random_tensor(&mut rng, 2, 3, h, w);
            let (y, _) = conv.forward(&x, false).unwrap();
            let r = naive_conv(&conv, &x);
            assert_eq!(y.shape(), r.shape());
            for (a, b) in y.data.iter().zip(&r.data) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    /// Central differences of `sum(dy * f(x))` against the analytic
    /// backward pass.
    fn check_grad(f: impl Fn(&Tensor) -> Tensor, analytic: Tensor, x: &Tensor, dy: &Tensor) {
        let h = 1e-2f32;
        let probe = |t: &Tensor| -> f64 {
            f(t).data.iter().zip(&dy.data).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for j in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[j] += h;
            let mut xm = x.clone();
            xm.data[j] -= h;
            let fd = (probe(&xp) - probe(&xm)) / (2.0 * h as f64);
            worst = worst.max((fd - analytic.data[j] as f64).abs());
            scale = scale.max(fd.abs());
        }
        assert!(worst / scale.max(1e-6) < 1e-2, "max abs err {worst} at scale {scale}");
    }

    #[test]
    fn conv_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::new("c", 2, 3, 3, 2, &mut rng);
        let x = random_tensor(&mut rng, 2, 2, 6, 6);
        let (y, cache) = conv.forward(&x, true).unwrap();
        let dy = random_tensor(&mut rng, y.n, y.c, y.h, y.w);
        let dx = conv.backward(&cache.unwrap(), &dy, true).unwrap();
        check_grad(|t| conv.forward(t, false).unwrap().0, dx, &x, &dy);
    }

    #[test]
    fn conv_weight_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::new("c", 2, 3, 3, 1, &mut rng);
        let x = random_tensor(&mut rng, 2, 2, 5, 5);
        let (y, cache) = conv.forward(&x, true).unwrap();
        let dy = random_tensor(&mut rng, y.n, y.c, y.h, y.w);
        conv.backward(&cache.unwrap(), &dy, false);
        let h = 1e-2f32;
        for j in 0..conv.weight.len() {
            let mut cp = conv.clone();
            cp.weight.value[j] += h;
            let mut cm = conv.clone();
            cm.weight.value[j] -= h;
            let probe = |c: &Conv2d| -> f64 {
                c.forward(&x, false).unwrap().0.data.iter().zip(&dy.data).map(|(a, b)| *a as f64 * *b as f64).sum()
            };
            let fd = (probe(&cp) - probe(&cm)) / (2.0 * h as f64);
            assert!((fd - conv.weight.grad[j] as f64).abs() < 1e-2 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn batchnorm_train_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm2d::new("bn", 3);
        for v in &mut bn.gamma.value {
            *v = rng.random_range(0.5..1.5);
        }
        let x = random_tensor(&mut rng, 3, 3, 2, 2);
        let (y, cache) = bn.forward(&x, true);
        let dy = random_tensor(&mut rng, y.n, y.c, y.h, y.w);
        let dx = bn.backward(&cache, &dy);
        check_grad(|t| bn.forward(t, true).0, dx, &x, &dy);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut bn = BatchNorm2d::new("bn", 1);
        let x = Tensor::from_vec(2, 1, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (_, cache) = bn.forward(&x, true);
        bn.update_running(&cache);
        assert!((bn.running_mean.value[0] - 0.25).abs() < 1e-6);
        // unbiased variance of 1..4 is 5/3
        assert!((bn.running_var.value[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-6);
        let (a, _) = bn.forward(&x, false);
        let (b, _) = bn.forward(&x, false);
        assert_eq!(a, b);
    }

    #[test]
    fn gap_linear_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut lin = GapLinear::new("cls", 4, 3, &mut rng);
        let x = random_tensor(&mut rng, 2, 4, 3, 3);
        let (logits, cache) = lin.forward(&x).unwrap();
        let g: Vec<f32> = (0..logits.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dx = lin.backward(&cache, &g);
        let dy = Tensor::from_vec(2, 3, 1, 1, g.clone()).unwrap();
        let f = |t: &Tensor| {
            let (l, _) = lin.forward(t).unwrap();
            Tensor::from_vec(2, 3, 1, 1, l).unwrap()
        };
        check_grad(f, dx, &x, &dy);
    }

    #[test]
    fn upsample_and_concat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, 2, 3, 2, 3);
        let up = upsample2(&x);
        assert_eq!(up.shape(), [2, 3, 4, 6]);
        assert_eq!(up.data[(1 * 3 + 2) * 24 + 3 * 6 + 5], x.data[(1 * 3 + 2) * 6 + 1 * 3 + 2]);
        let back = upsample2_backward(&up);
        for (a, b) in back.data.iter().zip(&x.data) {
            assert_eq!(*a, 4.0 * b);
        }
        let y = random_tensor(&mut rng, 2, 5, 2, 3);
        let cat = concat_channels(&x, &y).unwrap();
        let (a, b) = split_channels(&cat, 3);
        assert_eq!((a, b), (x.clone(), y));
        assert!(concat_channels(&x, &up).is_err());
    }
}
