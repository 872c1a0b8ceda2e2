//! Layers with explicit forward caches and hand-written backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::tensor::{matmul, Mat, Scalar, Tensor};
use crate::error::{Error, Result};

/// Batch-norm behaviour: batch statistics (`Train`) or running statistics (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Whether a backward pass accumulates parameter gradients or only
/// propagates to the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    Accumulate,
    InputOnly,
}

/// A named parameter or buffer with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    /// Buffers (batch-norm running statistics) are saved but never optimized.
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    fn filled(name: String, shape: Vec<usize>, v: T, trainable: bool) -> Self {
        let n = shape.iter().product();
        Self {
            name,
            shape,
            value: vec![v; n],
            grad: vec![T::zero(); n],
            trainable,
        }
    }

    fn normal(name: String, shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::filled(name, shape, T::zero(), true);
        let dist = Normal::new(0.0, std).expect("valid std");
        for v in &mut p.value {
            *v = T::lit(dist.sample(rng));
        }
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Standard deviation of the normal initialisation for kernels and weights.
pub const INIT_STD: f64 = 0.02;
/// Dense weights are drawn with std `HEAD_GAIN / sqrt(in_features)`, which keeps
/// the initial logit spread small for wide flattened inputs.
pub const HEAD_GAIN: f64 = 0.1;

pub trait Module<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;
    /// Consumes the cache recorded by the preceding `forward`.
    fn backward(&mut self, grad: &Tensor<T>, gm: GradMode) -> Result<Tensor<T>>;
    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(channels: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(format!("spatial size >= {}", k - 2 * pad), format!("{h}x{w}")));
        }
        Ok(Self {
            channels,
            h,
            w,
            k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn source(&self, o: usize, kk: usize, limit: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < limit).then_some(i as usize)
    }

    /// Unfolds one `[C, H, W]` image into `[C*K*K, OH*OW]`.
    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let ncol = self.cols();
        for c in 0..self.channels {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * ncol..(row + 1) * ncol];
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match self.source(oy, ky, self.h) {
                            None => line.fill(T::zero()),
                            Some(iy) => {
                                let src = &img[(c * self.h + iy) * self.w..][..self.w];
                                for (ox, d) in line.iter_mut().enumerate() {
                                    *d = self.source(ox, kx, self.w).map_or(T::zero(), |ix| src[ix]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters columns back, summing overlaps.
    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        img.fill(T::zero());
        let ncol = self.cols();
        for c in 0..self.channels {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * ncol..(row + 1) * ncol];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.source(oy, ky, self.h) else {
                            continue;
                        };
                        let dst = &mut img[(c * self.h + iy) * self.w..][..self.w];
                        for ox in 0..self.out_w {
                            if let Some(ix) = self.source(ox, kx, self.w) {
                                dst[ix] = dst[ix] + src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct ConvCache<T> {
    geom: ConvGeom,
    batch: usize,
    /// Unfolded input per sample (conv) or the input itself (transposed conv).
    saved: Vec<T>,
}

/// Strided 2-D convolution, weights `[out, in*k*k]`.
pub struct Conv2d<T> {
    name: String,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    weight: Param<T>,
    bias: Option<Param<T>>,
    cache: Option<ConvCache<T>>,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            name: name.to_string(),
            in_ch,
            out_ch,
            k,
            stride,
            pad,
            weight: Param::normal(format!("{name}.weight"), vec![out_ch, in_ch, k, k], INIT_STD, rng),
            bias: bias.then(|| Param::filled(format!("{name}.bias"), vec![out_ch], T::zero(), true)),
            cache: None,
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: Option<&Param<T>>, plane: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in out.chunks_mut(plane).zip(b.value.iter().cycle()) {
            for v in chunk {
                *v = *v + bv;
            }
        }
    }
}

fn accumulate_bias_grad<T: Scalar>(grad: &Tensor<T>, bias: Option<&mut Param<T>>) {
    if let Some(b) = bias {
        let plane = grad.height() * grad.width();
        let c = grad.channels();
        for (i, chunk) in grad.data().chunks(plane).enumerate() {
            let s: T = chunk.iter().copied().sum();
            b.grad[i % c] = b.grad[i % c] + s;
        }
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        if c != self.in_ch {
            return Err(Error::shape(format!("{} input channels", self.in_ch), c));
        }
        let geom = ConvGeom::new(c, h, w, self.k, self.stride, self.pad)?;
        let (rows, ncol) = (geom.rows(), geom.cols());
        let mut cols = vec![T::zero(); n * rows * ncol];
        cols.par_chunks_mut(rows * ncol)
            .zip(x.data().par_chunks(c * h * w))
            .for_each(|(col, img)| geom.im2col(img, col));
        let mut out = Tensor::zeros([n, self.out_ch, geom.out_h, geom.out_w]);
        let wmat = Mat::new(&self.weight.value, self.out_ch, rows);
        out.data_mut()
            .par_chunks_mut(self.out_ch * ncol)
            .zip(cols.par_chunks(rows * ncol))
            .for_each(|(o, col)| matmul(wmat, Mat::new(col, rows, ncol), o, false));
        add_bias(out.data_mut(), self.bias.as_ref(), ncol);
        self.cache = Some(ConvCache {
            geom,
            batch: n,
            saved: cols,
        });
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>, gm: GradMode) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| Error::NoForwardCache(self.name.clone()))?;
        let g = cache.geom;
        let (rows, ncol) = (g.rows(), g.cols());
        if grad.shape() != [cache.batch, self.out_ch, g.out_h, g.out_w] {
            return Err(Error::shape(
                format!("{:?}", [cache.batch, self.out_ch, g.out_h, g.out_w]),
                format!("{:?}", grad.shape()),
            ));
        }
        if gm == GradMode::Accumulate {
            for (dy, col) in grad.data().chunks(self.out_ch * ncol).zip(cache.saved.chunks(rows * ncol)) {
                matmul(
                    Mat::new(dy, self.out_ch, ncol),
                    Mat::new(col, rows, ncol).t(),
                    &mut self.weight.grad,
                    true,
                );
            }
            accumulate_bias_grad(grad, self.bias.as_mut());
        }
        let wmat = Mat::new(&self.weight.value, self.out_ch, rows);
        let mut dx = Tensor::zeros([cache.batch, self.in_ch, g.h, g.w]);
        dx.data_mut()
            .par_chunks_mut(self.in_ch * g.h * g.w)
            .zip(grad.data().par_chunks(self.out_ch * ncol))
            .for_each(|(dimg, dy)| {
                let mut dcol = vec![T::zero(); rows * ncol];
                matmul(wmat.t(), Mat::new(dy, self.out_ch, ncol), &mut dcol, false);
                g.col2im(&dcol, dimg);
            });
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Transposed convolution (the adjoint of [`Conv2d`] in its spatial
/// arguments), weights `[in, out*k*k]`. Output size is `(in - 1) * stride - 2 * pad + k`.
pub struct ConvTranspose2d<T> {
    name: String,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    weight: Param<T>,
    bias: Option<Param<T>>,
    cache: Option<ConvCache<T>>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            name: name.to_string(),
            in_ch,
            out_ch,
            k,
            stride,
            pad,
            weight: Param::normal(format!("{name}.weight"), vec![in_ch, out_ch, k, k], INIT_STD, rng),
            bias: bias.then(|| Param::filled(format!("{name}.bias"), vec![out_ch], T::zero(), true)),
            cache: None,
        }
    }
}

impl<T: Scalar> Module<T> for ConvTranspose2d<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        if c != self.in_ch {
            return Err(Error::shape(format!("{} input channels", self.in_ch), c));
        }
        if h == 0 || w == 0 {
            return Err(Error::shape("non-empty input", format!("{h}x{w}")));
        }
        let oh = (h - 1) * self.stride + self.k - 2 * self.pad;
        let ow = (w - 1) * self.stride + self.k - 2 * self.pad;
        let geom = ConvGeom::new(self.out_ch, oh, ow, self.k, self.stride, self.pad)?;
        debug_assert_eq!((geom.out_h, geom.out_w), (h, w));
        let (rows, ncol) = (geom.rows(), geom.cols());
        let wmat = Mat::new(&self.weight.value, self.in_ch, rows);
        let mut out = Tensor::zeros([n, self.out_ch, oh, ow]);
        out.data_mut()
            .par_chunks_mut(self.out_ch * oh * ow)
            .zip(x.data().par_chunks(c * h * w))
            .for_each(|(o, xs)| {
                let mut cols = vec![T::zero(); rows * ncol];
                matmul(wmat.t(), Mat::new(xs, c, ncol), &mut cols, false);
                geom.col2im(&cols, o);
            });
        add_bias(out.data_mut(), self.bias.as_ref(), oh * ow);
        self.cache = Some(ConvCache {
            geom,
            batch: n,
            saved: x.data().to_vec(),
        });
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>, gm: GradMode) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| Error::NoForwardCache(self.name.clone()))?;
        let g = cache.geom;
        let (rows, ncol) = (g.rows(), g.cols());
        if grad.shape() != [cache.batch, self.out_ch, g.h, g.w] {
            return Err(Error::shape(
                format!("{:?}", [cache.batch, self.out_ch, g.h, g.w]),
                format!("{:?}", grad.shape()),
            ));
        }
        let mut dcols = vec![T::zero(); cache.batch * rows * ncol];
        dcols
            .par_chunks_mut(rows * ncol)
            .zip(grad.data().par_chunks(self.out_ch * g.h * g.w))
            .for_each(|(col, dy)| g.im2col(dy, col));
        if gm == GradMode::Accumulate {
            for (xs, col) in cache.saved.chunks(self.in_ch * ncol).zip(dcols.chunks(rows * ncol)) {
                matmul(
                    Mat::new(xs, self.in_ch, ncol),
                    Mat::new(col, rows, ncol).t(),
                    &mut self.weight.grad,
                    true,
                );
            }
            accumulate_bias_grad(grad, self.bias.as_mut());
        }
        let wmat = Mat::new(&self.weight.value, self.in_ch, rows);
        let mut dx = Tensor::zeros([cache.batch, self.in_ch, g.out_h, g.out_w]);
        dx.data_mut()
            .par_chunks_mut(self.in_ch * ncol)
            .zip(dcols.par_chunks(rows * ncol))
            .for_each(|(d, col)| matmul(wmat, Mat::new(col, rows, ncol), d, false));
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

struct BnCache<T> {
    shape: [usize; 4],
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

/// Per-channel batch normalization over `(N, H, W)`.
pub struct BatchNorm2d<T> {
    name: String,
    channels: usize,
    eps: T,
    momentum: T,
    gamma: Param<T>,
    beta: Param<T>,
    running_mean: Param<T>,
    running_var: Param<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            channels,
            eps: T::lit(1e-5),
            momentum: T::lit(0.1),
            gamma: Param::filled(format!("{name}.gamma"), vec![channels], T::one(), true),
            beta: Param::filled(format!("{name}.beta"), vec![channels], T::zero(), true),
            running_mean: Param::filled(format!("{name}.running_mean"), vec![channels], T::zero(), false),
            running_var: Param::filled(format!("{name}.running_var"), vec![channels], T::one(), false),
            cache: None,
        }
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        if c != self.channels {
            return Err(Error::shape(format!("{} channels", self.channels), c));
        }
        let plane = h * w;
        let count = n * plane;
        let mut inv_std = vec![T::zero(); c];
        let mut mean = vec![T::zero(); c];
        match mode {
            Mode::Train => {
                let cnt = T::from_usize(count).unwrap();
                for ch in 0..c {
                    let values = (0..n).flat_map(|i| x.data()[(i * c + ch) * plane..][..plane].iter());
                    let m = values.clone().copied().sum::<T>() / cnt;
                    let var = values.map(|&v| (v - m) * (v - m)).sum::<T>() / cnt;
                    mean[ch] = m;
                    inv_std[ch] = T::one() / (var + self.eps).sqrt();
                    let unbiased = if count > 1 {
                        var * cnt / (cnt - T::one())
                    } else {
                        var
                    };
                    let mo = self.momentum;
                    self.running_mean.value[ch] = (T::one() - mo) * self.running_mean.value[ch] + mo * m;
                    self.running_var.value[ch] = (T::one() - mo) * self.running_var.value[ch] + mo * unbiased;
                }
            }
            Mode::Eval => {
                for ch in 0..c {
                    mean[ch] = self.running_mean.value[ch];
                    inv_std[ch] = T::one() / (self.running_var.value[ch] + self.eps).sqrt();
                }
            }
        }
        let mut x_hat = x.data().to_vec();
        let mut out = Tensor::zeros(x.shape());
        for (i, (xh, o)) in x_hat.chunks_mut(plane).zip(out.data_mut().chunks_mut(plane)).enumerate() {
            let ch = i % c;
            for (a, b) in xh.iter_mut().zip(o.iter_mut()) {
                *a = (*a - mean[ch]) * inv_std[ch];
                *b = self.gamma.value[ch] * *a + self.beta.value[ch];
            }
        }
        self.cache = Some(BnCache {
            shape: x.shape(),
            x_hat,
            inv_std,
            mode,
        });
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>, gm: GradMode) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| Error::NoForwardCache(self.name.clone()))?;
        if grad.shape() != cache.shape {
            return Err(Error::shape(format!("{:?}", cache.shape), format!("{:?}", grad.shape())));
        }
        let [n, c, h, w] = cache.shape;
        let plane = h * w;
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for (i, (dy, xh)) in grad.data().chunks(plane).zip(cache.x_hat.chunks(plane)).enumerate() {
            let ch = i % c;
            for (&d, &xv) in dy.iter().zip(xh) {
                sum_dy[ch] = sum_dy[ch] + d;
                sum_dy_xhat[ch] = sum_dy_xhat[ch] + d * xv;
            }
        }
        if gm == GradMode::Accumulate {
            for ch in 0..c {
                self.gamma.grad[ch] = self.gamma.grad[ch] + sum_dy_xhat[ch];
                self.beta.grad[ch] = self.beta.grad[ch] + sum_dy[ch];
            }
        }
        let cnt = T::from_usize(n * plane).unwrap();
        let mut dx = Tensor::zeros(cache.shape);
        for (i, ((d, dy), xh)) in dx
            .data_mut()
            .chunks_mut(plane)
            .zip(grad.data().chunks(plane))
            .zip(cache.x_hat.chunks(plane))
            .enumerate()
        {
            let ch = i % c;
            let scale = self.gamma.value[ch] * cache.inv_std[ch];
            for ((o, &g), &xv) in d.iter_mut().zip(dy).zip(xh) {
                *o = match cache.mode {
                    Mode::Train => scale * (g - sum_dy[ch] / cnt - xv * sum_dy_xhat[ch] / cnt),
                    Mode::Eval => scale * g,
                };
            }
        }
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }
}

pub struct LeakyRelu {
    name: String,
    slope: f64,
    positive: Option<Vec<bool>>,
}

impl LeakyRelu {
    pub fn new(name: &str, slope: f64) -> Self {
        Self {
            name: name.to_string(),
            slope,
            positive: None,
        }
    }
}

impl<T: Scalar> Module<T> for LeakyRelu {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let slope = T::lit(self.slope);
        self.positive = Some(x.data().iter().map(|&v| v > T::zero()).collect());
        Ok(x.map(|v| if v > T::zero() { v } else { v * slope }))
    }

    fn backward(&mut self, grad: &Tensor<T>, _gm: GradMode) -> Result<Tensor<T>> {
        let positive = self.positive.take().ok_or_else(|| Error::NoForwardCache(self.name.clone()))?;
        if positive.len() != grad.data().len() {
            return Err(Error::shape(positive.len(), grad.data().len()));
        }
        let slope = T::lit(self.slope);
        let data = grad
            .data()
            .iter()
            .zip(&positive)
            .map(|(&g, &p)| if p { g } else { g * slope })
            .collect();
        Tensor::from_vec(grad.shape(), data)
    }
}

/// Projects each pixel's channel vector with `v / (|v| + eps)`.
pub struct UnitNormalize<T> {
    name: String,
    eps: T,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> UnitNormalize<T> {
    pub fn new(name: &str, eps: T) -> Self {
        Self {
            name: name.to_string(),
            eps,
            input: None,
        }
    }
}

/// Forward map of [`UnitNormalize`] on one vector.
pub fn unit_normalize_vec<T: Scalar>(v: &[T], eps: T) -> Vec<T> {
    let norm = v.iter().map(|&c| c * c).sum::<T>().sqrt();
    v.iter().map(|&c| c / (norm + eps)).collect()
}

/// Jacobian-vector product of `v / (|v| + eps)`.
///
/// The Jacobian is `I / (n + eps) - v v^T / (n (n + eps)^2)` with `n = |v|`,
/// which tends to `I / eps` at the origin.
pub fn unit_normalize_backward<T: Scalar>(v: &[T], upstream: &[T], eps: T) -> Vec<T> {
    let norm = v.iter().map(|&c| c * c).sum::<T>().sqrt();
    let denom = norm + eps;
    if norm == T::zero() {
        return upstream.iter().map(|&g| g / eps).collect();
    }
    let vg: T = v.iter().zip(upstream).map(|(&a, &b)| a * b).sum();
    let radial = vg / (norm * denom * denom);
    v.iter()
        .zip(upstream)
        .map(|(&a, &g)| g / denom - a * radial)
        .collect()
}

impl<T: Scalar> Module<T> for UnitNormalize<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let mut out = Tensor::zeros(x.shape());
        let mut v = vec![T::zero(); c];
        for i in 0..n {
            let src = x.sample(i);
            let dst = &mut out.data_mut()[i * c * plane..][..c * plane];
            for p in 0..plane {
                for ch in 0..c {
                    v[ch] = src[ch * plane + p];
                }
                for (ch, val) in unit_normalize_vec(&v, self.eps).into_iter().enumerate() {
                    dst[ch * plane + p] = val;
                }
            }
        }
        self.input = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>, _gm: GradMode) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| Error::NoForwardCache(self.name.clone()))?;
        if x.shape() != grad.shape() {
            return Err(Error::shape(format!("{:?}", x.shape()), format!("{:?}", grad.shape())));
        }
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let mut dx = Tensor::zeros(x.shape());
        let (mut v, mut g) = (vec![T::zero(); c], vec![T::zero(); c]);
        for i in 0..n {
            let (src, gs) = (x.sample(i), grad.sample(i));
            let dst = &mut dx.data_mut()[i * c * plane..][..c * plane];
            for p in 0..plane {
                for ch in 0..c {
                    v[ch] = src[ch * plane + p];
                    g[ch] = gs[ch * plane + p];
                }
                for (ch, val) in unit_normalize_backward(&v, &g, self.eps).into_iter().enumerate() {
                    dst[ch * plane + p] = val;
                }
            }
        }
        Ok(dx)
    }
}

/// `[N, C, H, W] -> [N, C*H*W, 1, 1]`.
pub struct Flatten {
    name: String,
    shape: Option<[usize; 4]>,
}

impl Flatten {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            shape: None,
        }
    }
}

impl<T: Scalar> Module<T> for Flatten {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        self.shape = Some(x.shape());
        x.clone().reshape([x.batch(), x.sample_len(), 1, 1])
    }

    fn backward(&mut self, grad: &Tensor<T>, _gm: GradMode) -> Result<Tensor<T>> {
        let shape = self.shape.take().ok_or_else(|| Error::NoForwardCache(self.name.clone()))?;
        grad.clone().reshape(shape)
    }
}

/// Fully connected layer on `[N, F, 1, 1]`, weights `[out, in]`.
pub struct Linear<T> {
    name: String,
    in_features: usize,
    out_features: usize,
    weight: Param<T>,
    bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        Self {
            name: name.to_string(),
            in_features,
            out_features,
            weight: Param::normal(format!("{name}.weight"), vec![out_features, in_features], HEAD_GAIN / (in_features as f64).sqrt(), rng),
            bias: Param::filled(format!("{name}.bias"), vec![out_features], T::zero(), true),
            input: None,
        }
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let n = x.batch();
        if x.sample_len() != self.in_features {
            return Err(Error::shape(format!("{} features", self.in_features), x.sample_len()));
        }
        let mut out = Tensor::zeros([n, self.out_features, 1, 1]);
        matmul(
            Mat::new(x.data(), n, self.in_features),
            Mat::new(&self.weight.value, self.out_features, self.in_features).t(),
            out.data_mut(),
            false,
        );
        add_bias(out.data_mut(), Some(&self.bias), 1);
        self.input = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>, gm: GradMode) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| Error::NoForwardCache(self.name.clone()))?;
        let n = x.batch();
        if grad.shape() != [n, self.out_features, 1, 1] {
            return Err(Error::shape(self.out_features, format!("{:?}", grad.shape())));
        }
        if gm == GradMode::Accumulate {
            matmul(
                Mat::new(grad.data(), n, self.out_features).t(),
                Mat::new(x.data(), n, self.in_features),
                &mut self.weight.grad,
                true,
            );
            accumulate_bias_grad(grad, Some(&mut self.bias));
        }
        let mut dx = Tensor::zeros(x.shape());
        matmul(
            Mat::new(grad.data(), n, self.out_features),
            Mat::new(&self.weight.value, self.out_features, self.in_features),
            dx.data_mut(),
            false,
        );
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub struct Sigmoid<T> {
    name: String,
    output: Option<Tensor<T>>,
}

impl<T: Scalar> Sigmoid<T> {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            output: None,
        }
    }
}

impl<T: Scalar> Module<T> for Sigmoid<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = x.map(|v| T::one() / (T::one() + (-v).exp()));
        self.output = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>, _gm: GradMode) -> Result<Tensor<T>> {
        let y = self.output.take().ok_or_else(|| Error::NoForwardCache(self.name.clone()))?;
        let data = grad
            .data()
            .iter()
            .zip(y.data())
            .map(|(&g, &p)| g * p * (T::one() - p))
            .collect();
        Tensor::from_vec(grad.shape(), data)
    }
}

/// Layers applied in order.
#[derive(Default)]
pub struct Sequential<T> {
    layers: Vec<Box<dyn Module<T>>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: impl Module<T> + 'static) {
        self.layers.push(Box::new(layer));
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, mode)?;
        }
        Ok(cur)
    }

    pub fn backward(&mut self, grad: &Tensor<T>, gm: GradMode) -> Result<Tensor<T>> {
        let mut cur = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur, gm)?;
        }
        Ok(cur)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}
