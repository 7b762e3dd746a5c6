//! A small layer library with explicit reverse passes.
//!
//! Every layer's `forward` takes `&self` and returns its output plus a [`Cache`] holding
//! whatever the reverse pass needs, so one parameter set can be run several times in a
//! single step (the encoder is applied to the input and again to its reconstruction)
//! and the per-call caches are kept apart. `backward` accumulates into each
//! parameter's `grad` buffer and returns the gradient with respect to the layer input.
//!
//! Batch-norm running statistics are not touched by `forward`; callers fold a
//! training-mode pass into them with [`Seq::commit_running_stats`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::c(rng.random_range(-bound..=bound)))
            .collect();
        Self::new(Tensor::from_vec(shape, data).expect("shape product matches"))
    }
}

/// What a visitor sees while walking a network: trainable parameters or state buffers.
pub enum Slot<'a, T> {
    Param(&'a mut Param<T>),
    Buffer(&'a mut Tensor<T>),
}

pub type Visitor<'v, T> = dyn FnMut(&str, Slot<'_, T>) + 'v;

pub enum Cache<T> {
    None,
    Input(Tensor<T>),
    Output(Tensor<T>),
    Bn {
        x_hat: Tensor<T>,
        inv_std: Vec<T>,
        batch_mean: Vec<T>,
        batch_var_unbiased: Vec<T>,
    },
    Pool {
        argmax: Vec<usize>,
        in_shape: Vec<usize>,
    },
    Shape(Vec<usize>),
    Block {
        main: Vec<Cache<T>>,
        shortcut: Option<Vec<Cache<T>>>,
        pre_activation: Tensor<T>,
    },
}

// ---------------------------------------------------------------------------
// im2col / col2im

#[derive(Clone, Copy, Debug)]
struct Window {
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Window {
    fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output columns `lo..hi` whose input column `ox·stride + kx − pad` lies inside `0..w`.
fn valid_cols(kx: usize, win: &Window) -> (usize, usize) {
    let lo = win.pad.saturating_sub(kx).div_ceil(win.stride).min(win.out_w);
    let hi = if win.w + win.pad > kx {
        ((win.w - 1 + win.pad - kx) / win.stride + 1).min(win.out_w)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col<T: Real>(img: &[T], win: Window, cols: &mut [T]) {
    let Window {
        channels,
        h,
        w,
        k,
        stride,
        pad,
        out_h,
        out_w,
    } = win;
    let plane = out_h * out_w;
    for c in 0..channels {
        let src = &img[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(kx, &win);
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * out_w..(oy + 1) * out_w];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let first = lo * stride + kx - pad;
                    if stride == 1 {
                        line[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                    } else {
                        for (v, &x) in line[lo..hi].iter_mut().zip(src_row[first..].iter().step_by(stride)) {
                            *v = x;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], win: Window, img: &mut [T]) {
    let Window {
        channels,
        h,
        w,
        k,
        stride,
        pad,
        out_h,
        out_w,
    } = win;
    let plane = out_h * out_w;
    for c in 0..channels {
        let dst = &mut img[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(kx, &win);
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let first = lo * stride + kx - pad;
                    let line = &src[oy * out_w + lo..oy * out_w + hi];
                    for (d, &g) in dst_row[first..].iter_mut().step_by(stride).zip(line) {
                        *d += g;
                    }
                }
            }
        }
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if size + 2 * pad < k {
        return Err(Error::shape(format!(
            "input size {size} too small for kernel {k} with padding {pad}"
        )));
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

// ---------------------------------------------------------------------------
// Layers

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((in_ch * k * k) as f64).sqrt();
        Self {
            weight: Param::uniform(&[out_ch, in_ch, k, k], bound, rng),
            bias: bias.then(|| Param::uniform(&[out_ch], bound, rng)),
            in_ch,
            out_ch,
            k,
            stride,
            pad,
        }
    }

    fn window(&self, h: usize, w: usize) -> Result<Window> {
        Ok(Window {
            channels: self.in_ch,
            h,
            w,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
            out_h: conv_out(h, self.k, self.stride, self.pad)?,
            out_w: conv_out(w, self.k, self.stride, self.pad)?,
        })
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_ch {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_ch
            )));
        }
        let win = self.window(h, w)?;
        let (rows, plane) = (win.col_rows(), win.col_cols());
        let mut out = Tensor::zeros(&[n, self.out_ch, win.out_h, win.out_w]);
        let mut cols = vec![T::zero(); rows * plane];
        for i in 0..n {
            im2col(x.row(i), win, &mut cols);
            let y = out.row_mut(i);
            matmul(self.weight.value.data(), false, &cols, false, self.out_ch, rows, plane, y, false);
            if let Some(b) = &self.bias {
                for (o, &bv) in b.value.data().iter().enumerate() {
                    y[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        Ok(out)
    }

    fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, _, h, w) = x.dims4()?;
        let win = self.window(h, w)?;
        let (rows, plane) = (win.col_rows(), win.col_cols());
        let mut dx = Tensor::zeros(x.shape());
        let mut cols = vec![T::zero(); rows * plane];
        let mut dcols = vec![T::zero(); rows * plane];
        for i in 0..n {
            let g = dy.row(i);
            im2col(x.row(i), win, &mut cols);
            matmul(g, false, &cols, true, self.out_ch, plane, rows, self.weight.grad.data_mut(), true);
            matmul(self.weight.value.data(), true, g, false, rows, self.out_ch, plane, &mut dcols, false);
            col2im(&dcols, win, dx.row_mut(i));
            if let Some(b) = &mut self.bias {
                for (o, gb) in b.grad.data_mut().iter_mut().enumerate() {
                    *gb += g[o * plane..(o + 1) * plane].iter().copied().sum();
                }
            }
        }
        Ok(dx)
    }
}

/// Transposed convolution; weight layout `[in, out, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl<T: Real> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((out_ch * k * k) as f64).sqrt();
        Self {
            weight: Param::uniform(&[in_ch, out_ch, k, k], bound, rng),
            bias: bias.then(|| Param::uniform(&[out_ch], bound, rng)),
            in_ch,
            out_ch,
            k,
            stride,
            pad,
            out_pad,
        }
    }

    pub fn output_size(&self, size: usize) -> usize {
        ((size - 1) * self.stride + self.k + self.out_pad).saturating_sub(2 * self.pad)
    }

    /// Window describing the equivalent forward convolution over the *output* grid.
    fn window(&self, h: usize, w: usize) -> Window {
        Window {
            channels: self.out_ch,
            h: self.output_size(h),
            w: self.output_size(w),
            k: self.k,
            stride: self.stride,
            pad: self.pad,
            out_h: h,
            out_w: w,
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_ch {
            return Err(Error::shape(format!(
                "transposed conv expects {} input channels, got {c}",
                self.in_ch
            )));
        }
        let win = self.window(h, w);
        let (rows, plane) = (win.col_rows(), win.col_cols());
        let mut out = Tensor::zeros(&[n, self.out_ch, win.h, win.w]);
        let mut cols = vec![T::zero(); rows * plane];
        let out_plane = win.h * win.w;
        for i in 0..n {
            matmul(self.weight.value.data(), true, x.row(i), false, rows, self.in_ch, plane, &mut cols, false);
            let y = out.row_mut(i);
            col2im(&cols, win, y);
            if let Some(b) = &self.bias {
                for (o, &bv) in b.value.data().iter().enumerate() {
                    y[o * out_plane..(o + 1) * out_plane].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        Ok(out)
    }

    fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, _, h, w) = x.dims4()?;
        let win = self.window(h, w);
        let (rows, plane) = (win.col_rows(), win.col_cols());
        let out_plane = win.h * win.w;
        let mut dx = Tensor::zeros(x.shape());
        let mut dcols = vec![T::zero(); rows * plane];
        for i in 0..n {
            let g = dy.row(i);
            im2col(g, win, &mut dcols);
            matmul(self.weight.value.data(), false, &dcols, false, self.in_ch, rows, plane, dx.row_mut(i), false);
            matmul(x.row(i), false, &dcols, true, self.in_ch, plane, rows, self.weight.grad.data_mut(), true);
            if let Some(b) = &mut self.bias {
                for (o, gb) in b.grad.data_mut().iter_mut().enumerate() {
                    *gb += g[o * out_plane..(o + 1) * out_plane].iter().copied().sum();
                }
            }
        }
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Cache<T>)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels() {
            return Err(Error::shape(format!(
                "batch norm expects {} channels, got {c}",
                self.channels()
            )));
        }
        let plane = h * w;
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut y = Tensor::zeros(x.shape());
        match mode {
            Mode::Eval => {
                let rm = self.running_mean.data();
                let rv = self.running_var.data();
                for i in 0..n {
                    for ch in 0..c {
                        let scale = gamma[ch] / (rv[ch] + T::c(self.eps)).sqrt();
                        let shift = beta[ch] - rm[ch] * scale;
                        let base = (i * c + ch) * plane;
                        for p in 0..plane {
                            y.data_mut()[base + p] = x.data()[base + p] * scale + shift;
                        }
                    }
                }
                Ok((y, Cache::None))
            }
            Mode::Train => {
                let count = n * plane;
                let mut x_hat = Tensor::zeros(x.shape());
                let mut inv_std = vec![T::zero(); c];
                let mut batch_mean = vec![T::zero(); c];
                let mut batch_var_unbiased = vec![T::zero(); c];
                for ch in 0..c {
                    let mut sum = 0.0f64;
                    for i in 0..n {
                        let base = (i * c + ch) * plane;
                        sum += x.data()[base..base + plane].iter().map(|v| v.f64()).sum::<f64>();
                    }
                    let mean = sum / count as f64;
                    let mut sq = 0.0f64;
                    for i in 0..n {
                        let base = (i * c + ch) * plane;
                        sq += x.data()[base..base + plane]
                            .iter()
                            .map(|v| (v.f64() - mean).powi(2))
                            .sum::<f64>();
                    }
                    let var = sq / count as f64;
                    let istd = 1.0 / (var + self.eps).sqrt();
                    inv_std[ch] = T::c(istd);
                    batch_mean[ch] = T::c(mean);
                    batch_var_unbiased[ch] = T::c(if count > 1 {
                        sq / (count - 1) as f64
                    } else {
                        var
                    });
                    let (m, s) = (T::c(mean), T::c(istd));
                    for i in 0..n {
                        let base = (i * c + ch) * plane;
                        for p in 0..plane {
                            let xh = (x.data()[base + p] - m) * s;
                            x_hat.data_mut()[base + p] = xh;
                            y.data_mut()[base + p] = gamma[ch] * xh + beta[ch];
                        }
                    }
                }
                Ok((
                    y,
                    Cache::Bn {
                        x_hat,
                        inv_std,
                        batch_mean,
                        batch_var_unbiased,
                    },
                ))
            }
        }
    }

    fn backward(&mut self, x_hat: &Tensor<T>, inv_std: &[T], dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = dy.dims4()?;
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            let gamma = self.gamma.value.data()[ch].f64();
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xh = 0.0f64;
            for i in 0..n {
                let base = (i * c + ch) * plane;
                for p in 0..plane {
                    let g = dy.data()[base + p].f64();
                    sum_dy += g;
                    sum_dy_xh += g * x_hat.data()[base + p].f64();
                }
            }
            self.gamma.grad.data_mut()[ch] += T::c(sum_dy_xh);
            self.beta.grad.data_mut()[ch] += T::c(sum_dy);
            let k = gamma * inv_std[ch].f64() / count;
            for i in 0..n {
                let base = (i * c + ch) * plane;
                for p in 0..plane {
                    let g = dy.data()[base + p].f64();
                    let xh = x_hat.data()[base + p].f64();
                    dx.data_mut()[base + p] = T::c(k * (count * g - sum_dy - xh * sum_dy_xh));
                }
            }
        }
        Ok(dx)
    }

    fn commit(&mut self, batch_mean: &[T], batch_var_unbiased: &[T]) {
        let m = T::c(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(batch_mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(batch_var_unbiased) {
            *r = keep * *r + m * b;
        }
    }
}

/// `y = x·Wᵀ + b` over the flattened trailing dimensions.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_features: usize,
    pub out_features: usize,
}

impl<T: Real> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Self {
            weight: Param::uniform(&[out_features, in_features], bound, rng),
            bias: Param::uniform(&[out_features], bound, rng),
            in_features,
            out_features,
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = x.batch();
        if x.row_len() != self.in_features {
            return Err(Error::shape(format!(
                "linear layer expects {} features, got {}",
                self.in_features,
                x.row_len()
            )));
        }
        let mut y = Tensor::zeros(&[n, self.out_features]);
        matmul(x.data(), false, self.weight.value.data(), true, n, self.in_features, self.out_features, y.data_mut(), false);
        let b = self.bias.value.data();
        for i in 0..n {
            y.row_mut(i).iter_mut().zip(b).for_each(|(v, &bv)| *v += bv);
        }
        Ok(y)
    }

    fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let n = x.batch();
        matmul(dy.data(), true, x.data(), false, self.out_features, n, self.in_features, self.weight.grad.data_mut(), true);
        let gb = self.bias.grad.data_mut();
        for i in 0..n {
            gb.iter_mut().zip(dy.row(i)).for_each(|(g, &d)| *g += d);
        }
        let mut dx = Tensor::zeros(x.shape());
        matmul(dy.data(), false, self.weight.value.data(), false, n, self.out_features, self.in_features, dx.data_mut(), false);
        Ok(dx)
    }
}

/// Residual block: two 3×3 conv/BN pairs plus an identity or 1×1 projection shortcut.
#[derive(Clone, Debug)]
pub struct BasicBlock<T> {
    pub main: Seq<T>,
    pub shortcut: Option<Seq<T>>,
}

impl<T: Real> BasicBlock<T> {
    pub fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let main = Seq::new(vec![
            Op::Conv(Conv2d::new(in_ch, out_ch, 3, stride, 1, false, rng)),
            Op::BatchNorm(BatchNorm2d::new(out_ch)),
            Op::Relu,
            Op::Conv(Conv2d::new(out_ch, out_ch, 3, 1, 1, false, rng)),
            Op::BatchNorm(BatchNorm2d::new(out_ch)),
        ]);
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            Seq::new(vec![
                Op::Conv(Conv2d::new(in_ch, out_ch, 1, stride, 0, false, rng)),
                Op::BatchNorm(BatchNorm2d::new(out_ch)),
            ])
        });
        Self { main, shortcut }
    }
}

#[derive(Clone, Debug)]
pub enum Op<T> {
    Conv(Conv2d<T>),
    ConvT(ConvTranspose2d<T>),
    BatchNorm(BatchNorm2d<T>),
    Linear(Linear<T>),
    LeakyRelu(f64),
    Relu,
    Sigmoid,
    /// 3×3, stride 2, padding 1.
    MaxPool,
    GlobalAvgPool,
    /// Nearest-neighbour ×2.
    Upsample,
    /// Reshape each sample to the given trailing shape.
    Reshape(Vec<usize>),
    Block(Box<BasicBlock<T>>),
}

impl<T: Real> Op<T> {
    fn forward(&self, x: Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Cache<T>)> {
        let keep = mode == Mode::Train;
        let keep_input = |x: Tensor<T>| if keep { Cache::Input(x) } else { Cache::None };
        match self {
            Op::Conv(l) => Ok((l.forward(&x)?, keep_input(x))),
            Op::ConvT(l) => Ok((l.forward(&x)?, keep_input(x))),
            Op::Linear(l) => Ok((l.forward(&x)?, keep_input(x))),
            Op::BatchNorm(l) => l.forward(&x, mode),
            Op::LeakyRelu(slope) => {
                let s = T::c(*slope);
                let y = x.map(|v| if v > T::zero() { v } else { v * s });
                Ok((y, keep_input(x)))
            }
            Op::Relu => {
                let y = x.map(|v| v.max(T::zero()));
                let cache = if keep { Cache::Output(y.clone()) } else { Cache::None };
                Ok((y, cache))
            }
            Op::Sigmoid => {
                let y = x.map(|v| T::one() / (T::one() + (-v).exp()));
                let cache = if keep { Cache::Output(y.clone()) } else { Cache::None };
                Ok((y, cache))
            }
            Op::MaxPool => max_pool(&x, keep),
            Op::GlobalAvgPool => {
                let (n, c, h, w) = x.dims4()?;
                let plane = (h * w) as f64;
                let mut y = Tensor::zeros(&[n, c]);
                for (o, chunk) in y.data_mut().iter_mut().zip(x.data().chunks(h * w)) {
                    *o = T::c(chunk.iter().map(|v| v.f64()).sum::<f64>() / plane);
                }
                Ok((y, Cache::Shape(x.shape().to_vec())))
            }
            Op::Upsample => {
                let (n, c, h, w) = x.dims4()?;
                let mut y = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
                let (src, dst) = (x.data(), y.data_mut());
                for p in 0..n * c {
                    for oy in 0..2 * h {
                        for ox in 0..2 * w {
                            dst[(p * 2 * h + oy) * 2 * w + ox] = src[(p * h + oy / 2) * w + ox / 2];
                        }
                    }
                }
                Ok((y, Cache::Shape(x.shape().to_vec())))
            }
            Op::Reshape(tail) => {
                let in_shape = x.shape().to_vec();
                let mut shape = vec![x.batch()];
                shape.extend_from_slice(tail);
                Ok((x.reshape(&shape)?, Cache::Shape(in_shape)))
            }
            Op::Block(b) => {
                let (main_out, main) = b.main.forward(x.clone(), mode)?;
                let (short_out, shortcut) = match &b.shortcut {
                    Some(s) => {
                        let (o, c) = s.forward(x, mode)?;
                        (o, Some(c))
                    }
                    None => (x, None),
                };
                let mut pre = main_out;
                pre.add_assign(&short_out);
                let y = pre.map(|v| v.max(T::zero()));
                let cache = if keep {
                    Cache::Block {
                        main,
                        shortcut,
                        pre_activation: pre,
                    }
                } else {
                    Cache::None
                };
                Ok((y, cache))
            }
        }
    }

    fn backward(&mut self, cache: Cache<T>, dy: Tensor<T>) -> Result<Tensor<T>> {
        match (self, cache) {
            (Op::Conv(l), Cache::Input(x)) => l.backward(&x, &dy),
            (Op::ConvT(l), Cache::Input(x)) => l.backward(&x, &dy),
            (Op::Linear(l), Cache::Input(x)) => l.backward(&x, &dy),
            (Op::BatchNorm(l), Cache::Bn { x_hat, inv_std, .. }) => l.backward(&x_hat, &inv_std, &dy),
            (Op::LeakyRelu(slope), Cache::Input(x)) => {
                let s = T::c(*slope);
                let mut dx = dy;
                for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    if v <= T::zero() {
                        *g *= s;
                    }
                }
                Ok(dx)
            }
            (Op::Relu, Cache::Output(y)) => {
                let mut dx = dy;
                for (g, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                    if v <= T::zero() {
                        *g = T::zero();
                    }
                }
                Ok(dx)
            }
            (Op::Sigmoid, Cache::Output(y)) => {
                let mut dx = dy;
                for (g, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                    *g *= v * (T::one() - v);
                }
                Ok(dx)
            }
            (Op::MaxPool, Cache::Pool { argmax, in_shape }) => {
                let mut dx = Tensor::zeros(&in_shape);
                for (&src, &g) in argmax.iter().zip(dy.data()) {
                    dx.data_mut()[src] += g;
                }
                Ok(dx)
            }
            (Op::GlobalAvgPool, Cache::Shape(in_shape)) => {
                let plane = in_shape[2] * in_shape[3];
                let inv = T::c(1.0 / plane as f64);
                let mut dx = Tensor::zeros(&in_shape);
                for (chunk, &g) in dx.data_mut().chunks_mut(plane).zip(dy.data()) {
                    chunk.fill(g * inv);
                }
                Ok(dx)
            }
            (Op::Upsample, Cache::Shape(in_shape)) => {
                let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                let mut dx = Tensor::zeros(&in_shape);
                let (src, dst) = (dy.data(), dx.data_mut());
                for p in 0..n * c {
                    for oy in 0..2 * h {
                        for ox in 0..2 * w {
                            dst[(p * h + oy / 2) * w + ox / 2] += src[(p * 2 * h + oy) * 2 * w + ox];
                        }
                    }
                }
                Ok(dx)
            }
            (Op::Reshape(_), Cache::Shape(in_shape)) => dy.reshape(&in_shape),
            (
                Op::Block(b),
                Cache::Block {
                    main,
                    shortcut,
                    pre_activation,
                },
            ) => {
                let mut d_pre = dy;
                for (g, &v) in d_pre.data_mut().iter_mut().zip(pre_activation.data()) {
                    if v <= T::zero() {
                        *g = T::zero();
                    }
                }
                let mut dx = b.main.backward(main, d_pre.clone())?;
                let d_short = match (&mut b.shortcut, shortcut) {
                    (Some(s), Some(c)) => s.backward(c, d_pre)?,
                    _ => d_pre,
                };
                dx.add_assign(&d_short);
                Ok(dx)
            }
            _ => Err(Error::invalid(
                "backward called without a training-mode cache for this layer",
            )),
        }
    }

    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        let name = |s: &str| format!("{prefix}.{s}");
        match self {
            Op::Conv(l) => {
                f(&name("weight"), Slot::Param(&mut l.weight));
                if let Some(b) = &mut l.bias {
                    f(&name("bias"), Slot::Param(b));
                }
            }
            Op::ConvT(l) => {
                f(&name("weight"), Slot::Param(&mut l.weight));
                if let Some(b) = &mut l.bias {
                    f(&name("bias"), Slot::Param(b));
                }
            }
            Op::Linear(l) => {
                f(&name("weight"), Slot::Param(&mut l.weight));
                f(&name("bias"), Slot::Param(&mut l.bias));
            }
            Op::BatchNorm(l) => {
                f(&name("weight"), Slot::Param(&mut l.gamma));
                f(&name("bias"), Slot::Param(&mut l.beta));
                f(&name("running_mean"), Slot::Buffer(&mut l.running_mean));
                f(&name("running_var"), Slot::Buffer(&mut l.running_var));
            }
            Op::Block(b) => {
                b.main.visit(&name("main"), f);
                if let Some(s) = &mut b.shortcut {
                    s.visit(&name("shortcut"), f);
                }
            }
            _ => {}
        }
    }

    fn commit(&mut self, cache: &Cache<T>) {
        match (self, cache) {
            (
                Op::BatchNorm(l),
                Cache::Bn {
                    batch_mean,
                    batch_var_unbiased,
                    ..
                },
            ) => l.commit(batch_mean, batch_var_unbiased),
            (Op::Block(b), Cache::Block { main, shortcut, .. }) => {
                b.main.commit_running_stats(main);
                if let (Some(s), Some(c)) = (&mut b.shortcut, shortcut) {
                    s.commit_running_stats(c);
                }
            }
            _ => {}
        }
    }
}

fn max_pool<T: Real>(x: &Tensor<T>, keep: bool) -> Result<(Tensor<T>, Cache<T>)> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (conv_out(h, 3, 2, 1)?, conv_out(w, 3, 2, 1)?);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(if keep { n * c * oh * ow } else { 0 });
    let src = x.data();
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = 0;
                for ky in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = (p * h + iy as usize) * w + ix as usize;
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                y.data_mut()[(p * oh + oy) * ow + ox] = best;
                if keep {
                    argmax.push(best_idx);
                }
            }
        }
    }
    let cache = if keep {
        Cache::Pool {
            argmax,
            in_shape: x.shape().to_vec(),
        }
    } else {
        Cache::None
    };
    Ok((y, cache))
}

#[derive(Clone, Debug)]
pub struct Seq<T> {
    pub ops: Vec<Op<T>>,
}

impl<T: Real> Seq<T> {
    pub fn new(ops: Vec<Op<T>>) -> Self {
        Self { ops }
    }

    pub fn forward(&self, x: Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
        let mut caches = Vec::with_capacity(self.ops.len());
        let mut h = x;
        for op in &self.ops {
            let (y, c) = op.forward(h, mode)?;
            caches.push(c);
            h = y;
        }
        Ok((h, caches))
    }

    pub fn backward(&mut self, caches: Vec<Cache<T>>, dy: Tensor<T>) -> Result<Tensor<T>> {
        if caches.len() != self.ops.len() {
            return Err(Error::invalid("cache list does not match layer count"));
        }
        let mut g = dy;
        for (op, cache) in self.ops.iter_mut().zip(caches).rev() {
            g = op.backward(cache, g)?;
        }
        Ok(g)
    }

    pub fn commit_running_stats(&mut self, caches: &[Cache<T>]) {
        for (op, cache) in self.ops.iter_mut().zip(caches) {
            op.commit(cache);
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        for (i, op) in self.ops.iter_mut().enumerate() {
            op.visit(&format!("{prefix}.{i}"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn direct_conv(x: &Tensor<f64>, l: &Conv2d<f64>) -> Tensor<f64> {
        let (n, c, h, w) = x.dims4().unwrap();
        let oh = (h + 2 * l.pad - l.k) / l.stride + 1;
        let ow = (w + 2 * l.pad - l.k) / l.stride + 1;
        let mut y = Tensor::zeros(&[n, l.out_ch, oh, ow]);
        let wt = l.weight.value.data();
        for i in 0..n {
            for o in 0..l.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..l.k {
                                for kx in 0..l.k {
                                    let iy = (oy * l.stride + ky) as isize - l.pad as isize;
                                    let ix = (ox * l.stride + kx) as isize - l.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += wt[((o * c + ci) * l.k + ky) * l.k + kx]
                                        * x.data()[((i * c + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        y.data_mut()[((i * l.out_ch + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = Conv2d::<f64>::new(3, 4, 3, 2, 1, false, &mut rng);
        let x = random(&[2, 3, 7, 6], &mut rng);
        let a = l.forward(&x).unwrap();
        let b = direct_conv(&x, &l);
        assert_eq!(a.shape(), b.shape());
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> when both share weights.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, false, &mut rng);
        let mut convt = ConvTranspose2d::<f64>::new(3, 2, 3, 2, 1, 1, false, &mut rng);
        convt.weight.value = conv.weight.value.clone();
        let x = random(&[1, 2, 8, 8], &mut rng);
        let y = random(&[1, 3, 4, 4], &mut rng);
        let cx = conv.forward(&x).unwrap();
        let ty = convt.forward(&y).unwrap();
        assert_eq!(ty.shape(), x.shape());
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    fn check_seq_gradients(mut seq: Seq<f64>, in_shape: &[usize], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(in_shape, &mut rng);
        let (y, caches) = seq.forward(x.clone(), Mode::Train).unwrap();
        let proj = random(y.shape(), &mut rng);
        let loss = |s: &Seq<f64>, x: &Tensor<f64>| -> f64 {
            let (y, _) = s.forward(x.clone(), Mode::Train).unwrap();
            y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
        };
        let dx = seq.backward(caches, proj.clone()).unwrap();
        let h = 1e-6;
        for i in (0..x.len()).step_by(7) {
            let mut a = x.clone();
            let mut b = x.clone();
            a.data_mut()[i] += h;
            b.data_mut()[i] -= h;
            let num = (loss(&seq, &a) - loss(&seq, &b)) / (2.0 * h);
            let ana = dx.data()[i];
            assert!((num - ana).abs() <= 1e-5 * (1.0 + num.abs()), "input {i}: {num} vs {ana}");
        }
        let mut grads = Vec::new();
        seq.visit("m", &mut |name, slot| {
            if let Slot::Param(p) = slot {
                grads.push((name.to_string(), p.grad.clone()));
            }
        });
        for (name, grad) in grads {
            for i in (0..grad.len()).step_by(5) {
                let eval = |delta: f64| {
                    let mut s = seq.clone();
                    s.visit("m", &mut |n, slot| {
                        if let (true, Slot::Param(p)) = (n == name, slot) {
                            p.value.data_mut()[i] += delta;
                        }
                    });
                    loss(&s, &x)
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = grad.data()[i];
                assert!((num - ana).abs() <= 1e-5 * (1.0 + num.abs()), "{name}[{i}]: {num} vs {ana}");
            }
        }
    }

    #[test]
    fn conv_bn_leaky_linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let seq = Seq::new(vec![
            Op::Conv(Conv2d::new(2, 3, 3, 2, 1, true, &mut rng)),
            Op::BatchNorm(BatchNorm2d::new(3)),
            Op::LeakyRelu(0.2),
            Op::Reshape(vec![3 * 3 * 3]),
            Op::Linear(Linear::new(27, 5, &mut rng)),
            Op::Sigmoid,
        ]);
        check_seq_gradients(seq, &[3, 2, 6, 6], 12);
    }

    #[test]
    fn transposed_and_residual_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let seq = Seq::new(vec![
            Op::ConvT(ConvTranspose2d::new(2, 3, 3, 2, 1, 1, true, &mut rng)),
            Op::BatchNorm(BatchNorm2d::new(3)),
            Op::Relu,
            Op::Block(Box::new(BasicBlock::new(3, 4, 2, &mut rng))),
            Op::Upsample,
            Op::MaxPool,
            Op::GlobalAvgPool,
        ]);
        check_seq_gradients(seq, &[2, 2, 4, 4], 22);
    }

    #[test]
    fn eval_mode_uses_running_stats_after_commit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seq = Seq::new(vec![Op::BatchNorm(BatchNorm2d::<f64>::new(2))]);
        let x = random(&[4, 2, 3, 3], &mut rng);
        let (_, caches) = seq.forward(x.clone(), Mode::Train).unwrap();
        let Op::BatchNorm(bn) = &seq.ops[0] else { unreachable!() };
        assert_eq!(bn.running_mean.data(), &[0.0, 0.0]);
        seq.commit_running_stats(&caches);
        let Op::BatchNorm(bn) = &seq.ops[0] else { unreachable!() };
        assert!(bn.running_mean.data().iter().any(|v| *v != 0.0));
    }
}
