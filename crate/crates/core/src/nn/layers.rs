//! Layers with hand-written backward passes.
//!
//! `forward` returns the output together with whatever the backward pass
//! needs; `backward` accumulates parameter gradients and returns the gradient
//! with respect to the input. Keeping caches outside the layer lets one
//! network be run on several batches (real and fake) before backpropagating.

use std::cell::Cell;

use ndarray::{Array, Array1, Array2, Array4, ArrayD, Axis, Dimension, Ix2, IxDyn};

use super::param::{Module, Param, ParamKind};
use super::tensor::{col2im, im2col, ConvGeom, Real};
use crate::error::{shape, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Running statistics, nothing mutated.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Act {
    Identity,
    Relu,
    LeakyRelu(f64),
    Tanh,
}

thread_local! {
    static KINK_TRACE: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Runs `f` while fingerprinting the sign pattern of every rectifier input.
/// Two evaluations with equal fingerprints lie on the same linear piece of
/// all rectifiers, which finite-difference checks rely on.
pub fn trace_kinks<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let outer = KINK_TRACE.with(|t| t.replace(Some(0xcbf2_9ce4_8422_2325)));
    let r = f();
    let h = KINK_TRACE.with(|t| t.replace(outer)).expect("trace active");
    (r, h)
}

fn trace_signs<T: Real, D: Dimension>(x: &Array<T, D>) {
    KINK_TRACE.with(|t| {
        if let Some(mut h) = t.get() {
            for &v in x.iter() {
                h = (h ^ u64::from(v > T::zero())).wrapping_mul(0x0100_0000_01b3);
            }
            t.set(Some(h));
        }
    });
}

impl Act {
    pub fn apply<T: Real, D: Dimension>(self, x: Array<T, D>) -> Array<T, D> {
        if matches!(self, Act::Relu | Act::LeakyRelu(_)) {
            trace_signs(&x);
        }
        match self {
            Act::Identity => x,
            Act::Relu => x.mapv_into(|v| if v > T::zero() { v } else { T::zero() }),
            Act::LeakyRelu(s) => {
                let s = T::c(s);
                x.mapv_into(|v| if v > T::zero() { v } else { v * s })
            }
            Act::Tanh => x.mapv_into(|v| v.tanh()),
        }
    }

    /// Gradient through the activation given its *output* `y`.
    pub fn backward<T: Real, D: Dimension>(self, y: &Array<T, D>, dy: &Array<T, D>) -> Array<T, D> {
        match self {
            Act::Identity => dy.clone(),
            Act::Relu => ndarray::Zip::from(dy)
                .and(y)
                .map_collect(|&g, &v| if v > T::zero() { g } else { T::zero() }),
            Act::LeakyRelu(s) => {
                let s = T::c(s);
                ndarray::Zip::from(dy)
                    .and(y)
                    .map_collect(|&g, &v| if v > T::zero() { g } else { g * s })
            }
            Act::Tanh => ndarray::Zip::from(dy)
                .and(y)
                .map_collect(|&g, &v| g * (T::one() - v * v)),
        }
    }
}

fn as_matrix<T: Real>(p: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    p.view().into_dimensionality::<Ix2>().expect("2-d parameter")
}

fn add_channel_bias<T: Real>(y: &mut Array4<T>, b: &ArrayD<T>) {
    for (mut ch, &bv) in y.axis_iter_mut(Axis(0)).zip(b.iter()) {
        ch.mapv_inplace(|v| v + bv);
    }
}

fn channel_sums<T: Real>(dy: &Array4<T>) -> ArrayD<T> {
    let c = dy.dim().0;
    let m = dy.len() / c.max(1);
    let flat = dy.view().into_shape_with_order((c, m)).expect("standard layout");
    flat.sum_axis(Axis(1)).into_dyn()
}

/// 2-d convolution on `(C, N, H, W)` maps.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Real> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub geom: ConvGeom,
}

#[derive(Clone, Debug)]
pub struct ConvCache<T: Real> {
    cols: Array2<T>,
    in_dims: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl<T: Real> Conv2d<T> {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, geom: ConvGeom, bias: bool) -> Self {
        let k = geom.kernel;
        Self {
            weight: Param::new(format!("{name}.weight"), ParamKind::Weight, &[out_ch, in_ch * k * k]),
            bias: bias.then(|| Param::new(format!("{name}.bias"), ParamKind::Bias, &[out_ch])),
            in_ch,
            out_ch,
            geom,
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> Result<(Array4<T>, ConvCache<T>)> {
        let (c, n, h, w) = x.dim();
        if c != self.in_ch {
            return Err(shape(format!("{}: expected {} channels, got {c}", self.weight.name, self.in_ch)));
        }
        let (oh, ow) = match (self.geom.out_size(h), self.geom.out_size(w)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(shape(format!("{}: input {h}x{w} smaller than kernel", self.weight.name))),
        };
        let cols = im2col(x.view(), self.geom, oh, ow);
        let y = as_matrix(&self.weight.value).dot(&cols);
        let mut y = y.into_shape_with_order((self.out_ch, n, oh, ow)).expect("gemm output is contiguous");
        if let Some(b) = &self.bias {
            add_channel_bias(&mut y, &b.value);
        }
        Ok((y, ConvCache { cols, in_dims: (c, n, h, w), out_hw: (oh, ow) }))
    }

    pub fn backward(&mut self, cache: &ConvCache<T>, dy: &Array4<T>, need_dx: bool) -> Option<Array4<T>> {
        let (oh, ow) = cache.out_hw;
        let n = cache.in_dims.1;
        let dys = dy.as_standard_layout();
        let dym = dys.view().into_shape_with_order((self.out_ch, n * oh * ow)).expect("contiguous");
        let dw = dym.dot(&cache.cols.t());
        self.weight.accumulate(&dw.into_dyn());
        if let Some(b) = &mut self.bias {
            b.accumulate(&channel_sums(dy));
        }
        need_dx.then(|| {
            let dcols = as_matrix(&self.weight.value).t().dot(&dym);
            col2im(dcols.view(), cache.in_dims, self.geom, oh, ow)
        })
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.visit(f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.visit_mut(f)
    }
}

/// Transposed convolution (the adjoint of [`Conv2d`] with the same geometry).
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T: Real> {
    /// `(in_ch, out_ch * k * k)`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub geom: ConvGeom,
}

#[derive(Clone, Debug)]
pub struct ConvTransposeCache<T: Real> {
    x: Array2<T>,
    in_dims: (usize, usize, usize, usize),
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, geom: ConvGeom, bias: bool) -> Self {
        let k = geom.kernel;
        Self {
            weight: Param::new(format!("{name}.weight"), ParamKind::Weight, &[in_ch, out_ch * k * k]),
            bias: bias.then(|| Param::new(format!("{name}.bias"), ParamKind::Bias, &[out_ch])),
            in_ch,
            out_ch,
            geom,
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> Result<(Array4<T>, ConvTransposeCache<T>)> {
        let (c, n, h, w) = x.dim();
        if c != self.in_ch {
            return Err(shape(format!("{}: expected {} channels, got {c}", self.weight.name, self.in_ch)));
        }
        let oh = self.geom.transposed_out_size(h).ok_or_else(|| shape("transposed conv output empty"))?;
        let ow = self.geom.transposed_out_size(w).ok_or_else(|| shape("transposed conv output empty"))?;
        let xm = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, n * h * w))
            .expect("contiguous");
        let cols = as_matrix(&self.weight.value).t().dot(&xm);
        let mut y = col2im(cols.view(), (self.out_ch, n, oh, ow), self.geom, h, w);
        if let Some(b) = &self.bias {
            add_channel_bias(&mut y, &b.value);
        }
        Ok((y, ConvTransposeCache { x: xm, in_dims: (c, n, h, w) }))
    }

    pub fn backward(&mut self, cache: &ConvTransposeCache<T>, dy: &Array4<T>, need_dx: bool) -> Option<Array4<T>> {
        let (_, _, h, w) = cache.in_dims;
        let dcols = im2col(dy.view(), self.geom, h, w);
        let dw = cache.x.dot(&dcols.t());
        self.weight.accumulate(&dw.into_dyn());
        if let Some(b) = &mut self.bias {
            b.accumulate(&channel_sums(dy));
        }
        need_dx.then(|| {
            let dx = as_matrix(&self.weight.value).dot(&dcols);
            dx.into_shape_with_order(cache.in_dims).expect("contiguous")
        })
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Per-channel batch normalization over `(N, H, W)`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Real> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: ArrayD<T>,
    pub running_var: ArrayD<T>,
    name: String,
    momentum: f64,
    eps: f64,
}

#[derive(Clone, Debug)]
pub struct BnCache<T: Real> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
    train: bool,
    dims: (usize, usize, usize, usize),
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), ParamKind::Scale, &[channels]),
            beta: Param::new(format!("{name}.beta"), ParamKind::Bias, &[channels]),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::ones(IxDyn(&[channels])),
            name: name.to_string(),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> (Array4<T>, BnCache<T>) {
        let dims = x.dim();
        let c = dims.0;
        let m = x.len() / c;
        let xs = x.as_standard_layout();
        let xm = xs.view().into_shape_with_order((c, m)).expect("contiguous");
        let eps = T::c(self.eps);
        let (mean, var) = match mode {
            Mode::Train => {
                let mf = T::c(m as f64);
                let mean = xm.sum_axis(Axis(1)) / mf;
                let mut var = Array1::<T>::zeros(c);
                for (ci, row) in xm.axis_iter(Axis(0)).enumerate() {
                    let mu = mean[ci];
                    var[ci] = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / mf;
                }
                let mom = T::c(self.momentum);
                let unbias = if m > 1 { T::c(m as f64 / (m as f64 - 1.0)) } else { T::one() };
                for ci in 0..c {
                    self.running_mean[ci] = (T::one() - mom) * self.running_mean[ci] + mom * mean[ci];
                    self.running_var[ci] = (T::one() - mom) * self.running_var[ci] + mom * var[ci] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (
                Array1::from_iter(self.running_mean.iter().copied()),
                Array1::from_iter(self.running_var.iter().copied()),
            ),
        };
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let mut xhat = xm.to_owned();
        let mut y = Array2::<T>::zeros((c, m));
        for ci in 0..c {
            let (mu, is) = (mean[ci], inv_std[ci]);
            let (g, b) = (self.gamma.value[ci], self.beta.value[ci]);
            let mut xr = xhat.row_mut(ci);
            let mut yr = y.row_mut(ci);
            for (xv, yv) in xr.iter_mut().zip(yr.iter_mut()) {
                *xv = (*xv - mu) * is;
                *yv = g * *xv + b;
            }
        }
        let y = y.into_shape_with_order(dims).expect("contiguous");
        (y, BnCache { xhat, inv_std, train: mode == Mode::Train, dims })
    }

    /// Inference-only forward with running statistics.
    pub fn infer(&self, x: &Array4<T>) -> Array4<T> {
        let eps = T::c(self.eps);
        let mut y = x.as_standard_layout().into_owned();
        for (ci, mut ch) in y.axis_iter_mut(Axis(0)).enumerate() {
            let is = T::one() / (self.running_var[ci] + eps).sqrt();
            let mu = self.running_mean[ci];
            let (g, b) = (self.gamma.value[ci], self.beta.value[ci]);
            ch.mapv_inplace(|v| g * (v - mu) * is + b);
        }
        y
    }

    pub fn backward(&mut self, cache: &BnCache<T>, dy: &Array4<T>) -> Array4<T> {
        let c = cache.dims.0;
        let m = dy.len() / c;
        let dys = dy.as_standard_layout();
        let dym = dys.view().into_shape_with_order((c, m)).expect("contiguous");
        let mut dgamma = ArrayD::<T>::zeros(IxDyn(&[c]));
        let mut dbeta = ArrayD::<T>::zeros(IxDyn(&[c]));
        let mut dx = Array2::<T>::zeros((c, m));
        let mf = T::c(m as f64);
        for ci in 0..c {
            let g_row = dym.row(ci);
            let xh = cache.xhat.row(ci);
            let sum_g: T = g_row.iter().copied().sum();
            let sum_gx: T = g_row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum();
            dgamma[ci] = sum_gx;
            dbeta[ci] = sum_g;
            let scale = self.gamma.value[ci] * cache.inv_std[ci];
            let mut out = dx.row_mut(ci);
            if cache.train {
                for ((o, &g), &x) in out.iter_mut().zip(g_row.iter()).zip(xh.iter()) {
                    *o = scale * (g - sum_g / mf - x * sum_gx / mf);
                }
            } else {
                for (o, &g) in out.iter_mut().zip(g_row.iter()) {
                    *o = scale * g;
                }
            }
        }
        self.gamma.accumulate(&dgamma);
        self.beta.accumulate(&dbeta);
        dx.into_shape_with_order(cache.dims).expect("contiguous")
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn buffers(&self, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        f(&format!("{}.running_mean", self.name), &self.running_mean);
        f(&format!("{}.running_var", self.name), &self.running_var);
    }

    fn buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        f(&format!("{}.running_mean", self.name), &mut self.running_mean);
        f(&format!("{}.running_var", self.name), &mut self.running_var);
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.visit(f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.visit_mut(f)
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.buffers(f)
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        self.buffers_mut(f)
    }
}

/// Fully connected layer on `(N, in)` rows.
#[derive(Clone, Debug)]
pub struct Linear<T: Real> {
    /// `(out, in)`
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Clone, Debug)]
pub struct LinearCache<T: Real> {
    x: Array2<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), ParamKind::Weight, &[out_dim, in_dim]),
            bias: Param::new(format!("{name}.bias"), ParamKind::Bias, &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> Result<(Array2<T>, LinearCache<T>)> {
        if x.ncols() != self.in_dim {
            return Err(shape(format!("{}: expected {} features, got {}", self.weight.name, self.in_dim, x.ncols())));
        }
        let mut y = x.dot(&as_matrix(&self.weight.value).t());
        let b = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("1-d bias");
        y += &b;
        Ok((y, LinearCache { x: x.clone() }))
    }

    pub fn backward(&mut self, cache: &LinearCache<T>, dy: &Array2<T>, need_dx: bool) -> Option<Array2<T>> {
        let dw = dy.t().dot(&cache.x);
        self.weight.accumulate(&dw.into_dyn());
        self.bias.accumulate(&dy.sum_axis(Axis(0)).into_dyn());
        need_dx.then(|| dy.dot(&as_matrix(&self.weight.value)))
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.visit(f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.visit_mut(f)
    }
}

/// Convolution (or transposed convolution), optional batch norm, activation.
#[derive(Clone, Debug)]
pub struct ConvBlock<T: Real> {
    pub conv: ConvKind<T>,
    pub bn: Option<BatchNorm2d<T>>,
    pub act: Act,
}

#[derive(Clone, Debug)]
pub enum ConvKind<T: Real> {
    Down(Conv2d<T>),
    Up(ConvTranspose2d<T>),
}

#[derive(Clone, Debug)]
pub struct BlockCache<T: Real> {
    conv: ConvKindCache<T>,
    bn: Option<BnCache<T>>,
    out: Array4<T>,
}

#[derive(Clone, Debug)]
enum ConvKindCache<T: Real> {
    Down(ConvCache<T>),
    Up(ConvTransposeCache<T>),
}

impl<T: Real> ConvBlock<T> {
    pub fn down(name: &str, in_ch: usize, out_ch: usize, geom: ConvGeom, bn: bool, act: Act) -> Self {
        Self {
            conv: ConvKind::Down(Conv2d::new(&format!("{name}.conv"), in_ch, out_ch, geom, !bn)),
            bn: bn.then(|| BatchNorm2d::new(&format!("{name}.bn"), out_ch)),
            act,
        }
    }

    pub fn up(name: &str, in_ch: usize, out_ch: usize, geom: ConvGeom, bn: bool, act: Act) -> Self {
        Self {
            conv: ConvKind::Up(ConvTranspose2d::new(&format!("{name}.deconv"), in_ch, out_ch, geom, !bn)),
            bn: bn.then(|| BatchNorm2d::new(&format!("{name}.bn"), out_ch)),
            act,
        }
    }

    pub fn out_channels(&self) -> usize {
        match &self.conv {
            ConvKind::Down(c) => c.out_ch,
            ConvKind::Up(c) => c.out_ch,
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<(Array4<T>, BlockCache<T>)> {
        let (y, conv) = match &self.conv {
            ConvKind::Down(c) => {
                let (y, cache) = c.forward(x)?;
                (y, ConvKindCache::Down(cache))
            }
            ConvKind::Up(c) => {
                let (y, cache) = c.forward(x)?;
                (y, ConvKindCache::Up(cache))
            }
        };
        let (y, bn) = match &mut self.bn {
            Some(bn) => {
                let (y, cache) = bn.forward(&y, mode);
                (y, Some(cache))
            }
            None => (y, None),
        };
        let out = self.act.apply(y);
        Ok((out.clone(), BlockCache { conv, bn, out }))
    }

    pub fn infer(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let y = match &self.conv {
            ConvKind::Down(c) => c.forward(x)?.0,
            ConvKind::Up(c) => c.forward(x)?.0,
        };
        let y = match &self.bn {
            Some(bn) => bn.infer(&y),
            None => y,
        };
        Ok(self.act.apply(y))
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, dy: &Array4<T>, need_dx: bool) -> Option<Array4<T>> {
        let mut g = self.act.backward(&cache.out, dy);
        if let (Some(bn), Some(bc)) = (&mut self.bn, &cache.bn) {
            g = bn.backward(bc, &g);
        }
        match (&mut self.conv, &cache.conv) {
            (ConvKind::Down(c), ConvKindCache::Down(cc)) => c.backward(cc, &g, need_dx),
            (ConvKind::Up(c), ConvKindCache::Up(cc)) => c.backward(cc, &g, need_dx),
            _ => unreachable!("cache produced by the same block"),
        }
    }
}

impl<T: Real> Module<T> for ConvBlock<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        match &self.conv {
            ConvKind::Down(c) => c.visit(f),
            ConvKind::Up(c) => c.visit(f),
        }
        if let Some(bn) = &self.bn {
            bn.visit(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match &mut self.conv {
            ConvKind::Down(c) => c.visit_mut(f),
            ConvKind::Up(c) => c.visit_mut(f),
        }
        if let Some(bn) = &mut self.bn {
            bn.visit_mut(f);
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        if let Some(bn) = &self.bn {
            bn.buffers(f);
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        if let Some(bn) = &mut self.bn {
            bn.buffers_mut(f);
        }
    }
}

/// Mean over `(H, W)`: `(C, N, H, W)` to `(N, C)`.
pub fn global_avg_pool<T: Real>(x: &Array4<T>) -> Array2<T> {
    let (c, n, h, w) = x.dim();
    let area = T::c((h * w) as f64);
    let mut out = Array2::zeros((n, c));
    for ci in 0..c {
        for ni in 0..n {
            let s: T = x.slice(ndarray::s![ci, ni, .., ..]).iter().copied().sum();
            out[[ni, ci]] = s / area;
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Real>(dy: &Array2<T>, h: usize, w: usize) -> Array4<T> {
    let (n, c) = dy.dim();
    let area = T::c((h * w) as f64);
    Array4::from_shape_fn((c, n, h, w), |(ci, ni, _, _)| dy[[ni, ci]] / area)
}
