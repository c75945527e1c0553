//! Standard differentiable ops: convolution, activations, pooling,
//! PixelShuffle, bicubic resampling and the structural ops (concat,
//! slicing, gating) the network is assembled from.
//!
//! Each op has a raw tensor kernel plus a graph-recording wrapper whose
//! backward pass is the exact transpose of the forward kernel.

use rayon::prelude::*;

use crate::autodiff::{Backward, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Shape, Tensor};

/// Geometry of a same-size, stride-1 convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub bias: bool,
}

impl Conv2dSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        let spec = Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            bias: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::contract(format!(
                "kernel {kh}x{kw} must have odd dimensions"
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::contract("convolution needs at least one channel"));
        }
        Ok(())
    }

    pub fn padding(&self) -> (usize, usize) {
        (self.kernel.0 / 2, self.kernel.1 / 2)
    }

    pub fn taps(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    pub fn weight_shape(&self) -> Shape {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }

    pub fn bias_shape(&self) -> Shape {
        [1, self.out_channels, 1, 1]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.taps()
    }
}

fn check_conv_shapes<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<()> {
    let [_, ci, _, _] = x.shape();
    let [co, wci, kh, kw] = w.shape();
    if ci != wci {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: x.shape(),
            right: w.shape(),
        });
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::contract(format!("conv2d kernel {kh}x{kw} must be odd")));
    }
    if let Some(b) = b {
        if b.shape() != [1, co, 1, 1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: [1, co, 1, 1],
                right: b.shape(),
            });
        }
    }
    Ok(())
}

/// Naive direct-loop convolution with zero padding `k/2`, accumulated in
/// f64. Reference for the im2col path.
pub fn conv2d_reference<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    check_conv_shapes(x, w, b)?;
    let [n, ci, h, wd] = x.shape();
    let [co, _, kh, kw] = w.shape();
    let (ph, pw) = (kh / 2, kw / 2);
    let out = Tensor::from_fn([n, co, h, wd], |ni, o, y, xx| {
        let mut acc = b.map_or(0.0, |b| b.as_slice()[o].f64());
        for c in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    let sy = y as isize + ky as isize - ph as isize;
                    let sx = xx as isize + kx as isize - pw as isize;
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                        continue;
                    }
                    acc += w.at(o, c, ky, kx).f64() * x.at(ni, c, sy as usize, sx as usize).f64();
                }
            }
        }
        T::of(acc)
    });
    out.check_finite("conv2d_reference")?;
    Ok(out)
}

/// Unfolds one image `(ci, h, w)` into columns `(ci*kh*kw, h*w)`.
pub(crate) fn im2col<T: Real>(img: &[T], ci: usize, h: usize, w: usize, kh: usize, kw: usize, col: &mut [T]) {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    for c in 0..ci {
        let plane = &img[c * hw..(c + 1) * hw];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut col[((c * kh + ky) * kw + kx) * hw..][..hw];
                let dx = kx as isize - pw as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - ph as isize;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    dst[..x_lo].fill(T::zero());
                    dst[x_hi..].fill(T::zero());
                    let src = &plane[sy as usize * w..];
                    let s0 = (x_lo as isize + dx) as usize;
                    dst[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Folds columns back onto an image, accumulating overlaps.
pub(crate) fn col2im<T: Real>(col: &[T], ci: usize, h: usize, w: usize, kh: usize, kw: usize, img: &mut [T]) {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    for c in 0..ci {
        let plane = &mut img[c * hw..(c + 1) * hw];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &col[((c * kh + ky) * kw + kx) * hw..][..hw];
                let dx = kx as isize - pw as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (sy as usize) * w + (x_lo as isize + dx) as usize;
                    let dst = &mut plane[s0..s0 + (x_hi - x_lo)];
                    for (d, &s) in dst.iter_mut().zip(&row[y * w + x_lo..y * w + x_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Same-size stride-1 convolution via im2col + GEMM, parallel over batch
/// items.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    check_conv_shapes(x, w, b)?;
    let [n, ci, h, wd] = x.shape();
    let [co, _, kh, kw] = w.shape();
    let hw = h * wd;
    let k = ci * kh * kw;
    let mut out = vec![T::zero(); n * co * hw];
    let xs = x.as_slice();
    let ws = w.as_slice();
    out.par_chunks_mut(co * hw.max(1))
        .enumerate()
        .for_each(|(ni, o)| {
            if hw == 0 {
                return;
            }
            let img = &xs[ni * ci * hw..(ni + 1) * ci * hw];
            if let Some(b) = b {
                for (oc, chunk) in o.chunks_mut(hw).enumerate() {
                    chunk.fill(b.as_slice()[oc]);
                }
            }
            let beta = if b.is_some() { T::one() } else { T::zero() };
            if kh == 1 && kw == 1 {
                T::gemm(false, false, co, k, hw, T::one(), ws, img, beta, o);
            } else {
                let mut col = vec![T::zero(); k * hw];
                im2col(img, ci, h, wd, kh, kw, &mut col);
                T::gemm(false, false, co, k, hw, T::one(), ws, &col, beta, o);
            }
        });
    Ok(Tensor::from_raw([n, co, h, wd], out))
}

/// Gradients of [`conv2d_forward`]: `(dx, dw, db)`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    want_x: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let [n, ci, h, wd] = x.shape();
    let [co, _, kh, kw] = w.shape();
    let hw = h * wd;
    let k = ci * kh * kw;
    let xs = x.as_slice();
    let ws = w.as_slice();
    let gs = grad.as_slice();
    let per_item: Vec<(Option<Vec<T>>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let img = &xs[ni * ci * hw..(ni + 1) * ci * hw];
            let g = &gs[ni * co * hw..(ni + 1) * co * hw];
            let mut dw = vec![T::zero(); co * k];
            let one_by_one = kh == 1 && kw == 1;
            if one_by_one {
                T::gemm(false, true, co, hw, k, T::one(), g, img, T::zero(), &mut dw);
            } else {
                let mut col = vec![T::zero(); k * hw];
                im2col(img, ci, h, wd, kh, kw, &mut col);
                T::gemm(false, true, co, hw, k, T::one(), g, &col, T::zero(), &mut dw);
            }
            let dx = want_x.then(|| {
                let mut dimg = vec![T::zero(); ci * hw];
                if one_by_one {
                    T::gemm(true, false, k, co, hw, T::one(), ws, g, T::zero(), &mut dimg);
                } else {
                    let mut dcol = vec![T::zero(); k * hw];
                    T::gemm(true, false, k, co, hw, T::one(), ws, g, T::zero(), &mut dcol);
                    col2im(&dcol, ci, h, wd, kh, kw, &mut dimg);
                }
                dimg
            });
            (dx, dw)
        })
        .collect();

    let mut dw = vec![T::zero(); co * k];
    let mut dx = want_x.then(|| Vec::with_capacity(n * ci * hw));
    for (ix, iw) in per_item {
        for (a, b) in dw.iter_mut().zip(iw) {
            *a += b;
        }
        if let (Some(dx), Some(ix)) = (dx.as_mut(), ix) {
            dx.extend(ix);
        }
    }
    let mut db = vec![T::zero(); co];
    for ni in 0..n {
        for (oc, d) in db.iter_mut().enumerate() {
            let base = (ni * co + oc) * hw;
            *d += gs[base..base + hw].iter().copied().sum::<T>();
        }
    }
    (
        dx.map(|d| Tensor::from_raw(x.shape(), d)),
        Tensor::from_raw(w.shape(), dw),
        Tensor::from_raw([1, co, 1, 1], db),
    )
}

struct Conv2dOp {
    has_bias: bool,
}

impl<T: Real> Backward<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, wants: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (dx, dw, db) = conv2d_backward(inputs[0], inputs[1], grad, wants[0]);
        let mut out = vec![dx, Some(dw)];
        if self.has_bias {
            out.push(Some(db));
        }
        Ok(out)
    }
}

/// Records a same-size convolution `x * w + b`.
pub fn conv2d<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let out = conv2d_forward(g.value(x), g.value(w), b.map(|b| g.value(b)))?;
    let mut inputs = vec![x, w];
    inputs.extend(b);
    g.record(&inputs, out, Conv2dOp { has_bias: b.is_some() })
}

// ---------------------------------------------------------------------------
// elementwise

struct AddOp;

impl<T: Real> Backward<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, wants: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(wants.iter().map(|&w| w.then(|| grad.clone())).collect())
    }
}

pub fn add<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let out = g.value(a).add(g.value(b))?;
    g.record(&[a, b], out, AddOp)
}

struct MulOp;

impl<T: Real> Backward<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, wants: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![
            if wants[0] { Some(grad.mul(inputs[1])?) } else { None },
            if wants[1] { Some(grad.mul(inputs[0])?) } else { None },
        ])
    }
}

pub fn mul<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let out = g.value(a).mul(g.value(b))?;
    g.record(&[a, b], out, MulOp)
}

struct ScaleOp<T>(T);

impl<T: Real> Backward<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.scale(self.0)?)])
    }
}

pub fn scale<T: Real>(g: &mut Graph<T>, a: Var, s: f64) -> Result<Var> {
    let s = T::of(s);
    let out = g.value(a).scale(s)?;
    g.record(&[a], out, ScaleOp(s))
}

struct SumOp;

impl<T: Real> Backward<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(Tensor::full(inputs[0].shape(), grad.as_slice()[0]))])
    }
}

/// Sum of all elements as a `(1,1,1,1)` tensor.
pub fn sum<T: Real>(g: &mut Graph<T>, a: Var) -> Result<Var> {
    let s = Tensor::scalar(T::of(g.value(a).sum()));
    g.record(&[a], s, SumOp)
}

/// Leaky ReLU slope used throughout the network.
pub const LEAKY_SLOPE: f64 = 0.1;

pub fn leaky_relu_forward<T: Real>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::of(slope);
    x.map(|v| if v > T::zero() { v } else { v * s })
}

struct LeakyReluOp(f64);

impl<T: Real> Backward<T> for LeakyReluOp {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let s = T::of(self.0);
        let d = inputs[0].zip_map(grad, "leaky_relu", |x, g| if x > T::zero() { g } else { g * s })?;
        Ok(vec![Some(d)])
    }

    fn kinks(&self, inputs: &[&Tensor<T>], out: &mut Vec<i64>) {
        out.extend(inputs[0].as_slice().iter().map(|&x| (x > T::zero()) as i64));
    }
}

pub fn leaky_relu<T: Real>(g: &mut Graph<T>, x: Var, slope: f64) -> Result<Var> {
    let out = leaky_relu_forward(g.value(x), slope);
    g.record(&[x], out, LeakyReluOp(slope))
}

pub fn sigmoid_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        // split by sign so exp never overflows
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}

struct SigmoidOp;

impl<T: Real> Backward<T> for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(out.zip_map(grad, "sigmoid", |s, g| g * s * (T::one() - s))?)])
    }
}

pub fn sigmoid<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let out = sigmoid_forward(g.value(x));
    g.record(&[x], out, SigmoidOp)
}

// ---------------------------------------------------------------------------
// structural

struct ConcatOp {
    channels: Vec<usize>,
}

impl<T: Real> Backward<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, wants: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(self.channels.len());
        for (&c, &w) in self.channels.iter().zip(wants) {
            out.push(if w { Some(grad.narrow_channels(start, c)?) } else { None });
            start += c;
        }
        Ok(out)
    }
}

pub fn concat_channels<T: Real>(g: &mut Graph<T>, parts: &[Var]) -> Result<Var> {
    let tensors: Vec<&Tensor<T>> = parts.iter().map(|&v| g.value(v)).collect();
    let out = Tensor::concat_channels(&tensors)?;
    let channels = tensors.iter().map(|t| t.shape()[1]).collect();
    g.record(parts, out, ConcatOp { channels })
}

struct NarrowOp {
    start: usize,
}

impl<T: Real> Backward<T> for NarrowOp {
    fn name(&self) -> &'static str {
        "narrow_channels"
    }

    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let [n, c, h, w] = inputs[0].shape();
        let len = out.shape()[1];
        let plane = h * w;
        let mut d = vec![T::zero(); n * c * plane];
        let gs = grad.as_slice();
        for ni in 0..n {
            let dst = (ni * c + self.start) * plane;
            d[dst..dst + len * plane].copy_from_slice(&gs[ni * len * plane..(ni + 1) * len * plane]);
        }
        Ok(vec![Some(Tensor::from_raw([n, c, h, w], d))])
    }
}

pub fn narrow_channels<T: Real>(g: &mut Graph<T>, x: Var, start: usize, len: usize) -> Result<Var> {
    let out = g.value(x).narrow_channels(start, len)?;
    g.record(&[x], out, NarrowOp { start })
}

struct ReshapeOp;

impl<T: Real> Backward<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.clone().reshape(inputs[0].shape())?)])
    }
}

pub fn reshape<T: Real>(g: &mut Graph<T>, x: Var, shape: Shape) -> Result<Var> {
    let out = g.value(x).clone().reshape(shape)?;
    g.record(&[x], out, ReshapeOp)
}

fn gate_shape_ok(x: Shape, a: Shape) -> bool {
    let [n, c, h, w] = x;
    a == x || a == [n, c, 1, 1] || a == [n, 1, h, w]
}

/// `x ⊙ a` where `a` is `(n,c,h,w)`, a per-channel `(n,c,1,1)` or a
/// per-pixel `(n,1,h,w)` gate.
pub fn gate_forward<T: Real>(x: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    if !gate_shape_ok(x.shape(), a.shape()) {
        return Err(Error::ShapeMismatch {
            op: "gate",
            left: x.shape(),
            right: a.shape(),
        });
    }
    let [_, ac, ah, aw] = a.shape();
    Ok(Tensor::from_fn(x.shape(), |n, c, y, xx| {
        x.at(n, c, y, xx) * a.at(n, c.min(ac - 1), y.min(ah - 1), xx.min(aw - 1))
    }))
}

struct GateOp;

impl<T: Real> Backward<T> for GateOp {
    fn name(&self) -> &'static str {
        "gate"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, wants: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, a) = (inputs[0], inputs[1]);
        let dx = if wants[0] { Some(gate_forward(grad, a)?) } else { None };
        let da = if wants[1] {
            let [_, ac, ah, aw] = a.shape();
            let mut d = vec![T::zero(); a.len()];
            let [n, c, h, w] = x.shape();
            for ni in 0..n {
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let i = ((ni * ac + ci.min(ac - 1)) * ah + y.min(ah - 1)) * aw + xx.min(aw - 1);
                            d[i] += grad.at(ni, ci, y, xx) * x.at(ni, ci, y, xx);
                        }
                    }
                }
            }
            Some(Tensor::from_raw(a.shape(), d))
        } else {
            None
        };
        Ok(vec![dx, da])
    }
}

pub fn gate<T: Real>(g: &mut Graph<T>, x: Var, a: Var) -> Result<Var> {
    let out = gate_forward(g.value(x), g.value(a))?;
    g.record(&[x, a], out, GateOp)
}

pub fn global_avg_pool_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if h == 0 || w == 0 {
        return Err(Error::contract("global_avg_pool on empty spatial extent"));
    }
    let plane = h * w;
    let data = x
        .as_slice()
        .chunks(plane)
        .map(|p| T::of(p.iter().fold(0.0f64, |a, v| a + v.f64()) / plane as f64))
        .collect();
    Ok(Tensor::from_raw([n, c, 1, 1], data))
}

struct PoolOp;

impl<T: Real> Backward<T> for PoolOp {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let [_, _, h, w] = inputs[0].shape();
        let inv = T::of(1.0 / (h * w) as f64);
        Ok(vec![Some(Tensor::from_fn(inputs[0].shape(), |n, c, _, _| grad.at(n, c, 0, 0) * inv))])
    }
}

pub fn global_avg_pool<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let out = global_avg_pool_forward(g.value(x))?;
    g.record(&[x], out, PoolOp)
}

// ---------------------------------------------------------------------------
// PixelShuffle

/// `(n, c*r*r, h, w) -> (n, c, r*h, r*w)` with
/// `out(n,c,y,x) = in(n, c*r*r + (y%r)*r + x%r, y/r, x/r)`.
pub fn pixel_shuffle_forward<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, cr, h, w] = x.shape();
    if r == 0 || cr % (r * r) != 0 {
        return Err(Error::contract(format!(
            "pixel_shuffle: {cr} channels not divisible by r^2 = {}",
            r * r
        )));
    }
    let c = cr / (r * r);
    Ok(Tensor::from_fn([n, c, h * r, w * r], |ni, ci, y, xx| {
        x.at(ni, ci * r * r + (y % r) * r + xx % r, y / r, xx / r)
    }))
}

/// Exact inverse of [`pixel_shuffle_forward`].
pub fn pixel_unshuffle_forward<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, hr, wr] = x.shape();
    if r == 0 || hr % r != 0 || wr % r != 0 {
        return Err(Error::contract(format!(
            "pixel_unshuffle: {hr}x{wr} not divisible by {r}"
        )));
    }
    Ok(Tensor::from_fn([n, c * r * r, hr / r, wr / r], |ni, cc, y, xx| {
        let (ci, sub) = (cc / (r * r), cc % (r * r));
        x.at(ni, ci, y * r + sub / r, xx * r + sub % r)
    }))
}

struct PixelShuffleOp(usize);

impl<T: Real> Backward<T> for PixelShuffleOp {
    fn name(&self) -> &'static str {
        "pixel_shuffle"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(pixel_unshuffle_forward(grad, self.0)?)])
    }
}

pub fn pixel_shuffle<T: Real>(g: &mut Graph<T>, x: Var, r: usize) -> Result<Var> {
    let out = pixel_shuffle_forward(g.value(x), r)?;
    g.record(&[x], out, PixelShuffleOp(r))
}

// ---------------------------------------------------------------------------
// bicubic

/// Cubic convolution parameter (Catmull-Rom family).
pub const BICUBIC_A: f64 = -0.5;

pub fn cubic_kernel(t: f64) -> f64 {
    let a = BICUBIC_A;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Per-output-index source taps for a 1-D resize. Pixel-center alignment
/// (`src = (dst + 0.5) / scale - 0.5`), edge clamping, and for
/// downscaling the kernel is stretched by `1/scale` so the filter
/// integrates over the source area. Weights are normalized to sum to 1.
pub fn resize_taps(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = out_len as f64 / in_len as f64;
    let stretch = if scale < 1.0 { 1.0 / scale } else { 1.0 };
    let support = 2.0 * stretch;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for j in lo..=hi {
                let wgt = cubic_kernel((j as f64 - center) / stretch);
                if wgt == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, in_len as isize - 1) as usize;
                match taps.iter_mut().find(|(k, _)| *k == idx) {
                    Some(t) => t.1 += wgt,
                    None => taps.push((idx, wgt)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

fn resize_axis<T: Real>(x: &Tensor<T>, taps: &[Vec<(usize, f64)>], along_w: bool) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let shape = if along_w { [n, c, h, taps.len()] } else { [n, c, taps.len(), w] };
    let mut out = vec![T::zero(); numel(shape)];
    let xs = x.as_slice();
    let (oh, ow) = (shape[2], shape[3]);
    for p in 0..n * c {
        let src = &xs[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        if along_w {
            for y in 0..h {
                for (ox, tl) in taps.iter().enumerate() {
                    let mut acc = T::zero();
                    for &(sx, wg) in tl {
                        acc += src[y * w + sx] * T::of(wg);
                    }
                    dst[y * ow + ox] = acc;
                }
            }
        } else {
            for (oy, tl) in taps.iter().enumerate() {
                let row = &mut dst[oy * ow..(oy + 1) * ow];
                for &(sy, wg) in tl {
                    let wg = T::of(wg);
                    for (d, &s) in row.iter_mut().zip(&src[sy * w..(sy + 1) * w]) {
                        *d += s * wg;
                    }
                }
            }
        }
    }
    Tensor::from_raw(shape, out)
}

fn resize_axis_transpose<T: Real>(grad: &Tensor<T>, taps: &[Vec<(usize, f64)>], in_len: usize, along_w: bool) -> Tensor<T> {
    let [n, c, gh, gw] = grad.shape();
    let shape = if along_w { [n, c, gh, in_len] } else { [n, c, in_len, gw] };
    let (ih, iw) = (shape[2], shape[3]);
    let mut out = vec![T::zero(); numel(shape)];
    let gs = grad.as_slice();
    for p in 0..n * c {
        let src = &gs[p * gh * gw..(p + 1) * gh * gw];
        let dst = &mut out[p * ih * iw..(p + 1) * ih * iw];
        if along_w {
            for y in 0..gh {
                for (ox, tl) in taps.iter().enumerate() {
                    let g = src[y * gw + ox];
                    for &(sx, wg) in tl {
                        dst[y * iw + sx] += g * T::of(wg);
                    }
                }
            }
        } else {
            for (oy, tl) in taps.iter().enumerate() {
                for &(sy, wg) in tl {
                    let wg = T::of(wg);
                    for (d, &s) in dst[sy * iw..(sy + 1) * iw].iter_mut().zip(&src[oy * gw..(oy + 1) * gw]) {
                        *d += s * wg;
                    }
                }
            }
        }
    }
    Tensor::from_raw(shape, out)
}

/// Separable bicubic resize to `(out_h, out_w)`; width pass first.
pub fn bicubic_resize_to<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [_, _, h, w] = x.shape();
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::contract("bicubic resize of an empty image"));
    }
    let tw = resize_taps(w, out_w);
    let th = resize_taps(h, out_h);
    Ok(resize_axis(&resize_axis(x, &tw, true), &th, false))
}

/// Integer upscale by `factor`.
pub fn bicubic_upscale<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [_, _, h, w] = x.shape();
    bicubic_resize_to(x, h * factor, w * factor)
}

/// Integer downscale by `factor` (area-consistent kernel).
pub fn bicubic_downscale<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [_, _, h, w] = x.shape();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::contract(format!(
            "bicubic downscale: {h}x{w} not divisible by {factor}"
        )));
    }
    bicubic_resize_to(x, h / factor, w / factor)
}

struct BicubicOp;

impl<T: Real> Backward<T> for BicubicOp {
    fn name(&self) -> &'static str {
        "bicubic_resize"
    }

    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let [_, _, h, w] = inputs[0].shape();
        let [_, _, oh, ow] = out.shape();
        let th = resize_taps(h, oh);
        let tw = resize_taps(w, ow);
        let g1 = resize_axis_transpose(grad, &th, h, false);
        Ok(vec![Some(resize_axis_transpose(&g1, &tw, w, true))])
    }
}

/// Records a bicubic upscale by an integer factor.
pub fn bicubic_resize<T: Real>(g: &mut Graph<T>, x: Var, factor: usize) -> Result<Var> {
    let out = bicubic_upscale(g.value(x), factor)?;
    g.record(&[x], out, BicubicOp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn conv_all_ones_center_is_45() {
        let x = t([1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let w = Tensor::ones([1, 1, 3, 3]);
        let y = conv2d_forward(&x, &w, None).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 45.0);
        // corner sees 1+2+4+5
        assert_eq!(y.at(0, 0, 0, 0), 12.0);
    }

    #[test]
    fn conv_identity_1x1() {
        let mut rng = Rng::new(3);
        let x: Tensor<f32> = rng.uniform_tensor([2, 1, 5, 4], -1.0, 1.0);
        let y = conv2d_forward(&x, &Tensor::ones([1, 1, 1, 1]), None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_optimized_matches_naive() {
        let mut rng = Rng::new(4);
        for &(ci, co, k) in &[(3, 5, 3), (4, 2, 1), (1, 1, 3), (2, 3, 3)] {
            let x: Tensor<f32> = rng.uniform_tensor([2, ci, 8, 8], -1.0, 1.0);
            let w: Tensor<f32> = rng.uniform_tensor([co, ci, k, k], -1.0, 1.0);
            let b: Tensor<f32> = rng.uniform_tensor([1, co, 1, 1], -1.0, 1.0);
            let fast = conv2d_forward(&x, &w, Some(&b)).unwrap();
            let slow = conv2d_reference(&x, &w, Some(&b)).unwrap();
            assert!(fast.max_abs_diff(&slow) <= 1e-6, "diff {}", fast.max_abs_diff(&slow));
        }
    }

    #[test]
    fn conv_channel_mismatch_is_error() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros([1, 3, 3, 3]);
        assert!(matches!(conv2d_forward(&x, &w, None), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = Rng::new(8);
        let x1: Tensor<f64> = rng.uniform_tensor([1, 3, 6, 6], -1.0, 1.0);
        let x2: Tensor<f64> = rng.uniform_tensor([1, 3, 6, 6], -1.0, 1.0);
        let w: Tensor<f64> = rng.uniform_tensor([2, 3, 3, 3], -1.0, 1.0);
        let (a, b) = (0.7, -1.3);
        let lhs = conv2d_forward(&x1.scale(a).unwrap().add(&x2.scale(b).unwrap()).unwrap(), &w, None).unwrap();
        let rhs = conv2d_forward(&x1, &w, None)
            .unwrap()
            .scale(a)
            .unwrap()
            .add(&conv2d_forward(&x2, &w, None).unwrap().scale(b).unwrap())
            .unwrap();
        for (l, r) in lhs.as_slice().iter().zip(rhs.as_slice()) {
            assert!((l - r).abs() <= 1e-5 * l.abs().max(r.abs()).max(1e-12));
        }
    }

    #[test]
    fn spec_rejects_even_kernels() {
        assert!(Conv2dSpec::new(2, 2, 2).is_err());
        let s = Conv2dSpec::new(4, 8, 3).unwrap();
        assert_eq!(s.padding(), (1, 1));
        assert_eq!(s.weight_shape(), [8, 4, 3, 3]);
    }

    #[test]
    fn activations() {
        let x = t([1, 1, 1, 3], &[-1.0, 0.0, 2.5]);
        assert_eq!(leaky_relu_forward(&x, 0.1).as_slice(), &[-0.1, 0.0, 2.5]);
        let s = sigmoid_forward(&t([1, 1, 1, 3], &[0.0, -800.0, 800.0]));
        assert_eq!(s.as_slice()[0], 0.5);
        assert!(s.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pooling() {
        let c = Tensor::<f64>::full([1, 2, 3, 3], 7.0);
        assert_eq!(global_avg_pool_forward(&c).unwrap().as_slice(), &[7.0, 7.0]);
        let x = t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(global_avg_pool_forward(&x).unwrap().as_slice(), &[2.5]);
    }

    #[test]
    fn pixel_shuffle_layout() {
        let x = t([1, 4, 1, 1], &[1.0, 2.0, 3.0, 4.0]);
        let y = pixel_shuffle_forward(&x, 2).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert_eq!(y.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pixel_unshuffle_forward(&y, 2).unwrap(), x);
        let mut rng = Rng::new(2);
        let z: Tensor<f32> = rng.uniform_tensor([2, 3, 4, 5], -1.0, 1.0);
        assert_eq!(pixel_shuffle_forward(&z, 1).unwrap(), z);
        assert!(pixel_shuffle_forward(&z, 2).is_err());
    }

    #[test]
    fn bicubic_reproduces_constants() {
        let c = Tensor::<f32>::full([1, 3, 5, 7], 0.37);
        for up in [bicubic_upscale(&c, 2).unwrap(), bicubic_upscale(&c, 4).unwrap()] {
            assert!(up.as_slice().iter().all(|v| (v - 0.37).abs() <= 1e-6));
        }
        let down = bicubic_downscale(&Tensor::<f32>::full([1, 1, 8, 8], 0.5), 4).unwrap();
        assert!(down.as_slice().iter().all(|v| (v - 0.5).abs() <= 1e-6));
    }

    #[test]
    fn bicubic_reproduces_interior_ramp() {
        let ramp = Tensor::<f64>::from_fn([1, 1, 12, 12], |_, _, y, x| 0.1 * x as f64 + 0.03 * y as f64);
        let up = bicubic_upscale(&ramp, 2).unwrap();
        // interior outputs whose 4-tap support stays inside the image
        for oy in 6..18 {
            for ox in 6..18 {
                let sy = (oy as f64 + 0.5) / 2.0 - 0.5;
                let sx = (ox as f64 + 0.5) / 2.0 - 0.5;
                let expect = 0.1 * sx + 0.03 * sy;
                assert!((up.at(0, 0, oy, ox) - expect).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn resize_taps_sum_to_one() {
        for (a, b) in [(5, 10), (16, 4), (7, 28), (9, 3)] {
            for taps in resize_taps(a, b) {
                let s: f64 = taps.iter().map(|t| t.1).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gate_shapes() {
        let x = Tensor::<f64>::ones([1, 2, 2, 2]);
        let ch = t([1, 2, 1, 1], &[0.5, 2.0]);
        let y = gate_forward(&x, &ch).unwrap();
        assert_eq!(y.at(0, 1, 1, 1), 2.0);
        let sp = t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(gate_forward(&x, &sp).unwrap().at(0, 1, 1, 0), 3.0);
        assert!(gate_forward(&x, &Tensor::ones([1, 2, 2, 1])).is_err());
    }
}
