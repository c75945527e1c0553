//! Bilinear sampling, modulated deformable convolution and
//! deformable-kernel convolution.
//!
//! Offset fields are `(n, 2K, h, w)` ordered `(dy_1, dx_1, ..., dy_K, dx_K)`
//! with taps `k = ky * kw + kx` in row-major kernel order. Modulation
//! fields are `(n, K, h, w)`. Image-space sampling treats every pixel
//! outside the grid as zero.

use rayon::prelude::*;

use crate::autodiff::{push_cells, Backward, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::layers::{Conv, DkConv};
use crate::nn_ops::{self, LEAKY_SLOPE};
use crate::tensor::{Real, Shape, Tensor};

/// Bilinear corner weights for a fractional position.
#[derive(Clone, Copy, Debug)]
struct Corners<T> {
    y0: isize,
    x0: isize,
    ly: T,
    lx: T,
}

impl<T: Real> Corners<T> {
    #[inline]
    fn at(py: T, px: T) -> Self {
        let fy = py.floor();
        let fx = px.floor();
        Self {
            y0: fy.f64() as isize,
            x0: fx.f64() as isize,
            ly: py - fy,
            lx: px - fx,
        }
    }
}

#[inline]
fn fetch<T: Real>(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        T::zero()
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Value and position derivatives `(v, dv/dy, dv/dx)` of the bilinear
/// interpolant of `plane` at `(py, px)`.
#[inline]
fn sample_with_grad<T: Real>(plane: &[T], h: usize, w: usize, c: &Corners<T>) -> (T, T, T) {
    if c.y0 < -1 || c.x0 < -1 || c.y0 >= h as isize || c.x0 >= w as isize {
        return (T::zero(), T::zero(), T::zero());
    }
    let v00 = fetch(plane, h, w, c.y0, c.x0);
    let v01 = fetch(plane, h, w, c.y0, c.x0 + 1);
    let v10 = fetch(plane, h, w, c.y0 + 1, c.x0);
    let v11 = fetch(plane, h, w, c.y0 + 1, c.x0 + 1);
    let one = T::one();
    let (ly, lx) = (c.ly, c.lx);
    let v = (one - ly) * ((one - lx) * v00 + lx * v01) + ly * ((one - lx) * v10 + lx * v11);
    let dy = (one - lx) * (v10 - v00) + lx * (v11 - v01);
    let dx = (one - ly) * (v01 - v00) + ly * (v11 - v10);
    (v, dy, dx)
}

#[inline]
fn sample<T: Real>(plane: &[T], h: usize, w: usize, c: &Corners<T>) -> T {
    if c.y0 < -1 || c.x0 < -1 || c.y0 >= h as isize || c.x0 >= w as isize {
        return T::zero();
    }
    let one = T::one();
    let (ly, lx) = (c.ly, c.lx);
    (one - ly) * ((one - lx) * fetch(plane, h, w, c.y0, c.x0) + lx * fetch(plane, h, w, c.y0, c.x0 + 1))
        + ly * ((one - lx) * fetch(plane, h, w, c.y0 + 1, c.x0) + lx * fetch(plane, h, w, c.y0 + 1, c.x0 + 1))
}

/// Adds `g` distributed over the bilinear corners into `plane`.
#[inline]
fn scatter<T: Real>(plane: &mut [T], h: usize, w: usize, c: &Corners<T>, g: T) {
    let one = T::one();
    let put = |plane: &mut [T], y: isize, x: isize, v: T| {
        if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
            plane[y as usize * w + x as usize] += v;
        }
    };
    put(plane, c.y0, c.x0, g * (one - c.ly) * (one - c.lx));
    put(plane, c.y0, c.x0 + 1, g * (one - c.ly) * c.lx);
    put(plane, c.y0 + 1, c.x0, g * c.ly * (one - c.lx));
    put(plane, c.y0 + 1, c.x0 + 1, g * c.ly * c.lx);
}

/// Bilinear interpolation of channel `c` of batch item `n` at `(py, px)`.
/// Neighbors outside the grid read as zero.
pub fn bilinear_sample<T: Real>(x: &Tensor<T>, py: f64, px: f64, n: usize, c: usize) -> T {
    let [_, cs, h, w] = x.shape();
    let plane = &x.as_slice()[(n * cs + c) * h * w..][..h * w];
    sample(plane, h, w, &Corners::at(T::of(py), T::of(px)))
}

// ---------------------------------------------------------------------------
// dense warp: per-pixel displacement field, the op form of bilinear_sample

/// `out(n,c,y,x) = x(n,c, y + flow(n,0,y,x), x + flow(n,1,y,x))`.
pub fn warp_forward<T: Real>(x: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if flow.shape() != [n, 2, h, w] {
        return Err(Error::ShapeMismatch {
            op: "bilinear_warp",
            left: [n, 2, h, w],
            right: flow.shape(),
        });
    }
    let hw = h * w;
    let xs = x.as_slice();
    let fs = flow.as_slice();
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for p in 0..hw {
            let (y, xx) = (p / w, p % w);
            let cor = Corners::at(
                T::of(y as f64) + fs[(ni * 2) * hw + p],
                T::of(xx as f64) + fs[(ni * 2 + 1) * hw + p],
            );
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                out[base + p] = sample(&xs[base..base + hw], h, w, &cor);
            }
        }
    }
    Ok(Tensor::from_raw(x.shape(), out))
}

struct WarpOp;

impl<T: Real> Backward<T> for WarpOp {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn kinks(&self, inputs: &[&Tensor<T>], out: &mut Vec<i64>) {
        push_cells(inputs[1], out);
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, flow) = (inputs[0], inputs[1]);
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let (xs, fs, gs) = (x.as_slice(), flow.as_slice(), grad.as_slice());
        let mut dx = vec![T::zero(); x.len()];
        let mut df = vec![T::zero(); flow.len()];
        for ni in 0..n {
            for p in 0..hw {
                let (y, xx) = (p / w, p % w);
                let cor = Corners::at(
                    T::of(y as f64) + fs[(ni * 2) * hw + p],
                    T::of(xx as f64) + fs[(ni * 2 + 1) * hw + p],
                );
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let g = gs[base + p];
                    let (_, vy, vx) = sample_with_grad(&xs[base..base + hw], h, w, &cor);
                    df[(ni * 2) * hw + p] += g * vy;
                    df[(ni * 2 + 1) * hw + p] += g * vx;
                    scatter(&mut dx[base..base + hw], h, w, &cor, g);
                }
            }
        }
        Ok(vec![
            Some(Tensor::from_raw(x.shape(), dx)),
            Some(Tensor::from_raw(flow.shape(), df)),
        ])
    }
}

/// Records a bilinear warp of `x` by a `(n,2,h,w)` displacement field.
pub fn bilinear_warp<T: Real>(g: &mut Graph<T>, x: Var, flow: Var) -> Result<Var> {
    let out = warp_forward(g.value(x), g.value(flow))?;
    g.record(&[x, flow], out, WarpOp)
}

// ---------------------------------------------------------------------------
// modulated deformable convolution

fn check_deform_shapes<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    offsets: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<()> {
    let [n, ci, h, wd] = x.shape();
    let [co, wci, kh, kw] = w.shape();
    let k = kh * kw;
    if wci != ci {
        return Err(Error::ShapeMismatch {
            op: "deformable_conv2d",
            left: x.shape(),
            right: w.shape(),
        });
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::contract(format!("deformable kernel {kh}x{kw} must be odd")));
    }
    if offsets.shape() != [n, 2 * k, h, wd] {
        return Err(Error::ShapeMismatch {
            op: "deformable_conv2d offsets",
            left: [n, 2 * k, h, wd],
            right: offsets.shape(),
        });
    }
    if mask.shape() != [n, k, h, wd] {
        return Err(Error::ShapeMismatch {
            op: "deformable_conv2d mask",
            left: [n, k, h, wd],
            right: mask.shape(),
        });
    }
    if let Some(b) = b {
        if b.shape() != [1, co, 1, 1] {
            return Err(Error::ShapeMismatch {
                op: "deformable_conv2d bias",
                left: [1, co, 1, 1],
                right: b.shape(),
            });
        }
    }
    Ok(())
}

/// Per-tap sampling corners for one batch item, `K * h * w` entries.
fn deform_corners<T: Real>(offsets: &[T], kh: usize, kw: usize, h: usize, w: usize) -> Vec<Corners<T>> {
    let hw = h * w;
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = Vec::with_capacity(kh * kw * hw);
    for ky in 0..kh {
        for kx in 0..kw {
            let k = ky * kw + kx;
            let oy = &offsets[2 * k * hw..][..hw];
            let ox = &offsets[(2 * k + 1) * hw..][..hw];
            for p in 0..hw {
                let (y, x) = (p / w, p % w);
                out.push(Corners::at(
                    T::of(y as f64 + ky as f64 - ph as f64) + oy[p],
                    T::of(x as f64 + kx as f64 - pw as f64) + ox[p],
                ));
            }
        }
    }
    out
}

/// Modulated deformable columns `(ci*K, h*w)` for one batch item.
fn deform_im2col<T: Real>(img: &[T], ci: usize, h: usize, w: usize, corners: &[Corners<T>], mask: &[T], col: &mut [T]) {
    let hw = h * w;
    let k = corners.len() / hw;
    for c in 0..ci {
        let plane = &img[c * hw..(c + 1) * hw];
        for t in 0..k {
            let row = &mut col[(c * k + t) * hw..][..hw];
            let cs = &corners[t * hw..][..hw];
            let ms = &mask[t * hw..][..hw];
            for p in 0..hw {
                row[p] = sample(plane, h, w, &cs[p]) * ms[p];
            }
        }
    }
}

/// `F(p) = sum_k W_k * x(p + p_k + dp_k(p)) * m_k(p) + b`.
pub fn deformable_conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    offsets: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_deform_shapes(x, w, b, offsets, mask)?;
    let [n, ci, h, wd] = x.shape();
    let [co, _, kh, kw] = w.shape();
    let (hw, k) = (h * wd, kh * kw);
    let (xs, os, ms, ws) = (x.as_slice(), offsets.as_slice(), mask.as_slice(), w.as_slice());
    let mut out = vec![T::zero(); n * co * hw];
    out.par_chunks_mut((co * hw).max(1)).enumerate().for_each(|(ni, o)| {
        if hw == 0 {
            return;
        }
        let corners = deform_corners(&os[ni * 2 * k * hw..][..2 * k * hw], kh, kw, h, wd);
        let mut col = vec![T::zero(); ci * k * hw];
        deform_im2col(&xs[ni * ci * hw..][..ci * hw], ci, h, wd, &corners, &ms[ni * k * hw..][..k * hw], &mut col);
        if let Some(b) = b {
            for (oc, chunk) in o.chunks_mut(hw).enumerate() {
                chunk.fill(b.as_slice()[oc]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(false, false, co, ci * k, hw, T::one(), ws, &col, beta, o);
    });
    Ok(Tensor::from_raw([n, co, h, wd], out))
}

/// Gradients for `(x, w, b, offsets, mask)`.
#[allow(clippy::type_complexity)]
pub fn deformable_conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    offsets: &Tensor<T>,
    mask: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, ci, h, wd] = x.shape();
    let [co, _, kh, kw] = w.shape();
    let (hw, k) = (h * wd, kh * kw);
    let (xs, os, ms, ws, gs) = (x.as_slice(), offsets.as_slice(), mask.as_slice(), w.as_slice(), grad.as_slice());

    struct Item<T> {
        dx: Vec<T>,
        dw: Vec<T>,
        doff: Vec<T>,
        dmask: Vec<T>,
    }

    let items: Vec<Item<T>> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let img = &xs[ni * ci * hw..][..ci * hw];
            let m = &ms[ni * k * hw..][..k * hw];
            let g = &gs[ni * co * hw..][..co * hw];
            let corners = deform_corners(&os[ni * 2 * k * hw..][..2 * k * hw], kh, kw, h, wd);
            let mut col = vec![T::zero(); ci * k * hw];
            deform_im2col(img, ci, h, wd, &corners, m, &mut col);
            let mut dw = vec![T::zero(); co * ci * k];
            T::gemm(false, true, co, hw, ci * k, T::one(), g, &col, T::zero(), &mut dw);
            let mut dcol = col;
            T::gemm(true, false, ci * k, co, hw, T::one(), ws, g, T::zero(), &mut dcol);

            let mut dx = vec![T::zero(); ci * hw];
            let mut doff = vec![T::zero(); 2 * k * hw];
            let mut dmask = vec![T::zero(); k * hw];
            for c in 0..ci {
                let plane = &img[c * hw..(c + 1) * hw];
                let dplane = &mut dx[c * hw..(c + 1) * hw];
                for t in 0..k {
                    let drow = &dcol[(c * k + t) * hw..][..hw];
                    for p in 0..hw {
                        let d = drow[p];
                        if d == T::zero() {
                            continue;
                        }
                        let cor = &corners[t * hw + p];
                        let mk = m[t * hw + p];
                        let (v, vy, vx) = sample_with_grad(plane, h, wd, cor);
                        dmask[t * hw + p] += d * v;
                        doff[2 * t * hw + p] += d * mk * vy;
                        doff[(2 * t + 1) * hw + p] += d * mk * vx;
                        scatter(dplane, h, wd, cor, d * mk);
                    }
                }
            }
            Item { dx, dw, doff, dmask }
        })
        .collect();

    let mut dx = Vec::with_capacity(x.len());
    let mut doff = Vec::with_capacity(offsets.len());
    let mut dmask = Vec::with_capacity(mask.len());
    let mut dw = vec![T::zero(); w.len()];
    for it in items {
        dx.extend(it.dx);
        doff.extend(it.doff);
        dmask.extend(it.dmask);
        for (a, b) in dw.iter_mut().zip(it.dw) {
            *a += b;
        }
    }
    let mut db = vec![T::zero(); co];
    for ni in 0..n {
        for (oc, d) in db.iter_mut().enumerate() {
            *d += gs[(ni * co + oc) * hw..][..hw].iter().copied().sum::<T>();
        }
    }
    (
        Tensor::from_raw(x.shape(), dx),
        Tensor::from_raw(w.shape(), dw),
        Tensor::from_raw([1, co, 1, 1], db),
        Tensor::from_raw(offsets.shape(), doff),
        Tensor::from_raw(mask.shape(), dmask),
    )
}

struct DeformConvOp {
    has_bias: bool,
}

impl<T: Real> Backward<T> for DeformConvOp {
    fn name(&self) -> &'static str {
        "deformable_conv2d"
    }

    fn kinks(&self, inputs: &[&Tensor<T>], out: &mut Vec<i64>) {
        push_cells(inputs[2], out);
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        // inputs: x, w, offsets, mask, [b]
        let (dx, dw, db, doff, dmask) = deformable_conv2d_backward(inputs[0], inputs[1], inputs[2], inputs[3], grad);
        let mut out = vec![Some(dx), Some(dw), Some(doff), Some(dmask)];
        if self.has_bias {
            out.push(Some(db));
        }
        Ok(out)
    }
}

/// Records a modulated deformable convolution.
pub fn deformable_conv2d<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    offsets: Var,
    mask: Var,
) -> Result<Var> {
    let out = deformable_conv2d_forward(
        g.value(x),
        g.value(w),
        b.map(|b| g.value(b)),
        g.value(offsets),
        g.value(mask),
    )?;
    let mut inputs = vec![x, w, offsets, mask];
    inputs.extend(b);
    g.record(&inputs, out, DeformConvOp { has_bias: b.is_some() })
}

// ---------------------------------------------------------------------------
// deformable kernels

/// Kernel-space interpolation anchor: lower index, fraction, and whether
/// the position was clamped to the scope grid.
#[inline]
fn kernel_anchor<T: Real>(pos: T, scope: usize) -> (usize, T, bool) {
    if scope == 1 {
        return (0, T::zero(), true);
    }
    let hi = T::of((scope - 1) as f64);
    let clamped = pos < T::zero() || pos > hi;
    let p = pos.max(T::zero()).min(hi);
    let i0 = (p.floor().f64() as usize).min(scope - 2);
    (i0, p - T::of(i0 as f64), clamped)
}

/// Resamples a `(co, ci, S, S)` scope kernel at the displaced tap
/// positions `k + dk`, producing a `(co, ci, kh, kw)` kernel. `kernel_offset`
/// is `(1, 2K, 1, 1)` ordered like image offsets. Tap `(ky, kx)` sits at
/// scope coordinate `(ky + (S-kh)/2 + dy_k, kx + (S-kw)/2 + dx_k)`, clamped
/// to `[0, S-1]`.
pub fn kernel_resample_forward<T: Real>(scope: &Tensor<T>, kernel_offset: &Tensor<T>, kernel: (usize, usize)) -> Result<Tensor<T>> {
    let [co, ci, sh, sw] = scope.shape();
    let (kh, kw) = kernel;
    let k = kh * kw;
    if sh < kh || sw < kw || (sh - kh) % 2 != 0 || (sw - kw) % 2 != 0 {
        return Err(Error::contract(format!(
            "scope kernel {sh}x{sw} cannot host a centered {kh}x{kw} kernel"
        )));
    }
    if kernel_offset.shape() != [1, 2 * k, 1, 1] {
        return Err(Error::ShapeMismatch {
            op: "deformable_kernel_conv2d kernel_offset",
            left: [1, 2 * k, 1, 1],
            right: kernel_offset.shape(),
        });
    }
    let taps = kernel_taps(kernel_offset, kernel, (sh, sw));
    let ss = scope.as_slice();
    let mut out = Vec::with_capacity(co * ci * k);
    for pair in 0..co * ci {
        let s = &ss[pair * sh * sw..][..sh * sw];
        for t in &taps {
            out.push(t.value(s, sw));
        }
    }
    Ok(Tensor::from_raw([co, ci, kh, kw], out))
}

#[derive(Clone, Copy)]
struct KernelTap<T> {
    y0: usize,
    x0: usize,
    ly: T,
    lx: T,
    clamp_y: bool,
    clamp_x: bool,
    /// scope extent is 1 along that axis
    flat_y: bool,
    flat_x: bool,
}

impl<T: Real> KernelTap<T> {
    fn weights(&self) -> [(usize, usize, T); 4] {
        let one = T::one();
        let (y1, x1) = (self.y0 + usize::from(!self.flat_y), self.x0 + usize::from(!self.flat_x));
        [
            (self.y0, self.x0, (one - self.ly) * (one - self.lx)),
            (self.y0, x1, (one - self.ly) * self.lx),
            (y1, self.x0, self.ly * (one - self.lx)),
            (y1, x1, self.ly * self.lx),
        ]
    }

    fn value(&self, s: &[T], sw: usize) -> T {
        self.weights().iter().fold(T::zero(), |acc, &(y, x, wt)| acc + s[y * sw + x] * wt)
    }
}

fn kernel_taps<T: Real>(kernel_offset: &Tensor<T>, (kh, kw): (usize, usize), (sh, sw): (usize, usize)) -> Vec<KernelTap<T>> {
    let off = kernel_offset.as_slice();
    let (cy, cx) = ((sh - kh) / 2, (sw - kw) / 2);
    let mut taps = Vec::with_capacity(kh * kw);
    for ky in 0..kh {
        for kx in 0..kw {
            let k = ky * kw + kx;
            let (y0, ly, clamp_y) = kernel_anchor(T::of((ky + cy) as f64) + off[2 * k], sh);
            let (x0, lx, clamp_x) = kernel_anchor(T::of((kx + cx) as f64) + off[2 * k + 1], sw);
            taps.push(KernelTap {
                y0,
                x0,
                ly,
                lx,
                clamp_y,
                clamp_x,
                flat_y: sh == 1,
                flat_x: sw == 1,
            });
        }
    }
    taps
}

struct KernelResampleOp {
    kernel: (usize, usize),
}

impl<T: Real> Backward<T> for KernelResampleOp {
    fn name(&self) -> &'static str {
        "kernel_resample"
    }

    fn kinks(&self, inputs: &[&Tensor<T>], out: &mut Vec<i64>) {
        push_cells(inputs[1], out);
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (scope, koff) = (inputs[0], inputs[1]);
        let [co, ci, sh, sw] = scope.shape();
        let taps = kernel_taps(koff, self.kernel, (sh, sw));
        let k = taps.len();
        let (ss, gs) = (scope.as_slice(), grad.as_slice());
        let mut dscope = vec![T::zero(); scope.len()];
        let mut doff = vec![T::zero(); koff.len()];
        let one = T::one();
        for pair in 0..co * ci {
            let s = &ss[pair * sh * sw..][..sh * sw];
            let ds = &mut dscope[pair * sh * sw..][..sh * sw];
            for (t, tap) in taps.iter().enumerate() {
                let g = gs[pair * k + t];
                for (y, x, wt) in tap.weights() {
                    ds[y * sw + x] += g * wt;
                }
                let y1 = tap.y0 + usize::from(!tap.flat_y);
                let x1 = tap.x0 + usize::from(!tap.flat_x);
                let (v00, v01) = (s[tap.y0 * sw + tap.x0], s[tap.y0 * sw + x1]);
                let (v10, v11) = (s[y1 * sw + tap.x0], s[y1 * sw + x1]);
                if !tap.clamp_y {
                    doff[2 * t] += g * ((one - tap.lx) * (v10 - v00) + tap.lx * (v11 - v01));
                }
                if !tap.clamp_x {
                    doff[2 * t + 1] += g * ((one - tap.ly) * (v01 - v00) + tap.ly * (v11 - v10));
                }
            }
        }
        Ok(vec![
            Some(Tensor::from_raw(scope.shape(), dscope)),
            Some(Tensor::from_raw(koff.shape(), doff)),
        ])
    }
}

/// Records the kernel-space resampling `W_{k + dk}` of a scope kernel.
pub fn kernel_resample<T: Real>(g: &mut Graph<T>, scope: Var, kernel_offset: Var, kernel: (usize, usize)) -> Result<Var> {
    let out = kernel_resample_forward(g.value(scope), g.value(kernel_offset), kernel)?;
    g.record(&[scope, kernel_offset], out, KernelResampleOp { kernel })
}

/// Deformable-kernel convolution: each tap weight is bilinearly resampled
/// from the scope kernel in kernel space, then applied as an ordinary
/// same-size convolution.
pub fn deformable_kernel_conv2d<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    scope: Var,
    kernel_offset: Var,
    b: Option<Var>,
    kernel: (usize, usize),
) -> Result<Var> {
    let w = kernel_resample(g, scope, kernel_offset, kernel)?;
    nn_ops::conv2d(g, x, w, b)
}

/// Raw-tensor form of [`deformable_kernel_conv2d`].
pub fn deformable_kernel_conv2d_forward<T: Real>(
    x: &Tensor<T>,
    scope: &Tensor<T>,
    kernel_offset: &Tensor<T>,
    b: Option<&Tensor<T>>,
    kernel: (usize, usize),
) -> Result<Tensor<T>> {
    let w = kernel_resample_forward(scope, kernel_offset, kernel)?;
    nn_ops::conv2d_forward(x, &w, b)
}

// ---------------------------------------------------------------------------
// offset / modulation prediction

/// Stack of deformable-kernel layers followed by a plain head emitting
/// `3K` channels: `2K` offsets and `K` modulation logits.
#[derive(Clone, Debug)]
pub struct OffsetPredictor {
    pub layers: Vec<DkConv>,
    pub head: Conv,
    pub taps: usize,
}

impl OffsetPredictor {
    /// `depth` DK layers on `channels` features predicting fields for a
    /// `kernel x kernel` deformable convolution. The head starts at zero.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        depth: usize,
        scope: usize,
        kernel: usize,
        rng: &mut crate::tensor::Rng,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| DkConv::new(store, &format!("{prefix}.dk{i}"), channels, channels, 3, scope, rng))
            .collect::<Result<Vec<_>>>()?;
        let taps = kernel * kernel;
        let head = Conv::zeroed(store, &format!("{prefix}.head"), channels, 3 * taps, 3)?;
        Ok(Self { layers, head, taps })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, fused: Var) -> Result<(Var, Var)> {
        predict_offsets(g, store, fused, self)
    }
}

/// Runs the predictor on fused features and splits the head output into
/// `(offsets, sigmoid(mask logits))`.
pub fn predict_offsets<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    fused: Var,
    predictor: &OffsetPredictor,
) -> Result<(Var, Var)> {
    let mut h = fused;
    for layer in &predictor.layers {
        h = layer.forward(g, store, h)?;
        h = nn_ops::leaky_relu(g, h, LEAKY_SLOPE)?;
    }
    let out = predictor.head.forward(g, store, h)?;
    let k = predictor.taps;
    let offsets = nn_ops::narrow_channels(g, out, 0, 2 * k)?;
    let logits = nn_ops::narrow_channels(g, out, 2 * k, k)?;
    let mask = nn_ops::sigmoid(g, logits)?;
    Ok((offsets, mask))
}

/// Offset shape for a `kernel` deformable conv over `x_shape`.
pub fn offset_shape(x_shape: Shape, kernel: (usize, usize)) -> Shape {
    let [n, _, h, w] = x_shape;
    [n, 2 * kernel.0 * kernel.1, h, w]
}
