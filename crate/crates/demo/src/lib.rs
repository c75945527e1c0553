//! Browser bindings: warp an image along an offset field, bicubic
//! upscaling, and deformable-kernel tap resampling.
//!
//! Images cross the boundary as RGBA bytes, row-major, the layout of
//! `ImageData`. Alpha is ignored on input and written as 255.

use dksan::deform_ops::{kernel_resample_forward, warp_forward};
use dksan::nn_ops::bicubic_upscale;
use dksan::Tensor;
use wasm_bindgen::prelude::*;

/// Side of the scope kernel the 3x3 taps are drawn from.
pub const SCOPE: usize = 5;

fn to_tensor(rgba: &[u8], width: usize, height: usize) -> Result<Tensor<f32>, String> {
    if rgba.len() != width * height * 4 {
        return Err(format!("expected {} RGBA bytes for {width}x{height}, got {}", width * height * 4, rgba.len()));
    }
    Ok(Tensor::from_fn([1, 3, height, width], |_, c, y, x| rgba[(y * width + x) * 4 + c] as f32 / 255.0))
}

fn to_rgba(t: &Tensor<f32>) -> Vec<u8> {
    let [_, _, h, w] = t.shape();
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((t.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
    }
    out
}

/// Per-pixel sampling offsets `(dy, dx)`, shape `(1, 2, h, w)`.
///
/// `swirl` rotates around the center by up to `strength` pixels of arc,
/// `wave` shifts rows sideways, `shift` moves everything by
/// `(strength, strength)`.
pub fn offset_field(mode: &str, width: usize, height: usize, strength: f32) -> Result<Tensor<f32>, String> {
    let (cy, cx) = ((height as f32 - 1.0) / 2.0, (width as f32 - 1.0) / 2.0);
    let radius = cy.max(cx).max(1.0);
    let f: Box<dyn Fn(f32, f32) -> (f32, f32)> = match mode {
        "swirl" => Box::new(move |y, x| {
            let (ry, rx) = (y - cy, x - cx);
            let r = (ry * ry + rx * rx).sqrt() / radius;
            let a = strength / radius * (1.0 - r).max(0.0);
            let (s, c) = a.sin_cos();
            (rx * s + ry * c - ry, rx * c - ry * s - rx)
        }),
        "wave" => Box::new(move |y, _| (0.0, strength * (y / 6.0).sin())),
        "shift" => Box::new(move |_, _| (strength, strength)),
        _ => return Err(format!("unknown offset mode {mode:?} (swirl, wave, shift)")),
    };
    let mut data = vec![0.0; 2 * width * height];
    for y in 0..height {
        for x in 0..width {
            let (dy, dx) = f(y as f32, x as f32);
            data[y * width + x] = dy;
            data[width * height + y * width + x] = dx;
        }
    }
    Tensor::from_vec([1, 2, height, width], data).map_err(|e| e.to_string())
}

/// Bilinearly resamples the image at `p + offset(p)`; positions outside
/// the frame read black.
pub fn warp_rgba(rgba: &[u8], width: usize, height: usize, mode: &str, strength: f32) -> Result<Vec<u8>, String> {
    let img = to_tensor(rgba, width, height)?;
    let flow = offset_field(mode, width, height, strength)?;
    Ok(to_rgba(&warp_forward(&img, &flow).map_err(|e| e.to_string())?))
}

pub fn upscale_rgba(rgba: &[u8], width: usize, height: usize, factor: usize) -> Result<Vec<u8>, String> {
    if !(1..=8).contains(&factor) {
        return Err(format!("factor must be 1 to 8, got {factor}"));
    }
    let img = to_tensor(rgba, width, height)?;
    Ok(to_rgba(&bicubic_upscale(&img, factor).map_err(|e| e.to_string())?))
}

/// The fixed 5x5 scope kernel of the demo: a diagonal ramp, so every tap
/// position maps to a distinct weight.
pub fn demo_scope() -> Tensor<f32> {
    Tensor::from_fn([1, 1, SCOPE, SCOPE], |_, _, y, x| (y * SCOPE + x) as f32 / (SCOPE * SCOPE - 1) as f32)
}

/// Nine 3x3 taps resampled from [`demo_scope`] after moving every tap by
/// `(dy, dx)` and spreading the taps by `dilation` around the center.
///
/// Returns `[y, x, weight]` per tap: scope-grid coordinates before
/// clamping, then the interpolated weight.
pub fn kernel_taps(dy: f32, dx: f32, dilation: f32) -> Result<Vec<f32>, String> {
    let mut offsets = Vec::with_capacity(18);
    let mut positions = Vec::with_capacity(18);
    let center = (SCOPE / 2) as f32;
    for ky in -1i32..=1 {
        for kx in -1i32..=1 {
            let (oy, ox) = (dy + (dilation - 1.0) * ky as f32, dx + (dilation - 1.0) * kx as f32);
            offsets.extend([oy, ox]);
            positions.push((center + ky as f32 + oy, center + kx as f32 + ox));
        }
    }
    let off = Tensor::from_vec([1, 18, 1, 1], offsets).map_err(|e| e.to_string())?;
    let k = kernel_resample_forward(&demo_scope(), &off, (3, 3)).map_err(|e| e.to_string())?;
    Ok(positions
        .iter()
        .zip(k.as_slice())
        .flat_map(|(&(y, x), &w)| [y, x, w])
        .collect())
}

#[wasm_bindgen]
pub fn warp(rgba: &[u8], width: usize, height: usize, mode: &str, strength: f32) -> Result<Vec<u8>, JsError> {
    warp_rgba(rgba, width, height, mode, strength).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn upscale(rgba: &[u8], width: usize, height: usize, factor: usize) -> Result<Vec<u8>, JsError> {
    upscale_rgba(rgba, width, height, factor).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn resample_kernel(dy: f32, dx: f32, dilation: f32) -> Result<Vec<f32>, JsError> {
    kernel_taps(dy, dx, dilation).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn scope_kernel() -> Vec<f32> {
    demo_scope().as_slice().to_vec()
}
