//! Charbonnier loss and PSNR.

use crate::autodiff::{Backward, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CHARBONNIER_XI: f64 = 1e-3;

/// Reported PSNR when the images are identical.
pub const PSNR_CAP: f64 = 99.0;

/// A scalar loss and the number of elements it was averaged over.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub count: usize,
}

fn check_same<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Mean of `sqrt(d^2 + xi^2)` over every element.
pub fn charbonnier_value<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, xi: f64) -> Result<LossValue> {
    check_same("charbonnier", pred, target)?;
    let xi2 = xi * xi;
    let total: f64 = pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(&p, &t)| {
            let d = p.f64() - t.f64();
            (d * d + xi2).sqrt()
        })
        .sum();
    Ok(LossValue {
        loss: total / pred.len() as f64,
        count: pred.len(),
    })
}

struct CharbonnierOp(f64);

impl<T: Real> Backward<T> for CharbonnierOp {
    fn name(&self) -> &'static str {
        "charbonnier"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, wants: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (p, t) = (inputs[0], inputs[1]);
        let scale = grad.as_slice()[0].f64() / p.len() as f64;
        let xi2 = self.0 * self.0;
        let dp = p.zip_map(t, "charbonnier", |a, b| {
            let d = a.f64() - b.f64();
            T::of(scale * d / (d * d + xi2).sqrt())
        })?;
        let dt = wants[1].then(|| dp.map(|v| -v));
        Ok(vec![wants[0].then_some(dp), dt])
    }
}

/// Graph op: scalar Charbonnier loss of `pred` against `target`.
pub fn charbonnier<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, xi: f64) -> Result<Var> {
    let v = charbonnier_value(g.value(pred), g.value(target), xi)?;
    g.record(&[pred, target], Tensor::scalar(T::of(v.loss)), CharbonnierOp(xi))
}

/// Which signal PSNR is measured on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PsnrMode {
    /// Mean squared error over every channel.
    #[default]
    Rgb,
    /// BT.601 luma `0.299 R + 0.587 G + 0.114 B`.
    Luma,
}

impl std::str::FromStr for PsnrMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Self::Rgb),
            "luma" | "y" => Ok(Self::Luma),
            _ => Err(Error::contract(format!("unknown PSNR mode {s:?} (rgb or luma)"))),
        }
    }
}

pub fn mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, mode: PsnrMode) -> Result<f64> {
    check_same("psnr", pred, target)?;
    match mode {
        PsnrMode::Rgb => {
            let s: f64 = pred
                .as_slice()
                .iter()
                .zip(target.as_slice())
                .map(|(&p, &t)| (p.f64() - t.f64()).powi(2))
                .sum();
            Ok(s / pred.len() as f64)
        }
        PsnrMode::Luma => {
            let [n, c, h, w] = pred.shape();
            if c != 3 {
                return Err(Error::contract(format!("luma PSNR needs 3 channels, got {c}")));
            }
            let coef = [0.299, 0.587, 0.114];
            let mut s = 0.0;
            for b in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let d: f64 = (0..3).map(|ch| coef[ch] * (pred.at(b, ch, y, x).f64() - target.at(b, ch, y, x).f64())).sum();
                        s += d * d;
                    }
                }
            }
            Ok(s / (n * h * w) as f64)
        }
    }
}

/// `10 log10(peak^2 / MSE)`; infinite when the MSE is zero.
pub fn psnr_raw<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, peak: f64, mode: PsnrMode) -> Result<f64> {
    let m = mse(pred, target, mode)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / m).log10() })
}

/// PSNR in dB with the 99 dB cap applied.
pub fn psnr<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    psnr_with(pred, target, 1.0, PsnrMode::Rgb)
}

pub fn psnr_with<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, peak: f64, mode: PsnrMode) -> Result<f64> {
    Ok(psnr_raw(pred, target, peak, mode)?.min(PSNR_CAP))
}
