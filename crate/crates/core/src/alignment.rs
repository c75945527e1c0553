//! Temporal alignment of neighbor-frame features to the reference frame
//! (DKC_Align) and the 1x1 fusion of the aligned set.

use crate::autodiff::{Graph, ParamStore, Var};
use crate::deform_ops::OffsetPredictor;
use crate::error::{Error, Result};
use crate::layers::{Conv, DeformConv};
use crate::nn_ops::{self, LEAKY_SLOPE};
use crate::tensor::{Real, Rng};

/// Fuse `[f_n, f_r]` with a 1x1 conv, predict offsets and masks through
/// deformable-kernel layers, then deformably convolve `f_n`.
#[derive(Clone, Debug)]
pub struct DkcAlign {
    pub fuse: Conv,
    pub predictor: OffsetPredictor,
    pub deform: DeformConv,
}

impl DkcAlign {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        predictor_depth: usize,
        scope: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fuse = Conv::new(store, &format!("{prefix}.fuse"), 2 * channels, channels, 1, rng)?;
        let predictor = OffsetPredictor::new(store, &format!("{prefix}.predictor"), channels, predictor_depth, scope, 3, rng)?;
        let deform = DeformConv::new(store, &format!("{prefix}.deform"), channels, channels, 3, rng)?;
        Ok(Self { fuse, predictor, deform })
    }

    /// Aligned neighbor feature plus the predicted `(offsets, mask)`.
    pub fn forward_with_fields<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f_n: Var,
        f_r: Var,
    ) -> Result<(Var, Var, Var)> {
        if g.shape(f_n) != g.shape(f_r) {
            return Err(Error::ShapeMismatch {
                op: "dkc_align",
                left: g.shape(f_n),
                right: g.shape(f_r),
            });
        }
        let cat = nn_ops::concat_channels(g, &[f_n, f_r])?;
        let fused = self.fuse.forward(g, store, cat)?;
        let fused = nn_ops::leaky_relu(g, fused, LEAKY_SLOPE)?;
        let (offsets, mask) = self.predictor.forward(g, store, fused)?;
        let aligned = self.deform.forward(g, store, f_n, offsets, mask)?;
        Ok((aligned, offsets, mask))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f_n: Var, f_r: Var) -> Result<Var> {
        Ok(self.forward_with_fields(g, store, f_n, f_r)?.0)
    }
}

/// Aligns every neighbor to the reference (when alignment is enabled),
/// concatenates all `2N+1` features in temporal order with the reference
/// passed through unaligned, and fuses back to `C` channels.
#[derive(Clone, Debug)]
pub struct AlignFuse {
    pub frames: usize,
    pub align: Option<DkcAlign>,
    pub fusion: Conv,
}

impl AlignFuse {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        frames: usize,
        use_align: bool,
        predictor_depth: usize,
        scope: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if frames.is_multiple_of(2) {
            return Err(Error::contract(format!("frame count {frames} must be odd (2N+1)")));
        }
        let align = (use_align && frames > 1)
            .then(|| DkcAlign::new(store, &format!("{prefix}.dkc_align"), channels, predictor_depth, scope, rng))
            .transpose()?;
        let fusion = Conv::new(store, &format!("{prefix}.fusion"), frames * channels, channels, 1, rng)?;
        Ok(Self { frames, align, fusion })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: &[Var], ref_index: usize) -> Result<Var> {
        if features.len() != self.frames || ref_index >= features.len() {
            return Err(Error::contract(format!(
                "align_and_fuse expects {} features with a valid reference index, got {} (ref {ref_index})",
                self.frames,
                features.len()
            )));
        }
        let f_r = features[ref_index];
        let mut aligned = Vec::with_capacity(features.len());
        for (i, &f) in features.iter().enumerate() {
            aligned.push(match (&self.align, i == ref_index) {
                (Some(a), false) => a.forward(g, store, f, f_r)?,
                _ => f,
            });
        }
        let cat = if aligned.len() == 1 {
            aligned[0]
        } else {
            nn_ops::concat_channels(g, &aligned)?
        };
        self.fusion.forward(g, store, cat)
    }
}
