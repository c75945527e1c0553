//! Residual block, residual channel-attention block (RCAB) and the
//! deformable-kernel spatial attention (DKSA) gate in full and light form.

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::layers::{Conv, DkConv};
use crate::nn_ops::{self, LEAKY_SLOPE};
use crate::tensor::{Real, Rng};

/// `x + conv2(lrelu(conv1(x)))`, no normalization.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            conv1: Conv::new(store, &format!("{prefix}.conv1"), channels, channels, 3, rng)?,
            conv2: Conv::new(store, &format!("{prefix}.conv2"), channels, channels, 3, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, store, x)?;
        let h = nn_ops::leaky_relu(g, h, LEAKY_SLOPE)?;
        let h = self.conv2.forward(g, store, h)?;
        nn_ops::add(g, x, h)
    }

    /// Layer whose zeroing turns the block into the identity.
    pub fn last_layer(&self) -> &Conv {
        &self.conv2
    }
}

/// Squeeze-and-excite gate: pool, 1x1 down, lrelu, 1x1 up, sigmoid.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub down: Conv,
    pub up: Conv,
}

impl ChannelAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize, reduction: usize, rng: &mut Rng) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::contract(format!(
                "channel attention: {channels} channels not divisible by reduction {reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            down: Conv::new(store, &format!("{prefix}.conv_down"), channels, hidden, 1, rng)?,
            up: Conv::new(store, &format!("{prefix}.conv_up"), hidden, channels, 1, rng)?,
        })
    }

    /// Per-channel gate `(n, c, 1, 1)` in (0, 1).
    pub fn gate<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let p = nn_ops::global_avg_pool(g, x)?;
        let h = self.down.forward(g, store, p)?;
        let h = nn_ops::leaky_relu(g, h, LEAKY_SLOPE)?;
        let h = self.up.forward(g, store, h)?;
        nn_ops::sigmoid(g, h)
    }
}

/// Reduction ratio for a channel count: 16, capped at the channel count.
pub fn reduction_for(channels: usize) -> usize {
    16.min(channels)
}

/// Residual channel-attention block. Without attention it is a plain
/// residual block.
#[derive(Clone, Debug)]
pub struct Rcab {
    pub conv1: Conv,
    pub conv2: Conv,
    pub attention: Option<ChannelAttention>,
}

impl Rcab {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        with_attention: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let conv1 = Conv::new(store, &format!("{prefix}.conv1"), channels, channels, 3, rng)?;
        let conv2 = Conv::new(store, &format!("{prefix}.conv2"), channels, channels, 3, rng)?;
        let attention = with_attention
            .then(|| ChannelAttention::new(store, &format!("{prefix}.ca"), channels, reduction_for(channels), rng))
            .transpose()?;
        Ok(Self { conv1, conv2, attention })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, store, x)?;
        let h = nn_ops::leaky_relu(g, h, LEAKY_SLOPE)?;
        let mut body = self.conv2.forward(g, store, h)?;
        if let Some(ca) = &self.attention {
            let a = ca.gate(g, store, body)?;
            body = nn_ops::gate(g, body, a)?;
        }
        nn_ops::add(g, x, body)
    }
}

/// Spatial attention through deformable-kernel layers; output is `x ⊙ A`
/// with `A = sigmoid(...)`.
///
/// Full: `conv -> lrelu -> DKC -> lrelu -> DKC -> sigmoid`.
/// Light: `DKC -> sigmoid`.
#[derive(Clone, Debug)]
pub struct Dksa {
    pub pre: Option<Conv>,
    pub layers: Vec<DkConv>,
}

impl Dksa {
    pub fn full<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        scope: usize,
        single_map: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let out = if single_map { 1 } else { channels };
        Ok(Self {
            pre: Some(Conv::new(store, &format!("{prefix}.conv"), channels, channels, 3, rng)?),
            layers: vec![
                DkConv::new(store, &format!("{prefix}.dk0"), channels, channels, 3, scope, rng)?,
                DkConv::new(store, &format!("{prefix}.dk1"), channels, out, 3, scope, rng)?,
            ],
        })
    }

    pub fn light<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        scope: usize,
        single_map: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let out = if single_map { 1 } else { channels };
        Ok(Self {
            pre: None,
            layers: vec![DkConv::new(store, &format!("{prefix}.dk0"), channels, out, 3, scope, rng)?],
        })
    }

    /// Attention map `A`, either `(n, C, h, w)` or `(n, 1, h, w)`.
    pub fn attention<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        if let Some(pre) = &self.pre {
            h = pre.forward(g, store, h)?;
            h = nn_ops::leaky_relu(g, h, LEAKY_SLOPE)?;
        }
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i < last {
                h = nn_ops::leaky_relu(g, h, LEAKY_SLOPE)?;
            }
        }
        nn_ops::sigmoid(g, h)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = self.attention(g, store, x)?;
        nn_ops::gate(g, x, a)
    }

    /// Final layer feeding the sigmoid.
    pub fn last_layer(&self) -> &DkConv {
        self.layers.last().expect("dksa has at least one layer")
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.pre.iter().flat_map(|c| c.params()).collect();
        ids.extend(self.layers.iter().flat_map(|l| l.params()));
        ids
    }
}
