//! The cascaded network: shared feature extraction, alignment and fusion,
//! then `L` levels of reconstruction + 2x upscaling, each added to a
//! bicubic 2x of the previous estimate.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::alignment::AlignFuse;
use crate::autodiff::{Graph, ParamStore, Var};
use crate::blocks::{Dksa, Rcab, ResBlock};
use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::nn_ops::{self, LEAKY_SLOPE};
use crate::tensor::{Real, Rng, Tensor};

/// Architecture knobs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub channels: usize,
    /// `2N + 1` input frames.
    pub frames: usize,
    /// Cascade depth; the scale factor is `2^levels`.
    pub levels: usize,
    pub rcab_counts: Vec<usize>,
    pub feat_resblocks: usize,
    /// Residual blocks in the per-level extractors of levels 2 and up.
    pub level_resblocks: usize,
    pub use_align: bool,
    pub use_dksa: bool,
    pub use_channel_attention: bool,
    pub dksa_single_map: bool,
    pub dk_scope: usize,
    pub dk_predictor_depth: usize,
}

/// Ablation variants, from plain residual backbone to the full network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    Backbone,
    ChannelAttention,
    Align,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Backbone, Ablation::ChannelAttention, Ablation::Align, Ablation::Full];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Backbone => "backbone",
            Ablation::ChannelAttention => "w/o-align-dksa",
            Ablation::Align => "w/o-dksa",
            Ablation::Full => "full",
        }
    }

    pub fn apply(self, cfg: &NetworkConfig) -> NetworkConfig {
        let mut c = cfg.clone();
        c.use_channel_attention = self != Ablation::Backbone;
        c.use_align = matches!(self, Ablation::Align | Ablation::Full);
        c.use_dksa = self == Ablation::Full;
        c
    }
}

impl NetworkConfig {
    /// Small configuration for tests and CPU training: 16 channels,
    /// 3 frames, 2 levels (x4).
    pub fn desk() -> Self {
        Self {
            channels: 16,
            frames: 3,
            levels: 2,
            rcab_counts: vec![4, 3],
            feat_resblocks: 2,
            level_resblocks: 2,
            use_align: true,
            use_dksa: true,
            use_channel_attention: true,
            dksa_single_map: false,
            dk_scope: 5,
            dk_predictor_depth: 2,
        }
    }

    /// Full-size configuration: 128 channels, 7 frames, 4 levels (x16).
    pub fn paper() -> Self {
        Self {
            channels: 128,
            frames: 7,
            levels: 4,
            rcab_counts: vec![30, 20, 15, 10],
            feat_resblocks: 5,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::contract(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }

    pub fn scale(&self) -> usize {
        1 << self.levels
    }

    pub fn ref_index(&self) -> usize {
        self.frames / 2
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::contract(m));
        if self.levels == 0 || self.levels > 6 {
            return fail(format!("levels must be in 1..=6, got {}", self.levels));
        }
        if self.rcab_counts.len() != self.levels {
            return fail(format!(
                "rcab_counts has {} entries for {} levels",
                self.rcab_counts.len(),
                self.levels
            ));
        }
        if self.channels == 0 {
            return fail("channels must be positive".into());
        }
        if self.frames.is_multiple_of(2) {
            return fail(format!("frames must be odd (2N+1), got {}", self.frames));
        }
        if self.dk_scope < 3 || self.dk_scope.is_multiple_of(2) {
            return fail(format!("dk_scope must be odd and >= 3, got {}", self.dk_scope));
        }
        if self.use_channel_attention && !self.channels.is_multiple_of(crate::blocks::reduction_for(self.channels)) {
            return fail(format!("channels {} incompatible with channel attention", self.channels));
        }
        Ok(())
    }

    /// Ordered `key=value` pairs; the canonical text form.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let counts = self.rcab_counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("channels", self.channels.to_string()),
            ("frames", self.frames.to_string()),
            ("levels", self.levels.to_string()),
            ("rcab_counts", counts),
            ("feat_resblocks", self.feat_resblocks.to_string()),
            ("level_resblocks", self.level_resblocks.to_string()),
            ("use_align", self.use_align.to_string()),
            ("use_dksa", self.use_dksa.to_string()),
            ("use_channel_attention", self.use_channel_attention.to_string()),
            ("dksa_single_map", self.dksa_single_map.to_string()),
            ("dk_scope", self.dk_scope.to_string()),
            ("dk_predictor_depth", self.dk_predictor_depth.to_string()),
        ]
    }

    pub const KEYS: [&'static str; 12] = [
        "channels",
        "frames",
        "levels",
        "rcab_counts",
        "feat_resblocks",
        "level_resblocks",
        "use_align",
        "use_dksa",
        "use_channel_attention",
        "dksa_single_map",
        "dk_scope",
        "dk_predictor_depth",
    ];

    /// Applies one `key=value` setting. Returns `Ok(false)` for keys this
    /// config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num(key: &str, v: &str) -> Result<usize> {
            v.trim()
                .parse()
                .map_err(|_| Error::contract(format!("{key}: expected a non-negative integer, got {v:?}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v.trim() {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::contract(format!("{key}: expected a boolean, got {v:?}"))),
            }
        }
        match key {
            "channels" => self.channels = num(key, value)?,
            "frames" => self.frames = num(key, value)?,
            "levels" => self.levels = num(key, value)?,
            "rcab_counts" => {
                self.rcab_counts = value
                    .split(',')
                    .map(|v| num(key, v))
                    .collect::<Result<Vec<_>>>()?
            }
            "feat_resblocks" => self.feat_resblocks = num(key, value)?,
            "level_resblocks" => self.level_resblocks = num(key, value)?,
            "use_align" => self.use_align = flag(key, value)?,
            "use_dksa" => self.use_dksa = flag(key, value)?,
            "use_channel_attention" => self.use_channel_attention = flag(key, value)?,
            "dksa_single_map" => self.dksa_single_map = flag(key, value)?,
            "dk_scope" => self.dk_scope = num(key, value)?,
            "dk_predictor_depth" => self.dk_predictor_depth = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::contract(format!("config line without '=': {line:?}")))?;
            if !cfg.set(k.trim(), v)? {
                return Err(Error::contract(format!("unknown network key {k:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for NetworkConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_pairs() {
            writeln!(f, "{k:<22} {v}")?;
        }
        Ok(())
    }
}

/// First conv from RGB to `C` channels, lrelu, then residual blocks.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub first: Conv,
    pub blocks: Vec<ResBlock>,
}

impl FeatureExtractor {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize, blocks: usize, rng: &mut Rng) -> Result<Self> {
        let first = Conv::new(store, &format!("{prefix}.conv_first"), 3, channels, 3, rng)?;
        let blocks = (0..blocks)
            .map(|i| ResBlock::new(store, &format!("{prefix}.res.{i:02}"), channels, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { first, blocks })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.first.forward(g, store, x)?;
        let mut h = nn_ops::leaky_relu(g, h, LEAKY_SLOPE)?;
        for b in &self.blocks {
            h = b.forward(g, store, h)?;
        }
        Ok(h)
    }
}

/// RCAB stack, optional DKSA gate, and a residual connection around both.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub blocks: Vec<Rcab>,
    pub dksa: Option<Dksa>,
}

impl Reconstruction {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var) -> Result<Var> {
        let mut h = f;
        for b in &self.blocks {
            h = b.forward(g, store, h)?;
        }
        if let Some(d) = &self.dksa {
            h = d.forward(g, store, h)?;
        }
        nn_ops::add(g, h, f)
    }
}

/// `conv(C->4C) -> shuffle(2) -> lrelu -> conv -> lrelu -> conv(C->3)`.
#[derive(Clone, Debug)]
pub struct Upscale {
    pub expand: Conv,
    pub mid: Conv,
    pub out: Conv,
}

impl Upscale {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            expand: Conv::new(store, &format!("{prefix}.expand"), channels, 4 * channels, 3, rng)?,
            mid: Conv::new(store, &format!("{prefix}.mid"), channels, channels, 3, rng)?,
            out: Conv::new(store, &format!("{prefix}.out"), channels, 3, 3, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var) -> Result<Var> {
        let h = self.expand.forward(g, store, f)?;
        let h = nn_ops::pixel_shuffle(g, h, 2)?;
        let h = nn_ops::leaky_relu(g, h, LEAKY_SLOPE)?;
        let h = self.mid.forward(g, store, h)?;
        let h = nn_ops::leaky_relu(g, h, LEAKY_SLOPE)?;
        self.out.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct Level {
    /// Preliminary extractor `E_l`; absent at level 1, which consumes the
    /// fused multi-frame features.
    pub extractor: Option<FeatureExtractor>,
    pub recon: Reconstruction,
    pub upscale: Upscale,
}

#[derive(Clone, Debug)]
pub struct Dksan {
    pub cfg: NetworkConfig,
    pub features: FeatureExtractor,
    pub fusion: AlignFuse,
    pub levels: Vec<Level>,
}

/// Initial scale applied to the last layer of every residual branch.
const RESIDUAL_INIT_SCALE: f64 = 0.1;

impl Dksan {
    /// Builds the network and its freshly initialized parameters.
    pub fn new<T: Real>(cfg: &NetworkConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let c = cfg.channels;
        let features = FeatureExtractor::new(&mut store, "feat", c, cfg.feat_resblocks, &mut rng)?;
        let fusion = AlignFuse::new(
            &mut store,
            "level1",
            c,
            cfg.frames,
            cfg.use_align,
            cfg.dk_predictor_depth,
            cfg.dk_scope,
            &mut rng,
        )?;
        let mut levels = Vec::with_capacity(cfg.levels);
        for (li, &count) in cfg.rcab_counts.iter().enumerate() {
            let l = li + 1;
            let extractor = (l > 1)
                .then(|| FeatureExtractor::new(&mut store, &format!("level{l}.extract"), c, cfg.level_resblocks, &mut rng))
                .transpose()?;
            let blocks = (0..count)
                .map(|i| Rcab::new(&mut store, &format!("level{l}.rcab.{i:02}"), c, cfg.use_channel_attention, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let dksa = if !cfg.use_dksa {
                None
            } else if l == 1 {
                Some(Dksa::light(&mut store, &format!("level{l}.dksa"), c, cfg.dk_scope, cfg.dksa_single_map, &mut rng)?)
            } else {
                Some(Dksa::full(&mut store, &format!("level{l}.dksa"), c, cfg.dk_scope, cfg.dksa_single_map, &mut rng)?)
            };
            let upscale = Upscale::new(&mut store, &format!("level{l}.upscale"), c, &mut rng)?;
            levels.push(Level {
                extractor,
                recon: Reconstruction { blocks, dksa },
                upscale,
            });
        }
        let residual_tails: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.name.ends_with("conv2.weight") || p.name.ends_with("upscale.out.weight"))
            .map(|(id, _)| id)
            .collect();
        for id in residual_tails {
            let v = store.value(id).scale(T::of(RESIDUAL_INIT_SCALE))?;
            store.set_value(id, v)?;
        }
        Ok((
            Self {
                cfg: cfg.clone(),
                features,
                fusion,
                levels,
            },
            store,
        ))
    }

    /// Per-frame features from frames packed as `(n, F*3, h, w)`. All
    /// frames share the extractor weights. Returns one `(n, C, h, w)` var
    /// per frame in temporal order.
    pub fn extract_features<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, frames: Var) -> Result<Vec<Var>> {
        let [n, fc, h, w] = g.shape(frames);
        let nf = self.cfg.frames;
        if fc != 3 * nf {
            return Err(Error::contract(format!(
                "expected {} packed frame channels ({} frames), got {fc}",
                3 * nf,
                nf
            )));
        }
        let c = self.cfg.channels;
        let batched = nn_ops::reshape(g, frames, [n * nf, 3, h, w])?;
        let feats = self.features.forward(g, store, batched)?;
        let packed = nn_ops::reshape(g, feats, [n, nf * c, h, w])?;
        (0..nf).map(|t| nn_ops::narrow_channels(g, packed, t * c, c)).collect()
    }

    pub fn reconstruct_level<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var, level: usize) -> Result<Var> {
        let lv = self
            .levels
            .get(level.wrapping_sub(1))
            .ok_or_else(|| Error::contract(format!("level {level} outside 1..={}", self.levels.len())))?;
        lv.recon.forward(g, store, f)
    }

    /// Training-mode forward (no output clamp). `frames` is
    /// `(n, F*3, h, w)`; returns `(n, 3, s*h, s*w)` with `s = 2^levels`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, frames: Var) -> Result<Var> {
        Ok(*self.forward_levels(g, store, frames)?.last().expect("at least one level"))
    }

    /// Output of every cascade level.
    pub fn forward_levels<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, frames: Var) -> Result<Vec<Var>> {
        let r = self.cfg.ref_index();
        let reference = nn_ops::narrow_channels(g, frames, 3 * r, 3)?;
        let feats = self.extract_features(g, store, frames)?;
        let fused = self.fusion.forward(g, store, &feats, r)?;

        let mut outputs = Vec::with_capacity(self.levels.len());
        let mut prev = reference;
        for (i, lv) in self.levels.iter().enumerate() {
            let f = match &lv.extractor {
                Some(e) => e.forward(g, store, prev)?,
                None => {
                    debug_assert_eq!(i, 0);
                    fused
                }
            };
            let rec = lv.recon.forward(g, store, f)?;
            let up = lv.upscale.forward(g, store, rec)?;
            let skip = nn_ops::bicubic_resize(g, prev, 2)?;
            prev = nn_ops::add(g, up, skip)?;
            outputs.push(prev);
        }
        Ok(outputs)
    }

    /// Inference forward with output clamped to `[0, 1]`.
    pub fn infer<T: Real>(&self, store: &ParamStore<T>, frames: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(frames.clone());
        let y = self.forward(&mut g, store, x)?;
        Ok(g.value(y).map(|v| v.max(T::zero()).min(T::one())))
    }
}

/// Packs `2N+1` frames `(n, 3, h, w)` into `(n, F*3, h, w)`.
pub fn pack_frames<T: Real>(frames: &[Tensor<T>]) -> Result<Tensor<T>> {
    let refs: Vec<&Tensor<T>> = frames.iter().collect();
    Tensor::concat_channels(&refs)
}

// ---------------------------------------------------------------------------
// checkpoints

const MAGIC: &[u8; 4] = b"DKSN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized network: config plus ordered named f32 tensors.
///
/// Layout (all integers little-endian):
/// `"DKSN"`, `u32 version`, `u32 config_len`, config text (`key=value\n`),
/// `u32 record_count`, then per record `u16 name_len`, name bytes,
/// `4 x u32` dims, `f32` values; finally a `u32` CRC-32 (IEEE) of every
/// preceding byte.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub records: Vec<(String, Tensor<f32>)>,
}

pub(crate) struct ByteReader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn tensor(&mut self) -> Result<Tensor<f32>> {
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = self.u32()? as usize;
        }
        let n: usize = shape.iter().product();
        let at = self.pos;
        let bytes = self.take(n.checked_mul(4).ok_or(Error::Resource(n))?)?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        Tensor::from_vec(shape, data).map_err(|e| Error::Parse {
            offset: at,
            msg: e.to_string(),
        })
    }
}

pub(crate) fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

/// Appends the CRC-32 of `out` to itself.
pub(crate) fn seal(mut out: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Verifies and strips the CRC trailer.
pub(crate) fn unseal(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 4 {
        return Err(Error::Checkpoint("file shorter than its CRC trailer".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    Ok(body)
}

impl Checkpoint {
    pub fn from_store(config: &NetworkConfig, store: &ParamStore<f32>) -> Self {
        Self {
            config: config.clone(),
            records: store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            put_name(&mut out, name);
            put_tensor(&mut out, t);
        }
        seal(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = unseal(bytes)?;
        let mut r = ByteReader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a DKSN checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Checkpoint(format!("config text: {e}")))?;
        let config = NetworkConfig::from_text(text)?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|e| Error::Checkpoint(format!("record name: {e}")))?
                .to_string();
            records.push((name, r.tensor()?));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { config, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the network and fills its parameters from the records.
    /// Every parameter must be present exactly once with a matching shape.
    pub fn restore(&self) -> Result<(Dksan, ParamStore<f32>)> {
        let (net, mut store) = Dksan::new::<f32>(&self.config, 0)?;
        if self.records.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "{} records for {} parameters",
                self.records.len(),
                store.len()
            )));
        }
        let mut seen = vec![false; store.len()];
        for (name, t) in &self.records {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if std::mem::replace(&mut seen[id.index()], true) {
                return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
            }
            store.set_value(id, t.clone())?;
        }
        Ok((net, store))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let d = NetworkConfig::desk();
        assert_eq!((d.channels, d.frames, d.levels, d.scale()), (16, 3, 2, 4));
        let p = NetworkConfig::paper();
        assert_eq!((p.channels, p.frames, p.levels, p.scale()), (128, 7, 4, 16));
        assert_eq!(p.rcab_counts, vec![30, 20, 15, 10]);
        assert_eq!(p.feat_resblocks, 5);
        p.validate().unwrap();
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = NetworkConfig::desk();
        c.use_dksa = false;
        c.rcab_counts = vec![1, 2];
        assert_eq!(NetworkConfig::from_text(&c.to_text()).unwrap(), c);
        assert!(NetworkConfig::from_text("bogus=1").is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = NetworkConfig::desk();
        c.rcab_counts = vec![1];
        assert!(Dksan::new::<f32>(&c, 0).is_err());
        let mut c = NetworkConfig::desk();
        c.levels = 0;
        c.rcab_counts.clear();
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::desk();
        c.frames = 4;
        assert!(c.validate().is_err());
    }

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            channels: 4,
            rcab_counts: vec![1, 1],
            feat_resblocks: 1,
            level_resblocks: 1,
            ..NetworkConfig::desk()
        }
    }

    #[test]
    fn output_shape() {
        let (net, store) = Dksan::new::<f32>(&tiny(), 1).unwrap();
        let x: Tensor<f32> = Rng::new(2).uniform_tensor([1, 9, 5, 6], 0.0, 1.0);
        let y = net.infer(&store, &x).unwrap();
        assert_eq!(y.shape(), [1, 3, 20, 24]);
        assert!(y.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let (net, store) = Dksan::new::<f32>(&tiny(), 3).unwrap();
        let ck = Checkpoint::from_store(&net.cfg, &store);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let (net2, store2) = back.restore().unwrap();
        let x: Tensor<f32> = Rng::new(4).uniform_tensor([1, 9, 4, 4], 0.0, 1.0);
        assert_eq!(net.infer(&store, &x).unwrap(), net2.infer(&store2, &x).unwrap());
    }

    #[test]
    fn checkpoint_corruption_detected() {
        let (net, store) = Dksan::new::<f32>(&tiny(), 3).unwrap();
        let mut bytes = Checkpoint::from_store(&net.cfg, &store).to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
    }
}
