//! Frame I/O (binary PPM), synthetic videos with known ground truth,
//! patch cropping with dihedral augmentation, and batch assembly.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn_ops::{bicubic_downscale, bicubic_upscale};
use crate::tensor::{Rng, Tensor};

// ---------------------------------------------------------------------------
// PPM

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

struct Header<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.buf.get(self.pos) {
            if b == b'#' {
                while self.buf.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    /// Next decimal token and the offset where it starts.
    fn number(&mut self, what: &str) -> Result<(usize, usize)> {
        if self.pos > 0 && !self.buf.get(self.pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(parse_err(self.pos, format!("expected whitespace before {what}")));
        }
        self.skip_space();
        let start = self.pos;
        while self.buf.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(match self.buf.get(self.pos) {
                None => parse_err(self.pos, format!("unexpected end of header, expected {what}")),
                Some(&b) => parse_err(self.pos, format!("expected {what}, found byte 0x{b:02x}")),
            });
        }
        let v = std::str::from_utf8(&self.buf[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| parse_err(start, format!("{what} out of range")))?;
        Ok((v, start))
    }
}

/// Parses a binary P6 PPM with maxval 255 into `(1, 3, h, w)` in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(parse_err(0, "missing P6 magic"));
    }
    let mut hd = Header { buf: bytes, pos: 2 };
    let (w, w_at) = hd.number("width")?;
    let (h, h_at) = hd.number("height")?;
    let (maxval, maxval_at) = hd.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(parse_err(if w == 0 { w_at } else { h_at }, format!("zero image dimension {w}x{h}")));
    }
    if maxval != 255 {
        return Err(parse_err(maxval_at, format!("unsupported maxval {maxval} (only 255)")));
    }
    match bytes.get(hd.pos) {
        Some(b) if b.is_ascii_whitespace() => hd.pos += 1,
        _ => return Err(parse_err(hd.pos, "expected single whitespace after maxval")),
    }
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| parse_err(w_at, "image dimensions overflow"))?;
    let payload = &bytes[hd.pos..];
    if payload.len() < need {
        return Err(parse_err(
            bytes.len(),
            format!("truncated payload: {} of {need} bytes", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(parse_err(hd.pos + need, format!("{} trailing bytes", payload.len() - need)));
    }
    Ok(Tensor::from_fn([1, 3, h, w], |_, c, y, x| payload[(y * w + x) * 3 + c] as f32 / 255.0))
}

/// Quantizes a `(1, 3, h, w)` tensor to 8 bits (round half away from zero,
/// clamped) and encodes it as P6.
pub fn encode_ppm(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let [n, c, h, w] = t.shape();
    if n != 1 || c != 3 {
        return Err(Error::contract(format!("PPM needs shape (1,3,h,w), got {:?}", t.shape())));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push(quantize(t.at(0, ch, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn save_ppm(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_ppm(t)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// sequences

/// `2N + 1` LR frames around a reference plus the HR reference frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub lr_frames: Vec<Tensor<f32>>,
    pub hr_target: Tensor<f32>,
    pub ref_index: usize,
    pub source: String,
    pub frame_index: usize,
}

impl FrameSequence {
    pub fn scale(&self) -> usize {
        self.hr_target.shape()[2] / self.lr_frames[0].shape()[2]
    }

    pub fn reference(&self) -> &Tensor<f32> {
        &self.lr_frames[self.ref_index]
    }

    pub fn validate(&self) -> Result<()> {
        let s0 = self.lr_frames.first().ok_or_else(|| Error::contract("empty sequence"))?.shape();
        if self.lr_frames.len().is_multiple_of(2) || self.ref_index != self.lr_frames.len() / 2 {
            return Err(Error::contract("sequence needs 2N+1 frames with the reference at the center"));
        }
        if self.lr_frames.iter().any(|f| f.shape() != s0) {
            return Err(Error::contract("LR frames differ in shape"));
        }
        let [_, _, h, w] = s0;
        let [_, _, hh, hw] = self.hr_target.shape();
        if hh % h != 0 || hh / h != hw / w || hw % w != 0 {
            return Err(Error::contract(format!("HR {hh}x{hw} is not an integer multiple of LR {h}x{w}")));
        }
        Ok(())
    }

    /// Frames packed as `(1, F*3, h, w)`.
    pub fn packed(&self) -> Result<Tensor<f32>> {
        let refs: Vec<&Tensor<f32>> = self.lr_frames.iter().collect();
        Tensor::concat_channels(&refs)
    }
}

/// A whole clip: HR frames and their LR counterparts.
#[derive(Clone, Debug)]
pub struct Video {
    pub id: String,
    pub hr: Vec<Tensor<f32>>,
    pub lr: Vec<Tensor<f32>>,
}

/// Frame index `t + d` clamped to the clip (edge replication).
pub fn replicate_index(t: usize, d: isize, len: usize) -> usize {
    (t as isize + d).clamp(0, len as isize - 1) as usize
}

impl Video {
    pub fn len(&self) -> usize {
        self.lr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lr.is_empty()
    }

    /// Window of `frames` LR frames centered on `t`, edges replicated.
    pub fn window(&self, t: usize, frames: usize) -> FrameSequence {
        let n = (frames / 2) as isize;
        FrameSequence {
            lr_frames: (-n..=n).map(|d| self.lr[replicate_index(t, d, self.len())].clone()).collect(),
            hr_target: self.hr[t].clone(),
            ref_index: frames / 2,
            source: self.id.clone(),
            frame_index: t,
        }
    }

    /// Builds the LR frames by bicubic downscaling.
    pub fn from_hr(id: impl Into<String>, hr: Vec<Tensor<f32>>, scale: usize) -> Result<Self> {
        let lr = hr.iter().map(|f| bicubic_downscale(f, scale)).collect::<Result<_>>()?;
        Ok(Self { id: id.into(), hr, lr })
    }
}

// ---------------------------------------------------------------------------
// synthesis

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SynthPattern {
    Gradient,
    Checker,
    Blobs,
}

impl SynthPattern {
    pub const ALL: [SynthPattern; 3] = [SynthPattern::Gradient, SynthPattern::Checker, SynthPattern::Blobs];

    pub fn name(self) -> &'static str {
        match self {
            SynthPattern::Gradient => "gradient",
            SynthPattern::Checker => "checker",
            SynthPattern::Blobs => "blobs",
        }
    }
}

impl fmt::Display for SynthPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown pattern {s:?} (gradient, checker, blobs)")))
    }
}

/// Recipe for a synthetic clip. Motion is in HR pixels per frame as
/// `(dy, dx)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub pattern: SynthPattern,
    pub motion: (f64, f64),
    pub noise_sigma: f64,
    pub frames: usize,
    pub seed: u64,
    pub lr_height: usize,
    pub lr_width: usize,
}

impl SynthSpec {
    pub fn new(pattern: SynthPattern, seed: u64) -> Self {
        Self {
            pattern,
            motion: (0.0, 0.0),
            noise_sigma: 0.0,
            frames: 3,
            seed,
            lr_height: 32,
            lr_width: 32,
        }
    }
}

/// Pixel-center sampled analytic scene; `value(c, y, x)` takes HR pixel
/// coordinates already shifted by the frame's motion.
enum Scene {
    Gradient {
        freq: [(f64, f64); 3],
        phase: [f64; 3],
    },
    Checker {
        size: f64,
        origin: (f64, f64),
        colors: [[f64; 3]; 2],
    },
    Blobs {
        background: [f64; 3],
        blobs: Vec<((f64, f64), f64, [f64; 3])>,
    },
}

impl Scene {
    fn new(pattern: SynthPattern, scale: usize, hr: (usize, usize), rng: &mut Rng) -> Self {
        let s = scale as f64;
        let color = |rng: &mut Rng| [0; 3].map(|_| rng.uniform_in(0.2, 0.8));
        match pattern {
            SynthPattern::Gradient => {
                let period = s * rng.uniform_in(4.0, 10.0);
                let freq = [0; 3].map(|_| {
                    let th = rng.uniform_in(0.0, std::f64::consts::TAU);
                    (th.sin() / period, th.cos() / period)
                });
                let phase = [0; 3].map(|_| rng.uniform_in(0.0, std::f64::consts::TAU));
                Scene::Gradient { freq, phase }
            }
            SynthPattern::Checker => Scene::Checker {
                size: s * (1 + rng.below(3)) as f64 + rng.below(scale) as f64,
                origin: (rng.uniform_in(0.0, 8.0 * s), rng.uniform_in(0.0, 8.0 * s)),
                colors: [color(rng), color(rng)],
            },
            SynthPattern::Blobs => {
                // density fixed per LR pixel so larger frames are equally busy
                let lr_area = hr.0 * hr.1 / (scale * scale);
                let count = lr_area / 8 + rng.below(lr_area / 16 + 1);
                let blobs = (0..count)
                    .map(|_| {
                        let center = (rng.uniform_in(0.0, hr.0 as f64), rng.uniform_in(0.0, hr.1 as f64));
                        let sigma = s * rng.uniform_in(0.3, 1.2);
                        let amp = [0; 3].map(|_| rng.uniform_in(-0.4, 0.5));
                        (center, sigma, amp)
                    })
                    .collect();
                Scene::Blobs {
                    background: [0; 3].map(|_| rng.uniform_in(0.3, 0.5)),
                    blobs,
                }
            }
        }
    }

    fn value(&self, c: usize, y: f64, x: f64) -> f64 {
        match self {
            Scene::Gradient { freq, phase } => {
                let (fy, fx) = freq[c];
                0.5 + 0.3 * (std::f64::consts::TAU * (fy * y + fx * x) + phase[c]).sin()
            }
            Scene::Checker { size, origin, colors } => {
                let cy = ((y - origin.0) / size).floor() as i64;
                let cx = ((x - origin.1) / size).floor() as i64;
                colors[(cy + cx).rem_euclid(2) as usize][c]
            }
            Scene::Blobs { background, blobs } => {
                let mut v = background[c];
                for &((by, bx), sigma, amp) in blobs {
                    let d2 = (y - by).powi(2) + (x - bx).powi(2);
                    v += amp[c] * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                v.clamp(0.15, 0.85)
            }
        }
    }
}

/// Renders the HR frames of a synthetic clip and derives LR frames by
/// bicubic downscaling (plus optional Gaussian noise).
pub fn synth_video(spec: &SynthSpec, scale: usize) -> Result<Video> {
    if !matches!(scale, 2 | 4 | 8 | 16) {
        return Err(Error::contract(format!("synthesis scale must be 2, 4, 8 or 16, got {scale}")));
    }
    if spec.frames == 0 || spec.lr_height == 0 || spec.lr_width == 0 {
        return Err(Error::contract("synthesis needs at least one frame of nonzero size"));
    }
    let (hh, hw) = (spec.lr_height * scale, spec.lr_width * scale);
    let root = Rng::new(spec.seed);
    let scene = Scene::new(spec.pattern, scale, (hh, hw), &mut root.fork(1));
    let mut noise = root.fork(2);
    let mut hr = Vec::with_capacity(spec.frames);
    let mut lr = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let (oy, ox) = (t as f64 * spec.motion.0, t as f64 * spec.motion.1);
        let frame = Tensor::from_fn([1, 3, hh, hw], |_, c, y, x| {
            scene.value(c, y as f64 + 0.5 - oy, x as f64 + 0.5 - ox) as f32
        });
        let mut small = bicubic_downscale(&frame, scale)?;
        if spec.noise_sigma > 0.0 {
            let s = spec.noise_sigma;
            let noisy = small.as_slice().iter().map(|&v| (v + (s * noise.normal()) as f32).clamp(0.0, 1.0)).collect();
            small = Tensor::from_vec(small.shape(), noisy)?;
        }
        hr.push(frame);
        lr.push(small);
    }
    Ok(Video {
        id: format!("synth-{}-{}", spec.pattern, spec.seed),
        hr,
        lr,
    })
}

/// A single `spec.frames`-frame sequence whose target is the center HR
/// frame.
pub fn synth_sequence(spec: &SynthSpec, scale: usize) -> Result<FrameSequence> {
    if spec.frames.is_multiple_of(2) {
        return Err(Error::contract(format!("sequence needs an odd frame count, got {}", spec.frames)));
    }
    let v = synth_video(spec, scale)?;
    Ok(v.window(spec.frames / 2, spec.frames))
}

/// Seeded clips cycling through `patterns` with random subpixel motion of
/// up to `max_motion` HR pixels per frame along each axis.
pub fn synth_videos(
    patterns: &[SynthPattern],
    count: usize,
    frames: usize,
    lr_size: usize,
    scale: usize,
    max_motion: f64,
    seed: u64,
) -> Result<Vec<Video>> {
    if patterns.is_empty() {
        return Err(Error::contract("no synthesis patterns given"));
    }
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|i| {
            let spec = SynthSpec {
                pattern: patterns[i % patterns.len()],
                motion: (rng.uniform_in(-max_motion, max_motion), rng.uniform_in(-max_motion, max_motion)),
                noise_sigma: 0.0,
                frames,
                seed: rng.next_u64(),
                lr_height: lr_size,
                lr_width: lr_size,
            };
            synth_video(&spec, scale)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// augmentation

/// Element of the dihedral group of the square: `rot` quarter turns
/// counter-clockwise applied after an optional horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub rot: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { rot: 0, flip: false };

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8u8).map(|k| Dihedral { rot: k % 4, flip: k >= 4 })
    }

    pub fn random(rng: &mut Rng) -> Self {
        let k = rng.below(8) as u8;
        Dihedral { rot: k % 4, flip: k >= 4 }
    }

    pub fn apply(self, t: &Tensor<f32>) -> Tensor<f32> {
        let mut out = if self.flip { flip_h(t) } else { t.clone() };
        for _ in 0..self.rot {
            out = rot90(&out);
        }
        out
    }
}

fn flip_h(t: &Tensor<f32>) -> Tensor<f32> {
    let w = t.shape()[3];
    Tensor::from_fn(t.shape(), |n, c, y, x| t.at(n, c, y, w - 1 - x))
}

/// Quarter turn counter-clockwise.
fn rot90(t: &Tensor<f32>) -> Tensor<f32> {
    let [n, c, h, w] = t.shape();
    Tensor::from_fn([n, c, w, h], |b, ch, y, x| t.at(b, ch, x, w - 1 - y))
}

/// Crops the same LR window from every frame and the matching HR window.
pub fn crop(seq: &FrameSequence, y0: usize, x0: usize, patch: usize) -> Result<FrameSequence> {
    let [_, _, h, w] = seq.lr_frames[0].shape();
    if patch == 0 || y0 + patch > h || x0 + patch > w {
        return Err(Error::contract(format!(
            "patch {patch} at ({y0},{x0}) exceeds LR frame {h}x{w}"
        )));
    }
    let s = seq.scale();
    let cut = |t: &Tensor<f32>, y0: usize, x0: usize, p: usize| Tensor::from_fn([1, 3, p, p], |_, c, y, x| t.at(0, c, y0 + y, x0 + x));
    Ok(FrameSequence {
        lr_frames: seq.lr_frames.iter().map(|f| cut(f, y0, x0, patch)).collect(),
        hr_target: cut(&seq.hr_target, s * y0, s * x0, s * patch),
        ref_index: seq.ref_index,
        source: seq.source.clone(),
        frame_index: seq.frame_index,
    })
}

pub fn augment(seq: &FrameSequence, d: Dihedral) -> FrameSequence {
    FrameSequence {
        lr_frames: seq.lr_frames.iter().map(|f| d.apply(f)).collect(),
        hr_target: d.apply(&seq.hr_target),
        ..seq.clone()
    }
}

/// Random crop of `lr_patch` plus a random dihedral transform, identical
/// across frames.
pub fn crop_and_augment(seq: &FrameSequence, lr_patch: usize, rng: &mut Rng) -> Result<FrameSequence> {
    let [_, _, h, w] = seq.lr_frames[0].shape();
    if lr_patch > h || lr_patch > w {
        return Err(Error::contract(format!("patch {lr_patch} larger than LR frame {h}x{w}")));
    }
    let y0 = rng.below(h - lr_patch + 1);
    let x0 = rng.below(w - lr_patch + 1);
    let d = Dihedral::random(rng);
    Ok(augment(&crop(seq, y0, x0, lr_patch)?, d))
}

// ---------------------------------------------------------------------------
// datasets

/// Training windows over a set of clips: `(video, reference frame)`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub videos: Vec<Video>,
    pub windows: Vec<(usize, usize)>,
    pub frames: usize,
}

/// LR input packed as `(n, F*3, p, p)` and HR targets `(n, 3, s*p, s*p)`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
}

impl Dataset {
    /// Every frame of every clip as a reference.
    pub fn new(videos: Vec<Video>, frames: usize) -> Result<Self> {
        let windows = videos
            .iter()
            .enumerate()
            .flat_map(|(v, clip)| (0..clip.len()).map(move |t| (v, t)))
            .collect();
        Self::with_windows(videos, windows, frames)
    }

    pub fn with_windows(videos: Vec<Video>, windows: Vec<(usize, usize)>, frames: usize) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::contract("dataset has no windows"));
        }
        if frames.is_multiple_of(2) {
            return Err(Error::contract(format!("frame count {frames} must be odd")));
        }
        for &(v, t) in &windows {
            if videos.get(v).is_none_or(|clip| t >= clip.len()) {
                return Err(Error::contract(format!("window ({v},{t}) outside the dataset")));
            }
        }
        Ok(Self { videos, windows, frames })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn sequence(&self, i: usize) -> FrameSequence {
        let (v, t) = self.windows[i];
        self.videos[v].window(t, self.frames)
    }

    /// Uniformly samples `batch` windows, crops and augments each.
    pub fn sample_batch(&self, batch: usize, lr_patch: usize, rng: &mut Rng) -> Result<Batch> {
        let seqs = (0..batch)
            .map(|_| {
                let i = rng.below(self.len());
                crop_and_augment(&self.sequence(i), lr_patch, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        stack(&seqs)
    }

    /// All windows uncropped, as one batch per window.
    pub fn full_batches(&self) -> Result<Vec<Batch>> {
        (0..self.len()).map(|i| stack(&[self.sequence(i)])).collect()
    }
}

pub fn stack(seqs: &[FrameSequence]) -> Result<Batch> {
    let lr = seqs.iter().map(FrameSequence::packed).collect::<Result<Vec<_>>>()?;
    let lr_refs: Vec<&Tensor<f32>> = lr.iter().collect();
    let hr_refs: Vec<&Tensor<f32>> = seqs.iter().map(|s| &s.hr_target).collect();
    Ok(Batch {
        lr: Tensor::concat_batch(&lr_refs)?,
        hr: Tensor::concat_batch(&hr_refs)?,
    })
}

/// PSNR of bicubic upscaling of the reference frame, averaged over windows.
pub fn bicubic_baseline(data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..data.len() {
        let seq = data.sequence(i);
        let up = bicubic_upscale(seq.reference(), seq.scale())?.map(|v| v.clamp(0.0, 1.0));
        total += crate::loss_metrics::psnr(&up, &seq.hr_target)?;
    }
    Ok(total / data.len() as f64)
}

/// `frame_%06d.ppm`.
pub fn frame_name(index: usize) -> String {
    format!("frame_{index:06}.ppm")
}

/// Sorted frame files of one clip directory.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("frame_") && n.ends_with(".ppm"))
        })
        .collect();
    frames.sort();
    Ok(frames)
}

pub fn load_frames(dir: &Path) -> Result<Vec<Tensor<f32>>> {
    let paths = list_frames(dir)?;
    if paths.is_empty() {
        return Err(Error::contract(format!("no frame_*.ppm files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            load_ppm(p).map_err(|e| match e {
                Error::Parse { offset, msg } => Error::Parse {
                    offset,
                    msg: format!("{}: {msg}", p.display()),
                },
                other => other,
            })
        })
        .collect()
}

/// Loads `<root>/<video_id>/frame_%06d.ppm` clips as HR ground truth and
/// derives LR frames by bicubic downscaling.
pub fn load_video_dir(root: &Path, scale: usize) -> Result<Vec<Video>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::contract(format!("no clip directories under {}", root.display())));
    }
    dirs.iter()
        .map(|d| {
            let id = d.file_name().unwrap().to_string_lossy().into_owned();
            Video::from_hr(id, load_frames(d)?, scale)
        })
        .collect()
}

/// One window per line, `video_id start_frame` separated by whitespace or
/// a comma; `#` starts a comment.
pub fn parse_manifest(text: &str) -> Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.split('#').next().unwrap().trim();
        if !body.is_empty() {
            let mut parts = body.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty());
            match (parts.next(), parts.next(), parts.next()) {
                (Some(id), Some(start), None) => {
                    let start = start
                        .parse()
                        .map_err(|_| parse_err(offset, format!("bad start frame {start:?}")))?;
                    out.push((id.to_string(), start));
                }
                _ => return Err(parse_err(offset, format!("expected `video_id start_frame`, got {body:?}"))),
            }
        }
        offset += line.len();
    }
    Ok(out)
}

/// Turns manifest windows (first frame of each window) into dataset
/// windows (reference frame at the window center).
pub fn manifest_windows(videos: &[Video], entries: &[(String, usize)], frames: usize) -> Result<Vec<(usize, usize)>> {
    entries
        .iter()
        .map(|(id, start)| {
            let v = videos
                .iter()
                .position(|clip| &clip.id == id)
                .ok_or_else(|| Error::contract(format!("manifest names unknown video {id:?}")))?;
            let t = start + frames / 2;
            if start + frames > videos[v].len() {
                return Err(Error::contract(format!(
                    "window {id}@{start} runs past the clip ({} frames)",
                    videos[v].len()
                )));
            }
            Ok((v, t))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_payload() {
        let bytes = b"P6\n2 2\n255\n\xff\xff\xff\xff\xff\xff\xff\xff\xff\xff\xff\xff";
        let t = decode_ppm(bytes).unwrap();
        assert_eq!(t.shape(), [1, 3, 2, 2]);
        assert!(t.as_slice().iter().all(|&v| v == 1.0));
        let enc = encode_ppm(&Tensor::ones([1, 3, 2, 2])).unwrap();
        assert_eq!(&enc[..], &bytes[..]);
    }

    #[test]
    fn ppm_comments_allowed() {
        let bytes = b"P6 # c\n1 # w\n1\n255\n\x00\x80\xff";
        let t = decode_ppm(bytes).unwrap();
        assert_eq!(t.as_slice(), &[0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn quantize_rounds_half_away() {
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(1.49 / 255.0), 1);
        assert_eq!(quantize(-0.3), 0);
        assert_eq!(quantize(2.0), 255);
    }

    #[test]
    fn zero_motion_frames_identical() {
        let mut spec = SynthSpec::new(SynthPattern::Blobs, 5);
        spec.frames = 3;
        spec.lr_height = 8;
        spec.lr_width = 8;
        let seq = synth_sequence(&spec, 4).unwrap();
        assert_eq!(seq.lr_frames[0], seq.lr_frames[1]);
        assert_eq!(seq.lr_frames[1], seq.lr_frames[2]);
        seq.validate().unwrap();
    }

    #[test]
    fn integer_motion_shifts_by_one_pixel() {
        let mut spec = SynthSpec::new(SynthPattern::Checker, 9);
        spec.motion = (1.0, 0.0);
        spec.lr_height = 6;
        spec.lr_width = 6;
        let v = synth_video(&spec, 2).unwrap();
        let [_, _, h, w] = v.hr[0].shape();
        for t in 1..v.hr.len() {
            for c in 0..3 {
                for y in 1..h {
                    for x in 0..w {
                        assert_eq!(v.hr[t].at(0, c, y, x), v.hr[t - 1].at(0, c, y - 1, x));
                    }
                }
            }
        }
    }

    #[test]
    fn lr_is_downscaled_hr() {
        for p in SynthPattern::ALL {
            let mut spec = SynthSpec::new(p, 11);
            spec.motion = (0.3, -0.7);
            let seq = synth_sequence(&spec, 4).unwrap();
            let down = bicubic_downscale(&seq.hr_target, 4).unwrap();
            assert!(down.max_abs_diff(seq.reference()) <= 1e-6, "{p}");
            assert!(seq.reference().as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let spec = SynthSpec { motion: (0.4, 0.25), noise_sigma: 0.01, ..SynthSpec::new(SynthPattern::Gradient, 3) };
        assert_eq!(synth_sequence(&spec, 2).unwrap(), synth_sequence(&spec, 2).unwrap());
        assert!(synth_video(&spec, 3).is_err());
    }

    #[test]
    fn crop_offsets_correspond() {
        let mut spec = SynthSpec::new(SynthPattern::Checker, 2);
        spec.motion = (0.5, 0.5);
        let seq = synth_sequence(&spec, 4).unwrap();
        let c = crop(&seq, 5, 7, 8).unwrap();
        assert_eq!(c.hr_target.shape(), [1, 3, 32, 32]);
        assert_eq!(c.hr_target.at(0, 1, 0, 0), seq.hr_target.at(0, 1, 20, 28));
        assert_eq!(c.lr_frames[2].at(0, 0, 3, 4), seq.lr_frames[2].at(0, 0, 8, 11));
        assert!(crop(&seq, 30, 0, 8).is_err());
        assert!(crop_and_augment(&seq, 40, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn rot90_four_times_is_identity() {
        let t: Tensor<f32> = Rng::new(1).uniform_tensor([1, 3, 3, 5], 0.0, 1.0);
        let r = rot90(&t);
        assert_eq!(r.shape(), [1, 3, 5, 3]);
        assert_eq!(rot90(&rot90(&rot90(&r))), t);
    }

    #[test]
    fn dihedral_closure_matches_group_law() {
        let img = Tensor::<f32>::from_fn([1, 1, 4, 4], |_, _, y, x| (y * 4 + x) as f32);
        let all: Vec<Dihedral> = Dihedral::all().collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(all[i].apply(&img), all[j].apply(&img));
            }
        }
        for a in &all {
            for b in &all {
                let sign = if b.flip { 4 - a.rot } else { a.rot };
                let ab = Dihedral {
                    rot: (b.rot + sign) % 4,
                    flip: a.flip ^ b.flip,
                };
                assert_eq!(b.apply(&a.apply(&img)), ab.apply(&img), "{a:?} then {b:?}");
            }
        }
    }

    #[test]
    fn edge_replicated_window() {
        let frames: Vec<Tensor<f32>> = (0..4).map(|i| Tensor::full([1, 3, 2, 2], i as f32 / 4.0)).collect();
        let v = Video::from_hr("v", frames.iter().map(|f| bicubic_upscale(f, 2).unwrap()).collect(), 2).unwrap();
        let w = v.window(0, 3);
        assert_eq!(w.lr_frames[0], w.lr_frames[1]);
        let w = v.window(3, 5);
        assert_eq!(w.lr_frames[3], w.lr_frames[4]);
        assert_eq!(w.lr_frames[2], v.lr[3]);
    }

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest("# windows\nclipA 0\nclipA,3\n\n clipB\t2 # tail\n").unwrap();
        assert_eq!(m, vec![("clipA".into(), 0), ("clipA".into(), 3), ("clipB".into(), 2)]);
        match parse_manifest("a 1\nb x\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
        assert!(parse_manifest("a 1 2\n").is_err());
    }
}
