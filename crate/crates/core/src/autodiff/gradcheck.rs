//! Finite-difference verification of every differentiable op.
//!
//! Each case runs in f64. The scalar checked is `sum(out * R)` for a fixed
//! random projection `R`, so every output element contributes. Analytic
//! gradients come from the tape; numeric ones are central differences
//! with step `eps`. A stencil whose ends fall on a different
//! differentiable piece than the base point (a leaky-ReLU input changing
//! sign, a sampling position crossing a grid line) straddles a kink; the
//! step is then halved, at most `max_halvings` times, and the point is
//! skipped if no step stays on one piece.

use std::fmt::Write as _;
use std::time::Instant;

use crate::alignment::{AlignFuse, DkcAlign};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::blocks::{reduction_for, ChannelAttention, Dksa, Rcab, ResBlock};
use crate::deform_ops::{self, OffsetPredictor};
use crate::error::{Error, Result};
use crate::loss_metrics;
use crate::network::{Dksan, NetworkConfig};
use crate::nn_ops::{self, LEAKY_SLOPE};
use crate::tensor::{Rng, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    /// Interpolates at learned positions; looser tolerance.
    Sampling,
    Smooth,
}

impl OpKind {
    pub fn tolerance(self) -> f64 {
        match self {
            OpKind::Sampling => 1e-4,
            OpKind::Smooth => 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub eps: f64,
    /// Elements checked per input or parameter tensor (all if smaller).
    pub samples_per_tensor: usize,
    /// Candidate draws per tensor, as a multiple of `samples_per_tensor`,
    /// before giving up on replacing points skipped at kinks.
    pub attempts_factor: usize,
    /// Step halvings tried when the stencil straddles a kink.
    pub max_halvings: u32,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            samples_per_tensor: 8,
            attempts_factor: 4,
            max_halvings: 4,
            seed: 0,
        }
    }
}

type ForwardFn = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>>;

/// Inputs, parameters, and the function under test.
pub struct Case {
    pub inputs: Vec<(&'static str, Tensor<f64>)>,
    pub store: ParamStore<f64>,
    pub forward: ForwardFn,
}

impl Case {
    fn new(inputs: Vec<(&'static str, Tensor<f64>)>, forward: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Self {
        Self {
            inputs,
            store: ParamStore::new(),
            forward: Box::new(move |g, _, v| forward(g, v)),
        }
    }

    fn with_params(
        inputs: Vec<(&'static str, Tensor<f64>)>,
        store: ParamStore<f64>,
        forward: impl Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            inputs,
            store,
            forward: Box::new(forward),
        }
    }
}

pub struct Entry {
    pub name: &'static str,
    pub kind: OpKind,
    build: fn(&mut Rng) -> Result<Case>,
}

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: &'static str,
    pub kind: OpKind,
    pub tolerance: f64,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Tensor and flat index of the worst point.
    pub worst: String,
    pub seconds: f64,
    pub passed: bool,
}

pub fn rel_error(a: f64, f: f64) -> f64 {
    (a - f).abs() / (a.abs() + f.abs()).max(1e-8)
}

fn uniform(rng: &mut Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    rng.uniform_tensor(shape, lo, hi)
}

/// Values in `±[lo, hi]`, keeping clear of zero.
fn away_from_zero(rng: &mut Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.uniform_in(lo, hi);
        if rng.below(2) == 0 {
            m
        } else {
            -m
        }
    })
}

/// Values whose fractional part stays in `[0.1, 0.9]`, so bilinear
/// sampling positions never sit on a grid line.
fn off_grid(rng: &mut Rng, shape: Shape, span: i64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let whole = rng.below((2 * span + 1) as usize) as i64 - span;
        whole as f64 + rng.uniform_in(0.1, 0.9)
    })
}

/// Gives zero-initialized parameters random values and moves kernel
/// offsets off the integer grid, so composites are checked away from the
/// degenerate starting point.
fn randomize(store: &mut ParamStore<f64>, rng: &mut Rng) {
    for p in store.iter_mut() {
        if p.name.ends_with("kernel_offset") {
            p.value = away_from_zero(rng, p.value.shape(), 0.1, 0.9);
        } else if p.value.as_slice().iter().all(|&v| v == 0.0) {
            p.value = uniform(rng, p.value.shape(), -0.2, 0.2);
        }
    }
}

fn tiny_net(rng: &mut Rng, levels: usize) -> Result<(Dksan, ParamStore<f64>)> {
    let cfg = NetworkConfig {
        channels: 4,
        frames: 3,
        levels,
        rcab_counts: vec![1; levels],
        feat_resblocks: 1,
        level_resblocks: 1,
        ..NetworkConfig::desk()
    };
    let (net, mut store) = Dksan::new::<f64>(&cfg, rng.next_u64())?;
    randomize(&mut store, rng);
    Ok((net, store))
}

macro_rules! entry {
    ($name:literal, $kind:ident, $build:expr) => {
        Entry {
            name: $name,
            kind: OpKind::$kind,
            build: $build,
        }
    };
}

/// Every checked op, primitives first (named after the op they record),
/// then composites.
pub fn registry() -> Vec<Entry> {
    vec![
        entry!("conv2d", Smooth, |r| {
            Ok(Case::new(
                vec![
                    ("x", uniform(r, [2, 3, 5, 6], -1.0, 1.0)),
                    ("w", uniform(r, [4, 3, 3, 3], -1.0, 1.0)),
                    ("b", uniform(r, [1, 4, 1, 1], -1.0, 1.0)),
                ],
                |g, v| nn_ops::conv2d(g, v[0], v[1], Some(v[2])),
            ))
        }),
        entry!("add", Smooth, |r| {
            Ok(Case::new(
                vec![("a", uniform(r, [2, 3, 4, 4], -1.0, 1.0)), ("b", uniform(r, [2, 3, 4, 4], -1.0, 1.0))],
                |g, v| nn_ops::add(g, v[0], v[1]),
            ))
        }),
        entry!("mul", Smooth, |r| {
            Ok(Case::new(
                vec![("a", uniform(r, [2, 3, 4, 4], -1.0, 1.0)), ("b", uniform(r, [2, 3, 4, 4], -1.0, 1.0))],
                |g, v| nn_ops::mul(g, v[0], v[1]),
            ))
        }),
        entry!("scale", Smooth, |r| {
            Ok(Case::new(vec![("a", uniform(r, [1, 3, 4, 4], -1.0, 1.0))], |g, v| nn_ops::scale(g, v[0], -1.7)))
        }),
        entry!("sum", Smooth, |r| {
            Ok(Case::new(vec![("a", uniform(r, [2, 2, 3, 3], -1.0, 1.0))], |g, v| nn_ops::sum(g, v[0])))
        }),
        entry!("leaky_relu", Smooth, |r| {
            Ok(Case::new(vec![("x", away_from_zero(r, [2, 3, 4, 4], 0.05, 2.0))], |g, v| {
                nn_ops::leaky_relu(g, v[0], LEAKY_SLOPE)
            }))
        }),
        entry!("sigmoid", Smooth, |r| {
            Ok(Case::new(vec![("x", uniform(r, [2, 3, 4, 4], -5.0, 5.0))], |g, v| nn_ops::sigmoid(g, v[0])))
        }),
        entry!("concat_channels", Smooth, |r| {
            Ok(Case::new(
                vec![("a", uniform(r, [2, 2, 3, 3], -1.0, 1.0)), ("b", uniform(r, [2, 3, 3, 3], -1.0, 1.0))],
                |g, v| nn_ops::concat_channels(g, &[v[0], v[1]]),
            ))
        }),
        entry!("narrow_channels", Smooth, |r| {
            Ok(Case::new(vec![("x", uniform(r, [2, 5, 3, 3], -1.0, 1.0))], |g, v| {
                nn_ops::narrow_channels(g, v[0], 1, 3)
            }))
        }),
        entry!("reshape", Smooth, |r| {
            Ok(Case::new(vec![("x", uniform(r, [2, 3, 4, 4], -1.0, 1.0))], |g, v| {
                nn_ops::reshape(g, v[0], [1, 6, 4, 4])
            }))
        }),
        entry!("gate", Smooth, |r| {
            Ok(Case::new(
                vec![("x", uniform(r, [2, 4, 3, 3], -1.0, 1.0)), ("a", uniform(r, [2, 4, 3, 3], 0.0, 1.0))],
                |g, v| nn_ops::gate(g, v[0], v[1]),
            ))
        }),
        entry!("gate_channel", Smooth, |r| {
            Ok(Case::new(
                vec![("x", uniform(r, [2, 4, 3, 3], -1.0, 1.0)), ("a", uniform(r, [2, 4, 1, 1], 0.0, 1.0))],
                |g, v| nn_ops::gate(g, v[0], v[1]),
            ))
        }),
        entry!("gate_spatial", Smooth, |r| {
            Ok(Case::new(
                vec![("x", uniform(r, [2, 4, 3, 3], -1.0, 1.0)), ("a", uniform(r, [2, 1, 3, 3], 0.0, 1.0))],
                |g, v| nn_ops::gate(g, v[0], v[1]),
            ))
        }),
        entry!("global_avg_pool", Smooth, |r| {
            Ok(Case::new(vec![("x", uniform(r, [2, 3, 4, 5], -1.0, 1.0))], |g, v| nn_ops::global_avg_pool(g, v[0])))
        }),
        entry!("pixel_shuffle", Smooth, |r| {
            Ok(Case::new(vec![("x", uniform(r, [1, 8, 3, 3], -1.0, 1.0))], |g, v| nn_ops::pixel_shuffle(g, v[0], 2)))
        }),
        entry!("bicubic_resize", Smooth, |r| {
            Ok(Case::new(vec![("x", uniform(r, [1, 2, 4, 5], -1.0, 1.0))], |g, v| nn_ops::bicubic_resize(g, v[0], 2)))
        }),
        entry!("charbonnier", Smooth, |r| {
            let pred = uniform(r, [1, 3, 4, 4], 0.0, 1.0);
            let d = away_from_zero(r, [1, 3, 4, 4], 0.05, 0.5);
            let target = pred.add(&d)?;
            Ok(Case::new(vec![("pred", pred), ("target", target)], |g, v| {
                loss_metrics::charbonnier(g, v[0], v[1], loss_metrics::CHARBONNIER_XI)
            }))
        }),
        entry!("bilinear_sample", Sampling, |r| {
            Ok(Case::new(
                vec![("x", uniform(r, [1, 2, 5, 6], -1.0, 1.0)), ("flow", off_grid(r, [1, 2, 5, 6], 2))],
                |g, v| deform_ops::bilinear_warp(g, v[0], v[1]),
            ))
        }),
        entry!("deformable_conv2d", Sampling, |r| {
            Ok(Case::new(
                vec![
                    ("x", uniform(r, [1, 3, 5, 5], -1.0, 1.0)),
                    ("w", uniform(r, [4, 3, 3, 3], -1.0, 1.0)),
                    ("offsets", off_grid(r, [1, 18, 5, 5], 1)),
                    ("mask", uniform(r, [1, 9, 5, 5], 0.0, 1.0)),
                    ("b", uniform(r, [1, 4, 1, 1], -1.0, 1.0)),
                ],
                |g, v| deform_ops::deformable_conv2d(g, v[0], v[1], Some(v[4]), v[2], v[3]),
            ))
        }),
        entry!("kernel_resample", Sampling, |r| {
            // some taps pushed past the scope edge to exercise the clamp
            Ok(Case::new(
                vec![
                    ("scope", uniform(r, [2, 3, 5, 5], -1.0, 1.0)),
                    ("kernel_offset", away_from_zero(r, [1, 18, 1, 1], 0.1, 1.4)),
                ],
                |g, v| deform_ops::kernel_resample(g, v[0], v[1], (3, 3)),
            ))
        }),
        entry!("deformable_kernel_conv2d", Sampling, |r| {
            Ok(Case::new(
                vec![
                    ("x", uniform(r, [1, 3, 5, 5], -1.0, 1.0)),
                    ("scope", uniform(r, [4, 3, 5, 5], -1.0, 1.0)),
                    ("kernel_offset", away_from_zero(r, [1, 18, 1, 1], 0.1, 0.9)),
                    ("b", uniform(r, [1, 4, 1, 1], -1.0, 1.0)),
                ],
                |g, v| deform_ops::deformable_kernel_conv2d(g, v[0], v[1], v[2], Some(v[3]), (3, 3)),
            ))
        }),
        entry!("predict_offsets", Sampling, |r| {
            let mut store = ParamStore::new();
            let pred = OffsetPredictor::new(&mut store, "p", 4, 2, 5, 3, r)?;
            randomize(&mut store, r);
            Ok(Case::with_params(vec![("fused", uniform(r, [1, 4, 5, 5], -1.0, 1.0))], store, move |g, s, v| {
                let (o, m) = pred.forward(g, s, v[0])?;
                nn_ops::concat_channels(g, &[o, m])
            }))
        }),
        entry!("resblock", Smooth, |r| {
            let mut store = ParamStore::new();
            let b = ResBlock::new(&mut store, "rb", 4, r)?;
            randomize(&mut store, r);
            Ok(Case::with_params(vec![("x", uniform(r, [2, 4, 5, 5], -1.0, 1.0))], store, move |g, s, v| {
                b.forward(g, s, v[0])
            }))
        }),
        entry!("channel_attention", Smooth, |r| {
            let mut store = ParamStore::new();
            let ca = ChannelAttention::new(&mut store, "ca", 8, reduction_for(4), r)?;
            randomize(&mut store, r);
            Ok(Case::with_params(vec![("x", uniform(r, [2, 8, 4, 4], -1.0, 1.0))], store, move |g, s, v| {
                ca.gate(g, s, v[0])
            }))
        }),
        entry!("rcab", Smooth, |r| {
            let mut store = ParamStore::new();
            let b = Rcab::new(&mut store, "rcab", 4, true, r)?;
            randomize(&mut store, r);
            Ok(Case::with_params(vec![("x", uniform(r, [2, 4, 5, 5], -1.0, 1.0))], store, move |g, s, v| {
                b.forward(g, s, v[0])
            }))
        }),
        entry!("dksa", Sampling, |r| {
            let mut store = ParamStore::new();
            let d = Dksa::full(&mut store, "dksa", 4, 5, false, r)?;
            randomize(&mut store, r);
            Ok(Case::with_params(vec![("x", uniform(r, [1, 4, 4, 4], -1.0, 1.0))], store, move |g, s, v| {
                d.forward(g, s, v[0])
            }))
        }),
        entry!("dksa_light", Sampling, |r| {
            let mut store = ParamStore::new();
            let d = Dksa::light(&mut store, "dksa", 4, 5, false, r)?;
            randomize(&mut store, r);
            Ok(Case::with_params(vec![("x", uniform(r, [1, 4, 4, 4], -1.0, 1.0))], store, move |g, s, v| {
                d.forward(g, s, v[0])
            }))
        }),
        entry!("dksa_single_map", Sampling, |r| {
            let mut store = ParamStore::new();
            let d = Dksa::full(&mut store, "dksa", 4, 5, true, r)?;
            randomize(&mut store, r);
            Ok(Case::with_params(vec![("x", uniform(r, [1, 4, 4, 4], -1.0, 1.0))], store, move |g, s, v| {
                d.forward(g, s, v[0])
            }))
        }),
        entry!("dkc_align", Sampling, |r| {
            let mut store = ParamStore::new();
            let a = DkcAlign::new(&mut store, "align", 2, 2, 5, r)?;
            randomize(&mut store, r);
            Ok(Case::with_params(
                vec![("f_n", uniform(r, [1, 2, 4, 4], -1.0, 1.0)), ("f_r", uniform(r, [1, 2, 4, 4], -1.0, 1.0))],
                store,
                move |g, s, v| a.forward(g, s, v[0], v[1]),
            ))
        }),
        entry!("align_and_fuse", Sampling, |r| {
            let mut store = ParamStore::new();
            let a = AlignFuse::new(&mut store, "l1", 4, 3, true, 1, 5, r)?;
            randomize(&mut store, r);
            Ok(Case::with_params(
                vec![
                    ("f0", uniform(r, [1, 4, 4, 4], -1.0, 1.0)),
                    ("f1", uniform(r, [1, 4, 4, 4], -1.0, 1.0)),
                    ("f2", uniform(r, [1, 4, 4, 4], -1.0, 1.0)),
                ],
                store,
                move |g, s, v| a.forward(g, s, v, 1),
            ))
        }),
        entry!("extract_features", Smooth, |r| {
            let (net, store) = tiny_net(r, 1)?;
            Ok(Case::with_params(vec![("frames", uniform(r, [1, 9, 2, 2], 0.0, 1.0))], store, move |g, s, v| {
                let f = net.extract_features(g, s, v[0])?;
                nn_ops::concat_channels(g, &f)
            }))
        }),
        entry!("reconstruct_level", Sampling, |r| {
            let (net, store) = tiny_net(r, 2)?;
            Ok(Case::with_params(vec![("f", uniform(r, [1, 4, 3, 3], -1.0, 1.0))], store, move |g, s, v| {
                net.reconstruct_level(g, s, v[0], 2)
            }))
        }),
        entry!("upscale", Smooth, |r| {
            let (net, store) = tiny_net(r, 1)?;
            Ok(Case::with_params(vec![("f", uniform(r, [1, 4, 3, 3], -1.0, 1.0))], store, move |g, s, v| {
                net.levels[0].upscale.forward(g, s, v[0])
            }))
        }),
        entry!("dksan_forward", Sampling, |r| {
            let (net, store) = tiny_net(r, 2)?;
            Ok(Case::with_params(vec![("frames", uniform(r, [1, 9, 2, 2], 0.0, 1.0))], store, move |g, s, v| {
                net.forward(g, s, v[0])
            }))
        }),
    ]
}

pub fn registry_names() -> Vec<&'static str> {
    registry().iter().map(|e| e.name).collect()
}

struct Evaluator<'a> {
    case: &'a Case,
    projection: Tensor<f64>,
    base_pattern: Vec<i64>,
}

impl Evaluator<'_> {
    fn project(&self, g: &mut Graph<f64>, out: Var) -> Result<Var> {
        let r = g.constant(self.projection.clone());
        let p = nn_ops::mul(g, out, r)?;
        nn_ops::sum(g, p)
    }

    fn output(&self, store: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Result<(Tensor<f64>, Vec<i64>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (self.case.forward)(&mut g, store, &vars)?;
        Ok((g.value(out).clone(), g.kink_pattern()))
    }

    /// Central difference of the loss along one coordinate, or `None` when
    /// either end leaves the base point's piece.
    fn central(&self, target: Target, index: usize, h: f64) -> Result<Option<f64>> {
        let mut store = self.case.store.clone();
        let mut inputs: Vec<Tensor<f64>> = self.case.inputs.iter().map(|(_, t)| t.clone()).collect();
        let mut eval = |delta: f64| -> Result<(Tensor<f64>, Vec<i64>, f64)> {
            let moved = match target {
                Target::Input(i) => {
                    let base = &self.case.inputs[i].1;
                    inputs[i] = nudge(base, index, delta)?;
                    inputs[i].as_slice()[index]
                }
                Target::Param(id) => {
                    let base = self.case.store.value(id);
                    store.set_value(id, nudge(base, index, delta)?)?;
                    store.value(id).as_slice()[index]
                }
            };
            let (out, kinks) = self.output(&store, &inputs)?;
            Ok((out, kinks, moved))
        };
        let (plus, kp, xp) = eval(h)?;
        let (minus, km, xm) = eval(-h)?;
        if kp != self.base_pattern || km != self.base_pattern {
            return Ok(None);
        }
        // project the difference rather than differencing two projections,
        // with compensated summation
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for ((p, m), r) in plus.as_slice().iter().zip(minus.as_slice()).zip(self.projection.as_slice()) {
            let term = r * (p - m);
            let t = sum + term;
            comp += if sum.abs() >= term.abs() { (sum - t) + term } else { (term - t) + sum };
            sum = t;
        }
        Ok(Some((sum + comp) / (xp - xm)))
    }
}

fn nudge(t: &Tensor<f64>, index: usize, delta: f64) -> Result<Tensor<f64>> {
    let mut v = t.as_slice().to_vec();
    v[index] += delta;
    Tensor::from_vec(t.shape(), v)
}

#[derive(Clone, Copy)]
enum Target {
    Input(usize),
    Param(crate::autodiff::ParamId),
}

/// Up to `k` distinct indices in random order.
fn sample_indices(len: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut all: Vec<usize> = (0..len).collect();
    let k = k.min(len);
    for i in 0..k {
        let j = i + rng.below(len - i);
        all.swap(i, j);
    }
    all.truncate(k);
    all
}

/// Checks one case.
pub fn check_case(name: &'static str, kind: OpKind, case: &Case, cfg: &GradcheckConfig, rng: &mut Rng) -> Result<CaseReport> {
    let start = Instant::now();
    let tol = kind.tolerance();

    // analytic
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|(_, t)| g.leaf(t.clone())).collect();
    let out = (case.forward)(&mut g, &case.store, &vars)?;
    let projection = uniform(rng, g.shape(out), -1.0, 1.0);
    let base_pattern = g.kink_pattern();
    let ev = Evaluator {
        case,
        projection,
        base_pattern,
    };
    let loss = ev.project(&mut g, out)?;
    let mut store = case.store.clone();
    store.zero_grad();
    let grads = g.backward_into(loss, &mut store)?;

    let mut targets: Vec<(String, Target, Tensor<f64>)> = Vec::new();
    for (i, (label, t)) in case.inputs.iter().enumerate() {
        let grad = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        targets.push((label.to_string(), Target::Input(i), grad));
    }
    for (id, p) in store.iter() {
        targets.push((p.name.clone(), Target::Param(id), p.grad.clone()));
    }

    let (mut checked, mut skipped) = (0, 0);
    let mut uncovered = Vec::new();
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for (label, target, grad) in &targets {
        let mut here = 0;
        for idx in sample_indices(grad.len(), cfg.samples_per_tensor * cfg.attempts_factor, rng) {
            if here == cfg.samples_per_tensor {
                break;
            }
            let a = grad.as_slice()[idx];
            let mut found = None;
            for k in 0..=cfg.max_halvings {
                found = ev.central(*target, idx, cfg.eps / f64::from(1u32 << k))?;
                if found.is_some() {
                    break;
                }
            }
            let Some(f) = found else {
                skipped += 1;
                continue;
            };
            here += 1;
            checked += 1;
            let e = rel_error(a, f);
            if e > max_rel {
                max_rel = e;
                worst = format!("{label}[{idx}] analytic {a:.6e} numeric {f:.6e}");
            }
        }
        if here == 0 {
            uncovered.push(label.clone());
        }
    }
    if !uncovered.is_empty() && max_rel <= tol {
        worst = format!("no differentiable point found in {}", uncovered.join(", "));
    }
    Ok(CaseReport {
        name,
        kind,
        tolerance: tol,
        checked,
        skipped,
        max_rel_error: max_rel,
        worst,
        seconds: start.elapsed().as_secs_f64(),
        passed: checked > 0 && max_rel <= tol && uncovered.is_empty(),
    })
}

/// Runs one named entry, or all of them when `name` is `None`.
pub fn run(name: Option<&str>, cfg: &GradcheckConfig) -> Result<Vec<CaseReport>> {
    let reg = registry();
    let selected: Vec<&Entry> = match name {
        None => reg.iter().collect(),
        Some(n) => {
            let e = reg.iter().find(|e| e.name == n).ok_or_else(|| {
                Error::contract(format!(
                    "unknown op {n:?}; registered ops: {}",
                    registry_names().join(", ")
                ))
            })?;
            vec![e]
        }
    };
    let root = Rng::new(cfg.seed);
    selected
        .into_iter()
        .map(|e| {
            let mut rng = root.fork(name_hash(e.name));
            let case = (e.build)(&mut rng)?;
            check_case(e.name, e.kind, &case, cfg, &mut rng)
        })
        .collect()
}

fn name_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Plain-text table of results.
pub fn format_report(reports: &[CaseReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<26} {:<8} {:>7} {:>7} {:>7} {:>12} {:>8}  result",
        "op", "kind", "tol", "checked", "skipped", "max_rel_err", "seconds"
    );
    for r in reports {
        let kind = match r.kind {
            OpKind::Sampling => "sampling",
            OpKind::Smooth => "smooth",
        };
        let _ = writeln!(
            s,
            "{:<26} {:<8} {:>7.0e} {:>7} {:>7} {:>12.3e} {:>8.2}  {}",
            r.name,
            kind,
            r.tolerance,
            r.checked,
            r.skipped,
            r.max_rel_error,
            r.seconds,
            if r.passed { "PASS" } else { "FAIL" }
        );
        if !r.passed && !r.worst.is_empty() {
            let _ = writeln!(s, "    worst: {}", r.worst);
        }
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    let _ = writeln!(s, "{} ops, {} failed", reports.len(), failed);
    s
}
