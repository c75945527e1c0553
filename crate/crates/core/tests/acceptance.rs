//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout.
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --release --test acceptance -- 3 4`.

use std::path::Path;
use std::time::Instant;

use dksan::autodiff::gradcheck::{self, GradcheckConfig};
use dksan::autodiff::Graph;
use dksan::data::{decode_ppm, encode_ppm, synth_videos, bicubic_baseline, Dataset, SynthPattern};
use dksan::deform_ops::{deformable_conv2d_forward, deformable_kernel_conv2d_forward};
use dksan::network::{Ablation, Checkpoint, Dksan, NetworkConfig};
use dksan::training::{train, TrainConfig, Trainer};
use dksan::{Error, Rng, Tensor};

type Outcome = Result<String, String>;

// tolerances and budgets
const GRADCHECK_BUDGET_S: f64 = 600.0;
const DEGENERATE_TOL: f64 = 1e-6;
const DEGENERATE_TRIALS: usize = 20;
const SHIFT_TOL: f64 = 1e-6;
const SHIFT_TRIALS: usize = 10;
const BICUBIC_FALLBACK_TOL: f64 = 1e-6;
const LEARNING_STEPS: u64 = 2000;
const MIN_GAIN_DB: f64 = 1.0;
const LOSS_RATIO: f64 = 0.8;
const ABLATION_TIE_DB: f64 = 0.1;
const MALFORMED_FILES: usize = 10;

fn pass_if(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// independent oracles

/// Direct-loop convolution with zero padding `k/2`. `read(n, c, y, x)` is
/// called only for in-bounds coordinates.
fn direct_conv(
    shape: [usize; 4],
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    read: impl Fn(usize, usize, isize, isize, usize) -> f64,
) -> Tensor<f64> {
    let [n, ci, h, wd] = shape;
    let [co, _, kh, kw] = w.shape();
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    Tensor::from_fn([n, co, h, wd], |ni, o, y, x| {
        let mut acc = b.as_slice()[o];
        for c in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    let (sy, sx) = (y as isize + ky as isize - ph, x as isize + kx as isize - pw);
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                        acc += w.at(o, c, ky, kx) * read(ni, c, sy, sx, ky * kw + kx);
                    }
                }
            }
        }
        acc
    })
}

/// Keys cubic (a = -0.5) x2 upscale along one axis with pixel-center
/// alignment and clamped edges: the two output phases use the fixed taps
/// `[-3, 29, 111, -9] / 128` and their mirror.
fn bicubic_x2_axis(x: &Tensor<f64>, along_w: bool) -> Tensor<f64> {
    const EVEN: [(isize, f64); 4] = [(-2, -3.0), (-1, 29.0), (0, 111.0), (1, -9.0)];
    const ODD: [(isize, f64); 4] = [(-1, -9.0), (0, 111.0), (1, 29.0), (2, -3.0)];
    let [n, c, h, w] = x.shape();
    let shape = if along_w { [n, c, h, 2 * w] } else { [n, c, 2 * h, w] };
    let len = if along_w { w } else { h } as isize;
    Tensor::from_fn(shape, |ni, ci, y, xx| {
        let i = if along_w { xx } else { y };
        let m = (i / 2) as isize;
        let taps = if i % 2 == 0 { EVEN } else { ODD };
        taps.iter()
            .map(|&(d, wt)| {
                let j = (m + d).clamp(0, len - 1) as usize;
                let v = if along_w { x.at(ni, ci, y, j) } else { x.at(ni, ci, j, xx) };
                v * wt / 128.0
            })
            .sum()
    })
}

fn bicubic_x2(x: &Tensor<f64>) -> Tensor<f64> {
    bicubic_x2_axis(&bicubic_x2_axis(x, true), false)
}

// ---------------------------------------------------------------------------
// criteria

fn gradient_certification() -> Outcome {
    let start = Instant::now();
    let reports = gradcheck::run(None, &GradcheckConfig::default()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    let checked: usize = reports.iter().map(|r| r.checked).sum();
    let worst = reports
        .iter()
        .map(|r| r.max_rel_error / r.tolerance)
        .fold(0.0, f64::max);
    let detail = format!(
        "{} ops, {checked} points, worst error {:.1}% of tolerance, {secs:.1}s",
        reports.len(),
        100.0 * worst
    );
    if !failed.is_empty() {
        print!("{}", gradcheck::format_report(&reports));
        return Err(format!("{detail}; failed: {}", failed.join(", ")));
    }
    pass_if(secs < GRADCHECK_BUDGET_S, detail)
}

fn degenerate_equivalence() -> Outcome {
    let mut rng = Rng::new(3);
    let (mut dcn_max, mut dk_max) = (0.0f64, 0.0f64);
    for _ in 0..DEGENERATE_TRIALS {
        let n = 1 + rng.below(2);
        let ci = 1 + rng.below(4);
        let co = 1 + rng.below(4);
        let (h, w) = (3 + rng.below(6), 3 + rng.below(6));
        let k = [1, 3, 5][rng.below(3)];
        let x: Tensor<f64> = rng.uniform_tensor([n, ci, h, w], -1.0, 1.0);
        let wt: Tensor<f64> = rng.uniform_tensor([co, ci, k, k], -1.0, 1.0);
        let b: Tensor<f64> = rng.uniform_tensor([1, co, 1, 1], -1.0, 1.0);
        let offsets = Tensor::zeros([n, 2 * k * k, h, w]);
        let mask = Tensor::ones([n, k * k, h, w]);
        let got = deformable_conv2d_forward(&x, &wt, Some(&b), &offsets, &mask).map_err(|e| e.to_string())?;
        let want = direct_conv(x.shape(), &wt, &b, |ni, c, y, xx, _| x.at(ni, c, y as usize, xx as usize));
        dcn_max = dcn_max.max(got.max_abs_diff(&want));

        let kk = [1, 3][rng.below(2)];
        let s = kk + 2 * rng.below(3);
        let scope: Tensor<f64> = rng.uniform_tensor([co, ci, s, s], -1.0, 1.0);
        let zero = Tensor::zeros([1, 2 * kk * kk, 1, 1]);
        let got = deformable_kernel_conv2d_forward(&x, &scope, &zero, Some(&b), (kk, kk)).map_err(|e| e.to_string())?;
        let off = (s - kk) / 2;
        let crop = Tensor::from_fn([co, ci, kk, kk], |o, c, y, xx| scope.at(o, c, y + off, xx + off));
        let want = direct_conv(x.shape(), &crop, &b, |ni, c, y, xx, _| x.at(ni, c, y as usize, xx as usize));
        dk_max = dk_max.max(got.max_abs_diff(&want));
    }
    pass_if(
        dcn_max <= DEGENERATE_TOL && dk_max <= DEGENERATE_TOL,
        format!(
            "{DEGENERATE_TRIALS} trials each; deformable conv max diff {dcn_max:.1e}, deformable-kernel conv max diff {dk_max:.1e} (tol {DEGENERATE_TOL:.0e})"
        ),
    )
}

fn shift_oracle() -> Outcome {
    const PAD: usize = 3;
    let mut rng = Rng::new(4);
    let mut worst = 0.0f64;
    for _ in 0..SHIFT_TRIALS {
        let ci = 1 + rng.below(3);
        let co = 1 + rng.below(3);
        let (ih, iw) = (2 + rng.below(5), 2 + rng.below(5));
        let (h, w) = (ih + 2 * PAD, iw + 2 * PAD);
        let inner: Tensor<f64> = rng.uniform_tensor([1, ci, ih, iw], -1.0, 1.0);
        // zero border wider than any offset
        let x = Tensor::from_fn([1, ci, h, w], |_, c, y, xx| {
            let inside = (PAD..PAD + ih).contains(&y) && (PAD..PAD + iw).contains(&xx);
            if inside {
                inner.at(0, c, y - PAD, xx - PAD)
            } else {
                0.0
            }
        });
        let wt: Tensor<f64> = rng.uniform_tensor([co, ci, 3, 3], -1.0, 1.0);
        let b: Tensor<f64> = rng.uniform_tensor([1, co, 1, 1], -1.0, 1.0);
        let global = (rng.below(5) as isize - 2, rng.below(5) as isize - 2);
        let per_tap: Vec<(isize, isize)> = (0..9).map(|_| (rng.below(5) as isize - 2, rng.below(5) as isize - 2)).collect();
        for shifts in [vec![global; 9], per_tap] {
            let offsets = Tensor::from_fn([1, 18, h, w], |_, ch, _, _| {
                let (dy, dx) = shifts[ch / 2];
                (if ch % 2 == 0 { dy } else { dx }) as f64
            });
            let mask = Tensor::ones([1, 9, h, w]);
            let got = deformable_conv2d_forward(&x, &wt, Some(&b), &offsets, &mask).map_err(|e| e.to_string())?;
            // tap k reads the input shifted by its offset, zero outside
            let want = direct_conv(x.shape(), &wt, &b, |_, c, y, xx, k| {
                let (sy, sx) = (y + shifts[k].0, xx + shifts[k].1);
                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    x.at(0, c, sy as usize, sx as usize)
                } else {
                    0.0
                }
            });
            worst = worst.max(got.max_abs_diff(&want));
        }
    }
    pass_if(
        worst <= SHIFT_TOL,
        format!("{SHIFT_TRIALS} trials, uniform and per-tap integer offsets, max diff {worst:.1e} (tol {SHIFT_TOL:.0e})"),
    )
}

fn bicubic_fallback() -> Outcome {
    let mut rng = Rng::new(5);
    let mut parts = Vec::new();
    let mut ok = true;
    for levels in [1usize, 2, 4] {
        let cfg = NetworkConfig {
            levels,
            rcab_counts: vec![2; levels],
            ..NetworkConfig::desk()
        };
        let (net, mut store) = Dksan::new::<f64>(&cfg, 9).map_err(|e| e.to_string())?;
        for p in store.iter_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let frames: Tensor<f64> = rng.uniform_tensor([1, 3 * cfg.frames, 5, 4], 0.0, 1.0);
        let mut g = Graph::new();
        let x = g.constant(frames.clone());
        let y = net.forward(&mut g, &store, x).map_err(|e| e.to_string())?;
        let r = cfg.ref_index();
        let mut want = frames.narrow_channels(3 * r, 3).map_err(|e| e.to_string())?;
        for _ in 0..levels {
            want = bicubic_x2(&want);
        }
        let diff = g.value(y).max_abs_diff(&want);
        ok &= g.shape(y) == want.shape() && diff <= BICUBIC_FALLBACK_TOL;
        parts.push(format!("L={levels}: {diff:.1e}"));
    }
    pass_if(ok, format!("{} (tol {BICUBIC_FALLBACK_TOL:.0e})", parts.join(", ")))
}

struct LearningRun {
    ablation: Ablation,
    final_psnr: f64,
    losses: Vec<f64>,
    seconds: f64,
}

fn learning_sets() -> dksan::Result<(Dataset, Dataset)> {
    let patterns = [SynthPattern::Checker, SynthPattern::Blobs];
    let train_set = Dataset::new(synth_videos(&patterns, 16, 5, 32, 4, 1.5, 1)?, 3)?;
    let val = Dataset::new(synth_videos(&patterns, 4, 3, 24, 4, 1.5, 2)?, 3)?;
    Ok((train_set, val))
}

fn learning_run(ablation: Ablation, train_set: &Dataset, val: &Dataset) -> dksan::Result<LearningRun> {
    let cfg = TrainConfig {
        steps: LEARNING_STEPS,
        ..TrainConfig::default()
    };
    let net = ablation.apply(&NetworkConfig::desk());
    let start = Instant::now();
    let mut trainer = Trainer::new(&cfg, &net)?;
    let report = train(&mut trainer, train_set, val, None, |_| {})?;
    Ok(LearningRun {
        ablation,
        final_psnr: report.final_psnr,
        losses: report.losses(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len().is_multiple_of(2) {
        0.5 * (s[m - 1] + s[m])
    } else {
        s[m]
    }
}

fn desk_learning(full: &LearningRun, baseline: f64) -> Outcome {
    let gain = full.final_psnr - baseline;
    let early = median(&full.losses[..50]);
    let last = *full.losses.last().unwrap();
    pass_if(
        gain >= MIN_GAIN_DB && last < LOSS_RATIO * early,
        format!(
            "val {:.3} dB vs bicubic {baseline:.3} dB ({gain:+.3} dB, need >= {MIN_GAIN_DB}); loss {last:.5} vs {LOSS_RATIO} x median of first 50 = {:.5}; {:.0}s",
            full.final_psnr,
            LOSS_RATIO * early,
            full.seconds
        ),
    )
}

fn ablation_ordering(runs: &[LearningRun]) -> Outcome {
    let ok = runs.windows(2).all(|p| p[0].final_psnr <= p[1].final_psnr + ABLATION_TIE_DB);
    let detail = runs
        .iter()
        .map(|r| format!("{} {:.3}", r.ablation.name(), r.final_psnr))
        .collect::<Vec<_>>()
        .join(" <= ");
    pass_if(ok, format!("{detail} dB (ties within {ABLATION_TIE_DB} dB)"))
}

fn parameter_ordering() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (label, base) in [("desk", NetworkConfig::desk()), ("paper", NetworkConfig::paper())] {
        let counts: Vec<usize> = Ablation::ALL
            .iter()
            .map(|a| Dksan::new::<f32>(&a.apply(&base), 0).map(|(_, s)| s.num_scalars()))
            .collect::<dksan::Result<_>>()
            .map_err(|e| e.to_string())?;
        ok &= counts.windows(2).all(|p| p[0] < p[1]);
        parts.push(format!(
            "{label}: {}",
            counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" < ")
        ));
    }
    pass_if(ok, parts.join("; "))
}

fn checkpoint_and_determinism() -> Outcome {
    let (train_set, val) = learning_sets().map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        steps: 20,
        batch: 2,
        lr_patch: 12,
        val_every: 10,
        ..TrainConfig::default()
    };
    let net = NetworkConfig::desk();
    let run = |steps: u64| -> dksan::Result<(Vec<f64>, Trainer)> {
        let mut t = Trainer::new(&TrainConfig { steps, ..cfg.clone() }, &net)?;
        let r = train(&mut t, &train_set, &val, None, |_| {})?;
        Ok((r.losses(), t))
    };
    let (a, ta) = run(20).map_err(|e| e.to_string())?;
    let (b, tb) = run(20).map_err(|e| e.to_string())?;
    let same_curve = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()) && a.len() == b.len();

    // checkpoint file round trip
    let dir = std::env::temp_dir().join(format!("dksan-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("net.dksn");
    let ck = ta.checkpoint();
    ck.save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let (_, restored) = loaded.restore().map_err(|e| e.to_string())?;
    let params_equal = restored.iter().zip(ta.store.iter()).all(|((_, p), (_, q))| {
        p.name == q.name && p.value.as_slice().iter().zip(q.value.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let bytes_equal = loaded.to_bytes() == ck.to_bytes() && ck.to_bytes() == tb.checkpoint().to_bytes();

    // interrupted at step 9, resumed from the saved state
    let (first, t9) = run(9).map_err(|e| e.to_string())?;
    let state = dir.join("state.dkst");
    t9.save_state(&state).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::load_state(&state).map_err(|e| e.to_string())?;
    resumed.cfg.steps = 20;
    let rest = train(&mut resumed, &train_set, &val, None, |_| {}).map_err(|e| e.to_string())?;
    let joined: Vec<f64> = first.into_iter().chain(rest.losses()).collect();
    let resume_equal = joined.iter().zip(&a).all(|(x, y)| x.to_bits() == y.to_bits())
        && joined.len() == a.len()
        && resumed.checkpoint().to_bytes() == ck.to_bytes();
    let _ = std::fs::remove_dir_all(&dir);
    pass_if(
        same_curve && params_equal && bytes_equal && resume_equal,
        format!(
            "round trip bit-identical: {}; same-seed curves identical: {}; resumed at step 9 equals uninterrupted: {}",
            params_equal && bytes_equal,
            same_curve,
            resume_equal
        ),
    )
}

fn format_conformance() -> Outcome {
    let mut rng = Rng::new(10);
    let mut round_trips = 0;
    for _ in 0..20 {
        let (h, w) = (1 + rng.below(9), 1 + rng.below(9));
        let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        bytes.extend((0..3 * h * w).map(|_| rng.below(256) as u8));
        let img = decode_ppm(&bytes).map_err(|e| e.to_string())?;
        let again = encode_ppm(&img).map_err(|e| e.to_string())?;
        if again != bytes {
            return Err(format!("{w}x{h} image did not round-trip"));
        }
        round_trips += 1;
    }
    let expected: [(&str, usize); MALFORMED_FILES] = [
        ("bad_magic.ppm", 0),
        ("no_space_after_magic.ppm", 2),
        ("missing_height.ppm", 5),
        ("letters_in_width.ppm", 3),
        ("zero_width.ppm", 3),
        ("maxval_16bit.ppm", 7),
        ("unterminated_comment.ppm", 17),
        ("maxval_no_separator.ppm", 10),
        ("truncated_payload.ppm", 16),
        ("trailing_bytes.ppm", 23),
    ];
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/malformed_ppm");
    let on_disk = std::fs::read_dir(&dir).map_err(|e| e.to_string())?.count();
    if on_disk != MALFORMED_FILES {
        return Err(format!("{on_disk} files in the malformed corpus"));
    }
    for (name, offset) in expected {
        let bytes = std::fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}"))?;
        match decode_ppm(&bytes) {
            Err(Error::Parse { offset: got, .. }) if got == offset => {}
            Err(Error::Parse { offset: got, msg }) => {
                return Err(format!("{name}: rejected at byte {got}, expected {offset} ({msg})"))
            }
            other => return Err(format!("{name}: {other:?}")),
        }
    }
    Ok(format!(
        "{round_trips} random images round-trip bit-exact; {MALFORMED_FILES} malformed headers rejected at the expected byte"
    ))
}

// ---------------------------------------------------------------------------

fn report(number: u32, title: &str, outcome: &Outcome, failures: &mut u32) {
    let (tag, detail) = match outcome {
        Ok(d) => ("PASS", d),
        Err(d) => {
            *failures += 1;
            ("FAIL", d)
        }
    };
    println!("criterion {number:>2}  {tag}  {title}: {detail}");
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wants = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut failures = 0;

    if wants(1) {
        println!("criterion  1  N/A   paper-scale tables: need the original datasets and multi-GPU training; criteria 2-10 stand in");
    }
    if wants(2) {
        report(2, "gradient certification", &gradient_certification(), &mut failures);
    }
    if wants(3) {
        report(3, "degenerate equivalence", &degenerate_equivalence(), &mut failures);
    }
    if wants(4) {
        report(4, "shift oracle", &shift_oracle(), &mut failures);
    }
    if wants(5) {
        report(5, "bicubic fallback", &bicubic_fallback(), &mut failures);
    }
    if wants(6) || wants(7) {
        let runs = learning_sets().and_then(|(train_set, val)| {
            let baseline = bicubic_baseline(&val)?;
            let ablations: &[Ablation] = if wants(7) { &Ablation::ALL } else { &[Ablation::Full] };
            let runs = ablations
                .iter()
                .map(|&a| learning_run(a, &train_set, &val))
                .collect::<dksan::Result<Vec<_>>>()?;
            Ok((baseline, runs))
        });
        match runs {
            Ok((baseline, runs)) => {
                if wants(6) {
                    let full = runs.iter().find(|r| r.ablation == Ablation::Full).unwrap();
                    report(6, "desk-scale learning", &desk_learning(full, baseline), &mut failures);
                }
                if wants(7) {
                    report(7, "ablation ordering", &ablation_ordering(&runs), &mut failures);
                }
            }
            Err(e) => {
                for (n, t) in [(6, "desk-scale learning"), (7, "ablation ordering")] {
                    if wants(n) {
                        report(n, t, &Err(e.to_string()), &mut failures);
                    }
                }
            }
        }
    }
    if wants(8) {
        report(8, "parameter-count ordering", &parameter_ordering(), &mut failures);
    }
    if wants(9) {
        report(9, "checkpoint and determinism", &checkpoint_and_determinism(), &mut failures);
    }
    if wants(10) {
        report(10, "format conformance", &format_conformance(), &mut failures);
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
