use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dksan::data::{frame_name, load_ppm, save_ppm};
use dksan::loss_metrics::psnr;
use dksan::nn_ops::bicubic_upscale;

const SUBCOMMANDS: [&str; 5] = ["train", "infer", "eval", "gradcheck", "synth"];

/// Small enough to train a few dozen steps in a couple of seconds.
const TINY: [&str; 9] = [
    "channels=4",
    "rcab_counts=1,1",
    "feat_resblocks=1",
    "level_resblocks=1",
    "dk_predictor_depth=1",
    "lr_patch=8",
    "batch=1",
    "val_every=25",
    "checkpoint_every=5",
];

fn dksan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dksan")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_tiny(out: &Path, steps: u64, extra: &[&str]) -> Output {
    let steps = steps.to_string();
    let mut args = vec!["train", "--out", s(out), "--steps", &steps, "--data", "synth:checker"];
    args.extend_from_slice(extra);
    args.extend_from_slice(&TINY);
    let o = dksan(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    o
}

/// Step and loss columns of a training log. Wall time differs run to run,
/// and a run that stops early also validates at its last step.
fn losses(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join("train_log.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').take(2).collect::<Vec<_>>().join(","))
        .collect()
}

fn synth(root: &Path, frames: usize) -> (PathBuf, PathBuf) {
    let frames = frames.to_string();
    let o = dksan(&["synth", "--out", s(root), "--frames", &frames, "--size", "12", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (root.join("lr/checker_3"), root.join("hr/checker_3"))
}

#[test]
fn help_matches_golden() {
    let mut text = stdout(&dksan(&["--help"]));
    for c in SUBCOMMANDS {
        text.push_str(&format!("\n$ dksan {c} --help\n"));
        text.push_str(&stdout(&dksan(&[c, "--help"])));
    }
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/help.txt");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden, &text).unwrap();
    }
    assert_eq!(text, std::fs::read_to_string(golden).unwrap());
}

#[test]
fn paper_preset_config() {
    let o = dksan(&["train", "--preset", "paper", "--print-config"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    for line in ["channels               128", "frames                 7", "levels                 4", "rcab_counts            30,20,15,10", "scale x16"] {
        assert!(out.contains(line), "missing {line:?} in\n{out}");
    }
}

#[test]
fn shipped_config_parses() {
    let conf = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.conf");
    let o = dksan(&["train", "--config", s(&conf), "--print-config", "channels=8"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("channels               8"));
}

#[test]
fn unknown_key_exits_1_with_key_list() {
    let o = dksan(&["train", "--print-config", "chanels=8"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    for key in ["channels", "rcab_counts", "lr", "clip_grad", "scale"] {
        assert!(err.contains(key), "{err}");
    }
}

#[test]
fn bad_values_exit_1() {
    assert_eq!(code(&dksan(&["train", "--print-config", "frames=4"])), 1);
    assert_eq!(code(&dksan(&["train", "--print-config", "--scale", "6"])), 1);
    assert_eq!(code(&dksan(&["train", "--bogus-flag"])), 1);
    let o = Command::new(env!("CARGO_BIN_EXE_dksan"))
        .args(["train", "--print-config"])
        .env("DKSAN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn threads_env_is_honored() {
    let o = Command::new(env!("CARGO_BIN_EXE_dksan"))
        .args(["gradcheck", "conv2d"])
        .env("DKSAN_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn missing_data_dir_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = dksan(&["train", "--out", s(dir.path()), "--data", s(&dir.path().join("nope"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn train_writes_log_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_tiny(&a, 50, &["--seed", "7"]);
    train_tiny(&b, 50, &["--seed", "7"]);
    let log = std::fs::read_to_string(a.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,loss,psnr_val,lr,seconds"));
    assert_eq!(lines.count(), 50);
    assert_eq!(losses(&a), losses(&b));
    for f in ["best.dksn", "last.dksn", "state.dkst"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read(a.join("last.dksn")).unwrap(), std::fs::read(b.join("last.dksn")).unwrap());

    let c = dir.path().join("c");
    train_tiny(&c, 50, &["--seed", "8"]);
    assert_ne!(losses(&a), losses(&c));
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    train_tiny(&full, 30, &[]);
    train_tiny(&split, 15, &[]);
    let o = train_tiny(&split, 30, &["--resume"]);
    assert!(stdout(&o).contains("resuming at step 15"));
    assert_eq!(losses(&full), losses(&split));
    assert_eq!(
        std::fs::read(full.join("last.dksn")).unwrap(),
        std::fs::read(split.join("last.dksn")).unwrap()
    );
}

#[test]
fn infer_window_padding_dims_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (lr, _) = synth(&dir.path().join("syn"), 5);
    let run = dir.path().join("run");
    train_tiny(&run, 5, &[]);
    let ckpt = run.join("last.dksn");
    let (o1, o2) = (dir.path().join("sr1"), dir.path().join("sr2"));
    for out in [&o1, &o2] {
        let o = dksan(&["infer", "--checkpoint", s(&ckpt), "--data", s(&lr), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("s/f"));
    }
    for t in 0..5 {
        let name = frame_name(t);
        let a = std::fs::read(o1.join(&name)).unwrap();
        assert_eq!(a, std::fs::read(o2.join(&name)).unwrap(), "{name}");
        let sr = load_ppm(o1.join(&name)).unwrap();
        let input = load_ppm(lr.join(&name)).unwrap();
        let [_, _, h, w] = input.shape();
        assert_eq!(sr.shape(), [1, 3, 4 * h, 4 * w]);
    }
    assert!(!o1.join(frame_name(5)).exists());
}

#[test]
fn corrupt_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (lr, _) = synth(&dir.path().join("syn"), 3);
    let run = dir.path().join("run");
    train_tiny(&run, 5, &[]);
    let mut bytes = std::fs::read(run.join("last.dksn")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let bad = dir.path().join("bad.dksn");
    std::fs::write(&bad, bytes).unwrap();
    let o = dksan(&["infer", "--checkpoint", s(&bad), "--data", s(&lr), "--out", s(&dir.path().join("sr"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).to_lowercase().contains("crc"), "{}", stderr(&o));
}

fn parse_table(out: &str) -> Vec<(String, f64)> {
    out.lines()
        .skip(1)
        .map(|l| {
            let mut parts = l.split_whitespace();
            (parts.next().unwrap().to_string(), parts.next().unwrap().parse().unwrap())
        })
        .collect()
}

#[test]
fn eval_identical_dirs_hit_the_cap() {
    let dir = tempfile::tempdir().unwrap();
    let (_, hr) = synth(&dir.path().join("syn"), 3);
    let o = dksan(&["eval", "--pred", s(&hr), "--gt", s(&hr)]);
    assert_eq!(code(&o), 0);
    let rows = parse_table(&stdout(&o));
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|(_, v)| *v == 99.0));
}

#[test]
fn eval_matches_in_process_psnr() {
    let dir = tempfile::tempdir().unwrap();
    let (lr, hr) = synth(&dir.path().join("syn"), 4);
    let pred = dir.path().join("bicubic");
    std::fs::create_dir_all(&pred).unwrap();
    let mut expect = Vec::new();
    for t in 0..4 {
        let name = frame_name(t);
        let up = bicubic_upscale(&load_ppm(lr.join(&name)).unwrap(), 4).unwrap().map(|v| v.clamp(0.0, 1.0));
        save_ppm(pred.join(&name), &up).unwrap();
        // compare against the quantized file, as the CLI sees it
        expect.push(psnr(&load_ppm(pred.join(&name)).unwrap(), &load_ppm(hr.join(&name)).unwrap()).unwrap());
    }
    let csv = dir.path().join("psnr.csv");
    let o = dksan(&["eval", "--pred", s(&pred), "--gt", s(&hr), "--csv", s(&csv)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = parse_table(&stdout(&o));
    for (t, want) in expect.iter().enumerate() {
        assert_eq!(rows[t].0, frame_name(t));
        assert!((rows[t].1 - want).abs() < 1e-3, "{} vs {want}", rows[t].1);
    }
    let mean = expect.iter().sum::<f64>() / 4.0;
    assert_eq!(rows[4].0, "Average");
    assert!((rows[4].1 - mean).abs() < 1e-3);

    let text = std::fs::read_to_string(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "frame,psnr");
    let vals: Vec<f64> = lines[1..5].iter().map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    let avg: f64 = lines[5].strip_prefix("Average,").unwrap().parse().unwrap();
    assert!((avg - vals.iter().sum::<f64>() / 4.0).abs() < 1e-5);
    for (v, want) in vals.iter().zip(&expect) {
        assert!((v - want).abs() < 1e-5);
    }
}

#[test]
fn eval_missing_prediction_is_listed() {
    let dir = tempfile::tempdir().unwrap();
    let (_, hr) = synth(&dir.path().join("syn"), 3);
    let pred = dir.path().join("pred");
    std::fs::create_dir_all(&pred).unwrap();
    for t in [0, 2] {
        std::fs::copy(hr.join(frame_name(t)), pred.join(frame_name(t))).unwrap();
    }
    let o = dksan(&["eval", "--pred", s(&pred), "--gt", s(&hr)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains(&frame_name(1)));
    let rows = parse_table(&stdout(&o));
    assert_eq!(rows.len(), 3);
}

#[test]
fn gradcheck_single_op_and_unknown_name() {
    let start = std::time::Instant::now();
    let o = dksan(&["gradcheck", "deformable_conv2d"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(start.elapsed().as_secs() < 60);
    assert!(stdout(&o).contains("deformable_conv2d"));

    let o = dksan(&["gradcheck", "deformable_conv3d"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("deformable_kernel_conv2d"));
}

#[test]
fn synth_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = synth(&dir.path().join("a"), 3);
    let (b, _) = synth(&dir.path().join("b"), 3);
    for t in 0..3 {
        assert_eq!(std::fs::read(a.join(frame_name(t))).unwrap(), std::fs::read(b.join(frame_name(t))).unwrap());
    }
}
