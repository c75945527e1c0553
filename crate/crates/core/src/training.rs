//! Adam, the training loop, and resumable training state.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::autodiff::{Graph, ParamStore};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss_metrics::{charbonnier, psnr, CHARBONNIER_XI};
use crate::network::{put_name, put_tensor, seal, unseal, ByteReader, Checkpoint, Dksan, NetworkConfig};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: u64,
    pub batch: usize,
    pub lr_patch: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_grad: f64,
    pub cosine_decay: bool,
    pub val_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            steps: 2000,
            batch: 4,
            lr_patch: 24,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_grad: 0.0,
            cosine_decay: false,
            val_every: 250,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 12] = [
        "lr",
        "steps",
        "batch",
        "lr_patch",
        "seed",
        "beta1",
        "beta2",
        "eps",
        "clip_grad",
        "cosine_decay",
        "val_every",
        "checkpoint_every",
    ];

    /// Full-size schedule: 115k steps, batch 16, 32x32 LR patches.
    pub fn paper() -> Self {
        Self {
            steps: 115_000,
            batch: 16,
            lr_patch: 32,
            val_every: 5000,
            checkpoint_every: 5000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.steps > 0
            && self.batch > 0
            && self.lr_patch > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_grad >= 0.0
            && self.val_every > 0
            && self.checkpoint_every > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid training config:\n{self}")))
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn p<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
            v.trim()
                .parse()
                .map_err(|_| Error::contract(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "lr" => self.lr = p(key, value)?,
            "steps" => self.steps = p(key, value)?,
            "batch" => self.batch = p(key, value)?,
            "lr_patch" => self.lr_patch = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "beta1" => self.beta1 = p(key, value)?,
            "beta2" => self.beta2 = p(key, value)?,
            "eps" => self.eps = p(key, value)?,
            "clip_grad" => self.clip_grad = p(key, value)?,
            "cosine_decay" => self.cosine_decay = p(key, value)?,
            "val_every" => self.val_every = p(key, value)?,
            "checkpoint_every" => self.checkpoint_every = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.lr.to_string()),
            ("steps", self.steps.to_string()),
            ("batch", self.batch.to_string()),
            ("lr_patch", self.lr_patch.to_string()),
            ("seed", self.seed.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("clip_grad", self.clip_grad.to_string()),
            ("cosine_decay", self.cosine_decay.to_string()),
            ("val_every", self.val_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::contract(format!("config line without '=': {line:?}")))?;
            if !cfg.set(k.trim(), v)? {
                return Err(Error::contract(format!("unknown training key {k:?}")));
            }
        }
        Ok(cfg)
    }

    /// Learning rate for a zero-based step.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.cosine_decay {
            let frac = (step as f64 / self.steps as f64).min(1.0);
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
        } else {
            self.lr
        }
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_pairs() {
            writeln!(f, "{k:<22} {v}")?;
        }
        Ok(())
    }
}

/// Bias-corrected Adam moments, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore<f32>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One Adam update from the gradients held in `store`. Gradients are left
/// as they are. A non-finite gradient aborts before anything changes.
pub fn adam_step(store: &mut ParamStore<f32>, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::contract("Adam state does not match the parameter set"));
    }
    for (_, p) in store.iter() {
        if let Some(i) = p.grad.as_slice().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("adam_step gradient of {}", p.name),
                index: i,
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        let mut m = std::mem::replace(&mut state.m[i], Tensor::scalar(0.0)).into_vec();
        let mut v = std::mem::replace(&mut state.v[i], Tensor::scalar(0.0)).into_vec();
        let shape = p.value.shape();
        let mut w = std::mem::replace(&mut p.value, Tensor::scalar(0.0)).into_vec();
        for (j, &g) in p.grad.as_slice().iter().enumerate() {
            let g = g as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * g;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * g * g;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
            w[j] = (w[j] as f64 - update) as f32;
        }
        state.m[i] = Tensor::from_vec(shape, m)?;
        state.v[i] = Tensor::from_vec(shape, v)?;
        p.value = Tensor::from_vec(shape, w).map_err(|_| Error::NonFinite {
            op: format!("adam_step update of {}", p.name),
            index: 0,
        })?;
    }
    Ok(())
}

/// Scales all gradients so the global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore<f32>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let mut factor = max_norm / norm;
        loop {
            for p in store.iter_mut() {
                p.grad = p.grad.map(|g| (g as f64 * factor) as f32);
            }
            // rounding can leave the result a hair above the threshold
            if store.grad_norm() <= max_norm {
                break;
            }
            factor = 1.0 - 1e-6;
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// One CSV log row.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub psnr_val: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "step,loss,psnr_val,lr,seconds";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let psnr = self.psnr_val.map(|p| format!("{p:.4}")).unwrap_or_default();
        format!("{},{:.8},{},{:e},{:.3}", self.step, self.loss, psnr, self.lr, self.seconds)
    }
}

/// Network, parameters, optimizer, and sampling stream.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: Dksan,
    pub store: ParamStore<f32>,
    pub adam: AdamState,
    pub rng: Rng,
    /// Steps completed so far.
    pub step: u64,
    pub best_psnr: f64,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, net_cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let (net, store) = Dksan::new::<f32>(net_cfg, cfg.seed)?;
        let adam = AdamState::new(&store, cfg.beta1, cfg.beta2, cfg.eps);
        Ok(Self {
            cfg: cfg.clone(),
            net,
            store,
            adam,
            rng: Rng::new(cfg.seed).fork(0x7261_696e),
            step: 0,
            best_psnr: f64::NEG_INFINITY,
        })
    }

    /// Sample a batch, forward, Charbonnier loss, backward, Adam.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepStats> {
        if data.frames != self.net.cfg.frames {
            return Err(Error::contract(format!(
                "dataset windows have {} frames, network expects {}",
                data.frames, self.net.cfg.frames
            )));
        }
        let batch = data.sample_batch(self.cfg.batch, self.cfg.lr_patch, &mut self.rng)?;
        let mut g = Graph::new();
        let x = g.constant(batch.lr);
        let target = g.constant(batch.hr);
        let y = self.net.forward(&mut g, &self.store, x)?;
        let loss = charbonnier(&mut g, y, target, CHARBONNIER_XI)?;
        let loss_value = g.value(loss).as_slice()[0] as f64;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                op: "training loss".into(),
                index: 0,
            });
        }
        self.store.zero_grad();
        g.backward_into(loss, &mut self.store)?;
        let grad_norm = if self.cfg.clip_grad > 0.0 {
            clip_grad_norm(&mut self.store, self.cfg.clip_grad)
        } else {
            self.store.grad_norm()
        };
        let lr = self.cfg.lr_at(self.step);
        adam_step(&mut self.store, &mut self.adam, lr)?;
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss: loss_value,
            lr,
            grad_norm,
        })
    }

    /// Mean PSNR of clamped full-frame outputs over every window.
    pub fn validate(&self, val: &Dataset) -> Result<f64> {
        evaluate(&self.net, &self.store, val)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.net.cfg, &self.store)
    }

    /// Complete resumable state: configs, parameters, Adam moments, the
    /// sampling stream position, and step counters.
    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&STATE_VERSION.to_le_bytes());
        for text in [self.net.cfg.to_text(), self.cfg.to_text()] {
            out.extend_from_slice(&(text.len() as u32).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        let (seed, counter) = self.rng.state();
        for v in [self.step, seed, counter, self.adam.t, self.best_psnr.to_bits()] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (i, (_, p)) in self.store.iter().enumerate() {
            put_name(&mut out, &p.name);
            put_tensor(&mut out, &p.value);
            put_tensor(&mut out, &self.adam.m[i]);
            put_tensor(&mut out, &self.adam.v[i]);
        }
        seal(out)
    }

    pub fn from_state_bytes(bytes: &[u8]) -> Result<Self> {
        let body = unseal(bytes)?;
        let mut r = ByteReader { buf: body, pos: 0 };
        if r.take(4)? != STATE_MAGIC {
            return Err(Error::Checkpoint("bad magic, not a training state file".into()));
        }
        let version = r.u32()?;
        if version != STATE_VERSION {
            return Err(Error::Checkpoint(format!("unsupported state version {version}")));
        }
        let mut text = || -> Result<String> {
            let n = r.u32()? as usize;
            String::from_utf8(r.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
        };
        let net_cfg = NetworkConfig::from_text(&text()?)?;
        let cfg = TrainConfig::from_text(&text()?)?;
        let mut t = Self::new(&cfg, &net_cfg)?;
        t.step = r.u64()?;
        let (seed, counter) = (r.u64()?, r.u64()?);
        t.rng = Rng::from_state(seed, counter);
        t.adam.t = r.u64()?;
        t.best_psnr = f64::from_bits(r.u64()?);
        let count = r.u32()? as usize;
        if count != t.store.len() {
            return Err(Error::Checkpoint(format!("{count} parameters in state, network has {}", t.store.len())));
        }
        for i in 0..count {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let id = t
                .store
                .id(&name)
                .filter(|id| id.index() == i)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name} at position {i}")))?;
            t.store.set_value(id, r.tensor()?)?;
            t.adam.m[i] = r.tensor()?;
            t.adam.v[i] = r.tensor()?;
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes in training state".into()));
        }
        Ok(t)
    }

    pub fn save_state(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.state_bytes())?;
        Ok(())
    }

    pub fn load_state(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_state_bytes(&std::fs::read(path)?)
    }
}

const STATE_MAGIC: &[u8; 4] = b"DKST";
const STATE_VERSION: u32 = 1;

/// Mean PSNR of the clamped network output over every window of `val`.
pub fn evaluate(net: &Dksan, store: &ParamStore<f32>, val: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for b in val.full_batches()? {
        let y = net.infer(store, &b.lr)?;
        total += psnr(&y, &b.hr)?;
    }
    Ok(total / val.len() as f64)
}

/// Where a run writes its outputs.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join("best.dksn")
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last.dksn")
    }

    pub fn state(&self) -> PathBuf {
        self.dir.join("state.dkst")
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub rows: Vec<LogRow>,
    pub final_psnr: f64,
    pub best_psnr: f64,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }
}

/// Runs the trainer until `trainer.cfg.steps` steps are done.
///
/// Validation happens every `val_every` steps and at the last step; the
/// best-PSNR checkpoint, the latest checkpoint, resumable state and the CSV
/// log go to `files` when given. A failing step returns its error and
/// leaves previously written files intact.
pub fn train(
    trainer: &mut Trainer,
    data: &Dataset,
    val: &Dataset,
    files: Option<&RunFiles>,
    mut on_row: impl FnMut(&LogRow),
) -> Result<TrainReport> {
    if data.is_empty() || val.is_empty() {
        return Err(Error::contract("training needs nonempty train and validation sets"));
    }
    let mut log = match files {
        Some(f) => {
            let resuming = trainer.step > 0 && f.log().exists();
            let mut file = std::fs::OpenOptions::new()
                .create(true)
                .append(resuming)
                .write(true)
                .truncate(!resuming)
                .open(f.log())?;
            if !resuming {
                writeln!(file, "{LOG_HEADER}")?;
            }
            Some(file)
        }
        None => None,
    };
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut final_psnr = f64::NAN;
    while trainer.step < trainer.cfg.steps {
        let stats = trainer.train_step(data)?;
        let last = stats.step == trainer.cfg.steps;
        let psnr_val = if stats.step % trainer.cfg.val_every == 0 || last {
            let p = trainer.validate(val)?;
            if p > trainer.best_psnr {
                trainer.best_psnr = p;
                if let Some(f) = files {
                    trainer.checkpoint().save(f.best())?;
                }
            }
            final_psnr = p;
            Some(p)
        } else {
            None
        };
        let row = LogRow {
            step: stats.step,
            loss: stats.loss,
            psnr_val,
            lr: stats.lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(file) = log.as_mut() {
            writeln!(file, "{}", row.to_csv())?;
        }
        if let Some(f) = files {
            if stats.step % trainer.cfg.checkpoint_every == 0 || last {
                trainer.checkpoint().save(f.last())?;
                trainer.save_state(f.state())?;
            }
        }
        on_row(&row);
        rows.push(row);
    }
    Ok(TrainReport {
        rows,
        final_psnr,
        best_psnr: trainer.best_psnr,
    })
}
