//! Training loop for the projection heads.
//!
//! Adam over both head weights and the log logit scale, one epoch at a time,
//! with validation-loss early stopping that restores the best weights.
//! Optimiser state and master parameters are `f64`; the projector used for
//! each forward pass is the `f32` rounding of the master copy.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::{clip_loss, clip_loss_grad, init_projector, DualProjector, ProjectionHead};
use crate::dataset::{batches, PairSet};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for a list of parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(group_sizes: &[usize]) -> Self {
        Self {
            m: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update applied in place to every group.
pub fn adam_step(
    state: &mut AdamState,
    cfg: &AdamConfig,
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape {
            op: "adam_step",
            left: format!("{} param groups", params.len()),
            right: format!("{} grad groups / {} state groups", grads.len(), state.m.len()),
        });
    }
    for (g, (p, (m, g_len))) in params
        .iter()
        .zip(state.m.iter().zip(grads.iter().map(|g| g.len())))
        .enumerate()
    {
        if p.len() != g_len || p.len() != m.len() {
            return Err(Error::Shape {
                op: "adam_step",
                left: format!("group {g}: {} params", p.len()),
                right: format!("{g_len} grads / {} moments", m.len()),
            });
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub early_stopping: bool,
    pub patience: usize,
    pub seed: u64,
    pub freeze_logit_scale: bool,
    /// Width of the shared retrieval space.
    pub d_out: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 5e-5,
            adam: AdamConfig::default(),
            early_stopping: true,
            patience: 3,
            seed: 42,
            freeze_logit_scale: false,
            d_out: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Argument("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.early_stopping && self.patience == 0 {
            return Err(Error::Argument("patience must be at least 1 with early stopping".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Argument(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if self.d_out == 0 {
            return Err(Error::Argument("d_out must be positive".into()));
        }
        Ok(())
    }
}

/// Patience counter over validation losses. Only strict improvements reset it.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records an epoch's validation loss; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochsExhausted,
    EarlyStopped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn epochs_run(&self) -> usize {
        self.train_loss.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    /// NaN when no validation ran; stored as JSON `null`.
    #[serde(deserialize_with = "nan_if_null")]
    pub best_val_loss: f64,
    /// Number of epochs actually run.
    pub epoch_reached: usize,
    /// 1-based epoch whose weights are stored.
    pub best_epoch: usize,
}

fn nan_if_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub projector: DualProjector,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn d_in(&self) -> usize {
        self.projector.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.projector.d_out()
    }
}

/// `f64` master copy of the trainable parameters.
struct Master {
    d_in: usize,
    d_out: usize,
    image: Vec<f64>,
    text: Vec<f64>,
    log_scale: [f64; 1],
}

impl Master {
    fn from_projector(p: &DualProjector) -> Self {
        Self {
            d_in: p.d_in(),
            d_out: p.d_out(),
            image: p.image_head.weight.data().iter().map(|&v| v as f64).collect(),
            text: p.text_head.weight.data().iter().map(|&v| v as f64).collect(),
            log_scale: [p.log_logit_scale as f64],
        }
    }

    fn projector(&self) -> DualProjector {
        let to_head = |w: &[f64]| {
            let data = w.iter().map(|&v| v as f32).collect();
            ProjectionHead::new(Matrix::new(self.d_in, self.d_out, data).expect("master shape"))
        };
        DualProjector {
            image_head: to_head(&self.image),
            text_head: to_head(&self.text),
            log_logit_scale: self.log_scale[0] as f32,
        }
    }
}

fn to_f64(m: &Matrix) -> Vec<f64> {
    m.data().iter().map(|&v| v as f64).collect()
}

/// Mean clip loss over validation batches in a fixed order.
pub fn validation_loss(p: &DualProjector, val: &PairSet, batch_size: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for b in batches(val, batch_size, seed, 0)? {
        total += clip_loss(p, &b.images, &b.texts)?.0;
        n += 1;
    }
    if n == 0 {
        return Err(Error::size("validation batches", 2, val.len()));
    }
    Ok(total / n as f64)
}

pub fn train(train_set: &PairSet, val_set: &PairSet, cfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    if train_set.len() < 2 {
        return Err(Error::size("training set", 2, train_set.len()));
    }
    if val_set.len() < 2 {
        return Err(Error::size("validation set", 2, val_set.len()));
    }
    if train_set.dim() != val_set.dim() {
        return Err(Error::shape("train", (train_set.len(), train_set.dim()), (val_set.len(), val_set.dim())));
    }

    let init = init_projector(train_set.dim(), cfg.d_out, cfg.seed)?;
    let mut master = Master::from_projector(&init);
    let sizes = [master.image.len(), master.text.len(), 1];
    let mut adam = AdamState::new(if cfg.freeze_logit_scale { &sizes[..2] } else { &sizes[..] });

    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = init.clone();
    let mut log = TrainLog {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        stop_reason: StopReason::EpochsExhausted,
        best_epoch: 0,
    };

    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        let mut steps = 0usize;
        for b in batches(train_set, cfg.batch_size, cfg.seed, epoch as u64)? {
            let g = clip_loss_grad(&master.projector(), &b.images, &b.texts)?;
            total += g.loss;
            steps += 1;
            let gi = to_f64(&g.image_weight);
            let gt = to_f64(&g.text_weight);
            let gs = [g.log_logit_scale];
            if cfg.freeze_logit_scale {
                adam_step(&mut adam, &cfg.adam, &mut [&mut master.image, &mut master.text], &[&gi, &gt], cfg.learning_rate)?;
            } else {
                adam_step(
                    &mut adam,
                    &cfg.adam,
                    &mut [&mut master.image, &mut master.text, &mut master.log_scale],
                    &[&gi, &gt, &gs],
                    cfg.learning_rate,
                )?;
            }
        }
        let current = master.projector();
        let val = validation_loss(&current, val_set, cfg.batch_size, cfg.seed)?;
        log.train_loss.push(total / steps as f64);
        log.val_loss.push(val);
        log::debug!("epoch {epoch}: train {:.6} val {val:.6}", total / steps as f64);

        if stopper.observe(epoch, val) {
            best = current;
        }
        if cfg.early_stopping && stopper.should_stop() {
            log.stop_reason = StopReason::EarlyStopped;
            break;
        }
    }
    log.best_epoch = stopper.best_epoch();

    let checkpoint = Checkpoint {
        projector: best,
        meta: CheckpointMeta {
            config: cfg.clone(),
            best_val_loss: stopper.best(),
            epoch_reached: log.epochs_run(),
            best_epoch: stopper.best_epoch(),
        },
    };
    Ok((checkpoint, log))
}

// ---------------------------------------------------------------------------
// Checkpoint files

pub fn write_checkpoint(c: &Checkpoint, w: &mut impl Write) -> Result<()> {
    let dim = |n: usize| u32::try_from(n).map_err(|_| Error::Format(format!("dimension {n} exceeds u32")));
    let p = &c.projector;
    if p.image_head.weight.shape() != p.text_head.weight.shape() {
        return Err(Error::shape("write_checkpoint", p.image_head.weight.shape(), p.text_head.weight.shape()));
    }
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&dim(c.d_in())?.to_le_bytes())?;
    w.write_all(&dim(c.d_out())?.to_le_bytes())?;
    for v in p.image_head.weight.data().iter().chain(p.text_head.weight.data()) {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&p.log_logit_scale.to_le_bytes())?;
    let meta = serde_json::to_vec(&c.meta)?;
    w.write_all(&dim(meta.len())?.to_le_bytes())?;
    w.write_all(&meta)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Format(format!("checkpoint truncated while reading {what}")));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("{what} size overflows")))?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parses a whole checkpoint; nothing is returned unless every field is valid.
pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let d_in = cur.u32("d_in")? as usize;
    let d_out = cur.u32("d_out")? as usize;
    if d_in == 0 || d_out == 0 {
        return Err(Error::Format(format!("invalid checkpoint shape {d_in}x{d_out}")));
    }
    let n = d_in
        .checked_mul(d_out)
        .ok_or_else(|| Error::Format("checkpoint shape overflows".into()))?;
    let image = Matrix::new(d_in, d_out, cur.f32s(n, "image weight")?)?;
    let text = Matrix::new(d_in, d_out, cur.f32s(n, "text weight")?)?;
    let log_logit_scale = f32::from_le_bytes(cur.take(4, "log_logit_scale")?.try_into().unwrap());
    let meta_len = cur.u32("metadata length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len, "metadata")?)
        .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    if !cur.buf.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", cur.buf.len())));
    }
    Ok(Checkpoint {
        projector: DualProjector::new(ProjectionHead::new(image), ProjectionHead::new(text), log_logit_scale)?,
        meta,
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(c, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
