//! Training loops for both stages: masking, the masked-token objective,
//! AdamW with a cosine schedule and global-norm clipping, loss-history
//! CSVs, checkpointing and exact resume.
//!
//! All randomness (batch order, masks) is derived from `(seed, epoch)` or
//! `(seed, step)`, so a run resumed from a checkpoint replays exactly the
//! same batches as an uninterrupted one.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Error, Result};
use crate::nn::Rng64;
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::optim::{AdamConfig, AdamW, CosineSchedule};
use crate::signal::{dominant_bins, PatchGrid};
use crate::ssm::{Backbone, SsmConfig};
use crate::tokenizer::{PatchBatch, PreparedSample, TokenGrid, Tokenizer, TokenizerConfig};

const SHUFFLE_STREAM: u64 = 1;
const MASK_STREAM: u64 = 2;

/// Seeded generator for one `(stream, index)` slot of a run.
pub fn derived_rng(seed: u64, stream: u64, index: u64) -> Rng64 {
    let mut rng = Rng64::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

/// Bernoulli(r) mask over a `rows x cols` grid of cells.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPattern {
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<bool>,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskPattern {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }
}

pub fn sample_mask(rows: usize, cols: usize, r: f64, seed: u64) -> Result<MaskPattern> {
    if !(0.0..=1.0).contains(&r) {
        return invalid(format!("mask ratio {r} outside [0, 1]"));
    }
    let mut rng = Rng64::seed_from_u64(seed);
    let bits = (0..rows * cols).map(|_| rng.random::<f64>() < r).collect();
    Ok(MaskPattern { rows, cols, bits, ratio: r, seed })
}

/// Mean over masked rows of `CE(logits_t, z_t) + CE(logits_f, z_f)`.
pub fn masked_token_loss(
    tape: &mut Tape,
    logits_t: Var,
    logits_f: Var,
    z_t: &[usize],
    z_f: &[usize],
    mask: &[bool],
) -> Result<Var> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return invalid("mask selects no positions");
    }
    let w: Vec<f64> = mask.iter().map(|&m| if m { 1.0 / n as f64 } else { 0.0 }).collect();
    let lt = tape.cross_entropy(logits_t, z_t, &w)?;
    let lf = tape.cross_entropy(logits_f, z_f, &w)?;
    Ok(tape.add(lt, lf))
}

/// Top-1 accuracy of `logits` rows against `targets` over masked rows.
pub fn masked_accuracy(logits: &[f64], classes: usize, targets: &[usize], mask: &[bool]) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let row = &logits[i * classes..(i + 1) * classes];
        let best = (0..classes).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        hit += usize::from(best == targets[i]);
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Training stops after this epoch even if `epochs` is larger.
    pub stop_epoch: Option<usize>,
    /// Hard cap on optimizer steps; also shortens the cosine horizon.
    pub max_steps: Option<usize>,
    /// Linear ramp from `peak / warmup` to `peak` before the cosine decay.
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn tokenizer_paper() -> Self {
        Self {
            batch_size: 256,
            peak_lr: 1e-4,
            min_lr: 1e-5,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-4,
            epochs: 20,
            stop_epoch: None,
            max_steps: None,
            warmup_steps: 0,
            clip_norm: 5.0,
            mask_ratio: 0.5,
            seed: 0,
        }
    }

    pub fn tokenizer_desk() -> Self {
        Self { batch_size: 32, peak_lr: 3e-3, min_lr: 3e-4, epochs: 200, max_steps: Some(200), ..Self::tokenizer_paper() }
    }

    pub fn ssm_paper() -> Self {
        Self {
            batch_size: 256,
            peak_lr: 1e-4,
            min_lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-3,
            epochs: 10,
            stop_epoch: Some(10),
            max_steps: None,
            warmup_steps: 0,
            clip_norm: 5.0,
            mask_ratio: 0.5,
            seed: 0,
        }
    }

    pub fn ssm_desk() -> Self {
        Self { batch_size: 8, peak_lr: 3e-3, min_lr: 3e-4, epochs: 1000, stop_epoch: None, max_steps: Some(500), ..Self::ssm_paper() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return invalid("batch size must be positive");
        }
        if !(self.peak_lr >= self.min_lr && self.min_lr >= 0.0) {
            return invalid(format!("need peak lr >= min lr >= 0, got {} / {}", self.peak_lr, self.min_lr));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return invalid(format!("mask ratio {} outside (0, 1)", self.mask_ratio));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return invalid("optimizer betas must lie in [0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return invalid("clip norm must be positive");
        }
        if self.epochs == 0 {
            return invalid("epochs must be positive");
        }
        Ok(())
    }

    pub fn schedule(&self, total: usize) -> Result<LrSchedule> {
        if self.warmup_steps >= total.max(1) {
            return invalid(format!("warmup of {} steps leaves no room in {total} steps", self.warmup_steps));
        }
        let cosine = CosineSchedule::new(self.peak_lr, self.min_lr, (total - self.warmup_steps) as u64)?;
        Ok(LrSchedule { warmup: self.warmup_steps, cosine })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    /// Total optimizer steps for a dataset of `n` samples.
    pub fn total_steps(&self, n: usize) -> Result<usize> {
        let per_epoch = n / self.batch_size;
        if per_epoch == 0 {
            return invalid(format!("{n} samples do not fill one batch of {}", self.batch_size));
        }
        let epochs = self.stop_epoch.map_or(self.epochs, |s| s.min(self.epochs));
        let total = per_epoch * epochs;
        Ok(self.max_steps.map_or(total, |m| m.min(total)))
    }
}

/// Optional linear warmup followed by cosine decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub warmup: usize,
    pub cosine: CosineSchedule,
}

impl LrSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            self.cosine.peak * (step + 1) as f64 / self.warmup as f64
        } else {
            self.cosine.lr((step - self.warmup) as u64)
        }
    }
}

/// Batch indices of global step `step`: a fresh permutation every epoch,
/// incomplete tail batches dropped.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let per_epoch = n / batch;
    let epoch = step / per_epoch;
    let within = step % per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(seed, SHUFFLE_STREAM, epoch as u64));
    order[within * batch..(within + 1) * batch].to_vec()
}

/// Where periodic and last-good checkpoints go.
#[derive(Debug, Clone, Default)]
pub struct CheckpointPolicy {
    pub dir: Option<PathBuf>,
    pub every: Option<usize>,
}

impl CheckpointPolicy {
    fn periodic(&self, step: usize, ck: impl FnOnce() -> Checkpoint) -> Result<()> {
        if let (Some(dir), Some(every)) = (&self.dir, self.every) {
            if every > 0 && step % every == 0 {
                ck().save(&dir.join(format!("step-{step:06}")))?;
            }
        }
        Ok(())
    }

    fn last_good(&self, ck: impl FnOnce() -> Checkpoint) -> Result<()> {
        if let Some(dir) = &self.dir {
            ck().save(&dir.join("last-good"))?;
        }
        Ok(())
    }
}

fn stores_finite(store: &ParamStore) -> bool {
    store.iter().all(|(_, t)| t.all_finite())
}

fn grads_finite(store: &ParamStore) -> bool {
    store.iter().all(|(_, t)| t.grad().is_none_or(|g| g.iter().all(|v| v.is_finite())))
}

/// Mean of `values[from..to]` (clamped), used for loss-window comparisons.
pub fn window_mean(values: &[f64], from: usize, to: usize) -> f64 {
    let to = to.min(values.len());
    let from = from.min(to);
    if from == to {
        return f64::NAN;
    }
    values[from..to].iter().sum::<f64>() / (to - from) as f64
}

// ---------------------------------------------------------------- stage 1

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneRow {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub freq_recon: f64,
    pub amp_recon: f64,
    pub phase_recon: f64,
    pub temporal_recon: f64,
    pub contrastive: f64,
    pub codebook: f64,
    pub grad_norm: f64,
    pub unused_t: usize,
    pub unused_f: usize,
}

/// Unused codes over the training set, measured with the model as it
/// stands at the end of an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochUsage {
    pub epoch: usize,
    pub unused_t: usize,
    pub unused_f: usize,
}

pub fn stage_one_csv(rows: &[StageOneRow]) -> String {
    let mut s = String::from(
        "step,lr,total,freq_recon,amp_recon,phase_recon,temporal_recon,contrastive,codebook,grad_norm,unused_t,unused_f\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{:e},{},{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.lr,
            r.total,
            r.freq_recon,
            r.amp_recon,
            r.phase_recon,
            r.temporal_recon,
            r.contrastive,
            r.codebook,
            r.grad_norm,
            r.unused_t,
            r.unused_f
        ));
    }
    s
}

pub fn epoch_usage_csv(rows: &[EpochUsage]) -> String {
    let mut s = String::from("epoch,unused_t,unused_f\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.unused_t, r.unused_f));
    }
    s
}

/// Stage-1 optimizer state around a [`Tokenizer`].
#[derive(Debug, Clone)]
pub struct TokenizerTrainer {
    pub model: Tokenizer,
    pub train: TrainConfig,
    pub opt: AdamW,
    pub step: usize,
    pub history: Vec<StageOneRow>,
    pub epochs: Vec<EpochUsage>,
    pub policy: CheckpointPolicy,
    model_seed: u64,
}

impl TokenizerTrainer {
    pub fn new(model_cfg: TokenizerConfig, train: TrainConfig, model_seed: u64) -> Result<Self> {
        train.validate()?;
        let mut model = Tokenizer::new(model_cfg, model_seed)?;
        model.normalize_codes();
        let opt = AdamW::new(train.adam(), &model.store);
        Ok(Self { model, train, opt, step: 0, history: Vec::new(), epochs: Vec::new(), policy: Default::default(), model_seed })
    }

    /// The identity of a run: resuming with anything else is refused.
    pub fn run_config(&self) -> serde_json::Value {
        serde_json::json!({ "model": self.model.cfg, "train": self.train, "model_seed": self.model_seed })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("tokenizer-train", self.run_config());
        ck.step = self.step as u64;
        ck.losses = self.history.iter().map(|r| r.total).collect();
        ck.push_store("param/", &self.model.store);
        ck.push_optimizer("opt/", &self.model.store, &self.opt);
        ck.extra = serde_json::json!({
            "history": self.history,
            "epochs": self.epochs,
            "usage_temporal": self.model.temporal.usage,
            "usage_frequency": self.model.frequency.usage,
        });
        ck
    }

    /// Resumes a run; `expected` must hash to the stored run config.
    pub fn resume(ck: &Checkpoint, model_cfg: TokenizerConfig, train: TrainConfig, model_seed: u64) -> Result<Self> {
        if ck.kind != "tokenizer-train" {
            return Err(Error::Format(format!("expected a tokenizer training checkpoint, found {}", ck.kind)));
        }
        let mut t = Self::new(model_cfg, train, model_seed)?;
        ck.ensure_config(&t.run_config())?;
        ck.restore_store("param/", &mut t.model.store)?;
        ck.restore_optimizer("opt/", &t.model.store, &mut t.opt)?;
        t.step = ck.step as usize;
        t.opt.step = ck.step;
        let get = |k: &str| ck.extra.get(k).cloned().unwrap_or(serde_json::Value::Null);
        t.history = serde_json::from_value(get("history"))?;
        t.epochs = serde_json::from_value(get("epochs"))?;
        t.model.temporal.usage = serde_json::from_value(get("usage_temporal"))?;
        t.model.frequency.usage = serde_json::from_value(get("usage_frequency"))?;
        Ok(t)
    }

    /// Runs until `until` steps in total (or the configured end).
    pub fn run(&mut self, data: &[PreparedSample], until: Option<usize>) -> Result<()> {
        let total = self.train.total_steps(data.len())?;
        let end = until.map_or(total, |u| u.min(total));
        let sched = self.train.schedule(total)?;
        let per_epoch = data.len() / self.train.batch_size;
        while self.step < end {
            if self.step % per_epoch == 0 {
                self.model.temporal.reset_usage();
                self.model.frequency.reset_usage();
            }
            self.train_step(data, &sched)?;
            if self.step % per_epoch == 0 {
                let (unused_t, unused_f) = dataset_unused(&self.model, data, self.train.batch_size)?;
                self.epochs.push(EpochUsage { epoch: self.step / per_epoch, unused_t, unused_f });
            }
            let snapshot = || self.to_checkpoint();
            self.policy.periodic(self.step, snapshot)?;
        }
        Ok(())
    }

    fn train_step(&mut self, data: &[PreparedSample], sched: &LrSchedule) -> Result<()> {
        let step = self.step;
        let lr = sched.lr(step);
        let idx = batch_indices(data.len(), self.train.batch_size, self.train.seed, step);
        let picked: Vec<&PreparedSample> = idx.iter().map(|&i| &data[i]).collect();
        let batch = PatchBatch::new(&picked)?;
        let mut tape = Tape::new();
        let out = self.model.forward(&mut tape, &batch)?;
        let l = &out.loss;
        let parts: Vec<f64> = [l.total, l.freq_recon, l.temporal_recon, l.contrastive, l.codebook, l.amp_recon, l.phase_recon]
            .iter()
            .map(|&v| tape.value(v)[0])
            .collect();
        let total = parts[0];
        if !total.is_finite() {
            return self.diverged(step);
        }
        let grads = tape.backward(out.loss.total)?;
        let before = self.model.store.clone();
        self.model.store.zero_grad();
        self.model.store.accumulate(&grads);
        if !grads_finite(&self.model.store) {
            return self.diverged(step);
        }
        let grad_norm = self.model.store.clip_grad_norm(self.train.clip_norm);
        self.opt.update(&mut self.model.store, lr)?;
        if !stores_finite(&self.model.store) {
            self.model.store = before;
            return self.diverged(step);
        }
        self.model.normalize_codes();
        self.model.temporal.record(&out.idx_t);
        self.model.frequency.record(&out.idx_f);
        self.history.push(StageOneRow {
            step: step + 1,
            lr,
            total,
            freq_recon: parts[1],
            amp_recon: parts[5],
            phase_recon: parts[6],
            temporal_recon: parts[2],
            contrastive: parts[3],
            codebook: parts[4],
            grad_norm,
            unused_t: self.model.temporal.usage_report().unused,
            unused_f: self.model.frequency.usage_report().unused,
        });
        self.step += 1;
        Ok(())
    }

    fn diverged<T>(&mut self, step: usize) -> Result<T> {
        let ck = self.to_checkpoint();
        self.policy.last_good(|| ck)?;
        Err(Error::Divergence { step: step + 1 })
    }

    pub fn totals(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.total).collect()
    }
}

/// Codes of each book that no patch of `data` selects under the current
/// model.
pub fn dataset_unused(model: &Tokenizer, data: &[PreparedSample], chunk: usize) -> Result<(usize, usize)> {
    let k = model.cfg.codebook_size;
    let (mut seen_t, mut seen_f) = (vec![false; k], vec![false; k]);
    for part in data.chunks(chunk.max(1)) {
        let refs: Vec<&PreparedSample> = part.iter().collect();
        let b = PatchBatch::new(&refs)?;
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, &b)?;
        let proj = model.project(&mut tape, enc);
        let pv: Vec<f32> = tape.value(proj).iter().map(|&v| v as f32).collect();
        model.temporal.nearest_rows(&model.store, &pv)?.into_iter().for_each(|j| seen_t[j] = true);
        model.frequency.nearest_rows(&model.store, &pv)?.into_iter().for_each(|j| seen_f[j] = true);
    }
    let unused = |s: &[bool]| s.iter().filter(|&&u| !u).count();
    Ok((unused(&seen_t), unused(&seen_f)))
}

/// Trains a fresh tokenizer over the whole configured schedule.
pub fn train_tokenizer(
    model_cfg: TokenizerConfig,
    train: TrainConfig,
    data: &[PreparedSample],
    policy: CheckpointPolicy,
) -> Result<TokenizerTrainer> {
    let mut t = TokenizerTrainer::new(model_cfg, train.clone(), train.seed)?;
    t.policy = policy;
    t.run(data, None)?;
    Ok(t)
}

// ---------------------------------------------------------------- stage 2

/// Patches and target tokens of one sample, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedSample {
    pub seq: usize,
    pub patch_len: usize,
    pub patches: Vec<f32>,
    pub z_t: Vec<usize>,
    pub z_f: Vec<usize>,
    pub label: Option<i32>,
}

impl TokenizedSample {
    pub fn new(grid: &PatchGrid, tokens: &TokenGrid, label: Option<i32>) -> Result<Self> {
        if tokens.len() != grid.len() {
            return invalid(format!("{} tokens for {} patches", tokens.len(), grid.len()));
        }
        Ok(Self {
            seq: grid.len(),
            patch_len: grid.patch_len,
            patches: grid.data.clone(),
            z_t: tokens.z_t.clone(),
            z_f: tokens.z_f.clone(),
            label,
        })
    }

    /// Targets from a frozen tokenizer.
    pub fn from_tokenizer(tok: &Tokenizer, grid: &PatchGrid, label: Option<i32>) -> Result<Self> {
        Self::new(grid, &tok.tokenize(grid)?, label)
    }
}

/// Tokens that a model can infer from visible context: `z_t` is the
/// dominant rFFT bin of each patch and `z_f` the runner-up.
pub fn planted_tokens(grid: &PatchGrid) -> Result<TokenGrid> {
    let mut z_t = Vec::with_capacity(grid.len());
    let mut z_f = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let (a, b) = dominant_bins(grid.flat(i))?;
        z_t.push(a);
        z_f.push(b);
    }
    Ok(TokenGrid { channels: grid.channels, per_channel: grid.per_channel, z_t, z_f })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTwoRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub acc_t: f64,
    pub acc_f: f64,
    pub masked: usize,
    pub grad_norm: f64,
}

pub fn stage_two_csv(rows: &[StageTwoRow]) -> String {
    let mut s = String::from("step,lr,loss,acc_t,acc_f,masked,grad_norm\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:e},{},{},{},{},{}\n",
            r.step, r.lr, r.loss, r.acc_t, r.acc_f, r.masked, r.grad_norm
        ));
    }
    s
}

/// A stacked batch of tokenized samples.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub seq: usize,
    pub patches: Tensor,
    pub z_t: Vec<usize>,
    pub z_f: Vec<usize>,
}

impl TokenBatch {
    pub fn new(samples: &[&TokenizedSample]) -> Result<Self> {
        let Some(first) = samples.first() else { return invalid("empty batch") };
        let (seq, t) = (first.seq, first.patch_len);
        if samples.iter().any(|s| s.seq != seq || s.patch_len != t) {
            return invalid("samples in a batch must share sequence and patch length");
        }
        let mut data = Vec::with_capacity(samples.len() * seq * t);
        let (mut z_t, mut z_f) = (Vec::new(), Vec::new());
        for s in samples {
            data.extend_from_slice(&s.patches);
            z_t.extend_from_slice(&s.z_t);
            z_f.extend_from_slice(&s.z_f);
        }
        Ok(Self { seq, patches: Tensor::new(vec![samples.len() * seq, t], data)?, z_t, z_f })
    }

    pub fn rows(&self) -> usize {
        self.z_t.len()
    }
}

/// Mask of step `step`; redrawn (deterministically) if it came out empty.
pub fn step_mask(rows: usize, ratio: f64, seed: u64, step: usize) -> Result<MaskPattern> {
    for attempt in 0..64u64 {
        let s = derived_rng(seed, MASK_STREAM, step as u64 * 64 + attempt).random::<u64>();
        let m = sample_mask(1, rows, ratio, s)?;
        if m.count() > 0 {
            return Ok(m);
        }
    }
    invalid(format!("mask ratio {ratio} keeps producing empty masks"))
}

/// Loss and accuracies of one masked forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedEval {
    pub loss: f64,
    pub acc_t: f64,
    pub acc_f: f64,
}

/// Masked-prediction loss and accuracy over `data` without updating.
pub fn evaluate_masked(model: &Backbone, data: &[TokenizedSample], ratio: f64, seed: u64) -> Result<MaskedEval> {
    let (mut loss, mut at, mut af, mut n) = (0.0, 0.0, 0.0, 0.0);
    for (i, s) in data.iter().enumerate() {
        let b = TokenBatch::new(&[s])?;
        let mask = step_mask(b.rows(), ratio, seed, i)?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &b.patches, Some(&mask.bits), b.seq)?;
        let l = masked_token_loss(&mut tape, out.logits_t, out.logits_f, &b.z_t, &b.z_f, &mask.bits)?;
        let k = model.cfg.codebook_size;
        let w = mask.count() as f64;
        loss += tape.value(l)[0] * w;
        at += masked_accuracy(tape.value(out.logits_t), k, &b.z_t, &mask.bits) * w;
        af += masked_accuracy(tape.value(out.logits_f), k, &b.z_f, &mask.bits) * w;
        n += w;
    }
    if n == 0.0 {
        return invalid("nothing to evaluate");
    }
    Ok(MaskedEval { loss: loss / n, acc_t: at / n, acc_f: af / n })
}

/// Stage-2 optimizer state around a [`Backbone`].
#[derive(Debug, Clone)]
pub struct SsmTrainer {
    pub model: Backbone,
    pub train: TrainConfig,
    pub opt: AdamW,
    pub step: usize,
    pub history: Vec<StageTwoRow>,
    pub policy: CheckpointPolicy,
    /// Hash of the frozen tokenizer the targets came from, if any.
    pub tokenizer_hash: Option<String>,
    model_seed: u64,
}

impl SsmTrainer {
    pub fn new(model_cfg: SsmConfig, train: TrainConfig, model_seed: u64) -> Result<Self> {
        train.validate()?;
        let model = Backbone::new(model_cfg, model_seed)?;
        let opt = AdamW::new(train.adam(), &model.store);
        Ok(Self {
            model,
            train,
            opt,
            step: 0,
            history: Vec::new(),
            policy: Default::default(),
            tokenizer_hash: None,
            model_seed,
        })
    }

    pub fn run_config(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.model.cfg,
            "train": self.train,
            "model_seed": self.model_seed,
            "tokenizer": self.tokenizer_hash,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("eegssm-train", self.run_config());
        ck.step = self.step as u64;
        ck.losses = self.history.iter().map(|r| r.loss).collect();
        ck.push_store("param/", &self.model.store);
        ck.push_optimizer("opt/", &self.model.store, &self.opt);
        ck.extra = serde_json::json!({ "history": self.history });
        ck
    }

    pub fn resume(
        ck: &Checkpoint,
        model_cfg: SsmConfig,
        train: TrainConfig,
        model_seed: u64,
        tokenizer_hash: Option<String>,
    ) -> Result<Self> {
        if ck.kind != "eegssm-train" {
            return Err(Error::Format(format!("expected an eegssm training checkpoint, found {}", ck.kind)));
        }
        let mut t = Self::new(model_cfg, train, model_seed)?;
        t.tokenizer_hash = tokenizer_hash;
        ck.ensure_config(&t.run_config())?;
        ck.restore_store("param/", &mut t.model.store)?;
        ck.restore_optimizer("opt/", &t.model.store, &mut t.opt)?;
        t.step = ck.step as usize;
        t.opt.step = ck.step;
        t.history = serde_json::from_value(ck.extra.get("history").cloned().unwrap_or_default())?;
        Ok(t)
    }

    pub fn run(&mut self, data: &[TokenizedSample], until: Option<usize>) -> Result<()> {
        let total = self.train.total_steps(data.len())?;
        let end = until.map_or(total, |u| u.min(total));
        let sched = self.train.schedule(total)?;
        while self.step < end {
            self.train_step(data, &sched)?;
            let snapshot = || self.to_checkpoint();
            self.policy.periodic(self.step, snapshot)?;
        }
        Ok(())
    }

    fn train_step(&mut self, data: &[TokenizedSample], sched: &LrSchedule) -> Result<()> {
        let step = self.step;
        let lr = sched.lr(step);
        let idx = batch_indices(data.len(), self.train.batch_size, self.train.seed, step);
        let picked: Vec<&TokenizedSample> = idx.iter().map(|&i| &data[i]).collect();
        let b = TokenBatch::new(&picked)?;
        let mask = step_mask(b.rows(), self.train.mask_ratio, self.train.seed, step)?;
        let mut tape = Tape::new();
        let out = self.model.forward(&mut tape, &b.patches, Some(&mask.bits), b.seq)?;
        let l = masked_token_loss(&mut tape, out.logits_t, out.logits_f, &b.z_t, &b.z_f, &mask.bits)?;
        let loss = tape.value(l)[0];
        if !loss.is_finite() {
            return self.diverged(step);
        }
        let k = self.model.cfg.codebook_size;
        let acc_t = masked_accuracy(tape.value(out.logits_t), k, &b.z_t, &mask.bits);
        let acc_f = masked_accuracy(tape.value(out.logits_f), k, &b.z_f, &mask.bits);
        let grads = tape.backward(l)?;
        let before = self.model.store.clone();
        self.model.store.zero_grad();
        self.model.store.accumulate(&grads);
        if !grads_finite(&self.model.store) {
            return self.diverged(step);
        }
        let grad_norm = self.model.store.clip_grad_norm(self.train.clip_norm);
        self.opt.update(&mut self.model.store, lr)?;
        if !stores_finite(&self.model.store) {
            self.model.store = before;
            return self.diverged(step);
        }
        self.history.push(StageTwoRow { step: step + 1, lr, loss, acc_t, acc_f, masked: mask.count(), grad_norm });
        self.step += 1;
        Ok(())
    }

    fn diverged<T>(&mut self, step: usize) -> Result<T> {
        let ck = self.to_checkpoint();
        self.policy.last_good(|| ck)?;
        Err(Error::Divergence { step: step + 1 })
    }

    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.loss).collect()
    }
}

/// Trains a fresh backbone on targets from a frozen tokenizer (or planted
/// tokens when `tokenizer` is `None`).
pub fn train_eegssm(
    model_cfg: SsmConfig,
    train: TrainConfig,
    data: &[TokenizedSample],
    tokenizer: Option<&Tokenizer>,
    policy: CheckpointPolicy,
) -> Result<SsmTrainer> {
    if let Some(tok) = tokenizer {
        if tok.cfg.codebook_size != model_cfg.codebook_size {
            return invalid(format!(
                "backbone predicts {} codes, tokenizer has {}",
                model_cfg.codebook_size, tok.cfg.codebook_size
            ));
        }
        if tok.cfg.patch_len != model_cfg.patch_len {
            return invalid("tokenizer and backbone disagree on patch length");
        }
    }
    let mut t = SsmTrainer::new(model_cfg, train.clone(), train.seed)?;
    t.tokenizer_hash = tokenizer.map(|tok| tok.to_checkpoint().config_hash());
    t.policy = policy;
    t.run(data, None)?;
    Ok(t)
}
