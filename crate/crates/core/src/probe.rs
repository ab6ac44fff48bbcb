//! Frozen-backbone probing: per-channel pooled backbone features feed a
//! three-layer head, evaluated with kappa, weighted F1, balanced accuracy
//! and (for two classes) AUROC / AUC-PR.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{Linear, Rng64};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::optim::{AdamConfig, AdamW};
use crate::signal::PatchGrid;
use crate::ssm::Backbone;

/// Pooled backbone output of one sample, laid out `[features, channels]`
/// so the channel-mixing layer is a plain row-wise linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeInput {
    pub channels: usize,
    pub features: usize,
    pub data: Vec<f32>,
}

/// Skip-sum features of every patch, averaged over each channel's patches.
pub fn extract_features(backbone: &Backbone, grid: &PatchGrid) -> Result<ProbeInput> {
    let (c, n, f) = (grid.channels, grid.per_channel, backbone.cfg.features);
    let patches = Tensor::new(vec![grid.len(), grid.patch_len], grid.data.clone())?;
    let mut tape = Tape::new();
    let h = backbone.features(&mut tape, &patches, None, grid.len())?;
    let v = tape.value(h);
    let mut data = vec![0f32; f * c];
    for ch in 0..c {
        for j in 0..f {
            let s: f64 = (0..n).map(|p| v[(ch * n + p) * f + j]).sum();
            data[j * c + ch] = (s / n as f64) as f32;
        }
    }
    Ok(ProbeInput { channels: c, features: f, data })
}

pub fn extract_all(backbone: &Backbone, grids: &[PatchGrid]) -> Result<Vec<ProbeInput>> {
    grids.par_iter().map(|g| extract_features(backbone, g)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn desk() -> Self {
        Self { hidden: 200, dropout: 0.1, lr: 1e-3, weight_decay: 5e-4, batch_size: 16, epochs: 40, seed: 0 }
    }

    /// Full-scale learning rate and epoch count.
    pub fn paper() -> Self {
        Self { lr: 5e-5, epochs: 50, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 || self.epochs == 0 {
            return invalid("probe hidden size, batch size and epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return invalid("probe learning rate must be positive and weight decay non-negative");
        }
        Ok(())
    }
}

/// Channel mixing (C -> C), sequence compression (F*C -> hidden) and the
/// class map, ELU and dropout between them.
#[derive(Debug, Clone)]
pub struct ProbeHead {
    pub channels: usize,
    pub features: usize,
    pub classes: usize,
    pub dropout: f64,
    pub store: ParamStore,
    pub layer1: Linear,
    pub layer2: Linear,
    pub layer3: Linear,
}

impl ProbeHead {
    pub fn new(channels: usize, features: usize, hidden: usize, classes: usize, dropout: f64, seed: u64) -> Result<Self> {
        if channels == 0 || features == 0 || hidden == 0 {
            return invalid("probe head dimensions must be positive");
        }
        if classes < 2 {
            return invalid(format!("a probe needs at least 2 classes, got {classes}"));
        }
        let mut rng = Rng64::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer1 = Linear::new(&mut store, "probe.channels", channels, channels, true, &mut rng)?;
        let layer2 = Linear::new(&mut store, "probe.sequence", channels * features, hidden, true, &mut rng)?;
        let layer3 = Linear::new(&mut store, "probe.classes", hidden, classes, true, &mut rng)?;
        Ok(Self { channels, features, classes, dropout, store, layer1, layer2, layer3 })
    }

    fn check(&self, x: &ProbeInput) -> Result<()> {
        if x.channels != self.channels || x.features != self.features {
            return invalid(format!(
                "probe head expects {}x{} inputs, got {}x{}",
                self.features, self.channels, x.features, x.channels
            ));
        }
        Ok(())
    }

    /// Logits `[B, classes]`; `rng` switches dropout on.
    pub fn forward(&self, tape: &mut Tape, xs: &[&ProbeInput], mut rng: Option<&mut Rng64>) -> Result<Var> {
        if xs.is_empty() {
            return invalid("empty probe batch");
        }
        let mut data = Vec::with_capacity(xs.len() * self.channels * self.features);
        for x in xs {
            self.check(x)?;
            data.extend_from_slice(&x.data);
        }
        let b = xs.len();
        let x = tape.constant(&Tensor::new(vec![b * self.features, self.channels], data)?);
        let mut h = self.layer1.forward(tape, &self.store, x);
        h = tape.elu(h);
        h = self.drop(tape, h, rng.as_deref_mut());
        h = tape.reshape(h, vec![b, self.features * self.channels]);
        h = self.layer2.forward(tape, &self.store, h);
        h = tape.elu(h);
        h = self.drop(tape, h, rng.as_deref_mut());
        Ok(self.layer3.forward(tape, &self.store, h))
    }

    fn drop(&self, tape: &mut Tape, x: Var, rng: Option<&mut Rng64>) -> Var {
        let Some(rng) = rng else { return x };
        if self.dropout == 0.0 {
            return x;
        }
        let keep = 1.0 - self.dropout;
        let shape = tape.shape(x).to_vec();
        let n = tape.value(x).len();
        let m = (0..n).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let m = tape.constant_from(shape, m);
        tape.mul(x, m)
    }

    /// Eval-mode logits, row-major `[B, classes]`.
    pub fn logits(&self, xs: &[&ProbeInput]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let y = self.forward(&mut tape, xs, None)?;
        Ok(tape.value(y).to_vec())
    }
}

/// End-to-end logits for one record through the frozen backbone.
pub fn probe_forward(backbone: &Backbone, head: &ProbeHead, grid: &PatchGrid) -> Result<Vec<f64>> {
    if grid.channels != head.channels {
        return invalid(format!("record has {} channels, head expects {}", grid.channels, head.channels));
    }
    let x = extract_features(backbone, grid)?;
    head.logits(&[&x])
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b })
}

/// Class predictions and positive-class probabilities of `head` on `xs`.
pub fn predict(head: &ProbeHead, xs: &[&ProbeInput]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut preds = Vec::with_capacity(xs.len());
    let mut scores = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(64) {
        let l = head.logits(chunk)?;
        for row in l.chunks(head.classes) {
            preds.push(argmax(row));
            scores.push(softmax(row)[1]);
        }
    }
    Ok((preds, scores))
}

// ---------------------------------------------------------------- metrics

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Binary,
    Multiclass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: TaskType,
    pub n: usize,
    pub kappa: f64,
    pub weighted_f1: f64,
    pub balanced_acc: f64,
    pub accuracy: f64,
    pub auroc: Option<f64>,
    pub auc_pr: Option<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub support: Vec<usize>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report encodes")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let mut row = |k: &str, v: f64| s.push_str(&format!("{k},{v}\n"));
        row("kappa", self.kappa);
        row("weighted_f1", self.weighted_f1);
        row("balanced_acc", self.balanced_acc);
        row("accuracy", self.accuracy);
        if let Some(a) = self.auroc {
            row("auroc", a);
        }
        if let Some(a) = self.auc_pr {
            row("auc_pr", a);
        }
        s
    }

    pub fn confusion_csv(&self) -> String {
        let k = self.confusion.len();
        let mut s = String::from("true");
        (0..k).for_each(|j| s.push_str(&format!(",pred_{j}")));
        s.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            s.push_str(&i.to_string());
            row.iter().for_each(|v| s.push_str(&format!(",{v}")));
            s.push('\n');
        }
        s
    }

    /// The validation criterion: AUROC for binary tasks, kappa otherwise.
    pub fn selection_score(&self) -> f64 {
        match self.task {
            TaskType::Binary => self.auroc.unwrap_or(self.kappa),
            TaskType::Multiclass => self.kappa,
        }
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if preds.len() != labels.len() {
        return invalid(format!("{} predictions for {} labels", preds.len(), labels.len()));
    }
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= classes || y >= classes {
            return invalid(format!("class index out of range for {classes} classes"));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

/// `(p_o - p_e) / (1 - p_e)` from a confusion matrix.
pub fn kappa_from_confusion(m: &[Vec<usize>]) -> Result<f64> {
    let n: usize = m.iter().flatten().sum();
    if n == 0 {
        return invalid("empty confusion matrix");
    }
    let n = n as f64;
    let k = m.len();
    let po = (0..k).map(|i| m[i][i]).sum::<usize>() as f64 / n;
    let pe = (0..k)
        .map(|i| {
            let row: usize = m[i].iter().sum();
            let col: usize = m.iter().map(|r| r[i]).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (n * n);
    if pe >= 1.0 {
        return invalid("kappa is undefined when chance agreement is 1");
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Area under the ROC curve by trapezoids over distinct thresholds; tied
/// scores form one step, which equals counting tied pairs as one half.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let (p, q) = pos_neg(scores, positive)?;
    let order = by_score_desc(scores);
    let (mut tp, mut fp, mut area) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let (tp0, fp0) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        area += (fp - fp0) * (tp + tp0) / 2.0;
    }
    Ok(area / (p * q))
}

/// Area under the precision-recall curve as a step sum
/// `sum_n (R_n - R_{n-1}) P_n` over distinct thresholds.
pub fn auc_pr(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let (p, _) = pos_neg(scores, positive)?;
    let order = by_score_desc(scores);
    let (mut tp, mut seen, mut area, mut prev_r) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += f64::from(u8::from(positive[order[i]]));
            seen += 1.0;
            i += 1;
        }
        let r = tp / p;
        area += (r - prev_r) * (tp / seen);
        prev_r = r;
    }
    Ok(area)
}

fn pos_neg(scores: &[f64], positive: &[bool]) -> Result<(f64, f64)> {
    if scores.len() != positive.len() || scores.is_empty() {
        return invalid("scores and labels must be non-empty and of equal length");
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let p = positive.iter().filter(|&&b| b).count() as f64;
    let q = positive.len() as f64 - p;
    if p == 0.0 || q == 0.0 {
        return invalid("AUROC needs both positive and negative examples");
    }
    Ok((p, q))
}

fn by_score_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Full report. `scores` (probability of class 1) is required for
/// two-class tasks and ignored otherwise.
pub fn compute_metrics(preds: &[usize], scores: Option<&[f64]>, labels: &[usize], classes: usize) -> Result<MetricsReport> {
    if labels.is_empty() {
        return invalid("no labels to evaluate");
    }
    if classes < 2 {
        return invalid("metrics need at least 2 classes");
    }
    let confusion = confusion_matrix(preds, labels, classes)?;
    let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
    if support.iter().filter(|&&s| s > 0).count() < 2 {
        return invalid("labels contain a single class; kappa is undefined");
    }
    let n = labels.len() as f64;
    let kappa = kappa_from_confusion(&confusion)?;
    let accuracy = (0..classes).map(|i| confusion[i][i]).sum::<usize>() as f64 / n;
    let present: Vec<usize> = (0..classes).filter(|&i| support[i] > 0).collect();
    let balanced_acc =
        present.iter().map(|&i| confusion[i][i] as f64 / support[i] as f64).sum::<f64>() / present.len() as f64;
    let weighted_f1 = present
        .iter()
        .map(|&i| {
            let tp = confusion[i][i] as f64;
            let predicted: usize = confusion.iter().map(|r| r[i]).sum();
            let denom = support[i] as f64 + predicted as f64;
            let f1 = if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
            f1 * support[i] as f64
        })
        .sum::<f64>()
        / n;
    let task = if classes == 2 { TaskType::Binary } else { TaskType::Multiclass };
    let (auroc_v, auc_pr_v) = match task {
        TaskType::Binary => {
            let Some(s) = scores else { return invalid("binary metrics need positive-class scores") };
            let pos: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
            (Some(auroc(s, &pos)?), Some(auc_pr(s, &pos)?))
        }
        TaskType::Multiclass => (None, None),
    };
    Ok(MetricsReport {
        task,
        n: labels.len(),
        kappa,
        weighted_f1,
        balanced_acc,
        accuracy,
        auroc: auroc_v,
        auc_pr: auc_pr_v,
        confusion,
        support,
    })
}

// ---------------------------------------------------------------- training

/// Record indices of each split; disjoint by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Seeded shuffle of `0..n` cut into fractions `train` and `val`; the
    /// rest is test.
    pub fn random(n: usize, train: f64, val: f64, seed: u64) -> Result<Self> {
        if !(train > 0.0 && val > 0.0 && train + val < 1.0) {
            return invalid(format!("split fractions {train} / {val} leave no test set"));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut Rng64::seed_from_u64(seed));
        let a = (n as f64 * train).round() as usize;
        let b = a + (n as f64 * val).round() as usize;
        if a == 0 || b == a || b >= n {
            return invalid(format!("{n} records are too few for a three-way split"));
        }
        Ok(Self { train: idx[..a].to_vec(), val: idx[a..b].to_vec(), test: idx[b..].to_vec() })
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut all: Vec<usize> = self.train.iter().chain(&self.val).chain(&self.test).copied().collect();
        let total = all.len();
        all.sort_unstable();
        all.dedup();
        if all.len() != total {
            return invalid("splits overlap");
        }
        if all.last().is_some_and(|&i| i >= n) {
            return invalid(format!("split index out of range for {n} records"));
        }
        if self.train.is_empty() || self.val.is_empty() || self.test.is_empty() {
            return invalid("every split needs at least one record");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ProbeRun {
    pub head: ProbeHead,
    pub best_epoch: usize,
    /// Validation selection score after each epoch.
    pub val_scores: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub val: MetricsReport,
    pub test: MetricsReport,
}

fn subset<'a>(xs: &'a [ProbeInput], ys: &[usize], idx: &[usize]) -> (Vec<&'a ProbeInput>, Vec<usize>) {
    (idx.iter().map(|&i| &xs[i]).collect(), idx.iter().map(|&i| ys[i]).collect())
}

fn evaluate(head: &ProbeHead, xs: &[&ProbeInput], ys: &[usize]) -> Result<MetricsReport> {
    let (p, s) = predict(head, xs)?;
    compute_metrics(&p, Some(&s), ys, head.classes)
}

/// Trains a head on `split.train`, keeps the epoch with the best validation
/// score and reports it on `split.test`.
pub fn train_probe(
    cfg: &ProbeConfig,
    inputs: &[ProbeInput],
    labels: &[usize],
    classes: usize,
    split: &Split,
) -> Result<ProbeRun> {
    cfg.validate()?;
    if inputs.len() != labels.len() {
        return invalid(format!("{} inputs for {} labels", inputs.len(), labels.len()));
    }
    split.validate(inputs.len())?;
    let (tx, ty) = subset(inputs, labels, &split.train);
    let (vx, vy) = subset(inputs, labels, &split.val);
    let (sx, sy) = subset(inputs, labels, &split.test);
    let mut seen = vec![false; classes];
    for &y in &ty {
        if y >= classes {
            return invalid(format!("label {y} out of range for {classes} classes"));
        }
        seen[y] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return invalid("training split contains a single class");
    }
    let first = tx[0];
    let mut head = ProbeHead::new(first.channels, first.features, cfg.hidden, classes, cfg.dropout, cfg.seed)?;
    let adam = AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: cfg.weight_decay };
    let mut opt = AdamW::new(adam, &head.store);
    let mut rng = Rng64::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut order: Vec<usize> = (0..tx.len()).collect();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let (mut val_scores, mut train_loss) = (Vec::new(), Vec::new());
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<&ProbeInput> = chunk.iter().map(|&i| tx[i]).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| ty[i]).collect();
            let mut tape = Tape::new();
            let logits = head.forward(&mut tape, &xs, Some(&mut rng))?;
            let w = vec![1.0 / ys.len() as f64; ys.len()];
            let loss = tape.cross_entropy(logits, &ys, &w)?;
            let lv = tape.value(loss)[0];
            if !lv.is_finite() {
                return Err(Error::Divergence { step: epoch + 1 });
            }
            total += lv * ys.len() as f64;
            let g = tape.backward(loss)?;
            head.store.zero_grad();
            head.store.accumulate(&g);
            opt.update(&mut head.store, cfg.lr)?;
        }
        train_loss.push(total / tx.len() as f64);
        let score = evaluate(&head, &vx, &vy).map(|r| r.selection_score()).unwrap_or(f64::NEG_INFINITY);
        val_scores.push(score);
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch + 1, head.store.clone()));
        }
    }
    let (_, best_epoch, store) = best.expect("at least one epoch");
    head.store = store;
    let val = evaluate(&head, &vx, &vy)?;
    let test = evaluate(&head, &sx, &sy)?;
    Ok(ProbeRun { head, best_epoch, val_scores, train_loss, val, test })
}

/// Labels permuted by a seeded shuffle; the chance-level control.
pub fn shuffled_labels(labels: &[usize], seed: u64) -> Vec<usize> {
    let mut out = labels.to_vec();
    out.shuffle(&mut Rng64::seed_from_u64(seed ^ 0xC0_FFEE));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(v: &[f64]) -> Self {
        let n = v.len().max(1) as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Per-seed test reports of the real task and the shuffled-label control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStudy {
    pub seeds: Vec<u64>,
    pub reports: Vec<MetricsReport>,
    pub controls: Vec<MetricsReport>,
}

impl SeedStudy {
    pub fn kappa(&self) -> MeanStd {
        MeanStd::of(&self.reports.iter().map(|r| r.kappa).collect::<Vec<_>>())
    }

    pub fn control_kappa(&self) -> MeanStd {
        MeanStd::of(&self.controls.iter().map(|r| r.kappa).collect::<Vec<_>>())
    }

    /// One row per seed and control, then mean and std rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("run,seed,kappa,weighted_f1,balanced_acc,auroc,auc_pr\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut push = |run: &str, seed: String, r: &MetricsReport| {
            s.push_str(&format!(
                "{run},{seed},{},{},{},{},{}\n",
                r.kappa,
                r.weighted_f1,
                r.balanced_acc,
                opt(r.auroc),
                opt(r.auc_pr)
            ))
        };
        for (seed, r) in self.seeds.iter().zip(&self.reports) {
            push("probe", seed.to_string(), r);
        }
        for (seed, r) in self.seeds.iter().zip(&self.controls) {
            push("shuffled", seed.to_string(), r);
        }
        for (run, rs) in [("probe", &self.reports), ("shuffled", &self.controls)] {
            let col = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
                let v: Vec<f64> = rs.iter().filter_map(f).collect();
                if v.is_empty() {
                    None
                } else {
                    Some(MeanStd::of(&v))
                }
            };
            let cols = [
                col(&|r| Some(r.kappa)),
                col(&|r| Some(r.weighted_f1)),
                col(&|r| Some(r.balanced_acc)),
                col(&|r| r.auroc),
                col(&|r| r.auc_pr),
            ];
            let fmt = |f: fn(MeanStd) -> f64| {
                cols.iter().map(|c| c.map(|m| f(m).to_string()).unwrap_or_default()).collect::<Vec<_>>().join(",")
            };
            s.push_str(&format!("{run},mean,{}\n", fmt(|m| m.mean)));
            s.push_str(&format!("{run},std,{}\n", fmt(|m| m.std)));
        }
        s
    }
}

/// Trains one probe per seed on the true labels and one on shuffled labels.
pub fn seed_study(
    cfg: &ProbeConfig,
    inputs: &[ProbeInput],
    labels: &[usize],
    classes: usize,
    split: &Split,
    seeds: &[u64],
) -> Result<SeedStudy> {
    let mut reports = Vec::new();
    let mut controls = Vec::new();
    for &seed in seeds {
        let c = ProbeConfig { seed, ..cfg.clone() };
        reports.push(train_probe(&c, inputs, labels, classes, split)?.test);
        let shuffled = shuffled_labels(labels, seed);
        controls.push(train_probe(&c, inputs, &shuffled, classes, split)?.test);
    }
    Ok(SeedStudy { seeds: seeds.to_vec(), reports, controls })
}
