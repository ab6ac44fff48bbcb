//! Stage 1: the dual time/frequency tokenizer.
//!
//! A shared encoder turns each patch into an embedding that is quantized
//! against two codebooks. The frequency code feeds a decoder predicting the
//! z-scored amplitude and phase spectra; the temporal code feeds a decoder
//! predicting the raw patch. A contrastive term pulls together the pooled
//! encodings of the two temporal halves of each sample.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Error, Result};
use crate::nn::{uniform, Linear, Rng64, Transformer};
use crate::numerics::kernels::Conv1dGeom;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::signal::{freq_features, rfft_amplitude, zscore, PatchGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub patch_len: usize,
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp: usize,
    pub decoder_depth: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub max_positions: usize,
    /// NT-Xent temperature.
    pub temperature: f64,
    /// Weight of `|e - sg(v)|^2`; zero disables the term.
    pub commitment: f64,
    /// Project embeddings onto the unit sphere before lookup; trainers keep
    /// the codes there too.
    pub unit_codes: bool,
}

impl TokenizerConfig {
    pub fn desk() -> Self {
        Self {
            patch_len: 200,
            hidden: 64,
            depth: 2,
            heads: 4,
            mlp: 128,
            decoder_depth: 1,
            codebook_size: 256,
            code_dim: 16,
            max_positions: 64,
            temperature: 0.5,
            commitment: 0.0,
            unit_codes: true,
        }
    }

    pub fn paper() -> Self {
        Self {
            patch_len: 200,
            hidden: 200,
            depth: 12,
            heads: 8,
            mlp: 800,
            decoder_depth: 3,
            codebook_size: 4096,
            code_dim: 32,
            max_positions: 1024,
            temperature: 0.5,
            commitment: 0.0,
            unit_codes: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_len < 16 {
            return invalid(format!("patch length {} is too short for the conv stack", self.patch_len));
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return invalid(format!("hidden {} must be a positive multiple of heads {}", self.hidden, self.heads));
        }
        if self.codebook_size < 2 {
            return invalid("codebook needs at least two codes");
        }
        if self.code_dim == 0 || self.mlp == 0 || self.max_positions == 0 {
            return invalid("code_dim, mlp and max_positions must be positive");
        }
        if self.temperature <= 0.0 {
            return invalid("temperature must be positive");
        }
        if self.commitment < 0.0 {
            return invalid("commitment weight must be non-negative");
        }
        Ok(())
    }

    /// `[(in_ch, out_ch, kernel, stride, padding)]` of the temporal conv stack.
    pub fn conv_stack() -> [(usize, usize, usize, usize, usize); 3] {
        [(1, 8, 15, 8, 7), (8, 4, 3, 1, 1), (4, 4, 3, 1, 1)]
    }

    /// Positions after the first (strided) stage.
    pub fn conv_len(&self) -> usize {
        let (i, o, k, s, p) = Self::conv_stack()[0];
        Conv1dGeom { batch: 1, in_ch: i, out_ch: o, in_len: self.patch_len, kernel: k, stride: s, padding: p }.out_len()
    }

    /// Width of the temporal half of `e_p` (and of the frequency half).
    pub fn branch_width(&self) -> usize {
        4 * self.conv_len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Temporal,
    Frequency,
}

/// Index of the nearest code by squared Euclidean distance; ties go to the
/// lowest index.
pub fn nearest_code(codes: &[f32], dim: usize, query: &[f32]) -> Result<usize> {
    if dim == 0 || codes.is_empty() {
        return Err(Error::InvalidState("quantize against an empty codebook".into()));
    }
    if query.len() != dim {
        return invalid(format!("query of length {} against codes of dimension {dim}", query.len()));
    }
    let mut best = (0usize, f64::INFINITY);
    for (j, code) in codes.chunks_exact(dim).enumerate() {
        let d: f64 = code.iter().zip(query).map(|(&c, &q)| (q as f64 - c as f64).powi(2)).sum();
        if d < best.1 {
            best = (j, d);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone)]
pub struct Codebook {
    pub domain: Domain,
    pub codes: ParamId,
    pub size: usize,
    pub dim: usize,
    pub usage: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UsageReport {
    pub domain: Domain,
    pub usage: Vec<u64>,
    pub unused: usize,
    pub calls: u64,
}

impl UsageReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("code,count\n");
        for (i, c) in self.usage.iter().enumerate() {
            s.push_str(&format!("{i},{c}\n"));
        }
        s
    }
}

impl Codebook {
    /// Codes uniform in `[-1/K, 1/K]`.
    pub fn new(store: &mut ParamStore, domain: Domain, size: usize, dim: usize, rng: &mut Rng64) -> Result<Self> {
        let name = match domain {
            Domain::Temporal => "codebook.temporal",
            Domain::Frequency => "codebook.frequency",
        };
        let codes = store.add(name, uniform(rng, vec![size, dim], 1.0 / size as f32))?;
        Ok(Self { domain, codes, size, dim, usage: vec![0; size] })
    }

    pub fn codes<'a>(&self, store: &'a ParamStore) -> &'a [f32] {
        store.get(self.codes).data()
    }

    pub fn nearest(&self, store: &ParamStore, query: &[f32]) -> Result<usize> {
        nearest_code(self.codes(store), self.dim, query)
    }

    /// Nearest code for every row of `queries`.
    pub fn nearest_rows(&self, store: &ParamStore, queries: &[f32]) -> Result<Vec<usize>> {
        let codes = self.codes(store);
        queries.par_chunks(self.dim).map(|q| nearest_code(codes, self.dim, q)).collect()
    }

    /// Selects a code and counts the call.
    pub fn quantize(&mut self, store: &ParamStore, query: &[f32]) -> Result<(usize, Vec<f32>)> {
        let j = self.nearest(store, query)?;
        self.usage[j] += 1;
        Ok((j, self.codes(store)[j * self.dim..(j + 1) * self.dim].to_vec()))
    }

    pub fn record(&mut self, indices: &[usize]) {
        for &j in indices {
            self.usage[j] += 1;
        }
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    pub fn usage_report(&self) -> UsageReport {
        UsageReport {
            domain: self.domain,
            usage: self.usage.clone(),
            unused: self.usage.iter().filter(|&&u| u == 0).count(),
            calls: self.usage.iter().sum(),
        }
    }
}

/// Per-patch tensors precomputed once from a [`PatchGrid`].
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub channels: usize,
    pub per_channel: usize,
    pub patch_len: usize,
    pub patches: Vec<f32>,
    pub amp_in: Vec<f32>,
    pub amp_target: Vec<f32>,
    pub phase_target: Vec<f32>,
    pub label: Option<i32>,
}

impl PreparedSample {
    pub fn new(grid: &PatchGrid, label: Option<i32>) -> Result<Self> {
        let t = grid.patch_len;
        let mut amp_in = Vec::with_capacity(grid.len() * (t / 2 + 1));
        let mut amp_target = Vec::with_capacity(grid.len() * t);
        let mut phase_target = Vec::with_capacity(grid.len() * t);
        for i in 0..grid.len() {
            let p = grid.flat(i);
            let a: Vec<f64> = rfft_amplitude(p)?.into_iter().map(f64::from).collect();
            amp_in.extend(zscore(&a).0);
            let f = freq_features(p)?;
            amp_target.extend(f.amplitude);
            phase_target.extend(f.phase);
        }
        Ok(Self {
            channels: grid.channels,
            per_channel: grid.per_channel,
            patch_len: t,
            patches: grid.data.clone(),
            amp_in,
            amp_target,
            phase_target,
            label,
        })
    }

    pub fn len(&self) -> usize {
        self.channels * self.per_channel
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Several samples of identical geometry stacked row-wise.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    pub samples: usize,
    pub channels: usize,
    pub per_channel: usize,
    pub patch_len: usize,
    pub patches: Vec<f32>,
    pub amp_in: Vec<f32>,
    pub amp_target: Vec<f32>,
    pub phase_target: Vec<f32>,
}

impl PatchBatch {
    pub fn new(samples: &[&PreparedSample]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return invalid("empty batch");
        };
        let mut b = Self {
            samples: samples.len(),
            channels: first.channels,
            per_channel: first.per_channel,
            patch_len: first.patch_len,
            patches: Vec::new(),
            amp_in: Vec::new(),
            amp_target: Vec::new(),
            phase_target: Vec::new(),
        };
        for s in samples {
            if (s.channels, s.per_channel, s.patch_len) != (b.channels, b.per_channel, b.patch_len) {
                return invalid("batch samples differ in geometry");
            }
            b.patches.extend_from_slice(&s.patches);
            b.amp_in.extend_from_slice(&s.amp_in);
            b.amp_target.extend_from_slice(&s.amp_target);
            b.phase_target.extend_from_slice(&s.phase_target);
        }
        Ok(b)
    }

    pub fn per_sample(&self) -> usize {
        self.channels * self.per_channel
    }

    pub fn rows(&self) -> usize {
        self.samples * self.per_sample()
    }

    /// Positional slot `c * N + n` of every row.
    pub fn positions(&self) -> Vec<usize> {
        (0..self.rows()).map(|r| r % self.per_sample()).collect()
    }

    /// Row order placing, per sample, the first-half patches of every channel
    /// followed by the second-half patches.
    pub fn half_order(&self) -> Vec<usize> {
        let (c, n, p) = (self.channels, self.per_channel, self.per_sample());
        let half = n / 2;
        let mut order = Vec::with_capacity(self.rows());
        for s in 0..self.samples {
            for range in [0..half, half..n] {
                for ch in 0..c {
                    for t in range.clone() {
                        order.push(s * p + ch * n + t);
                    }
                }
            }
        }
        order
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    stride: usize,
    padding: usize,
}

/// Scalar loss nodes of one Stage-1 forward pass, each averaged over patches.
#[derive(Debug, Clone, Copy)]
pub struct StageOneLoss {
    pub total: Var,
    pub freq_recon: Var,
    pub amp_recon: Var,
    pub phase_recon: Var,
    pub temporal_recon: Var,
    pub contrastive: Var,
    pub codebook: Var,
    pub commitment: Option<Var>,
}

/// Intermediate nodes and code assignments of one forward pass.
#[derive(Debug, Clone)]
pub struct StageOneForward {
    pub loss: StageOneLoss,
    pub encoded: Var,
    pub projected: Var,
    pub idx_t: Vec<usize>,
    pub idx_f: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub cfg: TokenizerConfig,
    pub store: ParamStore,
    conv: Vec<ConvLayer>,
    freq_proj: Linear,
    in_proj: Option<Linear>,
    pos: ParamId,
    pub encoder: Transformer,
    down: Linear,
    pub temporal: Codebook,
    pub frequency: Codebook,
    up_f: Linear,
    dec_f: Transformer,
    head_amp: Linear,
    head_phase: Linear,
    up_t: Linear,
    dec_t: Transformer,
    head_t: Linear,
}

impl Tokenizer {
    pub fn new(cfg: TokenizerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng64::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut conv = Vec::new();
        for (i, (cin, cout, k, s, p)) in TokenizerConfig::conv_stack().into_iter().enumerate() {
            let bound = 1.0 / ((cin * k) as f32).sqrt();
            let w = store.add(format!("tfconv.{i}.w"), uniform(&mut rng, vec![cout, cin, k], bound))?;
            let b = store.add(format!("tfconv.{i}.b"), uniform(&mut rng, vec![cout], bound))?;
            conv.push(ConvLayer { w, b, stride: s, padding: p });
        }
        let bw = cfg.branch_width();
        let freq_proj = Linear::new(&mut store, "freq_proj", cfg.patch_len / 2 + 1, bw, true, &mut rng)?;
        let in_proj = if 2 * bw == cfg.hidden {
            None
        } else {
            Some(Linear::new(&mut store, "in_proj", 2 * bw, cfg.hidden, true, &mut rng)?)
        };
        let pos = store.add("pos_embed", uniform(&mut rng, vec![cfg.max_positions, cfg.hidden], 0.02))?;
        let encoder = Transformer::new(&mut store, "encoder", cfg.depth, cfg.hidden, cfg.heads, cfg.mlp, &mut rng)?;
        let down = Linear::new(&mut store, "down_proj", cfg.hidden, cfg.code_dim, true, &mut rng)?;
        let temporal = Codebook::new(&mut store, Domain::Temporal, cfg.codebook_size, cfg.code_dim, &mut rng)?;
        let frequency = Codebook::new(&mut store, Domain::Frequency, cfg.codebook_size, cfg.code_dim, &mut rng)?;
        let (h, t) = (cfg.hidden, cfg.patch_len);
        let up_f = Linear::new(&mut store, "f_decoder.up", cfg.code_dim, h, true, &mut rng)?;
        let dec_f = Transformer::new(&mut store, "f_decoder.tf", cfg.decoder_depth, h, cfg.heads, cfg.mlp, &mut rng)?;
        let head_amp = Linear::new(&mut store, "f_decoder.amp", h, t, true, &mut rng)?;
        let head_phase = Linear::new(&mut store, "f_decoder.phase", h, t, true, &mut rng)?;
        let up_t = Linear::new(&mut store, "t_decoder.up", cfg.code_dim, h, true, &mut rng)?;
        let dec_t = Transformer::new(&mut store, "t_decoder.tf", cfg.decoder_depth, h, cfg.heads, cfg.mlp, &mut rng)?;
        let head_t = Linear::new(&mut store, "t_decoder.head", h, t, true, &mut rng)?;
        Ok(Self {
            cfg,
            store,
            conv,
            freq_proj,
            in_proj,
            pos,
            encoder,
            down,
            temporal,
            frequency,
            up_f,
            dec_f,
            head_amp,
            head_phase,
            up_t,
            dec_t,
            head_t,
        })
    }

    fn check_batch(&self, b: &PatchBatch) -> Result<()> {
        if b.patch_len != self.cfg.patch_len {
            return invalid(format!("patch length {} vs model {}", b.patch_len, self.cfg.patch_len));
        }
        if b.per_sample() > self.cfg.max_positions {
            return invalid(format!(
                "{} patches per sample exceed {} positional slots",
                b.per_sample(),
                self.cfg.max_positions
            ));
        }
        Ok(())
    }

    /// `e_p + e_pos` for every row of the batch: `[rows, hidden]`.
    pub fn embed(&self, tape: &mut Tape, b: &PatchBatch) -> Result<Var> {
        self.check_batch(b)?;
        let rows = b.rows();
        let t = b.patch_len;
        let mut x = tape.constant(&Tensor::new(vec![rows, 1, t], b.patches.clone())?);
        for layer in &self.conv {
            let w = tape.param(&self.store, layer.w);
            let bias = tape.param(&self.store, layer.b);
            let y = tape.conv1d(x, w, bias, layer.stride, layer.padding);
            // Per-patch, per-channel normalization over positions.
            let (ch, len) = (tape.shape(y)[1], tape.shape(y)[2]);
            let flat = tape.reshape(y, vec![rows * ch, len]);
            let one = tape.constant_from(vec![len], vec![1.0; len]);
            let zero = tape.constant_from(vec![len], vec![0.0; len]);
            let n = tape.layer_norm(flat, one, zero);
            let n = tape.reshape(n, vec![rows, ch, len]);
            x = tape.relu(n);
        }
        let temporal = tape.reshape(x, vec![rows, self.cfg.branch_width()]);
        let amp = tape.constant(&Tensor::new(vec![rows, t / 2 + 1], b.amp_in.clone())?);
        let freq = self.freq_proj.forward(tape, &self.store, amp);
        let mut e = tape.concat_cols(&[temporal, freq]);
        if let Some(p) = &self.in_proj {
            e = p.forward(tape, &self.store, e);
        }
        let table = tape.param(&self.store, self.pos);
        let pos = tape.gather_rows(table, &b.positions());
        Ok(tape.add(e, pos))
    }

    /// Encoder output `[rows, hidden]`; attention spans one sample.
    pub fn encode(&self, tape: &mut Tape, b: &PatchBatch) -> Result<Var> {
        let e = self.embed(tape, b)?;
        Ok(self.encoder.forward(tape, &self.store, e, b.per_sample()))
    }

    /// Down-projection to code space: `[rows, code_dim]`.
    pub fn project(&self, tape: &mut Tape, encoded: Var) -> Var {
        let p = self.down.forward(tape, &self.store, encoded);
        if self.cfg.unit_codes {
            tape.l2_normalize_rows(p)
        } else {
            p
        }
    }

    /// Rescales every code to unit length (no-op unless `unit_codes`).
    pub fn normalize_codes(&mut self) {
        if !self.cfg.unit_codes {
            return;
        }
        for id in [self.temporal.codes, self.frequency.codes] {
            let dim = self.cfg.code_dim;
            for row in self.store.get_mut(id).data_mut().chunks_mut(dim) {
                let n = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
                if n > 0.0 {
                    row.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
                }
            }
        }
    }

    /// Encoding of a single patch attending only to itself.
    pub fn encode_patch(&self, patch: &[f32], position: usize) -> Result<Vec<f32>> {
        if patch.len() != self.cfg.patch_len {
            return invalid(format!("patch of length {} vs model {}", patch.len(), self.cfg.patch_len));
        }
        if position >= self.cfg.max_positions {
            return invalid(format!("position {position} outside {} slots", self.cfg.max_positions));
        }
        let grid = PatchGrid {
            channels: 1,
            per_channel: 1,
            patch_len: patch.len(),
            data: patch.to_vec(),
            channel_ids: vec![0],
            patch_times: vec![0.0],
        };
        let s = PreparedSample::new(&grid, None)?;
        let b = PatchBatch::new(&[&s])?;
        let mut tape = Tape::new();
        let mut e = self.embed(&mut tape, &b)?;
        if position != 0 {
            // Swap slot 0's positional row for the requested one.
            let table = tape.param(&self.store, self.pos);
            let p0 = tape.gather_rows(table, &[0]);
            let pn = tape.gather_rows(table, &[position]);
            let d = tape.sub(pn, p0);
            e = tape.add(e, d);
        }
        let y = self.encoder.forward(&mut tape, &self.store, e, 1);
        Ok(tape.tensor(y).into_data())
    }

    fn gather_codes(&self, tape: &mut Tape, book: &Codebook, idx: &[usize]) -> Var {
        let table = tape.param(&self.store, book.codes);
        tape.gather_rows(table, idx)
    }

    /// Full Stage-1 objective on one batch. Requires at least two samples
    /// (contrastive negatives) and an even patch count per channel.
    pub fn forward(&self, tape: &mut Tape, b: &PatchBatch) -> Result<StageOneForward> {
        if b.samples < 2 {
            return invalid("stage-1 batches need at least two samples for contrastive negatives");
        }
        if b.per_channel < 2 || b.per_channel % 2 != 0 {
            return invalid(format!("{} patches per channel cannot be split into halves", b.per_channel));
        }
        let rows = b.rows();
        let inv_rows = 1.0 / rows as f64;
        let e = self.embed(tape, b)?;
        let encoded = self.encoder.forward(tape, &self.store, e, b.per_sample());
        let projected = self.project(tape, encoded);
        let pv: Vec<f32> = tape.value(projected).iter().map(|&v| v as f32).collect();
        let idx_t = self.temporal.nearest_rows(&self.store, &pv)?;
        let idx_f = self.frequency.nearest_rows(&self.store, &pv)?;
        let q_t = self.gather_codes(tape, &self.temporal, &idx_t);
        let q_f = self.gather_codes(tape, &self.frequency, &idx_f);

        let sg = tape.detach(projected);
        let cb_t = tape.sum_sq_diff(sg, q_t);
        let cb_f = tape.sum_sq_diff(sg, q_f);
        let cb = tape.add(cb_t, cb_f);
        let codebook = tape.scale(cb, inv_rows);

        let commitment = if self.cfg.commitment > 0.0 {
            let st = tape.detach(q_t);
            let sf = tape.detach(q_f);
            let a = tape.sum_sq_diff(projected, st);
            let c = tape.sum_sq_diff(projected, sf);
            let s = tape.add(a, c);
            Some(tape.scale(s, self.cfg.commitment * inv_rows))
        } else {
            None
        };

        let qf_val = tape.value(q_f).to_vec();
        let st_f = tape.straight_through(projected, qf_val);
        let h = self.up_f.forward(tape, &self.store, st_f);
        let h = self.dec_f.forward(tape, &self.store, h, b.per_sample());
        let y_amp = self.head_amp.forward(tape, &self.store, h);
        let y_phase = self.head_phase.forward(tape, &self.store, h);
        let t = b.patch_len;
        let amp = tape.constant(&Tensor::new(vec![rows, t], b.amp_target.clone())?);
        let phase = tape.constant(&Tensor::new(vec![rows, t], b.phase_target.clone())?);
        let a = tape.sum_sq_diff(y_amp, amp);
        let amp_recon = tape.scale(a, inv_rows);
        let p = tape.sum_sq_diff(y_phase, phase);
        let phase_recon = tape.scale(p, inv_rows);
        let freq_recon = tape.add(amp_recon, phase_recon);

        let qt_val = tape.value(q_t).to_vec();
        let st_t = tape.straight_through(projected, qt_val);
        let h = self.up_t.forward(tape, &self.store, st_t);
        let h = self.dec_t.forward(tape, &self.store, h, b.per_sample());
        let y_t = self.head_t.forward(tape, &self.store, h);
        let x = tape.constant(&Tensor::new(vec![rows, t], b.patches.clone())?);
        let sq = tape.sum_sq_diff(y_t, x);
        let temporal_recon = tape.scale(sq, inv_rows);

        let half = b.per_sample() / 2;
        let reordered = tape.gather_rows(e, &b.half_order());
        let halves = self.encoder.forward(tape, &self.store, reordered, half);
        let pooled = tape.group_mean_rows(halves, half);
        let first: Vec<usize> = (0..b.samples).map(|s| 2 * s).collect();
        let second: Vec<usize> = (0..b.samples).map(|s| 2 * s + 1).collect();
        let h1 = tape.gather_rows(pooled, &first);
        let h2 = tape.gather_rows(pooled, &second);
        let contrastive = contrastive_loss(tape, h1, h2, self.cfg.temperature)?;

        let mut total = tape.add(freq_recon, temporal_recon);
        total = tape.add(total, contrastive);
        total = tape.add(total, codebook);
        if let Some(c) = commitment {
            total = tape.add(total, c);
        }
        Ok(StageOneForward {
            loss: StageOneLoss { total, freq_recon, amp_recon, phase_recon, temporal_recon, contrastive, codebook, commitment },
            encoded,
            projected,
            idx_t,
            idx_f,
        })
    }

    /// Token pair of every patch in the grid.
    pub fn tokenize(&self, grid: &PatchGrid) -> Result<TokenGrid> {
        let s = PreparedSample::new(grid, None)?;
        let b = PatchBatch::new(&[&s])?;
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, &b)?;
        let proj = self.project(&mut tape, enc);
        let pv: Vec<f32> = tape.value(proj).iter().map(|&v| v as f32).collect();
        Ok(TokenGrid {
            channels: grid.channels,
            per_channel: grid.per_channel,
            z_t: self.temporal.nearest_rows(&self.store, &pv)?,
            z_f: self.frequency.nearest_rows(&self.store, &pv)?,
        })
    }

    /// Down-projected code-space embeddings of every patch, row-major.
    pub fn project_grid(&self, grid: &PatchGrid) -> Result<Vec<f32>> {
        let s = PreparedSample::new(grid, None)?;
        let b = PatchBatch::new(&[&s])?;
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, &b)?;
        let proj = self.project(&mut tape, enc);
        Ok(tape.tensor(proj).into_data())
    }

    /// Parameter ids of the encoder side (conv stack through down-projection).
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| {
                let n = self.store.name(id);
                ["tfconv.", "freq_proj.", "in_proj.", "pos_embed", "encoder.", "down_proj."]
                    .iter()
                    .any(|p| n.starts_with(p))
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("tokenizer", serde_json::to_value(&self.cfg).expect("config encodes"));
        ck.push_store("param/", &self.store);
        ck.extra = serde_json::json!({
            "usage_temporal": self.temporal.usage,
            "usage_frequency": self.frequency.usage,
        });
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "tokenizer" {
            return Err(Error::Format(format!("expected a tokenizer checkpoint, found {}", ck.kind)));
        }
        let cfg: TokenizerConfig = serde_json::from_value(ck.config.clone())?;
        let mut m = Self::new(cfg, 0)?;
        ck.restore_store("param/", &mut m.store)?;
        let usage = |key: &str| -> Vec<u64> {
            ck.extra.get(key).and_then(|v| serde_json::from_value(v.clone()).ok()).unwrap_or_default()
        };
        let (ut, uf) = (usage("usage_temporal"), usage("usage_frequency"));
        if ut.len() == m.temporal.size {
            m.temporal.usage = ut;
        }
        if uf.len() == m.frequency.size {
            m.frequency.usage = uf;
        }
        Ok(m)
    }
}

/// `(|y_A - A|^2 + |y_P - phi|^2) / patches`.
pub fn freq_loss(tape: &mut Tape, y_amp: Var, y_phase: Var, amp: Var, phase: Var, patches: usize) -> Var {
    let a = tape.sum_sq_diff(y_amp, amp);
    let p = tape.sum_sq_diff(y_phase, phase);
    let s = tape.add(a, p);
    tape.scale(s, 1.0 / patches as f64)
}

/// NT-Xent over the `2B` views `[h; h2]`, positives `(h_i, h2_i)`, cosine
/// similarity, self-pairs excluded. Mean over anchors.
pub fn contrastive_loss(tape: &mut Tape, h: Var, h2: Var, tau: f64) -> Result<Var> {
    let b = tape.shape(h)[0];
    if tape.shape(h2)[0] != b {
        return invalid("contrastive views differ in batch size");
    }
    if b < 2 {
        return invalid("contrastive loss needs at least two pairs");
    }
    if tau <= 0.0 {
        return invalid("temperature must be positive");
    }
    let z = tape.concat_rows(&[h, h2]);
    let z = tape.l2_normalize_rows(z);
    let zt = tape.transpose(z);
    let sim = tape.matmul(z, zt);
    let sim = tape.scale(sim, 1.0 / tau);
    let n = 2 * b;
    let mut mask = vec![0f64; n * n];
    for i in 0..n {
        mask[i * n + i] = -1e9;
    }
    let mask = tape.constant_from(vec![n, n], mask);
    let logits = tape.add(sim, mask);
    let targets: Vec<usize> = (0..n).map(|i| (i + b) % n).collect();
    tape.cross_entropy(logits, &targets, &vec![1.0 / n as f64; n])
}

/// Per-patch token pairs, channel-major like [`PatchGrid`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub channels: usize,
    pub per_channel: usize,
    pub z_t: Vec<usize>,
    pub z_f: Vec<usize>,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.z_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z_t.is_empty()
    }
}

/// Which index stream a dominance or diversity statistic is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Temporal,
    Frequency,
    /// The `(z_t, z_f)` pair as one token.
    Dual,
}

fn stream_tokens(g: &TokenGrid, s: Stream, k: usize) -> Vec<usize> {
    match s {
        Stream::Temporal => g.z_t.clone(),
        Stream::Frequency => g.z_f.clone(),
        Stream::Dual => g.z_t.iter().zip(&g.z_f).map(|(t, f)| t * k + f).collect(),
    }
}

/// Fraction of ever-used tokens whose dominance
/// `max_y N_c^(y) / sum_y N_c^(y)` reaches `tau`.
pub fn class_specific_ratio(samples: &[(TokenGrid, usize)], stream: Stream, codebook_size: usize, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau <= 1.0) {
        return invalid(format!("dominance threshold {tau} outside (0, 1]"));
    }
    let mut counts: HashMap<usize, BTreeMap<usize, u64>> = HashMap::new();
    for (g, label) in samples {
        for tok in stream_tokens(g, stream, codebook_size) {
            *counts.entry(tok).or_default().entry(*label).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return invalid("no tokens used; class-specific ratio is undefined");
    }
    let specific = counts
        .values()
        .filter(|per_class| {
            let total: u64 = per_class.values().sum();
            let max = *per_class.values().max().expect("non-empty");
            max as f64 / total as f64 >= tau
        })
        .count();
    Ok(specific as f64 / counts.len() as f64)
}

/// Number of distinct tokens observed in a stream.
pub fn observed_diversity(grids: &[TokenGrid], stream: Stream, codebook_size: usize) -> usize {
    grids
        .iter()
        .flat_map(|g| stream_tokens(g, stream, codebook_size))
        .collect::<BTreeSet<_>>()
        .len()
}
