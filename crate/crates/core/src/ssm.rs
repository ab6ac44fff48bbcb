//! Stage 2 backbone: SGConv global convolution and sliding-window attention
//! fused by a tanh/sigmoid gate, stacked with residual and skip paths.

use std::time::Instant;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Error, Result};
use crate::nn::{constant, uniform, Linear, Rng64};
use crate::numerics::{direct_causal_convolve, fft_convolve, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsample {
    Nearest,
    Linear,
}

/// Sub-kernel count `log2(L/d) + 1`; `L/d` must be a power of two.
pub fn num_subkernels(len: usize, base: usize) -> Result<usize> {
    if base == 0 || len < base || len % base != 0 || !(len / base).is_power_of_two() {
        return invalid(format!("kernel length {len} is not a power-of-two multiple of base {base}"));
    }
    Ok((len / base).trailing_zeros() as usize + 1)
}

/// Upsampled lengths `d, d, 2d, 4d, ...`, summing to `L`.
pub fn subkernel_lengths(len: usize, base: usize) -> Result<Vec<usize>> {
    let n = num_subkernels(len, base)?;
    Ok((0..n).map(|i| base << i.saturating_sub(1)).collect())
}

/// Learned scalars per feature channel: `d * (log2(L/d) + 1)`.
pub fn sgconv_param_count(len: usize, base: usize, features: usize) -> Result<usize> {
    Ok(features * base * num_subkernels(len, base)?)
}

/// `(source index, weight)` taps producing each of `out` samples from `src`.
fn upsample_taps(src: usize, out: usize, mode: Upsample) -> Vec<[(usize, f64); 2]> {
    (0..out)
        .map(|i| match mode {
            Upsample::Nearest => [(i * src / out, 1.0), (0, 0.0)],
            Upsample::Linear => {
                let pos = ((i as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                let frac = pos - lo as f64;
                [(lo, 1.0 - frac), (hi, frac)]
            }
        })
        .collect()
}

/// Single-channel kernel description.
#[derive(Debug, Clone, PartialEq)]
pub struct SgconvSpec {
    pub len: usize,
    pub base: usize,
    pub alpha: f64,
    pub upsample: Upsample,
    /// Divide by the L1 norm of the concatenated kernel; off means `Z = 1`.
    pub normalize: bool,
    pub weights: Vec<Vec<f32>>,
}

/// `K = concat(k_0, ..., k_{N-1}) / Z`, `k_i = alpha^i * up(w_i)`.
pub fn build_kernel(spec: &SgconvSpec) -> Result<Vec<f32>> {
    let lens = subkernel_lengths(spec.len, spec.base)?;
    if spec.weights.len() != lens.len() {
        return invalid(format!("{} sub-kernel weights for {} sub-kernels", spec.weights.len(), lens.len()));
    }
    let mut k = Vec::with_capacity(spec.len);
    for (i, (w, &m)) in spec.weights.iter().zip(&lens).enumerate() {
        if w.len() != spec.base {
            return invalid(format!("sub-kernel {i} has {} weights, expected {}", w.len(), spec.base));
        }
        let decay = spec.alpha.powi(i as i32);
        for taps in upsample_taps(spec.base, m, spec.upsample) {
            let v: f64 = taps.iter().map(|&(j, c)| c * w[j] as f64).sum();
            k.push(decay * v);
        }
    }
    let z = if spec.normalize { k.iter().map(|v| v.abs()).sum::<f64>().max(1e-12) } else { 1.0 };
    Ok(k.into_iter().map(|v| (v / z) as f32).collect())
}

/// Per-feature causal convolution of `u[seq, F]` (row-major) with
/// `kernel[L, F]` through the FFT path.
pub fn sgconv_forward(u: &[f32], seq: usize, kernel: &[f32], features: usize) -> Result<Vec<f32>> {
    if features == 0 || kernel.len() % features != 0 || u.len() != seq * features {
        return invalid("sgconv_forward: shape mismatch");
    }
    let l = kernel.len() / features;
    if seq > l {
        return invalid(format!("sequence length {seq} exceeds kernel length {l}"));
    }
    let mut out = vec![0f32; u.len()];
    for f in 0..features {
        let col: Vec<f32> = (0..seq).map(|t| u[t * features + f]).collect();
        let kc: Vec<f32> = (0..seq).map(|t| kernel[t * features + f]).collect();
        for (t, y) in fft_convolve(&col, &kc)?.into_iter().enumerate() {
            out[t * features + f] = y;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsmConfig {
    pub patch_len: usize,
    pub features: usize,
    pub blocks: usize,
    pub kernel_len: usize,
    pub base_len: usize,
    pub alpha: f64,
    pub upsample: Upsample,
    /// Attention window; position `i` sees `|i - j| <= window / 2`.
    pub window: usize,
    pub heads: usize,
    pub codebook_size: usize,
}

impl SsmConfig {
    pub fn desk() -> Self {
        Self {
            patch_len: 200,
            features: 32,
            blocks: 2,
            kernel_len: 32,
            base_len: 4,
            alpha: 0.5,
            upsample: Upsample::Nearest,
            window: 8,
            heads: 2,
            codebook_size: 256,
        }
    }

    pub fn paper() -> Self {
        Self {
            patch_len: 200,
            features: 200,
            blocks: 8,
            kernel_len: 1024,
            base_len: 16,
            alpha: 0.5,
            upsample: Upsample::Nearest,
            window: 30,
            heads: 8,
            codebook_size: 4096,
        }
    }

    pub fn validate(&self) -> Result<()> {
        num_subkernels(self.kernel_len, self.base_len)?;
        if self.features == 0 || self.heads == 0 || self.features % self.heads != 0 {
            return invalid(format!("features {} must be a positive multiple of heads {}", self.features, self.heads));
        }
        if self.blocks == 0 {
            return invalid("the backbone needs at least one block");
        }
        if self.window == 0 {
            return invalid("window must be at least 1");
        }
        if self.codebook_size < 2 || self.patch_len == 0 {
            return invalid("codebook_size >= 2 and patch_len > 0 required");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return invalid(format!("decay {} outside (0, 1]", self.alpha));
        }
        Ok(())
    }
}

/// Gate input/output maps are pointwise (kernel-1) convolutions, i.e.
/// per-position linear maps. The last block of a stack has no residual map
/// since nothing consumes its residual output.
#[derive(Debug, Clone)]
pub struct EegssmBlock {
    pub rms_scale: ParamId,
    pub sg_weights: Vec<ParamId>,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub gate_f: Linear,
    pub gate_g: Linear,
    pub out_res: Option<Linear>,
    pub out_skip: Linear,
    pub base_len: usize,
    pub kernel_len: usize,
    pub alpha: f64,
    pub upsample: Upsample,
    pub window: usize,
    pub heads: usize,
}

impl EegssmBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &SsmConfig, residual: bool, rng: &mut Rng64) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.features;
        let n = num_subkernels(cfg.kernel_len, cfg.base_len)?;
        let bound = 1.0 / (cfg.base_len as f32).sqrt();
        let sg_weights = (0..n)
            .map(|i| store.add(format!("{name}.sg.w{i}"), uniform(rng, vec![cfg.base_len, f], bound)))
            .collect::<Result<_>>()?;
        let lin = |store: &mut ParamStore, tag: &str, i: usize, rng: &mut Rng64| {
            Linear::new(store, &format!("{name}.{tag}"), i, f, true, rng)
        };
        Ok(Self {
            rms_scale: store.add(format!("{name}.rms"), constant(vec![f], 1.0))?,
            sg_weights,
            q: lin(store, "swa.q", f, rng)?,
            k: Linear::new(store, &format!("{name}.swa.k"), f, f, false, rng)?,
            v: lin(store, "swa.v", f, rng)?,
            o: lin(store, "swa.o", f, rng)?,
            gate_f: lin(store, "gate.f", 2 * f, rng)?,
            gate_g: lin(store, "gate.g", 2 * f, rng)?,
            out_res: if residual { Some(lin(store, "out.res", f, rng)?) } else { None },
            out_skip: lin(store, "out.skip", f, rng)?,
            base_len: cfg.base_len,
            kernel_len: cfg.kernel_len,
            alpha: cfg.alpha,
            upsample: cfg.upsample,
            window: cfg.window,
            heads: cfg.heads,
        })
    }

    /// Global kernel `[L, F]`, L1-normalized per feature.
    pub fn kernel(&self, tape: &mut Tape, store: &ParamStore) -> Var {
        let lens = subkernel_lengths(self.kernel_len, self.base_len).expect("validated at construction");
        let mut parts = Vec::with_capacity(lens.len());
        for (i, (&w, &m)) in self.sg_weights.iter().zip(&lens).enumerate() {
            let w = tape.param(store, w);
            let up = match self.upsample {
                Upsample::Nearest => {
                    let idx: Vec<usize> = (0..m).map(|t| t * self.base_len / m).collect();
                    tape.gather_rows(w, &idx)
                }
                Upsample::Linear => {
                    let mut mat = vec![0f64; m * self.base_len];
                    for (t, taps) in upsample_taps(self.base_len, m, Upsample::Linear).into_iter().enumerate() {
                        for (j, c) in taps {
                            mat[t * self.base_len + j] += c;
                        }
                    }
                    let u = tape.constant_from(vec![m, self.base_len], mat);
                    tape.matmul(u, w)
                }
            };
            parts.push(tape.scale(up, self.alpha.powi(i as i32)));
        }
        let k = tape.concat_rows(&parts);
        tape.normalize_l1_cols(k)
    }

    /// Kernel values `[L, F]` outside any tape.
    pub fn kernel_values(&self, store: &ParamStore) -> Tensor {
        let mut tape = Tape::new();
        let k = self.kernel(&mut tape, store);
        tape.tensor(k)
    }

    /// `x` is `[B * seq, F]`. Returns `(x + y_1, y_2)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, seq: usize) -> Result<(Var, Var)> {
        let scale = tape.param(store, self.rms_scale);
        let h = tape.rms_norm(x, scale);
        let kernel = self.kernel(tape, store);
        let y_sg = tape.causal_conv(h, kernel, seq)?;
        let y_swa = self.swa(tape, store, h, seq);
        let (_, y1, y2) = self.gate(tape, store, y_sg, y_swa);
        Ok((y1.map_or(x, |y1| tape.add(x, y1)), y2))
    }

    pub fn swa(&self, tape: &mut Tape, store: &ParamStore, h: Var, seq: usize) -> Var {
        let q = self.q.forward(tape, store, h);
        let k = self.k.forward(tape, store, h);
        let v = self.v.forward(tape, store, h);
        let a = tape.attention(q, k, v, self.heads, seq, Some(self.window / 2));
        self.o.forward(tape, store, a)
    }

    /// `z = tanh(W_f [y_sg; y_swa]) * sigmoid(W_g [y_sg; y_swa])`, then the
    /// residual (if any) and skip maps of `z`.
    pub fn gate(&self, tape: &mut Tape, store: &ParamStore, y_sg: Var, y_swa: Var) -> (Var, Option<Var>, Var) {
        let c = tape.concat_cols(&[y_sg, y_swa]);
        let f = self.gate_f.forward(tape, store, c);
        let f = tape.tanh(f);
        let g = self.gate_g.forward(tape, store, c);
        let g = tape.sigmoid(g);
        let z = tape.mul(f, g);
        let y1 = self.out_res.as_ref().map(|l| l.forward(tape, store, z));
        let y2 = self.out_skip.forward(tape, store, z);
        (z, y1, y2)
    }

    /// Zeroes the residual output map, making the block an identity on `x`.
    pub fn zero_residual_map(&self, store: &mut ParamStore) {
        if let Some(l) = &self.out_res {
            for id in [Some(l.w), l.b].into_iter().flatten() {
                store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Sum of the skip outputs of every block.
pub fn stack_forward(blocks: &[EegssmBlock], tape: &mut Tape, store: &ParamStore, x: Var, seq: usize) -> Result<Var> {
    let Some((first, rest)) = blocks.split_first() else {
        return invalid("stack needs at least one block");
    };
    let (mut x, mut acc) = first.forward(tape, store, x, seq)?;
    for b in rest {
        let (nx, skip) = b.forward(tape, store, x, seq)?;
        x = nx;
        acc = tape.add(acc, skip);
    }
    Ok(acc)
}

/// Patch embedding, mask embedding, block stack and the two token heads.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: SsmConfig,
    pub store: ParamStore,
    pub input: Linear,
    pub mask_embed: ParamId,
    pub blocks: Vec<EegssmBlock>,
    pub head_t: Linear,
    pub head_f: Linear,
}

/// Logits of both heads and the pre-head features, all `[B * seq, .]`.
#[derive(Debug, Clone, Copy)]
pub struct BackboneOutput {
    pub features: Var,
    pub logits_t: Var,
    pub logits_f: Var,
}

impl Backbone {
    pub fn new(cfg: SsmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng64::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let f = cfg.features;
        let input = Linear::new(&mut store, "input", cfg.patch_len, f, true, &mut rng)?;
        let mask_embed = store.add("mask_embed", uniform(&mut rng, vec![1, f], 0.02))?;
        let blocks = (0..cfg.blocks)
            .map(|i| EegssmBlock::new(&mut store, &format!("block{i}"), &cfg, i + 1 < cfg.blocks, &mut rng))
            .collect::<Result<_>>()?;
        // Near-zero heads start the loss at the uniform-prediction value.
        let small = 1e-3 / (f as f32).sqrt();
        let head_t = Linear::with_bound(&mut store, "head.temporal", f, cfg.codebook_size, true, small, &mut rng)?;
        let head_f = Linear::with_bound(&mut store, "head.frequency", f, cfg.codebook_size, true, small, &mut rng)?;
        Ok(Self { cfg, store, input, mask_embed, blocks, head_t, head_f })
    }

    /// Embeds `patches[B * seq, T]`, replacing rows with `mask[i]` set by
    /// the mask embedding.
    pub fn embed(&self, tape: &mut Tape, patches: &Tensor, mask: Option<&[bool]>) -> Result<Var> {
        let shape = patches.shape();
        if shape.len() != 2 || shape[1] != self.cfg.patch_len {
            return invalid(format!("patch rows of shape {shape:?}, expected [_, {}]", self.cfg.patch_len));
        }
        let x = tape.constant(patches);
        let e = self.input.forward(tape, &self.store, x);
        let Some(mask) = mask else { return Ok(e) };
        let rows = shape[0];
        if mask.len() != rows {
            return invalid(format!("mask of {} cells for {rows} rows", mask.len()));
        }
        let m = tape.param(&self.store, self.mask_embed);
        let table = tape.concat_rows(&[e, m]);
        let idx: Vec<usize> = mask.iter().enumerate().map(|(i, &hid)| if hid { rows } else { i }).collect();
        Ok(tape.gather_rows(table, &idx))
    }

    /// Skip-sum features `[B * seq, F]`.
    pub fn features(&self, tape: &mut Tape, patches: &Tensor, mask: Option<&[bool]>, seq: usize) -> Result<Var> {
        if seq == 0 || patches.shape()[0] % seq != 0 {
            return invalid(format!("{} rows do not split into sequences of {seq}", patches.shape()[0]));
        }
        if seq > self.cfg.kernel_len {
            return invalid(format!("sequence of {seq} tokens exceeds kernel length {}", self.cfg.kernel_len));
        }
        let x = self.embed(tape, patches, mask)?;
        stack_forward(&self.blocks, tape, &self.store, x, seq)
    }

    pub fn forward(&self, tape: &mut Tape, patches: &Tensor, mask: Option<&[bool]>, seq: usize) -> Result<BackboneOutput> {
        let features = self.features(tape, patches, mask, seq)?;
        Ok(BackboneOutput {
            features,
            logits_t: self.head_t.forward(tape, &self.store, features),
            logits_f: self.head_f.forward(tape, &self.store, features),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("eegssm", serde_json::to_value(&self.cfg).expect("config encodes"));
        ck.push_store("param/", &self.store);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "eegssm" {
            return Err(Error::Format(format!("expected an eegssm checkpoint, found {}", ck.kind)));
        }
        let cfg: SsmConfig = serde_json::from_value(ck.config.clone())?;
        let mut m = Self::new(cfg, 0)?;
        ck.restore_store("param/", &mut m.store)?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub backbone: String,
    pub seq_len: usize,
    pub features: usize,
    pub params: usize,
    pub wall_ms: f64,
    pub peak_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub seq_lens: Vec<usize>,
    pub features: usize,
    pub base_len: usize,
    pub repeats: usize,
    /// Dense attention is skipped above this length (its score matrix
    /// grows quadratically).
    pub attention_max_len: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn desk() -> Self {
        Self {
            seq_lens: (12..=16).map(|p| 1 << p).collect(),
            features: 1,
            base_len: 16,
            repeats: 3,
            attention_max_len: 1 << 13,
            seed: 0,
        }
    }
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("backbone,seq_len,features,params,wall_ms,peak_bytes\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.4},{}\n",
            r.backbone, r.seq_len, r.features, r.params, r.wall_ms, r.peak_bytes
        ));
    }
    s
}

fn min_ms(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(best)
}

/// Single-head dense attention materializing the full score matrix.
fn dense_attention(x: &[f32], seq: usize, dim: usize) -> Vec<f32> {
    let scale = 1.0 / (dim as f32).sqrt();
    let mut scores = vec![0f32; seq * seq];
    for i in 0..seq {
        let qi = &x[i * dim..(i + 1) * dim];
        for j in 0..seq {
            let kj = &x[j * dim..(j + 1) * dim];
            scores[i * seq + j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
        }
    }
    let mut out = vec![0f32; seq * dim];
    for i in 0..seq {
        let row = &mut scores[i * seq..(i + 1) * seq];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        for (j, &p) in row.iter().enumerate() {
            for d in 0..dim {
                out[i * dim + d] += p / z * x[j * dim + d];
            }
        }
    }
    out
}

/// Mean of `t(2L) / t(L)` over every `L` whose double was also timed.
pub fn doubling_ratio(rows: &[BenchRow], backbone: &str) -> Option<f64> {
    let time = |l: usize| rows.iter().find(|r| r.backbone == backbone && r.seq_len == l).map(|r| r.wall_ms);
    let ratios: Vec<f64> = rows
        .iter()
        .filter(|r| r.backbone == backbone)
        .filter_map(|r| time(2 * r.seq_len).map(|t2| t2 / r.wall_ms))
        .collect();
    (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// Wall time (min over repeats) and working-set size of the SGConv FFT
/// path, dense attention and direct convolution on identical shapes.
pub fn bench_backbones(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    use rand::Rng;
    let mut rng = Rng64::seed_from_u64(cfg.seed);
    let f = cfg.features.max(1);
    let mut rows = Vec::new();
    for &l in &cfg.seq_lens {
        if !l.is_power_of_two() {
            return invalid(format!("bench length {l} is not a power of two"));
        }
        let u: Vec<f32> = (0..l * f).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let base = cfg.base_len.min(l);
        let n = num_subkernels(l, base)?;
        let spec = SgconvSpec {
            len: l,
            base,
            alpha: 0.5,
            upsample: Upsample::Nearest,
            normalize: true,
            weights: (0..n).map(|_| (0..base).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect(),
        };
        let k1 = build_kernel(&spec)?;
        let kernel: Vec<f32> = (0..l * f).map(|i| k1[i / f]).collect();
        let fft_ms = min_ms(cfg.repeats, || sgconv_forward(&u, l, &kernel, f).map(|_| ()))?;
        let padded = (2 * l - 1).next_power_of_two();
        rows.push(BenchRow {
            backbone: "sgconv".into(),
            seq_len: l,
            features: f,
            params: sgconv_param_count(l, base, f)?,
            wall_ms: fft_ms,
            // Two complex f64 buffers of the padded length.
            peak_bytes: 2 * padded * 16,
        });
        let direct_ms = min_ms(cfg.repeats, || {
            for j in 0..f {
                let col: Vec<f32> = (0..l).map(|t| u[t * f + j]).collect();
                direct_causal_convolve(&col, &k1)?;
            }
            Ok(())
        })?;
        rows.push(BenchRow {
            backbone: "direct".into(),
            seq_len: l,
            features: f,
            params: l * f,
            wall_ms: direct_ms,
            peak_bytes: 3 * l * 4,
        });
        if l <= cfg.attention_max_len {
            let attn_ms = min_ms(cfg.repeats, || {
                dense_attention(&u, l, f);
                Ok(())
            })?;
            rows.push(BenchRow {
                backbone: "attention".into(),
                seq_len: l,
                features: f,
                params: 4 * f * f + 4 * f,
                wall_ms: attn_ms,
                peak_bytes: l * l * 4 + 2 * l * f * 4,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_kernel() {
        let spec = SgconvSpec {
            len: 8,
            base: 2,
            alpha: 0.5,
            upsample: Upsample::Nearest,
            normalize: false,
            weights: vec![vec![1.0, 1.0]; 3],
        };
        assert_eq!(build_kernel(&spec).unwrap(), vec![1.0, 1.0, 0.5, 0.5, 0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn subkernel_counts() {
        assert_eq!(num_subkernels(1024, 16).unwrap(), 7);
        assert_eq!(subkernel_lengths(16, 16).unwrap(), vec![16]);
        assert!(num_subkernels(24, 4).is_err());
    }

    #[test]
    fn linear_upsample_interpolates() {
        let t = upsample_taps(2, 4, Upsample::Linear);
        let w = [0.0, 1.0];
        let v: Vec<f64> = t.iter().map(|taps| taps.iter().map(|&(j, c)| c * w[j]).sum()).collect();
        assert_eq!(v, vec![0.0, 0.25, 0.75, 1.0]);
    }
}
