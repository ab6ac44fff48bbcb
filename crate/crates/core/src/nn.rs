//! Parameterized layers built on the tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

pub type Rng64 = ChaCha8Rng;

pub fn uniform(rng: &mut Rng64, shape: Vec<usize>, bound: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("finite init")
}

pub fn constant(shape: Vec<usize>, v: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, vec![v; n]).expect("finite init")
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform init in `±1/sqrt(in_dim)` for weight and bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut Rng64,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f32).sqrt();
        Self::with_bound(store, name, in_dim, out_dim, bias, bound, rng)
    }

    pub fn with_bound(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        bound: f32,
        rng: &mut Rng64,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), uniform(rng, vec![in_dim, out_dim], bound))?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), uniform(rng, vec![out_dim], bound))?)
        } else {
            None
        };
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.in_dim * self.out_dim + if self.b.is_some() { self.out_dim } else { 0 }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), constant(vec![dim], 1.0))?,
            beta: store.add(format!("{name}.beta"), constant(vec![dim], 0.0))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head self-attention over groups of consecutive rows. The key map
/// has no bias: a key bias shifts every score of a query row equally and
/// cancels in the softmax.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng64) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, false, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng)?,
            heads,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        group: usize,
        half_window: Option<usize>,
    ) -> Var {
        let q = self.q.forward(tape, store, x);
        let k = self.k.forward(tape, store, x);
        let v = self.v.forward(tape, store, x);
        let a = tape.attention(q, k, v, self.heads, group, half_window);
        self.o.forward(tape, store, a)
    }
}

/// Pre-norm transformer encoder layer with a GELU MLP.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp: usize,
        rng: &mut Rng64,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, mlp, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), mlp, dim, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, group: usize) -> Var {
        let h = self.ln1.forward(tape, store, x);
        let a = self.attn.forward(tape, store, h, group, None);
        let x = tape.add(x, a);
        let h = self.ln2.forward(tape, store, x);
        let h = self.fc1.forward(tape, store, h);
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, store, h);
        tape.add(x, h)
    }
}

/// Stack of [`TransformerLayer`]s with a final layer norm.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub layers: Vec<TransformerLayer>,
    pub ln_out: LayerNorm,
}

impl Transformer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        mlp: usize,
        rng: &mut Rng64,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| TransformerLayer::new(store, &format!("{name}.{i}"), dim, heads, mlp, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers, ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), dim)? })
    }

    /// `x` is `[groups * group, dim]`; attention never crosses groups.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var, group: usize) -> Var {
        for layer in &self.layers {
            x = layer.forward(tape, store, x, group);
        }
        self.ln_out.forward(tape, store, x)
    }
}
