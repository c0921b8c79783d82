//! Layers shared by the language model, the autoencoder, the denoiser and the
//! reaction transformer. Weights are stored input-by-output and
//! right-multiply row-major activations: `y = x W + b`.

use scicore_autograd::{ParamStore, SeededRng, Tape, Tensor, Var};

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    pub prefix: String,
    pub input: usize,
    pub output: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, input: usize, output: usize) -> Self {
        Linear {
            prefix: prefix.into(),
            input,
            output,
            bias: true,
        }
    }

    pub fn without_bias(prefix: impl Into<String>, input: usize, output: usize) -> Self {
        Linear {
            bias: false,
            ..Linear::new(prefix, input, output)
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) {
        store.init_glorot(&self.weight_name(), self.input, self.output, rng);
        if self.bias {
            store.init_zeros(&self.bias_name(), &[1, self.output]);
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.weight_name())?;
        let y = tape.matmul(x, w)?;
        if self.bias {
            let b = tape.param(store, &self.bias_name())?;
            Ok(tape.add(y, b)?)
        } else {
            Ok(y)
        }
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub prefix: String,
    pub width: usize,
}

impl LayerNorm {
    pub fn new(prefix: impl Into<String>, width: usize) -> Self {
        LayerNorm {
            prefix: prefix.into(),
            width,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.init_full(&format!("{}.g", self.prefix), &[1, self.width], 1.0);
        store.init_zeros(&format!("{}.b", self.prefix), &[1, self.width]);
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        let g = tape.param(store, &format!("{}.g", self.prefix))?;
        let b = tape.param(store, &format!("{}.b", self.prefix))?;
        let y = tape.mul(n, g)?;
        Ok(tape.add(y, b)?)
    }
}

/// Multi-head self-attention without biases.
#[derive(Debug, Clone)]
pub struct Attention {
    pub prefix: String,
    pub width: usize,
    pub heads: usize,
}

impl Attention {
    fn proj(&self, name: &str) -> Linear {
        Linear::without_bias(format!("{}.{name}", self.prefix), self.width, self.width)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) {
        for name in ["q", "k", "v", "o"] {
            self.proj(name).init(store, rng);
        }
    }

    /// `mask`, when given, is an additive `n x n` constant (0 or -inf).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mask: Option<Var>) -> Result<Var> {
        let q = self.proj("q").forward(tape, store, x)?;
        let k = self.proj("k").forward(tape, store, x)?;
        let v = self.proj("v").forward(tape, store, x)?;
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let p = tape.softmax(scores)?;
            outs.push(tape.matmul(p, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.hcat(&outs)? };
        self.proj("o").forward(tape, store, cat)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub prefix: String,
    pub width: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl Block {
    pub fn new(prefix: impl Into<String>, width: usize, heads: usize, hidden: usize) -> Self {
        Block {
            prefix: prefix.into(),
            width,
            heads,
            hidden,
        }
    }

    fn ln1(&self) -> LayerNorm {
        LayerNorm::new(format!("{}.ln1", self.prefix), self.width)
    }

    fn ln2(&self) -> LayerNorm {
        LayerNorm::new(format!("{}.ln2", self.prefix), self.width)
    }

    fn attn(&self) -> Attention {
        Attention {
            prefix: format!("{}.attn", self.prefix),
            width: self.width,
            heads: self.heads,
        }
    }

    fn fc1(&self) -> Linear {
        Linear::new(format!("{}.fc1", self.prefix), self.width, self.hidden)
    }

    fn fc2(&self) -> Linear {
        Linear::new(format!("{}.fc2", self.prefix), self.hidden, self.width)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) {
        self.ln1().init(store);
        self.ln2().init(store);
        self.attn().init(store, rng);
        self.fc1().init(store, rng);
        self.fc2().init(store, rng);
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mask: Option<Var>) -> Result<Var> {
        let h = self.ln1().forward(tape, store, x)?;
        let a = self.attn().forward(tape, store, h, mask)?;
        let x = tape.add(x, a)?;
        let h = self.ln2().forward(tape, store, x)?;
        let h = self.fc1().forward(tape, store, h)?;
        let h = tape.relu(h);
        let h = self.fc2().forward(tape, store, h)?;
        Ok(tape.add(x, h)?)
    }
}

/// Stack of blocks named `<prefix>.<i>`.
pub fn blocks(prefix: &str, layers: usize, width: usize, heads: usize, hidden: usize) -> Vec<Block> {
    (0..layers)
        .map(|i| Block::new(format!("{prefix}.{i}"), width, heads, hidden))
        .collect()
}

/// Sinusoidal embedding of a scalar position.
pub fn sinusoid(pos: f64, width: usize) -> Vec<f64> {
    (0..width)
        .map(|j| {
            let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / width as f64);
            if j % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            }
        })
        .collect()
}

/// `n x width` table of sinusoidal position encodings for positions `0..n`.
pub fn position_table(n: usize, width: usize) -> Tensor {
    let data = (0..n).flat_map(|p| sinusoid(p as f64, width)).collect();
    Tensor::new(vec![n.max(1), width], data).unwrap_or_else(|_| Tensor::zeros(&[1, width]))
}

/// Additive strict-causal mask: 0 on and below the diagonal, -inf above.
pub fn causal_mask(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            t.set(i, j, f64::NEG_INFINITY);
        }
    }
    t
}

/// Cosine similarity between two equal-length slices (0 when either is zero).
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
