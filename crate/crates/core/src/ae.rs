//! SMILES autoencoder: a fixed-length per-position latent `L x d_z`.

use scicore_autograd::{Adam, AdamConfig, ParamStore, SeededRng, Tape, Tensor, Var};
use scicore_chem::parse_smiles;

use crate::error::{smiles_err, ModelError, Result};
use crate::nn::{blocks, position_table, Block, LayerNorm, Linear};

pub const AE_PREFIX: &str = "ae.";
const AE_PAD: usize = 0;
const FIRST: u8 = b' ';
const LAST: u8 = b'~';
pub const AE_VOCAB: usize = 1 + (LAST - FIRST + 1) as usize;

#[derive(Debug, Clone, PartialEq)]
pub struct AeConfig {
    /// Latent rows; also the longest encodable SMILES.
    pub length: usize,
    pub latent: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Standard deviation of Gaussian latent noise during pretraining.
    pub noise: f64,
    /// Probability that a latent row is swapped for the same row of another
    /// batch member during pretraining.
    pub row_mix: f64,
    /// Final fraction of pretraining steps with row mixing off and the noise
    /// annealed to zero, so clean latents decode exactly.
    pub clean_tail: f64,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            length: 16,
            latent: 8,
            width: 32,
            layers: 2,
            heads: 4,
            hidden: 64,
            noise: 2.0,
            row_mix: 0.15,
            clean_tail: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub config: AeConfig,
}

fn char_id(c: u8) -> Option<usize> {
    (FIRST..=LAST).contains(&c).then(|| 1 + (c - FIRST) as usize)
}

impl Autoencoder {
    pub fn new(config: AeConfig) -> Self {
        Autoencoder { config }
    }

    fn enc_blocks(&self) -> Vec<Block> {
        let c = &self.config;
        blocks("ae.enc", c.layers, c.width, c.heads, c.hidden)
    }

    fn dec_blocks(&self) -> Vec<Block> {
        let c = &self.config;
        blocks("ae.dec", c.layers, c.width, c.heads, c.hidden)
    }

    fn to_latent(&self) -> Linear {
        Linear::new("ae.to_latent", self.config.width, self.config.latent)
    }

    fn from_latent(&self) -> Linear {
        Linear::new("ae.from_latent", self.config.latent, self.config.width)
    }

    fn dec_norm(&self) -> LayerNorm {
        LayerNorm::new("ae.dec_ln", self.config.width)
    }

    fn out(&self) -> Linear {
        Linear::new("ae.out", self.config.width, AE_VOCAB)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) {
        store.init_normal("ae.emb", &[AE_VOCAB, self.config.width], 0.3, rng);
        for b in self.enc_blocks().iter().chain(self.dec_blocks().iter()) {
            b.init(store, rng);
        }
        self.to_latent().init(store, rng);
        self.from_latent().init(store, rng);
        self.dec_norm().init(store);
        self.out().init(store, rng);
    }

    /// Character ids padded to the latent length.
    pub fn char_ids(&self, smiles: &str) -> Result<Vec<usize>> {
        parse_smiles(smiles).map_err(smiles_err(smiles))?;
        if smiles.len() > self.config.length {
            return Err(ModelError::TooLong {
                text: smiles.to_string(),
                max: self.config.length,
            });
        }
        let mut ids: Vec<usize> = smiles.bytes().filter_map(char_id).collect();
        ids.resize(self.config.length, AE_PAD);
        Ok(ids)
    }

    pub fn encode_tape(&self, tape: &mut Tape, store: &ParamStore, smiles: &str) -> Result<Var> {
        let ids = self.char_ids(smiles)?;
        let table = tape.param(store, "ae.emb")?;
        let x = tape.gather_rows(table, &ids)?;
        let pos = tape.constant(position_table(self.config.length, self.config.width));
        let mut x = tape.add(x, pos)?;
        for b in self.enc_blocks() {
            x = b.forward(tape, store, x, None)?;
        }
        let z = self.to_latent().forward(tape, store, x)?;
        Ok(tape.layer_norm(z)?)
    }

    /// Per-position character logits `L x vocab`.
    pub fn decode_tape(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let (r, c) = tape.value(z).dims2()?;
        if r != self.config.length || c != self.config.latent {
            return Err(ModelError::ShapeMismatch(format!(
                "latent is {r}x{c}, expected {}x{}",
                self.config.length, self.config.latent
            )));
        }
        let x = self.from_latent().forward(tape, store, z)?;
        let pos = tape.constant(position_table(self.config.length, self.config.width));
        let mut x = tape.add(x, pos)?;
        for b in self.dec_blocks() {
            x = b.forward(tape, store, x, None)?;
        }
        let x = self.dec_norm().forward(tape, store, x)?;
        self.out().forward(tape, store, x)
    }

    pub fn encode(&self, store: &ParamStore, smiles: &str) -> Result<Tensor> {
        let mut tape = Tape::new();
        let z = self.encode_tape(&mut tape, store, smiles)?;
        Ok(tape.value(z).clone())
    }

    /// Greedy characters up to the first padding position.
    pub fn decode(&self, store: &ParamStore, z: &Tensor) -> Result<String> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let logits = self.decode_tape(&mut tape, store, zv)?;
        let l = tape.value(logits);
        let mut out = String::new();
        for r in 0..l.rows() {
            let row = l.row_slice(r);
            let best = argmax(row);
            if best == AE_PAD {
                break;
            }
            out.push(char::from(FIRST + (best - 1) as u8));
        }
        Ok(out)
    }

    /// Latent noise std and row-mix probability at `step` of `steps`. Noise
    /// ramps up over the first half and back down to zero over the last
    /// `clean_tail` fraction, where rows are no longer mixed.
    pub fn corruption(&self, step: usize, steps: usize) -> (f64, f64) {
        let c = &self.config;
        let ramp = (steps as f64 / 2.0).max(1.0);
        let noise = c.noise * (step as f64 / ramp).min(1.0);
        let tail = steps as f64 * c.clean_tail;
        let left = (steps - step) as f64;
        if left <= tail {
            return (noise * (left - 1.0).max(0.0) / tail, 0.0);
        }
        (noise, c.row_mix)
    }

    /// Mean per-position cross-entropy of reconstructing each SMILES from a
    /// latent perturbed by `noise`-scaled Gaussian noise, with each latent row
    /// swapped for another batch member's with probability `mix`.
    pub fn reconstruction_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[String],
        noise: f64,
        mix: f64,
        rng: &mut SeededRng,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut total = None;
        let latents = batch
            .iter()
            .map(|s| self.encode_tape(tape, store, s))
            .collect::<Result<Vec<_>>>()?;
        for (i, s) in batch.iter().enumerate() {
            let ids = self.char_ids(s)?;
            let mut z = latents[i];
            if mix > 0.0 && batch.len() > 1 {
                let other = (i + 1 + rng.below(batch.len() - 1)) % batch.len();
                let (l, d) = (self.config.length, self.config.latent);
                let mask: Vec<f64> = (0..l)
                    .flat_map(|_| {
                        let m = if rng.bernoulli(mix) { 1.0 } else { 0.0 };
                        std::iter::repeat_n(m, d)
                    })
                    .collect();
                let donor = tape.constant(tape.value(latents[other]).clone());
                let diff = tape.sub(donor, z)?;
                let mask = tape.constant(Tensor::new(vec![l, d], mask)?);
                let swap = tape.mul(diff, mask)?;
                z = tape.add(z, swap)?;
            }
            let z = if noise > 0.0 {
                let eps = tape.constant(rng.normal_tensor(&[self.config.length, self.config.latent], noise));
                tape.add(z, eps)?
            } else {
                z
            };
            let logits = self.decode_tape(tape, store, z)?;
            let labels: Vec<Option<usize>> = ids.into_iter().map(Some).collect();
            let ce = tape.cross_entropy(logits, &labels)?;
            total = Some(match total {
                None => ce,
                Some(t) => tape.add(t, ce)?,
            });
        }
        let t = total.ok_or(ModelError::EmptyBatch)?;
        Ok(tape.scale(t, 1.0 / batch.len() as f64))
    }
}

impl Autoencoder {
    /// Full-batch pretraining under the [`Autoencoder::corruption`] schedule.
    /// Returns per-step losses.
    pub fn pretrain(
        &self,
        store: &mut ParamStore,
        corpus: &[String],
        steps: usize,
        lr: f64,
        rng: &mut SeededRng,
    ) -> Result<Vec<f64>> {
        let mut adam = Adam::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        });
        let mut losses = Vec::with_capacity(steps);
        for step in 0..steps {
            let (noise, mix) = self.corruption(step, steps);
            let mut tape = Tape::new();
            let loss = self.reconstruction_loss(&mut tape, store, corpus, noise, mix, rng)?;
            losses.push(tape.value(loss).item());
            tape.backward(loss)?;
            adam.step(store, &tape.param_grads(), |n| !n.starts_with(AE_PREFIX));
        }
        Ok(losses)
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
