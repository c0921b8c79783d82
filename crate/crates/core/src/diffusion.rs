//! Latent denoising diffusion: schedule, closed-form noising, a transformer
//! denoiser, guidance and ancestral sampling.

use scicore_autograd::{Adam, AdamConfig, LrSchedule, ParamStore, SeededRng, Tape, Tensor, Var};
use scicore_chem::check_validity;

use crate::ae::Autoencoder;
use crate::error::{ModelError, Result};
use crate::nn::{position_table, sinusoid, Attention, Linear};

pub const DIT_PREFIX: &str = "dit.";
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
/// Probability that a training condition is replaced by the null token.
pub const CONDITION_DROPOUT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sqrt_alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear interpolation from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(ModelError::InvalidRange("zero steps".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(ModelError::InvalidRange(format!(
                "need 0 < {beta_start} <= {beta_end} < 1"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(ModelError::InvalidRange("zero steps".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(ModelError::InvalidRange(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut sqrt_alpha_bars = Vec::with_capacity(betas.len());
        let (mut ab, mut sab) = (1.0, 1.0);
        for b in &betas {
            ab *= 1.0 - b;
            sab *= (1.0 - b).sqrt();
            alpha_bars.push(ab);
            sqrt_alpha_bars.push(sab);
        }
        Ok(NoiseSchedule {
            betas,
            alpha_bars,
            sqrt_alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Product of `sqrt(alpha_s)` for `s <= t`; the mean coefficient of the
    /// closed-form forward marginal.
    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.sqrt_alpha_bars[t - 1]
        }
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(ModelError::StepOutOfRange {
                step: t,
                max: self.steps(),
            });
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(ModelError::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`; `t = 0` returns `z0`.
pub fn forward_noise(z0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check(t)?;
    same_shape(z0, eps)?;
    let a = schedule.sqrt_alpha_bar(t);
    let b = (1.0 - schedule.alpha_bar(t)).sqrt();
    let data = z0.data().iter().zip(eps.data()).map(|(z, e)| a * z + b * e).collect();
    Ok(Tensor::new(z0.shape().to_vec(), data)?)
}

/// Guided noise estimate `(1 - s) eps_u + s eps_c`, equal to
/// `eps_u + s (eps_c - eps_u)` and exact at `s = 0` and `s = 1`.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f64) -> Result<Tensor> {
    same_shape(eps_uncond, eps_cond)?;
    let data = eps_uncond
        .data()
        .iter()
        .zip(eps_cond.data())
        .map(|(u, c)| (1.0 - scale) * u + scale * c)
        .collect();
    Ok(Tensor::new(eps_uncond.shape().to_vec(), data)?)
}

/// Noised encoding of a source molecule at step `t`.
pub fn bridge_init(
    ae: &Autoencoder,
    store: &ParamStore,
    source: &str,
    t: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let z = ae.encode(store, source)?;
    forward_noise(&z, t, eps, schedule)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DitConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Width of condition vectors.
    pub condition: usize,
    /// Width of the language-model states fed to the text projection.
    pub text: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        DitConfig {
            width: 64,
            layers: 2,
            heads: 4,
            hidden: 128,
            condition: 32,
            text: 64,
        }
    }
}

/// Condition for one denoiser call.
#[derive(Debug, Clone, Copy)]
pub enum Condition {
    Null,
    Vector(Var),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub scale: f64,
    /// Sampler steps; 0 or `T` visits every step of the schedule.
    pub steps: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { scale: 1.0, steps: 0 }
    }
}

/// Noise predictor interface so the loss can be checked against injected
/// oracles.
pub trait NoisePredictor {
    fn predict(&self, tape: &mut Tape, store: &ParamStore, z_t: Var, t: usize, cond: Condition) -> Result<Var>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&mut Tape, &ParamStore, Var, usize, Condition) -> Result<Var>,
{
    fn predict(&self, tape: &mut Tape, store: &ParamStore, z_t: Var, t: usize, cond: Condition) -> Result<Var> {
        self(tape, store, z_t, t, cond)
    }
}

/// Transformer over latent rows. The timestep embedding and the condition
/// embedding (a learned null row for the unconditional branch) are added to
/// every row. The network output `v` is turned into a noise estimate
/// `sqrt(1 - alpha_bar_t) z_t + sqrt(alpha_bar_t) v`, which keeps the
/// regression target at unit scale for every `t`.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DitConfig,
    pub latent: usize,
    pub length: usize,
    pub schedule: NoiseSchedule,
}

impl Denoiser {
    pub fn new(config: DitConfig, length: usize, latent: usize, schedule: NoiseSchedule) -> Self {
        Denoiser {
            config,
            latent,
            length,
            schedule,
        }
    }

    fn input(&self) -> Linear {
        Linear::new("dit.in", self.latent, self.config.width)
    }

    fn time1(&self) -> Linear {
        Linear::new("dit.time1", self.config.width, self.config.width)
    }

    fn time2(&self) -> Linear {
        Linear::new("dit.time2", self.config.width, self.config.width)
    }

    fn cond(&self) -> Linear {
        Linear::new("dit.cond", self.config.condition, self.config.width)
    }

    fn blocks(&self) -> Vec<ModulatedBlock> {
        let c = &self.config;
        (0..c.layers)
            .map(|i| ModulatedBlock {
                prefix: format!("dit.block.{i}"),
                width: c.width,
                heads: c.heads,
                hidden: c.hidden,
            })
            .collect()
    }

    fn final_mod(&self) -> Linear {
        Linear::new("dit.final_mod", self.config.width, 2 * self.config.width)
    }

    fn out(&self) -> Linear {
        Linear::new("dit.out", self.config.width, self.latent)
    }

    /// Single affine map from mean language-model states to a condition.
    pub fn text_proj(&self) -> Linear {
        Linear::new("dit.text_proj", self.config.text, self.config.condition)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) {
        self.input().init(store, rng);
        self.time1().init(store, rng);
        self.time2().init(store, rng);
        self.cond().init(store, rng);
        store.init_normal("dit.null", &[1, self.config.width], 0.1, rng);
        for b in self.blocks() {
            b.init(store, rng);
        }
        zero_linear(store, &self.final_mod());
        self.out().init(store, rng);
        self.text_proj().init(store, rng);
    }

    /// Condition vector from a `1 x text` mean hidden state.
    pub fn condition_from_text(&self, tape: &mut Tape, store: &ParamStore, text_mean: Var) -> Result<Var> {
        self.text_proj().forward(tape, store, text_mean)
    }

    pub fn condition_value(&self, store: &ParamStore, text_mean: &[f64]) -> Result<Vec<f64>> {
        if text_mean.len() != self.config.text {
            return Err(ModelError::WidthMismatch {
                expected: self.config.text,
                got: text_mean.len(),
            });
        }
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::row(text_mean.to_vec()));
        let c = self.condition_from_text(&mut tape, store, h)?;
        Ok(tape.value(c).data().to_vec())
    }

    pub fn predict_value(&self, store: &ParamStore, z_t: &Tensor, t: usize, cond: Option<&[f64]>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let z = tape.constant(z_t.clone());
        let c = match cond {
            Some(c) => Condition::Vector(tape.constant(Tensor::row(c.to_vec()))),
            None => Condition::Null,
        };
        let e = self.predict(&mut tape, store, z, t, c)?;
        Ok(tape.value(e).clone())
    }

    /// Draws a latent, optionally starting from a bridge initialization at
    /// `source.1`, and decodes it.
    #[allow(clippy::too_many_arguments)]
    pub fn sample(
        &self,
        store: &ParamStore,
        ae: &Autoencoder,
        cond: Option<&[f64]>,
        guidance: GuidanceConfig,
        rng: &mut SeededRng,
        source: Option<(&str, usize)>,
    ) -> Result<SampleOutput> {
        let schedule = &self.schedule;
        let shape = [self.length, self.latent];
        let (mut z, start) = match source {
            Some((smiles, t0)) => {
                schedule.check(t0)?;
                let eps = rng.normal_tensor(&shape, 1.0);
                (bridge_init(ae, store, smiles, t0, &eps, schedule)?, t0)
            }
            None => (rng.normal_tensor(&shape, 1.0), schedule.steps()),
        };
        let visits = timesteps(schedule.steps(), guidance.steps, start);
        for (k, &t) in visits.iter().enumerate() {
            let prev = visits.get(k + 1).copied().unwrap_or(0);
            let eps_u = self.predict_value(store, &z, t, None)?;
            let eps = match cond {
                Some(c) if guidance.scale != 0.0 => {
                    let eps_c = self.predict_value(store, &z, t, Some(c))?;
                    cfg_combine(&eps_u, &eps_c, guidance.scale)?
                }
                _ => eps_u,
            };
            let ab_t = schedule.alpha_bar(t);
            let ab_prev = schedule.alpha_bar(prev);
            let beta = 1.0 - ab_t / ab_prev;
            let coef = beta / (1.0 - ab_t).sqrt();
            let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
            let var = beta * (1.0 - ab_prev) / (1.0 - ab_t);
            let noise = if prev > 0 {
                Some(rng.normal_tensor(&shape, 1.0))
            } else {
                None
            };
            let data: Vec<f64> = z
                .data()
                .iter()
                .zip(eps.data())
                .enumerate()
                .map(|(i, (zi, ei))| {
                    let mean = inv_sqrt_alpha * (zi - coef * ei);
                    match &noise {
                        Some(n) => mean + var.sqrt() * n.data()[i],
                        None => mean,
                    }
                })
                .collect();
            z = Tensor::new(shape.to_vec(), data)?;
        }
        let smiles = ae.decode(store, &z)?;
        let valid = check_validity(&smiles);
        Ok(SampleOutput { latent: z, smiles, valid })
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, tape: &mut Tape, store: &ParamStore, z_t: Var, t: usize, cond: Condition) -> Result<Var> {
        let (r, c) = tape.value(z_t).dims2()?;
        if r != self.length || c != self.latent {
            return Err(ModelError::ShapeMismatch(format!(
                "latent is {r}x{c}, expected {}x{}",
                self.length, self.latent
            )));
        }
        let w = self.config.width;
        let x = self.input().forward(tape, store, z_t)?;
        let pos = tape.constant(position_table(r, w));
        let x = tape.add(x, pos)?;
        let temb = tape.constant(Tensor::row(sinusoid(t as f64, w)));
        let temb = self.time1().forward(tape, store, temb)?;
        let temb = tape.relu(temb);
        let temb = self.time2().forward(tape, store, temb)?;
        let ctok = match cond {
            Condition::Null => tape.param(store, "dit.null")?,
            Condition::Vector(c) => {
                let (cr, cc) = tape.value(c).dims2()?;
                if cr != 1 || cc != self.config.condition {
                    return Err(ModelError::WidthMismatch {
                        expected: self.config.condition,
                        got: cc,
                    });
                }
                let c = tape.layer_norm(c)?;
                self.cond().forward(tape, store, c)?
            }
        };
        let e = tape.add(ctok, temb)?;
        let mut h = tape.add(x, e)?;
        for b in self.blocks() {
            h = b.forward(tape, store, h, e)?;
        }
        let h = modulate(tape, store, &self.final_mod(), h, e)?;
        let v = self.out().forward(tape, store, h)?;
        self.schedule.check(t)?;
        let ab = self.schedule.alpha_bar(t);
        let skip = tape.scale(z_t, (1.0 - ab).sqrt());
        let v = tape.scale(v, ab.sqrt());
        Ok(tape.add(skip, v)?)
    }
}

fn zero_linear(store: &mut ParamStore, l: &Linear) {
    store.init_zeros(&l.weight_name(), &[l.input, l.output]);
    store.init_zeros(&l.bias_name(), &[1, l.output]);
}

/// `layer_norm(x) * (1 + gamma) + beta` with `[gamma | beta] = m(e)`.
fn modulate(tape: &mut Tape, store: &ParamStore, m: &Linear, x: Var, e: Var) -> Result<Var> {
    let w = m.output / 2;
    let gb = m.forward(tape, store, e)?;
    let gamma = tape.slice_cols(gb, 0, w)?;
    let beta = tape.slice_cols(gb, w, w)?;
    let gain = tape.add_scalar(gamma, 1.0);
    let n = tape.layer_norm(x)?;
    let y = tape.mul(n, gain)?;
    Ok(tape.add(y, beta)?)
}

/// Pre-norm block whose norms are modulated by the step and condition
/// embedding; modulation weights start at zero.
#[derive(Debug, Clone)]
struct ModulatedBlock {
    prefix: String,
    width: usize,
    heads: usize,
    hidden: usize,
}

impl ModulatedBlock {
    fn mod1(&self) -> Linear {
        Linear::new(format!("{}.mod1", self.prefix), self.width, 2 * self.width)
    }

    fn mod2(&self) -> Linear {
        Linear::new(format!("{}.mod2", self.prefix), self.width, 2 * self.width)
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

    fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) {
        zero_linear(store, &self.mod1());
        zero_linear(store, &self.mod2());
        self.attn().init(store, rng);
        self.fc1().init(store, rng);
        self.fc2().init(store, rng);
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, e: Var) -> Result<Var> {
        let h = modulate(tape, store, &self.mod1(), x, e)?;
        let a = self.attn().forward(tape, store, h, None)?;
        let x = tape.add(x, a)?;
        let h = modulate(tape, store, &self.mod2(), x, e)?;
        let h = self.fc1().forward(tape, store, h)?;
        let h = tape.relu(h);
        let h = self.fc2().forward(tape, store, h)?;
        Ok(tape.add(x, h)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub latent: Tensor,
    pub smiles: String,
    pub valid: bool,
}

/// Descending timesteps visited by the sampler, starting at `start`.
/// `steps` of 0 or at least `start` visits every step; otherwise an evenly
/// spaced subset that always includes `start`.
pub fn timesteps(total: usize, steps: usize, start: usize) -> Vec<usize> {
    let start = start.min(total);
    if start == 0 {
        return Vec::new();
    }
    if steps == 0 || steps >= start {
        return (1..=start).rev().collect();
    }
    let mut out: Vec<usize> = (0..steps)
        .map(|k| start - (k * start) / steps)
        .collect();
    out.dedup();
    out
}

/// One training item: a latent and an optional `1 x text` mean hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionItem {
    pub latent: Tensor,
    pub text: Option<Tensor>,
}

/// Mean squared error between the drawn noise and the prediction, with
/// random steps and condition dropout.
pub fn diffusion_loss<P: NoisePredictor + ?Sized>(
    tape: &mut Tape,
    store: &ParamStore,
    predictor: &P,
    text_proj: Option<&Linear>,
    schedule: &NoiseSchedule,
    batch: &[DiffusionItem],
    rng: &mut SeededRng,
    dropout: f64,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut total = None;
    for item in batch {
        let t = 1 + rng.below(schedule.steps());
        let shape = item.latent.shape().to_vec();
        let eps = rng.normal_tensor(&shape, 1.0);
        let zt = forward_noise(&item.latent, t, &eps, schedule)?;
        let drop = rng.bernoulli(dropout);
        let cond = match (&item.text, text_proj) {
            (Some(text), Some(proj)) if !drop => {
                let h = tape.constant(text.clone());
                Condition::Vector(proj.forward(tape, store, h)?)
            }
            _ => Condition::Null,
        };
        let zv = tape.constant(zt);
        let pred = predictor.predict(tape, store, zv, t, cond)?;
        let target = tape.constant(eps);
        let l = tape.mse(pred, target)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let t = total.ok_or(ModelError::EmptyBatch)?;
    Ok(tape.scale(t, 1.0 / batch.len() as f64))
}

impl Denoiser {
    /// Full-batch training of the `dit.` parameters with cosine-decayed Adam;
    /// every other parameter stays fixed. Returns per-step losses.
    pub fn train(
        &self,
        store: &mut ParamStore,
        batch: &[DiffusionItem],
        steps: usize,
        lr: f64,
        rng: &mut SeededRng,
    ) -> Result<Vec<f64>> {
        let mut adam = Adam::new(AdamConfig {
            lr,
            schedule: LrSchedule::Cosine {
                total: steps as u64,
                floor: 0.01,
            },
            ..AdamConfig::default()
        });
        let proj = self.text_proj();
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut tape = Tape::new();
            let loss = diffusion_loss(&mut tape, store, self, Some(&proj), &self.schedule, batch, rng, CONDITION_DROPOUT)?;
            losses.push(tape.value(loss).item());
            tape.backward(loss)?;
            adam.step(store, &tape.param_grads(), |n| !n.starts_with(DIT_PREFIX));
        }
        Ok(losses)
    }
}
