//! The assembled model: one parameter store shared by the language model,
//! geometric encoder, latent diffusion and reaction modules.

use scicore_autograd::{ParamStore, SeededRng, Tape, Tensor, Var};
use scicore_chem::check_validity;

use crate::ae::{AeConfig, Autoencoder};
use crate::diffusion::{Denoiser, DitConfig, GuidanceConfig, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START};
use crate::error::{ModelError, Result};
use crate::gvp::{GvpConfig, GvpEncoder};
use crate::lm::{
    char_token, detokenize, find_molecules, validate_sequence, HiddenStates, LanguageModel, LmConfig, LmExample, Slot,
    BOS, DISPATCH_GENERATE, DISPATCH_PERCEIVE, DISPATCH_REACT, EOS, MOL_CLOSE, MOL_OPEN,
};
use crate::reaction::{
    retrieve_nearest, AmountStats, Amounts, GeoTable, ReactionConfig, ReactionModel, ReactionMolecule, ReactionRecord,
    Role,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub lm: LmConfig,
    pub gvp: GvpConfig,
    pub ae: AeConfig,
    pub dit: DitConfig,
    pub reaction: ReactionConfig,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lm: LmConfig::default(),
            gvp: GvpConfig::default(),
            ae: AeConfig::default(),
            dit: DitConfig::default(),
            reaction: ReactionConfig::default(),
            diffusion_steps: 1000,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SciCoreMol {
    pub config: ModelConfig,
    pub lm: LanguageModel,
    pub gvp: GvpEncoder,
    pub ae: Autoencoder,
    pub dit: Denoiser,
    pub reaction: ReactionModel,
}

/// Which slots of a reaction record are predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReactTask {
    Product,
    Retro,
    Yield,
}

impl std::str::FromStr for ReactTask {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "product" => Ok(ReactTask::Product),
            "retro" => Ok(ReactTask::Retro),
            "yield" => Ok(ReactTask::Yield),
            other => Err(ModelError::UnknownTaskType(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReactOutcome {
    /// Nearest library entry for each predicted slot, in record order.
    pub retrieved: Vec<String>,
    /// Regression-head yield in percent.
    pub yield_percent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DispatchEvent {
    Perceive { smiles: Option<String> },
    Generate { smiles: String, valid: bool },
    React { product: String, yield_percent: f64 },
}

#[derive(Debug, Clone)]
pub struct DecodeOptions {
    /// Budget of appended tokens, module outputs included.
    pub max_new_tokens: usize,
    /// Zero selects greedy decoding.
    pub temperature: f64,
    pub guidance: GuidanceConfig,
    /// Optional bridge source `(smiles, t0)` for generation.
    pub source: Option<(String, usize)>,
    /// Token to emit at step `k` in place of the model's choice.
    pub forced: Vec<Option<usize>>,
    /// Retrieval candidates for reaction dispatch.
    pub library: Vec<String>,
    /// Record used for reaction dispatch; without one the molecules in
    /// context become reactants of a single masked product.
    pub reaction: Option<ReactionRecord>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            max_new_tokens: 64,
            temperature: 0.0,
            guidance: GuidanceConfig { scale: 1.0, steps: 50 },
            source: None,
            forced: Vec::new(),
            library: Vec::new(),
            reaction: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Continuation tokens, module outputs included.
    pub tokens: Vec<usize>,
    pub text: String,
    pub events: Vec<DispatchEvent>,
    /// Structural rows added during decoding.
    pub injected: usize,
    /// Set when the token budget or the context ran out before EOS.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
enum Entry {
    Token(usize),
    Virtual(Vec<f64>),
}

impl SciCoreMol {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let w = config.lm.width;
        if config.gvp.adapter_out != w {
            return Err(ModelError::WidthMismatch {
                expected: w,
                got: config.gvp.adapter_out,
            });
        }
        if config.dit.text != w {
            return Err(ModelError::WidthMismatch {
                expected: w,
                got: config.dit.text,
            });
        }
        if config.reaction.geo != config.gvp.scalar {
            return Err(ModelError::WidthMismatch {
                expected: config.gvp.scalar,
                got: config.reaction.geo,
            });
        }
        let schedule = NoiseSchedule::linear(config.diffusion_steps, config.beta_start, config.beta_end)?;
        Ok(SciCoreMol {
            lm: LanguageModel::new(config.lm.clone()),
            gvp: GvpEncoder::new(config.gvp.clone()),
            ae: Autoencoder::new(config.ae.clone()),
            dit: Denoiser::new(config.dit.clone(), config.ae.length, config.ae.latent, schedule),
            reaction: ReactionModel::new(config.reaction.clone()),
            config,
        })
    }

    /// Initializes every module. The GVP encoder is initialized first so
    /// that `geo_corpus` can be embedded for the reaction statistics.
    pub fn init<'a>(
        &self,
        store: &mut ParamStore,
        rng: &mut SeededRng,
        stats: &AmountStats,
        geo_corpus: impl IntoIterator<Item = &'a str>,
    ) -> Result<()> {
        self.gvp.init(store, rng);
        self.lm.init(store, rng);
        self.ae.init(store, rng);
        self.dit.init(store, rng);
        let geo = GeoTable::build(&self.gvp, store, geo_corpus)?;
        self.reaction.init(store, rng, stats, &geo);
        Ok(())
    }

    /// `h_mol` rows for `smiles`, on `tape`.
    pub fn structural_rows(&self, tape: &mut Tape, store: &ParamStore, smiles: &[String]) -> Result<Vec<Var>> {
        smiles
            .iter()
            .map(|s| Ok(self.gvp.embed_on_tape(tape, store, s)?.1))
            .collect()
    }

    /// Slots for `BOS prompt`, with one structural row per molecule of the
    /// prompt appended at the end.
    pub fn prompt_slots(&self, tape: &mut Tape, store: &ParamStore, prompt: &[usize]) -> Result<Vec<Slot>> {
        let mut slots = vec![Slot::Token(BOS)];
        slots.extend(prompt.iter().map(|&t| Slot::Token(t)));
        let smiles: Vec<String> = find_molecules(prompt).into_iter().map(|m| m.smiles).collect();
        slots.extend(self.structural_rows(tape, store, &smiles)?.into_iter().map(Slot::Virtual));
        Ok(slots)
    }

    /// Hidden states of `BOS prompt` plus its structural rows.
    pub fn encode_prompt(&self, store: &ParamStore, prompt: &[usize]) -> Result<HiddenStates> {
        validate_sequence(prompt)?;
        let mut tape = Tape::new();
        let slots = self.prompt_slots(&mut tape, store, prompt)?;
        let h = self.lm.hidden(&mut tape, store, &slots)?;
        Ok(HiddenStates {
            rows: tape.value(h).clone(),
            is_virtual: slots.iter().map(|s| matches!(s, Slot::Virtual(_))).collect(),
        })
    }

    /// Column mean of the prompt's hidden states, the diffusion text input.
    pub fn text_summary(&self, store: &ParamStore, prompt: &[usize]) -> Result<Tensor> {
        Ok(column_mean(&self.encode_prompt(store, prompt)?.rows))
    }

    /// Mean next-token loss over `target EOS` with the structural rows of
    /// the input's molecules placed between input and target.
    pub fn lm_loss(&self, tape: &mut Tape, store: &ParamStore, batch: &[LmExample]) -> Result<Var> {
        let mut total: Option<Var> = None;
        let mut count = 0;
        for ex in batch {
            let mut slots = self.prompt_slots(tape, store, &ex.input)?;
            let n_prompt = slots.len();
            slots.extend(ex.target.iter().map(|&t| Slot::Token(t)));
            let mut next: Vec<usize> = ex.target.clone();
            next.push(EOS);
            let mut labels = vec![None; n_prompt - 1];
            labels.extend(next.into_iter().map(Some));
            let (nll, _, c) = self.lm.sequence_nll(tape, store, &slots, &labels)?;
            count += c;
            total = Some(match total {
                None => nll,
                Some(t) => tape.add(t, nll)?,
            });
        }
        match total {
            Some(t) if count > 0 => Ok(tape.scale(t, 1.0 / count as f64)),
            _ => Err(ModelError::EmptyBatch),
        }
    }

    /// Runs the reaction model on `record`, retrieving each predicted slot
    /// from `library`. For [`ReactTask::Yield`] nothing is masked.
    pub fn react(&self, store: &ParamStore, record: &ReactionRecord, task: ReactTask, library: &[String]) -> Result<ReactOutcome> {
        record.validate()?;
        let mask: Vec<usize> = record
            .molecules
            .iter()
            .enumerate()
            .filter(|(_, m)| match task {
                ReactTask::Product => m.role == Role::Product,
                ReactTask::Retro => m.role == Role::Reactant,
                ReactTask::Yield => false,
            })
            .map(|(i, _)| i)
            .collect();
        let observed = record
            .molecules
            .iter()
            .enumerate()
            .filter(|(i, _)| !mask.contains(i))
            .map(|(_, m)| m.smiles.as_str());
        let geo = GeoTable::build(&self.gvp, store, observed)?;
        let mut retrieved = Vec::new();
        if !mask.is_empty() {
            let lib = GeoTable::build(&self.gvp, store, library.iter().map(String::as_str))?.library();
            for e in self.reaction.predict_masked_molecule(store, record, &mask, &geo)? {
                retrieved.push(retrieve_nearest(&e, &lib)?.to_string());
            }
        }
        let (_, cls) = self.reaction.encode_reaction(store, record, &mask, &geo)?;
        let y = self.reaction.predict_yield(store, &cls)?;
        Ok(ReactOutcome {
            retrieved,
            yield_percent: 100.0 * y.regression,
        })
    }

    /// Decodes a continuation of `prompt`, handing control to the diffusion
    /// or reaction module whenever a dispatch token is emitted. Module
    /// outputs are appended to the context as tokens, and each closed
    /// molecule span gets a structural row right after its closing marker.
    pub fn generate_with_dispatch(
        &self,
        store: &ParamStore,
        prompt: &[usize],
        options: &DecodeOptions,
        rng: &mut SeededRng,
    ) -> Result<Generation> {
        if prompt.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        validate_sequence(prompt)?;
        let mut context: Vec<Entry> = vec![Entry::Token(BOS)];
        context.extend(prompt.iter().map(|&t| Entry::Token(t)));
        for m in find_molecules(prompt) {
            context.push(Entry::Virtual(self.gvp.embed_smiles(store, &m.smiles)?.h_mol));
        }
        let mut out = Generation {
            tokens: Vec::new(),
            text: String::new(),
            events: Vec::new(),
            injected: 0,
            truncated: false,
        };
        let max_ctx = self.config.lm.max_len;
        let mut step = 0;
        loop {
            if out.tokens.len() >= options.max_new_tokens || context.len() >= max_ctx {
                out.truncated = true;
                break;
            }
            let (logits, hidden) = self.lm.next_logits(store, |tape| {
                context
                    .iter()
                    .map(|e| match e {
                        Entry::Token(t) => Slot::Token(*t),
                        Entry::Virtual(v) => Slot::Virtual(tape.constant(Tensor::row(v.clone()))),
                    })
                    .collect()
            })?;
            let token = match options.forced.get(step).copied().flatten() {
                Some(t) => t,
                None => choose(&logits, options.temperature, rng),
            };
            step += 1;
            if token == EOS {
                break;
            }
            let mut appended = vec![token];
            let mut perceived = None;
            match token {
                DISPATCH_GENERATE => {
                    let text = column_mean(&hidden);
                    let cond = self.dit.condition_value(store, text.data())?;
                    let source = options.source.as_ref().map(|(s, t)| (s.as_str(), *t));
                    let sample = self.dit.sample(store, &self.ae, Some(&cond), options.guidance, rng, source)?;
                    appended.extend(span_tokens(&sample.smiles));
                    out.events.push(DispatchEvent::Generate {
                        smiles: sample.smiles,
                        valid: sample.valid,
                    });
                }
                DISPATCH_REACT => {
                    let record = match &options.reaction {
                        Some(r) => r.clone(),
                        None => context_reaction(&token_ids(&context))?,
                    };
                    let outcome = self.react(store, &record, ReactTask::Product, &options.library)?;
                    let product = outcome.retrieved.into_iter().next().unwrap_or_default();
                    appended.extend(span_tokens(&product));
                    appended.extend(format!(" ({:.1}%)", outcome.yield_percent).chars().filter_map(char_token));
                    out.events.push(DispatchEvent::React {
                        product,
                        yield_percent: outcome.yield_percent,
                    });
                }
                DISPATCH_PERCEIVE => {
                    perceived = find_molecules(&token_ids(&context)).pop().map(|m| m.smiles);
                    out.events.push(DispatchEvent::Perceive {
                        smiles: perceived.clone(),
                    });
                }
                _ => {}
            }
            for t in appended {
                context.push(Entry::Token(t));
                out.tokens.push(t);
                if t == MOL_CLOSE {
                    let ids = token_ids(&context);
                    if let Some(m) = find_molecules(&ids).last().filter(|m| m.last + 1 == ids.len()) {
                        context.push(Entry::Virtual(self.gvp.embed_smiles(store, &m.smiles)?.h_mol));
                        out.injected += 1;
                    }
                }
            }
            if let Some(s) = perceived {
                context.push(Entry::Virtual(self.gvp.embed_smiles(store, &s)?.h_mol));
                out.injected += 1;
            }
        }
        out.text = detokenize(&out.tokens);
        Ok(out)
    }
}

fn column_mean(rows: &Tensor) -> Tensor {
    let (r, c) = (rows.rows(), rows.cols());
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, x) in out.iter_mut().zip(rows.row_slice(i)) {
            *o += x;
        }
    }
    Tensor::row(out.into_iter().map(|x| x / r as f64).collect())
}

fn token_ids(context: &[Entry]) -> Vec<usize> {
    context
        .iter()
        .filter_map(|e| match e {
            Entry::Token(t) => Some(*t),
            Entry::Virtual(_) => None,
        })
        .collect()
}

fn span_tokens(smiles: &str) -> Vec<usize> {
    let mut ids = vec![MOL_OPEN];
    ids.extend(smiles.chars().filter_map(char_token));
    ids.push(MOL_CLOSE);
    ids
}

/// Every valid molecule of the context as a reactant of one masked product.
fn context_reaction(ids: &[usize]) -> Result<ReactionRecord> {
    let mut molecules: Vec<ReactionMolecule> = find_molecules(ids)
        .into_iter()
        .filter(|m| check_validity(&m.smiles))
        .map(|m| ReactionMolecule {
            smiles: m.smiles,
            role: Role::Reactant,
            amount: Amounts::default(),
        })
        .collect();
    if molecules.is_empty() {
        return Err(ModelError::InvalidRecord("no molecule in context to react".into()));
    }
    molecules.push(ReactionMolecule {
        smiles: String::new(),
        role: Role::Product,
        amount: Amounts::default(),
    });
    Ok(ReactionRecord {
        molecules,
        yield_percent: None,
    })
}

fn choose(logits: &[f64], temperature: f64, rng: &mut SeededRng) -> usize {
    if temperature <= 0.0 {
        return crate::ae::argmax(logits);
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| ((l - m) / temperature).exp()).collect();
    let mut u = rng.uniform(0.0, w.iter().sum());
    for (i, x) in w.iter().enumerate() {
        if u < *x {
            return i;
        }
        u -= x;
    }
    logits.len() - 1
}
