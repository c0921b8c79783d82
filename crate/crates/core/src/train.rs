//! Staged training: backbone adaptation with a KL anchor, contrastive
//! alignment, masked joint multi-task optimization and selective freezing.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use scicore_autograd::{Adam, AdamConfig, Checkpoint, LrSchedule, ParamStore, SeededRng, Tape, Tensor, Var};

use crate::ae::AE_PREFIX;
use crate::corpus::{design_prompt, CaptionPair};
use crate::diffusion::{diffusion_loss, DiffusionItem, CONDITION_DROPOUT, DIT_PREFIX};
use crate::error::{ModelError, Result};
use crate::gvp::GVP_PREFIX;
use crate::lm::{tokenize, LmExample, Slot, BOS, EOS, LM_PREFIX};
use crate::model::SciCoreMol;
use crate::reaction::{GeoTable, ReactionExample, ReactionRecord, ReactionWeights, Role, RXN_PREFIX, STATS_PREFIX};

pub const KL_WEIGHT: f64 = 0.1;
pub const ALIGN_TEMPERATURE: f64 = 0.07;
/// Probability that an amount channel is withheld in a reaction step.
pub const AMOUNT_HIDE: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lm: f64,
    pub align: f64,
    pub diff: f64,
    pub rxn: f64,
    pub emb: f64,
    pub amt: f64,
    pub yield_total: f64,
    pub reg: f64,
    pub cls: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lm: 1.0,
            align: 1.0,
            diff: 1.0,
            rxn: 1.0,
            emb: 1.0,
            amt: 1.0,
            yield_total: 1.0,
            reg: 1.0,
            cls: 1.0,
            kl: KL_WEIGHT,
        }
    }
}

impl LossWeights {
    pub fn reaction(&self) -> ReactionWeights {
        ReactionWeights {
            embedding: self.emb,
            amount: self.amt,
            yield_total: self.yield_total,
            regression: self.reg,
            classification: self.cls,
        }
    }

    fn slot(&mut self, key: &str) -> Option<&mut f64> {
        Some(match key {
            "lm" => &mut self.lm,
            "align" => &mut self.align,
            "diff" | "diffusion" => &mut self.diff,
            "rxn" | "reaction" => &mut self.rxn,
            "emb" => &mut self.emb,
            "amt" => &mut self.amt,
            "yield" => &mut self.yield_total,
            "reg" => &mut self.reg,
            "cls" => &mut self.cls,
            "kl" => &mut self.kl,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StageId {
    Pretrain,
    Align,
    Joint,
    Finetune,
}

impl StageId {
    pub fn name(self) -> &'static str {
        match self {
            StageId::Pretrain => "1-pretrain",
            StageId::Align => "1-align",
            StageId::Joint => "2-joint",
            StageId::Finetune => "3-finetune",
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [StageId::Pretrain, StageId::Align, StageId::Joint, StageId::Finetune]
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskType {
    Lm,
    Align,
    Diffusion,
    Reaction,
    /// Autoencoder reconstruction; only scheduled in stage 1-pretrain.
    Autoencoder,
}

impl TaskType {
    pub fn name(self) -> &'static str {
        match self {
            TaskType::Lm => "lm",
            TaskType::Align => "align",
            TaskType::Diffusion => "diffusion",
            TaskType::Reaction => "reaction",
            TaskType::Autoencoder => "autoencoder",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskType {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        [
            TaskType::Lm,
            TaskType::Align,
            TaskType::Diffusion,
            TaskType::Reaction,
            TaskType::Autoencoder,
        ]
        .into_iter()
        .find(|t| t.name() == s)
        .ok_or_else(|| ModelError::UnknownTaskType(s.to_string()))
    }
}

/// Mean over rows of `sum_j p_j (log p_j - log q_j)` with `p = softmax(logits)`
/// and `q = softmax(reference)`. The reference is a constant.
pub fn kl_regularizer(tape: &mut Tape, logits: Var, reference: &Tensor) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape != reference.shape() {
        return Err(ModelError::ShapeMismatch(format!(
            "logits {shape:?} vs reference {:?}",
            reference.shape()
        )));
    }
    let rows = tape.value(logits).rows();
    let log_p = tape.log_softmax(logits)?;
    let p = tape.softmax(logits)?;
    let r = tape.constant(reference.clone());
    let log_q = tape.log_softmax(r)?;
    let diff = tape.sub(log_p, log_q)?;
    let terms = tape.mul(p, diff)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, 1.0 / rows as f64))
}

fn unit_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.row_norm(x)?;
    let n = tape.add_scalar(n, 1e-12);
    Ok(tape.div(x, n)?)
}

/// Symmetric NT-Xent over matched rows of `mol` and `text` (`B x d`), with
/// in-batch negatives and cosine similarities scaled by `1 / tau`.
pub fn ntxent_alignment_loss(tape: &mut Tape, mol: Var, text: Var, tau: f64) -> Result<Var> {
    let a = tape.value(mol).shape().to_vec();
    let b = tape.value(text).shape().to_vec();
    if a != b || a.len() != 2 {
        return Err(ModelError::ShapeMismatch(format!("molecule {a:?} vs text {b:?}")));
    }
    if a[0] == 0 {
        return Err(ModelError::EmptyBatch);
    }
    if !(tau > 0.0) {
        return Err(ModelError::InvalidRange(format!("temperature {tau} must be positive")));
    }
    let m = unit_rows(tape, mol)?;
    let t = unit_rows(tape, text)?;
    let tt = tape.transpose(t)?;
    let sim = tape.matmul(m, tt)?;
    let sim = tape.scale(sim, 1.0 / tau);
    let targets: Vec<Option<usize>> = (0..a[0]).map(Some).collect();
    let m2t = tape.cross_entropy(sim, &targets)?;
    let sim_t = tape.transpose(sim)?;
    let t2m = tape.cross_entropy(sim_t, &targets)?;
    let both = tape.add(m2t, t2m)?;
    Ok(tape.scale(both, 0.5))
}

/// One training item of the joint objective.
#[derive(Debug, Clone)]
pub enum TaskItem {
    Lm(LmExample),
    Align(CaptionPair),
    Diffusion(DiffusionItem),
    Reaction(ReactionExample),
}

impl TaskItem {
    pub fn task(&self) -> TaskType {
        match self {
            TaskItem::Lm(_) => TaskType::Lm,
            TaskItem::Align(_) => TaskType::Align,
            TaskItem::Diffusion(_) => TaskType::Diffusion,
            TaskItem::Reaction(_) => TaskType::Reaction,
        }
    }
}

/// Mean final hidden state of `BOS text` (`1 x width`), on `tape`.
pub fn text_embedding(model: &SciCoreMol, tape: &mut Tape, store: &ParamStore, text: &str) -> Result<Var> {
    let mut slots = vec![Slot::Token(BOS)];
    slots.extend(tokenize(text)?.into_iter().map(Slot::Token));
    let h = model.lm.hidden(tape, store, &slots)?;
    Ok(tape.mean_rows(h)?)
}

/// `(h_mol, h_text)` stacked over `pairs`, each `B x width`.
pub fn alignment_embeddings(model: &SciCoreMol, tape: &mut Tape, store: &ParamStore, pairs: &[&CaptionPair]) -> Result<(Var, Var)> {
    if pairs.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut mols = Vec::with_capacity(pairs.len());
    let mut texts = Vec::with_capacity(pairs.len());
    for p in pairs {
        mols.push(model.gvp.embed_on_tape(tape, store, &p.smiles)?.1);
        texts.push(text_embedding(model, tape, store, &p.caption)?);
    }
    Ok((tape.vcat(&mols)?, tape.vcat(&texts)?))
}

/// Weighted sum of the per-task losses of the task types present in
/// `batch`. A type that is absent, or whose weight is zero, is never
/// evaluated. Groups are evaluated in the order lm, align, diffusion,
/// reaction, so `rng` is consumed only by the diffusion group.
pub fn joint_loss(
    tape: &mut Tape,
    store: &ParamStore,
    model: &SciCoreMol,
    batch: &[TaskItem],
    weights: &LossWeights,
    geo: &GeoTable,
    rng: &mut SeededRng,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut lm = Vec::new();
    let mut align = Vec::new();
    let mut diff = Vec::new();
    let mut rxn = Vec::new();
    for item in batch {
        match item {
            TaskItem::Lm(x) => lm.push(x.clone()),
            TaskItem::Align(x) => align.push(x),
            TaskItem::Diffusion(x) => diff.push(x.clone()),
            TaskItem::Reaction(x) => rxn.push(x.clone()),
        }
    }
    let mut terms = Vec::new();
    if !lm.is_empty() && weights.lm != 0.0 {
        let l = model.lm_loss(tape, store, &lm)?;
        terms.push(tape.scale(l, weights.lm));
    }
    if !align.is_empty() && weights.align != 0.0 {
        let (m, t) = alignment_embeddings(model, tape, store, &align)?;
        let l = ntxent_alignment_loss(tape, m, t, ALIGN_TEMPERATURE)?;
        terms.push(tape.scale(l, weights.align));
    }
    if !diff.is_empty() && weights.diff != 0.0 {
        let proj = model.dit.text_proj();
        let l = diffusion_loss(tape, store, &model.dit, Some(&proj), &model.dit.schedule, &diff, rng, CONDITION_DROPOUT)?;
        terms.push(tape.scale(l, weights.diff));
    }
    if !rxn.is_empty() && weights.rxn != 0.0 {
        let l = model.reaction.reaction_loss(tape, store, &rxn, &weights.reaction(), geo)?;
        terms.push(tape.scale(l, weights.rxn));
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => return Ok(tape.constant(Tensor::scalar(0.0))),
    };
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Language-model loss plus `kl_weight` times the per-token KL divergence
/// from the next-token distributions under `reference`.
pub fn lm_loss_with_kl(
    tape: &mut Tape,
    store: &ParamStore,
    reference: &ParamStore,
    model: &SciCoreMol,
    batch: &[LmExample],
    kl_weight: f64,
) -> Result<Var> {
    let nll = model.lm_loss(tape, store, batch)?;
    if kl_weight == 0.0 {
        return Ok(nll);
    }
    let mut kl_total: Option<Var> = None;
    let mut positions = 0;
    for ex in batch {
        let mut ids = vec![BOS];
        ids.extend_from_slice(&ex.input);
        ids.extend_from_slice(&ex.target);
        ids.push(EOS);
        let slots: Vec<Slot> = ids.iter().map(|&t| Slot::Token(t)).collect();
        let h = model.lm.hidden(tape, store, &slots)?;
        let logits = model.lm.logits(tape, store, h)?;
        let mut ref_tape = Tape::new();
        let rh = model.lm.hidden(&mut ref_tape, reference, &slots)?;
        let rl = model.lm.logits(&mut ref_tape, reference, rh)?;
        let kl = kl_regularizer(tape, logits, ref_tape.value(rl))?;
        let kl = tape.scale(kl, slots.len() as f64);
        positions += slots.len();
        kl_total = Some(match kl_total {
            None => kl,
            Some(t) => tape.add(t, kl)?,
        });
    }
    let kl = kl_total.ok_or(ModelError::EmptyBatch)?;
    let kl = tape.scale(kl, kl_weight / positions as f64);
    Ok(tape.add(nll, kl)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Cosine decay to `floor * lr` over the run; constant when `None`.
    pub cosine_floor: Option<f64>,
    pub clip_norm: Option<f64>,
    /// Per-task rate overrides in stage 1-pretrain.
    pub task_lr: BTreeMap<TaskType, f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            cosine_floor: Some(0.0),
            clip_norm: None,
            task_lr: BTreeMap::new(),
        }
    }
}

impl OptimizerConfig {
    fn adam(&self, lr: f64, steps: usize) -> Adam {
        Adam::new(AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            schedule: match self.cosine_floor {
                Some(floor) => LrSchedule::Cosine {
                    total: steps as u64,
                    floor,
                },
                None => LrSchedule::Constant,
            },
            clip_norm: self.clip_norm,
        })
    }
}

/// Paths named by a stage file; relative paths are kept as written.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StagePaths {
    pub molecules: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub reactions: Option<PathBuf>,
    /// Checkpoint to start from.
    pub init: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub stage: StageId,
    /// Parameter-name prefixes that receive no updates.
    pub freeze: Vec<String>,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    /// Per-task step overrides in stage 1-pretrain.
    pub task_steps: BTreeMap<TaskType, usize>,
    /// Tasks to run; empty selects the stage default.
    pub tasks: Vec<TaskType>,
    /// Minibatch size; `None` uses the whole corpus each step.
    pub batch: Option<usize>,
    pub seed: u64,
    pub paths: StagePaths,
}

impl StageConfig {
    pub fn new(stage: StageId) -> Self {
        StageConfig {
            stage,
            freeze: Vec::new(),
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            steps: 100,
            task_steps: BTreeMap::new(),
            tasks: Vec::new(),
            batch: None,
            seed: 0,
            paths: StagePaths::default(),
        }
    }

    /// Whether `name` is held fixed in this stage: the corpus statistics,
    /// the configured prefixes, everything but the GVP encoder and adapter
    /// in 1-align, and the autoencoder in stages 2 and 3.
    pub fn is_frozen(&self, name: &str) -> bool {
        if name.starts_with(STATS_PREFIX) || self.freeze.iter().any(|p| name.starts_with(p.as_str())) {
            return true;
        }
        match self.stage {
            StageId::Pretrain => false,
            StageId::Align => !name.starts_with(GVP_PREFIX),
            StageId::Joint | StageId::Finetune => name.starts_with(AE_PREFIX),
        }
    }

    /// Prefixes loaded as constants on the training tape.
    pub fn frozen_prefixes(&self) -> Vec<String> {
        let mut p = self.freeze.clone();
        p.push(STATS_PREFIX.to_string());
        match self.stage {
            StageId::Pretrain => {}
            StageId::Align => p.extend([LM_PREFIX, AE_PREFIX, DIT_PREFIX, RXN_PREFIX].map(String::from)),
            StageId::Joint | StageId::Finetune => p.push(AE_PREFIX.to_string()),
        }
        p
    }

    pub fn active_tasks(&self) -> Vec<TaskType> {
        if !self.tasks.is_empty() {
            return self.tasks.clone();
        }
        match self.stage {
            StageId::Pretrain => vec![TaskType::Autoencoder, TaskType::Diffusion, TaskType::Lm, TaskType::Reaction],
            StageId::Align => vec![TaskType::Align],
            StageId::Joint | StageId::Finetune => {
                vec![TaskType::Lm, TaskType::Align, TaskType::Diffusion, TaskType::Reaction]
            }
        }
    }

    fn steps_for(&self, task: TaskType) -> usize {
        self.task_steps.get(&task).copied().unwrap_or(self.steps)
    }

    fn lr_for(&self, task: TaskType) -> f64 {
        self.optimizer.task_lr.get(&task).copied().unwrap_or(self.optimizer.lr)
    }

    /// Parses `key = value` lines grouped under `[stage]`, `[freeze]`,
    /// `[weights]` and `[optimizer]`. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut section = String::new();
        let mut entries: Vec<(usize, String, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            if let Some(name) = l.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                let name = name.trim();
                if !["stage", "freeze", "weights", "optimizer"].contains(&name) {
                    return Err(config_err(line, format!("unknown section `{name}`")));
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| config_err(line, "expected `key = value`"))?;
            if section.is_empty() {
                return Err(config_err(line, "entry outside a section"));
            }
            entries.push((line, section.clone(), k.trim().to_string(), v.trim().to_string()));
        }
        let id_line = entries
            .iter()
            .find(|(_, s, k, _)| s == "stage" && k == "id")
            .ok_or_else(|| config_err(0, "missing `id` in [stage]"))?;
        let stage = id_line.3.parse::<StageId>().map_err(|e| config_err(id_line.0, e))?;
        let mut c = StageConfig::new(stage);
        for (line, section, key, value) in entries {
            c.apply(&section, &key, &value).map_err(|e| config_err(line, e))?;
        }
        if matches!(stage, StageId::Joint | StageId::Finetune) && c.tasks.contains(&TaskType::Autoencoder) {
            return Err(config_err(0, "the autoencoder is frozen after stage 1"));
        }
        Ok(c)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
        match (section, key) {
            ("stage", "id") => {}
            ("stage", "steps") => self.steps = num(value)?,
            ("stage", "seed") => self.seed = num(value)?,
            ("stage", "batch") => self.batch = Some(num(value)?),
            ("stage", "tasks") => {
                self.tasks = list(value)
                    .map(|t| t.parse::<TaskType>().map_err(|e| e.to_string()))
                    .collect::<std::result::Result<_, _>>()?
            }
            ("stage", "molecules") => self.paths.molecules = Some(value.into()),
            ("stage", "pairs") => self.paths.pairs = Some(value.into()),
            ("stage", "reactions") => self.paths.reactions = Some(value.into()),
            ("stage", "init") => self.paths.init = Some(value.into()),
            ("stage", "checkpoint") => self.paths.checkpoint = Some(value.into()),
            ("stage", "log") => self.paths.log = Some(value.into()),
            ("stage", k) if k.starts_with("steps.") => {
                let task = k["steps.".len()..].parse::<TaskType>().map_err(|e| e.to_string())?;
                self.task_steps.insert(task, num(value)?);
            }
            ("freeze", "prefixes") => self.freeze.extend(list(value).map(str::to_string)),
            ("weights", k) => {
                let v: f64 = num(value)?;
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(format!("weight `{k}` must be a nonnegative number"));
                }
                *self.weights.slot(k).ok_or_else(|| format!("unknown weight `{k}`"))? = v;
            }
            ("optimizer", "lr") => self.optimizer.lr = positive(value)?,
            ("optimizer", "beta1") => self.optimizer.beta1 = num(value)?,
            ("optimizer", "beta2") => self.optimizer.beta2 = num(value)?,
            ("optimizer", "eps") => self.optimizer.eps = positive(value)?,
            ("optimizer", "clip") => self.optimizer.clip_norm = Some(positive(value)?),
            ("optimizer", "schedule") => {
                self.optimizer.cosine_floor = match value {
                    "constant" => None,
                    "cosine" => Some(0.0),
                    other => return Err(format!("unknown schedule `{other}`")),
                }
            }
            ("optimizer", "floor") => self.optimizer.cosine_floor = Some(num(value)?),
            ("optimizer", k) if k.starts_with("lr.") => {
                let task = k["lr.".len()..].parse::<TaskType>().map_err(|e| e.to_string())?;
                self.optimizer.task_lr.insert(task, positive(value)?);
            }
            (s, k) => return Err(format!("unknown key `{k}` in [{s}]")),
        }
        Ok(())
    }
}

fn config_err(line: usize, reason: impl Into<String>) -> ModelError {
    ModelError::Config {
        line,
        reason: reason.into(),
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn positive(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = num(v)?;
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("`{v}` must be positive"))
    }
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

#[derive(Debug, Clone, Default)]
pub struct Corpora {
    pub molecules: Vec<String>,
    pub pairs: Vec<CaptionPair>,
    pub reactions: Vec<ReactionRecord>,
    pub lm: Vec<LmExample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub task: TaskType,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub log: Vec<LogRow>,
    pub checkpoint: Checkpoint,
}

impl StageOutput {
    pub fn write_log<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "step,task,loss")?;
        for r in &self.log {
            writeln!(out, "{},{},{}", r.step, r.task, r.loss)?;
        }
        Ok(())
    }
}

/// Diffusion items for every captioned pair: the pair's latent under the
/// current autoencoder and the prompt summary of its design request.
/// Molecules without a caption get no text.
pub fn diffusion_items(model: &SciCoreMol, store: &ParamStore, corpora: &Corpora) -> Result<Vec<DiffusionItem>> {
    let mut items = Vec::new();
    for p in &corpora.pairs {
        let prompt = tokenize(&design_prompt(&p.caption))?;
        items.push(DiffusionItem {
            latent: model.ae.encode(store, &p.smiles)?,
            text: Some(model.text_summary(store, &prompt)?),
        });
    }
    for s in &corpora.molecules {
        if !corpora.pairs.iter().any(|p| &p.smiles == s) {
            items.push(DiffusionItem {
                latent: model.ae.encode(store, s)?,
                text: None,
            });
        }
    }
    Ok(items)
}

/// Product-masked reaction examples.
pub fn product_examples(records: &[ReactionRecord]) -> Result<Vec<ReactionExample>> {
    records
        .iter()
        .map(|r| {
            r.validate()?;
            let mask: Vec<usize> = (0..r.molecules.len()).filter(|&i| r.molecules[i].role == Role::Product).collect();
            Ok(ReactionExample::new(r.clone(), mask))
        })
        .collect()
}

fn pick<'a, T>(items: &'a [T], batch: Option<usize>, rng: &mut SeededRng) -> Vec<&'a T> {
    match batch {
        Some(b) if b < items.len() => {
            let mut idx: Vec<usize> = (0..items.len()).collect();
            rng.shuffle(&mut idx);
            idx[..b].iter().map(|&i| &items[i]).collect()
        }
        _ => items.iter().collect(),
    }
}

struct TaskData {
    diffusion: Vec<DiffusionItem>,
    reactions: Vec<ReactionExample>,
}

/// Runs one training stage in place on `store` and returns the per-step
/// log and a final checkpoint. Stage 1-pretrain trains each task in turn
/// with its own optimizer. Stage 1-align fits the encoder against fixed
/// caption embeddings. The other stages cycle through their tasks one step
/// at a time under a single optimizer.
pub fn run_stage(
    model: &SciCoreMol,
    store: &mut ParamStore,
    config: &StageConfig,
    corpora: &Corpora,
    rng: &mut SeededRng,
) -> Result<StageOutput> {
    if store.names().all(|n| config.is_frozen(n)) {
        return Err(ModelError::FrozenAllParams);
    }
    let tasks: Vec<TaskType> = config
        .active_tasks()
        .into_iter()
        .filter(|&t| has_data(t, corpora))
        .collect();
    if config.stage != StageId::Pretrain && tasks.contains(&TaskType::Autoencoder) {
        return Err(ModelError::InvalidRange("the autoencoder is frozen after stage 1".into()));
    }
    let mut log = Vec::new();
    let frozen = |n: &str| config.is_frozen(n);
    let mut data = TaskData {
        diffusion: Vec::new(),
        reactions: product_examples(&corpora.reactions)?,
    };
    if config.stage == StageId::Pretrain {
        let reference = store.clone();
        let mut step = 0;
        for &task in &tasks {
            let n = config.steps_for(task);
            let mut adam = config.optimizer.adam(config.lr_for(task), n);
            if task == TaskType::Diffusion {
                data.diffusion = diffusion_items(model, store, corpora)?;
            }
            let geo = GeoTable::for_records(&model.gvp, store, &corpora.reactions)?;
            for k in 0..n {
                let mut tape = Tape::with_frozen(&config.frozen_prefixes());
                let loss = match task {
                    TaskType::Autoencoder => {
                        let batch: Vec<String> = pick(&corpora.molecules, config.batch, rng).into_iter().cloned().collect();
                        let (noise, mix) = model.ae.corruption(k, n);
                        model.ae.reconstruction_loss(&mut tape, store, &batch, noise, mix, rng)?
                    }
                    TaskType::Lm => {
                        let batch: Vec<LmExample> = pick(&corpora.lm, config.batch, rng).into_iter().cloned().collect();
                        let l = lm_loss_with_kl(&mut tape, store, &reference, model, &batch, config.weights.kl)?;
                        tape.scale(l, config.weights.lm)
                    }
                    _ => {
                        let items = task_batch(task, corpora, &data, config.batch, rng);
                        joint_loss(&mut tape, store, model, &items, &config.weights, &geo, rng)?
                    }
                };
                log.push(LogRow {
                    step,
                    task,
                    loss: tape.value(loss).item(),
                });
                tape.backward(loss)?;
                adam.step(store, &tape.param_grads(), frozen);
                step += 1;
            }
        }
    } else if config.stage == StageId::Align && tasks == [TaskType::Align] {
        let mut adam = config.optimizer.adam(config.optimizer.lr, config.steps);
        let texts = text_table(model, store, &corpora.pairs)?;
        for step in 0..config.steps {
            let picked = pick(&corpora.pairs, config.batch.map(|b| b.max(2)), rng);
            let mut tape = Tape::with_frozen(&config.frozen_prefixes());
            let mut mols = Vec::with_capacity(picked.len());
            for p in &picked {
                mols.push(model.gvp.embed_on_tape(&mut tape, store, &p.smiles)?.1);
            }
            let m = tape.vcat(&mols)?;
            let rows: Vec<Vec<f64>> = picked.iter().map(|p| texts[&p.caption].clone()).collect();
            let t = tape.constant(Tensor::from_rows(&rows)?);
            let l = ntxent_alignment_loss(&mut tape, m, t, ALIGN_TEMPERATURE)?;
            let loss = tape.scale(l, config.weights.align);
            log.push(LogRow {
                step,
                task: TaskType::Align,
                loss: tape.value(loss).item(),
            });
            tape.backward(loss)?;
            adam.step(store, &tape.param_grads(), frozen);
        }
    } else if !tasks.is_empty() {
        let mut adam = config.optimizer.adam(config.optimizer.lr, config.steps);
        if tasks.contains(&TaskType::Diffusion) {
            data.diffusion = diffusion_items(model, store, corpora)?;
        }
        let gvp_trains = store.names().any(|n| n.starts_with(GVP_PREFIX) && !config.is_frozen(n));
        let mut geo = GeoTable::for_records(&model.gvp, store, &corpora.reactions)?;
        for step in 0..config.steps {
            let task = tasks[step % tasks.len()];
            if task == TaskType::Reaction && gvp_trains && step >= tasks.len() {
                geo = GeoTable::for_records(&model.gvp, store, &corpora.reactions)?;
            }
            let items = task_batch(task, corpora, &data, config.batch, rng);
            let mut tape = Tape::with_frozen(&config.frozen_prefixes());
            let loss = joint_loss(&mut tape, store, model, &items, &config.weights, &geo, rng)?;
            log.push(LogRow {
                step,
                task,
                loss: tape.value(loss).item(),
            });
            tape.backward(loss)?;
            adam.step(store, &tape.param_grads(), frozen);
        }
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("stage".to_string(), config.stage.to_string());
    metadata.insert("steps".to_string(), log.len().to_string());
    metadata.insert("seed".to_string(), config.seed.to_string());
    Ok(StageOutput {
        log,
        checkpoint: Checkpoint {
            params: store.clone(),
            metadata,
        },
    })
}

/// Text embeddings of every caption, for stages where the backbone is fixed.
fn text_table(model: &SciCoreMol, store: &ParamStore, pairs: &[CaptionPair]) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for p in pairs {
        if !out.contains_key(&p.caption) {
            let mut tape = Tape::new();
            let t = text_embedding(model, &mut tape, store, &p.caption)?;
            out.insert(p.caption.clone(), tape.value(t).data().to_vec());
        }
    }
    Ok(out)
}

fn has_data(task: TaskType, c: &Corpora) -> bool {
    match task {
        TaskType::Lm => !c.lm.is_empty(),
        TaskType::Align => c.pairs.len() >= 2,
        TaskType::Diffusion => !c.pairs.is_empty() || !c.molecules.is_empty(),
        TaskType::Reaction => !c.reactions.is_empty(),
        TaskType::Autoencoder => !c.molecules.is_empty(),
    }
}

fn task_batch(task: TaskType, corpora: &Corpora, data: &TaskData, batch: Option<usize>, rng: &mut SeededRng) -> Vec<TaskItem> {
    match task {
        TaskType::Lm => pick(&corpora.lm, batch, rng).into_iter().cloned().map(TaskItem::Lm).collect(),
        TaskType::Align => pick(&corpora.pairs, batch.map(|b| b.max(2)), rng)
            .into_iter()
            .cloned()
            .map(TaskItem::Align)
            .collect(),
        TaskType::Diffusion => pick(&data.diffusion, batch, rng)
            .into_iter()
            .cloned()
            .map(TaskItem::Diffusion)
            .collect(),
        TaskType::Reaction => pick(&data.reactions, batch, rng)
            .into_iter()
            .map(|ex| TaskItem::Reaction(ex.clone().hide_amounts(AMOUNT_HIDE, rng)))
            .collect(),
        TaskType::Autoencoder => Vec::new(),
    }
}
