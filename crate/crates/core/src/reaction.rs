//! Set encoder over reactions: one token per molecule plus a CLS token, with
//! heads for masked-molecule embeddings, amount reconstruction and yield.

use std::collections::BTreeMap;
use std::str::FromStr;

use scicore_autograd::{Adam, AdamConfig, LrSchedule, ParamStore, SeededRng, Tape, Tensor, Var};
use serde::Deserialize;

use crate::error::{ModelError, Result};
use crate::gvp::GvpEncoder;
use crate::nn::{blocks, cosine, Block, LayerNorm, Linear};

pub const RXN_PREFIX: &str = "rxn.";
/// Corpus statistics live under this prefix and are never trained.
pub const STATS_PREFIX: &str = "rxn.stats.";
pub const AMOUNT_MEAN: &str = "rxn.stats.amount_mean";
pub const AMOUNT_STD: &str = "rxn.stats.amount_std";
pub const GEO_MEAN: &str = "rxn.stats.geo_mean";
pub const GEO_STD: &str = "rxn.stats.geo_std";
pub const AMOUNT_CHANNELS: usize = 5;
pub const AMOUNT_WIDTH: usize = 2 * AMOUNT_CHANNELS;
pub const AMOUNT_NAMES: [&str; AMOUNT_CHANNELS] = ["moles", "mass", "volume", "concentration", "equivalents"];
pub const YIELD_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Reactant,
    Reagent,
    Solvent,
    Catalyst,
    Product,
}

impl Role {
    pub const ALL: [Role; 5] = [Role::Reactant, Role::Reagent, Role::Solvent, Role::Catalyst, Role::Product];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Reactant => "reactant",
            Role::Reagent => "reagent",
            Role::Solvent => "solvent",
            Role::Catalyst => "catalyst",
            Role::Product => "product",
        }
    }
}

impl FromStr for Role {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| ModelError::UnknownRole(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TokenType {
    Observed,
    MaskedTarget,
}

/// Raw quantities in channel order moles, mass, volume, concentration,
/// equivalents; `None` when not reported.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Amounts(pub [Option<f64>; AMOUNT_CHANNELS]);

#[derive(Debug, Clone, PartialEq)]
pub struct ReactionMolecule {
    pub smiles: String,
    pub role: Role,
    pub amount: Amounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReactionRecord {
    pub molecules: Vec<ReactionMolecule>,
    /// Percent in `[0, 100]`.
    pub yield_percent: Option<f64>,
}

impl ReactionRecord {
    pub fn validate(&self) -> Result<()> {
        for role in [Role::Reactant, Role::Product] {
            if !self.molecules.iter().any(|m| m.role == role) {
                return Err(ModelError::InvalidRecord(format!("no {} slot", role.name())));
            }
        }
        if let Some(y) = self.yield_percent {
            if !(0.0..=100.0).contains(&y) {
                return Err(ModelError::OutOfRange(y));
            }
        }
        Ok(())
    }

    pub fn first_index(&self, role: Role) -> Option<usize> {
        self.molecules.iter().position(|m| m.role == role)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAmount {
    moles: Option<f64>,
    mass: Option<f64>,
    volume: Option<f64>,
    concentration: Option<f64>,
    equivalents: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMolecule {
    smiles: String,
    role: String,
    #[serde(default)]
    amount: Option<RawAmount>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    molecules: Vec<RawMolecule>,
    #[serde(default)]
    yield_percent: Option<f64>,
}

/// Parses one record per non-blank line. Line numbers in errors are 1-based.
pub fn parse_reaction_jsonl(text: &str) -> Result<Vec<ReactionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |reason: String| ModelError::Record { line: i + 1, reason };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        let mut molecules = Vec::with_capacity(raw.molecules.len());
        for m in raw.molecules {
            let role = m.role.parse::<Role>().map_err(|e| fail(e.to_string()))?;
            let amount = m
                .amount
                .map(|a| Amounts([a.moles, a.mass, a.volume, a.concentration, a.equivalents]))
                .unwrap_or_default();
            molecules.push(ReactionMolecule {
                smiles: m.smiles,
                role,
                amount,
            });
        }
        let record = ReactionRecord {
            molecules,
            yield_percent: raw.yield_percent,
        };
        record.validate().map_err(|e| fail(e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

/// Per-channel corpus mean and standard deviation of reported amounts.
#[derive(Debug, Clone, PartialEq)]
pub struct AmountStats {
    pub mean: [f64; AMOUNT_CHANNELS],
    pub std: [f64; AMOUNT_CHANNELS],
}

impl Default for AmountStats {
    fn default() -> Self {
        AmountStats {
            mean: [0.0; AMOUNT_CHANNELS],
            std: [1.0; AMOUNT_CHANNELS],
        }
    }
}

impl AmountStats {
    /// Channels with fewer than two values or zero spread get unit scale.
    pub fn fit(records: &[ReactionRecord]) -> Self {
        let mut stats = AmountStats::default();
        for ch in 0..AMOUNT_CHANNELS {
            let vals: Vec<f64> = records
                .iter()
                .flat_map(|r| r.molecules.iter().filter_map(move |m| m.amount.0[ch]))
                .collect();
            if vals.is_empty() {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            stats.mean[ch] = mean;
            if vals.len() > 1 {
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                if var > 0.0 {
                    stats.std[ch] = var.sqrt();
                }
            }
        }
        stats
    }

    pub fn store(&self, store: &mut ParamStore) {
        store.insert(AMOUNT_MEAN, Tensor::row(self.mean.to_vec()));
        store.insert(AMOUNT_STD, Tensor::row(self.std.to_vec()));
    }

    pub fn load(store: &ParamStore) -> Result<Self> {
        let mean = store.require(AMOUNT_MEAN)?.data();
        let std = store.require(AMOUNT_STD)?.data();
        if mean.len() != AMOUNT_CHANNELS || std.len() != AMOUNT_CHANNELS {
            return Err(ModelError::WidthMismatch {
                expected: AMOUNT_CHANNELS,
                got: mean.len().min(std.len()),
            });
        }
        let mut s = AmountStats::default();
        s.mean.copy_from_slice(mean);
        s.std.copy_from_slice(std);
        Ok(s)
    }

    /// Z-normalized values (zero where absent) and presence flags.
    pub fn normalize(&self, a: &Amounts) -> ([f64; AMOUNT_CHANNELS], [bool; AMOUNT_CHANNELS]) {
        let mut values = [0.0; AMOUNT_CHANNELS];
        let mut present = [false; AMOUNT_CHANNELS];
        for ch in 0..AMOUNT_CHANNELS {
            if let Some(v) = a.0[ch] {
                values[ch] = (v - self.mean[ch]) / self.std[ch];
                present[ch] = true;
            }
        }
        (values, present)
    }

    /// The width-10 amount vector: masked values followed by the mask.
    pub fn amount_vector(&self, a: &Amounts) -> [f64; AMOUNT_WIDTH] {
        let (values, present) = self.normalize(a);
        let mut out = [0.0; AMOUNT_WIDTH];
        for ch in 0..AMOUNT_CHANNELS {
            if present[ch] {
                out[ch] = values[ch];
                out[AMOUNT_CHANNELS + ch] = 1.0;
            }
        }
        out
    }
}

/// Geometric embeddings keyed by SMILES, computed once and reused.
#[derive(Debug, Clone, Default)]
pub struct GeoTable {
    map: BTreeMap<String, Vec<f64>>,
}

impl GeoTable {
    pub fn new() -> Self {
        GeoTable::default()
    }

    pub fn build<'a>(gvp: &GvpEncoder, store: &ParamStore, smiles: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut t = GeoTable::new();
        for s in smiles {
            if !t.map.contains_key(s) {
                t.map.insert(s.to_string(), gvp.embed_smiles(store, s)?.h_geo);
            }
        }
        Ok(t)
    }

    pub fn for_records(gvp: &GvpEncoder, store: &ParamStore, records: &[ReactionRecord]) -> Result<Self> {
        GeoTable::build(gvp, store, records.iter().flat_map(|r| r.molecules.iter().map(|m| m.smiles.as_str())))
    }

    pub fn insert(&mut self, smiles: impl Into<String>, h_geo: Vec<f64>) {
        self.map.insert(smiles.into(), h_geo);
    }

    pub fn get(&self, smiles: &str) -> Result<&[f64]> {
        self.map
            .get(smiles)
            .map(Vec::as_slice)
            .ok_or_else(|| ModelError::InvalidRecord(format!("no geometry for `{smiles}`")))
    }

    /// Per-feature mean and standard deviation over the table; features
    /// without spread get unit scale.
    pub fn standardization(&self, width: usize) -> (Vec<f64>, Vec<f64>) {
        let mut mean = vec![0.0; width];
        let mut std = vec![1.0; width];
        let rows: Vec<&Vec<f64>> = self.map.values().filter(|h| h.len() == width).collect();
        if rows.is_empty() {
            return (mean, std);
        }
        let n = rows.len() as f64;
        for k in 0..width {
            let m = rows.iter().map(|h| h[k]).sum::<f64>() / n;
            let var = rows.iter().map(|h| (h[k] - m).powi(2)).sum::<f64>() / n;
            mean[k] = m;
            if var > 1e-12 {
                std[k] = var.sqrt();
            }
        }
        (mean, std)
    }

    /// `(SMILES, h_geo)` pairs in key order.
    pub fn library(&self) -> Vec<(String, Vec<f64>)> {
        self.map.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReactionConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub geo: usize,
    pub bins: usize,
}

impl Default for ReactionConfig {
    fn default() -> Self {
        ReactionConfig {
            width: 64,
            layers: 2,
            heads: 4,
            hidden: 128,
            geo: 32,
            bins: YIELD_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct YieldPrediction {
    /// Unit-scale regression output.
    pub regression: f64,
    pub classes: Vec<f64>,
}

/// Encoder output on a tape: `(n + 1) x width` states in record order with
/// the CLS state in row 0.
#[derive(Debug, Clone, Copy)]
pub struct EncodedReaction {
    pub states: Var,
    pub cls: Var,
}

/// One training item: which molecules are prediction targets and which
/// `(molecule, channel)` amounts are hidden for reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct ReactionExample {
    pub record: ReactionRecord,
    pub mask: Vec<usize>,
    pub hidden: Vec<(usize, usize)>,
}

impl ReactionExample {
    pub fn new(record: ReactionRecord, mask: Vec<usize>) -> Self {
        ReactionExample {
            record,
            mask,
            hidden: Vec::new(),
        }
    }

    /// Hides each reported amount channel with probability `p`.
    pub fn hide_amounts(mut self, p: f64, rng: &mut SeededRng) -> Self {
        self.hidden.clear();
        for (i, m) in self.record.molecules.iter().enumerate() {
            for ch in 0..AMOUNT_CHANNELS {
                if m.amount.0[ch].is_some() && rng.bernoulli(p) {
                    self.hidden.push((i, ch));
                }
            }
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReactionWeights {
    pub embedding: f64,
    pub amount: f64,
    pub yield_total: f64,
    pub regression: f64,
    pub classification: f64,
}

impl Default for ReactionWeights {
    fn default() -> Self {
        ReactionWeights {
            embedding: 1.0,
            amount: 1.0,
            yield_total: 1.0,
            regression: 1.0,
            classification: 1.0,
        }
    }
}

/// Head outputs for one example; absent entries contribute nothing.
#[derive(Debug, Clone, Copy)]
pub struct ReactionPredictions {
    pub embeddings: Option<Var>,
    /// `n x 5` reconstructed amount values.
    pub amounts: Option<Var>,
    pub yield_regression: Var,
    pub yield_logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReactionTargets {
    pub embeddings: Option<Tensor>,
    /// Target values and a 0/1 selector, both `n x 5`.
    pub amounts: Option<(Tensor, Tensor)>,
    /// Unit-scale yield.
    pub yield_fraction: Option<f64>,
}

/// Per-term losses for one example.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReactionTerms {
    pub embedding: Option<Var>,
    pub amount: Option<Var>,
    pub regression: Option<Var>,
    pub classification: Option<Var>,
}

pub fn bin_yield(y: f64) -> Result<usize> {
    bin_yield_with(y, YIELD_BINS)
}

pub fn bin_yield_with(y: f64, bins: usize) -> Result<usize> {
    if !(0.0..=100.0).contains(&y) {
        return Err(ModelError::OutOfRange(y));
    }
    Ok(((y * bins as f64 / 100.0).floor() as usize).min(bins - 1))
}

/// Cosine-nearest library entry; the lowest index wins ties.
pub fn retrieve_nearest<'a>(embedding: &[f64], library: &'a [(String, Vec<f64>)]) -> Result<&'a str> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (_, h)) in library.iter().enumerate() {
        let c = cosine(embedding, h);
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((i, c));
        }
    }
    best.map(|(i, _)| library[i].0.as_str()).ok_or(ModelError::EmptyLibrary)
}

/// Loss terms of one example given its predictions.
pub fn reaction_terms(tape: &mut Tape, pred: &ReactionPredictions, target: &ReactionTargets, bins: usize) -> Result<ReactionTerms> {
    let mut terms = ReactionTerms::default();
    if let (Some(p), Some(t)) = (pred.embeddings, &target.embeddings) {
        let t = tape.constant(t.clone());
        terms.embedding = Some(tape.mse(p, t)?);
    }
    if let (Some(p), Some((values, select))) = (pred.amounts, &target.amounts) {
        let count = select.data().iter().sum::<f64>();
        if count > 0.0 {
            let t = tape.constant(values.clone());
            let d = tape.sub(p, t)?;
            let sq = tape.mul(d, d)?;
            let sel = tape.constant(select.clone());
            let picked = tape.mul(sq, sel)?;
            let s = tape.sum(picked);
            terms.amount = Some(tape.scale(s, 1.0 / count));
        }
    }
    if let Some(y) = target.yield_fraction {
        let t = tape.constant(Tensor::from_rows(&[vec![y]])?);
        terms.regression = Some(tape.mse(pred.yield_regression, t)?);
        let bin = bin_yield_with(y * 100.0, bins)?;
        terms.classification = Some(tape.cross_entropy(pred.yield_logits, &[Some(bin)])?);
    }
    Ok(terms)
}

/// Weighted batch loss; each term is averaged over the examples that carry
/// it and contributes exactly zero when none does.
pub fn combine_terms(tape: &mut Tape, terms: &[ReactionTerms], w: &ReactionWeights) -> Result<Var> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    let parts: [(fn(&ReactionTerms) -> Option<Var>, f64); 4] = [
        (|t| t.embedding, w.embedding),
        (|t| t.amount, w.amount),
        (|t| t.regression, w.yield_total * w.regression),
        (|t| t.classification, w.yield_total * w.classification),
    ];
    for (get, weight) in parts {
        let present: Vec<Var> = terms.iter().filter_map(get).collect();
        if present.is_empty() {
            continue;
        }
        let mut acc = present[0];
        for &v in &present[1..] {
            acc = tape.add(acc, v)?;
        }
        let mean = tape.scale(acc, weight / present.len() as f64);
        total = tape.add(total, mean)?;
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct ReactionModel {
    pub config: ReactionConfig,
}

impl ReactionModel {
    pub fn new(config: ReactionConfig) -> Self {
        ReactionModel { config }
    }

    fn f_mol(&self) -> Linear {
        Linear::without_bias("rxn.f_mol", self.config.geo, self.config.width)
    }

    fn f_amt(&self) -> Linear {
        Linear::without_bias("rxn.f_amt", AMOUNT_WIDTH, self.config.width)
    }

    fn blocks(&self) -> Vec<Block> {
        let c = &self.config;
        blocks("rxn.block", c.layers, c.width, c.heads, c.hidden)
    }

    fn final_norm(&self) -> LayerNorm {
        LayerNorm::new("rxn.ln_f", self.config.width)
    }

    fn embedding_head(&self) -> Linear {
        Linear::new("rxn.emb_head", self.config.width, self.config.geo)
    }

    fn amount_head(&self) -> Linear {
        Linear::new("rxn.amt_head", self.config.width, AMOUNT_CHANNELS)
    }

    fn yield_regression(&self) -> Linear {
        Linear::new("rxn.yield_reg", self.config.width, 1)
    }

    fn yield_classes(&self) -> Linear {
        Linear::new("rxn.yield_cls", self.config.width, self.config.bins)
    }

    /// Initializes weights and stores amount statistics and the geometry
    /// standardization of `geo` as frozen parameters.
    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng, stats: &AmountStats, geo: &GeoTable) {
        let w = self.config.width;
        self.f_mol().init(store, rng);
        self.f_amt().init(store, rng);
        store.init_normal("rxn.role", &[Role::ALL.len(), w], 0.1, rng);
        store.init_normal("rxn.type", &[2, w], 0.1, rng);
        store.init_normal("rxn.cls", &[1, w], 0.1, rng);
        for b in self.blocks() {
            b.init(store, rng);
        }
        self.final_norm().init(store);
        self.embedding_head().init(store, rng);
        self.amount_head().init(store, rng);
        self.yield_regression().init(store, rng);
        self.yield_classes().init(store, rng);
        stats.store(store);
        let (mean, std) = geo.standardization(self.config.geo);
        store.insert(GEO_MEAN, Tensor::row(mean));
        store.insert(GEO_STD, Tensor::row(std));
    }

    /// `f_mol(h_geo) + f_amt([values * present | present]) + e_role + e_type`
    /// where `f_mol` sees `h_geo` standardized by the stored corpus statistics.
    /// `h_geo` is `1 x geo` or `None` for a slot without geometry; `values`
    /// is `1 x 5`.
    #[allow(clippy::too_many_arguments)]
    pub fn build_token(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h_geo: Option<Var>,
        values: Var,
        present: &[bool; AMOUNT_CHANNELS],
        role: Role,
        ty: TokenType,
    ) -> Result<Var> {
        let m = tape.constant(Tensor::row(present.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect()));
        let v = tape.mul(values, m)?;
        let a = tape.hcat(&[v, m])?;
        let amt = self.f_amt().forward(tape, store, a)?;
        let mut x = amt;
        let roles = tape.param(store, "rxn.role")?;
        let e_role = tape.gather_rows(roles, &[role.index()])?;
        let types = tape.param(store, "rxn.type")?;
        let e_type = tape.gather_rows(types, &[ty as usize])?;
        if let Some(h) = h_geo {
            let mean = tape.constant(store.require(GEO_MEAN)?.clone());
            let std = tape.constant(store.require(GEO_STD)?.clone());
            let centered = tape.sub(h, mean)?;
            let z = tape.div(centered, std)?;
            let mol = self.f_mol().forward(tape, store, z)?;
            x = tape.add(x, mol)?;
        }
        let x = tape.add(x, e_role)?;
        Ok(tape.add(x, e_type)?)
    }

    fn check_indices(record: &ReactionRecord, mask: &[usize], hidden: &[(usize, usize)]) -> Result<()> {
        let len = record.molecules.len();
        for &index in mask.iter().chain(hidden.iter().map(|(i, _)| i)) {
            if index >= len {
                return Err(ModelError::IndexOutOfRange { index, len });
            }
        }
        for &(_, ch) in hidden {
            if ch >= AMOUNT_CHANNELS {
                return Err(ModelError::IndexOutOfRange {
                    index: ch,
                    len: AMOUNT_CHANNELS,
                });
            }
        }
        Ok(())
    }

    /// Encodes `record` with the molecules in `mask` as prediction targets
    /// and the `hidden` amount channels withheld. Tokens are processed in a
    /// canonical order so that reordering the record leaves every state
    /// bit-identical.
    pub fn encode_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        record: &ReactionRecord,
        mask: &[usize],
        hidden: &[(usize, usize)],
        geo: &GeoTable,
    ) -> Result<EncodedReaction> {
        Self::check_indices(record, mask, hidden)?;
        let stats = AmountStats::load(store)?;
        let mut tokens = Vec::with_capacity(record.molecules.len());
        for (i, m) in record.molecules.iter().enumerate() {
            let masked = mask.contains(&i);
            let h = if masked {
                None
            } else {
                let h = geo.get(&m.smiles)?;
                if h.len() != self.config.geo {
                    return Err(ModelError::WidthMismatch {
                        expected: self.config.geo,
                        got: h.len(),
                    });
                }
                Some(tape.constant(Tensor::row(h.to_vec())))
            };
            let (values, mut present) = stats.normalize(&m.amount);
            for &(_, ch) in hidden.iter().filter(|(j, _)| *j == i) {
                present[ch] = false;
            }
            let vv = tape.constant(Tensor::row(values.to_vec()));
            let ty = if masked { TokenType::MaskedTarget } else { TokenType::Observed };
            let tok = self.build_token(tape, store, h, vv, &present, m.role, ty)?;
            tokens.push((m.role, ty, tok));
        }
        let mut order: Vec<usize> = (0..tokens.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, ta, va) = tokens[a];
            let (rb, tb, vb) = tokens[b];
            (ra, ta).cmp(&(rb, tb)).then_with(|| {
                let xa = tape.value(va).data().iter().map(|x| x.to_bits());
                let xb = tape.value(vb).data().iter().map(|x| x.to_bits());
                xa.cmp(xb)
            })
        });
        let mut rows = vec![tape.param(store, "rxn.cls")?];
        rows.extend(order.iter().map(|&i| tokens[i].2));
        let mut x = tape.vcat(&rows)?;
        for b in self.blocks() {
            x = b.forward(tape, store, x, None)?;
        }
        let x = self.final_norm().forward(tape, store, x)?;
        let mut position = vec![0; order.len()];
        for (k, &i) in order.iter().enumerate() {
            position[i] = k + 1;
        }
        let mut back = vec![0];
        back.extend(position);
        let states = tape.gather_rows(x, &back)?;
        let cls = tape.slice_rows(states, 0, 1)?;
        Ok(EncodedReaction { states, cls })
    }

    /// Predicted `h_geo` for each masked slot, in `mask` order. The head
    /// output is read in standardized units and mapped back with the stored
    /// geometry statistics.
    pub fn masked_embeddings_tape(&self, tape: &mut Tape, store: &ParamStore, enc: &EncodedReaction, mask: &[usize]) -> Result<Var> {
        if mask.is_empty() {
            return Err(ModelError::EmptyMask);
        }
        let rows: Vec<usize> = mask.iter().map(|i| i + 1).collect();
        let picked = tape.gather_rows(enc.states, &rows)?;
        let z = self.embedding_head().forward(tape, store, picked)?;
        let std = tape.constant(store.require(GEO_STD)?.clone());
        let mean = tape.constant(store.require(GEO_MEAN)?.clone());
        let scaled = tape.mul(z, std)?;
        Ok(tape.add(scaled, mean)?)
    }

    /// Regression output in `(0, 1)` and class logits.
    pub fn yield_tape(&self, tape: &mut Tape, store: &ParamStore, cls: Var) -> Result<(Var, Var)> {
        let r = self.yield_regression().forward(tape, store, cls)?;
        let r = tape.sigmoid(r);
        let logits = self.yield_classes().forward(tape, store, cls)?;
        Ok((r, logits))
    }

    pub fn predictions(&self, tape: &mut Tape, store: &ParamStore, ex: &ReactionExample, geo: &GeoTable) -> Result<ReactionPredictions> {
        let enc = self.encode_tape(tape, store, &ex.record, &ex.mask, &ex.hidden, geo)?;
        let embeddings = if ex.mask.is_empty() {
            None
        } else {
            Some(self.masked_embeddings_tape(tape, store, &enc, &ex.mask)?)
        };
        let amounts = if ex.hidden.is_empty() {
            None
        } else {
            let n = ex.record.molecules.len();
            let rows = tape.slice_rows(enc.states, 1, n)?;
            Some(self.amount_head().forward(tape, store, rows)?)
        };
        let (yield_regression, yield_logits) = self.yield_tape(tape, store, enc.cls)?;
        Ok(ReactionPredictions {
            embeddings,
            amounts,
            yield_regression,
            yield_logits,
        })
    }

    pub fn targets(&self, store: &ParamStore, ex: &ReactionExample, geo: &GeoTable) -> Result<ReactionTargets> {
        let embeddings = if ex.mask.is_empty() {
            None
        } else {
            let rows = ex
                .mask
                .iter()
                .map(|&i| geo.get(&ex.record.molecules[i].smiles).map(<[f64]>::to_vec))
                .collect::<Result<Vec<_>>>()?;
            Some(Tensor::from_rows(&rows)?)
        };
        let amounts = if ex.hidden.is_empty() {
            None
        } else {
            let stats = AmountStats::load(store)?;
            let n = ex.record.molecules.len();
            let mut values = Tensor::zeros(&[n, AMOUNT_CHANNELS]);
            let mut select = Tensor::zeros(&[n, AMOUNT_CHANNELS]);
            for &(i, ch) in &ex.hidden {
                let (v, present) = stats.normalize(&ex.record.molecules[i].amount);
                if present[ch] {
                    values.set(i, ch, v[ch]);
                    select.set(i, ch, 1.0);
                }
            }
            Some((values, select))
        };
        Ok(ReactionTargets {
            embeddings,
            amounts,
            yield_fraction: ex.record.yield_percent.map(|y| y / 100.0),
        })
    }

    pub fn reaction_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[ReactionExample],
        weights: &ReactionWeights,
        geo: &GeoTable,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut terms = Vec::with_capacity(batch.len());
        for ex in batch {
            Self::check_indices(&ex.record, &ex.mask, &ex.hidden)?;
            let target = self.targets(store, ex, geo)?;
            let pred = self.predictions(tape, store, ex, geo)?;
            terms.push(reaction_terms(tape, &pred, &target, self.config.bins)?);
        }
        combine_terms(tape, &terms, weights)
    }

    /// Per-token states and the CLS state.
    pub fn encode_reaction(&self, store: &ParamStore, record: &ReactionRecord, mask: &[usize], geo: &GeoTable) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let enc = self.encode_tape(&mut tape, store, record, mask, &[], geo)?;
        Ok((tape.value(enc.states).clone(), tape.value(enc.cls).data().to_vec()))
    }

    pub fn predict_masked_molecule(&self, store: &ParamStore, record: &ReactionRecord, mask: &[usize], geo: &GeoTable) -> Result<Vec<Vec<f64>>> {
        if mask.is_empty() {
            return Err(ModelError::EmptyMask);
        }
        let mut tape = Tape::new();
        let enc = self.encode_tape(&mut tape, store, record, mask, &[], geo)?;
        let e = self.masked_embeddings_tape(&mut tape, store, &enc, mask)?;
        let v = tape.value(e);
        Ok((0..v.rows()).map(|r| v.row_slice(r).to_vec()).collect())
    }

    pub fn predict_yield(&self, store: &ParamStore, cls: &[f64]) -> Result<YieldPrediction> {
        if cls.len() != self.config.width {
            return Err(ModelError::WidthMismatch {
                expected: self.config.width,
                got: cls.len(),
            });
        }
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::row(cls.to_vec()));
        let (r, logits) = self.yield_tape(&mut tape, store, c)?;
        let p = tape.softmax(logits)?;
        Ok(YieldPrediction {
            regression: tape.value(r).item().clamp(0.0, 1.0),
            classes: tape.value(p).data().to_vec(),
        })
    }

    /// Trains every `rxn.` parameter except the corpus statistics.
    /// Amounts are re-hidden each step with probability `run.hide`.
    pub fn train(
        &self,
        store: &mut ParamStore,
        data: &[ReactionExample],
        weights: &ReactionWeights,
        geo: &GeoTable,
        run: &ReactionRun,
        rng: &mut SeededRng,
    ) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut adam = Adam::new(AdamConfig {
            lr: run.lr,
            schedule: LrSchedule::Cosine {
                total: run.steps as u64,
                floor: 0.01,
            },
            ..AdamConfig::default()
        });
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut losses = Vec::with_capacity(run.steps);
        for _ in 0..run.steps {
            let picked: Vec<usize> = match run.batch {
                Some(b) if b < data.len() => {
                    rng.shuffle(&mut order);
                    order[..b].to_vec()
                }
                _ => (0..data.len()).collect(),
            };
            let batch: Vec<ReactionExample> = picked.iter().map(|&i| data[i].clone().hide_amounts(run.hide, rng)).collect();
            let mut tape = Tape::new();
            let loss = self.reaction_loss(&mut tape, store, &batch, weights, geo)?;
            losses.push(tape.value(loss).item());
            tape.backward(loss)?;
            adam.step(store, &tape.param_grads(), |n| !n.starts_with(RXN_PREFIX) || n.starts_with(STATS_PREFIX));
        }
        Ok(losses)
    }
}

/// Optimizer settings for [`ReactionModel::train`]; `batch: None` trains on
/// the full set each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReactionRun {
    pub steps: usize,
    pub lr: f64,
    pub hide: f64,
    pub batch: Option<usize>,
}

impl Default for ReactionRun {
    fn default() -> Self {
        ReactionRun {
            steps: 3000,
            lr: 1e-3,
            hide: 0.15,
            batch: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins() {
        assert_eq!(bin_yield(0.0).unwrap(), 0);
        assert_eq!(bin_yield(100.0).unwrap(), 9);
        assert_eq!(bin_yield(57.60).unwrap(), 5);
        assert_eq!(bin_yield(9.999).unwrap(), 0);
        assert_eq!(bin_yield(10.0).unwrap(), 1);
        assert!(matches!(bin_yield(100.5), Err(ModelError::OutOfRange(_))));
        assert!(matches!(bin_yield(-0.1), Err(ModelError::OutOfRange(_))));
    }

    #[test]
    fn roles_round_trip() {
        for r in Role::ALL {
            assert_eq!(r.name().parse::<Role>().unwrap(), r);
        }
        assert_eq!("ligand".parse::<Role>().unwrap_err(), ModelError::UnknownRole("ligand".into()));
    }

    #[test]
    fn retrieval_rules() {
        let lib = vec![
            ("A".to_string(), vec![1.0, 0.0]),
            ("B".to_string(), vec![0.0, 1.0]),
            ("C".to_string(), vec![1.0, 1.0]),
        ];
        assert_eq!(retrieve_nearest(&[0.0, 2.0], &lib).unwrap(), "B");
        assert_eq!(retrieve_nearest(&[1.0, 1.0], &lib[..1]).unwrap(), "A");
        let tied = vec![
            ("x".to_string(), vec![1.0, 0.0]),
            ("y".to_string(), vec![0.0, 1.0]),
        ];
        assert_eq!(retrieve_nearest(&[1.0, 1.0], &tied).unwrap(), "x");
        assert_eq!(retrieve_nearest(&[1.0], &[]).unwrap_err(), ModelError::EmptyLibrary);
    }

    #[test]
    fn jsonl_parsing() {
        let text = r#"{"molecules":[{"smiles":"CCO","role":"reactant","amount":{"moles":0.5}},{"smiles":"CC=O","role":"product"}],"yield_percent":42.0}

{"molecules":[{"smiles":"C","role":"reactant"},{"smiles":"CO","role":"product"}]}"#;
        let recs = parse_reaction_jsonl(text).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].molecules[0].amount.0[0], Some(0.5));
        assert_eq!(recs[0].yield_percent, Some(42.0));
        assert_eq!(recs[1].yield_percent, None);
        let bad = "{\"molecules\":[{\"smiles\":\"C\",\"role\":\"reactant\"},{\"smiles\":\"CO\",\"role\":\"product\"}]}\n{\"molecules\":[],\"temp\":3}";
        assert!(matches!(parse_reaction_jsonl(bad), Err(ModelError::Record { line: 2, .. })));
        let bad_role = r#"{"molecules":[{"smiles":"C","role":"ligand"}]}"#;
        assert!(matches!(parse_reaction_jsonl(bad_role), Err(ModelError::Record { line: 1, .. })));
        let no_product = r#"{"molecules":[{"smiles":"C","role":"reactant"}]}"#;
        assert!(matches!(parse_reaction_jsonl(no_product), Err(ModelError::Record { line: 1, .. })));
    }

    #[test]
    fn stats_fit_and_vector() {
        let recs = parse_reaction_jsonl(
            r#"{"molecules":[{"smiles":"C","role":"reactant","amount":{"moles":1.0,"mass":5.0}},{"smiles":"CO","role":"product","amount":{"moles":3.0}}]}"#,
        )
        .unwrap();
        let s = AmountStats::fit(&recs);
        assert_eq!(s.mean[0], 2.0);
        assert_eq!(s.std[0], 1.0);
        assert_eq!(s.mean[1], 5.0);
        assert_eq!(s.std[1], 1.0);
        let v = s.amount_vector(&recs[0].molecules[0].amount);
        assert_eq!(v, [-1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }
}
