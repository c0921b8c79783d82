//! Character-level causal language model with structural-token injection.

use scicore_autograd::{ParamStore, SeededRng, Tape, Tensor, Var};
use scicore_chem::check_validity;

use crate::error::{ModelError, Result};
use crate::nn::{blocks, causal_mask, position_table, Block, LayerNorm, Linear};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MOL_OPEN: usize = 3;
pub const MOL_CLOSE: usize = 4;
pub const DISPATCH_PERCEIVE: usize = 5;
pub const DISPATCH_GENERATE: usize = 6;
pub const DISPATCH_REACT: usize = 7;
const SPECIALS: usize = 8;
const FIRST_CHAR: u8 = b' ';
const LAST_CHAR: u8 = b'~';
pub const VOCAB_SIZE: usize = SPECIALS + (LAST_CHAR - FIRST_CHAR + 1) as usize;

/// Text spellings of the special tokens that may appear in prompts.
pub const MARKERS: [(usize, &str); 5] = [
    (MOL_OPEN, "<mol>"),
    (MOL_CLOSE, "</mol>"),
    (DISPATCH_PERCEIVE, "<d:perceive>"),
    (DISPATCH_GENERATE, "<d:generate>"),
    (DISPATCH_REACT, "<d:react>"),
];

pub fn char_token(c: char) -> Option<usize> {
    let b = u32::from(c);
    (u32::from(FIRST_CHAR)..=u32::from(LAST_CHAR))
        .contains(&b)
        .then(|| SPECIALS + (b - u32::from(FIRST_CHAR)) as usize)
}

pub fn token_char(id: usize) -> Option<char> {
    (SPECIALS..VOCAB_SIZE)
        .contains(&id)
        .then(|| char::from(FIRST_CHAR + (id - SPECIALS) as u8))
}

pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(text.len());
    let mut i = 0;
    'outer: while i < text.len() {
        let rest = &text[i..];
        for (id, m) in MARKERS {
            if rest.starts_with(m) {
                out.push(id);
                i += m.len();
                continue 'outer;
            }
        }
        let ch = rest.chars().next().unwrap_or(' ');
        out.push(char_token(ch).ok_or(ModelError::UnknownCharacter { ch, offset: i })?);
        i += ch.len_utf8();
    }
    Ok(out)
}

/// Inverse of [`tokenize`]; BOS, EOS and PAD render as nothing.
pub fn detokenize(ids: &[usize]) -> String {
    let mut s = String::new();
    for &id in ids {
        if let Some(c) = token_char(id) {
            s.push(c);
        } else if let Some((_, m)) = MARKERS.iter().find(|(t, _)| *t == id) {
            s.push_str(m);
        }
    }
    s
}

/// Checks ids against the vocabulary and that molecule markers pair up
/// without nesting.
pub fn validate_sequence(ids: &[usize]) -> Result<()> {
    let mut open = false;
    for &id in ids {
        if id >= VOCAB_SIZE {
            return Err(ModelError::VocabOverflow { id, vocab: VOCAB_SIZE });
        }
        match id {
            MOL_OPEN if open => return Err(ModelError::MalformedSequence("nested <mol>".into())),
            MOL_OPEN => open = true,
            MOL_CLOSE if !open => return Err(ModelError::MalformedSequence("unmatched </mol>".into())),
            MOL_CLOSE => open = false,
            _ => {}
        }
    }
    if open {
        return Err(ModelError::MalformedSequence("unclosed <mol>".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntitySpan {
    /// Byte offsets into the scanned text.
    pub start: usize,
    pub end: usize,
    pub smiles: String,
}

/// Left-to-right scan for the longest valid SMILES substring (at least two
/// characters) starting at each position; accepted spans never overlap.
pub fn detect_entities(text: &str) -> Vec<EntitySpan> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let mut found = None;
        if bytes[i].is_ascii_graphic() {
            let mut limit = i;
            while limit < bytes.len() && bytes[limit].is_ascii_graphic() {
                limit += 1;
            }
            for j in (i + 2..=limit).rev() {
                if check_validity(&text[i..j]) {
                    found = Some(j);
                    break;
                }
            }
        }
        match found {
            Some(j) => {
                out.push(EntitySpan {
                    start: i,
                    end: j,
                    smiles: text[i..j].to_string(),
                });
                i = j;
            }
            None => i += 1,
        }
    }
    out
}

/// A molecule found in a token sequence: its SMILES and the index of the
/// last token belonging to it (the closing marker for explicit spans).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMolecule {
    pub smiles: String,
    pub last: usize,
}

/// Explicit `<mol>..</mol>` spans with valid content, plus entities detected
/// in plain-character runs outside them.
pub fn find_molecules(ids: &[usize]) -> Vec<TokenMolecule> {
    let mut out = Vec::new();
    let mut run = String::new();
    let mut run_start = 0;
    let mut inside: Option<usize> = None;
    let flush = |run: &mut String, start: usize, out: &mut Vec<TokenMolecule>| {
        for e in detect_entities(run) {
            out.push(TokenMolecule {
                smiles: e.smiles,
                last: start + e.end - 1,
            });
        }
        run.clear();
    };
    for (k, &id) in ids.iter().enumerate() {
        if let Some(open) = inside {
            if id == MOL_CLOSE {
                let content = detokenize(&ids[open + 1..k]);
                if check_validity(&content) {
                    out.push(TokenMolecule { smiles: content, last: k });
                }
                inside = None;
                run_start = k + 1;
            }
            continue;
        }
        match token_char(id) {
            Some(c) => {
                if run.is_empty() {
                    run_start = k;
                }
                run.push(c);
            }
            None => {
                flush(&mut run, run_start, &mut out);
                if id == MOL_OPEN {
                    inside = Some(k);
                }
            }
        }
    }
    if inside.is_none() {
        flush(&mut run, run_start, &mut out);
    }
    out.sort_by_key(|m| m.last);
    out
}

/// Hidden-state rows with a flag marking injected structural rows.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub rows: Tensor,
    pub is_virtual: Vec<bool>,
}

/// Appends one virtual row per molecule embedding.
pub fn inject_structural_tokens(h: &HiddenStates, molecules: &[Vec<f64>]) -> Result<HiddenStates> {
    let d = h.rows.cols();
    let mut data = h.rows.data().to_vec();
    let mut flags = h.is_virtual.clone();
    for m in molecules {
        if m.len() != d {
            return Err(ModelError::WidthMismatch { expected: d, got: m.len() });
        }
        data.extend_from_slice(m);
        flags.push(true);
    }
    Ok(HiddenStates {
        rows: Tensor::matrix(flags.len(), d, data)?,
        is_virtual: flags,
    })
}

/// One input row of the language model.
#[derive(Debug, Clone, Copy)]
pub enum Slot {
    Token(usize),
    /// A structural row already in the model width.
    Virtual(Var),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub max_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            width: 64,
            layers: 4,
            heads: 4,
            hidden: 256,
            max_len: 512,
        }
    }
}

/// Training pair: the loss covers `target` followed by EOS, conditioned on
/// `BOS input`.
#[derive(Debug, Clone, PartialEq)]
pub struct LmExample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

impl LmExample {
    pub fn from_text(input: &str, target: &str) -> Result<Self> {
        Ok(LmExample {
            input: tokenize(input)?,
            target: tokenize(target)?,
        })
    }
}

pub const LM_PREFIX: &str = "lm.";

#[derive(Debug, Clone)]
pub struct LanguageModel {
    pub config: LmConfig,
}

impl LanguageModel {
    pub fn new(config: LmConfig) -> Self {
        LanguageModel { config }
    }

    fn blocks(&self) -> Vec<Block> {
        let c = &self.config;
        blocks("lm.block", c.layers, c.width, c.heads, c.hidden)
    }

    fn final_norm(&self) -> LayerNorm {
        LayerNorm::new("lm.ln_f", self.config.width)
    }

    fn head(&self) -> Linear {
        Linear::new("lm.head", self.config.width, VOCAB_SIZE)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) {
        store.init_normal("lm.tok_emb", &[VOCAB_SIZE, self.config.width], 0.1, rng);
        for b in self.blocks() {
            b.init(store, rng);
        }
        self.final_norm().init(store);
        self.head().init(store, rng);
    }

    /// Final-layer hidden states (after the closing layer norm), `n x width`.
    pub fn hidden(&self, tape: &mut Tape, store: &ParamStore, slots: &[Slot]) -> Result<Var> {
        let n = slots.len();
        if n == 0 {
            return Err(ModelError::EmptyInput);
        }
        if n > self.config.max_len {
            return Err(ModelError::MalformedSequence(format!(
                "{n} rows exceed the context of {}",
                self.config.max_len
            )));
        }
        let table = tape.param(store, "lm.tok_emb")?;
        let mut pieces = Vec::new();
        let mut run: Vec<usize> = Vec::new();
        for slot in slots {
            match *slot {
                Slot::Token(id) => {
                    if id >= VOCAB_SIZE {
                        return Err(ModelError::VocabOverflow { id, vocab: VOCAB_SIZE });
                    }
                    run.push(id);
                }
                Slot::Virtual(v) => {
                    if !run.is_empty() {
                        pieces.push(tape.gather_rows(table, &run)?);
                        run.clear();
                    }
                    let (r, c) = tape.value(v).dims2()?;
                    if r != 1 || c != self.config.width {
                        return Err(ModelError::WidthMismatch {
                            expected: self.config.width,
                            got: c,
                        });
                    }
                    pieces.push(v);
                }
            }
        }
        if !run.is_empty() {
            pieces.push(tape.gather_rows(table, &run)?);
        }
        let x = if pieces.len() == 1 { pieces[0] } else { tape.vcat(&pieces)? };
        let pos = tape.constant(position_table(n, self.config.width));
        let mut x = tape.add(x, pos)?;
        let mask = tape.constant(causal_mask(n));
        for b in self.blocks() {
            x = b.forward(tape, store, x, Some(mask))?;
        }
        self.final_norm().forward(tape, store, x)
    }

    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, hidden: Var) -> Result<Var> {
        self.head().forward(tape, store, hidden)
    }

    /// Hidden states of a plain token sequence.
    pub fn encode_text(&self, store: &ParamStore, ids: &[usize]) -> Result<HiddenStates> {
        let mut tape = Tape::new();
        let slots: Vec<Slot> = ids.iter().map(|&t| Slot::Token(t)).collect();
        let h = self.hidden(&mut tape, store, &slots)?;
        Ok(HiddenStates {
            rows: tape.value(h).clone(),
            is_virtual: vec![false; ids.len()],
        })
    }

    /// Logits of the final row.
    pub fn next_logits(&self, store: &ParamStore, slots_of: impl FnOnce(&mut Tape) -> Vec<Slot>) -> Result<(Vec<f64>, Tensor)> {
        let mut tape = Tape::new();
        let slots = slots_of(&mut tape);
        let h = self.hidden(&mut tape, store, &slots)?;
        let n = slots.len();
        let last = tape.slice_rows(h, n - 1, 1)?;
        let logits = self.logits(&mut tape, store, last)?;
        Ok((tape.value(logits).data().to_vec(), tape.value(h).clone()))
    }

    /// Slots and labels for one example: `BOS input target EOS`, with a
    /// label on every row whose successor belongs to `target EOS`.
    pub fn example_rows(example: &LmExample) -> (Vec<Slot>, Vec<Option<usize>>) {
        let mut ids = Vec::with_capacity(example.input.len() + example.target.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(&example.input);
        let first_target = ids.len();
        ids.extend_from_slice(&example.target);
        ids.push(EOS);
        let n = ids.len();
        let labels = (0..n - 1)
            .map(|p| {
                let next = ids[p + 1];
                (p + 1 >= first_target && next != PAD).then_some(next)
            })
            .collect();
        (ids[..n - 1].iter().map(|&t| Slot::Token(t)).collect(), labels)
    }

    /// Logits over the rows of `slots` and summed NLL of the labelled rows.
    pub fn sequence_nll(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        slots: &[Slot],
        labels: &[Option<usize>],
    ) -> Result<(Var, Var, usize)> {
        let h = self.hidden(tape, store, slots)?;
        let logits = self.logits(tape, store, h)?;
        let count = labels.iter().filter(|l| l.is_some()).count();
        let ce = tape.cross_entropy(logits, labels)?;
        Ok((tape.scale(ce, count as f64), logits, count))
    }

    /// Mean negative log-likelihood over all target tokens of the batch.
    pub fn lm_loss(&self, tape: &mut Tape, store: &ParamStore, batch: &[LmExample]) -> Result<Var> {
        let mut total: Option<Var> = None;
        let mut count = 0;
        for ex in batch {
            let (slots, labels) = Self::example_rows(ex);
            let (nll, _, c) = self.sequence_nll(tape, store, &slots, &labels)?;
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
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_round_trip() {
        assert_eq!(VOCAB_SIZE, 103);
        let text = "Make <d:generate> like <mol>CCO</mol>!";
        let ids = tokenize(text).unwrap();
        assert!(ids.contains(&DISPATCH_GENERATE));
        assert_eq!(detokenize(&ids), text);
        validate_sequence(&ids).unwrap();
    }

    #[test]
    fn unknown_character_offset() {
        assert_eq!(
            tokenize("ab\u{e9}").unwrap_err(),
            ModelError::UnknownCharacter { ch: '\u{e9}', offset: 2 }
        );
    }

    #[test]
    fn marker_pairing() {
        assert!(validate_sequence(&[MOL_OPEN, MOL_OPEN]).is_err());
        assert!(validate_sequence(&[MOL_CLOSE]).is_err());
        assert!(validate_sequence(&[MOL_OPEN]).is_err());
        assert!(validate_sequence(&[VOCAB_SIZE]).is_err());
    }

    #[test]
    fn entity_detection() {
        let spans = detect_entities("Compare CCO with c1ccccc1 today");
        let found: Vec<&str> = spans.iter().map(|s| s.smiles.as_str()).collect();
        assert_eq!(found, vec!["CCO", "c1ccccc1"]);
        assert_eq!(spans[0].start, 8);
        assert!(detect_entities("no molecules here").is_empty());
    }

    #[test]
    fn molecules_in_token_stream() {
        let ids = tokenize("take <mol>CC(=O)O</mol> and CCN").unwrap();
        let found = find_molecules(&ids);
        assert_eq!(found.len(), 2);
        assert_eq!(found[0].smiles, "CC(=O)O");
        assert_eq!(ids[found[0].last], MOL_CLOSE);
        assert_eq!(found[1].smiles, "CCN");
        assert_eq!(found[1].last, ids.len() - 1);
    }

    #[test]
    fn injection_appends_flagged_rows() {
        let h = HiddenStates {
            rows: Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            is_virtual: vec![false, false],
        };
        let out = inject_structural_tokens(&h, &[vec![5.0, 6.0]]).unwrap();
        assert_eq!(out.rows.rows(), 3);
        assert_eq!(out.rows.row_slice(2), &[5.0, 6.0]);
        assert_eq!(out.is_virtual, vec![false, false, true]);
        assert!(inject_structural_tokens(&h, &[vec![1.0]]).is_err());
    }
}
