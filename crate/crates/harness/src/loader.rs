//! Typed corpus files. Every loader either returns fully validated records
//! or the first offending line.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use scicore_chem::check_validity;
use scicore_core::corpus::{parse_pair_tsv, parse_prompts, parse_smiles_lines, CaptionPair};
use scicore_core::reaction::{parse_reaction_jsonl, ReactionRecord};
use scicore_core::ModelError;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusKind {
    SmilesLines,
    PairTsv,
    ReactionJsonl,
    Prompts,
}

impl CorpusKind {
    pub fn name(self) -> &'static str {
        match self {
            CorpusKind::SmilesLines => "smiles-lines",
            CorpusKind::PairTsv => "pair-tsv",
            CorpusKind::ReactionJsonl => "reaction-jsonl",
            CorpusKind::Prompts => "prompts",
        }
    }
}

impl fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorpusKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        [
            CorpusKind::SmilesLines,
            CorpusKind::PairTsv,
            CorpusKind::ReactionJsonl,
            CorpusKind::Prompts,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| HarnessError::InvalidValue(format!("unknown corpus kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Corpus {
    Smiles(Vec<String>),
    Pairs(Vec<CaptionPair>),
    Reactions(Vec<ReactionRecord>),
    /// Token ids per prompt.
    Prompts(Vec<Vec<usize>>),
}

impl Corpus {
    pub fn len(&self) -> usize {
        match self {
            Corpus::Smiles(v) => v.len(),
            Corpus::Pairs(v) => v.len(),
            Corpus::Reactions(v) => v.len(),
            Corpus::Prompts(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn line_error(e: ModelError) -> HarnessError {
    match e {
        ModelError::Record { line, reason } => HarnessError::ParseError { line, reason },
        other => HarnessError::Model(other),
    }
}

/// Reaction records with every molecule passing the validity check.
pub fn parse_reactions(text: &str) -> Result<Vec<ReactionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let record = parse_reaction_jsonl(line)
            .map_err(|e| match e {
                ModelError::Record { reason, .. } => HarnessError::ParseError { line: line_no, reason },
                other => HarnessError::Model(other),
            })?
            .pop()
            .ok_or_else(|| HarnessError::Internal("parsed line produced no record".into()))?;
        if let Some(m) = record.molecules.iter().find(|m| !check_validity(&m.smiles)) {
            return Err(HarnessError::ParseError {
                line: line_no,
                reason: format!("invalid SMILES `{}`", m.smiles),
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn parse_corpus(text: &str, kind: CorpusKind) -> Result<Corpus> {
    Ok(match kind {
        CorpusKind::SmilesLines => Corpus::Smiles(parse_smiles_lines(text).map_err(line_error)?),
        CorpusKind::PairTsv => Corpus::Pairs(parse_pair_tsv(text).map_err(line_error)?),
        CorpusKind::ReactionJsonl => Corpus::Reactions(parse_reactions(text)?),
        CorpusKind::Prompts => Corpus::Prompts(parse_prompts(text).map_err(line_error)?),
    })
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))
}

pub fn load_corpus(path: &Path, kind: CorpusKind) -> Result<Corpus> {
    parse_corpus(&read_text(path)?, kind)
}
