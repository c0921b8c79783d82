//! Plain-text corpora and the templated desk-scale training data.

use scicore_chem::{parse_smiles, Element, MolecularGraph};

use crate::error::{ModelError, Result};
use crate::lm::{tokenize, validate_sequence, LmExample};
use crate::reaction::{ReactionRecord, Role};

/// A molecule and a natural-language description of it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionPair {
    pub smiles: String,
    pub caption: String,
}

fn record_err(line: usize, reason: impl Into<String>) -> ModelError {
    ModelError::Record {
        line,
        reason: reason.into(),
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// One SMILES per line; blank lines and `#` comments are skipped.
pub fn parse_smiles_lines(text: &str) -> Result<Vec<String>> {
    content_lines(text)
        .map(|(line, l)| {
            parse_smiles(l).map_err(|e| record_err(line, format!("`{l}`: {e}")))?;
            Ok(l.to_string())
        })
        .collect()
}

/// `smiles<TAB>caption` per line.
pub fn parse_pair_tsv(text: &str) -> Result<Vec<CaptionPair>> {
    content_lines(text)
        .map(|(line, l)| {
            let (smiles, caption) = l
                .split_once('\t')
                .ok_or_else(|| record_err(line, "expected `smiles<TAB>caption`"))?;
            let smiles = smiles.trim();
            let caption = caption.trim();
            parse_smiles(smiles).map_err(|e| record_err(line, format!("`{smiles}`: {e}")))?;
            if caption.is_empty() {
                return Err(record_err(line, "empty caption"));
            }
            tokenize(caption).map_err(|e| record_err(line, e.to_string()))?;
            Ok(CaptionPair {
                smiles: smiles.to_string(),
                caption: caption.to_string(),
            })
        })
        .collect()
}

/// One prompt per non-blank line, tokenized with the literal markers.
pub fn parse_prompts(text: &str) -> Result<Vec<Vec<usize>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let ids = tokenize(l).map_err(|e| record_err(i + 1, e.to_string()))?;
            validate_sequence(&ids).map_err(|e| record_err(i + 1, e.to_string()))?;
            Ok(ids)
        })
        .collect()
}

fn element_name(e: Element) -> &'static str {
    match e {
        Element::B => "boron",
        Element::C => "carbon",
        Element::N => "nitrogen",
        Element::O => "oxygen",
        Element::P => "phosphorus",
        Element::S => "sulfur",
        Element::F => "fluorine",
        Element::Cl => "chlorine",
        Element::Br => "bromine",
        Element::I => "iodine",
    }
}

struct Facts {
    atoms: usize,
    elements: String,
    ring: &'static str,
    charge: &'static str,
}

fn facts(graph: &MolecularGraph) -> Facts {
    let mut elements: Vec<Element> = graph.atoms().iter().map(|a| a.element).collect();
    elements.sort();
    elements.dedup();
    let names: Vec<&str> = elements.into_iter().map(element_name).collect();
    let aromatic = graph.atoms().iter().any(|a| a.aromatic);
    let ring = (0..graph.atom_count()).any(|i| graph.is_ring_atom(i));
    let charge: i32 = graph.atoms().iter().map(|a| i32::from(a.charge)).sum();
    Facts {
        atoms: graph.atom_count(),
        elements: names.join(" and "),
        ring: match (aromatic, ring) {
            (true, _) => "aromatic",
            (false, true) => "cyclic",
            _ => "acyclic",
        },
        charge: match charge.signum() {
            1 => "cationic",
            -1 => "anionic",
            _ => "neutral",
        },
    }
}

const TEMPLATES: usize = 5;

/// Templated description of `smiles`; `variant` selects the wording.
pub fn describe(smiles: &str, variant: usize) -> Result<String> {
    let graph = parse_smiles(smiles).map_err(|source| ModelError::InvalidSmiles {
        text: smiles.to_string(),
        source,
    })?;
    let f = facts(&graph);
    let n = f.atoms;
    Ok(match variant % TEMPLATES {
        0 => format!("a {} {} molecule of {n} heavy atoms built from {}", f.charge, f.ring, f.elements),
        1 => format!("{} compound with {n} atoms of {}", f.ring, f.elements),
        2 => format!("this {} structure contains {} and has {n} heavy atoms", f.charge, f.elements),
        3 => format!("small {} molecule made of {} ({n} atoms)", f.ring, f.elements),
        _ => format!("{n}-atom {} {} species with {}", f.ring, f.charge, f.elements),
    })
}

/// `n` pairs cycling through `smiles`, switching wording on each pass.
pub fn caption_pairs(smiles: &[&str], n: usize) -> Result<Vec<CaptionPair>> {
    if smiles.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    (0..n)
        .map(|k| {
            let s = smiles[k % smiles.len()];
            Ok(CaptionPair {
                smiles: s.to_string(),
                caption: describe(s, k / smiles.len())?,
            })
        })
        .collect()
}

pub fn design_prompt(caption: &str) -> String {
    format!("Design a molecule: {caption}")
}

pub fn reaction_prompt(record: &ReactionRecord) -> String {
    let parts: Vec<String> = record
        .molecules
        .iter()
        .filter(|m| m.role != Role::Product)
        .map(|m| format!("<mol>{}</mol>", m.smiles))
        .collect();
    format!("What forms from {}?", parts.join(" + "))
}

/// Supervised examples covering captioning and both dispatch routes.
pub fn sft_examples(pairs: &[CaptionPair], reactions: &[ReactionRecord]) -> Result<Vec<LmExample>> {
    let mut out = Vec::with_capacity(2 * pairs.len() + reactions.len());
    for p in pairs {
        out.push(LmExample::from_text(&format!("Describe <mol>{}</mol>:", p.smiles), &p.caption)?);
        out.push(LmExample::from_text(&design_prompt(&p.caption), "<d:generate>")?);
    }
    for r in reactions {
        out.push(LmExample::from_text(&reaction_prompt(r), "<d:react>")?);
    }
    Ok(out)
}
