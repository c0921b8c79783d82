//! SMILES reader and writer for the organic subset plus bracket atoms.
//!
//! Supported: `B C N O P S F Cl Br I`, aromatic `b c n o p s`, bonds `- = #`,
//! branches, ring closures `1`-`9` and `%nn`, bracket atoms
//! `[<symbol><H count><charge>]` and `.` component separators. Stereo and
//! isotopes are rejected.

use std::collections::BTreeMap;

use crate::error::{GraphError, SmilesError};
use crate::graph::{Atom, Bond, BondOrder, Element, MolecularGraph};

struct RingOpen {
    atom: usize,
    order: Option<BondOrder>,
    offset: usize,
}

pub fn parse_smiles(text: &str) -> Result<MolecularGraph, SmilesError> {
    if text.is_empty() {
        return Err(SmilesError::Empty);
    }
    if let Some(offset) = text.bytes().position(|b| !b.is_ascii()) {
        return Err(SmilesError::NonAscii { offset });
    }
    let bytes = text.as_bytes();
    let mut atoms: Vec<Atom> = Vec::new();
    let mut offsets: Vec<usize> = Vec::new();
    let mut bonds: Vec<Bond> = Vec::new();
    let mut bond_offsets: Vec<usize> = Vec::new();
    let mut prev: Option<usize> = None;
    let mut branches: Vec<(usize, usize)> = Vec::new();
    let mut pending: Option<(BondOrder, usize)> = None;
    let mut rings: BTreeMap<u32, RingOpen> = BTreeMap::new();
    // a '.' must be followed by an atom
    let mut dangling_dot: Option<usize> = None;

    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b'(' => {
                let Some(p) = prev else {
                    return Err(SmilesError::UnbalancedParenthesis { offset: i });
                };
                if pending.is_some() {
                    return Err(SmilesError::InvalidBond { offset: i });
                }
                branches.push((p, i));
                i += 1;
            }
            b')' => {
                if pending.is_some() {
                    return Err(SmilesError::InvalidBond { offset: i });
                }
                let Some((p, _)) = branches.pop() else {
                    return Err(SmilesError::UnbalancedParenthesis { offset: i });
                };
                // an empty branch "C()" leaves prev at the branch point
                prev = Some(p);
                i += 1;
            }
            b'-' | b'=' | b'#' => {
                if prev.is_none() || pending.is_some() {
                    return Err(SmilesError::InvalidBond { offset: i });
                }
                let order = match c {
                    b'-' => BondOrder::Single,
                    b'=' => BondOrder::Double,
                    _ => BondOrder::Triple,
                };
                pending = Some((order, i));
                i += 1;
            }
            b'.' => {
                if prev.is_none() || pending.is_some() || !branches.is_empty() {
                    return Err(SmilesError::UnexpectedCharacter { offset: i });
                }
                prev = None;
                dangling_dot = Some(i);
                i += 1;
            }
            b'0'..=b'9' | b'%' => {
                let start = i;
                let Some(p) = prev else {
                    return Err(SmilesError::UnexpectedCharacter { offset: i });
                };
                let label = if c == b'%' {
                    let digits = bytes.get(i + 1..i + 3).filter(|d| d.iter().all(u8::is_ascii_digit));
                    let Some(d) = digits else {
                        return Err(SmilesError::UnexpectedCharacter { offset: i });
                    };
                    i += 3;
                    u32::from(d[0] - b'0') * 10 + u32::from(d[1] - b'0')
                } else {
                    i += 1;
                    u32::from(c - b'0')
                };
                let order = pending.take().map(|(o, _)| o);
                if let Some(open) = rings.remove(&label) {
                    let order = match (open.order, order) {
                        (Some(a), Some(b)) if a != b => {
                            return Err(SmilesError::InvalidBond { offset: start })
                        }
                        (Some(a), _) | (None, Some(a)) => a,
                        (None, None) => default_order(&atoms[open.atom], &atoms[p]),
                    };
                    if open.atom == p
                        || bonds.iter().any(|b| {
                            (b.a == p && b.b == open.atom) || (b.b == p && b.a == open.atom)
                        })
                    {
                        return Err(SmilesError::InvalidBond { offset: start });
                    }
                    bonds.push(Bond {
                        a: open.atom,
                        b: p,
                        order,
                    });
                    bond_offsets.push(start);
                } else {
                    rings.insert(
                        label,
                        RingOpen {
                            atom: p,
                            order,
                            offset: start,
                        },
                    );
                }
            }
            _ => {
                let start = i;
                let (atom, len) = if c == b'[' {
                    parse_bracket(bytes, i)?
                } else {
                    parse_organic(bytes, i)?
                };
                i += len;
                let idx = atoms.len();
                atoms.push(atom);
                offsets.push(start);
                if let Some(p) = prev {
                    let order = match pending.take() {
                        Some((o, _)) => o,
                        None => default_order(&atoms[p], &atoms[idx]),
                    };
                    bonds.push(Bond { a: p, b: idx, order });
                    bond_offsets.push(start);
                }
                dangling_dot = None;
                prev = Some(idx);
            }
        }
    }

    if let Some((_, offset)) = pending {
        return Err(SmilesError::InvalidBond { offset });
    }
    if let Some(&(_, offset)) = branches.last() {
        return Err(SmilesError::UnbalancedParenthesis { offset });
    }
    if let Some(open) = rings.values().min_by_key(|r| r.offset) {
        return Err(SmilesError::UnclosedRing {
            offset: open.offset,
        });
    }
    if let Some(offset) = dangling_dot {
        return Err(SmilesError::UnexpectedCharacter { offset });
    }

    MolecularGraph::with_source(atoms, bonds, text.to_string()).map_err(|e| match e {
        GraphError::Empty => SmilesError::Empty,
        GraphError::Valence { atom } => SmilesError::ValenceViolation {
            offset: offsets[atom],
        },
        GraphError::AromaticOutsideRing { atom } => SmilesError::AromaticOutsideRing {
            offset: offsets[atom],
        },
        GraphError::AromaticBondMismatch { bond } => SmilesError::InvalidBond {
            offset: bond_offsets[bond],
        },
        GraphError::SelfBond { atom } => SmilesError::InvalidBond {
            offset: offsets[atom],
        },
        GraphError::DuplicateBond { b, .. } => SmilesError::InvalidBond { offset: offsets[b] },
        GraphError::BadEndpoint { bond } => SmilesError::InvalidBond {
            offset: bond_offsets[bond],
        },
        GraphError::BadPermutation => SmilesError::Empty,
    })
}

/// True iff the text parses, including the valence check.
pub fn check_validity(text: &str) -> bool {
    parse_smiles(text).is_ok()
}

fn default_order(a: &Atom, b: &Atom) -> BondOrder {
    if a.aromatic && b.aromatic {
        BondOrder::Aromatic
    } else {
        BondOrder::Single
    }
}

fn parse_organic(bytes: &[u8], i: usize) -> Result<(Atom, usize), SmilesError> {
    let next = bytes.get(i + 1).copied();
    let atom = match (bytes[i], next) {
        (b'C', Some(b'l')) => return Ok((Atom::organic(Element::Cl), 2)),
        (b'B', Some(b'r')) => return Ok((Atom::organic(Element::Br), 2)),
        (b'B', _) => Atom::organic(Element::B),
        (b'C', _) => Atom::organic(Element::C),
        (b'N', _) => Atom::organic(Element::N),
        (b'O', _) => Atom::organic(Element::O),
        (b'P', _) => Atom::organic(Element::P),
        (b'S', _) => Atom::organic(Element::S),
        (b'F', _) => Atom::organic(Element::F),
        (b'I', _) => Atom::organic(Element::I),
        (b'b', _) => Atom::aromatic(Element::B),
        (b'c', _) => Atom::aromatic(Element::C),
        (b'n', _) => Atom::aromatic(Element::N),
        (b'o', _) => Atom::aromatic(Element::O),
        (b'p', _) => Atom::aromatic(Element::P),
        (b's', _) => Atom::aromatic(Element::S),
        (ch, _) if ch.is_ascii_alphabetic() => {
            return Err(SmilesError::UnknownAtomSymbol { offset: i })
        }
        _ => return Err(SmilesError::UnexpectedCharacter { offset: i }),
    };
    Ok((atom, 1))
}

/// Parses `[<symbol><H count><charge>]` starting at the `[`.
fn parse_bracket(bytes: &[u8], start: usize) -> Result<(Atom, usize), SmilesError> {
    let close = bytes[start..]
        .iter()
        .position(|&b| b == b']')
        .map(|p| start + p)
        .ok_or(SmilesError::UnexpectedCharacter { offset: start })?;
    let body = &bytes[start + 1..close];
    let at = |k: usize| start + 1 + k;
    let first = *body.first().ok_or(SmilesError::UnknownAtomSymbol { offset: start })?;
    let (element, aromatic, mut k) = if first.is_ascii_lowercase() {
        let sym = (first as char).to_ascii_uppercase().to_string();
        let e = Element::from_symbol(&sym)
            .filter(|e| e.can_be_aromatic())
            .ok_or(SmilesError::UnknownAtomSymbol { offset: at(0) })?;
        (e, true, 1)
    } else if first.is_ascii_uppercase() {
        // prefer the two-letter symbol when it exists
        let two = body
            .get(..2)
            .and_then(|s| std::str::from_utf8(s).ok())
            .and_then(Element::from_symbol)
            .filter(|_| body[1].is_ascii_lowercase());
        match two {
            Some(e) => (e, false, 2),
            None => {
                let e = Element::from_symbol(&(first as char).to_string())
                    .ok_or(SmilesError::UnknownAtomSymbol { offset: at(0) })?;
                (e, false, 1)
            }
        }
    } else {
        return Err(SmilesError::UnknownAtomSymbol { offset: at(0) });
    };

    let mut explicit_h = 0u8;
    if body.get(k) == Some(&b'H') {
        k += 1;
        explicit_h = 1;
        if let Some(d) = body.get(k).filter(|d| d.is_ascii_digit()) {
            explicit_h = d - b'0';
            k += 1;
        }
    }

    let mut charge: i8 = 0;
    if let Some(&sign) = body.get(k).filter(|&&s| s == b'+' || s == b'-') {
        let unit: i8 = if sign == b'+' { 1 } else { -1 };
        k += 1;
        if let Some(d) = body.get(k).filter(|d| d.is_ascii_digit()) {
            charge = unit * (d - b'0') as i8;
            k += 1;
        } else {
            charge = unit;
            while body.get(k) == Some(&sign) {
                charge += unit;
                k += 1;
            }
        }
    }

    if k != body.len() {
        return Err(SmilesError::UnexpectedCharacter { offset: at(k) });
    }
    let atom = Atom {
        element,
        charge,
        explicit_h,
        aromatic,
        bracket: true,
    };
    Ok((atom, close - start + 1))
}

/// Writes a SMILES string by depth-first traversal from the lowest-index
/// atom of each component. Re-parsing yields an isomorphic graph.
pub fn write_smiles(graph: &MolecularGraph) -> String {
    let n = graph.atom_count();
    let mut order = vec![usize::MAX; n];
    let mut parent_bond = vec![None; n];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut ring_bonds: Vec<usize> = Vec::new();
    let mut counter = 0;
    let mut roots = Vec::new();

    // first pass: DFS tree plus back edges
    for root in 0..n {
        if order[root] != usize::MAX {
            continue;
        }
        roots.push(root);
        let mut stack = vec![(root, 0usize)];
        order[root] = counter;
        counter += 1;
        while let Some(top) = stack.last_mut() {
            let u = top.0;
            let nbrs = graph.neighbors(u);
            if top.1 == nbrs.len() {
                stack.pop();
                continue;
            }
            let (v, bi) = nbrs[top.1];
            top.1 += 1;
            if parent_bond[u] == Some(bi) {
                continue;
            }
            if order[v] == usize::MAX {
                order[v] = counter;
                counter += 1;
                parent_bond[v] = Some(bi);
                children[u].push(v);
                stack.push((v, 0));
            } else if order[v] < order[u] && !ring_bonds.contains(&bi) {
                ring_bonds.push(bi);
            }
        }
    }

    // ring closures per atom, in the order their partner was visited
    let mut closures: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &bi in &ring_bonds {
        let b = graph.bonds()[bi];
        closures[b.a].push(bi);
        closures[b.b].push(bi);
    }
    for list in closures.iter_mut() {
        list.sort_by_key(|&bi| {
            let b = graph.bonds()[bi];
            (order[b.a].min(order[b.b]), order[b.a].max(order[b.b]))
        });
    }

    let mut out = String::new();
    let mut digits: BTreeMap<usize, u32> = BTreeMap::new();
    let mut in_use: Vec<u32> = Vec::new();
    for (ri, &root) in roots.iter().enumerate() {
        if ri > 0 {
            out.push('.');
        }
        let mut stack: Vec<Emit> = vec![Emit::Atom(root)];
        while let Some(item) = stack.pop() {
            match item {
                Emit::Close => out.push(')'),
                Emit::Open => out.push('('),
                Emit::Atom(u) => {
                    if let Some(bi) = parent_bond[u] {
                        let b = graph.bonds()[bi];
                        out.push_str(bond_symbol(graph, &b));
                    }
                    write_atom(graph, u, &mut out);
                    for &bi in &closures[u] {
                        if let Some(d) = digits.remove(&bi) {
                            in_use.retain(|&x| x != d);
                            push_ring_label(&mut out, d);
                        } else {
                            let d = (1..).find(|d| !in_use.contains(d)).unwrap_or(1);
                            in_use.push(d);
                            digits.insert(bi, d);
                            let b = graph.bonds()[bi];
                            out.push_str(bond_symbol(graph, &b));
                            push_ring_label(&mut out, d);
                        }
                    }
                    let kids = &children[u];
                    if let Some((&last, rest)) = kids.split_last() {
                        stack.push(Emit::Atom(last));
                        for &k in rest.iter().rev() {
                            stack.push(Emit::Close);
                            stack.push(Emit::Atom(k));
                            stack.push(Emit::Open);
                        }
                    }
                }
            }
        }
    }
    out
}

enum Emit {
    Atom(usize),
    Open,
    Close,
}

fn push_ring_label(out: &mut String, d: u32) {
    if d < 10 {
        out.push(char::from_digit(d, 10).unwrap_or('1'));
    } else {
        out.push_str(&format!("%{d:02}"));
    }
}

fn bond_symbol(graph: &MolecularGraph, bond: &Bond) -> &'static str {
    let both_aromatic = graph.atoms()[bond.a].aromatic && graph.atoms()[bond.b].aromatic;
    match bond.order {
        BondOrder::Single if both_aromatic => "-",
        BondOrder::Single | BondOrder::Aromatic => "",
        BondOrder::Double => "=",
        BondOrder::Triple => "#",
    }
}

fn write_atom(graph: &MolecularGraph, idx: usize, out: &mut String) {
    let atom = &graph.atoms()[idx];
    let sym = atom.label();
    if !atom.bracket && atom.charge == 0 {
        out.push_str(&sym);
        return;
    }
    out.push('[');
    out.push_str(&sym);
    match graph.total_h(idx) {
        0 => {}
        1 => out.push('H'),
        h => out.push_str(&format!("H{h}")),
    }
    match atom.charge {
        0 => {}
        1 => out.push('+'),
        -1 => out.push('-'),
        q if q > 0 => out.push_str(&format!("+{q}")),
        q => out.push_str(&format!("-{}", -q)),
    }
    out.push(']');
}
