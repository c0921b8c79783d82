//! Path-based fingerprints and Tanimoto similarity.

use std::collections::BTreeSet;

use crate::error::FingerprintError;
use crate::graph::MolecularGraph;

pub const DEFAULT_WIDTH: usize = 2048;
pub const DEFAULT_MAX_PATH: usize = 7;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Fingerprint {
    words: Vec<u64>,
    width: usize,
    max_path: usize,
}

impl Fingerprint {
    pub fn empty(width: usize, max_path: usize) -> Self {
        Fingerprint {
            words: vec![0; width.div_ceil(64)],
            width,
            max_path,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn max_path(&self) -> usize {
        self.max_path
    }

    pub fn set(&mut self, bit: usize) {
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.width).filter(|&b| self.get(b))
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Bit index for a canonical path string.
pub fn path_bit(path: &str, width: usize) -> usize {
    (fnv1a(path.as_bytes()) % width as u64) as usize
}

/// Canonical form of a path string: the lexicographically smaller of the
/// two reading directions.
pub fn canonical_path(labels: &[String], bonds: &[char]) -> String {
    let fwd = render(labels.iter(), bonds.iter());
    let rev = render(labels.iter().rev(), bonds.iter().rev());
    fwd.min(rev)
}

fn render<'a>(
    mut labels: impl Iterator<Item = &'a String>,
    bonds: impl Iterator<Item = &'a char>,
) -> String {
    let mut s = String::new();
    if let Some(first) = labels.next() {
        s.push_str(first);
    }
    for (b, l) in bonds.zip(labels) {
        s.push(*b);
        s.push_str(l);
    }
    s
}

/// Canonical strings of every simple path with at most `max_path` bonds.
pub fn path_strings(graph: &MolecularGraph, max_path: usize) -> BTreeSet<String> {
    let labels: Vec<String> = graph.atoms().iter().map(|a| a.label()).collect();
    let mut out = BTreeSet::new();
    let n = graph.atom_count();
    let mut on_path = vec![false; n];
    let mut path_atoms: Vec<usize> = Vec::new();
    let mut path_bonds: Vec<char> = Vec::new();

    fn walk(
        graph: &MolecularGraph,
        labels: &[String],
        max_path: usize,
        u: usize,
        on_path: &mut [bool],
        path_atoms: &mut Vec<usize>,
        path_bonds: &mut Vec<char>,
        out: &mut BTreeSet<String>,
    ) {
        on_path[u] = true;
        path_atoms.push(u);
        let ls: Vec<String> = path_atoms.iter().map(|&a| labels[a].clone()).collect();
        out.insert(canonical_path(&ls, path_bonds));
        if path_bonds.len() < max_path {
            for &(v, bi) in graph.neighbors(u) {
                if on_path[v] {
                    continue;
                }
                path_bonds.push(graph.bonds()[bi].order.path_char());
                walk(graph, labels, max_path, v, on_path, path_atoms, path_bonds, out);
                path_bonds.pop();
            }
        }
        path_atoms.pop();
        on_path[u] = false;
    }

    for start in 0..n {
        walk(
            graph,
            &labels,
            max_path,
            start,
            &mut on_path,
            &mut path_atoms,
            &mut path_bonds,
            &mut out,
        );
    }
    out
}

pub fn path_fingerprint(graph: &MolecularGraph) -> Fingerprint {
    path_fingerprint_with(graph, DEFAULT_WIDTH, DEFAULT_MAX_PATH)
}

pub fn path_fingerprint_with(graph: &MolecularGraph, width: usize, max_path: usize) -> Fingerprint {
    let mut fp = Fingerprint::empty(width, max_path);
    for p in path_strings(graph, max_path) {
        fp.set(path_bit(&p, width));
    }
    fp
}

/// |a ∧ b| / |a ∨ b|, 1.0 when both are empty.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64, FingerprintError> {
    if a.width != b.width {
        return Err(FingerprintError::WidthMismatch(a.width, b.width));
    }
    let (mut inter, mut union) = (0u32, 0u32);
    for (x, y) in a.words.iter().zip(&b.words) {
        inter += (x & y).count_ones();
        union += (x | y).count_ones();
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(f64::from(inter) / f64::from(union))
}
