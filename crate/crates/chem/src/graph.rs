//! Molecular graph: atoms, bonds, valence bookkeeping and ring perception.

use std::fmt;

use crate::error::GraphError;

/// Elements supported by the SMILES subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Element {
    B,
    C,
    N,
    O,
    P,
    S,
    F,
    Cl,
    Br,
    I,
}

impl Element {
    pub const ALL: [Element; 10] = [
        Element::B,
        Element::C,
        Element::N,
        Element::O,
        Element::P,
        Element::S,
        Element::F,
        Element::Cl,
        Element::Br,
        Element::I,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            Element::B => "B",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::P => "P",
            Element::S => "S",
            Element::F => "F",
            Element::Cl => "Cl",
            Element::Br => "Br",
            Element::I => "I",
        }
    }

    pub fn from_symbol(sym: &str) -> Option<Element> {
        Element::ALL.iter().copied().find(|e| e.symbol() == sym)
    }

    pub fn atomic_number(self) -> u8 {
        match self {
            Element::B => 5,
            Element::C => 6,
            Element::N => 7,
            Element::O => 8,
            Element::F => 9,
            Element::P => 15,
            Element::S => 16,
            Element::Cl => 17,
            Element::Br => 35,
            Element::I => 53,
        }
    }

    /// Position in [`Element::ALL`]; used for one-hot features.
    pub fn index(self) -> usize {
        Element::ALL.iter().position(|&e| e == self).unwrap_or(0)
    }

    /// Standard valence of the neutral element.
    pub fn standard_valence(self) -> i32 {
        match self {
            Element::B => 3,
            Element::C => 4,
            Element::N => 3,
            Element::O => 2,
            Element::P => 3,
            Element::S => 2,
            Element::F | Element::Cl | Element::Br | Element::I => 1,
        }
    }

    /// Whether the lowercase (aromatic) spelling is allowed.
    pub fn can_be_aromatic(self) -> bool {
        matches!(
            self,
            Element::B | Element::C | Element::N | Element::O | Element::P | Element::S
        )
    }

    /// Valence expected for a given formal charge. Pnictogens and chalcogens
    /// gain a bond per positive charge, boron gains one per negative charge,
    /// carbon and halogens lose one per unit of charge either way.
    pub fn target_valence(self, charge: i8) -> i32 {
        let base = self.standard_valence();
        let q = i32::from(charge);
        match self {
            Element::N | Element::O | Element::P | Element::S => base + q,
            Element::B => base - q,
            _ => base - q.abs(),
        }
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Contribution to the valence sum. Aromatic bonds count as one; the
    /// shared pi electron is handled per atom.
    pub fn valence(self) -> i32 {
        match self {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }

    /// Character used in path strings.
    pub fn path_char(self) -> char {
        match self {
            BondOrder::Single => '-',
            BondOrder::Double => '=',
            BondOrder::Triple => '#',
            BondOrder::Aromatic => ':',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Atom {
    pub element: Element,
    pub charge: i8,
    /// Hydrogens written inside a bracket atom. Always zero for
    /// organic-subset atoms.
    pub explicit_h: u8,
    pub aromatic: bool,
    /// Written as a bracket atom: no implicit hydrogens are added.
    pub bracket: bool,
}

impl Atom {
    pub fn organic(element: Element) -> Self {
        Atom {
            element,
            charge: 0,
            explicit_h: 0,
            aromatic: false,
            bracket: false,
        }
    }

    pub fn aromatic(element: Element) -> Self {
        Atom {
            aromatic: true,
            ..Atom::organic(element)
        }
    }

    /// Label used in fingerprint path strings: lowercase when aromatic.
    pub fn label(&self) -> String {
        if self.aromatic {
            self.element.symbol().to_ascii_lowercase()
        } else {
            self.element.symbol().to_string()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
}

impl Bond {
    pub fn other(&self, atom: usize) -> usize {
        if self.a == atom {
            self.b
        } else {
            self.a
        }
    }
}

/// A validated molecular graph. Construct through [`MolecularGraph::new`] or
/// [`crate::parse_smiles`]; both enforce the structural and valence
/// invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct MolecularGraph {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    implicit_h: Vec<u8>,
    adjacency: Vec<Vec<(usize, usize)>>,
    ring_bond: Vec<bool>,
    source: String,
}

impl MolecularGraph {
    pub fn new(atoms: Vec<Atom>, bonds: Vec<Bond>) -> Result<Self, GraphError> {
        Self::with_source(atoms, bonds, String::new())
    }

    pub(crate) fn with_source(
        atoms: Vec<Atom>,
        bonds: Vec<Bond>,
        source: String,
    ) -> Result<Self, GraphError> {
        let n = atoms.len();
        if n == 0 {
            return Err(GraphError::Empty);
        }
        let mut adjacency = vec![Vec::new(); n];
        for (bi, bond) in bonds.iter().enumerate() {
            if bond.a >= n || bond.b >= n {
                return Err(GraphError::BadEndpoint { bond: bi });
            }
            if bond.a == bond.b {
                return Err(GraphError::SelfBond { atom: bond.a });
            }
            if adjacency[bond.a].iter().any(|&(nb, _)| nb == bond.b) {
                return Err(GraphError::DuplicateBond {
                    a: bond.a,
                    b: bond.b,
                });
            }
            if bond.order == BondOrder::Aromatic
                && !(atoms[bond.a].aromatic && atoms[bond.b].aromatic)
            {
                return Err(GraphError::AromaticBondMismatch { bond: bi });
            }
            adjacency[bond.a].push((bond.b, bi));
            adjacency[bond.b].push((bond.a, bi));
        }
        let ring_bond = perceive_ring_bonds(n, &bonds, &adjacency);

        let mut implicit_h = vec![0u8; n];
        for (i, atom) in atoms.iter().enumerate() {
            if atom.aromatic {
                if !atom.element.can_be_aromatic() {
                    return Err(GraphError::Valence { atom: i });
                }
                let in_ring = adjacency[i].iter().any(|&(_, bi)| ring_bond[bi]);
                if !in_ring {
                    return Err(GraphError::AromaticOutsideRing { atom: i });
                }
            }
            let used: i32 = adjacency[i]
                .iter()
                .map(|&(_, bi)| bonds[bi].order.valence())
                .sum::<i32>()
                + i32::from(atom.explicit_h);
            let target = atom.element.target_valence(atom.charge);
            let h = match (atom.bracket, atom.aromatic) {
                (true, false) => {
                    if used != target {
                        return Err(GraphError::Valence { atom: i });
                    }
                    0
                }
                (true, true) => {
                    if used > target {
                        return Err(GraphError::Valence { atom: i });
                    }
                    0
                }
                (false, false) => {
                    if used > target {
                        return Err(GraphError::Valence { atom: i });
                    }
                    target - used
                }
                // one valence unit goes to the delocalized pi system when
                // available (benzene carbon keeps one H, furan oxygen none)
                (false, true) => {
                    if used > target {
                        return Err(GraphError::Valence { atom: i });
                    }
                    (target - used - 1).max(0)
                }
            };
            implicit_h[i] = u8::try_from(h).map_err(|_| GraphError::Valence { atom: i })?;
        }

        Ok(MolecularGraph {
            atoms,
            bonds,
            implicit_h,
            adjacency,
            ring_bond,
            source,
        })
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    /// Original SMILES text, empty for graphs built in code.
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn implicit_h(&self, atom: usize) -> u8 {
        self.implicit_h[atom]
    }

    pub fn total_h(&self, atom: usize) -> u8 {
        self.implicit_h[atom] + self.atoms[atom].explicit_h
    }

    /// `(neighbor, bond index)` pairs in insertion order.
    pub fn neighbors(&self, atom: usize) -> &[(usize, usize)] {
        &self.adjacency[atom]
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<&Bond> {
        self.adjacency[a]
            .iter()
            .find(|&&(nb, _)| nb == b)
            .map(|&(_, bi)| &self.bonds[bi])
    }

    pub fn is_ring_bond(&self, bond: usize) -> bool {
        self.ring_bond[bond]
    }

    pub fn is_ring_atom(&self, atom: usize) -> bool {
        self.adjacency[atom].iter().any(|&(_, bi)| self.ring_bond[bi])
    }

    /// Relabel atoms: atom `i` of `self` becomes atom `perm[i]` of the result.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, GraphError> {
        let n = self.atoms.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(GraphError::BadPermutation);
        }
        let mut atoms = vec![Atom::organic(Element::C); n];
        for (i, atom) in self.atoms.iter().enumerate() {
            atoms[perm[i]] = atom.clone();
        }
        let bonds = self
            .bonds
            .iter()
            .map(|b| Bond {
                a: perm[b.a],
                b: perm[b.b],
                order: b.order,
            })
            .collect();
        Self::with_source(atoms, bonds, self.source.clone())
    }
}

/// A bond lies on a ring iff its endpoints stay connected once it is removed.
fn perceive_ring_bonds(n: usize, bonds: &[Bond], adjacency: &[Vec<(usize, usize)>]) -> Vec<bool> {
    let mut out = vec![false; bonds.len()];
    let mut seen = vec![false; n];
    let mut stack = Vec::new();
    for (bi, bond) in bonds.iter().enumerate() {
        seen.iter_mut().for_each(|s| *s = false);
        stack.clear();
        stack.push(bond.a);
        seen[bond.a] = true;
        while let Some(u) = stack.pop() {
            for &(v, vb) in &adjacency[u] {
                if vb != bi && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        out[bi] = seen[bond.b];
    }
    out
}

/// Backtracking isomorphism test on atom labels (element, charge, total H,
/// aromaticity) and bond orders.
pub fn isomorphic(g: &MolecularGraph, h: &MolecularGraph) -> bool {
    let n = g.atom_count();
    if n != h.atom_count() || g.bonds.len() != h.bonds.len() {
        return false;
    }
    let key = |m: &MolecularGraph, i: usize| {
        let a = &m.atoms[i];
        (a.element, a.charge, m.total_h(i), a.aromatic, m.adjacency[i].len())
    };
    let mut gk: Vec<_> = (0..n).map(|i| key(g, i)).collect();
    let mut hk: Vec<_> = (0..n).map(|i| key(h, i)).collect();
    gk.sort();
    hk.sort();
    if gk != hk {
        return false;
    }

    fn extend(
        g: &MolecularGraph,
        h: &MolecularGraph,
        map: &mut Vec<Option<usize>>,
        used: &mut Vec<bool>,
        next: usize,
        key: &dyn Fn(&MolecularGraph, usize) -> (Element, i8, u8, bool, usize),
    ) -> bool {
        if next == map.len() {
            return true;
        }
        for cand in 0..map.len() {
            if used[cand] || key(g, next) != key(h, cand) {
                continue;
            }
            let consistent = g.adjacency[next].iter().all(|&(nb, bi)| match map[nb] {
                Some(mapped) => h
                    .bond_between(cand, mapped)
                    .is_some_and(|hb| hb.order == g.bonds[bi].order),
                None => true,
            });
            if !consistent {
                continue;
            }
            map[next] = Some(cand);
            used[cand] = true;
            if extend(g, h, map, used, next + 1, key) {
                return true;
            }
            map[next] = None;
            used[cand] = false;
        }
        false
    }

    let mut map = vec![None; n];
    let mut used = vec![false; n];
    extend(g, h, &mut map, &mut used, 0, &key)
}
