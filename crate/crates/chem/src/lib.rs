//! Small-molecule toolkit: a SMILES subset reader/writer with valence
//! checking, path fingerprints with Tanimoto similarity, and a deterministic
//! spring-relaxation conformer.

mod conformer;
mod error;
mod fingerprint;
mod graph;
mod smiles;

pub use conformer::{assign_conformer, Conformer, BOND_REST_LENGTH};
pub use error::{FingerprintError, GraphError, SmilesError};
pub use fingerprint::{
    canonical_path, fnv1a, path_bit, path_fingerprint, path_fingerprint_with, path_strings,
    tanimoto, Fingerprint, DEFAULT_MAX_PATH, DEFAULT_WIDTH,
};
pub use graph::{isomorphic, Atom, Bond, BondOrder, Element, MolecularGraph};
pub use smiles::{check_validity, parse_smiles, write_smiles};

/// Molecules used across the test suites and toy corpora.
pub const FIXTURE_SMILES: &[&str] = &[
    "C",
    "CC",
    "CCO",
    "CC=O",
    "CC#N",
    "OCCO",
    "CC(C)O",
    "CC(=O)O",
    "CCN",
    "CCCC",
    "C1CCCCC1",
    "c1ccccc1",
    "c1ccncc1",
    "c1ccoc1",
    "Cc1ccccc1",
    "Oc1ccccc1",
    "CC(=O)[O-]",
    "[NH4+]",
    "ClCCl",
    "FC(F)F",
    "CCBr",
    "c1cc[nH]c1",
    "NC(=O)N",
    "CC(C)(C)O",
];
