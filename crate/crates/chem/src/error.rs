use thiserror::Error;

/// SMILES parse failure. Every variant carries the byte offset of the
/// offending character.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SmilesError {
    #[error("empty SMILES string")]
    Empty,
    #[error("non-ASCII character at offset {offset}")]
    NonAscii { offset: usize },
    #[error("unbalanced parenthesis at offset {offset}")]
    UnbalancedParenthesis { offset: usize },
    #[error("ring closure opened at offset {offset} is never closed")]
    UnclosedRing { offset: usize },
    #[error("unknown atom symbol at offset {offset}")]
    UnknownAtomSymbol { offset: usize },
    #[error("valence violation for atom at offset {offset}")]
    ValenceViolation { offset: usize },
    #[error("aromatic atom outside a ring at offset {offset}")]
    AromaticOutsideRing { offset: usize },
    #[error("invalid bond at offset {offset}")]
    InvalidBond { offset: usize },
    #[error("unexpected character at offset {offset}")]
    UnexpectedCharacter { offset: usize },
}

impl SmilesError {
    pub fn offset(&self) -> Option<usize> {
        match *self {
            SmilesError::Empty => None,
            SmilesError::NonAscii { offset }
            | SmilesError::UnbalancedParenthesis { offset }
            | SmilesError::UnclosedRing { offset }
            | SmilesError::UnknownAtomSymbol { offset }
            | SmilesError::ValenceViolation { offset }
            | SmilesError::AromaticOutsideRing { offset }
            | SmilesError::InvalidBond { offset }
            | SmilesError::UnexpectedCharacter { offset } => Some(offset),
        }
    }
}

/// Violation of a [`crate::MolecularGraph`] invariant.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("graph has no atoms")]
    Empty,
    #[error("bond {bond} references a missing atom")]
    BadEndpoint { bond: usize },
    #[error("atom {atom} is bonded to itself")]
    SelfBond { atom: usize },
    #[error("duplicate bond between atoms {a} and {b}")]
    DuplicateBond { a: usize, b: usize },
    #[error("aromatic bond {bond} joins a non-aromatic atom")]
    AromaticBondMismatch { bond: usize },
    #[error("aromatic atom {atom} is not in a ring")]
    AromaticOutsideRing { atom: usize },
    #[error("valence violation at atom {atom}")]
    Valence { atom: usize },
    #[error("not a permutation of the atom indices")]
    BadPermutation,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FingerprintError {
    #[error("fingerprint widths differ: {0} vs {1}")]
    WidthMismatch(usize, usize),
}
