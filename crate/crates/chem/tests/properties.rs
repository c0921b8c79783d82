use std::collections::BTreeSet;

use proptest::prelude::*;
use scicore_chem::{
    assign_conformer, isomorphic, parse_smiles, path_bit, path_fingerprint, tanimoto,
    write_smiles, MolecularGraph, DEFAULT_WIDTH, FIXTURE_SMILES,
};

/// Paths by exhaustive enumeration of ordered atom sequences; independent of
/// the DFS in the library.
fn brute_force_bits(g: &MolecularGraph) -> BTreeSet<usize> {
    let n = g.atom_count();
    let mut bits = BTreeSet::new();
    let mut seq: Vec<usize> = Vec::new();
    fn rec(g: &MolecularGraph, seq: &mut Vec<usize>, bits: &mut BTreeSet<usize>, n: usize) {
        if !seq.is_empty() {
            let label = |i: usize| {
                let a = &g.atoms()[i];
                if a.aromatic {
                    a.element.symbol().to_lowercase()
                } else {
                    a.element.symbol().to_string()
                }
            };
            let render = |order: &[usize]| {
                let mut s = label(order[0]);
                for w in order.windows(2) {
                    let b = g.bond_between(w[0], w[1]).unwrap();
                    s.push(b.order.path_char());
                    s.push_str(&label(w[1]));
                }
                s
            };
            let fwd = render(seq);
            let rev: Vec<usize> = seq.iter().rev().copied().collect();
            let bwd = render(&rev);
            bits.insert(path_bit(fwd.min(bwd).as_str(), DEFAULT_WIDTH));
        }
        if seq.len() == 8 {
            return;
        }
        for v in 0..n {
            if seq.contains(&v) {
                continue;
            }
            if let Some(&last) = seq.last() {
                if g.bond_between(last, v).is_none() {
                    continue;
                }
            }
            seq.push(v);
            rec(g, seq, bits, n);
            seq.pop();
        }
    }
    rec(g, &mut seq, &mut bits, n);
    bits
}

#[test]
fn fingerprints_match_brute_force_on_small_fixtures() {
    let mut checked = 0;
    for s in FIXTURE_SMILES {
        let g = parse_smiles(s).unwrap();
        if g.atom_count() > 8 {
            continue;
        }
        let got: BTreeSet<usize> = path_fingerprint(&g).ones().collect();
        assert_eq!(got, brute_force_bits(&g), "{s}");
        checked += 1;
    }
    assert!(checked >= 10);
}

#[test]
fn fixtures_round_trip() {
    for s in FIXTURE_SMILES {
        let g = parse_smiles(s).unwrap();
        let again = parse_smiles(&write_smiles(&g)).unwrap();
        assert!(isomorphic(&g, &again), "{s}");
        let twice = parse_smiles(&write_smiles(&again)).unwrap();
        assert!(isomorphic(&again, &twice), "{s}");
    }
}

#[test]
fn conformers_deterministic_and_centered() {
    for s in FIXTURE_SMILES {
        let g = parse_smiles(s).unwrap();
        let a = assign_conformer(&g, 42);
        assert_eq!(a.len(), g.atom_count());
        assert_eq!(a, assign_conformer(&g, 42));
        assert!(a.centroid().iter().all(|c| c.abs() < 1e-9), "{s}");
    }
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    // Fisher-Yates with a small LCG so the strategy only supplies a seed
    let mut p: Vec<usize> = (0..n).collect();
    let mut state = seed | 1;
    for i in (1..n).rev() {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let j = (state >> 33) as usize % (i + 1);
        p.swap(i, j);
    }
    p
}

proptest! {
    #[test]
    fn fingerprint_invariant_under_relabeling(idx in 0..FIXTURE_SMILES.len(), seed in any::<u64>()) {
        let g = parse_smiles(FIXTURE_SMILES[idx]).unwrap();
        let perm = shuffled(g.atom_count(), seed);
        let h = g.permuted(&perm).unwrap();
        prop_assert_eq!(path_fingerprint(&g), path_fingerprint(&h));
        prop_assert!(isomorphic(&g, &h));
        let back = parse_smiles(&write_smiles(&h)).unwrap();
        prop_assert!(isomorphic(&g, &back));
    }

    #[test]
    fn tanimoto_is_a_similarity(a in 0..FIXTURE_SMILES.len(), b in 0..FIXTURE_SMILES.len()) {
        let fa = path_fingerprint(&parse_smiles(FIXTURE_SMILES[a]).unwrap());
        let fb = path_fingerprint(&parse_smiles(FIXTURE_SMILES[b]).unwrap());
        let ab = tanimoto(&fa, &fb).unwrap();
        prop_assert_eq!(ab, tanimoto(&fb, &fa).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(tanimoto(&fa, &fa).unwrap(), 1.0);
    }

    #[test]
    fn parser_never_panics(s in "[CNOcnos()=#1-3\\[\\]H+\\-]{1,12}") {
        if let Ok(g) = parse_smiles(&s) {
            let back = parse_smiles(&write_smiles(&g)).unwrap();
            prop_assert!(isomorphic(&g, &back));
        }
    }
}
