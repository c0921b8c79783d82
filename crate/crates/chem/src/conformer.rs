//! Deterministic 3D layout by seeded spring relaxation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::MolecularGraph;

pub const BOND_REST_LENGTH: f64 = 1.5;
pub const RELAX_ITERATIONS: usize = 200;
pub const RELAX_STEP: f64 = 0.05;
/// Non-bonded pairs closer than this are pushed apart.
pub const REPULSION_RANGE: f64 = 2.5;
pub const REPULSION_STRENGTH: f64 = 0.5;

/// Per-atom 3D coordinates in layout units, centered on the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Conformer {
    pub coords: Vec<[f64; 3]>,
    pub seed: u64,
}

impl Conformer {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        centroid(&self.coords)
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        norm(sub(self.coords[i], self.coords[j]))
    }
}

/// Seeded random start, fixed-iteration gradient descent on a harmonic bond
/// term plus a soft short-range repulsion between non-bonded pairs, then
/// centroid centering.
pub fn assign_conformer(graph: &MolecularGraph, seed: u64) -> Conformer {
    let n = graph.atom_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = BOND_REST_LENGTH * (n as f64).cbrt();
    let mut x: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0) * spread,
                rng.random_range(-1.0..1.0) * spread,
                rng.random_range(-1.0..1.0) * spread,
            ]
        })
        .collect();

    let mut bonded = vec![vec![false; n]; n];
    for b in graph.bonds() {
        bonded[b.a][b.b] = true;
        bonded[b.b][b.a] = true;
    }

    let mut grad = vec![[0.0; 3]; n];
    for _ in 0..RELAX_ITERATIONS {
        grad.iter_mut().for_each(|g| *g = [0.0; 3]);
        for i in 0..n {
            for j in i + 1..n {
                let d = sub(x[i], x[j]);
                let r = norm(d);
                if r < 1e-12 {
                    continue;
                }
                // dE/dr for the pair
                let dedr = if bonded[i][j] {
                    2.0 * (r - BOND_REST_LENGTH)
                } else if r < REPULSION_RANGE {
                    -2.0 * REPULSION_STRENGTH * (REPULSION_RANGE - r)
                } else {
                    continue;
                };
                for k in 0..3 {
                    let g = dedr * d[k] / r;
                    grad[i][k] += g;
                    grad[j][k] -= g;
                }
            }
        }
        for (xi, gi) in x.iter_mut().zip(&grad) {
            for k in 0..3 {
                xi[k] -= RELAX_STEP * gi[k];
            }
        }
    }

    let c = centroid(&x);
    for xi in x.iter_mut() {
        for k in 0..3 {
            xi[k] -= c[k];
        }
    }
    Conformer { coords: x, seed }
}

fn centroid(x: &[[f64; 3]]) -> [f64; 3] {
    let n = x.len().max(1) as f64;
    let mut c = [0.0; 3];
    for xi in x {
        for k in 0..3 {
            c[k] += xi[k];
        }
    }
    c.map(|v| v / n)
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}
