//! Geometric vector perceptron encoder over a molecular graph with a 3D
//! conformer, plus the MLP adapter into the language model's hidden space.
//!
//! Vector features of `N` nodes with `nu` channels are stored as a
//! `(3N) x nu` matrix: rows `3n..3n+3` hold the x, y, z components of node
//! `n`. Channel mixing right-multiplies this layout, norms are taken over
//! row triples, and gates are repeated over row triples, so every operation
//! commutes with a rotation applied to each triple.

use scicore_autograd::{ParamStore, SeededRng, Tape, Tensor, Var};
use scicore_chem::{assign_conformer, parse_smiles, Conformer, Element, MolecularGraph};

use crate::error::{smiles_err, ModelError, Result};
use crate::nn::Linear;

/// One-hot element (10), formal charge, aromatic flag, ring flag.
pub const ATOM_FEATURES: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarActivation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VectorGate {
    /// `g = sigmoid(s' W_g + b_g)` per vector channel.
    Sigmoid,
    /// `g = 1`.
    One,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GvpState {
    /// `N x n_s`
    pub scalars: Tensor,
    /// `(3N) x nu`
    pub vectors: Tensor,
}

impl GvpState {
    pub fn new(scalars: Tensor, vectors: Tensor) -> Result<Self> {
        if vectors.rows() != 3 * scalars.rows() {
            return Err(ModelError::WidthMismatch {
                expected: 3 * scalars.rows(),
                got: vectors.rows(),
            });
        }
        Ok(GvpState { scalars, vectors })
    }

    pub fn nodes(&self) -> usize {
        self.scalars.rows()
    }

    pub fn vector(&self, node: usize, channel: usize) -> [f64; 3] {
        [0, 1, 2].map(|k| self.vectors.get(3 * node + k, channel))
    }

    /// Applies `rot` to every vector feature.
    pub fn rotated(&self, rot: &[[f64; 3]; 3]) -> GvpState {
        let mut vectors = self.vectors.clone();
        let nu = vectors.cols();
        for n in 0..self.nodes() {
            for c in 0..nu {
                let v = self.vector(n, c);
                let r = apply(rot, v);
                for k in 0..3 {
                    vectors.set(3 * n + k, c, r[k]);
                }
            }
        }
        GvpState {
            scalars: self.scalars.clone(),
            vectors,
        }
    }
}

/// One GVP layer. Parameters: `<prefix>.wv` (nu_in x nu_out),
/// `<prefix>.ws` ((s_in + nu_out) x s_out), `<prefix>.bs` (1 x s_out) and,
/// with a sigmoid gate, `<prefix>.wg` (s_out x nu_out), `<prefix>.bg`.
#[derive(Debug, Clone)]
pub struct GvpLayer {
    pub prefix: String,
    pub scalar_in: usize,
    pub vector_in: usize,
    pub scalar_out: usize,
    pub vector_out: usize,
    pub activation: ScalarActivation,
    pub gate: VectorGate,
}

impl GvpLayer {
    fn name(&self, p: &str) -> String {
        format!("{}.{p}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) {
        store.init_glorot(&self.name("wv"), self.vector_in, self.vector_out, rng);
        store.init_glorot(
            &self.name("ws"),
            self.scalar_in + self.vector_out,
            self.scalar_out,
            rng,
        );
        store.init_zeros(&self.name("bs"), &[1, self.scalar_out]);
        if self.gate == VectorGate::Sigmoid {
            store.init_glorot(&self.name("wg"), self.scalar_out, self.vector_out, rng);
            store.init_zeros(&self.name("bg"), &[1, self.vector_out]);
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, s: Var, v: Var) -> Result<(Var, Var)> {
        let (n, s_in) = tape.value(s).dims2()?;
        let (vr, nu_in) = tape.value(v).dims2()?;
        if s_in != self.scalar_in || nu_in != self.vector_in || vr != 3 * n {
            return Err(ModelError::ShapeMismatch(format!(
                "{} expects {}N scalars and {}x3N vectors, got {}x{} and {}x{}",
                self.prefix, self.scalar_in, self.vector_in, n, s_in, vr, nu_in
            )));
        }
        let wv = tape.param(store, &self.name("wv"))?;
        let vh = tape.matmul(v, wv)?;
        let norms = tape.group_norm(vh, 3)?;
        let cat = tape.hcat(&[s, norms])?;
        let ws = tape.param(store, &self.name("ws"))?;
        let bs = tape.param(store, &self.name("bs"))?;
        let pre = tape.matmul(cat, ws)?;
        let pre = tape.add(pre, bs)?;
        let s_out = match self.activation {
            ScalarActivation::Relu => tape.relu(pre),
            ScalarActivation::Identity => pre,
        };
        let v_out = match self.gate {
            VectorGate::One => vh,
            VectorGate::Sigmoid => {
                let wg = tape.param(store, &self.name("wg"))?;
                let bg = tape.param(store, &self.name("bg"))?;
                let g = tape.matmul(s_out, wg)?;
                let g = tape.add(g, bg)?;
                let g = tape.sigmoid(g);
                let g3 = tape.repeat_rows(g, 3)?;
                tape.mul(g3, vh)?
            }
        };
        Ok((s_out, v_out))
    }
}

/// Applies a single layer to a state outside of any training tape.
pub fn gvp_layer(state: &GvpState, store: &ParamStore, layer: &GvpLayer) -> Result<GvpState> {
    let mut tape = Tape::new();
    let s = tape.constant(state.scalars.clone());
    let v = tape.constant(state.vectors.clone());
    let (s2, v2) = layer.forward(&mut tape, store, s, v)?;
    GvpState::new(tape.value(s2).clone(), tape.value(v2).clone())
}

/// Mean of node scalar features.
pub fn pool_graph(state: &GvpState) -> Result<Vec<f64>> {
    let n = state.nodes();
    if n == 0 || state.scalars.is_empty() {
        return Err(ModelError::EmptyGraph);
    }
    let c = state.scalars.cols();
    let mut out = vec![0.0; c];
    for i in 0..n {
        for (o, x) in out.iter_mut().zip(state.scalars.row_slice(i)) {
            *o += x;
        }
    }
    Ok(out.into_iter().map(|x| x / n as f64).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GvpConfig {
    pub scalar: usize,
    pub vector: usize,
    pub layers: usize,
    pub adapter_hidden: usize,
    pub adapter_out: usize,
    /// Seed used for the conformer of every embedded molecule.
    pub conformer_seed: u64,
}

impl Default for GvpConfig {
    fn default() -> Self {
        GvpConfig {
            scalar: 32,
            vector: 4,
            layers: 4,
            adapter_hidden: 128,
            adapter_out: 64,
            conformer_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoleculeEmbedding {
    pub h_geo: Vec<f64>,
    pub h_mol: Vec<f64>,
}

/// Message-passing encoder: each layer sees `[s_i | mean_j s_j]` and
/// `[V_i | mean_j V_j | mean_j unit(x_j - x_i)]` over bonded neighbours `j`.
#[derive(Debug, Clone)]
pub struct GvpEncoder {
    pub config: GvpConfig,
}

pub const GVP_PREFIX: &str = "gvp.";

impl GvpEncoder {
    pub fn new(config: GvpConfig) -> Self {
        GvpEncoder { config }
    }

    pub fn layer(&self, l: usize) -> GvpLayer {
        let (s_in, v_in) = if l == 0 {
            (ATOM_FEATURES, 1)
        } else {
            (self.config.scalar, self.config.vector)
        };
        GvpLayer {
            prefix: format!("gvp.layer{l}"),
            scalar_in: 2 * s_in,
            vector_in: 2 * v_in + 1,
            scalar_out: self.config.scalar,
            vector_out: self.config.vector,
            activation: ScalarActivation::Relu,
            gate: VectorGate::Sigmoid,
        }
    }

    fn adapter(&self) -> (Linear, Linear) {
        (
            Linear::new("gvp.adapter.l1", self.config.scalar, self.config.adapter_hidden),
            Linear::new("gvp.adapter.l2", self.config.adapter_hidden, self.config.adapter_out),
        )
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) {
        for l in 0..self.config.layers {
            self.layer(l).init(store, rng);
        }
        let (a, b) = self.adapter();
        a.init(store, rng);
        b.init(store, rng);
    }

    /// Final node states `(N x scalar, 3N x vector)` on `tape`.
    pub fn node_states(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        graph: &MolecularGraph,
        conformer: &Conformer,
    ) -> Result<(Var, Var)> {
        let n = graph.atom_count();
        if n == 0 {
            return Err(ModelError::EmptyGraph);
        }
        if conformer.len() != n {
            return Err(ModelError::ConformerMismatch {
                atoms: n,
                coords: conformer.len(),
            });
        }
        let inputs = GraphInputs::build(graph, conformer)?;
        let agg = tape.constant(inputs.mean_scalar);
        let agg3 = tape.constant(inputs.mean_vector);
        let dirs = tape.constant(inputs.mean_direction);
        let mut s = tape.constant(inputs.features);
        let mut v = tape.constant(inputs.initial_vectors);
        for l in 0..self.config.layers {
            let ms = tape.matmul(agg, s)?;
            let mv = tape.matmul(agg3, v)?;
            let s_in = tape.hcat(&[s, ms])?;
            let v_in = tape.hcat(&[v, mv, dirs])?;
            let (s2, v2) = self.layer(l).forward(tape, store, s_in, v_in)?;
            s = s2;
            v = v2;
        }
        Ok((s, v))
    }

    /// Pooled graph embedding `h_geo` (1 x scalar).
    pub fn h_geo(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        graph: &MolecularGraph,
        conformer: &Conformer,
    ) -> Result<Var> {
        let (s, _) = self.node_states(tape, store, graph, conformer)?;
        Ok(tape.mean_rows(s)?)
    }

    /// `W2 relu(W1 h + b1) + b2`.
    pub fn adapter_forward(&self, tape: &mut Tape, store: &ParamStore, h_geo: Var) -> Result<Var> {
        let (a, b) = self.adapter();
        let h = a.forward(tape, store, h_geo)?;
        let h = tape.relu(h);
        b.forward(tape, store, h)
    }

    pub fn message_pass(&self, store: &ParamStore, graph: &MolecularGraph, conformer: &Conformer) -> Result<GvpState> {
        let mut tape = Tape::new();
        let (s, v) = self.node_states(&mut tape, store, graph, conformer)?;
        GvpState::new(tape.value(s).clone(), tape.value(v).clone())
    }

    pub fn project_adapter(&self, store: &ParamStore, h_geo: &[f64]) -> Result<Vec<f64>> {
        if h_geo.len() != self.config.scalar {
            return Err(ModelError::WidthMismatch {
                expected: self.config.scalar,
                got: h_geo.len(),
            });
        }
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::row(h_geo.to_vec()));
        let out = self.adapter_forward(&mut tape, store, h)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn embed(&self, store: &ParamStore, graph: &MolecularGraph, conformer: &Conformer) -> Result<MoleculeEmbedding> {
        let state = self.message_pass(store, graph, conformer)?;
        let h_geo = pool_graph(&state)?;
        let h_mol = self.project_adapter(store, &h_geo)?;
        Ok(MoleculeEmbedding { h_geo, h_mol })
    }

    /// Parses `smiles`, assigns the configured conformer and embeds it.
    pub fn embed_smiles(&self, store: &ParamStore, smiles: &str) -> Result<MoleculeEmbedding> {
        let graph = parse_smiles(smiles).map_err(smiles_err(smiles))?;
        let conf = assign_conformer(&graph, self.config.conformer_seed);
        self.embed(store, &graph, &conf)
    }

    /// `(h_geo, h_mol)` for `smiles` on `tape`.
    pub fn embed_on_tape(&self, tape: &mut Tape, store: &ParamStore, smiles: &str) -> Result<(Var, Var)> {
        let graph = parse_smiles(smiles).map_err(smiles_err(smiles))?;
        let conf = assign_conformer(&graph, self.config.conformer_seed);
        let h = self.h_geo(tape, store, &graph, &conf)?;
        let m = self.adapter_forward(tape, store, h)?;
        Ok((h, m))
    }
}

pub fn atom_features(graph: &MolecularGraph) -> Tensor {
    let n = graph.atom_count();
    let mut t = Tensor::zeros(&[n.max(1), ATOM_FEATURES]);
    for (i, atom) in graph.atoms().iter().enumerate() {
        t.set(i, element_slot(atom.element), 1.0);
        t.set(i, 10, f64::from(atom.charge));
        t.set(i, 11, if atom.aromatic { 1.0 } else { 0.0 });
        t.set(i, 12, if graph.is_ring_atom(i) { 1.0 } else { 0.0 });
    }
    t
}

fn element_slot(e: Element) -> usize {
    Element::ALL.iter().position(|&x| x == e).unwrap_or(0)
}

struct GraphInputs {
    features: Tensor,
    initial_vectors: Tensor,
    mean_direction: Tensor,
    mean_scalar: Tensor,
    mean_vector: Tensor,
}

impl GraphInputs {
    fn build(graph: &MolecularGraph, conformer: &Conformer) -> Result<Self> {
        let n = graph.atom_count();
        let mut initial = Tensor::zeros(&[3 * n, 1]);
        let mut mean_dir = Tensor::zeros(&[3 * n, 1]);
        let mut a = Tensor::zeros(&[n, n]);
        let mut a3 = Tensor::zeros(&[3 * n, 3 * n]);
        for i in 0..n {
            let nbrs = graph.neighbors(i);
            if nbrs.is_empty() {
                continue;
            }
            let w = 1.0 / nbrs.len() as f64;
            let mut sum = [0.0; 3];
            for &(j, _) in nbrs {
                let d = [0, 1, 2].map(|k| conformer.coords[j][k] - conformer.coords[i][k]);
                let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                if len > 0.0 {
                    for k in 0..3 {
                        sum[k] += d[k] / len;
                    }
                }
                a.set(i, j, w);
                for k in 0..3 {
                    a3.set(3 * i + k, 3 * j + k, w);
                }
            }
            for k in 0..3 {
                initial.set(3 * i + k, 0, sum[k]);
                mean_dir.set(3 * i + k, 0, sum[k] * w);
            }
        }
        Ok(GraphInputs {
            features: atom_features(graph),
            initial_vectors: initial,
            mean_direction: mean_dir,
            mean_scalar: a,
            mean_vector: a3,
        })
    }
}

pub fn apply(rot: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| rot[r][0] * v[0] + rot[r][1] * v[1] + rot[r][2] * v[2])
}

/// Uniformly distributed rotation from a random unit quaternion.
pub fn random_rotation(rng: &mut SeededRng) -> [[f64; 3]; 3] {
    let mut q = [rng.normal(), rng.normal(), rng.normal(), rng.normal()];
    let len = q.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    q.iter_mut().for_each(|x| *x /= len);
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// `x -> R x + t` for every coordinate.
pub fn transform_conformer(conf: &Conformer, rot: &[[f64; 3]; 3], shift: [f64; 3]) -> Conformer {
    Conformer {
        coords: conf
            .coords
            .iter()
            .map(|&c| {
                let r = apply(rot, c);
                [r[0] + shift[0], r[1] + shift[1], r[2] + shift[2]]
            })
            .collect(),
        seed: conf.seed,
    }
}
