use scicore_autograd::{finite_diff_check, GradCheckOptions, ParamStore, SeededRng, Tape};
use scicore_chem::{assign_conformer, parse_smiles, Conformer, FIXTURE_SMILES};
use scicore_core::gvp::{
    gvp_layer, pool_graph, random_rotation, transform_conformer, GvpConfig, GvpEncoder, GvpLayer, GvpState,
    ScalarActivation, VectorGate,
};
use scicore_core::ModelError;

fn encoder() -> (GvpEncoder, ParamStore) {
    let enc = GvpEncoder::new(GvpConfig::default());
    let mut store = ParamStore::new();
    enc.init(&mut store, &mut SeededRng::new(11));
    (enc, store)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn h_geo_invariant_under_rigid_motion() {
    let (enc, store) = encoder();
    let mut rng = SeededRng::new(5);
    let mut worst = 0.0f64;
    for smiles in FIXTURE_SMILES.iter().take(12) {
        let g = parse_smiles(smiles).unwrap();
        let conf = assign_conformer(&g, 3);
        let base = enc.embed(&store, &g, &conf).unwrap();
        for _ in 0..100 {
            let rot = random_rotation(&mut rng);
            let shift = [rng.uniform(-10.0, 10.0), rng.uniform(-10.0, 10.0), rng.uniform(-10.0, 10.0)];
            let moved = transform_conformer(&conf, &rot, shift);
            let e = enc.embed(&store, &g, &moved).unwrap();
            worst = worst.max(max_diff(&base.h_geo, &e.h_geo));
        }
    }
    assert!(worst < 1e-9, "drift {worst}");
}

#[test]
fn node_vectors_rotate_with_coordinates() {
    let (enc, store) = encoder();
    let mut rng = SeededRng::new(9);
    for smiles in ["CCO", "c1ccccc1", "CC(=O)O"] {
        let g = parse_smiles(smiles).unwrap();
        let conf = assign_conformer(&g, 1);
        let state = enc.message_pass(&store, &g, &conf).unwrap();
        let rot = random_rotation(&mut rng);
        let moved = transform_conformer(&conf, &rot, [1.0, -2.0, 0.5]);
        let after = enc.message_pass(&store, &g, &moved).unwrap();
        let expected = state.rotated(&rot);
        assert!(after.vectors.max_abs_diff(&expected.vectors) < 1e-9);
        assert!(after.scalars.max_abs_diff(&state.scalars) < 1e-9);
    }
}

#[test]
fn h_geo_invariant_under_atom_relabeling() {
    let (enc, store) = encoder();
    let mut rng = SeededRng::new(2);
    for smiles in FIXTURE_SMILES {
        let g = parse_smiles(smiles).unwrap();
        let conf = assign_conformer(&g, 4);
        let base = enc.embed(&store, &g, &conf).unwrap();
        let n = g.atom_count();
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let pg = g.permuted(&perm).unwrap();
        let mut coords = vec![[0.0; 3]; n];
        for i in 0..n {
            coords[perm[i]] = conf.coords[i];
        }
        let pc = Conformer { coords, seed: 4 };
        let e = enc.embed(&store, &pg, &pc).unwrap();
        assert!(max_diff(&base.h_geo, &e.h_geo) < 1e-12, "{smiles}");
    }
}

#[test]
fn single_layer_equivariance_random_state() {
    let layer = GvpLayer {
        prefix: "l".into(),
        scalar_in: 3,
        vector_in: 2,
        scalar_out: 4,
        vector_out: 3,
        activation: ScalarActivation::Relu,
        gate: VectorGate::Sigmoid,
    };
    let mut rng = SeededRng::new(1);
    let mut store = ParamStore::new();
    layer.init(&mut store, &mut rng);
    let state = GvpState::new(rng.normal_tensor(&[5, 3], 1.0), rng.normal_tensor(&[15, 2], 1.0)).unwrap();
    let rot = random_rotation(&mut rng);
    let a = gvp_layer(&state.rotated(&rot), &store, &layer).unwrap();
    let b = gvp_layer(&state, &store, &layer).unwrap().rotated(&rot);
    assert!(a.vectors.max_abs_diff(&b.vectors) < 1e-9);
    assert!(a.scalars.max_abs_diff(&b.scalars) < 1e-9);
}

#[test]
fn width_mismatch_is_reported() {
    let layer = GvpLayer {
        prefix: "l".into(),
        scalar_in: 3,
        vector_in: 2,
        scalar_out: 4,
        vector_out: 3,
        activation: ScalarActivation::Relu,
        gate: VectorGate::One,
    };
    let mut store = ParamStore::new();
    layer.init(&mut store, &mut SeededRng::new(0));
    let mut rng = SeededRng::new(1);
    let state = GvpState::new(rng.normal_tensor(&[2, 5], 1.0), rng.normal_tensor(&[6, 2], 1.0)).unwrap();
    assert!(matches!(gvp_layer(&state, &store, &layer), Err(ModelError::ShapeMismatch(_))));
}

#[test]
fn pooling_is_mean_of_scalars() {
    let mut rng = SeededRng::new(3);
    let state = GvpState::new(rng.normal_tensor(&[4, 2], 1.0), rng.normal_tensor(&[12, 1], 1.0)).unwrap();
    let pooled = pool_graph(&state).unwrap();
    for c in 0..2 {
        let m = (0..4).map(|r| state.scalars.get(r, c)).sum::<f64>() / 4.0;
        assert!((pooled[c] - m).abs() < 1e-15);
    }
}

#[test]
fn adapter_hand_example() {
    let enc = GvpEncoder::new(GvpConfig {
        scalar: 2,
        adapter_hidden: 3,
        adapter_out: 2,
        ..GvpConfig::default()
    });
    let mut store = ParamStore::new();
    use scicore_autograd::Tensor;
    store.insert("gvp.adapter.l1.w", Tensor::matrix(2, 3, vec![1.0, -1.0, 0.5, 2.0, 1.0, 0.0]).unwrap());
    store.insert("gvp.adapter.l1.b", Tensor::row(vec![0.0, 0.0, -1.0]));
    store.insert("gvp.adapter.l2.w", Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap());
    store.insert("gvp.adapter.l2.b", Tensor::row(vec![0.5, -0.5]));
    // h = [1, 2]: W1 h + b1 = [5, 1, -0.5] -> relu [5, 1, 0] -> [5.5, 0.5]
    let out = enc.project_adapter(&store, &[1.0, 2.0]).unwrap();
    assert_eq!(out, vec![5.5, 0.5]);
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let enc = GvpEncoder::new(GvpConfig {
        scalar: 6,
        vector: 2,
        layers: 2,
        adapter_hidden: 5,
        adapter_out: 4,
        conformer_seed: 1,
    });
    let mut store = ParamStore::new();
    enc.init(&mut store, &mut SeededRng::new(4));
    let g = parse_smiles("CC(=O)O").unwrap();
    let conf = assign_conformer(&g, 1);
    let report = finite_diff_check::<ModelError, _>(&store, &["gvp."], GradCheckOptions::default(), |tape: &mut Tape, s| {
        let h = enc.h_geo(tape, s, &g, &conf)?;
        let m = enc.adapter_forward(tape, s, h)?;
        let sq = tape.mul(m, m)?;
        let t = tape.tanh(sq);
        Ok(tape.sum(t))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
