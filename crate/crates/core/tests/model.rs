mod common;

use scicore_autograd::{SeededRng, Tape, Tensor};
use scicore_core::diffusion::GuidanceConfig;
use scicore_core::lm::{
    tokenize, LmExample, DISPATCH_GENERATE, DISPATCH_PERCEIVE, DISPATCH_REACT, EOS, MOL_CLOSE, MOL_OPEN, VOCAB_SIZE,
};
use scicore_core::model::{DecodeOptions, DispatchEvent, ReactTask};
use scicore_core::ModelError;

use common::{tiny_model, toy_reactions};

fn options(forced: &[usize]) -> DecodeOptions {
    DecodeOptions {
        max_new_tokens: 48,
        guidance: GuidanceConfig { scale: 1.0, steps: 10 },
        forced: forced.iter().map(|&t| Some(t)).collect(),
        ..DecodeOptions::default()
    }
}

#[test]
fn forced_eos_gives_an_empty_continuation() {
    let (model, store) = tiny_model(1);
    let prompt = tokenize("hello").unwrap();
    let g = model
        .generate_with_dispatch(&store, &prompt, &options(&[EOS]), &mut SeededRng::new(0))
        .unwrap();
    assert!(g.tokens.is_empty());
    assert_eq!(g.text, "");
    assert!(g.events.is_empty());
    assert!(!g.truncated);
}

#[test]
fn forced_generate_dispatch_emits_one_molecule_span() {
    let (model, store) = tiny_model(2);
    let prompt = tokenize("Design a molecule: small aromatic ring").unwrap();
    let run = || {
        model
            .generate_with_dispatch(&store, &prompt, &options(&[DISPATCH_GENERATE, EOS]), &mut SeededRng::new(5))
            .unwrap()
    };
    let g = run();
    assert_eq!(g.events.len(), 1);
    let DispatchEvent::Generate { smiles, valid } = &g.events[0] else {
        panic!("{:?}", g.events)
    };
    assert_eq!(g.text, format!("<d:generate><mol>{smiles}</mol>"));
    assert_eq!(g.tokens[0], DISPATCH_GENERATE);
    assert_eq!(g.tokens[1], MOL_OPEN);
    assert_eq!(*g.tokens.last().unwrap(), MOL_CLOSE);
    assert_eq!(g.injected, usize::from(*valid));
    assert_eq!(run(), g);
}

#[test]
fn forced_react_dispatch_returns_a_library_product_and_yield() {
    let (model, store) = tiny_model(3);
    let records = toy_reactions();
    let library: Vec<String> = records.iter().map(|r| r.molecules.last().unwrap().smiles.clone()).collect();
    let opts = DecodeOptions {
        library: library.clone(),
        reaction: Some(records[0].clone()),
        ..options(&[DISPATCH_REACT, EOS])
    };
    let prompt = tokenize("What forms?").unwrap();
    let g = model.generate_with_dispatch(&store, &prompt, &opts, &mut SeededRng::new(0)).unwrap();
    assert_eq!(g.events.len(), 1);
    let DispatchEvent::React { product, yield_percent } = &g.events[0] else {
        panic!("{:?}", g.events)
    };
    assert!(library.contains(product));
    assert!((0.0..=100.0).contains(yield_percent));
    assert!(g.text.starts_with(&format!("<d:react><mol>{product}</mol> (")));
    assert_eq!(g.injected, 1);

    let from_context = DecodeOptions {
        library,
        ..options(&[DISPATCH_REACT, EOS])
    };
    let prompt = tokenize("Combine <mol>CCO</mol> and <mol>CC(=O)O</mol>").unwrap();
    let g = model
        .generate_with_dispatch(&store, &prompt, &from_context, &mut SeededRng::new(0))
        .unwrap();
    assert!(matches!(g.events[0], DispatchEvent::React { .. }));
    let bare = tokenize("nothing here").unwrap();
    assert!(model
        .generate_with_dispatch(&store, &bare, &from_context, &mut SeededRng::new(0))
        .is_err());
}

#[test]
fn every_event_matches_one_dispatch_token() {
    let (model, store) = tiny_model(4);
    let records = toy_reactions();
    let opts = DecodeOptions {
        library: records.iter().map(|r| r.molecules.last().unwrap().smiles.clone()).collect(),
        max_new_tokens: 200,
        ..options(&[DISPATCH_PERCEIVE, DISPATCH_GENERATE, DISPATCH_REACT, DISPATCH_PERCEIVE, EOS])
    };
    let prompt = tokenize("Start from <mol>CCO</mol>").unwrap();
    let g = model.generate_with_dispatch(&store, &prompt, &opts, &mut SeededRng::new(1)).unwrap();
    let dispatches = g
        .tokens
        .iter()
        .filter(|t| [DISPATCH_PERCEIVE, DISPATCH_GENERATE, DISPATCH_REACT].contains(t))
        .count();
    assert_eq!(dispatches, g.events.len());
    assert_eq!(g.events.len(), 4);
    assert_eq!(g.events[0], DispatchEvent::Perceive { smiles: Some("CCO".into()) });
}

#[test]
fn closing_a_span_injects_a_structural_row() {
    let (model, store) = tiny_model(5);
    let mut forced = tokenize("<mol>CCO</mol>").unwrap();
    forced.push(EOS);
    let g = model
        .generate_with_dispatch(&store, &tokenize("x").unwrap(), &options(&forced), &mut SeededRng::new(0))
        .unwrap();
    assert_eq!(g.text, "<mol>CCO</mol>");
    assert_eq!(g.injected, 1);
    assert!(g.events.is_empty());
    let mut forced = tokenize("<mol>C(</mol>").unwrap();
    forced.push(EOS);
    let g = model
        .generate_with_dispatch(&store, &tokenize("x").unwrap(), &options(&forced), &mut SeededRng::new(0))
        .unwrap();
    assert_eq!(g.injected, 0);
}

#[test]
fn budget_overrun_returns_partial_output_with_flag() {
    let (model, store) = tiny_model(6);
    let forced = tokenize("abcdefgh").unwrap();
    let opts = DecodeOptions {
        max_new_tokens: 3,
        ..options(&forced)
    };
    let g = model
        .generate_with_dispatch(&store, &tokenize("go").unwrap(), &opts, &mut SeededRng::new(0))
        .unwrap();
    assert!(g.truncated);
    assert_eq!(g.text, "abc");
    assert_eq!(
        model
            .generate_with_dispatch(&store, &[], &opts, &mut SeededRng::new(0))
            .unwrap_err(),
        ModelError::EmptyInput
    );
}

#[test]
fn sampled_decoding_is_seed_reproducible() {
    let (model, store) = tiny_model(7);
    let opts = DecodeOptions {
        temperature: 1.0,
        max_new_tokens: 20,
        ..DecodeOptions::default()
    };
    let prompt = tokenize("abc").unwrap();
    let a = model.generate_with_dispatch(&store, &prompt, &opts, &mut SeededRng::new(9)).unwrap();
    let b = model.generate_with_dispatch(&store, &prompt, &opts, &mut SeededRng::new(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn prompt_molecules_add_one_row_each_without_changing_earlier_rows() {
    let (model, store) = tiny_model(8);
    let prompt = tokenize("look at <mol>c1ccccc1</mol> please").unwrap();
    let h = model.encode_prompt(&store, &prompt).unwrap();
    assert_eq!(h.rows.rows(), prompt.len() + 2);
    assert_eq!(h.is_virtual.iter().filter(|&&v| v).count(), 1);
    assert!(*h.is_virtual.last().unwrap());
    let plain = model.encode_prompt(&store, &tokenize("look at things").unwrap()).unwrap();
    assert_eq!(plain.rows.rows(), "look at things".len() + 1);
    let mut ids = vec![scicore_core::lm::BOS];
    ids.extend(&prompt);
    let text_only = model.lm.encode_text(&store, &ids).unwrap();
    for r in 0..ids.len() {
        for (a, b) in h.rows.row_slice(r).iter().zip(text_only.rows.row_slice(r)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_logits_give_log_vocab_loss() {
    let (model, mut store) = tiny_model(9);
    for (name, t) in store.iter_mut() {
        if name.starts_with("lm.head") {
            *t = Tensor::zeros(t.shape());
        }
    }
    let batch = vec![
        LmExample::from_text("Describe <mol>CCO</mol>:", "ethanol").unwrap(),
        LmExample::from_text("hi", "<d:generate>").unwrap(),
    ];
    let mut tape = Tape::new();
    let l = model.lm_loss(&mut tape, &store, &batch).unwrap();
    assert!((tape.value(l).item() - (VOCAB_SIZE as f64).ln()).abs() < 1e-9);
    assert_eq!(model.lm_loss(&mut tape, &store, &[]).unwrap_err(), ModelError::EmptyBatch);
}

#[test]
fn react_tasks_cover_product_retro_and_yield() {
    let (model, store) = tiny_model(10);
    let records = toy_reactions();
    let library: Vec<String> = records
        .iter()
        .flat_map(|r| r.molecules.iter().map(|m| m.smiles.clone()))
        .collect();
    let r = &records[0];
    let product = model.react(&store, r, ReactTask::Product, &library).unwrap();
    assert_eq!(product.retrieved.len(), 1);
    let reactants = r.molecules.iter().filter(|m| m.role == scicore_core::reaction::Role::Reactant).count();
    let retro = model.react(&store, r, ReactTask::Retro, &library).unwrap();
    assert_eq!(retro.retrieved.len(), reactants);
    let y = model.react(&store, r, ReactTask::Yield, &[]).unwrap();
    assert!(y.retrieved.is_empty());
    assert!((0.0..=100.0).contains(&y.yield_percent));
    assert_eq!(
        model.react(&store, r, ReactTask::Product, &[]).unwrap_err(),
        ModelError::EmptyLibrary
    );
}
