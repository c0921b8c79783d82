#![allow(dead_code)]

use scicore_autograd::{ParamStore, SeededRng};
use scicore_core::ae::AeConfig;
use scicore_core::diffusion::DitConfig;
use scicore_core::gvp::GvpConfig;
use scicore_core::lm::LmConfig;
use scicore_core::model::{ModelConfig, SciCoreMol};
use scicore_core::reaction::{parse_reaction_jsonl, AmountStats, ReactionConfig, ReactionRecord};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        lm: LmConfig {
            width: 16,
            layers: 1,
            heads: 2,
            hidden: 32,
            max_len: 160,
        },
        gvp: GvpConfig {
            scalar: 8,
            vector: 2,
            layers: 2,
            adapter_hidden: 16,
            adapter_out: 16,
            conformer_seed: 7,
        },
        ae: AeConfig {
            length: 16,
            latent: 4,
            width: 16,
            layers: 1,
            heads: 2,
            hidden: 32,
            ..AeConfig::default()
        },
        dit: DitConfig {
            width: 16,
            layers: 1,
            heads: 2,
            hidden: 32,
            condition: 8,
            text: 16,
        },
        reaction: ReactionConfig {
            width: 16,
            layers: 1,
            heads: 2,
            hidden: 32,
            geo: 8,
            bins: 10,
        },
        diffusion_steps: 50,
        beta_start: 1e-3,
        beta_end: 0.2,
    }
}

pub fn toy_reactions() -> Vec<ReactionRecord> {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/reactions.jsonl")).unwrap();
    parse_reaction_jsonl(&text).unwrap()
}

pub fn tiny_model(seed: u64) -> (SciCoreMol, ParamStore) {
    let model = SciCoreMol::new(tiny_config()).unwrap();
    let records = toy_reactions();
    let mut smiles: Vec<&str> = records.iter().flat_map(|r| r.molecules.iter().map(|m| m.smiles.as_str())).collect();
    smiles.sort();
    smiles.dedup();
    let mut store = ParamStore::new();
    model
        .init(&mut store, &mut SeededRng::new(seed), &AmountStats::fit(&records), smiles)
        .unwrap();
    (model, store)
}
