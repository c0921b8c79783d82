//! The `scicore` command line.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use scicore_autograd::{load_checkpoint, save_checkpoint, ParamStore, SeededRng};
use scicore_chem::{parse_smiles, write_smiles, FIXTURE_SMILES};
use scicore_core::corpus::sft_examples;
use scicore_core::diffusion::GuidanceConfig;
use scicore_core::lm::{tokenize, EOS};
use scicore_core::model::{DecodeOptions, DispatchEvent, ModelConfig, ReactTask, SciCoreMol};
use scicore_core::reaction::{AmountStats, ReactionRecord};
use scicore_core::train::{run_stage, Corpora, StageConfig};
use scicore_core::ModelError;
use serde_json::{json, Value};

use crate::error::{HarnessError, Result};
use crate::loader::{load_corpus, parse_reactions, read_text, Corpus, CorpusKind};
use crate::metrics::{classification_metrics, ndcg, rank_by_score, regression_metrics, MetricReport, Orientation};
use crate::scorecard::{load_reports, radar_svg, scorecard};

#[derive(Debug, Parser)]
#[command(name = "scicore", version, about = "Molecular language model toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Product,
    Retro,
    Yield,
}

impl From<TaskArg> for ReactTask {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Product => ReactTask::Product,
            TaskArg::Retro => ReactTask::Retro,
            TaskArg::Yield => ReactTask::Yield,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Mae,
    Rmse,
    Accuracy,
    F1,
    Ndcg,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and canonicalize a SMILES string.
    Parse { smiles: String },
    /// Geometric embedding of a molecule.
    Embed {
        smiles: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run one training stage described by a stage file.
    Train { config: PathBuf },
    /// Decode from a prompt, running modules on dispatch tokens.
    Generate {
        #[arg(long)]
        prompt: String,
        /// Reverse diffusion steps.
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        cfg_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Source molecule for bridge initialization.
        #[arg(long)]
        source: Option<String>,
        #[arg(long, default_value_t = 200, requires = "source")]
        bridge_t: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Emit these tokens first, then stop.
        #[arg(long)]
        force: Option<String>,
        #[arg(long, default_value_t = 64)]
        max_tokens: usize,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        /// SMILES lines used as reaction retrieval candidates.
        #[arg(long)]
        library: Option<PathBuf>,
    },
    /// Predict products, reactants or yield for reaction records.
    React {
        records: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// SMILES lines; defaults to every molecule in the records.
        #[arg(long)]
        library: Option<PathBuf>,
    },
    /// Score predictions against references, one value per line.
    Eval {
        pred: PathBuf,
        gold: PathBuf,
        #[arg(long, value_enum)]
        metric: MetricArg,
        /// Name recorded in the report; defaults to the metric.
        #[arg(long)]
        name: Option<String>,
        #[arg(long, default_value = "1")]
        positive: String,
    },
    /// Normalize report sets and write the radar payload.
    Scorecard {
        reports: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

/// Fresh or restored model parameters.
pub fn load_model(checkpoint: Option<&Path>, seed: u64, records: &[ReactionRecord], extra: &[String]) -> Result<(SciCoreMol, ParamStore)> {
    let model = SciCoreMol::new(ModelConfig::default())?;
    let store = match checkpoint {
        Some(p) => load_checkpoint(p)?.params,
        None => {
            let mut store = ParamStore::new();
            let geo: Vec<&str> = FIXTURE_SMILES
                .iter()
                .copied()
                .chain(records.iter().flat_map(|r| r.molecules.iter().map(|m| m.smiles.as_str())))
                .chain(extra.iter().map(String::as_str))
                .collect();
            model.init(&mut store, &mut SeededRng::new(seed), &AmountStats::fit(records), geo)?;
            store
        }
    };
    Ok((model, store))
}

fn event_json(e: &DispatchEvent) -> Value {
    match e {
        DispatchEvent::Perceive { smiles } => json!({"dispatch": "perceive", "smiles": smiles}),
        DispatchEvent::Generate { smiles, valid } => json!({"dispatch": "generate", "smiles": smiles, "valid": valid}),
        DispatchEvent::React { product, yield_percent } => {
            json!({"dispatch": "react", "product": product, "yield_percent": yield_percent})
        }
    }
}

fn library_from(path: Option<&Path>, fallback: Vec<String>) -> Result<Vec<String>> {
    match path {
        Some(p) => match load_corpus(p, CorpusKind::SmilesLines)? {
            Corpus::Smiles(v) => Ok(v),
            _ => Err(HarnessError::Internal("loader returned the wrong kind".into())),
        },
        None => Ok(fallback),
    }
}

fn read_values(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

fn numbers(path: &Path) -> Result<Vec<f64>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<f64>().map_err(|e| HarnessError::ParseError {
                line: i + 1,
                reason: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}

fn write_json(out: &mut dyn Write, v: &Value) -> Result<()> {
    writeln!(out, "{v}").map_err(|e| match e.kind() {
        std::io::ErrorKind::BrokenPipe => HarnessError::ClosedOutput,
        _ => HarnessError::Internal(e.to_string()),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

fn resolve(base: &Path, p: &Option<PathBuf>) -> Option<PathBuf> {
    p.as_ref().map(|p| if p.is_absolute() { p.clone() } else { base.join(p) })
}

fn train(config_path: &Path, out: &mut dyn Write) -> Result<()> {
    let config = StageConfig::parse(&read_text(config_path)?)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let paths = &config.paths;
    let mut corpora = Corpora::default();
    if let Some(p) = resolve(base, &paths.molecules) {
        if let Corpus::Smiles(v) = load_corpus(&p, CorpusKind::SmilesLines)? {
            corpora.molecules = v;
        }
    }
    if let Some(p) = resolve(base, &paths.pairs) {
        if let Corpus::Pairs(v) = load_corpus(&p, CorpusKind::PairTsv)? {
            corpora.pairs = v;
        }
    }
    if let Some(p) = resolve(base, &paths.reactions) {
        if let Corpus::Reactions(v) = load_corpus(&p, CorpusKind::ReactionJsonl)? {
            corpora.reactions = v;
        }
    }
    corpora.lm = sft_examples(&corpora.pairs, &corpora.reactions)?;
    let extra: Vec<String> = corpora
        .molecules
        .iter()
        .cloned()
        .chain(corpora.pairs.iter().map(|p| p.smiles.clone()))
        .collect();
    let init = resolve(base, &paths.init);
    let (model, mut store) = load_model(init.as_deref(), config.seed, &corpora.reactions, &extra)?;
    let mut rng = SeededRng::new(config.seed);
    let result = run_stage(&model, &mut store, &config, &corpora, &mut rng)?;
    if let Some(p) = resolve(base, &paths.checkpoint) {
        save_checkpoint(&p, &result.checkpoint)?;
    }
    if let Some(p) = resolve(base, &paths.log) {
        let mut buf = Vec::new();
        result
            .write_log(&mut buf)
            .map_err(|e| HarnessError::Internal(e.to_string()))?;
        write_file(&p, &buf)?;
    }
    let last = result.log.last().map(|r| r.loss);
    write_json(
        out,
        &json!({"stage": config.stage.name(), "steps": result.log.len(), "final_loss": last}),
    )
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Parse { smiles } => {
            let g = parse_smiles(&smiles).map_err(|source| ModelError::InvalidSmiles {
                text: smiles.clone(),
                source,
            })?;
            write_json(
                out,
                &json!({
                    "smiles": smiles,
                    "canonical": write_smiles(&g),
                    "atoms": g.atom_count(),
                    "bonds": g.bonds().len(),
                }),
            )
        }
        Command::Embed { smiles, checkpoint, seed } => {
            let (model, store) = load_model(checkpoint.as_deref(), seed, &[], &[])?;
            let e = model.gvp.embed_smiles(&store, &smiles)?;
            write_json(out, &json!({"smiles": smiles, "h_geo": e.h_geo, "h_mol": e.h_mol}))
        }
        Command::Train { config } => train(&config, out),
        Command::Generate {
            prompt,
            steps,
            cfg_scale,
            seed,
            source,
            bridge_t,
            checkpoint,
            force,
            max_tokens,
            temperature,
            library,
        } => {
            let (model, store) = load_model(checkpoint.as_deref(), seed, &[], &[])?;
            let forced = match force {
                Some(text) => {
                    let mut ids = tokenize(&text)?;
                    ids.push(EOS);
                    ids.into_iter().map(Some).collect()
                }
                None => Vec::new(),
            };
            let options = DecodeOptions {
                max_new_tokens: max_tokens,
                temperature,
                guidance: GuidanceConfig { scale: cfg_scale, steps },
                source: source.map(|s| (s, bridge_t)),
                forced,
                library: library_from(library.as_deref(), FIXTURE_SMILES.iter().map(|s| s.to_string()).collect())?,
                reaction: None,
            };
            let ids = tokenize(&prompt)?;
            let g = model.generate_with_dispatch(&store, &ids, &options, &mut SeededRng::new(seed))?;
            write_json(
                out,
                &json!({
                    "text": g.text,
                    "events": g.events.iter().map(event_json).collect::<Vec<_>>(),
                    "injected": g.injected,
                    "truncated": g.truncated,
                }),
            )
        }
        Command::React {
            records,
            task,
            checkpoint,
            seed,
            library,
        } => {
            let recs = parse_reactions(&read_text(&records)?)?;
            let mut seen = Vec::new();
            for m in recs.iter().flat_map(|r| &r.molecules) {
                if !seen.contains(&m.smiles) {
                    seen.push(m.smiles.clone());
                }
            }
            let library = library_from(library.as_deref(), seen)?;
            let (model, store) = load_model(checkpoint.as_deref(), seed, &recs, &library)?;
            for (i, r) in recs.iter().enumerate() {
                let o = model.react(&store, r, task.into(), &library)?;
                write_json(
                    out,
                    &json!({"record": i + 1, "retrieved": o.retrieved, "yield_percent": o.yield_percent}),
                )?;
            }
            Ok(())
        }
        Command::Eval {
            pred,
            gold,
            metric,
            name,
            positive,
        } => {
            let (value, samples, orientation, default_name) = match metric {
                MetricArg::Mae | MetricArg::Rmse => {
                    let (p, g) = (numbers(&pred)?, numbers(&gold)?);
                    let r = regression_metrics(&p, &g)?;
                    if metric == MetricArg::Mae {
                        (r.mae, p.len(), Orientation::LowerBetter, "mae")
                    } else {
                        (r.rmse, p.len(), Orientation::LowerBetter, "rmse")
                    }
                }
                MetricArg::Accuracy | MetricArg::F1 => {
                    let (p, g) = (read_values(&pred)?, read_values(&gold)?);
                    let c = classification_metrics(&p, &g, &positive)?;
                    if metric == MetricArg::Accuracy {
                        (c.accuracy, p.len(), Orientation::HigherBetter, "accuracy")
                    } else {
                        (c.f1, p.len(), Orientation::HigherBetter, "f1")
                    }
                }
                MetricArg::Ndcg => {
                    let (p, g) = (numbers(&pred)?, numbers(&gold)?);
                    (ndcg(&rank_by_score(&p), &g)?, p.len(), Orientation::HigherBetter, "ndcg")
                }
            };
            let report = MetricReport::new(name.unwrap_or_else(|| default_name.to_string()), orientation, value, samples)?;
            let v = serde_json::to_value(&report).map_err(|e| HarnessError::Internal(e.to_string()))?;
            write_json(out, &v)
        }
        Command::Scorecard { reports, out: path, svg } => {
            let (sets, grouping) = load_reports(&reports)?;
            let card = scorecard(&sets, &grouping)?;
            let text = serde_json::to_string_pretty(&card).map_err(|e| HarnessError::Internal(e.to_string()))?;
            write_file(&path, format!("{text}\n").as_bytes())?;
            if let Some(p) = svg {
                write_file(&p, radar_svg(&card).as_bytes())?;
            }
            for w in &card.warnings {
                eprintln!("warning: {w}");
            }
            write_json(out, &json!({"models": card.models.len(), "out": path}))
        }
    }
}
