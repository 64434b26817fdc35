//! The command-line harness: train / predict / explain / eval / perturb,
//! plus the retrieve-demos and gen-fixtures utilities.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric error.
//! Output files are written atomically (temp + rename), never partially.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adaptation::{train, Ablation, TrainConfig};
use crate::error::{Error, Result};
use crate::knowledge::{KnowledgeBase, KnowledgeCache};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::dataset::{load_dataset, records_to_jsonl, MemeRecord};
use crate::pipeline::engine::{load_predictions, Engine};
use crate::pipeline::metrics::{evaluate, EvalEntry};
use crate::pipeline::perturb::{perturb, PerturbKind, PerturbTables};
use crate::pipeline::{atomic_write, toygen};
use crate::reasoning::TemplateTable;

#[derive(Parser)]
#[command(
    name = "memescope",
    about = "Knowledge-grounded meme abuse classification: training, inference, explanations, evaluation, and perturbation harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigOverrides {
    /// JSON config file mirroring the training configuration.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long)]
    seed: Option<u64>,

    #[arg(long)]
    epochs: Option<usize>,

    #[arg(long)]
    lr: Option<f64>,

    #[arg(long)]
    batch_size: Option<usize>,

    #[arg(long)]
    lambda: Option<f64>,

    #[arg(long)]
    weight_decay: Option<f64>,

    #[arg(long)]
    dim: Option<usize>,

    #[arg(long)]
    n_heads: Option<usize>,

    #[arg(long)]
    rank: Option<usize>,

    #[arg(long)]
    alpha: Option<f64>,
}

impl ConfigOverrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| {
                    Error::Data(format!("{}: malformed config: {e}", path.display()))
                })?
            }
            None => TrainConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        apply!(seed, epochs, lr, batch_size, lambda, weight_decay, dim, n_heads, rank, alpha);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on a labeled JSONL dataset and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,

        /// Knowledge snapshot directory (triples.tsv + gazetteer.tsv).
        #[arg(long)]
        kb: PathBuf,

        #[arg(long)]
        out: PathBuf,

        /// Disable one stage: stage1 (no fusion), stage2 (no contrastive
        /// adaptation), stage3 (no explanations).
        #[arg(long)]
        ablate: Option<String>,

        /// Persist the knowledge lookup cache to this file.
        #[arg(long)]
        kb_cache: Option<PathBuf>,

        #[command(flatten)]
        overrides: ConfigOverrides,
    },

    /// Score records with a trained checkpoint.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,

        #[arg(long)]
        data: PathBuf,

        #[arg(long)]
        kb: PathBuf,

        #[arg(long)]
        out: PathBuf,

        /// Also write per-record max |h_tilde - h_mm| rows here.
        #[arg(long)]
        debug_dump: Option<PathBuf>,

        #[arg(long)]
        kb_cache: Option<PathBuf>,
    },

    /// Predictions plus templated explanations and reasoning chains.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,

        #[arg(long)]
        data: PathBuf,

        #[arg(long)]
        kb: PathBuf,

        #[arg(long)]
        out: PathBuf,

        /// Override the bundled explanation template table.
        #[arg(long)]
        templates: Option<PathBuf>,
    },

    /// Score a predictions file against gold labels.
    Eval {
        #[arg(long)]
        pred: PathBuf,

        #[arg(long)]
        data: PathBuf,

        /// Include the per-task rows in the text table.
        #[arg(long)]
        per_task: bool,

        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Apply one perturbation kind to every record.
    Perturb {
        #[arg(long)]
        data: PathBuf,

        /// text_masking | image_cropping | synonym_substitution | symbol_substitution
        #[arg(long)]
        kind: String,

        #[arg(long, default_value_t = 0)]
        seed: u64,

        #[arg(long)]
        out: PathBuf,

        /// Knowledge snapshot (required for the substitution kinds).
        #[arg(long)]
        kb: Option<PathBuf>,

        /// Override the bundled synonym table.
        #[arg(long)]
        synonyms: Option<PathBuf>,

        /// Override the bundled symbol substitution table.
        #[arg(long)]
        symbols: Option<PathBuf>,
    },

    /// Rank demonstration candidates for a query record by hybrid
    /// similarity (debug utility).
    RetrieveDemos {
        #[arg(long)]
        ckpt: PathBuf,

        #[arg(long)]
        data: PathBuf,

        #[arg(long)]
        kb: PathBuf,

        #[arg(long)]
        query_id: String,

        #[arg(long, default_value_t = 5)]
        k: usize,

        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Regenerate the bundled fixture set (knowledge snapshot, perturbation
    /// tables, toy corpus).
    GenFixtures {
        #[arg(long)]
        out: PathBuf,

        #[arg(long, default_value_t = toygen::TOY_SEED)]
        seed: u64,
    },
}

/// Parse arguments and run; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Clap renders its own message; usage errors exit 2, --help 0.
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            data,
            kb,
            out,
            ablate,
            kb_cache,
            overrides,
        } => cmd_train(&data, &kb, &out, ablate.as_deref(), kb_cache.as_deref(), &overrides),
        Command::Predict {
            ckpt,
            data,
            kb,
            out,
            debug_dump,
            kb_cache,
        } => cmd_predict(&ckpt, &data, &kb, &out, debug_dump.as_deref(), kb_cache.as_deref()),
        Command::Explain {
            ckpt,
            data,
            kb,
            out,
            templates,
        } => cmd_explain(&ckpt, &data, &kb, &out, templates.as_deref()),
        Command::Eval {
            pred,
            data,
            per_task,
            out,
        } => cmd_eval(&pred, &data, per_task, out.as_deref()),
        Command::Perturb {
            data,
            kind,
            seed,
            out,
            kb,
            synonyms,
            symbols,
        } => cmd_perturb(
            &data,
            &kind,
            seed,
            &out,
            kb.as_deref(),
            synonyms.as_deref(),
            symbols.as_deref(),
        ),
        Command::RetrieveDemos {
            ckpt,
            data,
            kb,
            query_id,
            k,
            out,
        } => cmd_retrieve_demos(&ckpt, &data, &kb, &query_id, k, out.as_deref()),
        Command::GenFixtures { out, seed } => {
            let fx = toygen::generate(seed);
            toygen::write_all(&fx, &out)?;
            println!("wrote fixtures under {}", out.display());
            Ok(())
        }
    }
}

fn parse_ablation(s: Option<&str>) -> Result<Ablation> {
    match s {
        None => Ok(Ablation::None),
        Some(s) => s.parse(),
    }
}

fn cmd_train(
    data: &Path,
    kb_dir: &Path,
    out: &Path,
    ablate: Option<&str>,
    kb_cache: Option<&Path>,
    overrides: &ConfigOverrides,
) -> Result<()> {
    let cfg = overrides.resolve()?;
    let ablation = parse_ablation(ablate)?;
    let records = load_dataset(data)?;
    let kb = KnowledgeBase::load(kb_dir)?;
    let result = train(&records, &kb, &cfg, ablation)?;
    let ckpt = Checkpoint::new(
        cfg,
        ablation,
        kb.snapshot_hash().to_string(),
        result.vocab,
        result.params,
    );
    ckpt.save(out)?;
    if let Some(cache_path) = kb_cache {
        // The training cache is internal to `train`; persist a fresh warm one.
        let cache = KnowledgeCache::new();
        let _ = crate::adaptation::train::build_contexts(
            &records,
            &kb,
            &cache,
            ckpt.config.cap_per_source,
        );
        cache.save(cache_path, &kb)?;
    }
    println!("saved checkpoint to {}", out.display());
    Ok(())
}

fn make_engine(ckpt_path: &Path, kb_dir: &Path, kb_cache: Option<&Path>) -> Result<Engine> {
    let kb = KnowledgeBase::load(kb_dir)?;
    let ckpt = Checkpoint::load(ckpt_path, Some(kb.snapshot_hash()))?;
    let mut engine = Engine::new(ckpt, kb)?;
    if let Some(cache_path) = kb_cache {
        if cache_path.exists() {
            engine.cache = KnowledgeCache::load(cache_path, &engine.kb)?;
        }
    }
    Ok(engine)
}

fn cmd_predict(
    ckpt: &Path,
    data: &Path,
    kb_dir: &Path,
    out: &Path,
    debug_dump: Option<&Path>,
    kb_cache: Option<&Path>,
) -> Result<()> {
    let engine = make_engine(ckpt, kb_dir, kb_cache)?;
    let records = load_dataset(data)?;
    let mut rows = String::new();
    let mut dump = String::new();
    for r in &records {
        let (row, max_diff) = engine.predict(r)?;
        rows.push_str(&serde_json::to_string(&row).expect("prediction row serializes"));
        rows.push('\n');
        if debug_dump.is_some() {
            dump.push_str(&format!(
                "{{\"id\":{},\"max_abs_h_diff\":{}}}\n",
                serde_json::to_string(&r.id).expect("id serializes"),
                serde_json::Number::from_f64(max_diff).expect("finite diff")
            ));
        }
    }
    atomic_write(out, rows.as_bytes())?;
    if let Some(p) = debug_dump {
        atomic_write(p, dump.as_bytes())?;
    }
    if let Some(cache_path) = kb_cache {
        engine.cache.save(cache_path, &engine.kb)?;
    }
    println!("wrote {} predictions to {}", records.len(), out.display());
    Ok(())
}

fn cmd_explain(
    ckpt: &Path,
    data: &Path,
    kb_dir: &Path,
    out: &Path,
    templates: Option<&Path>,
) -> Result<()> {
    let engine = make_engine(ckpt, kb_dir, None)?;
    let templates = match templates {
        Some(p) => TemplateTable::load(p)?,
        None => TemplateTable::bundled(),
    };
    let records = load_dataset(data)?;
    let mut rows = String::new();
    for r in &records {
        let row = engine.explain(r, &templates)?;
        rows.push_str(&serde_json::to_string(&row).expect("explanation row serializes"));
        rows.push('\n');
    }
    atomic_write(out, rows.as_bytes())?;
    println!("wrote {} explanations to {}", records.len(), out.display());
    Ok(())
}

fn cmd_eval(pred: &Path, data: &Path, per_task: bool, out: Option<&Path>) -> Result<()> {
    let predictions = load_predictions(pred)?;
    let records = load_dataset(data)?;
    let by_id: std::collections::BTreeMap<&str, &MemeRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut entries = Vec::with_capacity(predictions.len());
    for p in &predictions {
        let record = by_id.get(p.id.as_str()).ok_or_else(|| {
            Error::Data(format!("prediction '{}' has no record in {}", p.id, data.display()))
        })?;
        let gold = record.label.ok_or_else(|| {
            Error::Data(format!("record '{}' has no gold label", record.id))
        })?;
        entries.push(EvalEntry {
            id: p.id.clone(),
            p_hat: p.p_hat,
            pred_label: p.label,
            gold_label: gold,
            task: record.task,
        });
    }
    let report = evaluate(&entries)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Data(format!("serialize report: {e}")))?;
    match out {
        Some(p) => atomic_write(p, json.as_bytes())?,
        None => println!("{json}"),
    }
    if per_task {
        print!("{}", report.to_table());
    } else {
        println!(
            "overall: accuracy {:.2}%, macro-F1 {:.2}% over {} predictions",
            report.overall_accuracy_pct, report.overall_macro_f1_pct, report.total
        );
    }
    Ok(())
}

fn cmd_perturb(
    data: &Path,
    kind: &str,
    seed: u64,
    out: &Path,
    kb_dir: Option<&Path>,
    synonyms: Option<&Path>,
    symbols: Option<&Path>,
) -> Result<()> {
    let kind: PerturbKind = kind.parse()?;
    let records = load_dataset(data)?;
    let kb = kb_dir.map(KnowledgeBase::load).transpose()?;
    let mut tables = PerturbTables::bundled();
    if let Some(s) = synonyms {
        tables.synonyms = crate::pipeline::perturb::load_substitution_table(s)?;
    }
    if let Some(m) = symbols {
        tables.symbol_substitutes = crate::pipeline::perturb::load_substitution_table(m)?;
    }
    let perturbed: Vec<MemeRecord> = records
        .iter()
        .map(|r| perturb(r, kind, seed, &tables, kb.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    atomic_write(out, records_to_jsonl(&perturbed)?.as_bytes())?;
    println!(
        "wrote {} {} records to {}",
        perturbed.len(),
        kind.name(),
        out.display()
    );
    Ok(())
}

fn cmd_retrieve_demos(
    ckpt: &Path,
    data: &Path,
    kb_dir: &Path,
    query_id: &str,
    k: usize,
    out: Option<&Path>,
) -> Result<()> {
    let engine = make_engine(ckpt, kb_dir, None)?;
    let records = load_dataset(data)?;
    let query = records
        .iter()
        .find(|r| r.id == query_id)
        .ok_or_else(|| Error::Data(format!("query id '{query_id}' not found in {}", data.display())))?;
    let ranked = engine.retrieve_demos(query, &records, k)?;
    let mut text = String::new();
    for (id, score) in &ranked {
        text.push_str(&format!(
            "{{\"id\":{},\"score\":{}}}\n",
            serde_json::to_string(id).expect("id serializes"),
            score
        ));
    }
    match out {
        Some(p) => atomic_write(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}
