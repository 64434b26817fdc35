//! Python extension module over the core pipeline. Records and results cross
//! the boundary as JSON strings in exactly the JSONL wire formats of the CLI,
//! so the two surfaces cannot drift apart.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use std::path::Path;

use memescope::adaptation::{train as train_model, Ablation, TrainConfig};
use memescope::error::Error;
use memescope::knowledge::KnowledgeBase;
use memescope::pipeline::checkpoint::Checkpoint;
use memescope::pipeline::dataset::{load_dataset, MemeRecord};
use memescope::pipeline::engine::Engine;
use memescope::pipeline::metrics::{evaluate as evaluate_entries, eps as eps_score, EvalEntry};
use memescope::pipeline::perturb::{perturb as perturb_record, PerturbKind, PerturbTables};
use memescope::pipeline::toygen;
use memescope::reasoning::TemplateTable;

fn py_err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_record(json: &str) -> PyResult<MemeRecord> {
    let record: MemeRecord = serde_json::from_str(json)
        .map_err(|e| PyValueError::new_err(format!("malformed record: {e}")))?;
    record.validate().map_err(py_err)?;
    Ok(record)
}

/// A trained model bound to one knowledge snapshot.
#[pyclass]
struct Pipeline {
    engine: Engine,
    templates: TemplateTable,
}

#[pymethods]
impl Pipeline {
    /// Train on a JSONL dataset against a knowledge snapshot directory.
    /// `config_json` mirrors the CLI config file; `ablate` is one of
    /// stage1 | stage2 | stage3.
    #[staticmethod]
    #[pyo3(signature = (data, kb, config_json=None, ablate=None))]
    fn train(
        data: &str,
        kb: &str,
        config_json: Option<&str>,
        ablate: Option<&str>,
    ) -> PyResult<Pipeline> {
        let cfg: TrainConfig = match config_json {
            Some(json) => serde_json::from_str(json)
                .map_err(|e| PyValueError::new_err(format!("malformed config: {e}")))?,
            None => TrainConfig::default(),
        };
        let ablation = match ablate {
            Some(s) => s.parse::<Ablation>().map_err(py_err)?,
            None => Ablation::None,
        };
        let records = load_dataset(Path::new(data)).map_err(py_err)?;
        let kb = KnowledgeBase::load(Path::new(kb)).map_err(py_err)?;
        let result = train_model(&records, &kb, &cfg, ablation).map_err(py_err)?;
        let ckpt = Checkpoint::new(
            cfg,
            ablation,
            kb.snapshot_hash().to_string(),
            result.vocab,
            result.params,
        );
        Ok(Pipeline {
            engine: Engine::new(ckpt, kb).map_err(py_err)?,
            templates: TemplateTable::bundled(),
        })
    }

    /// Load a saved checkpoint together with its knowledge snapshot.
    #[staticmethod]
    fn load(ckpt: &str, kb: &str) -> PyResult<Pipeline> {
        let kb = KnowledgeBase::load(Path::new(kb)).map_err(py_err)?;
        let ckpt = Checkpoint::load(Path::new(ckpt), Some(kb.snapshot_hash())).map_err(py_err)?;
        Ok(Pipeline {
            engine: Engine::new(ckpt, kb).map_err(py_err)?,
            templates: TemplateTable::bundled(),
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.engine.checkpoint.save(Path::new(path)).map_err(py_err)
    }

    /// Score one record (JSON string) -> prediction row (JSON string).
    fn predict(&self, record_json: &str) -> PyResult<String> {
        let record = parse_record(record_json)?;
        let (row, _) = self.engine.predict(&record).map_err(py_err)?;
        Ok(serde_json::to_string(&row).expect("row serializes"))
    }

    /// Explain one record (JSON string) -> explanation row (JSON string).
    fn explain(&self, record_json: &str) -> PyResult<String> {
        let record = parse_record(record_json)?;
        let row = self.engine.explain(&record, &self.templates).map_err(py_err)?;
        Ok(serde_json::to_string(&row).expect("row serializes"))
    }

    /// Rank demonstration candidates for a query record by hybrid
    /// similarity; returns a JSON array of {id, score}.
    fn retrieve_demos(&self, query_json: &str, data: &str, k: usize) -> PyResult<String> {
        let query = parse_record(query_json)?;
        let candidates = load_dataset(Path::new(data)).map_err(py_err)?;
        let ranked = self
            .engine
            .retrieve_demos(&query, &candidates, k)
            .map_err(py_err)?;
        let items: Vec<serde_json::Value> = ranked
            .into_iter()
            .map(|(id, score)| serde_json::json!({"id": id, "score": score}))
            .collect();
        Ok(serde_json::Value::Array(items).to_string())
    }

    #[getter]
    fn kb_hash(&self) -> String {
        self.engine.checkpoint.kb_hash.clone()
    }

    #[getter]
    fn config(&self) -> String {
        serde_json::to_string(&self.engine.checkpoint.config).expect("config serializes")
    }
}

/// Explanation plausibility: cosine similarity of token-count vectors.
#[pyfunction]
fn eps(explanation: &str, gold_rationale: &str) -> PyResult<f64> {
    eps_score(explanation, gold_rationale).map_err(py_err)
}

/// Evaluate a predictions JSONL file against a gold dataset; returns the
/// report as JSON.
#[pyfunction]
fn evaluate_files(pred: &str, data: &str) -> PyResult<String> {
    let predictions =
        memescope::pipeline::engine::load_predictions(Path::new(pred)).map_err(py_err)?;
    let records = load_dataset(Path::new(data)).map_err(py_err)?;
    let by_id: std::collections::BTreeMap<&str, &MemeRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut entries = Vec::new();
    for p in &predictions {
        let record = by_id
            .get(p.id.as_str())
            .ok_or_else(|| PyValueError::new_err(format!("prediction '{}' not in dataset", p.id)))?;
        let gold = record
            .label
            .ok_or_else(|| PyValueError::new_err(format!("record '{}' has no label", p.id)))?;
        entries.push(EvalEntry {
            id: p.id.clone(),
            p_hat: p.p_hat,
            pred_label: p.label,
            gold_label: gold,
            task: record.task,
        });
    }
    let report = evaluate_entries(&entries).map_err(py_err)?;
    Ok(serde_json::to_string(&report).expect("report serializes"))
}

/// Apply one perturbation kind to a record (JSON in, JSON out). The two
/// substitution kinds need `kb` (snapshot directory path).
#[pyfunction]
#[pyo3(signature = (record_json, kind, seed=0, kb=None))]
fn perturb(record_json: &str, kind: &str, seed: u64, kb: Option<&str>) -> PyResult<String> {
    let record = parse_record(record_json)?;
    let kind: PerturbKind = kind.parse().map_err(py_err)?;
    let kb = kb
        .map(|p| KnowledgeBase::load(Path::new(p)))
        .transpose()
        .map_err(py_err)?;
    let tables = PerturbTables::bundled();
    let out = perturb_record(&record, kind, seed, &tables, kb.as_ref()).map_err(py_err)?;
    Ok(serde_json::to_string(&out).expect("record serializes"))
}

/// Regenerate the bundled fixture set under a directory.
#[pyfunction]
#[pyo3(signature = (out, seed=toygen::TOY_SEED))]
fn gen_fixtures(out: &str, seed: u64) -> PyResult<()> {
    let fx = toygen::generate(seed);
    toygen::write_all(&fx, Path::new(out)).map_err(py_err)
}

/// Row-wise softmax of one vector at a temperature.
#[pyfunction]
fn softmax_row(values: Vec<f64>, temperature: f64) -> PyResult<Vec<f64>> {
    let n = values.len();
    let m = memescope::numerics::Matrix::new(1, n, values).map_err(py_err)?;
    let s = memescope::numerics::softmax_rows(&m, temperature).map_err(py_err)?;
    Ok(s.row(0).to_vec())
}

/// Cosine distance between two vectors, in [0, 2].
#[pyfunction]
fn cosine_distance(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    memescope::numerics::cosine_distance(&u, &v).map_err(py_err)
}

#[pymodule]
fn memescope_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Pipeline>()?;
    m.add_function(wrap_pyfunction!(eps, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_files, m)?)?;
    m.add_function(wrap_pyfunction!(perturb, m)?)?;
    m.add_function(wrap_pyfunction!(gen_fixtures, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_row, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_distance, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
