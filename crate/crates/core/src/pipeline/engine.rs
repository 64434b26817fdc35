//! Shared inference plumbing behind `predict`, `explain`, and
//! `retrieve-demos`: one loaded checkpoint + knowledge base, per-record
//! forward passes, and the JSONL row types of the output files.

use serde::{Deserialize, Serialize};

use crate::adaptation::{
    base_pooled_hmm, forward_sample, hybrid_similarity, predicted_label, Ablation, SampleForward,
};
use crate::attention::AttnProjections;
use crate::error::{Error, Result};
use crate::knowledge::{
    extract_entities, retrieve_and_aggregate, KnowledgeBase, KnowledgeCache, KnowledgeContext,
};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::dataset::MemeRecord;
use crate::reasoning::{
    build_evidence, generate_explanation, score_and_select, Explanation, TemplateTable,
};

/// One line of a predictions file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub p_hat: f64,
    pub label: u8,
}

/// One selected reasoning step in an explanations file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainRow {
    pub entity_id: String,
    pub score: f64,
    pub salience: f64,
}

/// One line of an explanations file. `explanation` is absent when Stage III
/// is ablated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplanationRow {
    pub id: String,
    pub label: u8,
    pub p_hat: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    pub chain: Vec<ChainRow>,
}

/// A loaded model ready to run records, honoring the checkpoint's ablation.
pub struct Engine {
    pub checkpoint: Checkpoint,
    pub kb: KnowledgeBase,
    pub cache: KnowledgeCache,
    eff_self: AttnProjections,
    eff_cross: AttnProjections,
}

impl Engine {
    pub fn new(checkpoint: Checkpoint, kb: KnowledgeBase) -> Result<Engine> {
        let eff_self = checkpoint.params.effective_self_attn()?;
        let eff_cross = checkpoint.params.effective_cross_attn()?;
        Ok(Engine {
            checkpoint,
            kb,
            cache: KnowledgeCache::new(),
            eff_self,
            eff_cross,
        })
    }

    pub fn context_for(&self, record: &MemeRecord) -> KnowledgeContext {
        let links = extract_entities(record, &self.kb);
        retrieve_and_aggregate(
            &links,
            &self.kb,
            &self.cache,
            self.checkpoint.config.cap_per_source,
        )
    }

    /// Forward one record; the context is computed (and cached) here.
    pub fn infer(&self, record: &MemeRecord) -> Result<(SampleForward, KnowledgeContext)> {
        let ctx = self.context_for(record);
        let fwd = forward_sample(
            record,
            &ctx,
            &self.checkpoint.vocab,
            &self.checkpoint.params,
            &self.eff_self,
            &self.eff_cross,
            self.checkpoint.ablation,
        )?;
        Ok((fwd, ctx))
    }

    /// Prediction row plus the max |h_tilde - h_mm| entry (the debug-dump
    /// value; exactly 0 under the Stage I ablation).
    pub fn predict(&self, record: &MemeRecord) -> Result<(PredictionRow, f64)> {
        let (fwd, _) = self.infer(record)?;
        let mut max_diff = 0.0f64;
        for (a, b) in fwd.h_tilde.data().iter().zip(fwd.enc.h_mm.data()) {
            max_diff = max_diff.max((a - b).abs());
        }
        Ok((
            PredictionRow {
                id: record.id.clone(),
                p_hat: fwd.p_hat,
                label: predicted_label(fwd.p_hat),
            },
            max_diff,
        ))
    }

    /// Full Stage III pass for one record. Under the Stage III ablation the
    /// prediction is produced but no explanation is generated.
    pub fn explain(&self, record: &MemeRecord, templates: &TemplateTable) -> Result<ExplanationRow> {
        let (fwd, ctx) = self.infer(record)?;
        let label = predicted_label(fwd.p_hat);
        if self.checkpoint.ablation == Ablation::Stage3 {
            return Ok(ExplanationRow {
                id: record.id.clone(),
                label,
                p_hat: fwd.p_hat,
                explanation: None,
                chain: Vec::new(),
            });
        }
        let explanation = self.explanation_for(record, &fwd, &ctx, templates)?;
        let chain = explanation
            .chain
            .steps
            .iter()
            .map(|s| ChainRow {
                entity_id: s.evidence.link.entity_id.clone(),
                score: s.score,
                salience: s.evidence.salience,
            })
            .collect();
        Ok(ExplanationRow {
            id: record.id.clone(),
            label,
            p_hat: fwd.p_hat,
            explanation: Some(explanation.text),
            chain,
        })
    }

    /// The structured explanation artifact (used by tests and bindings).
    pub fn explanation_for(
        &self,
        record: &MemeRecord,
        fwd: &SampleForward,
        ctx: &KnowledgeContext,
        templates: &TemplateTable,
    ) -> Result<Explanation> {
        let cfg = &self.checkpoint.config;
        let chain = match (&fwd.fusion_out, &fwd.kenc) {
            (Some(fusion_out), Some(kenc)) => {
                let evidence = build_evidence(ctx, fusion_out, record.text_tokens.len());
                score_and_select(
                    &evidence,
                    &fwd.h_tilde,
                    &kenc.m_k,
                    &self.checkpoint.vocab,
                    &self.checkpoint.params.encoder,
                    &self.checkpoint.params.w_r,
                    cfg.top_m,
                    cfg.tau,
                )?
            }
            _ => Default::default(),
        };
        generate_explanation(
            &chain,
            predicted_label(fwd.p_hat),
            fwd.p_hat,
            record.task,
            templates,
        )
    }

    /// Pooled base representation for demonstration retrieval.
    pub fn pooled_query(&self, record: &MemeRecord) -> Result<Vec<f64>> {
        base_pooled_hmm(record, &self.checkpoint.vocab, &self.checkpoint.params.encoder)
    }

    /// Rank `candidates` against `query` by hybrid similarity, descending,
    /// ties broken by id.
    pub fn retrieve_demos(
        &self,
        query: &MemeRecord,
        candidates: &[MemeRecord],
        k: usize,
    ) -> Result<Vec<(String, f64)>> {
        let cfg = &self.checkpoint.config;
        let q_pooled = self.pooled_query(query)?;
        let q_links = extract_entities(query, &self.kb);
        let mut scored = Vec::new();
        for c in candidates {
            if c.id == query.id {
                continue;
            }
            let pooled = self.pooled_query(c)?;
            let links = extract_entities(c, &self.kb);
            let s = hybrid_similarity(
                &q_pooled,
                &pooled,
                &q_links,
                &links,
                &self.kb,
                cfg.lambda_s,
                cfg.lambda_c,
            );
            scored.push((c.id.clone(), s));
        }
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        scored.truncate(k);
        Ok(scored)
    }
}

/// Parse a predictions JSONL file.
pub fn load_predictions(path: &std::path::Path) -> Result<Vec<PredictionRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(line).map_err(|e| {
            Error::Data(format!(
                "{}:{}: malformed prediction: {}",
                path.display(),
                lineno + 1,
                e
            ))
        })?);
    }
    Ok(rows)
}
