//! Stage III: evidence tuples from links and cross-attention salience,
//! top-m chain selection under a temperature softmax, and deterministic
//! templated explanation generation. Everything here is read-only over the
//! fused representation; it can never perturb a prediction.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, Vocab};
use crate::error::{Error, Result};
use crate::fusion::FusionOutput;
use crate::knowledge::{normalize_token, EntityLink, KnowledgeContext, Modality};
use crate::numerics::{dot, mean_pool, softmax_rows, Matrix};
use crate::pipeline::dataset::Task;

/// One candidate reasoning step: a retrieved fact with the link that
/// produced it and its attention-derived salience.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceTuple {
    pub link: EntityLink,
    pub entity_label: String,
    pub symbol: Option<String>,
    pub relation: String,
    pub snippet: String,
    /// The fact's object (triple tail), the "group" slot of the templates.
    pub group: String,
    /// Row of this fact in the knowledge matrix / context fact list.
    pub fact_row: usize,
    pub salience: f64,
}

/// Selected steps with their normalized scores, plus the full softmax for
/// auditability (scores over all candidates sum to 1).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReasoningChain {
    pub steps: Vec<ReasoningStep>,
    pub candidate_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub evidence: EvidenceTuple,
    pub score: f64,
}

/// Final Stage III artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub text: String,
    pub chain: ReasoningChain,
    pub label: u8,
    pub p_hat: f64,
    /// Abusive prediction with an empty chain (no linked evidence).
    pub no_evidence: bool,
    /// Slot values the text was assembled from, for faithfulness audits.
    pub slots: BTreeMap<String, String>,
}

/// Salience of each knowledge row: mean cross-attention mass it receives
/// over heads and over the query positions inside its entity's span. The
/// NO_KNOWLEDGE fallback row yields no evidence.
pub fn build_evidence(
    ctx: &KnowledgeContext,
    fusion_out: &FusionOutput,
    n_text_tokens: usize,
) -> Vec<EvidenceTuple> {
    if ctx.facts.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(ctx.facts.len());
    for (row, fact) in ctx.facts.iter().enumerate() {
        let link = &ctx.links[fact.link_idx];
        let offset = match link.modality {
            Modality::Text => 0,
            Modality::Image => n_text_tokens,
        };
        let span = offset + link.start..offset + link.start + link.len;
        let salience = fusion_out.mean_attention(span, row);
        out.push(EvidenceTuple {
            link: link.clone(),
            entity_label: fact.triple.head_label.clone(),
            symbol: link.symbol_tag.clone(),
            relation: fact.triple.relation.clone(),
            snippet: fact.triple.snippet.clone(),
            group: fact.triple.tail.clone(),
            fact_row: row,
            salience,
        });
    }
    out
}

/// Mean embedding of a link's surface tokens; the entity feature of the
/// evidence scorer.
fn entity_embedding(link: &EntityLink, vocab: &Vocab, p: &EncoderParams) -> Vec<f64> {
    let d = p.dim();
    let mut out = vec![0.0; d];
    let tokens: Vec<&str> = link.surface.split(' ').collect();
    for t in &tokens {
        let idx = vocab.index(&normalize_token(t));
        for c in 0..d {
            out[c] += p.embedding.get(idx, c);
        }
    }
    for o in &mut out {
        *o /= tokens.len() as f64;
    }
    out
}

/// Score every candidate with w_r over [pool(h_tilde); entity; fact-row],
/// softmax at temperature `tau`, and keep the top-m. Ties break by entity id
/// then fact row; an empty candidate list yields an empty chain.
#[allow(clippy::too_many_arguments)]
pub fn score_and_select(
    evidence: &[EvidenceTuple],
    h_tilde: &Matrix,
    m_k: &Matrix,
    vocab: &Vocab,
    enc: &EncoderParams,
    w_r: &[f64],
    m: usize,
    tau: f64,
) -> Result<ReasoningChain> {
    if evidence.is_empty() {
        return Ok(ReasoningChain::default());
    }
    let d = enc.dim();
    if w_r.len() != 3 * d {
        return Err(Error::Numeric(format!(
            "evidence scorer expects 3d = {} weights, got {}",
            3 * d,
            w_r.len()
        )));
    }
    let pooled = mean_pool(h_tilde)?;
    let mut logits = Matrix::zeros(1, evidence.len());
    for (i, ev) in evidence.iter().enumerate() {
        let entity = entity_embedding(&ev.link, vocab, enc);
        let mut feature = Vec::with_capacity(3 * d);
        feature.extend_from_slice(&pooled);
        feature.extend_from_slice(&entity);
        feature.extend_from_slice(m_k.row(ev.fact_row));
        logits.set(0, i, dot(w_r, &feature));
    }
    let scores = softmax_rows(&logits, tau)?;
    let candidate_scores: Vec<f64> = scores.row(0).to_vec();

    let mut order: Vec<usize> = (0..evidence.len()).collect();
    order.sort_by(|&a, &b| {
        candidate_scores[b]
            .partial_cmp(&candidate_scores[a])
            .unwrap()
            .then_with(|| evidence[a].link.entity_id.cmp(&evidence[b].link.entity_id))
            .then_with(|| evidence[a].fact_row.cmp(&evidence[b].fact_row))
    });
    let steps = order
        .into_iter()
        .take(m)
        .map(|i| ReasoningStep {
            evidence: evidence[i].clone(),
            score: candidate_scores[i],
        })
        .collect();
    Ok(ReasoningChain {
        steps,
        candidate_scores,
    })
}

/// Explanation templates, id -> pattern with named `{slot}`s. Shipped as a
/// versioned fixture; the bundled copy is compiled in as the default.
#[derive(Debug, Clone)]
pub struct TemplateTable {
    patterns: BTreeMap<String, String>,
}

const BUNDLED_TEMPLATES: &str =
    include_str!("../fixtures/templates/explanation_templates.tsv");

const REQUIRED_TEMPLATES: [&str; 5] = [
    "abusive_symbol",
    "abusive_relation",
    "abusive_no_evidence",
    "benign",
    "also_step",
];

impl TemplateTable {
    pub fn bundled() -> TemplateTable {
        Self::parse(BUNDLED_TEMPLATES, "<bundled>").expect("bundled template table is valid")
    }

    pub fn load(path: &Path) -> Result<TemplateTable> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn parse(text: &str, origin: &str) -> Result<TemplateTable> {
        let mut patterns = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, pattern) = line.split_once('\t').ok_or_else(|| {
                Error::Data(format!("{origin}:{}: template line without tab", lineno + 1))
            })?;
            patterns.insert(id.trim().to_string(), pattern.to_string());
        }
        for required in REQUIRED_TEMPLATES {
            if !patterns.contains_key(required) {
                return Err(Error::Data(format!(
                    "{origin}: missing template '{required}'"
                )));
            }
        }
        Ok(TemplateTable { patterns })
    }

    fn render(&self, id: &str, slots: &BTreeMap<String, String>) -> Result<String> {
        let mut text = self.patterns[id].clone();
        for (k, v) in slots {
            text = text.replace(&format!("{{{k}}}"), v);
        }
        if text.contains('{') || text.contains('}') {
            return Err(Error::Data(format!(
                "template '{id}' left dangling placeholders: {text}"
            )));
        }
        Ok(text)
    }
}

/// Harm-category slot, a fixed map from the record's task.
fn harm_category(task: Option<Task>) -> &'static str {
    match task {
        Some(Task::Harmfulness) => "social harm",
        Some(Task::Hatefulness) => "exclusion",
        Some(Task::Misogyny) => "misogynistic stereotyping",
        Some(Task::Offensiveness) => "offense",
        Some(Task::Sarcasm) => "derisive mockery",
        None => "abuse",
    }
}

fn relation_phrase_of(step: &ReasoningStep) -> String {
    // Reuse the linearization phrase table by rendering the relation through
    // a throwaway triple-free path: the stored relation string itself when no
    // phrase is known.
    crate::knowledge::linearize(&crate::knowledge::Triple {
        id: 0,
        source: crate::knowledge::Source::ConceptNet,
        head_id: String::new(),
        head_label: String::new(),
        relation: step.evidence.relation.clone(),
        tail: String::new(),
        snippet: " ".into(),
    })
    .trim()
    .trim_end_matches('.')
    .trim()
    .to_string()
}

/// Realize a chain into text. Template choice is keyed on (prediction,
/// top-step-has-symbol); additional steps are appended as also-clauses up to
/// the chain length. Byte-identical output for identical inputs.
pub fn generate_explanation(
    chain: &ReasoningChain,
    label: u8,
    p_hat: f64,
    task: Option<Task>,
    templates: &TemplateTable,
) -> Result<Explanation> {
    let mut slots = BTreeMap::new();
    let mut no_evidence = false;

    let text = if label == 0 {
        templates.render("benign", &slots)?
    } else if chain.steps.is_empty() {
        no_evidence = true;
        templates.render("abusive_no_evidence", &slots)?
    } else {
        let top = &chain.steps[0];
        slots.insert("entity".into(), top.evidence.entity_label.clone());
        slots.insert("group".into(), top.evidence.group.clone());
        slots.insert("modality".into(), top.evidence.link.modality.name().into());
        slots.insert("surface".into(), top.evidence.link.surface.clone());
        slots.insert("harm".into(), harm_category(task).into());
        let id = if top.evidence.symbol.is_some() {
            "abusive_symbol"
        } else {
            slots.insert("relation_phrase".into(), relation_phrase_of(top));
            "abusive_relation"
        };
        let mut text = templates.render(id, &slots)?;
        for (i, step) in chain.steps.iter().enumerate().skip(1) {
            let mut extra = BTreeMap::new();
            let snippet = step.evidence.snippet.trim_end_matches('.').to_string();
            extra.insert("snippet".into(), snippet.clone());
            slots.insert(format!("snippet_{i}"), snippet);
            let clause = templates.render("also_step", &extra)?;
            text = format!("{}{}.", text.trim_end_matches('.'), clause.trim_end_matches('.'));
        }
        text
    };

    Ok(Explanation {
        text,
        chain: chain.clone(),
        label,
        p_hat,
        no_evidence,
        slots,
    })
}

/// Faithfulness audit: every slot value realized into the text must occur in
/// the chain's evidence tuples (entity labels, groups, surfaces, symbols,
/// snippets) or be a fixed vocabulary item (modality, harm category).
pub fn explanation_is_faithful(expl: &Explanation) -> bool {
    let fixed = ["modality", "harm", "relation_phrase"];
    for (slot, value) in &expl.slots {
        if fixed.iter().any(|f| slot == f || slot.starts_with(f)) {
            continue;
        }
        let grounded = expl.chain.steps.iter().any(|s| {
            s.evidence.entity_label.contains(value)
                || s.evidence.group.contains(value)
                || s.evidence.link.surface.contains(value)
                || s.evidence.symbol.as_deref().is_some_and(|sym| sym.contains(value))
                || s.evidence.snippet.contains(value)
        });
        if !grounded {
            return false;
        }
    }
    true
}
