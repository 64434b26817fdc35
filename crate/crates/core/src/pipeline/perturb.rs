//! Controlled perturbations for robustness evaluation. All four kinds are
//! deterministic under a seed and never touch the label.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::{extract_entities, normalize_token, KnowledgeBase, Modality};
use crate::numerics::Rng;
use crate::pipeline::dataset::MemeRecord;

pub const MASK_TOKEN: &str = "[MASK]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    TextMasking,
    ImageCropping,
    SynonymSubstitution,
    SymbolSubstitution,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 4] = [
        PerturbKind::TextMasking,
        PerturbKind::ImageCropping,
        PerturbKind::SynonymSubstitution,
        PerturbKind::SymbolSubstitution,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PerturbKind::TextMasking => "text_masking",
            PerturbKind::ImageCropping => "image_cropping",
            PerturbKind::SynonymSubstitution => "synonym_substitution",
            PerturbKind::SymbolSubstitution => "symbol_substitution",
        }
    }
}

impl std::str::FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<PerturbKind> {
        PerturbKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown perturbation '{s}' (expected one of text_masking, image_cropping, synonym_substitution, symbol_substitution)"
                ))
            })
    }
}

/// Bundled substitution tables: `token -> synonym` for non-gazetteer text
/// tokens, and `symbol surface -> benign icon` for gazetted symbol tags.
#[derive(Debug, Clone, Default)]
pub struct PerturbTables {
    pub synonyms: BTreeMap<String, String>,
    pub symbol_substitutes: BTreeMap<String, String>,
}

impl PerturbTables {
    pub fn load(synonyms_path: &Path, symbols_path: &Path) -> Result<PerturbTables> {
        Ok(PerturbTables {
            synonyms: load_substitution_table(synonyms_path)?,
            symbol_substitutes: load_substitution_table(symbols_path)?,
        })
    }

    /// The tables bundled with the toy fixtures (same source of truth as
    /// `gen-fixtures`).
    pub fn bundled() -> PerturbTables {
        let parse = |text: &str| {
            text.lines()
                .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
                .filter_map(|l| l.split_once('\t'))
                .map(|(k, v)| (normalize_token(k.trim()), v.trim().to_string()))
                .collect()
        };
        PerturbTables {
            synonyms: parse(&crate::pipeline::toygen::bundled_synonyms_tsv()),
            symbol_substitutes: parse(&crate::pipeline::toygen::bundled_symbol_substitutes_tsv()),
        }
    }
}

/// Parse one `key<TAB>value` table file.
pub fn load_substitution_table(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!("{}:{}: expected 2 tab-separated fields", path.display(), lineno + 1))
        })?;
        if out.insert(normalize_token(k.trim()), v.trim().to_string()).is_some() {
            return Err(Error::Data(format!(
                "{}:{}: duplicate key '{}'",
                path.display(),
                lineno + 1,
                k
            )));
        }
    }
    Ok(out)
}

/// ceil(numer/denom * n) without floating point.
fn ceil_frac(n: usize, numer: usize, denom: usize) -> usize {
    (n * numer).div_ceil(denom)
}

fn record_stream(seed: u64, id: &str) -> Rng {
    // FNV-1a over the id, mixed with the run seed, so each record draws an
    // independent deterministic stream.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    Rng::new(seed ^ h)
}

/// Apply one perturbation. `kb` is required for the two substitution kinds
/// (they are defined relative to gazetteer matches). The output id carries
/// the kind as a suffix; labels, tasks and rationales pass through.
pub fn perturb(
    record: &MemeRecord,
    kind: PerturbKind,
    seed: u64,
    tables: &PerturbTables,
    kb: Option<&KnowledgeBase>,
) -> Result<MemeRecord> {
    let mut out = record.clone();
    out.id = format!("{}__{}", record.id, kind.name());
    match kind {
        PerturbKind::TextMasking => {
            let n = out.text_tokens.len();
            let k = ceil_frac(n, 1, 5);
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = record_stream(seed, &record.id);
            rng.shuffle(&mut order);
            for &i in order.iter().take(k) {
                out.text_tokens[i] = MASK_TOKEN.to_string();
            }
        }
        PerturbKind::ImageCropping => {
            let k = out.image_tags.len();
            let drop = ceil_frac(k, 1, 4);
            out.image_tags.truncate(k - drop);
        }
        PerturbKind::SynonymSubstitution => {
            let kb = kb.ok_or_else(|| {
                Error::Usage("synonym_substitution requires a knowledge base".into())
            })?;
            // Positions covered by any gazetteer match are off-limits.
            let mut covered = vec![false; out.text_tokens.len()];
            for link in extract_entities(record, kb) {
                if link.modality == Modality::Text {
                    for i in link.start..link.start + link.len {
                        covered[i] = true;
                    }
                }
            }
            for (i, tok) in out.text_tokens.iter_mut().enumerate() {
                if covered[i] {
                    continue;
                }
                if let Some(sub) = tables.synonyms.get(&normalize_token(tok)) {
                    *tok = sub.clone();
                }
            }
        }
        PerturbKind::SymbolSubstitution => {
            let kb = kb.ok_or_else(|| {
                Error::Usage("symbol_substitution requires a knowledge base".into())
            })?;
            for tag in out.image_tags.iter_mut() {
                let normalized = normalize_token(tag);
                let is_symbol = kb
                    .lookup_surface(&normalized)
                    .is_some_and(|e| e.symbol_tag.is_some());
                if is_symbol {
                    if let Some(benign) = tables.symbol_substitutes.get(&normalized) {
                        *tag = benign.clone();
                    }
                }
            }
        }
    }
    Ok(out)
}
