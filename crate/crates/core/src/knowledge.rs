//! Local knowledge snapshots, gazetteer entity linking, fact retrieval with
//! caching, triple linearization, and cultural relatedness.
//!
//! Snapshots are TSV fixtures standing in for the three live knowledge
//! sources; the linking interface (entities from both modalities, mapped to
//! knowledge-base entries) is preserved exactly while the extraction itself
//! is a deterministic longest-match over pre-extracted tokens and tags.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pipeline::dataset::MemeRecord;

/// Knowledge source, in canonical aggregation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    ConceptNet,
    Wikidata,
    Hatebase,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::ConceptNet, Source::Wikidata, Source::Hatebase];

    fn parse(s: &str) -> Option<Source> {
        match s {
            "conceptnet" => Some(Source::ConceptNet),
            "wikidata" => Some(Source::Wikidata),
            "hatebase" => Some(Source::Hatebase),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Source::ConceptNet => "conceptnet",
            Source::Wikidata => "wikidata",
            Source::Hatebase => "hatebase",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-source aggregation weights; must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceWeights {
    pub conceptnet: f64,
    pub wikidata: f64,
    pub hatebase: f64,
}

impl Default for SourceWeights {
    fn default() -> Self {
        SourceWeights {
            conceptnet: 0.3,
            wikidata: 0.4,
            hatebase: 0.3,
        }
    }
}

impl SourceWeights {
    pub fn get(&self, s: Source) -> f64 {
        match s {
            Source::ConceptNet => self.conceptnet,
            Source::Wikidata => self.wikidata,
            Source::Hatebase => self.hatebase,
        }
    }

    fn validate(&self) -> Result<()> {
        let sum = self.conceptnet + self.wikidata + self.hatebase;
        if self.conceptnet < 0.0 || self.wikidata < 0.0 || self.hatebase < 0.0 {
            return Err(Error::Data("negative knowledge source weight".into()));
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!(
                "knowledge source weights sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// One knowledge fact. `id` is the stable load-order index used for
/// deterministic ordering and deduplication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub id: usize,
    pub source: Source,
    pub head_id: String,
    pub head_label: String,
    pub relation: String,
    pub tail: String,
    pub snippet: String,
}

const MAX_SNIPPET_CHARS: usize = 200;

/// Gazetteer target: entity plus optional cultural symbol tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazetteerEntry {
    pub entity_id: String,
    pub symbol_tag: Option<String>,
}

/// Immutable-after-load snapshot of all three sources plus the surface-form
/// gazetteer used for entity linking.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    triples: Vec<Triple>,
    by_head: BTreeMap<String, Vec<usize>>,
    gazetteer: BTreeMap<String, GazetteerEntry>,
    max_surface_tokens: usize,
    weights: SourceWeights,
    snapshot_hash: String,
}

/// Lower-case + Unicode NFC; the only text normalization in the system.
pub fn normalize_token(token: &str) -> String {
    let lower = token.to_lowercase();
    icu_normalizer::ComposingNormalizerBorrowed::new_nfc()
        .normalize(&lower)
        .into_owned()
}

fn read_snapshot_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl KnowledgeBase {
    /// Load a snapshot directory holding `triples.tsv` and `gazetteer.tsv`,
    /// plus an optional `weights.tsv` overriding the default source weights.
    pub fn load(dir: &Path) -> Result<KnowledgeBase> {
        let triples_path = dir.join("triples.tsv");
        let gazetteer_path = dir.join("gazetteer.tsv");
        let weights_path = dir.join("weights.tsv");

        let triples_text = read_snapshot_file(&triples_path)?;
        let gazetteer_text = read_snapshot_file(&gazetteer_path)?;
        let weights_text = if weights_path.exists() {
            Some(read_snapshot_file(&weights_path)?)
        } else {
            None
        };

        let mut hasher = Sha256::new();
        hasher.update(triples_text.as_bytes());
        hasher.update(gazetteer_text.as_bytes());
        if let Some(w) = &weights_text {
            hasher.update(w.as_bytes());
        }
        let snapshot_hash = hex_digest(hasher);

        let triples = parse_triples(&triples_path, &triples_text)?;
        let gazetteer = parse_gazetteer(&gazetteer_path, &gazetteer_text)?;
        let weights = match &weights_text {
            Some(text) => parse_weights(&weights_path, text)?,
            None => SourceWeights::default(),
        };
        weights.validate()?;

        let mut by_head: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for t in &triples {
            by_head.entry(t.head_id.clone()).or_default().push(t.id);
        }
        let max_surface_tokens = gazetteer
            .keys()
            .map(|k| k.split(' ').count())
            .max()
            .unwrap_or(0);

        Ok(KnowledgeBase {
            triples,
            by_head,
            gazetteer,
            max_surface_tokens,
            weights,
            snapshot_hash,
        })
    }

    pub fn weights(&self) -> SourceWeights {
        self.weights
    }

    pub fn snapshot_hash(&self) -> &str {
        &self.snapshot_hash
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn triple(&self, id: usize) -> &Triple {
        &self.triples[id]
    }

    pub fn gazetteer(&self) -> &BTreeMap<String, GazetteerEntry> {
        &self.gazetteer
    }

    /// Entity id for a normalized surface form, if gazetted.
    pub fn lookup_surface(&self, surface: &str) -> Option<&GazetteerEntry> {
        self.gazetteer.get(surface)
    }

    /// Triple ids of one entity restricted to one source, in load order.
    pub fn triples_for(&self, entity_id: &str, source: Source) -> Vec<usize> {
        self.by_head
            .get(entity_id)
            .map(|ids| {
                ids.iter()
                    .copied()
                    .filter(|&i| self.triples[i].source == source)
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Sources an entity has at least one triple in.
    pub fn sources_of(&self, entity_id: &str) -> BTreeSet<Source> {
        self.by_head
            .get(entity_id)
            .map(|ids| ids.iter().map(|&i| self.triples[i].source).collect())
            .unwrap_or_default()
    }
}

fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn parse_triples(path: &Path, text: &str) -> Result<Vec<Triple>> {
    let mut triples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let err = |msg: &str| {
            Error::Data(format!("{}:{}: {}", path.display(), lineno + 1, msg))
        };
        if fields.len() != 6 {
            return Err(err(&format!("expected 6 tab-separated fields, got {}", fields.len())));
        }
        let source = Source::parse(fields[0])
            .ok_or_else(|| err(&format!("unknown source '{}'", fields[0])))?;
        let head_id = fields[1].trim();
        let head_label = fields[2].trim();
        let relation = fields[3].trim();
        let tail = fields[4].trim();
        let snippet = fields[5].trim();
        if head_id.is_empty() || relation.is_empty() {
            return Err(err("empty head or relation"));
        }
        if snippet.is_empty() {
            return Err(err("empty snippet"));
        }
        if snippet.chars().count() > MAX_SNIPPET_CHARS {
            return Err(err(&format!("snippet longer than {MAX_SNIPPET_CHARS} characters")));
        }
        triples.push(Triple {
            id: triples.len(),
            source,
            head_id: head_id.to_string(),
            head_label: normalize_token(head_label),
            relation: relation.to_string(),
            tail: tail.to_string(),
            snippet: snippet.to_string(),
        });
    }
    Ok(triples)
}

fn parse_gazetteer(path: &Path, text: &str) -> Result<BTreeMap<String, GazetteerEntry>> {
    let mut gazetteer = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let err = |msg: String| Error::Data(format!("{}:{}: {}", path.display(), lineno + 1, msg));
        if fields.len() < 2 || fields.len() > 3 {
            return Err(err(format!(
                "expected 2-3 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let surface: Vec<String> = fields[0]
            .split_whitespace()
            .map(normalize_token)
            .collect();
        if surface.is_empty() || fields[1].trim().is_empty() {
            return Err(err("empty surface or entity id".into()));
        }
        let key = surface.join(" ");
        let symbol_tag = fields
            .get(2)
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        let entry = GazetteerEntry {
            entity_id: fields[1].trim().to_string(),
            symbol_tag,
        };
        if gazetteer.insert(key.clone(), entry).is_some() {
            return Err(err(format!("duplicate gazetteer surface '{key}'")));
        }
    }
    Ok(gazetteer)
}

fn parse_weights(path: &Path, text: &str) -> Result<SourceWeights> {
    let mut weights = SourceWeights::default();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Data(format!("{}:{}: {}", path.display(), lineno + 1, msg));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(err(format!("expected 2 fields, got {}", fields.len())));
        }
        let source = Source::parse(fields[0])
            .ok_or_else(|| err(format!("unknown source '{}'", fields[0])))?;
        let value: f64 = fields[1]
            .trim()
            .parse()
            .map_err(|e| err(format!("bad weight '{}': {e}", fields[1])))?;
        match source {
            Source::ConceptNet => weights.conceptnet = value,
            Source::Wikidata => weights.wikidata = value,
            Source::Hatebase => weights.hatebase = value,
        }
    }
    Ok(weights)
}

/// Which token list a link was matched in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub fn name(&self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }
}

/// A gazetteer match: token span, linked entity, optional symbol tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityLink {
    pub modality: Modality,
    /// Start index into the (normalized) token or tag list of its modality.
    pub start: usize,
    pub len: usize,
    /// Normalized matched surface, tokens joined by single spaces.
    pub surface: String,
    pub entity_id: String,
    pub symbol_tag: Option<String>,
}

/// Left-to-right, longest-match, non-overlapping gazetteer linking over the
/// record's text tokens, then its image tags. Ties: earlier start wins, then
/// the longer span; text links always precede image links in the output.
pub fn extract_entities(record: &MemeRecord, kb: &KnowledgeBase) -> Vec<EntityLink> {
    let text: Vec<String> = record.text_tokens.iter().map(|t| normalize_token(t)).collect();
    let tags: Vec<String> = record.image_tags.iter().map(|t| normalize_token(t)).collect();
    let mut links = scan_tokens(&text, kb, Modality::Text);
    links.extend(scan_tokens(&tags, kb, Modality::Image));
    links
}

fn scan_tokens(tokens: &[String], kb: &KnowledgeBase, modality: Modality) -> Vec<EntityLink> {
    let mut links = Vec::new();
    let max_len = kb.max_surface_tokens.min(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        let mut matched = None;
        for len in (1..=max_len.min(tokens.len() - i)).rev() {
            let surface = tokens[i..i + len].join(" ");
            if let Some(entry) = kb.lookup_surface(&surface) {
                matched = Some((len, surface, entry.clone()));
                break;
            }
        }
        match matched {
            Some((len, surface, entry)) => {
                links.push(EntityLink {
                    modality,
                    start: i,
                    len,
                    surface,
                    entity_id: entry.entity_id,
                    symbol_tag: entry.symbol_tag,
                });
                i += len;
            }
            None => i += 1,
        }
    }
    links
}

/// One retrieved fact: the triple, its source weight, and the link (index
/// into `KnowledgeContext::links`) it was retrieved for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    pub triple: Triple,
    pub weight: f64,
    pub link_idx: usize,
}

/// Stage I output for one record: links, weighted facts, linearized strings.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KnowledgeContext {
    pub links: Vec<EntityLink>,
    pub facts: Vec<Fact>,
    pub linearized: Vec<String>,
}

/// Per-entity lookup cache. Hits must be indistinguishable from misses, so
/// the cached value is exactly the deterministic capped triple selection and
/// the key includes the cap it was computed under.
#[derive(Debug, Default)]
pub struct KnowledgeCache {
    entries: Mutex<HashMap<(String, usize), Arc<Vec<usize>>>>,
}

#[derive(Serialize, Deserialize)]
struct CacheSnapshot {
    kb_hash: String,
    entries: Vec<(String, usize, Vec<usize>)>,
}

impl KnowledgeCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn get_or_insert(
        &self,
        entity_id: &str,
        cap: usize,
        compute: impl FnOnce() -> Vec<usize>,
    ) -> Arc<Vec<usize>> {
        let mut entries = self.entries.lock().expect("cache lock poisoned");
        entries
            .entry((entity_id.to_string(), cap))
            .or_insert_with(|| Arc::new(compute()))
            .clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Persist to a single snapshot file, keyed by the KB hash.
    pub fn save(&self, path: &Path, kb: &KnowledgeBase) -> Result<()> {
        let entries = self.entries.lock().expect("cache lock poisoned");
        let mut rows: Vec<(String, usize, Vec<usize>)> = entries
            .iter()
            .map(|((id, cap), v)| (id.clone(), *cap, v.as_ref().clone()))
            .collect();
        rows.sort();
        let snapshot = CacheSnapshot {
            kb_hash: kb.snapshot_hash().to_string(),
            entries: rows,
        };
        let text = serde_json::to_string(&snapshot)
            .map_err(|e| Error::Data(format!("serialize cache: {e}")))?;
        crate::pipeline::atomic_write(path, text.as_bytes())
    }

    /// Load a persisted cache. A hash mismatch discards the snapshot (with a
    /// warning on stderr) rather than serving stale lookups.
    pub fn load(path: &Path, kb: &KnowledgeBase) -> Result<KnowledgeCache> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let snapshot: CacheSnapshot = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: malformed cache: {e}", path.display())))?;
        let cache = KnowledgeCache::new();
        if snapshot.kb_hash != kb.snapshot_hash() {
            eprintln!(
                "warning: cache {} was built against a different knowledge snapshot; starting empty",
                path.display()
            );
            return Ok(cache);
        }
        let mut entries = cache.entries.lock().expect("cache lock poisoned");
        for (id, cap, v) in snapshot.entries {
            entries.insert((id, cap), Arc::new(v));
        }
        drop(entries);
        Ok(cache)
    }
}

pub const DEFAULT_CAP_PER_SOURCE: usize = 4;

/// Retrieve up to `cap_per_source` triples per source for every link, pair
/// each with its source weight, and linearize. Facts of an entity shared by
/// several links appear once (first link wins); order is (link order, source
/// order, triple id) throughout.
pub fn retrieve_and_aggregate(
    links: &[EntityLink],
    kb: &KnowledgeBase,
    cache: &KnowledgeCache,
    cap_per_source: usize,
) -> KnowledgeContext {
    let mut facts = Vec::new();
    let mut seen: BTreeSet<(String, usize)> = BTreeSet::new();
    for (link_idx, link) in links.iter().enumerate() {
        let selection = cache.get_or_insert(&link.entity_id, cap_per_source, || {
            let mut ids = Vec::new();
            for source in Source::ALL {
                ids.extend(
                    kb.triples_for(&link.entity_id, source)
                        .into_iter()
                        .take(cap_per_source),
                );
            }
            ids
        });
        for &triple_id in selection.iter() {
            if !seen.insert((link.entity_id.clone(), triple_id)) {
                continue;
            }
            let triple = kb.triple(triple_id).clone();
            let weight = kb.weights().get(triple.source);
            facts.push(Fact {
                triple,
                weight,
                link_idx,
            });
        }
    }
    let linearized = facts.iter().map(|f| linearize(&f.triple)).collect();
    KnowledgeContext {
        links: links.to_vec(),
        facts,
        linearized,
    }
}

/// Fixed relation -> connecting-phrase table for linearization.
fn relation_phrase(relation: &str) -> Option<&'static str> {
    Some(match relation {
        "associated_with" => "is associated with",
        "symbol_of" => "is a symbol of",
        "related_to" => "is related to",
        "instance_of" => "is an instance of",
        "subclass_of" => "is a kind of",
        "used_by" => "is used by",
        "used_for" => "is used for",
        "depicts" => "depicts",
        "promotes" => "promotes",
        "targets" => "targets",
        "originated_in" => "originated in",
        "part_of" => "is part of",
        _ => return None,
    })
}

/// Render a triple as one human-readable sentence. Unknown relations fall
/// back to the raw relation string; never fails.
pub fn linearize(t: &Triple) -> String {
    match relation_phrase(&t.relation) {
        Some(phrase) => format!("{} {} {}.", t.head_label, phrase, t.tail),
        None => format!("{} {} {}.", t.head_label, t.relation, t.tail),
    }
}

/// Cultural relatedness of two link sets: source-weighted Jaccard over linked
/// entity ids, where an entity counts toward a source iff it has at least one
/// triple there. Empty-vs-empty per source contributes 0.
pub fn cult_rel(e1: &[EntityLink], e2: &[EntityLink], kb: &KnowledgeBase) -> f64 {
    let ids = |links: &[EntityLink], source: Source| -> BTreeSet<String> {
        links
            .iter()
            .filter(|l| kb.sources_of(&l.entity_id).contains(&source))
            .map(|l| l.entity_id.clone())
            .collect()
    };
    let mut total = 0.0;
    for source in Source::ALL {
        let a = ids(e1, source);
        let b = ids(e2, source);
        let union = a.union(&b).count();
        if union == 0 {
            continue;
        }
        let inter = a.intersection(&b).count();
        total += kb.weights().get(source) * inter as f64 / union as f64;
    }
    total
}
