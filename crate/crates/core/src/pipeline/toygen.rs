//! Deterministic generator for the bundled fixtures: the knowledge snapshot,
//! the perturbation tables, and the 200-sample planted-symbol corpus with its
//! knowledge-only split.
//!
//! Corpus construction, by design:
//! - every abusive record links at least one symbol-tagged entity and every
//!   benign record links none, so the bag-of-symbols rule (abusive iff any
//!   linked entity carries a symbol tag) scores a macro-F1 of exactly 1.0;
//! - abusive entities share one set of fact tails (hate networks, extremist
//!   emblems) and benign entities another (friendly pastimes, decorative
//!   motifs), so the knowledge rows carry a strong class-consistent
//!   direction; pepe_the_frog keeps its single canonical fact so its
//!   explanation is fully determined;
//! - the knowledge-only records plant two-token markers (red/blue x
//!   wolf/fox) whose class is an XOR over the token pair: each single token
//!   is class-balanced and each abusive/benign record pair shares identical
//!   filler tokens, so no linear read of the surface tokens separates the
//!   classes — only the linked facts do.

use crate::error::Result;
use crate::numerics::Rng;
use crate::pipeline::dataset::{records_to_jsonl, MemeRecord, Task};

pub const TOY_SEED: u64 = 17;

/// All generated fixture payloads, as file contents.
#[derive(Debug, Clone)]
pub struct ToyFixtures {
    pub triples_tsv: String,
    pub gazetteer_tsv: String,
    pub weights_tsv: String,
    pub synonyms_tsv: String,
    pub symbol_substitutes_tsv: String,
    pub corpus: Vec<MemeRecord>,
    pub knowledge_only: Vec<MemeRecord>,
}

struct Symbol {
    entity: &'static str,
    tag_surface: &'static str,
    text_surface: &'static str,
    label: &'static str,
    symbol_tag: &'static str,
    group: &'static str,
}

const SYMBOLS: [Symbol; 5] = [
    Symbol {
        entity: "pepe_the_frog",
        tag_surface: "pepe_the_frog",
        text_surface: "pepe the frog",
        label: "pepe the frog",
        symbol_tag: "alt-right symbol",
        group: "alt-right groups",
    },
    Symbol {
        entity: "crossed_torches",
        tag_surface: "crossed_torches",
        text_surface: "crossed torches",
        label: "crossed torches",
        symbol_tag: "extremist emblem",
        group: "organized hate networks",
    },
    Symbol {
        entity: "iron_serpent",
        tag_surface: "iron_serpent",
        text_surface: "iron serpent",
        label: "iron serpent",
        symbol_tag: "hate symbol",
        group: "organized hate networks",
    },
    Symbol {
        entity: "hooded_owl",
        tag_surface: "hooded_owl",
        text_surface: "hooded owl",
        label: "hooded owl",
        symbol_tag: "coded hate icon",
        group: "organized hate networks",
    },
    Symbol {
        entity: "crimson_spiral",
        tag_surface: "crimson_spiral",
        text_surface: "crimson spiral",
        label: "crimson spiral",
        symbol_tag: "extremist badge",
        group: "organized hate networks",
    },
];

struct Benign {
    entity: &'static str,
    tag_surface: &'static str,
    text_surface: &'static str,
    label: &'static str,
}

const BENIGNS: [Benign; 5] = [
    Benign {
        entity: "kermit_the_frog",
        tag_surface: "kermit_the_frog",
        text_surface: "kermit the frog",
        label: "kermit the frog",
    },
    Benign {
        entity: "garden_torch",
        tag_surface: "garden_torch",
        text_surface: "garden torch",
        label: "garden torch",
    },
    Benign {
        entity: "garden_snake",
        tag_surface: "garden_snake",
        text_surface: "garden snake",
        label: "garden snake",
    },
    Benign {
        entity: "barn_owl",
        tag_surface: "barn_owl",
        text_surface: "barn owl",
        label: "barn owl",
    },
    Benign {
        entity: "rainbow_spiral",
        tag_surface: "rainbow_spiral",
        text_surface: "rainbow spiral",
        label: "rainbow spiral",
    },
];

/// (abusive marker, benign marker) surfaces for the knowledge-only pairs.
/// Alternating the four pair types balances every single token across the
/// classes.
const KO_PAIRS: [(&str, &str); 4] = [
    ("red wolf", "red fox"),
    ("blue fox", "blue wolf"),
    ("red wolf", "blue wolf"),
    ("blue fox", "red fox"),
];

/// Fixed filler phrases. Record pairs share one phrase, so surface variance
/// inside a pair is zero and the phrase pool stays class-balanced. Long
/// phrases keep the pooled representation dominated by shared tokens: the
/// fused knowledge contribution is length-invariant, so more filler dilutes
/// the surface noise without touching the knowledge signal.
const PHRASES: [&str; 4] = [
    "the meme shows a group of people at the party",
    "this picture shows some friends near the school together today",
    "a poster says the meeting starts after lunch for everyone",
    "the caption says people look happy at the big event",
];

const NEUTRAL_TAGS: [&str; 6] = ["crowd", "banner", "photo", "cartoon", "street", "poster"];

/// The shared abusive fact pattern: identical relations and tails across all
/// abusive entities, heads differing only in the entity label. Long shared
/// tails keep the linearized strings dominated by class-consistent tokens.
fn push_abusive_facts(t: &mut String, entity: &str, label: &str) {
    // One tail across all sources: the fact rows of an entity reinforce one
    // shared direction instead of averaging three apart.
    t.push_str(&format!(
        "hatebase\t{entity}\t{label}\tassociated_with\torganized hate networks\tThe {label} mark signals organized hate networks.\n"
    ));
    t.push_str(&format!(
        "wikidata\t{entity}\t{label}\trelated_to\torganized hate networks\tThe {label} figure is tied to organized hate networks.\n"
    ));
    t.push_str(&format!(
        "conceptnet\t{entity}\t{label}\tused_by\torganized hate networks\tThe {label} image is used by organized hate networks.\n"
    ));
}

/// The shared benign fact pattern.
fn push_benign_facts(t: &mut String, entity: &str, label: &str) {
    t.push_str(&format!(
        "conceptnet\t{entity}\t{label}\trelated_to\tfriendly community pastimes\tThe {label} belongs to friendly community pastimes.\n"
    ));
    t.push_str(&format!(
        "wikidata\t{entity}\t{label}\tused_for\tfriendly community pastimes\tThe {label} is used for friendly community pastimes.\n"
    ));
}

fn triples_tsv() -> String {
    let mut t = String::from(
        "# knowledge snapshot v1: source\thead_id\thead_label\trelation\ttail\tsnippet\n",
    );
    // pepe keeps exactly one fact, the canonical sentence, so its evidence
    // chain has a single fully determined top step.
    t.push_str("hatebase\tpepe_the_frog\tPepe the Frog\tassociated_with\talt-right groups\tPepe the Frog was co-opted as an alt-right symbol.\n");
    for s in SYMBOLS.iter().skip(1) {
        push_abusive_facts(&mut t, s.entity, s.label);
    }
    for b in &BENIGNS {
        push_benign_facts(&mut t, b.entity, b.label);
    }
    // Knowledge-only marker entities: same shared fact patterns. Canonical
    // labels avoid the marker tokens so the knowledge rows carry no surface
    // echo of the XOR pair.
    push_abusive_facts(&mut t, "red_wolf_crest", "ashen crest");
    push_abusive_facts(&mut t, "blue_fox_crest", "ember crest");
    push_benign_facts(&mut t, "red_fox_crest", "meadow crest");
    push_benign_facts(&mut t, "blue_wolf_crest", "harbor crest");
    t
}

fn gazetteer_tsv() -> String {
    let mut g = String::from("# gazetteer v1: surface\tentity_id\tsymbol_tag(optional)\n");
    for s in &SYMBOLS {
        g.push_str(&format!("{}\t{}\t{}\n", s.tag_surface, s.entity, s.symbol_tag));
        g.push_str(&format!("{}\t{}\t{}\n", s.text_surface, s.entity, s.symbol_tag));
    }
    for b in &BENIGNS {
        g.push_str(&format!("{}\t{}\n", b.tag_surface, b.entity));
        g.push_str(&format!("{}\t{}\n", b.text_surface, b.entity));
    }
    g.push_str("red wolf\tred_wolf_crest\tunderground hate emblem\n");
    g.push_str("blue fox\tblue_fox_crest\tunderground hate emblem\n");
    g.push_str("red fox\tred_fox_crest\n");
    g.push_str("blue wolf\tblue_wolf_crest\n");
    // A gazetted locality with zero facts; retrieval must tolerate it.
    g.push_str("neighborhood\tneighborhood\n");
    g
}

fn weights_tsv() -> String {
    "# source weights v1\nconceptnet\t0.3\nwikidata\t0.4\nhatebase\t0.3\n".to_string()
}

/// The bundled synonym table (also returned by `generate`).
pub fn bundled_synonyms_tsv() -> String {
    synonyms_tsv()
}

/// The bundled symbol substitution table (also returned by `generate`).
pub fn bundled_symbol_substitutes_tsv() -> String {
    symbol_substitutes_tsv()
}

fn synonyms_tsv() -> String {
    "# synonym table v1: token\tsynonym\n\
     funny\tamusing\n\
     people\tfolks\n\
     look\tglance\n\
     says\texclaims\n\
     today\tnow\n\
     shows\tdepicts\n\
     meme\tpicture\n\
     welcome\tgreetings\n"
        .to_string()
}

fn symbol_substitutes_tsv() -> String {
    let mut s = String::from("# symbol substitutes v1: symbol_surface\tbenign_surface\n");
    for (sym, ben) in SYMBOLS.iter().zip(&BENIGNS) {
        s.push_str(&format!("{}\t{}\n", sym.tag_surface, ben.tag_surface));
    }
    s
}

fn draw_fillers(rng: &mut Rng) -> Vec<String> {
    PHRASES[rng.below(PHRASES.len())]
        .split(' ')
        .map(str::to_string)
        .collect()
}

fn insert_surface(fillers: &[String], surface: &str, pos: usize) -> Vec<String> {
    let mut text: Vec<String> = fillers[..pos].to_vec();
    text.extend(surface.split(' ').map(str::to_string));
    text.extend(fillers[pos..].iter().cloned());
    text
}

fn record(
    id: String,
    text: Vec<String>,
    tags: Vec<String>,
    label: u8,
    task: Task,
    rationale: String,
) -> MemeRecord {
    MemeRecord {
        id,
        text_tokens: text,
        image_tags: tags,
        label: Some(label),
        task: Some(task),
        gold_rationale: Some(rationale),
    }
}

/// Generate the full fixture set for a seed. Byte-stable across runs.
pub fn generate(seed: u64) -> ToyFixtures {
    let mut rng = Rng::new(seed);
    let mut corpus = Vec::new();
    let mut knowledge_only = Vec::new();

    for task in Task::ALL {
        // 12 surface abusive + 12 surface benign, filler-paired: each pair
        // shares fillers, a neutral tag, and the symbol placement, differing
        // only in which entity it mentions.
        for j in 0..12usize {
            let sym = &SYMBOLS[(j + task as usize) % SYMBOLS.len()];
            let ben = &BENIGNS[(j + task as usize) % BENIGNS.len()];
            let fillers = draw_fillers(&mut rng);
            let tag = NEUTRAL_TAGS[rng.below(NEUTRAL_TAGS.len())].to_string();
            let tag2 = NEUTRAL_TAGS[rng.below(NEUTRAL_TAGS.len())].to_string();
            let pos = rng.below(fillers.len() + 1);

            let ab_rationale = format!("detected {} symbol linked to {}", sym.label, sym.group);
            let be_rationale = "no culturally harmful symbol or phrase detected".to_string();

            // Every record encodes to exactly 6 rows (tokens + tags), so the
            // pooled representation has a record-independent scale.
            let (ab, be) = if j % 2 == 0 {
                // Entities in the image tags.
                (
                    record(
                        format!("{}_sab{:02}", task.name(), j),
                        fillers.clone(),
                        vec![sym.tag_surface.to_string(), tag.clone(), tag2.clone()],
                        1,
                        task,
                        ab_rationale,
                    ),
                    record(
                        format!("{}_sbe{:02}", task.name(), j),
                        fillers.clone(),
                        vec![ben.tag_surface.to_string(), tag.clone(), tag2.clone()],
                        0,
                        task,
                        be_rationale,
                    ),
                )
            } else {
                // Entities spelled out in the text.
                (
                    record(
                        format!("{}_sab{:02}", task.name(), j),
                        insert_surface(&fillers, sym.text_surface, pos),
                        vec![tag.clone()],
                        1,
                        task,
                        ab_rationale,
                    ),
                    record(
                        format!("{}_sbe{:02}", task.name(), j),
                        insert_surface(&fillers, ben.text_surface, pos),
                        vec![tag.clone()],
                        0,
                        task,
                        be_rationale,
                    ),
                )
            };
            corpus.push(ab);
            corpus.push(be);
        }

        // 8 knowledge-only pairs; filler-identical inside each pair.
        for p in 0..8usize {
            let (ab_marker, be_marker) = KO_PAIRS[p % KO_PAIRS.len()];
            let fillers = draw_fillers(&mut rng);
            let tag = NEUTRAL_TAGS[p % NEUTRAL_TAGS.len()].to_string();
            let pos = rng.below(fillers.len() + 1);
            let ab = record(
                format!("{}_ko{:02}_ab", task.name(), p),
                insert_surface(&fillers, ab_marker, pos),
                vec![tag.clone()],
                1,
                task,
                format!("detected {} crest linked to hate movements", ab_marker),
            );
            let be = record(
                format!("{}_ko{:02}_be", task.name(), p),
                insert_surface(&fillers, be_marker, pos),
                vec![tag],
                0,
                task,
                "no culturally harmful symbol or phrase detected".to_string(),
            );
            knowledge_only.push(ab.clone());
            knowledge_only.push(be.clone());
            corpus.push(ab);
            corpus.push(be);
        }
    }

    // The canonical running example, planted with a stable id.
    let pepe_idx = corpus
        .iter()
        .position(|r| r.id == "hatefulness_sab00")
        .expect("hatefulness surface slot exists");
    corpus[pepe_idx] = record(
        "pepe_welcome".into(),
        ["welcome", "to", "our", "neighborhood"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        vec!["pepe_the_frog".into()],
        1,
        Task::Hatefulness,
        "detected pepe the frog symbol linked to alt-right groups".into(),
    );

    ToyFixtures {
        triples_tsv: triples_tsv(),
        gazetteer_tsv: gazetteer_tsv(),
        weights_tsv: weights_tsv(),
        synonyms_tsv: synonyms_tsv(),
        symbol_substitutes_tsv: symbol_substitutes_tsv(),
        corpus,
        knowledge_only,
    }
}

/// Write the fixtures under `out`: kb/, perturb/, corpus/.
pub fn write_all(fx: &ToyFixtures, out: &std::path::Path) -> Result<()> {
    let kb = out.join("kb");
    let perturb = out.join("perturb");
    let corpus = out.join("corpus");
    for dir in [&kb, &perturb, &corpus] {
        std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
    }
    crate::pipeline::atomic_write(&kb.join("triples.tsv"), fx.triples_tsv.as_bytes())?;
    crate::pipeline::atomic_write(&kb.join("gazetteer.tsv"), fx.gazetteer_tsv.as_bytes())?;
    crate::pipeline::atomic_write(&kb.join("weights.tsv"), fx.weights_tsv.as_bytes())?;
    crate::pipeline::atomic_write(&perturb.join("synonyms.tsv"), fx.synonyms_tsv.as_bytes())?;
    crate::pipeline::atomic_write(
        &perturb.join("symbol_substitutes.tsv"),
        fx.symbol_substitutes_tsv.as_bytes(),
    )?;
    crate::pipeline::atomic_write(
        &corpus.join("toy_corpus.jsonl"),
        records_to_jsonl(&fx.corpus)?.as_bytes(),
    )?;
    crate::pipeline::atomic_write(
        &corpus.join("toy_knowledge_only.jsonl"),
        records_to_jsonl(&fx.knowledge_only)?.as_bytes(),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{extract_entities, KnowledgeBase};
    use crate::pipeline::dataset::load_dataset;
    use crate::pipeline::metrics::{evaluate, EvalEntry};

    #[test]
    fn corpus_shape_and_balance() {
        let fx = generate(TOY_SEED);
        assert_eq!(fx.corpus.len(), 200);
        assert_eq!(fx.knowledge_only.len(), 80);
        let pos = fx.corpus.iter().filter(|r| r.label == Some(1)).count();
        assert_eq!(pos, 100);
        for task in Task::ALL {
            let n = fx.corpus.iter().filter(|r| r.task == Some(task)).count();
            assert_eq!(n, 40);
        }
        assert!(fx.corpus.iter().any(|r| r.id == "pepe_welcome"));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(TOY_SEED);
        let b = generate(TOY_SEED);
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.triples_tsv, b.triples_tsv);
    }

    #[test]
    fn ko_markers_are_token_balanced_within_tasks() {
        let fx = generate(TOY_SEED);
        // Each marker token (red, blue, wolf, fox) must appear equally often
        // in abusive and benign knowledge-only records.
        for tok in ["red", "blue", "wolf", "fox"] {
            let count = |label: u8| {
                fx.knowledge_only
                    .iter()
                    .filter(|r| r.label == Some(label))
                    .flat_map(|r| &r.text_tokens)
                    .filter(|t| *t == tok)
                    .count()
            };
            assert_eq!(count(0), count(1), "token {tok}");
        }
    }

    /// The corpus-design oracle: classifying "abusive iff any linked entity
    /// carries a symbol tag" must score a perfect macro-F1.
    #[test]
    fn bag_of_symbols_rule_scores_perfect_f1() {
        let dir = tempfile::tempdir().unwrap();
        let fx = generate(TOY_SEED);
        write_all(&fx, dir.path()).unwrap();
        let kb = KnowledgeBase::load(&dir.path().join("kb")).unwrap();
        let corpus = load_dataset(&dir.path().join("corpus/toy_corpus.jsonl")).unwrap();
        assert_eq!(corpus.len(), 200);

        let entries: Vec<EvalEntry> = corpus
            .iter()
            .map(|r| {
                let links = extract_entities(r, &kb);
                let pred = u8::from(links.iter().any(|l| l.symbol_tag.is_some()));
                EvalEntry {
                    id: r.id.clone(),
                    p_hat: pred as f64,
                    pred_label: pred,
                    gold_label: r.label.unwrap(),
                    task: r.task,
                }
            })
            .collect();
        let report = evaluate(&entries).unwrap();
        assert_eq!(report.overall_macro_f1_pct, 100.0);
        assert_eq!(report.overall_accuracy_pct, 100.0);
    }

    /// Drift guard: the committed fixture files must match regeneration.
    #[test]
    fn committed_fixtures_match_generation() {
        let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
        let fx = generate(TOY_SEED);
        let read = |rel: &str| std::fs::read_to_string(root.join(rel)).unwrap();
        assert_eq!(read("kb/triples.tsv"), fx.triples_tsv);
        assert_eq!(read("kb/gazetteer.tsv"), fx.gazetteer_tsv);
        assert_eq!(read("kb/weights.tsv"), fx.weights_tsv);
        assert_eq!(read("perturb/synonyms.tsv"), fx.synonyms_tsv);
        assert_eq!(
            read("perturb/symbol_substitutes.tsv"),
            fx.symbol_substitutes_tsv
        );
        assert_eq!(
            read("corpus/toy_corpus.jsonl"),
            records_to_jsonl(&fx.corpus).unwrap()
        );
        assert_eq!(
            read("corpus/toy_knowledge_only.jsonl"),
            records_to_jsonl(&fx.knowledge_only).unwrap()
        );
    }
}
