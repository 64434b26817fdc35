use std::path::Path;

use crate::encoder::Vocab;
use crate::knowledge::test_fixtures::write_kb;
use crate::knowledge::{KnowledgeBase, KnowledgeCache};
use crate::numerics::{fd_gradient, Matrix, Rng};
use crate::pipeline::dataset::MemeRecord;

use super::loss::floored_cosine_distance;
use super::model::{
    flatten_gradients, flatten_trainable, set_trainable, total_loss, ModelParams, TrainableSpec,
};
use super::train::{build_contexts, train, Ablation, TrainConfig};
use super::*;

fn grad_check_kb(dir: &Path) -> KnowledgeBase {
    write_kb(
        dir,
        "hatebase\ttorch_banner\ttorch banner\tassociated_with\thate movements\tThe torch banner is carried at hate rallies.\n\
         conceptnet\ttorch_banner\ttorch banner\trelated_to\tnight marches\tTorch banners appear at night marches.\n\
         wikidata\ttorch_banner\ttorch banner\tinstance_of\tbanner\tA torch banner is a kind of banner.\n\
         conceptnet\tdove_flag\tdove flag\trelated_to\tpeace rallies\tThe dove flag is flown at peace rallies.\n\
         wikidata\tdove_flag\tdove flag\tinstance_of\tflag\tA dove flag is a kind of flag.\n",
        "torch_banner\ttorch_banner\textremist banner\n\
         dove_flag\tdove_flag\n",
        None,
    );
    KnowledgeBase::load(dir).unwrap()
}

fn record(id: &str, text: &[&str], tags: &[&str], label: u8) -> MemeRecord {
    MemeRecord {
        id: id.into(),
        text_tokens: text.iter().map(|s| s.to_string()).collect(),
        image_tags: tags.iter().map(|s| s.to_string()).collect(),
        label: Some(label),
        task: None,
        gold_rationale: None,
    }
}

fn four_sample_batch() -> Vec<MemeRecord> {
    vec![
        record("m1", &["crowd", "cheering", "loudly"], &["torch_banner"], 1),
        record("m2", &["they", "march", "tonight", "torch_banner"], &[], 1),
        record("m3", &["lovely", "picnic", "outside"], &["dove_flag"], 0),
        record("m4", &["calm", "evening", "dove_flag"], &[], 0),
    ]
}

fn small_config() -> TrainConfig {
    TrainConfig {
        dim: 16,
        n_heads: 4,
        rank: 4,
        batch_size: 4,
        train_gate: true,
        train_embeddings: true,
        seed: 7,
        ..TrainConfig::default()
    }
}

/// The acceptance-grade gradient check: every analytic coordinate of
/// total_loss against central differences on the fixed 4-sample, d=16
/// configuration, all parameter groups trainable.
#[test]
fn total_loss_gradients_match_finite_differences() {
    let dir = tempfile::tempdir().unwrap();
    let kb = grad_check_kb(dir.path());
    let records = four_sample_batch();
    let cfg = small_config();
    let vocab = Vocab::build(&records, &kb);
    let mut rng = Rng::new(cfg.seed);
    let mut params = ModelParams::init(&mut rng, vocab.len(), &cfg).unwrap();
    // Generic point in parameter space: B must be nonzero or the A-gradient
    // path vanishes identically, and a nonzero head activates the z path.
    for ad in &mut params.adapters {
        let fill = rng.uniform_matrix(ad.b.rows(), ad.b.cols(), 0.05);
        ad.b = fill;
    }
    params.head.w = rng.uniform_vec(cfg.dim, 0.3);
    params.head.b = rng.uniform(-0.1, 0.1);

    let cache = KnowledgeCache::new();
    let ctxs = build_contexts(&records, &kb, &cache, cfg.cap_per_source);
    let record_refs: Vec<&MemeRecord> = records.iter().collect();
    let ctx_refs: Vec<&crate::knowledge::KnowledgeContext> = ctxs.iter().collect();

    let spec = TrainableSpec::all();
    let out = total_loss(
        &record_refs,
        &ctx_refs,
        &vocab,
        &params,
        &kb,
        &cfg,
        Ablation::None,
        None,
    )
    .unwrap();
    // The fixture must exercise both loss parts.
    assert!(out.bce > 0.0);
    assert!(!out.triplets.is_empty());
    assert!(out.contrastive > 0.0, "need an active hinge: {}", out.contrastive);

    let theta0 = flatten_trainable(&params, &spec);
    let analytic = flatten_gradients(&out.grads, &spec);
    assert_eq!(theta0.len(), analytic.len());

    let fd = fd_gradient(
        |theta| {
            let mut p = params.clone();
            set_trainable(&mut p, &spec, theta);
            total_loss(
                &record_refs,
                &ctx_refs,
                &vocab,
                &p,
                &kb,
                &cfg,
                Ablation::None,
                None,
            )
            .unwrap()
            .loss
        },
        &theta0,
        1e-5,
    )
    .unwrap();

    let mut worst = (0usize, 0.0f64);
    for (i, (a, f)) in analytic.iter().zip(&fd).enumerate() {
        let err = (a - f).abs();
        let tol = 1e-4 * f.abs() + 1e-7;
        if err / tol > worst.1 {
            worst = (i, err / tol);
        }
        assert!(
            err <= tol,
            "coordinate {i}: analytic {a} vs fd {f} (err {err:.3e}, tol {tol:.3e})"
        );
    }
    println!("gradient check worst ratio: {:.4} at coordinate {}", worst.1, worst.0);
}

#[test]
fn fresh_adapters_leave_predictions_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let kb = grad_check_kb(dir.path());
    let records = four_sample_batch();
    let cfg = small_config();
    let vocab = Vocab::build(&records, &kb);
    let mut rng = Rng::new(11);
    let params = ModelParams::init(&mut rng, vocab.len(), &cfg).unwrap();
    let cache = KnowledgeCache::new();
    let ctxs = build_contexts(&records, &kb, &cache, cfg.cap_per_source);

    let adapted_self = params.effective_self_attn().unwrap();
    let adapted_cross = params.effective_cross_attn().unwrap();
    let base_self = params.encoder.self_attn();
    let base_cross = params.fusion.cross_attn();
    for (r, ctx) in records.iter().zip(&ctxs) {
        let with = forward_sample(r, ctx, &vocab, &params, &adapted_self, &adapted_cross, Ablation::None)
            .unwrap();
        let without = forward_sample(r, ctx, &vocab, &params, &base_self, &base_cross, Ablation::None)
            .unwrap();
        assert_eq!(with.p_hat.to_bits(), without.p_hat.to_bits());
        assert_eq!(with.h_tilde, without.h_tilde);
    }
}

#[test]
fn lambda_zero_reduces_loss_to_bce() {
    let dir = tempfile::tempdir().unwrap();
    let kb = grad_check_kb(dir.path());
    let records = four_sample_batch();
    let mut cfg = small_config();
    cfg.lambda = 0.0;
    let vocab = Vocab::build(&records, &kb);
    let mut rng = Rng::new(3);
    let params = ModelParams::init(&mut rng, vocab.len(), &cfg).unwrap();
    let cache = KnowledgeCache::new();
    let ctxs = build_contexts(&records, &kb, &cache, cfg.cap_per_source);
    let record_refs: Vec<&MemeRecord> = records.iter().collect();
    let ctx_refs: Vec<&crate::knowledge::KnowledgeContext> = ctxs.iter().collect();
    let out = total_loss(
        &record_refs, &ctx_refs, &vocab, &params, &kb, &cfg, Ablation::None, None,
    )
    .unwrap();
    assert_eq!(out.loss.to_bits(), out.bce.to_bits());
}

#[test]
fn batch_without_valid_triplets_is_pure_bce() {
    let dir = tempfile::tempdir().unwrap();
    let kb = grad_check_kb(dir.path());
    // Single-label batch: no negatives exist, so no triplets.
    let records = vec![
        record("a", &["crowd"], &["torch_banner"], 1),
        record("b", &["march"], &["torch_banner"], 1),
    ];
    let cfg = small_config();
    let vocab = Vocab::build(&records, &kb);
    let mut rng = Rng::new(5);
    let params = ModelParams::init(&mut rng, vocab.len(), &cfg).unwrap();
    let cache = KnowledgeCache::new();
    let ctxs = build_contexts(&records, &kb, &cache, cfg.cap_per_source);
    let record_refs: Vec<&MemeRecord> = records.iter().collect();
    let ctx_refs: Vec<&crate::knowledge::KnowledgeContext> = ctxs.iter().collect();
    let out = total_loss(
        &record_refs, &ctx_refs, &vocab, &params, &kb, &cfg, Ablation::None, None,
    )
    .unwrap();
    assert!(out.triplets.is_empty());
    assert_eq!(out.contrastive, 0.0);
    assert_eq!(out.loss.to_bits(), out.bce.to_bits());
}

#[test]
fn zero_lr_only_decays_and_zero_wd_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let kb = grad_check_kb(dir.path());
    let records = four_sample_batch();
    let mut cfg = small_config();
    cfg.lr = 0.0;
    cfg.epochs = 2;
    cfg.train_gate = false;
    cfg.train_embeddings = false;

    // Reference init: same seed, same draw order.
    let vocab = Vocab::build(&records, &kb);
    let mut rng = Rng::new(cfg.seed);
    let init = ModelParams::init(&mut rng, vocab.len(), &cfg).unwrap();

    let result = train(&records, &kb, &cfg, Ablation::None).unwrap();
    // Base projections, gate, embeddings: untouched.
    assert_eq!(result.params.encoder.w_q, init.encoder.w_q);
    assert_eq!(result.params.encoder.embedding, init.encoder.embedding);
    assert_eq!(result.params.fusion.gate_w, init.fusion.gate_w);
    // Trainables: pure decay, theta *= (1 - wd) once per step.
    let steps = cfg.epochs; // 4 records, batch 4 -> one step per epoch
    for (got, want) in result.params.adapters.iter().zip(&init.adapters) {
        let mut expect = want.a.clone();
        for _ in 0..steps {
            for v in expect.data_mut() {
                *v -= cfg.weight_decay * *v;
            }
        }
        assert_eq!(got.a, expect);
        assert!(got.b.is_all_zero());
    }

    // And with wd = 0 as well: bit-identical to init.
    cfg.weight_decay = 0.0;
    let result = train(&records, &kb, &cfg, Ablation::None).unwrap();
    let a = serde_json::to_string(&result.params).unwrap();
    let b = serde_json::to_string(&init).unwrap();
    assert_eq!(a, b);
}

#[test]
fn separable_two_sample_training_loss_strictly_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let kb = grad_check_kb(dir.path());
    let records = vec![
        record("pos", &["crowd", "cheering"], &["torch_banner"], 1),
        record("neg", &["lovely", "picnic"], &["dove_flag"], 0),
    ];
    let mut cfg = small_config();
    cfg.batch_size = 2;
    let result = train(&records, &kb, &cfg, Ablation::None).unwrap();
    assert_eq!(result.epochs.len(), 3);
    assert!(
        result.epochs[0].loss > result.epochs[1].loss
            && result.epochs[1].loss > result.epochs[2].loss,
        "losses: {:?}",
        result.epochs.iter().map(|e| e.loss).collect::<Vec<_>>()
    );
}

#[test]
fn frozen_base_invariant_after_training() {
    let dir = tempfile::tempdir().unwrap();
    let kb = grad_check_kb(dir.path());
    let records = four_sample_batch();
    let cfg = TrainConfig {
        lr: 1e-3,
        epochs: 2,
        ..small_config()
    };
    let vocab = Vocab::build(&records, &kb);
    let mut rng = Rng::new(cfg.seed);
    let init = ModelParams::init(&mut rng, vocab.len(), &cfg).unwrap();

    let result = train(&records, &kb, &cfg, Ablation::None).unwrap();
    for (a, b) in [
        (&result.params.encoder.w_q, &init.encoder.w_q),
        (&result.params.encoder.w_k, &init.encoder.w_k),
        (&result.params.encoder.w_v, &init.encoder.w_v),
        (&result.params.encoder.w_o, &init.encoder.w_o),
        (&result.params.fusion.w_q, &init.fusion.w_q),
        (&result.params.fusion.w_k, &init.fusion.w_k),
        (&result.params.fusion.w_v, &init.fusion.w_v),
        (&result.params.fusion.w_o, &init.fusion.w_o),
    ] {
        assert_eq!(a, b, "base projection changed during training");
    }
    // While the adapters did move.
    assert!(result
        .params
        .adapters
        .iter()
        .any(|ad| !ad.b.is_all_zero()));
}

#[test]
fn stage2_ablation_keeps_adapters_at_init() {
    let dir = tempfile::tempdir().unwrap();
    let kb = grad_check_kb(dir.path());
    let records = four_sample_batch();
    let cfg = TrainConfig {
        lr: 1e-3,
        ..small_config()
    };
    let vocab = Vocab::build(&records, &kb);
    let mut rng = Rng::new(cfg.seed);
    let init = ModelParams::init(&mut rng, vocab.len(), &cfg).unwrap();

    let result = train(&records, &kb, &cfg, Ablation::Stage2).unwrap();
    for (got, want) in result.params.adapters.iter().zip(&init.adapters) {
        assert_eq!(got.a, want.a);
        assert!(got.b.is_all_zero());
    }
    // Head still trains.
    assert_ne!(result.params.head.w, init.head.w);
}

#[test]
fn training_is_deterministic_given_seed() {
    let dir = tempfile::tempdir().unwrap();
    let kb = grad_check_kb(dir.path());
    let records = four_sample_batch();
    let cfg = small_config();
    let a = train(&records, &kb, &cfg, Ablation::None).unwrap();
    let b = train(&records, &kb, &cfg, Ablation::None).unwrap();
    assert_eq!(
        serde_json::to_string(&a.params).unwrap(),
        serde_json::to_string(&b.params).unwrap()
    );
}

#[test]
fn train_rejects_single_class_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let kb = grad_check_kb(dir.path());
    let records = vec![
        record("a", &["crowd"], &[], 1),
        record("b", &["march"], &[], 1),
    ];
    let err = train(&records, &kb, &small_config(), Ablation::None)
        .unwrap_err()
        .to_string();
    assert!(err.contains("both classes"), "{err}");
}

#[test]
fn hybrid_similarity_identity_and_orthogonal_cases() {
    let dir = tempfile::tempdir().unwrap();
    let kb = grad_check_kb(dir.path());
    let records = four_sample_batch();
    let cache = KnowledgeCache::new();
    let ctxs = build_contexts(&records, &kb, &cache, 4);
    let cfg = small_config();

    // Identical samples: lambda_s * 1 + lambda_c * cultRel(x, x).
    let pooled = vec![0.3, -0.2, 0.9];
    let s = hybrid_similarity(
        &pooled,
        &pooled,
        &ctxs[0].links,
        &ctxs[0].links,
        &kb,
        cfg.lambda_s,
        cfg.lambda_c,
    );
    let cr = crate::knowledge::cult_rel(&ctxs[0].links, &ctxs[0].links, &kb);
    assert!((s - (cfg.lambda_s + cfg.lambda_c * cr)).abs() < 1e-12);

    // Orthogonal pooled vectors, disjoint entities.
    let s0 = hybrid_similarity(
        &[1.0, 0.0],
        &[0.0, 1.0],
        &ctxs[0].links,
        &ctxs[2].links,
        &kb,
        cfg.lambda_s,
        cfg.lambda_c,
    );
    assert!(s0.abs() < 1e-12, "{s0}");
}

#[test]
fn four_sample_pair_ranking_matches_brute_force() {
    let dir = tempfile::tempdir().unwrap();
    let kb = grad_check_kb(dir.path());
    let records = four_sample_batch();
    let cache = KnowledgeCache::new();
    let ctxs = build_contexts(&records, &kb, &cache, 4);
    let cfg = small_config();
    let mut rng = Rng::new(13);
    let pooled: Vec<Vec<f64>> = (0..4).map(|_| rng.uniform_vec(6, 1.0)).collect();

    let s = |i: usize, j: usize| {
        hybrid_similarity(
            &pooled[i],
            &pooled[j],
            &ctxs[i].links,
            &ctxs[j].links,
            &kb,
            cfg.lambda_s,
            cfg.lambda_c,
        )
    };
    // Brute-force oracle: recompute from the raw formula.
    let oracle = |i: usize, j: usize| {
        let cos = 1.0 - floored_cosine_distance(&pooled[i], &pooled[j]);
        cfg.lambda_s * cos
            + cfg.lambda_c * crate::knowledge::cult_rel(&ctxs[i].links, &ctxs[j].links, &kb)
    };
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                pairs.push((i, j));
                assert!((s(i, j) - oracle(i, j)).abs() < 1e-12);
            }
        }
    }
    let mut by_impl = pairs.clone();
    by_impl.sort_by(|a, b| s(a.0, a.1).partial_cmp(&s(b.0, b.1)).unwrap());
    let mut by_oracle = pairs;
    by_oracle.sort_by(|a, b| oracle(a.0, a.1).partial_cmp(&oracle(b.0, b.1)).unwrap());
    assert_eq!(by_impl, by_oracle);
}

#[test]
fn mining_invariant_under_positive_rescaling() {
    let dir = tempfile::tempdir().unwrap();
    let kb = grad_check_kb(dir.path());
    let cfg = small_config();
    let mut rng = Rng::new(23);
    for &scale in &[2.0, 3.7, 0.25] {
        let n = 8;
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let pooled: Vec<Vec<f64>> = (0..n).map(|_| rng.uniform_vec(10, 1.0)).collect();
        let links: Vec<Vec<crate::knowledge::EntityLink>> = vec![Vec::new(); n];

        let sim_of = |vecs: &[Vec<f64>]| {
            let mut m = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        m.set(
                            i,
                            j,
                            hybrid_similarity(
                                &vecs[i], &vecs[j], &links[i], &links[j], &kb,
                                cfg.lambda_s, cfg.lambda_c,
                            ),
                        );
                    }
                }
            }
            m
        };
        let base = mine_triplets(&labels, &sim_of(&pooled));
        let scaled: Vec<Vec<f64>> = pooled
            .iter()
            .map(|v| v.iter().map(|x| x * scale).collect())
            .collect();
        let rescaled = mine_triplets(&labels, &sim_of(&scaled));
        assert_eq!(base, rescaled, "scale {scale}");
    }
}
