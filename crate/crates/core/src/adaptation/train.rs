//! Mini-batch training: Adam moments with decoupled weight decay (decay on
//! adapters and head only, independent of the learning rate), seeded
//! shuffling, and per-epoch loss logging. Deterministic given the seed.

use serde::{Deserialize, Serialize};

use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::knowledge::{
    extract_entities, retrieve_and_aggregate, KnowledgeBase, KnowledgeCache, KnowledgeContext,
};
use crate::numerics::Rng;
use crate::pipeline::dataset::MemeRecord;

use super::model::{
    base_pooled_hmm, flatten_gradients, flatten_trainable, decay_boundary, set_trainable,
    total_loss, ModelParams, TrainableSpec,
};

/// Stage switches for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    #[default]
    None,
    /// Skip knowledge fusion: h_tilde := h_mm.
    Stage1,
    /// No contrastive term (lambda := 0) and adapters frozen at init.
    Stage2,
    /// Skip explanation generation (inference is untouched).
    Stage3,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Ablation> {
        match s {
            "none" => Ok(Ablation::None),
            "stage1" => Ok(Ablation::Stage1),
            "stage2" => Ok(Ablation::Stage2),
            "stage3" => Ok(Ablation::Stage3),
            other => Err(Error::Usage(format!(
                "unknown ablation '{other}' (expected stage1|stage2|stage3)"
            ))),
        }
    }
}

/// Flat training/model configuration; the JSON config file mirrors this
/// struct field for field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Triplet margin (delta).
    pub margin: f64,
    /// Balance between classification and contrastive loss.
    pub lambda: f64,
    /// Semantic share of the hybrid similarity.
    pub lambda_s: f64,
    /// Cultural share of the hybrid similarity.
    pub lambda_c: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub dim: usize,
    pub n_heads: usize,
    pub rank: usize,
    pub alpha: f64,
    pub cap_per_source: usize,
    /// Evidence steps kept in a reasoning chain.
    pub top_m: usize,
    /// Temperature of the evidence softmax.
    pub tau: f64,
    pub train_gate: bool,
    pub train_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 0.01,
            epochs: 3,
            margin: 0.2,
            lambda: 0.5,
            lambda_s: 0.7,
            lambda_c: 0.3,
            batch_size: 4,
            seed: 42,
            dim: 64,
            n_heads: 8,
            rank: 16,
            alpha: 32.0,
            cap_per_source: 4,
            top_m: 3,
            tau: 0.07,
            train_gate: false,
            train_embeddings: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if (self.lambda_s + self.lambda_c - 1.0).abs() > 1e-9 {
            return Err(Error::Usage(format!(
                "lambda_s + lambda_c must be 1, got {} + {}",
                self.lambda_s, self.lambda_c
            )));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Usage(format!("margin must be positive, got {}", self.margin)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Usage(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.dim % self.n_heads != 0 {
            return Err(Error::Usage(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.n_heads
            )));
        }
        if self.rank >= self.dim {
            return Err(Error::Usage(format!(
                "rank {} must be smaller than dim {}",
                self.rank, self.dim
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Usage("batch_size must be at least 2".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Usage(format!("tau must be positive, got {}", self.tau)));
        }
        if self.epochs == 0 {
            return Err(Error::Usage("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Adam moments over the flattened trainable vector. Weight decay is
/// decoupled from the gradient step and from the learning rate: it is
/// applied once per epoch to the coordinates below `decay_boundary`
/// (adapters + head), so `lr = 0` still shrinks decayed parameters while a
/// short run is not clamped to the lr/wd equilibrium.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize) -> Adam {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    fn decay(theta: &mut [f64], wd: f64, decay_until: usize) {
        for t in theta[..decay_until].iter_mut() {
            *t -= wd * *t;
        }
    }
}

/// Per-epoch means of the loss and its parts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub bce: f64,
    pub contrastive: f64,
}

/// Final parameters plus the training trajectory.
#[derive(Debug)]
pub struct TrainResult {
    pub params: ModelParams,
    pub vocab: Vocab,
    pub epochs: Vec<EpochStats>,
}

/// Precompute knowledge contexts for a set of records against one cache.
pub fn build_contexts(
    records: &[MemeRecord],
    kb: &KnowledgeBase,
    cache: &KnowledgeCache,
    cap_per_source: usize,
) -> Vec<KnowledgeContext> {
    records
        .iter()
        .map(|r| {
            let links = extract_entities(r, kb);
            retrieve_and_aggregate(&links, kb, cache, cap_per_source)
        })
        .collect()
}

/// Train on a labeled dataset. Fails fast on an empty or single-class
/// dataset; deterministic for a fixed config and seed.
pub fn train(
    records: &[MemeRecord],
    kb: &KnowledgeBase,
    cfg: &TrainConfig,
    ablation: Ablation,
) -> Result<TrainResult> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    for r in records {
        if r.label.is_none() {
            return Err(Error::Data(format!("record '{}' has no label", r.id)));
        }
    }
    let has_pos = records.iter().any(|r| r.label == Some(1));
    let has_neg = records.iter().any(|r| r.label == Some(0));
    if !has_pos || !has_neg {
        return Err(Error::Data(
            "training dataset must contain both classes".into(),
        ));
    }

    let vocab = Vocab::build(records, kb);
    let mut rng = Rng::new(cfg.seed);
    let mut params = ModelParams::init(&mut rng, vocab.len(), cfg)?;
    let spec = TrainableSpec::from_config(cfg, ablation);

    let cache = KnowledgeCache::new();
    let contexts = build_contexts(records, kb, &cache, cfg.cap_per_source);

    // Mining features depend only on embeddings and the frozen bases, so
    // they are computed once up front and refreshed per batch only when
    // embeddings actually train.
    let mut mine_features: Vec<Vec<f64>> = records
        .iter()
        .map(|r| base_pooled_hmm(r, &vocab, &params.encoder))
        .collect::<Result<Vec<_>>>()?;

    let mut theta = flatten_trainable(&params, &spec);
    let decay_until = decay_boundary(&params, &spec);
    let mut adam = Adam::new(theta.len());
    let mut epochs = Vec::with_capacity(cfg.epochs);

    // Class-stratified batching: shuffle each class with the seeded stream,
    // then interleave, so every batch carries both classes. Mining needs a
    // positive and a negative per anchor, and balanced batches keep the
    // class-symmetric loss from drifting toward one label.
    let mut positives: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].label == Some(1))
        .collect();
    let mut negatives: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].label == Some(0))
        .collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut positives);
        rng.shuffle(&mut negatives);
        let mut order = Vec::with_capacity(records.len());
        let mut pos_iter = positives.iter();
        let mut neg_iter = negatives.iter();
        loop {
            let mut took = false;
            for _ in 0..cfg.batch_size.div_ceil(2) {
                if let Some(&i) = pos_iter.next() {
                    order.push(i);
                    took = true;
                }
            }
            for _ in 0..cfg.batch_size / 2 {
                if let Some(&i) = neg_iter.next() {
                    order.push(i);
                    took = true;
                }
            }
            if !took {
                break;
            }
        }
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.train_embeddings {
                for &i in chunk {
                    mine_features[i] = base_pooled_hmm(&records[i], &vocab, &params.encoder)?;
                }
            }
            let batch_records: Vec<&MemeRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let batch_ctxs: Vec<&KnowledgeContext> = chunk.iter().map(|&i| &contexts[i]).collect();
            let batch_pooled: Vec<Vec<f64>> =
                chunk.iter().map(|&i| mine_features[i].clone()).collect();
            let out = total_loss(
                &batch_records,
                &batch_ctxs,
                &vocab,
                &params,
                kb,
                cfg,
                ablation,
                Some(&batch_pooled),
            )?;
            let grad = flatten_gradients(&out.grads, &spec);
            adam.step(&mut theta, &grad, cfg.lr);
            set_trainable(&mut params, &spec, &theta);
            sums.0 += out.loss;
            sums.1 += out.bce;
            sums.2 += out.contrastive;
            batches += 1;
        }
        Adam::decay(&mut theta, cfg.weight_decay, decay_until);
        set_trainable(&mut params, &spec, &theta);
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: sums.0 / batches as f64,
            bce: sums.1 / batches as f64,
            contrastive: sums.2 / batches as f64,
        };
        println!(
            "epoch {}/{}: loss {:.6} (bce {:.6}, contrastive {:.6})",
            stats.epoch, cfg.epochs, stats.loss, stats.bce, stats.contrastive
        );
        epochs.push(stats);
    }

    Ok(TrainResult {
        params,
        vocab,
        epochs,
    })
}
