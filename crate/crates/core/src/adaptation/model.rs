//! The full trainable model and its hand-derived reverse pass.
//!
//! Forward: token rows -> adapted self-attention -> h_mm -> gated
//! cross-attention over the knowledge rows -> h_tilde -> pooled sigmoid head.
//! The contrastive term pools h_tilde, while triplet mining ranks samples by
//! the *base* (unadapted) pre-fusion representation, which stays constant
//! while embeddings are frozen and is therefore cacheable across epochs.
//! Mined indices are treated as constants by the gradients; base projection
//! matrices are frozen and only the adapters train.

use serde::{Deserialize, Serialize};

use crate::attention::{attention_backward, AttnProjections};
use crate::encoder::{
    encode_knowledge_rows, encode_meme_with, EncoderParams, KnowledgeEncoding, MemeEncoding,
    Vocab,
};
use crate::error::{Error, Result};
use crate::fusion::{fuse_backward, fuse_with, FusionOutput, FusionParams};
use crate::knowledge::{KnowledgeBase, KnowledgeContext, Modality};
use crate::numerics::{dot, mean_pool, norm, Matrix, Rng};
use crate::pipeline::dataset::MemeRecord;

use super::loss::{
    bce_loss, classify, hybrid_similarity, mine_triplets, triplet_loss, HeadParams, TripletIndex,
    NORM_FLOOR,
};
use super::lora::{lora_apply, AdaptTarget, LoraAdapter};
use super::train::{Ablation, TrainConfig};

/// All model parameters. Base projections live in `encoder` / `fusion` and
/// are frozen during training; `adapters` carry the trainable updates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub fusion: FusionParams,
    pub adapters: Vec<LoraAdapter>,
    pub head: HeadParams,
    /// Stage III evidence scorer over [pool(h_tilde); entity; fact-row],
    /// random-initialized and frozen (no loss consumes it).
    pub w_r: Vec<f64>,
}

impl ModelParams {
    /// Seeded initialization. Dense weights and embeddings are uniform in
    /// (-1/sqrt(d), 1/sqrt(d)), the head included: a nonzero head feeds
    /// classification gradients into the representations from the first
    /// step. Adapter B factors start at zero (exact identity).
    pub fn init(rng: &mut Rng, vocab_size: usize, cfg: &TrainConfig) -> Result<ModelParams> {
        let d = cfg.dim;
        let encoder = EncoderParams::init(rng, vocab_size, d, cfg.n_heads)?;
        let fusion = FusionParams::init(rng, d, cfg.n_heads)?;
        let adapters = AdaptTarget::ALL
            .iter()
            .map(|&t| LoraAdapter::init(rng, t, d, cfg.rank, cfg.alpha))
            .collect::<Result<Vec<_>>>()?;
        let bound = 1.0 / (d as f64).sqrt();
        let w_r = rng.uniform_vec(3 * d, bound);
        let head = HeadParams {
            w: rng.uniform_vec(d, bound),
            b: rng.uniform(-bound, bound),
        };
        Ok(ModelParams {
            encoder,
            fusion,
            adapters,
            head,
            w_r,
        })
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn adapter(&self, target: AdaptTarget) -> &LoraAdapter {
        &self.adapters[AdaptTarget::ALL.iter().position(|&t| t == target).unwrap()]
    }

    /// Self-attention projections with the low-rank updates applied.
    pub fn effective_self_attn(&self) -> Result<AttnProjections> {
        Ok(AttnProjections {
            w_q: lora_apply(&self.encoder.w_q, self.adapter(AdaptTarget::SelfQ))?,
            w_k: lora_apply(&self.encoder.w_k, self.adapter(AdaptTarget::SelfK))?,
            w_v: lora_apply(&self.encoder.w_v, self.adapter(AdaptTarget::SelfV))?,
            w_o: lora_apply(&self.encoder.w_o, self.adapter(AdaptTarget::SelfO))?,
        })
    }

    /// Cross-attention projections with the low-rank updates applied.
    pub fn effective_cross_attn(&self) -> Result<AttnProjections> {
        Ok(AttnProjections {
            w_q: lora_apply(&self.fusion.w_q, self.adapter(AdaptTarget::CrossQ))?,
            w_k: lora_apply(&self.fusion.w_k, self.adapter(AdaptTarget::CrossK))?,
            w_v: lora_apply(&self.fusion.w_v, self.adapter(AdaptTarget::CrossV))?,
            w_o: lora_apply(&self.fusion.w_o, self.adapter(AdaptTarget::CrossO))?,
        })
    }

    /// Count of non-adapter parameters (embeddings, projections, tags, gate,
    /// head, evidence scorer) for the added-parameter ratio.
    pub fn base_param_count(&self) -> usize {
        let d = self.dim();
        self.encoder.embedding.data().len()
            + 8 * d * d
            + 3 * d
            + (2 * d + 1)
            + (d + 1)
            + 3 * d
    }
}

/// Everything one record's forward pass produces that training or Stage III
/// needs afterwards.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub enc: MemeEncoding,
    pub kenc: Option<KnowledgeEncoding>,
    pub fusion_out: Option<FusionOutput>,
    pub h_tilde: Matrix,
    /// Pooled h_tilde, the contrastive embedding z.
    pub z: Vec<f64>,
    pub p_hat: f64,
}

/// One record through the adapted model. With `Ablation::Stage1` the fusion
/// layer is skipped entirely and h_tilde aliases h_mm bit-for-bit.
pub fn forward_sample(
    record: &MemeRecord,
    ctx: &KnowledgeContext,
    vocab: &Vocab,
    params: &ModelParams,
    eff_self: &AttnProjections,
    eff_cross: &AttnProjections,
    ablation: Ablation,
) -> Result<SampleForward> {
    let enc = encode_meme_with(record, vocab, &params.encoder, eff_self)?;
    let (kenc, fusion_out, h_tilde) = if ablation == Ablation::Stage1 {
        (None, None, enc.h_mm.clone())
    } else {
        let kenc = encode_knowledge_rows(ctx, vocab, &params.encoder);
        let out = fuse_with(&enc.h_mm, &kenc.m_k, &params.fusion, eff_cross)?;
        let h_tilde = out.h_tilde.clone();
        (Some(kenc), Some(out), h_tilde)
    };
    let z = mean_pool(&h_tilde)?;
    let p_hat = classify(&h_tilde, &params.head)?;
    if !p_hat.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite prediction for record '{}'",
            record.id
        )));
    }
    Ok(SampleForward {
        enc,
        kenc,
        fusion_out,
        h_tilde,
        z,
        p_hat,
    })
}

/// Pooled pre-fusion representation under the *base* projections; the
/// similarity feature used for triplet mining and demonstration retrieval.
pub fn base_pooled_hmm(
    record: &MemeRecord,
    vocab: &Vocab,
    encoder: &EncoderParams,
) -> Result<Vec<f64>> {
    let enc = encode_meme_with(record, vocab, encoder, &encoder.self_attn())?;
    mean_pool(&enc.h_mm)
}

/// Gradients for every parameter group; the optimizer selects which groups
/// actually move.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// (dA, dB) per adapter, in `AdaptTarget::ALL` order.
    pub lora: Vec<(Matrix, Matrix)>,
    pub head_w: Vec<f64>,
    pub head_b: f64,
    pub gate_w: Vec<f64>,
    pub gate_b: f64,
    pub embedding: Matrix,
    pub text_tag: Vec<f64>,
    pub image_tag: Vec<f64>,
    pub knowledge_tag: Vec<f64>,
}

impl Gradients {
    fn zeros(params: &ModelParams) -> Gradients {
        let d = params.dim();
        Gradients {
            lora: params
                .adapters
                .iter()
                .map(|ad| {
                    (
                        Matrix::zeros(ad.a.rows(), ad.a.cols()),
                        Matrix::zeros(ad.b.rows(), ad.b.cols()),
                    )
                })
                .collect(),
            head_w: vec![0.0; d],
            head_b: 0.0,
            gate_w: vec![0.0; 2 * d],
            gate_b: 0.0,
            embedding: Matrix::zeros(params.encoder.embedding.rows(), d),
            text_tag: vec![0.0; d],
            image_tag: vec![0.0; d],
            knowledge_tag: vec![0.0; d],
        }
    }
}

/// Loss value, its two parts, per-sample outputs, and all gradients.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub loss: f64,
    pub bce: f64,
    pub contrastive: f64,
    pub p_hats: Vec<f64>,
    pub triplets: Vec<TripletIndex>,
    pub grads: Gradients,
}

/// Gradient of the floored cosine distance with respect to both arguments.
fn cosine_distance_grads(u: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let nu_raw = norm(u);
    let nv_raw = norm(v);
    let nu = nu_raw.max(NORM_FLOOR);
    let nv = nv_raw.max(NORM_FLOOR);
    let uv = dot(u, v);
    let inv = 1.0 / (nu * nv);
    let mut du = vec![0.0; u.len()];
    let mut dv = vec![0.0; v.len()];
    for i in 0..u.len() {
        du[i] = -v[i] * inv;
        if nu_raw > NORM_FLOOR {
            du[i] += uv * u[i] / (nu * nu * nu * nv);
        }
        dv[i] = -u[i] * inv;
        if nv_raw > NORM_FLOOR {
            dv[i] += uv * v[i] / (nv * nv * nv * nu);
        }
    }
    (du, dv)
}

/// Full forward over a batch plus the hand-derived reverse pass for every
/// trainable group.
///
/// `mine_pooled`, when provided, supplies the per-sample mining features
/// (pooled base h_mm); otherwise they are computed here. Labels must be
/// present on every record.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    records: &[&MemeRecord],
    ctxs: &[&KnowledgeContext],
    vocab: &Vocab,
    params: &ModelParams,
    kb: &KnowledgeBase,
    cfg: &TrainConfig,
    ablation: Ablation,
    mine_pooled: Option<&[Vec<f64>]>,
) -> Result<TotalLoss> {
    let n = records.len();
    if n == 0 || ctxs.len() != n {
        return Err(Error::Numeric(format!(
            "total_loss over {} records and {} contexts",
            n,
            ctxs.len()
        )));
    }
    let mut labels = Vec::with_capacity(n);
    for r in records {
        labels.push(r.label.ok_or_else(|| {
            Error::Data(format!("record '{}' has no label; cannot train on it", r.id))
        })?);
    }

    let eff_self = params.effective_self_attn()?;
    let eff_cross = params.effective_cross_attn()?;
    let lambda = if ablation == Ablation::Stage2 { 0.0 } else { cfg.lambda };

    // Forward.
    let mut fwds = Vec::with_capacity(n);
    for (r, ctx) in records.iter().zip(ctxs) {
        fwds.push(forward_sample(r, ctx, vocab, params, &eff_self, &eff_cross, ablation)?);
    }
    let p_hats: Vec<f64> = fwds.iter().map(|f| f.p_hat).collect();
    let bce = bce_loss(&p_hats, &labels)?;

    // Mining on base pooled h_mm, hybrid similarity of Eq-style form.
    let owned_pooled: Vec<Vec<f64>>;
    let pooled: &[Vec<f64>] = match mine_pooled {
        Some(p) => p,
        None => {
            owned_pooled = records
                .iter()
                .map(|r| base_pooled_hmm(r, vocab, &params.encoder))
                .collect::<Result<Vec<_>>>()?;
            &owned_pooled
        }
    };
    let mut sim = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sim.set(
                    i,
                    j,
                    hybrid_similarity(
                        &pooled[i],
                        &pooled[j],
                        &ctxs[i].links,
                        &ctxs[j].links,
                        kb,
                        cfg.lambda_s,
                        cfg.lambda_c,
                    ),
                );
            }
        }
    }
    let triplets = mine_triplets(&labels, &sim);
    let z: Vec<Vec<f64>> = fwds.iter().map(|f| f.z.clone()).collect();
    let contrastive = triplet_loss(&z, &triplets, cfg.margin);
    let loss = bce + lambda * contrastive;
    if !loss.is_finite() {
        let offender = fwds
            .iter()
            .zip(records)
            .find(|(f, _)| !f.p_hat.is_finite() || f.z.iter().any(|v| !v.is_finite()))
            .map(|(_, r)| r.id.clone())
            .unwrap_or_else(|| "<batch>".into());
        return Err(Error::Numeric(format!(
            "non-finite loss (first offending sample '{offender}')"
        )));
    }

    // Reverse pass. d(loss)/d(z_i) accumulates the classification path and
    // the active triplet hinges, then flows back through pooling, fusion,
    // self-attention, and the embedding table.
    let mut grads = Gradients::zeros(params);
    let d = params.dim();

    let mut d_z = vec![vec![0.0; d]; n];
    for i in 0..n {
        // BCE through the sigmoid: d(loss)/d(logit) = (p - y) / n.
        let d_logit = (p_hats[i] - labels[i] as f64) / n as f64;
        for c in 0..d {
            grads.head_w[c] += d_logit * fwds[i].z[c];
            d_z[i][c] += d_logit * params.head.w[c];
        }
        grads.head_b += d_logit;
    }
    if lambda > 0.0 && !triplets.is_empty() {
        let scale = lambda / triplets.len() as f64;
        for t in &triplets {
            let d_ap = super::loss::floored_cosine_distance(&z[t.anchor], &z[t.positive]);
            let d_an = super::loss::floored_cosine_distance(&z[t.anchor], &z[t.negative]);
            if cfg.margin + d_ap - d_an <= 0.0 {
                continue;
            }
            let (da_p, dp) = cosine_distance_grads(&z[t.anchor], &z[t.positive]);
            let (da_n, dn) = cosine_distance_grads(&z[t.anchor], &z[t.negative]);
            for c in 0..d {
                d_z[t.anchor][c] += scale * (da_p[c] - da_n[c]);
                d_z[t.positive][c] += scale * dp[c];
                d_z[t.negative][c] -= scale * dn[c];
            }
        }
    }

    for i in 0..n {
        let fwd = &fwds[i];
        let l_rows = fwd.h_tilde.rows();
        // z = mean over rows of h_tilde.
        let mut d_h_tilde = Matrix::zeros(l_rows, d);
        let inv_l = 1.0 / l_rows as f64;
        for r in 0..l_rows {
            for c in 0..d {
                d_h_tilde.set(r, c, d_z[i][c] * inv_l);
            }
        }

        // Through fusion (or the identity when Stage I is ablated).
        let (d_h_mm, d_m_k) = match (&fwd.fusion_out, &fwd.kenc) {
            (Some(fusion_out), Some(kenc)) => {
                let back = fuse_backward(
                    &d_h_tilde,
                    &fwd.enc.h_mm,
                    &kenc.m_k,
                    &params.fusion,
                    &eff_cross,
                    fusion_out,
                )?;
                accumulate_lora(&mut grads, params, AdaptTarget::CrossQ, &back.d_w_q)?;
                accumulate_lora(&mut grads, params, AdaptTarget::CrossK, &back.d_w_k)?;
                accumulate_lora(&mut grads, params, AdaptTarget::CrossV, &back.d_w_v)?;
                accumulate_lora(&mut grads, params, AdaptTarget::CrossO, &back.d_w_o)?;
                for c in 0..2 * d {
                    grads.gate_w[c] += back.d_gate_w[c];
                }
                grads.gate_b += back.d_gate_b;
                (back.d_h_mm, Some(back.d_m_k))
            }
            _ => (d_h_tilde, None),
        };

        // Knowledge rows back to the embedding table.
        if let (Some(d_m_k), Some(kenc)) = (&d_m_k, &fwd.kenc) {
            for (r, tokens) in kenc.row_tokens.iter().enumerate() {
                let w = kenc.row_weights[r] / tokens.len() as f64;
                for c in 0..d {
                    let g = d_m_k.get(r, c);
                    grads.knowledge_tag[c] += g;
                    for &tok in tokens {
                        let cur = grads.embedding.get(tok, c);
                        grads.embedding.set(tok, c, cur + w * g);
                    }
                }
            }
        }

        // h_mm = X0 + SelfAttn(X0): residual plus attention backward.
        let back = attention_backward(
            &d_h_mm,
            &fwd.enc.tokens.rows,
            &fwd.enc.tokens.rows,
            &eff_self,
            &fwd.enc.attn,
        )?;
        accumulate_lora(&mut grads, params, AdaptTarget::SelfQ, &back.d_w_q)?;
        accumulate_lora(&mut grads, params, AdaptTarget::SelfK, &back.d_w_k)?;
        accumulate_lora(&mut grads, params, AdaptTarget::SelfV, &back.d_w_v)?;
        accumulate_lora(&mut grads, params, AdaptTarget::SelfO, &back.d_w_o)?;
        let d_x0 = d_h_mm
            .add(&back.d_queries_in)?
            .add(&back.d_keys_in)?;

        // X0 rows are embedding + modality tag.
        for (r, &tok) in fwd.enc.tokens.indices.iter().enumerate() {
            let tag = match fwd.enc.tokens.modalities[r] {
                Modality::Text => &mut grads.text_tag,
                Modality::Image => &mut grads.image_tag,
            };
            for c in 0..d {
                let g = d_x0.get(r, c);
                tag[c] += g;
                let cur = grads.embedding.get(tok, c);
                grads.embedding.set(tok, c, cur + g);
            }
        }
    }

    Ok(TotalLoss {
        loss,
        bce,
        contrastive,
        p_hats,
        triplets,
        grads,
    })
}

/// Map d(loss)/d(W_effective) onto the adapter factors:
/// dA = alpha * B^T dW', dB = alpha * dW' A^T.
fn accumulate_lora(
    grads: &mut Gradients,
    params: &ModelParams,
    target: AdaptTarget,
    d_w_eff: &Matrix,
) -> Result<()> {
    let idx = AdaptTarget::ALL.iter().position(|&t| t == target).unwrap();
    let adapter = &params.adapters[idx];
    let d_a = crate::numerics::matmul(&adapter.b.transpose(), d_w_eff)?.scale(adapter.alpha);
    let d_b = crate::numerics::matmul(d_w_eff, &adapter.a.transpose())?.scale(adapter.alpha);
    let (ga, gb) = &mut grads.lora[idx];
    *ga = ga.add(&d_a)?;
    *gb = gb.add(&d_b)?;
    Ok(())
}

/// Which parameter groups the flattening (and hence the optimizer and the
/// finite-difference oracle) covers.
#[derive(Debug, Clone, Copy)]
pub struct TrainableSpec {
    pub lora: bool,
    pub head: bool,
    pub gate: bool,
    pub embeddings: bool,
}

impl TrainableSpec {
    pub fn from_config(cfg: &TrainConfig, ablation: Ablation) -> TrainableSpec {
        TrainableSpec {
            lora: ablation != Ablation::Stage2,
            head: true,
            gate: cfg.train_gate,
            embeddings: cfg.train_embeddings,
        }
    }

    pub fn all() -> TrainableSpec {
        TrainableSpec {
            lora: true,
            head: true,
            gate: true,
            embeddings: true,
        }
    }
}

/// Flatten the selected trainable groups into one parameter vector. Order:
/// adapters (A then B each), head, gate, embeddings + tags.
pub fn flatten_trainable(params: &ModelParams, spec: &TrainableSpec) -> Vec<f64> {
    let mut out = Vec::new();
    if spec.lora {
        for ad in &params.adapters {
            out.extend_from_slice(ad.a.data());
            out.extend_from_slice(ad.b.data());
        }
    }
    if spec.head {
        out.extend_from_slice(&params.head.w);
        out.push(params.head.b);
    }
    if spec.gate {
        out.extend_from_slice(&params.fusion.gate_w);
        out.push(params.fusion.gate_b);
    }
    if spec.embeddings {
        out.extend_from_slice(params.encoder.embedding.data());
        out.extend_from_slice(&params.encoder.text_tag);
        out.extend_from_slice(&params.encoder.image_tag);
        out.extend_from_slice(&params.encoder.knowledge_tag);
    }
    out
}

/// Inverse of `flatten_trainable`.
pub fn set_trainable(params: &mut ModelParams, spec: &TrainableSpec, theta: &[f64]) {
    let mut pos = 0;
    let mut take = |n: usize| {
        let slice = &theta[pos..pos + n];
        pos += n;
        slice
    };
    if spec.lora {
        for ad in &mut params.adapters {
            let na = ad.a.data().len();
            ad.a.data_mut().copy_from_slice(take(na));
            let nb = ad.b.data().len();
            ad.b.data_mut().copy_from_slice(take(nb));
        }
    }
    if spec.head {
        let d = params.head.w.len();
        params.head.w.copy_from_slice(take(d));
        params.head.b = take(1)[0];
    }
    if spec.gate {
        let g = params.fusion.gate_w.len();
        params.fusion.gate_w.copy_from_slice(take(g));
        params.fusion.gate_b = take(1)[0];
    }
    if spec.embeddings {
        let ne = params.encoder.embedding.data().len();
        params.encoder.embedding.data_mut().copy_from_slice(take(ne));
        let d = params.encoder.text_tag.len();
        params.encoder.text_tag.copy_from_slice(take(d));
        params.encoder.image_tag.copy_from_slice(take(d));
        params.encoder.knowledge_tag.copy_from_slice(take(d));
    }
    debug_assert_eq!(pos, theta.len());
}

/// Flatten gradients in the same order as `flatten_trainable`.
pub fn flatten_gradients(grads: &Gradients, spec: &TrainableSpec) -> Vec<f64> {
    let mut out = Vec::new();
    if spec.lora {
        for (ga, gb) in &grads.lora {
            out.extend_from_slice(ga.data());
            out.extend_from_slice(gb.data());
        }
    }
    if spec.head {
        out.extend_from_slice(&grads.head_w);
        out.push(grads.head_b);
    }
    if spec.gate {
        out.extend_from_slice(&grads.gate_w);
        out.push(grads.gate_b);
    }
    if spec.embeddings {
        out.extend_from_slice(grads.embedding.data());
        out.extend_from_slice(&grads.text_tag);
        out.extend_from_slice(&grads.image_tag);
        out.extend_from_slice(&grads.knowledge_tag);
    }
    out
}

/// Index of the first non-decayed coordinate in the flattened vector: weight
/// decay covers the adapters and the head only.
pub fn decay_boundary(params: &ModelParams, spec: &TrainableSpec) -> usize {
    let mut n = 0;
    if spec.lora {
        n += params
            .adapters
            .iter()
            .map(|ad| ad.a.data().len() + ad.b.data().len())
            .sum::<usize>();
    }
    if spec.head {
        n += params.head.w.len() + 1;
    }
    n
}
