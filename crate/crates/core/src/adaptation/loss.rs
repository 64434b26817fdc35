//! Classification head, losses, and hybrid-similarity triplet mining.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::{cult_rel, EntityLink, KnowledgeBase};
use crate::numerics::{dot, mean_pool, norm, sigmoid, Matrix};

/// Linear head over the pooled fused representation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadParams {
    pub w: Vec<f64>,
    pub b: f64,
}

impl HeadParams {
    pub fn zeros(dim: usize) -> Self {
        HeadParams {
            w: vec![0.0; dim],
            b: 0.0,
        }
    }
}

/// Probability clamp for the log terms of the BCE loss.
pub const PROB_EPS: f64 = 1e-12;
/// Norm floor protecting cosine distances on pooled embeddings.
pub const NORM_FLOOR: f64 = 1e-8;

/// p = sigmoid(w . mean_pool(h_tilde) + b). Predicted label is `p >= 0.5`.
pub fn classify(h_tilde: &Matrix, head: &HeadParams) -> Result<f64> {
    let pooled = mean_pool(h_tilde)?;
    Ok(sigmoid(dot(&head.w, &pooled) + head.b))
}

pub fn predicted_label(p_hat: f64) -> u8 {
    u8::from(p_hat >= 0.5)
}

/// Mean negative log-likelihood over a batch, probabilities clamped to
/// [PROB_EPS, 1 - PROB_EPS] before the logs.
pub fn bce_loss(p_hats: &[f64], labels: &[u8]) -> Result<f64> {
    if p_hats.len() != labels.len() || p_hats.is_empty() {
        return Err(Error::Numeric(format!(
            "bce over {} probabilities vs {} labels",
            p_hats.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (&p, &y) in p_hats.iter().zip(labels) {
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / p_hats.len() as f64)
}

/// Cosine distance with the norm floor applied, so zero-norm embeddings are
/// well-defined instead of a hard error.
pub fn floored_cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    let nu = norm(u).max(NORM_FLOOR);
    let nv = norm(v).max(NORM_FLOOR);
    1.0 - dot(u, v) / (nu * nv)
}

/// Hybrid similarity of two samples: semantic cosine over pooled pre-fusion
/// representations, plus weighted cultural relatedness of their entity links.
/// A zero-norm pooled vector zeroes the semantic term (and is logged).
pub fn hybrid_similarity(
    pooled_i: &[f64],
    pooled_j: &[f64],
    links_i: &[EntityLink],
    links_j: &[EntityLink],
    kb: &KnowledgeBase,
    lambda_s: f64,
    lambda_c: f64,
) -> f64 {
    let sim = if norm(pooled_i) == 0.0 || norm(pooled_j) == 0.0 {
        eprintln!("warning: zero-norm pooled representation in hybrid similarity; semantic term set to 0");
        0.0
    } else {
        1.0 - floored_cosine_distance(pooled_i, pooled_j)
    };
    lambda_s * sim + lambda_c * cult_rel(links_i, links_j, kb)
}

/// Anchor / positive / negative batch indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletIndex {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Hard mining under a precomputed pairwise similarity matrix: per anchor,
/// the most similar same-label sample and the most similar different-label
/// sample. Ties break to the lowest index; anchors lacking either side are
/// skipped.
pub fn mine_triplets(labels: &[u8], sim: &Matrix) -> Vec<TripletIndex> {
    let n = labels.len();
    let mut out = Vec::new();
    for anchor in 0..n {
        let mut best_pos: Option<(usize, f64)> = None;
        let mut best_neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == anchor {
                continue;
            }
            let s = sim.get(anchor, j);
            let slot = if labels[j] == labels[anchor] {
                &mut best_pos
            } else {
                &mut best_neg
            };
            let better = match slot {
                Some((_, best)) => s > *best,
                None => true,
            };
            if better {
                *slot = Some((j, s));
            }
        }
        if let (Some((positive, _)), Some((negative, _))) = (best_pos, best_neg) {
            out.push(TripletIndex {
                anchor,
                positive,
                negative,
            });
        }
    }
    out
}

/// Mean hinge `max(0, margin + d(a,p) - d(a,n))` over the mined triplets,
/// with cosine distance on the pooled embeddings. Empty triplet list is 0.
pub fn triplet_loss(z: &[Vec<f64>], triplets: &[TripletIndex], margin: f64) -> f64 {
    if triplets.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for t in triplets {
        let d_ap = floored_cosine_distance(&z[t.anchor], &z[t.positive]);
        let d_an = floored_cosine_distance(&z[t.anchor], &z[t.negative]);
        total += (margin + d_ap - d_an).max(0.0);
    }
    total / triplets.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn zero_head_is_exactly_half() {
        let h = Matrix::from_rows(&[vec![0.3, -0.7], vec![1.0, 0.2]]).unwrap();
        let p = classify(&h, &HeadParams::zeros(2)).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn large_logit_saturates() {
        let h = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let head = HeadParams {
            w: vec![10.0, 10.0],
            b: 5.0,
        };
        let p = classify(&h, &head).unwrap();
        assert!(p > 0.999999);
    }

    #[test]
    fn classify_matches_scalar_formula() {
        let mut rng = Rng::new(8);
        let h = rng.uniform_matrix(3, 4, 1.0);
        let head = HeadParams {
            w: rng.uniform_vec(4, 1.0),
            b: rng.uniform(-1.0, 1.0),
        };
        let got = classify(&h, &head).unwrap();
        let mut logit = head.b;
        for c in 0..4 {
            let mut pool = 0.0;
            for r in 0..3 {
                pool += h.get(r, c);
            }
            logit += head.w[c] * pool / 3.0;
        }
        assert!((got - 1.0 / (1.0 + (-logit).exp())).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_predictions_vanish() {
        let loss = bce_loss(&[1.0, 0.0, 1.0], &[1, 0, 1]).unwrap();
        assert!(loss <= 1e-11);
    }

    #[test]
    fn bce_at_half_is_ln_two() {
        let loss = bce_loss(&[0.5; 4], &[0, 1, 0, 1]).unwrap();
        assert!((loss - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_per_sample_loop() {
        let mut rng = Rng::new(5);
        let p: Vec<f64> = (0..7).map(|_| rng.uniform(0.01, 0.99)).collect();
        let y: Vec<u8> = (0..7).map(|_| (rng.below(2)) as u8).collect();
        let got = bce_loss(&p, &y).unwrap();
        let mut want = 0.0;
        for i in 0..7 {
            want -= if y[i] == 1 {
                p[i].ln()
            } else {
                (1.0 - p[i]).ln()
            };
        }
        want /= 7.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn mining_skips_single_class_batch() {
        let sim = Matrix::zeros(2, 2);
        assert!(mine_triplets(&[1, 1], &sim).is_empty());
    }

    #[test]
    fn mining_forced_argmax() {
        // batch {a:+, b:+, c:-}: s(a,b)=0.9, s(a,c)=0.2.
        let sim = Matrix::from_rows(&[
            vec![0.0, 0.9, 0.2],
            vec![0.9, 0.0, 0.1],
            vec![0.2, 0.1, 0.0],
        ])
        .unwrap();
        let triplets = mine_triplets(&[1, 1, 0], &sim);
        assert!(triplets.contains(&TripletIndex {
            anchor: 0,
            positive: 1,
            negative: 2
        }));
    }

    /// Exhaustive argmax oracle with the same tie rule (lowest index wins).
    pub(crate) fn mine_oracle(labels: &[u8], sim: &Matrix) -> Vec<TripletIndex> {
        let n = labels.len();
        let mut out = Vec::new();
        for a in 0..n {
            let same: Vec<usize> = (0..n).filter(|&j| j != a && labels[j] == labels[a]).collect();
            let diff: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[a]).collect();
            if same.is_empty() || diff.is_empty() {
                continue;
            }
            let argmax = |cands: &[usize]| {
                let mut best = cands[0];
                for &j in cands {
                    if sim.get(a, j) > sim.get(a, best) {
                        best = j;
                    }
                }
                best
            };
            out.push(TripletIndex {
                anchor: a,
                positive: argmax(&same),
                negative: argmax(&diff),
            });
        }
        out
    }

    #[test]
    fn mining_matches_exhaustive_oracle() {
        let mut rng = Rng::new(77);
        for _ in 0..50 {
            let n = 8;
            let labels: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
            let mut sim = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let v = rng.uniform(-1.0, 1.0);
                        sim.set(i, j, v);
                    }
                }
            }
            assert_eq!(mine_triplets(&labels, &sim), mine_oracle(&labels, &sim));
        }
    }

    #[test]
    fn triplet_terms_hand_cases() {
        // Satisfied margin contributes zero, violated margin its gap.
        assert_eq!((0.2f64 + 0.1 - 0.9).max(0.0), 0.0);
        assert!(((0.2f64 + 0.5 - 0.4).max(0.0) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn triplet_loss_matches_per_triplet_loop() {
        let mut rng = Rng::new(21);
        let z: Vec<Vec<f64>> = (0..6).map(|_| rng.uniform_vec(5, 1.0)).collect();
        let triplets: Vec<TripletIndex> = (0..5)
            .map(|_| TripletIndex {
                anchor: rng.below(6),
                positive: rng.below(6),
                negative: rng.below(6),
            })
            .collect();
        let got = triplet_loss(&z, &triplets, 0.2);
        let mut want = 0.0;
        for t in &triplets {
            let dap = floored_cosine_distance(&z[t.anchor], &z[t.positive]);
            let dan = floored_cosine_distance(&z[t.anchor], &z[t.negative]);
            want += (0.2 + dap - dan).max(0.0);
        }
        want /= triplets.len() as f64;
        assert!((got - want).abs() < 1e-12);
        assert!(got >= 0.0);
        assert_eq!(triplet_loss(&z, &[], 0.2), 0.0);
    }
}
