//! Gated cross-attention knowledge fusion: queries are the multimodal rows,
//! keys and values are the knowledge rows, and a per-position sigmoid gate
//! modulates the residual. Attention weights are retained for downstream
//! evidence salience.

use serde::{Deserialize, Serialize};

use crate::attention::{attention_backward, attention_forward, AttnForward, AttnProjections};
use crate::error::{Error, Result};
use crate::numerics::{mean_pool, sigmoid, Matrix};

/// Cross-attention projections plus the gate. `gate_w` has length 2d: the
/// first d weights act on the query row, the last d on pooled knowledge.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub gate_w: Vec<f64>,
    pub gate_b: f64,
    pub n_heads: usize,
}

impl FusionParams {
    pub fn init(rng: &mut crate::numerics::Rng, dim: usize, n_heads: usize) -> Result<Self> {
        if dim % n_heads != 0 {
            return Err(Error::Numeric(format!(
                "dim {dim} not divisible by {n_heads} heads"
            )));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        Ok(FusionParams {
            w_q: rng.uniform_matrix(dim, dim, bound),
            w_k: rng.uniform_matrix(dim, dim, bound),
            w_v: rng.uniform_matrix(dim, dim, bound),
            w_o: rng.uniform_matrix(dim, dim, bound),
            gate_w: rng.uniform_vec(2 * dim, bound),
            gate_b: rng.uniform(-bound, bound),
            n_heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn cross_attn(&self) -> AttnProjections {
        AttnProjections {
            w_q: self.w_q.clone(),
            w_k: self.w_k.clone(),
            w_v: self.w_v.clone(),
            w_o: self.w_o.clone(),
        }
    }
}

/// Knowledge-grounded representation plus everything the backward pass and
/// Stage III need: per-head attention, gate values, and cached internals.
#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub h_tilde: Matrix,
    /// Per-head attention weights, each L x L_K; rows sum to 1.
    pub attention: Vec<Matrix>,
    /// Per-position gate values, strictly inside (0, 1).
    pub gate_values: Vec<f64>,
    pub attn: AttnForward,
    pub pool_mk: Vec<f64>,
}

impl FusionOutput {
    /// Mean attention over heads onto knowledge row `k` from the query
    /// positions in `span` (used for evidence salience).
    pub fn mean_attention(&self, span: std::ops::Range<usize>, k: usize) -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for p in &self.attention {
            for q in span.clone() {
                acc += p.get(q, k);
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            acc / n as f64
        }
    }
}

/// Fuse with explicit (possibly adapted) projections.
pub fn fuse_with(
    h_mm: &Matrix,
    m_k: &Matrix,
    p: &FusionParams,
    projections: &AttnProjections,
) -> Result<FusionOutput> {
    let d = p.dim();
    if h_mm.cols() != d || m_k.cols() != d {
        return Err(Error::Numeric(format!(
            "fuse width mismatch: h_mm {}x{}, m_k {}x{}, dim {d}",
            h_mm.rows(),
            h_mm.cols(),
            m_k.rows(),
            m_k.cols()
        )));
    }
    if h_mm.rows() == 0 || m_k.rows() == 0 {
        return Err(Error::Numeric("fuse requires L >= 1 and L_K >= 1".into()));
    }
    let attn = attention_forward(h_mm, m_k, projections, p.n_heads)?;
    let pool_mk = mean_pool(m_k)?;

    let mut gate_values = Vec::with_capacity(h_mm.rows());
    let mut h_tilde = Matrix::zeros(h_mm.rows(), d);
    for l in 0..h_mm.rows() {
        let mut u = p.gate_b;
        for c in 0..d {
            u += p.gate_w[c] * h_mm.get(l, c) + p.gate_w[d + c] * pool_mk[c];
        }
        let g = sigmoid(u);
        gate_values.push(g);
        for c in 0..d {
            h_tilde.set(l, c, h_mm.get(l, c) + g * attn.out.get(l, c));
        }
    }
    Ok(FusionOutput {
        h_tilde,
        attention: attn.probs.clone(),
        gate_values,
        attn,
        pool_mk,
    })
}

/// Gated cross-attention fusion with the base projections.
pub fn fuse(h_mm: &Matrix, m_k: &Matrix, p: &FusionParams) -> Result<FusionOutput> {
    fuse_with(h_mm, m_k, p, &p.cross_attn())
}

/// Gradients of a scalar loss with respect to every fusion parameter and
/// both inputs.
#[derive(Debug, Clone)]
pub struct FusionBackward {
    pub d_w_q: Matrix,
    pub d_w_k: Matrix,
    pub d_w_v: Matrix,
    pub d_w_o: Matrix,
    pub d_gate_w: Vec<f64>,
    pub d_gate_b: f64,
    pub d_h_mm: Matrix,
    pub d_m_k: Matrix,
}

/// Reverse pass for `fuse_with` given d(loss)/d(h_tilde).
pub fn fuse_backward(
    d_h_tilde: &Matrix,
    h_mm: &Matrix,
    m_k: &Matrix,
    p: &FusionParams,
    projections: &AttnProjections,
    fwd: &FusionOutput,
) -> Result<FusionBackward> {
    let d = p.dim();
    let l_count = h_mm.rows();
    let lk = m_k.rows();

    // Residual + gated attention output.
    let mut d_h_mm = d_h_tilde.clone();
    let mut d_attnout = Matrix::zeros(l_count, d);
    let mut d_gate_w = vec![0.0; 2 * d];
    let mut d_gate_b = 0.0;
    let mut d_pool = vec![0.0; d];
    for l in 0..l_count {
        let g = fwd.gate_values[l];
        let mut d_g = 0.0;
        for c in 0..d {
            let grad = d_h_tilde.get(l, c);
            d_attnout.set(l, c, grad * g);
            d_g += grad * fwd.attn.out.get(l, c);
        }
        let d_u = d_g * g * (1.0 - g);
        d_gate_b += d_u;
        for c in 0..d {
            d_gate_w[c] += d_u * h_mm.get(l, c);
            d_gate_w[d + c] += d_u * fwd.pool_mk[c];
            let cur = d_h_mm.get(l, c);
            d_h_mm.set(l, c, cur + d_u * p.gate_w[c]);
            d_pool[c] += d_u * p.gate_w[d + c];
        }
    }

    let back = attention_backward(&d_attnout, h_mm, m_k, projections, &fwd.attn)?;
    d_h_mm = d_h_mm.add(&back.d_queries_in)?;
    let mut d_m_k = back.d_keys_in;
    // pool(M_K) feeds the gate; mean spreads the gradient evenly over rows.
    let inv = 1.0 / lk as f64;
    for r in 0..lk {
        for c in 0..d {
            let cur = d_m_k.get(r, c);
            d_m_k.set(r, c, cur + d_pool[c] * inv);
        }
    }

    Ok(FusionBackward {
        d_w_q: back.d_w_q,
        d_w_k: back.d_w_k,
        d_w_v: back.d_w_v,
        d_w_o: back.d_w_o,
        d_gate_w,
        d_gate_b,
        d_h_mm,
        d_m_k,
    })
}

/// Closed-form multiply-accumulate count of one `fuse` call.
///
/// Counted: the four projections, per-head score products and their scaling,
/// the attention-weighted value sums, knowledge pooling, the gate dot
/// products, and the gated residual. Exactly linear in L_K for fixed L and
/// vice versa.
pub fn fusion_cost_model(l: usize, l_k: usize, dim: usize, n_heads: usize) -> u64 {
    let (l, l_k, d, h) = (l as u64, l_k as u64, dim as u64, n_heads as u64);
    let projections = l * d * d + 2 * l_k * d * d + l * d * d;
    let scores = l * l_k * d + h * l * l_k;
    let weighted_values = l * l_k * d;
    let pool = l_k * d;
    let gate = l * 2 * d;
    let gated_residual = l * d;
    projections + scores + weighted_values + pool + gate + gated_residual
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn setup(d: usize, heads: usize, l: usize, lk: usize) -> (Matrix, Matrix, FusionParams) {
        let mut rng = Rng::new(17);
        let h_mm = rng.uniform_matrix(l, d, 1.0);
        let m_k = rng.uniform_matrix(lk, d, 1.0);
        let p = FusionParams::init(&mut rng, d, heads).unwrap();
        (h_mm, m_k, p)
    }

    #[test]
    fn zero_value_projection_is_exact_identity() {
        let (h_mm, m_k, mut p) = setup(8, 2, 3, 2);
        p.w_v = Matrix::zeros(8, 8);
        let out = fuse(&h_mm, &m_k, &p).unwrap();
        assert_eq!(out.h_tilde, h_mm);
    }

    #[test]
    fn single_knowledge_row_gets_full_attention() {
        let (h_mm, _, p) = setup(8, 2, 3, 2);
        let mut rng = Rng::new(3);
        let m_k = rng.uniform_matrix(1, 8, 1.0);
        let out = fuse(&h_mm, &m_k, &p).unwrap();
        for head in &out.attention {
            for r in 0..head.rows() {
                assert_eq!(head.get(r, 0), 1.0);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_gates_are_open() {
        let (h_mm, m_k, p) = setup(8, 2, 4, 3);
        let out = fuse(&h_mm, &m_k, &p).unwrap();
        for head in &out.attention {
            for r in 0..head.rows() {
                let sum: f64 = head.row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
        for g in &out.gate_values {
            assert!(*g > 0.0 && *g < 1.0);
        }
    }

    /// Independent straight-line reimplementation over plain nested vecs.
    #[test]
    fn fuse_matches_straight_line_reimplementation() {
        let d = 8;
        let heads = 2;
        let dh = d / heads;
        let (h_mm, m_k, p) = setup(d, heads, 3, 2);
        let got = fuse(&h_mm, &m_k, &p).unwrap();

        let l = h_mm.rows();
        let lk = m_k.rows();
        let proj = |x: &Matrix, w: &Matrix| -> Vec<Vec<f64>> {
            let mut out = vec![vec![0.0; d]; x.rows()];
            for i in 0..x.rows() {
                for j in 0..d {
                    for k in 0..d {
                        out[i][j] += x.get(i, k) * w.get(k, j);
                    }
                }
            }
            out
        };
        let q = proj(&h_mm, &p.w_q);
        let k = proj(&m_k, &p.w_k);
        let v = proj(&m_k, &p.w_v);
        let mut concat = vec![vec![0.0; d]; l];
        for h in 0..heads {
            for i in 0..l {
                let mut scores = vec![0.0; lk];
                for (j, s) in scores.iter_mut().enumerate() {
                    for c in 0..dh {
                        *s += q[i][h * dh + c] * k[j][h * dh + c];
                    }
                    *s /= (dh as f64).sqrt();
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    for c in 0..dh {
                        concat[i][h * dh + c] += e / z * v[j][h * dh + c];
                    }
                }
            }
        }
        let attnout = proj(
            &Matrix::from_rows(&concat).unwrap(),
            &p.w_o,
        );
        let mut pool = vec![0.0; d];
        for j in 0..lk {
            for c in 0..d {
                pool[c] += m_k.get(j, c) / lk as f64;
            }
        }
        for i in 0..l {
            let mut u = p.gate_b;
            for c in 0..d {
                u += p.gate_w[c] * h_mm.get(i, c) + p.gate_w[d + c] * pool[c];
            }
            let g = 1.0 / (1.0 + (-u).exp());
            for c in 0..d {
                let want = h_mm.get(i, c) + g * attnout[i][c];
                assert!(
                    (got.h_tilde.get(i, c) - want).abs() < 1e-10,
                    "row {i} col {c}"
                );
            }
        }
    }

    #[test]
    fn cost_model_linear_in_lk_and_l() {
        let c = |l, lk| fusion_cost_model(l, lk, 64, 8);
        assert_eq!(c(5, 8) - c(5, 4), c(5, 12) - c(5, 8));
        assert_eq!(c(4, 7) - c(2, 7), c(6, 7) - c(4, 7));
    }

    #[test]
    fn cost_model_hand_count_for_unit_sizes() {
        // d = 64, h = 8, L = L_K = 1: recount each term of the reference
        // implementation by hand.
        let d = 64u64;
        let q_proj = d * d;
        let k_proj = d * d;
        let v_proj = d * d;
        let o_proj = d * d;
        let scores = 8 * (d / 8) + 8; // per-head dot + scale
        let weighted = 8 * (d / 8);
        let pool = d;
        let gate = 2 * d;
        let residual = d;
        let want = q_proj + k_proj + v_proj + o_proj + scores + weighted + pool + gate + residual;
        assert_eq!(fusion_cost_model(1, 1, 64, 8), want);
        assert_eq!(want, 16_776);
    }

    #[test]
    fn backward_matches_finite_differences_for_all_params() {
        use crate::numerics::fd_gradient;
        let d = 8;
        let (h_mm, m_k, p0) = setup(d, 2, 3, 2);
        let mut rng = Rng::new(31);
        let cotangent = rng.uniform_matrix(3, d, 1.0);

        let n = d * d;
        let pack = |p: &FusionParams| -> Vec<f64> {
            let mut v: Vec<f64> = [&p.w_q, &p.w_k, &p.w_v, &p.w_o]
                .iter()
                .flat_map(|m| m.data().iter().copied())
                .collect();
            v.extend(&p.gate_w);
            v.push(p.gate_b);
            v
        };
        let unpack = |theta: &[f64]| -> FusionParams {
            FusionParams {
                w_q: Matrix::new(d, d, theta[0..n].to_vec()).unwrap(),
                w_k: Matrix::new(d, d, theta[n..2 * n].to_vec()).unwrap(),
                w_v: Matrix::new(d, d, theta[2 * n..3 * n].to_vec()).unwrap(),
                w_o: Matrix::new(d, d, theta[3 * n..4 * n].to_vec()).unwrap(),
                gate_w: theta[4 * n..4 * n + 2 * d].to_vec(),
                gate_b: theta[4 * n + 2 * d],
                n_heads: 2,
            }
        };

        let loss = |theta: &[f64]| -> f64 {
            let p = unpack(theta);
            let out = fuse(&h_mm, &m_k, &p).unwrap();
            out.h_tilde
                .data()
                .iter()
                .zip(cotangent.data())
                .map(|(o, c)| o * c)
                .sum()
        };
        let theta0 = pack(&p0);
        let fd = fd_gradient(loss, &theta0, 1e-6).unwrap();

        let fwd = fuse(&h_mm, &m_k, &p0).unwrap();
        let back = fuse_backward(&cotangent, &h_mm, &m_k, &p0, &p0.cross_attn(), &fwd).unwrap();
        let mut analytic: Vec<f64> = [&back.d_w_q, &back.d_w_k, &back.d_w_v, &back.d_w_o]
            .iter()
            .flat_map(|m| m.data().iter().copied())
            .collect();
        analytic.extend(&back.d_gate_w);
        analytic.push(back.d_gate_b);

        for (i, (a, f)) in analytic.iter().zip(&fd).enumerate() {
            let denom = f.abs().max(1e-7);
            assert!(
                (a - f).abs() / denom < 1e-4,
                "param coordinate {i}: analytic {a} vs fd {f}"
            );
        }

        // And the input gradients.
        let input_loss = |flat: &[f64]| -> f64 {
            let hm = Matrix::new(3, d, flat[0..3 * d].to_vec()).unwrap();
            let mk = Matrix::new(2, d, flat[3 * d..].to_vec()).unwrap();
            let out = fuse(&hm, &mk, &p0).unwrap();
            out.h_tilde
                .data()
                .iter()
                .zip(cotangent.data())
                .map(|(o, c)| o * c)
                .sum()
        };
        let mut flat0 = h_mm.data().to_vec();
        flat0.extend_from_slice(m_k.data());
        let fd_in = fd_gradient(input_loss, &flat0, 1e-6).unwrap();
        let mut analytic_in = back.d_h_mm.data().to_vec();
        analytic_in.extend_from_slice(back.d_m_k.data());
        for (i, (a, f)) in analytic_in.iter().zip(&fd_in).enumerate() {
            let denom = f.abs().max(1e-7);
            assert!(
                (a - f).abs() / denom < 1e-4,
                "input coordinate {i}: analytic {a} vs fd {f}"
            );
        }
    }
}
