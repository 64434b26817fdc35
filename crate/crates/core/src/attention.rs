//! Multi-head scaled dot-product attention, forward and hand-derived
//! backward. Shared by the encoder (self-attention, queries == keys) and the
//! fusion layer (cross-attention from the multimodal rows onto the knowledge
//! rows).

use crate::error::{Error, Result};
use crate::numerics::{matmul, softmax_rows, Matrix};

/// The four projection matrices of one attention layer, each d x d. These are
/// the *effective* weights: callers that adapt a base matrix apply the
/// low-rank update before building this struct.
#[derive(Debug, Clone)]
pub struct AttnProjections {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

impl AttnProjections {
    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct AttnForward {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Per-head attention weights, each queries x keys, rows summing to 1.
    pub probs: Vec<Matrix>,
    /// Concatenated per-head context rows, before the output projection.
    pub concat: Matrix,
    pub out: Matrix,
    n_heads: usize,
}

/// Gradients with respect to the projections and both inputs.
#[derive(Debug, Clone)]
pub struct AttnBackward {
    pub d_w_q: Matrix,
    pub d_w_k: Matrix,
    pub d_w_v: Matrix,
    pub d_w_o: Matrix,
    pub d_queries_in: Matrix,
    pub d_keys_in: Matrix,
}

fn head_slice(m: &Matrix, head: usize, dh: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), dh);
    for r in 0..m.rows() {
        for c in 0..dh {
            out.set(r, c, m.get(r, head * dh + c));
        }
    }
    out
}

fn head_accumulate(target: &mut Matrix, src: &Matrix, head: usize, dh: usize) {
    for r in 0..src.rows() {
        for c in 0..dh {
            let cur = target.get(r, head * dh + c);
            target.set(r, head * dh + c, cur + src.get(r, c));
        }
    }
}

/// Scaled multi-head attention: softmax(Q Kᵀ / sqrt(d/h)) V per head,
/// heads concatenated then projected by `w_o`.
pub fn attention_forward(
    queries_in: &Matrix,
    keys_in: &Matrix,
    w: &AttnProjections,
    n_heads: usize,
) -> Result<AttnForward> {
    let d = w.dim();
    if d % n_heads != 0 {
        return Err(Error::Numeric(format!(
            "model dim {d} not divisible by {n_heads} heads"
        )));
    }
    if queries_in.cols() != d || keys_in.cols() != d {
        return Err(Error::Numeric(format!(
            "attention input width {} / {} does not match projection dim {d}",
            queries_in.cols(),
            keys_in.cols()
        )));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = matmul(queries_in, &w.w_q)?;
    let k = matmul(keys_in, &w.w_k)?;
    let v = matmul(keys_in, &w.w_v)?;

    let mut probs = Vec::with_capacity(n_heads);
    let mut concat = Matrix::zeros(queries_in.rows(), d);
    for h in 0..n_heads {
        let qh = head_slice(&q, h, dh);
        let kh = head_slice(&k, h, dh);
        let vh = head_slice(&v, h, dh);
        let scores = matmul(&qh, &kh.transpose())?.scale(scale);
        let p = softmax_rows(&scores, 1.0)?;
        let oh = matmul(&p, &vh)?;
        head_accumulate(&mut concat, &oh, h, dh);
        probs.push(p);
    }
    let out = matmul(&concat, &w.w_o)?;
    Ok(AttnForward {
        q,
        k,
        v,
        probs,
        concat,
        out,
        n_heads,
    })
}

/// Row-wise softmax backward: dS = P .* (dP - rowsum(dP .* P)).
fn softmax_backward(p: &Matrix, d_p: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let mut inner = 0.0;
        for c in 0..p.cols() {
            inner += d_p.get(r, c) * p.get(r, c);
        }
        for c in 0..p.cols() {
            out.set(r, c, p.get(r, c) * (d_p.get(r, c) - inner));
        }
    }
    out
}

/// Reverse pass for `attention_forward` given d(loss)/d(out).
pub fn attention_backward(
    d_out: &Matrix,
    queries_in: &Matrix,
    keys_in: &Matrix,
    w: &AttnProjections,
    fwd: &AttnForward,
) -> Result<AttnBackward> {
    let d = w.dim();
    let n_heads = fwd.n_heads;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let d_w_o = matmul(&fwd.concat.transpose(), d_out)?;
    let d_concat = matmul(d_out, &w.w_o.transpose())?;

    let mut d_q = Matrix::zeros(fwd.q.rows(), d);
    let mut d_k = Matrix::zeros(fwd.k.rows(), d);
    let mut d_v = Matrix::zeros(fwd.v.rows(), d);
    for h in 0..n_heads {
        let qh = head_slice(&fwd.q, h, dh);
        let kh = head_slice(&fwd.k, h, dh);
        let vh = head_slice(&fwd.v, h, dh);
        let p = &fwd.probs[h];
        let d_oh = head_slice(&d_concat, h, dh);

        let d_p = matmul(&d_oh, &vh.transpose())?;
        let d_vh = matmul(&p.transpose(), &d_oh)?;
        let d_scores = softmax_backward(p, &d_p).scale(scale);
        let d_qh = matmul(&d_scores, &kh)?;
        let d_kh = matmul(&d_scores.transpose(), &qh)?;

        head_accumulate(&mut d_q, &d_qh, h, dh);
        head_accumulate(&mut d_k, &d_kh, h, dh);
        head_accumulate(&mut d_v, &d_vh, h, dh);
    }

    let d_w_q = matmul(&queries_in.transpose(), &d_q)?;
    let d_w_k = matmul(&keys_in.transpose(), &d_k)?;
    let d_w_v = matmul(&keys_in.transpose(), &d_v)?;
    let d_queries_in = matmul(&d_q, &w.w_q.transpose())?;
    let d_keys_in = matmul(&d_k, &w.w_k.transpose())?
        .add(&matmul(&d_v, &w.w_v.transpose())?)?;

    Ok(AttnBackward {
        d_w_q,
        d_w_k,
        d_w_v,
        d_w_o,
        d_queries_in,
        d_keys_in,
    })
}
