//! Low-rank adapters over the attention projections: W' = W + alpha * B A,
//! with B zero-initialized so a fresh adapter is an exact identity. Base
//! matrices are never mutated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, Matrix, Rng};

/// The eight adapted projection matrices, in fixed serialization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptTarget {
    SelfQ,
    SelfK,
    SelfV,
    SelfO,
    CrossQ,
    CrossK,
    CrossV,
    CrossO,
}

impl AdaptTarget {
    pub const ALL: [AdaptTarget; 8] = [
        AdaptTarget::SelfQ,
        AdaptTarget::SelfK,
        AdaptTarget::SelfV,
        AdaptTarget::SelfO,
        AdaptTarget::CrossQ,
        AdaptTarget::CrossK,
        AdaptTarget::CrossV,
        AdaptTarget::CrossO,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AdaptTarget::SelfQ => "self_q",
            AdaptTarget::SelfK => "self_k",
            AdaptTarget::SelfV => "self_v",
            AdaptTarget::SelfO => "self_o",
            AdaptTarget::CrossQ => "cross_q",
            AdaptTarget::CrossK => "cross_k",
            AdaptTarget::CrossV => "cross_v",
            AdaptTarget::CrossO => "cross_o",
        }
    }
}

/// One adapter: A is r x d, B is d x r, update = alpha * B A.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub target: AdaptTarget,
    pub a: Matrix,
    pub b: Matrix,
    pub alpha: f64,
    pub rank: usize,
}

impl LoraAdapter {
    /// A ~ uniform(-1/sqrt(d), 1/sqrt(d)), B = 0, so W' = W at init.
    pub fn init(rng: &mut Rng, target: AdaptTarget, dim: usize, rank: usize, alpha: f64) -> Result<Self> {
        if rank >= dim {
            return Err(Error::Numeric(format!(
                "lora rank {rank} must be smaller than dim {dim}"
            )));
        }
        if !(alpha > 0.0) {
            return Err(Error::Numeric(format!("lora alpha must be positive, got {alpha}")));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        Ok(LoraAdapter {
            target,
            a: rng.uniform_matrix(rank, dim, bound),
            b: Matrix::zeros(dim, rank),
            alpha,
            rank,
        })
    }

    pub fn param_count(&self) -> usize {
        self.a.data().len() + self.b.data().len()
    }
}

/// W + alpha * (B x A); the base is untouched.
pub fn lora_apply(w: &Matrix, adapter: &LoraAdapter) -> Result<Matrix> {
    if adapter.b.cols() != adapter.a.rows()
        || adapter.b.rows() != w.rows()
        || adapter.a.cols() != w.cols()
    {
        return Err(Error::Numeric(format!(
            "lora shape mismatch: W {}x{}, B {}x{}, A {}x{}",
            w.rows(),
            w.cols(),
            adapter.b.rows(),
            adapter.b.cols(),
            adapter.a.rows(),
            adapter.a.cols()
        )));
    }
    // Exact identity at init: skip the product entirely while B is zero.
    if adapter.b.is_all_zero() {
        return Ok(w.clone());
    }
    w.add(&matmul(&adapter.b, &adapter.a)?.scale(adapter.alpha))
}

/// Added trainable parameters (2 r d per adapted d x d matrix) and their
/// ratio to the base parameter count.
pub fn lora_param_count(adapters: &[LoraAdapter], base_param_count: usize) -> (usize, f64) {
    let added: usize = adapters.iter().map(LoraAdapter::param_count).sum();
    let ratio = if base_param_count == 0 {
        0.0
    } else {
        added as f64 / base_param_count as f64
    };
    (added, ratio)
}
