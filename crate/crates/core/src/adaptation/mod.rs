//! Stage II: low-rank adapters over all attention projections, the sigmoid
//! classification head, the BCE + triplet contrastive objective with
//! hybrid-similarity mining, and the training loop.

pub mod lora;
pub mod loss;
pub mod model;
pub mod train;

pub use lora::{lora_apply, lora_param_count, AdaptTarget, LoraAdapter};
pub use loss::{
    bce_loss, classify, hybrid_similarity, mine_triplets, predicted_label, triplet_loss,
    HeadParams, TripletIndex,
};
pub use model::{base_pooled_hmm, forward_sample, total_loss, Gradients, ModelParams, SampleForward};
pub use train::{train, Ablation, EpochStats, TrainConfig, TrainResult};

#[cfg(test)]
mod tests;
