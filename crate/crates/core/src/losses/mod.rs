//! Cross-scale consistency, cross-scale prediction and reconstruction losses.

mod contrastive;
mod pixel;
mod report;

pub use contrastive::{cross_consistency_loss, info_nce, positive_only_distance, CandidateSet};
pub use pixel::{branch_reconstruction, cross_prediction_contrastive, cross_prediction_loss};
pub use report::{total_loss, LossReport, LossTerms, LossWeights};

#[cfg(test)]
mod tests;
