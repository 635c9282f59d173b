//! Frozen-encoder KNN evaluation, scale sweeps and the ablation runner.

mod ablation;
mod features;
mod knn;
mod reference;
mod split;
mod sweep;
#[cfg(test)]
mod tests;

pub use ablation::{
    run_ablation, AblationCell, AblationGrid, AblationReport, AblationRow, DataSource, SummaryRow,
    PUBLISHED_NOTE, RANDOM_INIT, REPORT_HEADER, SUMMARY_HEADER,
};
pub use features::{extract_features, FeatureTable};
pub use knn::{knn_classify, knn_predict};
pub use reference::{published_reference, PublishedReference};
pub use split::stratified_split;
pub use sweep::{scale_sweep, sweep_csv, DEFAULT_RATIOS};
