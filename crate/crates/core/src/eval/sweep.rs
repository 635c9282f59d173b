use super::features::extract_features;
use super::knn::knn_classify;
use crate::augment::Dataset;
use crate::numerics::Element;
use crate::vit::ModelParams;
use crate::Result;

pub const DEFAULT_RATIOS: [f64; 4] = [0.125, 0.25, 0.5, 1.0];

/// KNN accuracy per evaluation ratio. Both the reference and the query
/// images are rescaled by the ratio before encoding.
pub fn scale_sweep<T: Element>(
    params: &ModelParams<T>,
    train: &Dataset,
    test: &Dataset,
    ratios: &[f64],
    k: usize,
) -> Result<Vec<(f64, f64)>> {
    ratios
        .iter()
        .map(|&r| {
            let a = extract_features(params, &train.images, &train.labels, &train.gsd, r)?;
            let b = extract_features(params, &test.images, &test.labels, &test.gsd, r)?;
            Ok((r, knn_classify(&a, &b, k)?))
        })
        .collect()
}

pub fn sweep_csv(rows: &[(f64, f64)]) -> String {
    let mut s = String::from("ratio,accuracy\n");
    for (r, a) in rows {
        s.push_str(&format!("{r},{a}\n"));
    }
    s
}
