use super::features::FeatureTable;
use crate::{Error, Result};

fn normalised(t: &FeatureTable) -> Result<Vec<Vec<f64>>> {
    (0..t.len())
        .map(|i| {
            let r = t.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 && n.is_finite() {
                Ok(r.iter().map(|v| v / n).collect())
            } else {
                Err(Error::Degenerate(format!("feature row {i} has norm {n}")))
            }
        })
        .collect()
}

/// Cosine-similarity k-NN majority vote. Equal similarities rank the lower
/// training index first; vote ties go to the larger summed similarity, then
/// to the lower class index.
pub fn knn_predict(train: &FeatureTable, test: &FeatureTable, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > train.len() {
        return Err(Error::config(format!(
            "k = {k} must lie in 1..={} (training set size)",
            train.len()
        )));
    }
    if train.dim() != test.dim() {
        return Err(Error::shape(
            "knn",
            train.features.shape(),
            test.features.shape(),
        ));
    }
    let classes = train
        .labels
        .iter()
        .chain(&test.labels)
        .max()
        .map_or(0, |m| m + 1);
    let tr = normalised(train)?;
    let te = normalised(test)?;
    Ok(te
        .iter()
        .map(|q| {
            let mut sims: Vec<(f64, usize)> = tr
                .iter()
                .enumerate()
                .map(|(i, r)| (q.iter().zip(r).map(|(a, b)| a * b).sum(), i))
                .collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![(0usize, 0.0f64); classes];
            for &(s, i) in &sims[..k] {
                let v = &mut votes[train.labels[i]];
                v.0 += 1;
                v.1 += s;
            }
            (0..classes)
                .max_by(|&a, &b| {
                    votes[a]
                        .0
                        .cmp(&votes[b].0)
                        .then(votes[a].1.total_cmp(&votes[b].1))
                        .then(b.cmp(&a))
                })
                .unwrap_or(0)
        })
        .collect())
}

/// Fraction of `test` rows whose k-NN vote matches their label.
pub fn knn_classify(train: &FeatureTable, test: &FeatureTable, k: usize) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyAxis("knn test set"));
    }
    let pred = knn_predict(train, test, k)?;
    let hits = pred
        .iter()
        .zip(&test.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / test.len() as f64)
}
