use crate::train::TrainConfig;

/// Published KNN accuracy (%) at ratios 0.5 and 1.0 for a loss setting,
/// obtained with ViT-Base pretrained on fMoW-RGB and evaluated on RESISC45.
/// Not reproducible at desk scale; carried as metadata only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PublishedReference {
    /// Which ablation study the row belongs to.
    pub study: &'static str,
    pub knn_50: f64,
    pub knn_100: f64,
}

impl PublishedReference {
    pub fn at(&self, ratio: f64) -> Option<f64> {
        if ratio == 0.5 {
            Some(self.knn_50)
        } else if ratio == 1.0 {
            Some(self.knn_100)
        } else {
            None
        }
    }
}

const fn r(study: &'static str, knn_50: f64, knn_100: f64) -> PublishedReference {
    PublishedReference {
        study,
        knn_50,
        knn_100,
    }
}

/// Look up the published row whose loss flags match `cfg`.
pub fn published_reference(cfg: &TrainConfig) -> Option<PublishedReference> {
    let l = cfg.losses.effective();
    if cfg.gsd_positional {
        return None;
    }
    let key = (
        l.multi_scale,
        l.cross_consis,
        l.cross_pred,
        l.reconstruction,
    );
    let ne = l.cross_consis && l.negatives_encoder;
    let nd = l.cross_pred && l.negatives_decoder;
    if l.cross_consis && l.cross_pred {
        let study = if l.reconstruction {
            "negative samples"
        } else {
            "pure contrastive"
        };
        return Some(match (l.reconstruction, ne, nd) {
            (true, false, false) => r(study, 75.9, 77.9),
            (true, true, true) => r(study, 76.8, 77.7),
            (true, false, true) => r(study, 75.1, 77.1),
            (true, true, false) => r(study, 78.7, 79.3),
            (false, false, false) => r(study, 57.2, 58.7),
            (false, true, true) => r(study, 57.3, 59.5),
            (false, false, true) => r(study, 57.1, 58.2),
            (false, true, false) => r(study, 58.3, 60.7),
        });
    }
    if nd || (l.cross_consis && !ne) {
        return None;
    }
    match key {
        (false, false, false, true) => Some(r("losses", 52.1, 58.9)),
        (true, false, false, true) => Some(r("losses", 68.3, 69.2)),
        (true, true, false, true) => Some(r("losses", 72.4, 74.4)),
        (true, false, true, true) => Some(r("losses", 74.9, 76.5)),
        _ => None,
    }
}
