use crate::augment::{rescale, stack};
use crate::numerics::{Element, Tape, Tensor};
use crate::vit::{MaskSpec, ModelParams};
use crate::{par, Error, Result};

/// Frozen-encoder features, one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    /// `[M, D]`
    pub features: Tensor<f64>,
    pub labels: Vec<usize>,
    pub ratio: f64,
    pub source_hash: Option<[u8; 32]>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape().get(1).copied().unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.features.data()[i * d..(i + 1) * d]
    }
}

const CHUNK: usize = 32;

/// Rescale every image by `ratio` (same kernel as training, no crop),
/// encode it without masking and keep the pooled representation.
pub fn extract_features<T: Element>(
    params: &ModelParams<T>,
    images: &[Tensor<f32>],
    labels: &[usize],
    gsd: &[f64],
    ratio: f64,
) -> Result<FeatureTable> {
    if images.len() != labels.len() || images.len() != gsd.len() {
        return Err(Error::Consistency(
            "images, labels and GSDs differ in length".into(),
        ));
    }
    if images.is_empty() {
        return Err(Error::EmptyAxis("extract_features"));
    }
    let cfg = params.config();
    let size = cfg.encoder.image_size;
    let s = cfg.num_patches();
    let chunks = images.len().div_ceil(CHUNK);
    let parts = par::map_indexed(chunks, |c| -> Result<Vec<f64>> {
        let range = c * CHUNK..((c + 1) * CHUNK).min(images.len());
        let views = images[range.clone()]
            .iter()
            .map(|img| rescale(&img.cast::<T>(), ratio, size))
            .collect::<Result<Vec<_>>>()?;
        let batch = stack(&views)?;
        let masks = vec![MaskSpec::none(s); views.len()];
        let g: Vec<f64> = gsd[range].iter().map(|g| g / ratio).collect();
        let tape = Tape::new();
        let model = params.bind(&tape);
        let enc = model.encode(&batch, &masks, Some(&g))?;
        Ok(tape.value(enc.pooled).to_f64_vec())
    });
    let mut data = Vec::with_capacity(images.len() * cfg.encoder.width);
    for p in parts {
        data.extend(p?);
    }
    Ok(FeatureTable {
        features: Tensor::new(vec![images.len(), cfg.encoder.width], data)?,
        labels: labels.to_vec(),
        ratio,
        source_hash: None,
    })
}
