use crate::numerics::{Element, Tensor};
use crate::{Error, Result};

/// Labelled images of one shared `[H, W, C]`, each with a base GSD.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub gsd: Vec<f64>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        images: Vec<Tensor<f32>>,
        labels: Vec<usize>,
        gsd: Vec<f64>,
        num_classes: usize,
    ) -> Result<Self> {
        if images.len() != labels.len() || images.len() != gsd.len() {
            return Err(Error::Consistency(format!(
                "{} images, {} labels, {} GSDs",
                images.len(),
                labels.len(),
                gsd.len()
            )));
        }
        if let Some(first) = images.first() {
            if first.rank() != 3 {
                return Err(Error::shape("dataset image", first.shape(), &[0, 0, 0]));
            }
            if let Some(bad) = images.iter().find(|t| t.shape() != first.shape()) {
                return Err(Error::shape("dataset image", bad.shape(), first.shape()));
            }
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Consistency(format!(
                "label {l} outside {num_classes} classes"
            )));
        }
        if gsd.iter().any(|g| !(*g > 0.0)) {
            return Err(Error::Consistency("GSD values must be positive".into()));
        }
        Ok(Dataset {
            images,
            labels,
            gsd,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(H, W, C)` of every image; zeros when empty.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.images
            .first()
            .map_or((0, 0, 0), |t| (t.shape()[0], t.shape()[1], t.shape()[2]))
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            gsd: idx.iter().map(|&i| self.gsd[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Stack `[H,W,C]` images into one `[B,H,W,C]` batch.
pub fn stack<T: Element>(images: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or(Error::EmptyAxis("stack"))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for t in images {
        if t.shape() != first.shape() {
            return Err(Error::shape("stack", t.shape(), first.shape()));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}
