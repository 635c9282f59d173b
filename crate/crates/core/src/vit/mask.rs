use rand::Rng;

use super::patch::{read_patch, PatchSequence};
use crate::numerics::rng::permutation;
use crate::numerics::{Element, Tensor};
use crate::{Error, Result};

/// Partition of patch positions into visible and masked sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    visible: Vec<usize>,
    masked: Vec<usize>,
}

impl MaskSpec {
    /// Number of patches removed for ratio `m` on `len` patches.
    pub fn masked_count(len: usize, m: f64) -> usize {
        (m * len as f64).round() as usize
    }

    /// Uniformly random subset of `round(m·len)` masked positions.
    pub fn sample<R: Rng + ?Sized>(len: usize, m: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&m) {
            return Err(Error::config(format!("mask ratio {m} outside [0, 1)")));
        }
        let n_masked = Self::masked_count(len, m);
        if n_masked >= len {
            return Err(Error::config(format!(
                "mask ratio {m} leaves no visible patch out of {len}"
            )));
        }
        let perm = permutation(rng, len);
        let mut masked = perm[..n_masked].to_vec();
        let mut visible = perm[n_masked..].to_vec();
        masked.sort_unstable();
        visible.sort_unstable();
        Ok(MaskSpec { visible, masked })
    }

    /// No masking: every patch visible.
    pub fn none(len: usize) -> Self {
        MaskSpec {
            visible: (0..len).collect(),
            masked: Vec::new(),
        }
    }

    /// Build from an explicit masked set (any order).
    pub fn from_masked(len: usize, masked: &[usize]) -> Result<Self> {
        let mut is_masked = vec![false; len];
        for &i in masked {
            if i >= len || is_masked[i] {
                return Err(Error::Consistency(format!(
                    "masked index {i} repeated or outside 0..{len}"
                )));
            }
            is_masked[i] = true;
        }
        let visible: Vec<usize> = (0..len).filter(|&i| !is_masked[i]).collect();
        if visible.is_empty() {
            return Err(Error::config("mask leaves no visible patch"));
        }
        Ok(MaskSpec {
            visible,
            masked: (0..len).filter(|&i| is_masked[i]).collect(),
        })
    }

    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn len(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ratio(&self) -> f64 {
        self.masked.len() as f64 / self.len() as f64
    }
}

/// Check that every spec covers `len` positions and keeps the same number
/// visible (the batch is stacked into one tensor).
pub fn check_masks(masks: &[MaskSpec], len: usize) -> Result<usize> {
    let k = masks.first().map_or(0, |m| m.visible.len());
    for m in masks {
        if m.len() != len {
            return Err(Error::Consistency(format!(
                "mask covers {} positions but the grid has {len}",
                m.len()
            )));
        }
        if m.visible.len() != k {
            return Err(Error::Consistency(
                "masks keep different patch counts".into(),
            ));
        }
    }
    Ok(k)
}

/// Visible patches `[B, k, n*n*C]` read straight from the images, so masked
/// pixels are never touched.
pub fn visible_patches<T: Element>(
    images: &Tensor<T>,
    patch_size: usize,
    masks: &[MaskSpec],
) -> Result<Tensor<T>> {
    let sh = images.shape();
    let [b, h, w, c] = *sh else {
        return Err(Error::shape("visible_patches", sh, &[0, 0, 0, 0]));
    };
    let grid = super::patch::grid_for(h, w, patch_size)?;
    if masks.len() != b {
        return Err(Error::Consistency(format!(
            "{} masks for a batch of {b}",
            masks.len()
        )));
    }
    let k = check_masks(masks, grid.0 * grid.1)?;
    let pd = patch_size * patch_size * c;
    let mut out = Vec::with_capacity(b * k * pd);
    for (bi, m) in masks.iter().enumerate() {
        for &p in &m.visible {
            read_patch(images.data(), (h, w, c), patch_size, bi, p, &mut out);
        }
    }
    Tensor::new(vec![b, k, pd], out)
}

/// Draw one mask per batch item (each from its own generator) and return
/// the visible patches alongside the specs.
pub fn random_mask<T: Element, R: Rng>(
    seq: &PatchSequence<T>,
    m: f64,
    rngs: &mut [R],
) -> Result<(Tensor<T>, Vec<MaskSpec>)> {
    if rngs.len() != seq.batch() {
        return Err(Error::Consistency(
            "one generator per batch item required".into(),
        ));
    }
    let specs = rngs
        .iter_mut()
        .map(|r| MaskSpec::sample(seq.len(), m, r))
        .collect::<Result<Vec<_>>>()?;
    let (s, pd) = (seq.len(), seq.patch_dim());
    let k = specs[0].visible.len();
    let mut out = Vec::with_capacity(seq.batch() * k * pd);
    for (bi, spec) in specs.iter().enumerate() {
        for &p in &spec.visible {
            let src = (bi * s + p) * pd;
            out.extend_from_slice(&seq.patches.data()[src..src + pd]);
        }
    }
    Ok((Tensor::new(vec![seq.batch(), k, pd], out)?, specs))
}
