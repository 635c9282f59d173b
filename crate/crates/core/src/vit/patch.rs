use crate::numerics::{Element, Tensor};
use crate::{Error, Result};

/// Images cut into non-overlapping `n×n` patches, row-major over the grid,
/// each patch flattened as `(row, col, channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence<T> {
    /// `[B, rows*cols, n*n*C]`
    pub patches: Tensor<T>,
    pub grid: (usize, usize),
    pub patch_size: usize,
}

impl<T: Element> PatchSequence<T> {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.patch_dim() / (self.patch_size * self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patches.shape()[2]
    }
}

fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [b, h, w, c] => Ok((*b, *h, *w, *c)),
        _ => Err(Error::shape("image batch", shape, &[0, 0, 0, 0])),
    }
}

/// Grid shape for an `h×w` image and patch size `n`.
pub fn grid_for(h: usize, w: usize, n: usize) -> Result<(usize, usize)> {
    if n == 0 || !h.is_multiple_of(n) || !w.is_multiple_of(n) || h == 0 || w == 0 {
        return Err(Error::config(format!(
            "image {h}x{w} is not divisible into {n}px patches"
        )));
    }
    Ok((h / n, w / n))
}

/// Copy patch `p` of image `b` into `out` (length `n*n*C`).
pub(crate) fn read_patch<T: Copy>(
    img: &[T],
    dims: (usize, usize, usize),
    n: usize,
    b: usize,
    p: usize,
    out: &mut Vec<T>,
) {
    let (h, w, c) = dims;
    let cols = w / n;
    let (gy, gx) = (p / cols, p % cols);
    let base = b * h * w * c;
    for y in 0..n {
        let row = base + ((gy * n + y) * w + gx * n) * c;
        out.extend_from_slice(&img[row..row + n * c]);
    }
}

pub fn patchify<T: Element>(img: &Tensor<T>, n: usize) -> Result<PatchSequence<T>> {
    let (b, h, w, c) = image_dims(img.shape())?;
    let grid = grid_for(h, w, n)?;
    let s = grid.0 * grid.1;
    let mut out = Vec::with_capacity(img.numel());
    for bi in 0..b {
        for p in 0..s {
            read_patch(img.data(), (h, w, c), n, bi, p, &mut out);
        }
    }
    Ok(PatchSequence {
        patches: Tensor::new(vec![b, s, n * n * c], out)?,
        grid,
        patch_size: n,
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Element>(seq: &PatchSequence<T>) -> Result<Tensor<T>> {
    let n = seq.patch_size;
    let (rows, cols) = seq.grid;
    let sh = seq.patches.shape();
    if sh.len() != 3 || sh[1] != rows * cols || n == 0 || !sh[2].is_multiple_of(n * n) {
        return Err(Error::shape("unpatchify", sh, &[rows * cols, n * n]));
    }
    let (b, c) = (sh[0], sh[2] / (n * n));
    let (h, w) = (rows * n, cols * n);
    let mut out = vec![T::zero(); b * h * w * c];
    let src = seq.patches.data();
    let pd = n * n * c;
    for bi in 0..b {
        for p in 0..rows * cols {
            let (gy, gx) = (p / cols, p % cols);
            let patch = &src[(bi * rows * cols + p) * pd..(bi * rows * cols + p + 1) * pd];
            for y in 0..n {
                let dst = ((bi * h + gy * n + y) * w + gx * n) * c;
                out[dst..dst + n * c].copy_from_slice(&patch[y * n * c..(y + 1) * n * c]);
            }
        }
    }
    Tensor::new(vec![b, h, w, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counts_for_128px_16px_patches() {
        let img = Tensor::<f32>::zeros(vec![1, 128, 128, 3]);
        let seq = patchify(&img, 16).unwrap();
        assert_eq!(seq.len(), 64);
        assert_eq!(seq.patch_dim(), 768);
    }

    #[test]
    fn single_patch_is_flattened_image() {
        let data: Vec<f64> = (0..4 * 4 * 2).map(|x| x as f64).collect();
        let img = Tensor::new(vec![1, 4, 4, 2], data.clone()).unwrap();
        let seq = patchify(&img, 4).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq.patches.data(), &data[..]);
    }

    #[test]
    fn indivisible_sizes_are_rejected() {
        let img = Tensor::<f32>::zeros(vec![1, 10, 12, 1]);
        assert!(matches!(patchify(&img, 4), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn unpatchify_inverts_patchify(
            b in 1usize..3, gy in 1usize..4, gx in 1usize..4, n in 1usize..5, c in 1usize..4,
            seed in any::<u64>(),
        ) {
            let (h, w) = (gy * n, gx * n);
            let len = b * h * w * c;
            let data: Vec<f32> = (0..len)
                .map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32 / 7.0)
                .collect();
            let img = Tensor::new(vec![b, h, w, c], data).unwrap();
            let back = unpatchify(&patchify(&img, n).unwrap()).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
