use crate::numerics::{Element, Tensor};
use crate::{Error, Result};

/// Per-output-index source taps `(index, weight)`, weights summing to 1.
fn area_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|i| {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    (overlap > 0.0).then_some((i, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Half-pixel-centred linear taps, edge clamped.
fn linear_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let t = s - i0 as f64;
            if t == 0.0 || i0 + 1 >= src {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - t), (i0 + 1, t)]
            }
        })
        .collect()
}

/// Separable resampling of an `h×w×c` plane with per-axis taps.
fn separable(
    src: &[f64],
    (h, w, c): (usize, usize, usize),
    rows: &[Vec<(usize, f64)>],
    cols: &[Vec<(usize, f64)>],
) -> Vec<f64> {
    let ow = cols.len();
    let mut tmp = vec![0.0; h * ow * c];
    for y in 0..h {
        for (ox, taps) in cols.iter().enumerate() {
            for &(x, wt) in taps {
                for ch in 0..c {
                    tmp[(y * ow + ox) * c + ch] += wt * src[(y * w + x) * c + ch];
                }
            }
        }
    }
    let mut out = vec![0.0; rows.len() * ow * c];
    for (oy, taps) in rows.iter().enumerate() {
        for &(y, wt) in taps {
            let (dst, s) = (oy * ow * c, y * ow * c);
            for i in 0..ow * c {
                out[dst + i] += wt * tmp[s + i];
            }
        }
    }
    out
}

/// Where the crop window sits inside the source image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CropPlacement {
    Center,
    /// Top-left offset as fractions of the free margin, each in `[0, 1]`.
    At(f64, f64),
}

/// Crop a square window of side `round(fraction·min(H,W))`, area-average it
/// down to `round(r·side)` pixels, then resize bilinearly to `out_size`.
/// Accumulation runs in f64 and the result is clamped to the input range, so
/// constants stay constant and the output never leaves `[min, max]`.
pub fn scale_augment<T: Element>(
    img: &Tensor<T>,
    r: f64,
    out_size: usize,
    crop_fraction: f64,
    placement: CropPlacement,
) -> Result<Tensor<T>> {
    let sh = img.shape();
    let [h, w, c] = *sh else {
        return Err(Error::shape("scale_augment", sh, &[0, 0, 0]));
    };
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::config(format!("scale ratio {r} outside (0, 1]")));
    }
    if !(crop_fraction > 0.0 && crop_fraction <= 1.0) {
        return Err(Error::config(format!(
            "crop fraction {crop_fraction} outside (0, 1]"
        )));
    }
    if out_size == 0 || c == 0 {
        return Err(Error::config("output size and channels must be positive"));
    }
    let side = ((crop_fraction * h.min(w) as f64).round() as usize).max(1);
    let small = (r * side as f64).round() as usize;
    if small < 2 {
        return Err(Error::Degenerate(format!(
            "ratio {r} leaves {small}px of a {side}px crop"
        )));
    }
    let (fy, fx) = match placement {
        CropPlacement::Center => (0.5, 0.5),
        CropPlacement::At(a, b) => (a.clamp(0.0, 1.0), b.clamp(0.0, 1.0)),
    };
    let oy = ((h - side) as f64 * fy).round() as usize;
    let ox = ((w - side) as f64 * fx).round() as usize;
    let src = img.data();
    let (lo, hi) = src
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v.f64()), b.max(v.f64()))
        });
    if side == h && side == w && small == side && side == out_size {
        return Ok(img.clone());
    }
    let mut crop = Vec::with_capacity(side * side * c);
    for y in oy..oy + side {
        let row = (y * w + ox) * c;
        crop.extend(src[row..row + side * c].iter().map(|v| v.f64()));
    }
    let down = if small == side {
        crop
    } else {
        let taps = area_taps(side, small);
        separable(&crop, (side, side, c), &taps, &taps)
    };
    let up = if small == out_size {
        down
    } else {
        let taps = linear_taps(small, out_size);
        separable(&down, (small, small, c), &taps, &taps)
    };
    let data = if lo <= hi {
        up.into_iter().map(|v| T::of(v.clamp(lo, hi))).collect()
    } else {
        up.into_iter().map(T::of).collect()
    };
    Tensor::new(vec![out_size, out_size, c], data)
}
