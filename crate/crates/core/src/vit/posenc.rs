use crate::numerics::{Element, Tensor};
use crate::{Error, Result};

/// How patch positions are turned into sin/cos features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionalMode {
    /// Fixed 2-D sin/cos over grid coordinates.
    Standard,
    /// Grid coordinates scaled by `gsd / reference_gsd` first, so equal
    /// ground extents get equal phases at every resolution.
    Gsd,
}

impl std::str::FromStr for PositionalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(PositionalMode::Standard),
            "gsd" => Ok(PositionalMode::Gsd),
            _ => Err(Error::config(format!("unknown positional mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for PositionalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PositionalMode::Standard => "standard",
            PositionalMode::Gsd => "gsd",
        })
    }
}

fn encode_axis(out: &mut [f64], dims: usize, pos: f64) {
    let n_sin = dims.div_ceil(2);
    let n_cos = dims / 2;
    for i in 0..n_sin {
        let omega = 1.0 / 10_000f64.powf(i as f64 / n_sin as f64);
        out[i] = (pos * omega).sin();
        if i < n_cos {
            out[n_sin + i] = (pos * omega).cos();
        }
    }
}

/// `[rows*cols, d]` table: the first half of the features encodes the column
/// coordinate, the second half the row coordinate.
pub fn positional_encoding<T: Element>(
    grid: (usize, usize),
    d: usize,
    mode: PositionalMode,
    gsd: Option<f64>,
    reference_gsd: f64,
) -> Result<Tensor<T>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::config(format!("positional width {d} must be even")));
    }
    let factor = match mode {
        PositionalMode::Standard => 1.0,
        PositionalMode::Gsd => {
            let g = gsd.ok_or_else(|| Error::config("gsd positional mode needs a GSD"))?;
            if !(g > 0.0 && reference_gsd > 0.0) {
                return Err(Error::config("GSD values must be positive"));
            }
            g / reference_gsd
        }
    };
    let (rows, cols) = grid;
    let half = d / 2;
    let mut out = vec![0.0; rows * cols * d];
    for r in 0..rows {
        for c in 0..cols {
            let row = &mut out[(r * cols + c) * d..(r * cols + c + 1) * d];
            encode_axis(&mut row[..half], half, c as f64 * factor);
            encode_axis(&mut row[half..], half, r as f64 * factor);
        }
    }
    Tensor::from_f64(vec![rows * cols, d], &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_mode_ignores_gsd() {
        let a = positional_encoding::<f64>((4, 4), 16, PositionalMode::Standard, Some(1.0), 1.0);
        let b = positional_encoding::<f64>((4, 4), 16, PositionalMode::Standard, Some(10.0), 1.0);
        assert_eq!(a.unwrap(), b.unwrap());
    }

    #[test]
    fn gsd_mode_at_reference_equals_standard_bitwise() {
        for d in [2, 6, 16, 64] {
            let s =
                positional_encoding::<f32>((3, 5), d, PositionalMode::Standard, None, 0.7).unwrap();
            let g =
                positional_encoding::<f32>((3, 5), d, PositionalMode::Gsd, Some(0.7), 0.7).unwrap();
            assert_eq!(s, g);
        }
    }

    #[test]
    fn gsd_mode_differs_off_reference_and_is_pure() {
        let a = positional_encoding::<f64>((4, 4), 8, PositionalMode::Gsd, Some(2.0), 1.0).unwrap();
        let b = positional_encoding::<f64>((4, 4), 8, PositionalMode::Gsd, Some(2.0), 1.0).unwrap();
        let s = positional_encoding::<f64>((4, 4), 8, PositionalMode::Standard, None, 1.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, s);
    }

    #[test]
    fn odd_width_is_rejected() {
        assert!(matches!(
            positional_encoding::<f64>((2, 2), 7, PositionalMode::Standard, None, 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn first_position_is_sin_zero_cos_one() {
        let t = positional_encoding::<f64>((2, 2), 8, PositionalMode::Standard, None, 1.0).unwrap();
        assert_eq!(&t.data()[..8], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }
}
