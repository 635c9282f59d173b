use super::resample::{scale_augment, CropPlacement};
use crate::numerics::{Element, Tensor};
use crate::{Error, Result};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    Center,
    Random,
}

impl std::str::FromStr for CropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center" => Ok(CropMode::Center),
            "random" => Ok(CropMode::Random),
            _ => Err(Error::config(format!("unknown crop mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for CropMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CropMode::Center => "center",
            CropMode::Random => "random",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleConfig {
    pub range_lo: f64,
    pub range_hi: f64,
    /// Ratio of the high-resolution view.
    pub r_high: f64,
    pub out_size: usize,
    /// Side of the crop window relative to the source image.
    pub crop_fraction: f64,
    pub crop_mode: CropMode,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        ScaleConfig {
            range_lo: 0.2,
            range_hi: 0.8,
            r_high: 1.0,
            out_size: 128,
            crop_fraction: 1.0,
            crop_mode: CropMode::Random,
        }
    }
}

impl ScaleConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.range_lo, self.range_hi);
        if !(lo > 0.0 && lo < hi && hi <= 1.0) {
            return Err(Error::config(format!(
                "scale range [{lo}, {hi}] is not inside (0, 1]"
            )));
        }
        if !(self.r_high >= hi && self.r_high <= 1.0) {
            return Err(Error::config(format!(
                "high ratio {} must lie in [{hi}, 1]",
                self.r_high
            )));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) || self.out_size == 0 {
            return Err(Error::config(
                "crop fraction must be in (0, 1] and out_size positive",
            ));
        }
        Ok(())
    }
}

/// Two views of one image at ratios `r_l < r_h`, both `out_size` square.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledPair<T> {
    pub p_h: Tensor<T>,
    pub p_l: Tensor<T>,
    pub r_h: f64,
    pub r_l: f64,
    pub g_h: f64,
    pub g_l: f64,
}

/// `(r_h, r_l)` with `r_h` fixed and `r_l ~ U[lo, hi)`.
pub fn sample_scale_pair<R: Rng + ?Sized>(
    rng: &mut R,
    lo: f64,
    hi: f64,
    r_high: f64,
) -> Result<(f64, f64)> {
    if !(lo > 0.0 && lo < hi && hi <= 1.0) || !(r_high >= hi && r_high <= 1.0) {
        return Err(Error::config(format!(
            "invalid scale sampling range [{lo}, {hi}) with high ratio {r_high}"
        )));
    }
    let r_l = rng.random_range(lo..hi);
    Ok((r_high, r_l))
}

fn placement<R: Rng + ?Sized>(mode: CropMode, rng: &mut R) -> CropPlacement {
    match mode {
        CropMode::Center => CropPlacement::Center,
        CropMode::Random => CropPlacement::At(rng.random(), rng.random()),
    }
}

/// Sample ratios and crops, resample both views and attach their GSDs.
pub fn make_scaled_pair<T: Element, R: Rng + ?Sized>(
    img: &Tensor<T>,
    base_gsd: f64,
    cfg: &ScaleConfig,
    rng: &mut R,
) -> Result<ScaledPair<T>> {
    cfg.validate()?;
    let (r_h, r_l) = sample_scale_pair(rng, cfg.range_lo, cfg.range_hi, cfg.r_high)?;
    let ph = placement(cfg.crop_mode, rng);
    let pl = placement(cfg.crop_mode, rng);
    Ok(ScaledPair {
        p_h: scale_augment(img, r_h, cfg.out_size, cfg.crop_fraction, ph)?,
        p_l: scale_augment(img, r_l, cfg.out_size, cfg.crop_fraction, pl)?,
        r_h,
        r_l,
        g_h: base_gsd / r_h,
        g_l: base_gsd / r_l,
    })
}

/// Whole-image rescale used for evaluation: same kernel, no crop.
pub fn rescale<T: Element>(img: &Tensor<T>, r: f64, out_size: usize) -> Result<Tensor<T>> {
    scale_augment(img, r, out_size, 1.0, CropPlacement::Center)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Streams;
    use proptest::prelude::*;

    #[test]
    fn default_high_ratio_is_one() {
        let mut r = Streams::new(3).stream("scale", &[]);
        let c = ScaleConfig::default();
        for _ in 0..100 {
            let (h, l) = sample_scale_pair(&mut r, c.range_lo, c.range_hi, c.r_high).unwrap();
            assert_eq!(h, 1.0);
            assert!(l < h);
        }
    }

    #[test]
    fn low_ratio_mean_is_centre_of_range() {
        let mut r = Streams::new(11).stream("scale", &[]);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| sample_scale_pair(&mut r, 0.2, 0.8, 1.0).unwrap().1)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn bad_ranges_are_config_errors() {
        let mut r = Streams::new(0).stream("scale", &[]);
        for (lo, hi, h) in [
            (0.0, 0.5, 1.0),
            (0.6, 0.5, 1.0),
            (0.2, 1.2, 1.0),
            (0.2, 0.8, 0.7),
        ] {
            assert!(matches!(
                sample_scale_pair(&mut r, lo, hi, h),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn pair_contract() {
        let mut d = Vec::new();
        for i in 0..64 * 64 * 3 {
            d.push((i % 13) as f64 / 13.0);
        }
        let img = Tensor::new(vec![64, 64, 3], d).unwrap();
        let cfg = ScaleConfig {
            out_size: 64,
            ..ScaleConfig::default()
        };
        let mut r = Streams::new(5).stream("scale", &[]);
        let p = make_scaled_pair(&img, 0.3, &cfg, &mut r).unwrap();
        assert_eq!(p.p_h.shape(), &[64, 64, 3]);
        assert_eq!(p.p_l.shape(), &[64, 64, 3]);
        assert_eq!(p.p_h, img);
        assert!(p.g_l > p.g_h);
        assert_eq!(p.g_h, 0.3);
        assert_eq!(p.g_l, 0.3 / p.r_l);

        let cfg = ScaleConfig {
            out_size: 128,
            ..ScaleConfig::default()
        };
        let p = make_scaled_pair(&img, 1.0, &cfg, &mut r).unwrap();
        assert_eq!(p.p_h.shape(), &[128, 128, 3]);
        assert_eq!(p.p_l.shape(), &[128, 128, 3]);
        assert_eq!(p.p_h, rescale(&img, 1.0, 128).unwrap());
    }

    #[test]
    fn ordering_holds_over_many_draws() {
        let mut r = Streams::new(17).stream("scale", &[]);
        for _ in 0..100_000 {
            let (h, l) = sample_scale_pair(&mut r, 0.2, 0.8, 1.0).unwrap();
            assert!(l < h && (0.2..0.8).contains(&l));
        }
    }

    proptest! {
        #[test]
        fn ordering_holds_for_any_valid_range(
            seed in 0u64..10_000,
            lo in 0.01f64..0.98,
            width in 0.001f64..1.0,
        ) {
            let hi = (lo + width).min(1.0);
            prop_assume!(lo < hi);
            let mut r = Streams::new(seed).stream("scale", &[]);
            let (h, l) = sample_scale_pair(&mut r, lo, hi, 1.0).unwrap();
            prop_assert!(l < h);
            prop_assert!(l >= lo && l < hi);
        }
    }
}
