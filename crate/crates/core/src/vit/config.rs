use super::patch::grid_for;
use super::posenc::PositionalMode;
use crate::{Error, Result};

/// How the encoder's token sequence is reduced to one vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    ClassToken,
    Mean,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Pooling::ClassToken),
            "mean" => Ok(Pooling::Mean),
            _ => Err(Error::config(format!("unknown pooling {s:?}"))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::ClassToken => "cls",
            Pooling::Mean => "mean",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub use_cls_token: bool,
    pub positional_mode: PositionalMode,
    pub pooling: Pooling,
    /// Patches enter the embedding as `(x - pixel_mean) / pixel_std`.
    pub pixel_mean: f64,
    pub pixel_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub positional_mode: PositionalMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Output width of the projection head.
    pub proj_dim: usize,
    /// GSD at which the gsd positional mode matches the standard one.
    pub reference_gsd: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    /// Desk-scale model: 32px RGB, 8px patches, 64-wide 4-block encoder,
    /// 32-wide 2-block decoder. Inputs are centred on 0.5 and scaled by 10.
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                depth: 4,
                width: 64,
                heads: 4,
                mlp_ratio: 4,
                patch_size: 8,
                image_size: 32,
                channels: 3,
                use_cls_token: true,
                positional_mode: PositionalMode::Standard,
                pooling: Pooling::ClassToken,
                pixel_mean: 0.5,
                pixel_std: 0.1,
            },
            decoder: DecoderConfig {
                depth: 2,
                width: 32,
                heads: 2,
                mlp_ratio: 4,
                positional_mode: PositionalMode::Standard,
            },
            proj_dim: 128,
            reference_gsd: 1.0,
            ln_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// ViT-Base proportions: 12 encoder blocks, 8 decoder blocks, 128px input.
    pub fn paper_shaped() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                depth: 12,
                width: 768,
                heads: 12,
                mlp_ratio: 4,
                patch_size: 16,
                image_size: 128,
                channels: 3,
                use_cls_token: true,
                positional_mode: PositionalMode::Standard,
                pooling: Pooling::ClassToken,
                pixel_mean: 0.0,
                pixel_std: 1.0,
            },
            decoder: DecoderConfig {
                depth: 8,
                width: 512,
                heads: 16,
                mlp_ratio: 4,
                positional_mode: PositionalMode::Standard,
            },
            proj_dim: 128,
            reference_gsd: 1.0,
            ln_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let d = &self.decoder;
        grid_for(e.image_size, e.image_size, e.patch_size)?;
        for (what, width, heads) in [("encoder", e.width, e.heads), ("decoder", d.width, d.heads)] {
            if width == 0 || width % 2 != 0 {
                return Err(Error::config(format!("{what} width {width} must be even")));
            }
            if heads == 0 || width % heads != 0 {
                return Err(Error::config(format!(
                    "{what} width {width} not divisible by {heads} heads"
                )));
            }
        }
        if e.channels == 0 || e.mlp_ratio == 0 || d.mlp_ratio == 0 || self.proj_dim == 0 {
            return Err(Error::config(
                "channels, mlp ratios and proj_dim must be positive",
            ));
        }
        if e.pooling == Pooling::ClassToken && !e.use_cls_token {
            return Err(Error::config("class-token pooling requires use_cls_token"));
        }
        if !e.pixel_mean.is_finite() || !(e.pixel_std > 0.0 && e.pixel_std.is_finite()) {
            return Err(Error::config(
                "pixel_std must be positive and pixel_mean finite",
            ));
        }
        if !(self.reference_gsd > 0.0) || !(self.ln_eps > 0.0) {
            return Err(Error::config("reference_gsd and ln_eps must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let e = &self.encoder;
        (e.image_size / e.patch_size, e.image_size / e.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        let e = &self.encoder;
        e.patch_size * e.patch_size * e.channels
    }
}
