use crate::augment::{CropMode, ScaleConfig};
use crate::io::kv::{self, parse_bool, parse_value, unknown_key};
use crate::losses::{CandidateSet, LossWeights};
use crate::vit::{ModelConfig, PositionalMode};
use crate::{Error, Result};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::config(format!("unknown precision {s:?}"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Loss toggles. The first five flags are the ablation columns.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub multi_scale: bool,
    pub cross_consis: bool,
    pub cross_pred: bool,
    pub negatives_encoder: bool,
    pub negatives_decoder: bool,
    pub reconstruction: bool,
    pub stop_grad_target: bool,
    pub symmetric_pred: bool,
    pub masked_only: bool,
    /// Reconstruct per-patch standardised pixels instead of raw values.
    pub norm_pix: bool,
    pub candidates: CandidateSet,
    pub tau: f64,
    pub weights: LossWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            multi_scale: true,
            cross_consis: true,
            cross_pred: true,
            negatives_encoder: true,
            negatives_decoder: false,
            reconstruction: true,
            stop_grad_target: true,
            symmetric_pred: false,
            masked_only: true,
            norm_pix: false,
            candidates: CandidateSet::AllButAnchor,
            tau: 0.07,
            weights: LossWeights::default(),
        }
    }
}

impl LossConfig {
    /// Single-scale runs have no second branch to compare against.
    pub fn effective(&self) -> LossConfig {
        let mut c = self.clone();
        if !c.multi_scale {
            c.cross_consis = false;
            c.cross_pred = false;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.effective();
        if !(e.cross_consis || e.cross_pred || e.reconstruction) {
            return Err(Error::config("at least one loss component must be enabled"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("tau must be positive"));
        }
        let w = self.weights;
        if ![w.cc, w.cp, w.re]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
        {
            return Err(Error::config(
                "loss weights must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: u64,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    /// Absolute peak learning rate; `None` means `blr · batch_size / 256`.
    pub lr: Option<f64>,
    pub blr: f64,
    /// `None` means 5% of the planned steps.
    pub warmup_steps: Option<u64>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub mask_ratio: f64,
    /// Both branches reuse one mask draw per item.
    pub shared_mask: bool,
    pub scale: ScaleConfig,
    pub losses: LossConfig,
    pub gsd_positional: bool,
    pub precision: Precision,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 20,
            max_steps: None,
            batch_size: 32,
            lr: None,
            blr: 1.5e-4,
            warmup_steps: None,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            mask_ratio: 0.75,
            shared_mask: false,
            scale: ScaleConfig {
                out_size: 32,
                ..ScaleConfig::default()
            },
            losses: LossConfig::default(),
            gsd_positional: false,
            precision: Precision::F32,
            model: ModelConfig::default(),
        }
    }
}

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref()
        .map_or_else(|| "auto".to_string(), ToString::to_string)
}

fn parse_opt<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "auto" {
        Ok(None)
    } else {
        parse_value(key, v).map(Some)
    }
}

impl TrainConfig {
    pub fn peak_lr(&self) -> f64 {
        self.lr.unwrap_or(self.blr * self.batch_size as f64 / 256.0)
    }

    /// Model config with the positional mode implied by `gsd_positional`.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        let mode = if self.gsd_positional {
            PositionalMode::Gsd
        } else {
            PositionalMode::Standard
        };
        m.encoder.positional_mode = mode;
        m.decoder.positional_mode = mode;
        m
    }

    /// Scale config emitting views at the model's input size.
    pub fn scale_config(&self) -> ScaleConfig {
        ScaleConfig {
            out_size: self.model.encoder.image_size,
            ..self.scale.clone()
        }
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        (dataset_len / self.batch_size.max(1)) as u64
    }

    pub fn total_steps(&self, dataset_len: usize) -> u64 {
        let planned = self.epochs * self.steps_per_epoch(dataset_len);
        self.max_steps.map_or(planned, |m| m.min(planned))
    }

    pub fn warmup(&self, total: u64) -> u64 {
        self.warmup_steps
            .unwrap_or_else(|| (total as f64 * 0.05).round() as u64)
            .min(total)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.scale_config().validate()?;
        self.losses.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be positive"));
        }
        if self.losses.effective().cross_consis
            && self.losses.negatives_encoder
            && self.batch_size < 2
        {
            return Err(Error::config("encoder negatives need batch_size >= 2"));
        }
        if !(self.peak_lr() > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config(
                "learning rate must be positive and weight decay non-negative",
            ));
        }
        if !((0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0)
        {
            return Err(Error::config(
                "adam betas must lie in [0, 1) and eps be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config("mask_ratio must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Every setting as `(key, value)` in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (l, s, m) = (&self.losses, &self.scale, &self.model);
        let (e, d) = (&m.encoder, &m.decoder);
        vec![
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("max_steps", opt(&self.max_steps)),
            ("batch_size", self.batch_size.to_string()),
            ("lr", opt(&self.lr)),
            ("blr", self.blr.to_string()),
            ("warmup_steps", opt(&self.warmup_steps)),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("mask_ratio", self.mask_ratio.to_string()),
            ("shared_mask", self.shared_mask.to_string()),
            ("scale_lo", s.range_lo.to_string()),
            ("scale_hi", s.range_hi.to_string()),
            ("scale_high", s.r_high.to_string()),
            ("crop_fraction", s.crop_fraction.to_string()),
            ("crop_mode", s.crop_mode.to_string()),
            ("multi_scale", l.multi_scale.to_string()),
            ("cross_consis", l.cross_consis.to_string()),
            ("cross_pred", l.cross_pred.to_string()),
            ("negatives_encoder", l.negatives_encoder.to_string()),
            ("negatives_decoder", l.negatives_decoder.to_string()),
            ("reconstruction", l.reconstruction.to_string()),
            ("gsd_positional", self.gsd_positional.to_string()),
            ("stop_grad_target", l.stop_grad_target.to_string()),
            ("symmetric_pred", l.symmetric_pred.to_string()),
            ("masked_only", l.masked_only.to_string()),
            ("norm_pix", l.norm_pix.to_string()),
            ("candidates", l.candidates.to_string()),
            ("tau", l.tau.to_string()),
            ("w_cc", l.weights.cc.to_string()),
            ("w_cp", l.weights.cp.to_string()),
            ("w_re", l.weights.re.to_string()),
            ("precision", self.precision.to_string()),
            ("image_size", e.image_size.to_string()),
            ("channels", e.channels.to_string()),
            ("patch_size", e.patch_size.to_string()),
            ("enc_depth", e.depth.to_string()),
            ("enc_width", e.width.to_string()),
            ("enc_heads", e.heads.to_string()),
            ("enc_mlp_ratio", e.mlp_ratio.to_string()),
            ("dec_depth", d.depth.to_string()),
            ("dec_width", d.width.to_string()),
            ("dec_heads", d.heads.to_string()),
            ("dec_mlp_ratio", d.mlp_ratio.to_string()),
            ("proj_dim", m.proj_dim.to_string()),
            ("pooling", e.pooling.to_string()),
            ("cls_token", e.use_cls_token.to_string()),
            ("pixel_mean", e.pixel_mean.to_string()),
            ("pixel_std", e.pixel_std.to_string()),
            ("reference_gsd", m.reference_gsd.to_string()),
            ("ln_eps", m.ln_eps.to_string()),
        ]
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn render(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of the canonical rendering.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.render().as_bytes()).into()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (l, s, m) = (&mut self.losses, &mut self.scale, &mut self.model);
        let (e, d) = (&mut m.encoder, &mut m.decoder);
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "max_steps" => self.max_steps = parse_opt(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "lr" => self.lr = parse_opt(key, v)?,
            "blr" => self.blr = parse_value(key, v)?,
            "warmup_steps" => self.warmup_steps = parse_opt(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "beta1" => self.beta1 = parse_value(key, v)?,
            "beta2" => self.beta2 = parse_value(key, v)?,
            "adam_eps" => self.adam_eps = parse_value(key, v)?,
            "mask_ratio" => self.mask_ratio = parse_value(key, v)?,
            "shared_mask" => self.shared_mask = parse_bool(key, v)?,
            "scale_lo" => s.range_lo = parse_value(key, v)?,
            "scale_hi" => s.range_hi = parse_value(key, v)?,
            "scale_high" => s.r_high = parse_value(key, v)?,
            "crop_fraction" => s.crop_fraction = parse_value(key, v)?,
            "crop_mode" => s.crop_mode = v.parse::<CropMode>()?,
            "multi_scale" => l.multi_scale = parse_bool(key, v)?,
            "cross_consis" => l.cross_consis = parse_bool(key, v)?,
            "cross_pred" => l.cross_pred = parse_bool(key, v)?,
            "negatives_encoder" => l.negatives_encoder = parse_bool(key, v)?,
            "negatives_decoder" => l.negatives_decoder = parse_bool(key, v)?,
            "reconstruction" => l.reconstruction = parse_bool(key, v)?,
            "gsd_positional" => self.gsd_positional = parse_bool(key, v)?,
            "stop_grad_target" => l.stop_grad_target = parse_bool(key, v)?,
            "symmetric_pred" => l.symmetric_pred = parse_bool(key, v)?,
            "masked_only" => l.masked_only = parse_bool(key, v)?,
            "norm_pix" => l.norm_pix = parse_bool(key, v)?,
            "candidates" => l.candidates = v.parse()?,
            "tau" => l.tau = parse_value(key, v)?,
            "w_cc" => l.weights.cc = parse_value(key, v)?,
            "w_cp" => l.weights.cp = parse_value(key, v)?,
            "w_re" => l.weights.re = parse_value(key, v)?,
            "precision" => self.precision = v.parse()?,
            "image_size" => e.image_size = parse_value(key, v)?,
            "channels" => e.channels = parse_value(key, v)?,
            "patch_size" => e.patch_size = parse_value(key, v)?,
            "enc_depth" => e.depth = parse_value(key, v)?,
            "enc_width" => e.width = parse_value(key, v)?,
            "enc_heads" => e.heads = parse_value(key, v)?,
            "enc_mlp_ratio" => e.mlp_ratio = parse_value(key, v)?,
            "dec_depth" => d.depth = parse_value(key, v)?,
            "dec_width" => d.width = parse_value(key, v)?,
            "dec_heads" => d.heads = parse_value(key, v)?,
            "dec_mlp_ratio" => d.mlp_ratio = parse_value(key, v)?,
            "proj_dim" => m.proj_dim = parse_value(key, v)?,
            "pooling" => e.pooling = v.parse()?,
            "cls_token" => e.use_cls_token = parse_bool(key, v)?,
            "pixel_mean" => e.pixel_mean = parse_value(key, v)?,
            "pixel_std" => e.pixel_std = parse_value(key, v)?,
            "reference_gsd" => m.reference_gsd = parse_value(key, v)?,
            "ln_eps" => m.ln_eps = parse_value(key, v)?,
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Defaults overridden by the `key = value` lines of `text`.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for entry in kv::parse_kv(text)? {
            c.set(&entry.key, &entry.value).map_err(|err| match err {
                Error::Config(msg) if msg.starts_with("unknown key") => unknown_key(&entry),
                Error::Config(msg) => Error::config(format!("line {}: {msg}", entry.line)),
                other => other,
            })?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(TrainConfig::from_kv(&c.render()).unwrap(), c);
        assert_eq!(c.peak_lr(), 1.5e-4 * 32.0 / 256.0);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let e = TrainConfig::from_kv("seed = 1\nbatchsize = 4\n").unwrap_err();
        assert!(e.to_string().contains("batchsize"), "{e}");
        assert!(TrainConfig::from_kv("mask_ratio = 1.0").is_err());
        assert!(TrainConfig::from_kv("multi_scale = maybe").is_err());
    }

    #[test]
    fn all_losses_off_is_rejected() {
        let text = "multi_scale = false\nreconstruction = false\n";
        assert!(matches!(TrainConfig::from_kv(text), Err(Error::Config(_))));
    }

    #[test]
    fn single_scale_forces_cross_terms_off() {
        let c = TrainConfig::from_kv("multi_scale = false").unwrap();
        let e = c.losses.effective();
        assert!(!e.cross_consis && !e.cross_pred && e.reconstruction);
    }

    #[test]
    fn step_plan() {
        let c = TrainConfig::from_kv("batch_size = 32\nepochs = 3").unwrap();
        assert_eq!(c.steps_per_epoch(100), 3);
        assert_eq!(c.total_steps(100), 9);
        let c = TrainConfig::from_kv("batch_size = 32\nepochs = 3\nmax_steps = 5").unwrap();
        assert_eq!(c.total_steps(100), 5);
        assert_eq!(c.warmup(200), 10);
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.losses.cross_pred = false;
        assert_ne!(a.hash(), b.hash());
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(
            seed in any::<u64>(),
            lr in proptest::option::of(1e-6f64..1.0),
            m in 0.0f64..0.9,
            lo in 0.05f64..0.5,
            flags in proptest::collection::vec(any::<bool>(), 5),
        ) {
            let mut c = TrainConfig::default();
            c.seed = seed;
            c.lr = lr;
            c.mask_ratio = m;
            c.scale.range_lo = lo;
            c.losses.cross_consis = flags[0];
            c.losses.cross_pred = flags[1];
            c.losses.negatives_encoder = flags[2];
            c.losses.negatives_decoder = flags[3];
            c.gsd_positional = flags[4];
            let back = TrainConfig::from_kv(&c.render()).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.hash(), c.hash());
        }
    }
}
