//! Multi-scale augmentation and the procedural texture benchmark.

mod dataset;
mod resample;
mod scale;
mod synthetic;

pub use dataset::{stack, Dataset};
pub use resample::{scale_augment, CropPlacement};
pub use scale::{make_scaled_pair, rescale, sample_scale_pair, CropMode, ScaleConfig, ScaledPair};
pub use synthetic::{
    check_separability, fft_band_features, generate_synthetic_dataset, SeparabilityReport,
    SoftmaxProbe, SyntheticSpec,
};
