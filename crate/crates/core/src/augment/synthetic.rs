use super::dataset::Dataset;
use super::scale::rescale;
use crate::io::kv::{parse_kv, parse_value};
use crate::numerics::{Streams, Tensor};
use crate::{par, Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use std::f64::consts::PI;

/// Oriented-grating texture classes. Class `c` has dominant orientation
/// `c·π/num_classes`; period, phase, amplitude, a weaker distractor grating
/// and pixel noise vary per image (brightness and tint too, when jittered),
/// so every class has the same mean colour and only second-order structure
/// separates them.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub seed: u64,
    /// Grating period range in pixels.
    pub period_lo: f64,
    pub period_hi: f64,
    /// Half-width of the uniform orientation jitter, degrees.
    pub jitter_deg: f64,
    /// Distractor amplitude relative to the main grating.
    pub distractor: f64,
    pub noise: f64,
    /// Half-width of the per-image brightness offset around 0.5.
    pub brightness_jitter: f64,
    /// Half-width of the per-channel gain around 1.
    pub tint_jitter: f64,
    pub base_gsd: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 4,
            images_per_class: 64,
            image_size: 32,
            channels: 3,
            seed: 0,
            period_lo: 5.0,
            period_hi: 16.0,
            jitter_deg: 8.0,
            distractor: 0.15,
            noise: 0.15,
            brightness_jitter: 0.0,
            tint_jitter: 0.0,
            base_gsd: 1.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.images_per_class == 0 {
            return Err(Error::config(
                "need at least two classes and one image per class",
            ));
        }
        if self.image_size < 4 || self.channels == 0 {
            return Err(Error::config(
                "image_size must be at least 4 and channels positive",
            ));
        }
        if !(self.period_lo >= 2.0 && self.period_lo <= self.period_hi) {
            return Err(Error::config("period range must satisfy 2 <= lo <= hi"));
        }
        if !(self.jitter_deg >= 0.0 && self.distractor >= 0.0 && self.noise >= 0.0) {
            return Err(Error::config(
                "jitter, distractor and noise must be non-negative",
            ));
        }
        if !(self.base_gsd > 0.0) {
            return Err(Error::config("base_gsd must be positive"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.num_classes * self.images_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "num_classes" => self.num_classes = parse_value(key, v)?,
            "images_per_class" => self.images_per_class = parse_value(key, v)?,
            "image_size" => self.image_size = parse_value(key, v)?,
            "channels" => self.channels = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "period_lo" => self.period_lo = parse_value(key, v)?,
            "period_hi" => self.period_hi = parse_value(key, v)?,
            "jitter_deg" => self.jitter_deg = parse_value(key, v)?,
            "distractor" => self.distractor = parse_value(key, v)?,
            "noise" => self.noise = parse_value(key, v)?,
            "brightness_jitter" => self.brightness_jitter = parse_value(key, v)?,
            "tint_jitter" => self.tint_jitter = parse_value(key, v)?,
            "base_gsd" => self.base_gsd = parse_value(key, v)?,
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut s = SyntheticSpec::default();
        for e in parse_kv(text)? {
            s.set(&e.key, &e.value)
                .map_err(|err| Error::config(format!("line {}: {err}", e.line)))?;
        }
        s.validate()?;
        Ok(s)
    }
}

fn render(spec: &SyntheticSpec, class: usize, index: usize) -> Tensor<f32> {
    let mut r = Streams::new(spec.seed).stream("synth", &[class as u64, index as u64]);
    let jitter = spec.jitter_deg.to_radians();
    let theta = class as f64 * PI / spec.num_classes as f64 + r.random_range(-jitter..=jitter);
    let period = r.random_range(spec.period_lo..=spec.period_hi);
    let phase = r.random_range(0.0..2.0 * PI);
    let amp = r.random_range(0.6..1.0);
    let d_theta = r.random_range(0.0..PI);
    let d_period = r.random_range(spec.period_lo..=spec.period_hi);
    let d_phase = r.random_range(0.0..2.0 * PI);
    let (bj, tj) = (spec.brightness_jitter, spec.tint_jitter);
    let base = 0.5 + r.random_range(-bj..=bj);
    let tint: Vec<f64> = (0..spec.channels)
        .map(|_| 1.0 + r.random_range(-tj..=tj))
        .collect();
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let n = spec.image_size;
    let (ct, st) = (theta.cos(), theta.sin());
    let (cd, sd) = (d_theta.cos(), d_theta.sin());
    let mut data = Vec::with_capacity(n * n * spec.channels);
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64, y as f64);
            let g = (2.0 * PI * (xf * ct + yf * st) / period + phase).sin();
            let dg = (2.0 * PI * (xf * cd + yf * sd) / d_period + d_phase).sin();
            let v = amp * (g + spec.distractor * dg);
            for t in &tint {
                let e = if spec.noise > 0.0 {
                    noise.sample(&mut r)
                } else {
                    0.0
                };
                data.push((base + 0.3 * t * v + e) as f32);
            }
        }
    }
    Tensor::new(vec![n, n, spec.channels], data).expect("shape matches data")
}

/// Deterministic given `spec.seed`; images are ordered class-major.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let per = spec.images_per_class;
    let images = par::map_indexed(spec.len(), |i| render(spec, i / per, i % per));
    let labels = (0..spec.len()).map(|i| i / per).collect();
    Dataset::new(
        images,
        labels,
        vec![spec.base_gsd; spec.len()],
        spec.num_classes,
    )
}

/// Fraction of non-DC spectral power per orientation bin, then per radial
/// band, of the channel-mean image.
pub fn fft_band_features(img: &Tensor<f32>, orientation_bins: usize) -> Vec<f64> {
    let sh = img.shape();
    let (h, w, c) = (sh[0], sh[1], sh[2]);
    let mut buf: Vec<Complex<f64>> = (0..h * w)
        .map(|p| {
            let s: f64 = img.data()[p * c..(p + 1) * c]
                .iter()
                .map(|&v| v as f64)
                .sum();
            Complex::new(s / c as f64, 0.0)
        })
        .collect();
    let mut planner = FftPlanner::new();
    let row = planner.plan_fft_forward(w);
    for chunk in buf.chunks_mut(w) {
        row.process(chunk);
    }
    let col = planner.plan_fft_forward(h);
    let mut tmp = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            tmp[y] = buf[y * w + x];
        }
        col.process(&mut tmp);
        for y in 0..h {
            buf[y * w + x] = tmp[y];
        }
    }
    let signed = |k: usize, n: usize| {
        if k <= n / 2 {
            k as f64
        } else {
            k as f64 - n as f64
        }
    };
    let bands = [0.125, 0.25, f64::INFINITY];
    let mut feats = vec![0.0; orientation_bins + bands.len()];
    let mut total = 0.0;
    for ky in 0..h {
        for kx in 0..w {
            let (fy, fx) = (signed(ky, h) / h as f64, signed(kx, w) / w as f64);
            let rho = (fx * fx + fy * fy).sqrt();
            if rho == 0.0 {
                continue;
            }
            let p = buf[ky * w + kx].norm_sqr();
            let alpha = fy.atan2(fx).rem_euclid(PI);
            let bin = (alpha / (PI / orientation_bins as f64)).round() as usize % orientation_bins;
            feats[bin] += p;
            let band = bands
                .iter()
                .position(|&b| rho < b)
                .unwrap_or(bands.len() - 1);
            feats[orientation_bins + band] += p;
            total += p;
        }
    }
    if total > 0.0 {
        for f in &mut feats {
            *f /= total;
        }
    }
    feats
}

/// Multinomial logistic regression on standardised features.
#[derive(Clone, Debug)]
pub struct SoftmaxProbe {
    mean: Vec<f64>,
    std: Vec<f64>,
    weights: Vec<f64>,
    classes: usize,
}

impl SoftmaxProbe {
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for r in x {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; d];
        for r in x {
            for j in 0..d {
                std[j] += (r[j] - mean[j]).powi(2) / n;
            }
        }
        for s in &mut std {
            *s = s.sqrt().max(1e-12);
        }
        let mut probe = SoftmaxProbe {
            mean,
            std,
            weights: vec![0.0; (d + 1) * classes],
            classes,
        };
        let z: Vec<Vec<f64>> = x.iter().map(|r| probe.standardise(r)).collect();
        for _ in 0..500 {
            let mut grad = vec![0.0; probe.weights.len()];
            for (zi, &yi) in z.iter().zip(y) {
                let p = probe.probs(zi);
                for k in 0..classes {
                    let g = (p[k] - f64::from(u8::from(k == yi))) / n;
                    for j in 0..=d {
                        grad[j * classes + k] += g * zi[j];
                    }
                }
            }
            for (w, g) in probe.weights.iter_mut().zip(&grad) {
                *w -= 0.5 * (g + 1e-4 * *w);
            }
        }
        probe
    }

    fn standardise(&self, r: &[f64]) -> Vec<f64> {
        let mut z: Vec<f64> = r
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        z.push(1.0);
        z
    }

    fn probs(&self, z: &[f64]) -> Vec<f64> {
        let k = self.classes;
        let logits: Vec<f64> = (0..k)
            .map(|c| {
                z.iter()
                    .enumerate()
                    .map(|(j, v)| v * self.weights[j * k + c])
                    .sum()
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn predict(&self, features: &[f64]) -> usize {
        let p = self.probs(&self.standardise(features));
        (0..self.classes)
            .max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a)))
            .unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeparabilityReport {
    /// Probe accuracy on the images it was fitted to.
    pub train_accuracy: f64,
    /// Fraction of images whose predicted class survives a 0.5 rescale.
    pub scale_consistency: f64,
}

impl SeparabilityReport {
    pub fn passes(&self) -> bool {
        self.train_accuracy > 0.90 && self.scale_consistency >= 0.95
    }
}

/// Fit a softmax probe on FFT band features and measure how often its
/// prediction is unchanged after rescaling each image by 0.5.
pub fn check_separability(ds: &Dataset) -> Result<SeparabilityReport> {
    if ds.is_empty() {
        return Err(Error::EmptyAxis("dataset"));
    }
    let bins = (2 * ds.num_classes).max(8);
    let size = ds.image_shape().0;
    let feats = par::map_slice(&ds.images, |img| fft_band_features(img, bins));
    let probe = SoftmaxProbe::fit(&feats, &ds.labels, ds.num_classes);
    let pred: Vec<usize> = feats.iter().map(|f| probe.predict(f)).collect();
    let correct = pred.iter().zip(&ds.labels).filter(|(p, l)| p == l).count();
    let scaled = par::map_slice(&ds.images, |img| {
        rescale(img, 0.5, size).map(|s| fft_band_features(&s, bins))
    });
    let mut same = 0;
    for (s, p) in scaled.into_iter().zip(&pred) {
        if probe.predict(&s?) == *p {
            same += 1;
        }
    }
    let n = ds.len() as f64;
    Ok(SeparabilityReport {
        train_accuracy: correct as f64 / n,
        scale_consistency: same as f64 / n,
    })
}
