//! Procedural multi-domain live/spoof image datasets.
//!
//! Every domain shares one spoof artifact (a fixed sinusoidal stripe grid) and
//! differs only in its rendering style, so the live/spoof factor is known to be
//! domain invariant.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spoof artifact: stripe amplitude, spatial period (px) and orientation (degrees).
pub const STRIPE_AMPLITUDE: f64 = 0.15;
pub const STRIPE_PERIOD: f64 = 4.0;
pub const STRIPE_ANGLE_DEG: f64 = 30.0;
/// Per-pixel sensor noise applied before blur.
pub const SENSOR_NOISE: f64 = 0.02;
pub const MIN_RENDER_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Spoof = 0,
    Live = 1,
}

impl Label {
    /// Class index used by classifiers (1 = live).
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Spoof),
            1 => Ok(Label::Live),
            _ => Err(Error::InvalidArgument(format!("label {} is not binary", i))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Spoof => "spoof",
            Label::Live => "live",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: u32,
    pub style_seed: u64,
    pub background_hue: f64,
    pub brightness: f64,
    pub blur_sigma: f64,
    pub channel_gain: [f64; 3],
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &'static str, v: f64, lo: f64, hi: f64| {
            if v.is_finite() && v >= lo && v <= hi {
                Ok(())
            } else {
                Err(Error::OutOfRange { name, value: v })
            }
        };
        check("background_hue", self.background_hue, 0.0, 1.0)?;
        check("brightness", self.brightness, 0.3, 1.0)?;
        check("blur_sigma", self.blur_sigma, 0.0, f64::MAX)?;
        for &g in &self.channel_gain {
            check("channel_gain", g, 0.5, 1.5)?;
        }
        Ok(())
    }
}

/// Upper bound of the blur drawn by [`make_domain_spec`].
pub const MAX_SAMPLED_BLUR: f64 = 2.0;

pub(crate) fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined word
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn make_domain_spec(domain_id: u32, style_seed: u64) -> DomainSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(style_seed, domain_id as u64 + 1));
    DomainSpec {
        domain_id,
        style_seed,
        background_hue: rng.random::<f64>(),
        brightness: rng.random_range(0.3..=1.0),
        blur_sigma: rng.random_range(0.0..=MAX_SAMPLED_BLUR),
        channel_gain: [
            rng.random_range(0.5..=1.5),
            rng.random_range(0.5..=1.5),
            rng.random_range(0.5..=1.5),
        ],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: Label,
    pub domain_id: u32,
    pub sample_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Synthetic,
    Ingested,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    samples: Vec<Sample>,
    live_count: usize,
    spoof_count: usize,
    origin: Origin,
}

impl DatasetHandle {
    pub fn new(samples: Vec<Sample>, origin: Origin) -> Self {
        let live_count = samples.iter().filter(|s| s.label == Label::Live).count();
        let spoof_count = samples.len() - live_count;
        Self {
            samples,
            live_count,
            spoof_count,
            origin,
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn live_count(&self) -> usize {
        self.live_count
    }

    pub fn spoof_count(&self) -> usize {
        self.spoof_count
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Stack the images at `indices` into `[B, 3, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let imgs: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.samples[i].image).collect();
        Tensor::stack(&imgs)
    }

    /// Drop the labels. Target domains only ever reach the trainer through this view.
    pub fn unlabeled(&self) -> UnlabeledSet {
        UnlabeledSet {
            images: self.samples.iter().map(|s| s.image.clone()).collect(),
            domain_ids: self.samples.iter().map(|s| s.domain_id).collect(),
        }
    }

    /// Seeded stratified split; each class contributes `round(n_class * train_fraction)`
    /// samples to the first set. Both halves keep the original relative order.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(DatasetHandle, DatasetHandle)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::OutOfRange {
                name: "train_fraction",
                value: train_fraction,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_train = vec![false; self.samples.len()];
        for label in [Label::Spoof, Label::Live] {
            let mut idx: Vec<usize> = (0..self.samples.len())
                .filter(|&i| self.samples[i].label == label)
                .collect();
            idx.shuffle(&mut rng);
            let k = libm::round(idx.len() as f64 * train_fraction) as usize;
            for &i in &idx[..k] {
                in_train[i] = true;
            }
        }
        let pick = |want: bool| {
            self.samples
                .iter()
                .zip(&in_train)
                .filter(|(_, &t)| t == want)
                .map(|(s, _)| s.clone())
                .collect()
        };
        Ok((
            DatasetHandle::new(pick(true), self.origin),
            DatasetHandle::new(pick(false), self.origin),
        ))
    }
}

/// Images without labels.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    images: Vec<Tensor<f32>>,
    domain_ids: Vec<u32>,
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &Tensor<f32> {
        &self.images[i]
    }

    pub fn domain_ids(&self) -> &[u32] {
        &self.domain_ids
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let imgs: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.images[i]).collect();
        Tensor::stack(&imgs)
    }

    /// Concatenate several sets into one blended domain.
    pub fn pool(sets: &[UnlabeledSet]) -> UnlabeledSet {
        UnlabeledSet {
            images: sets.iter().flat_map(|s| s.images.iter().cloned()).collect(),
            domain_ids: sets.iter().flat_map(|s| s.domain_ids.iter().copied()).collect(),
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h - libm::floor(h)) * 6.0;
    let i = libm::floor(h6) as i32 % 6;
    let f = h6 - libm::floor(h6);
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Separable Gaussian blur with clamped borders, in place on one plane.
fn gaussian_blur(plane: &mut [f64], h: usize, w: usize, sigma: f64) {
    if sigma < 1e-3 {
        return;
    }
    let radius = libm::ceil(3.0 * sigma) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| libm::exp(-((d * d) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let mut tmp = vec![0.0; h * w];
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * plane[y * w + clamp(x as isize + j as isize - radius, w)])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * tmp[clamp(y as isize + j as isize - radius, h) * w + x])
                .sum();
        }
    }
}

/// Value of the spoof stripe pattern at pixel `(x, y)`.
pub fn stripe(x: usize, y: usize) -> f64 {
    let a = STRIPE_ANGLE_DEG * PI / 180.0;
    let u = x as f64 * libm::cos(a) + y as f64 * libm::sin(a);
    STRIPE_AMPLITUDE * libm::sin(2.0 * PI * u / STRIPE_PERIOD)
}

/// Render one `[3, size, size]` image. The content layer depends only on
/// `(spec, sample_seed)`; the label only toggles the stripe overlay.
pub fn render_sample(spec: &DomainSpec, label: Label, sample_seed: u64, size: usize) -> Result<Sample> {
    if size < MIN_RENDER_SIZE || !size.is_power_of_two() {
        return Err(Error::InvalidShape(format!(
            "rendered images must be square with a power-of-two side >= {}, got {}",
            MIN_RENDER_SIZE, size
        )));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(
        mix(sample_seed, spec.domain_id as u64),
        spec.style_seed,
    ));
    let n = size as f64;
    let bg = hsv_to_rgb(spec.background_hue, 0.6, spec.brightness);
    let skin = [0.92 * spec.brightness, 0.72 * spec.brightness, 0.58 * spec.brightness];
    let cx = n * rng.random_range(0.35..0.65);
    let cy = n * rng.random_range(0.35..0.65);
    let rx = n * rng.random_range(0.18..0.3);
    let ry = n * rng.random_range(0.24..0.36);
    let light = rng.random_range(-0.5..0.5);
    let mut planes = vec![vec![0.0f64; size * size]; 3];
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            let r2 = dx * dx + dy * dy;
            for (c, plane) in planes.iter_mut().enumerate() {
                let v = if r2 <= 1.0 {
                    let shade = 0.65 + 0.35 * libm::sqrt(1.0 - r2) + 0.15 * light * dx;
                    skin[c] * shade
                } else {
                    bg[c]
                };
                plane[y * size + x] = v * spec.channel_gain[c];
            }
        }
    }
    for plane in planes.iter_mut() {
        for v in plane.iter_mut() {
            // Box-Muller from two uniforms keeps the generator choice explicit.
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random::<f64>();
            *v += SENSOR_NOISE * libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * PI * u2);
        }
        gaussian_blur(plane, size, size, spec.blur_sigma);
    }
    let mut data = Vec::with_capacity(3 * size * size);
    for plane in &planes {
        for y in 0..size {
            for x in 0..size {
                let mut v = plane[y * size + x];
                if label == Label::Spoof {
                    v += stripe(x, y);
                }
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(Sample {
        image: Tensor::new(&[3, size, size], data)?,
        label,
        domain_id: spec.domain_id,
        sample_seed,
    })
}

/// Number of live samples for `n` samples at `live_fraction` (round half away from zero).
pub fn live_quota(n: usize, live_fraction: f64) -> usize {
    libm::round(n as f64 * live_fraction) as usize
}

/// `n` samples, the first `live_quota(n, live_fraction)` live, with
/// `sample_seed = base_seed + index`.
pub fn generate_dataset(
    spec: &DomainSpec,
    n: usize,
    live_fraction: f64,
    base_seed: u64,
    size: usize,
) -> Result<DatasetHandle> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("dataset needs at least 2 samples, got {}", n)));
    }
    if !(live_fraction > 0.0 && live_fraction < 1.0) {
        return Err(Error::OutOfRange {
            name: "live_fraction",
            value: live_fraction,
        });
    }
    let live = live_quota(n, live_fraction);
    let samples = (0..n)
        .map(|i| {
            let label = if i < live { Label::Live } else { Label::Spoof };
            render_sample(spec, label, base_seed + i as u64, size)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetHandle::new(samples, Origin::Synthetic))
}

/// Oversample the minority class with replacement until the classes differ by
/// at most one. Added duplicates are appended after the original samples.
pub fn resample_balance(d: &DatasetHandle, seed: u64) -> Result<DatasetHandle> {
    if d.live_count == 0 {
        return Err(Error::SingleClass("resample_balance: no live samples"));
    }
    if d.spoof_count == 0 {
        return Err(Error::SingleClass("resample_balance: no spoof samples"));
    }
    let (minority, deficit) = if d.live_count < d.spoof_count {
        (Label::Live, d.spoof_count - d.live_count)
    } else {
        (Label::Spoof, d.live_count - d.spoof_count)
    };
    let pool: Vec<usize> = (0..d.len()).filter(|&i| d.samples[i].label == minority).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = d.samples.clone();
    for _ in 0..deficit {
        let pick = pool[rng.random_range(0..pool.len())];
        samples.push(d.samples[pick].clone());
    }
    Ok(DatasetHandle::new(samples, d.origin))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DomainSpec {
        make_domain_spec(0, 42)
    }

    #[test]
    fn domain_spec_is_deterministic_and_in_range() {
        let a = make_domain_spec(0, 42);
        assert_eq!(a, make_domain_spec(0, 42));
        a.validate().unwrap();
        assert!(a.blur_sigma <= MAX_SAMPLED_BLUR);
        assert_ne!(a, make_domain_spec(1, 43));
    }

    #[test]
    fn render_rejects_small_or_non_power_of_two() {
        assert!(render_sample(&spec(), Label::Live, 0, 16).is_err());
        assert!(render_sample(&spec(), Label::Live, 0, 48).is_err());
        assert!(render_sample(&spec(), Label::Live, 0, 32).is_ok());
    }

    #[test]
    fn render_is_deterministic_and_in_range() {
        let a = render_sample(&spec(), Label::Spoof, 7, 32).unwrap();
        let b = render_sample(&spec(), Label::Spoof, 7, 32).unwrap();
        assert_eq!(a, b);
        assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn brightness_raises_mean() {
        let mut s = spec();
        let means: Vec<f32> = [0.3, 0.6, 0.9]
            .iter()
            .map(|&b| {
                s.brightness = b;
                let img = render_sample(&s, Label::Live, 3, 32).unwrap().image;
                img.data().iter().sum::<f32>() / img.numel() as f32
            })
            .collect();
        assert!(means[0] < means[1] && means[1] < means[2], "{:?}", means);
    }

    #[test]
    fn generate_counts_and_seeds() {
        let d = generate_dataset(&spec(), 10, 0.3, 5, 32).unwrap();
        assert_eq!((d.live_count(), d.spoof_count()), (3, 7));
        assert_eq!(d.samples()[4].sample_seed, 9);
        let e = generate_dataset(&spec(), 100, 0.5, 0, 32).unwrap();
        assert_eq!((e.live_count(), e.spoof_count()), (50, 50));
    }

    #[test]
    fn balance_oversamples_minority() {
        let d = generate_dataset(&spec(), 100, 0.3, 0, 32).unwrap();
        let b = resample_balance(&d, 1).unwrap();
        assert_eq!((b.live_count(), b.spoof_count()), (70, 70));
        assert_eq!(&b.samples()[..100], d.samples());
        for s in &b.samples()[100..] {
            assert_eq!(s.label, Label::Live);
            assert!(d.samples().contains(s));
        }
        let same = generate_dataset(&spec(), 10, 0.5, 0, 32).unwrap();
        assert_eq!(resample_balance(&same, 3).unwrap(), same);
    }

    #[test]
    fn balance_rejects_single_class() {
        let d = generate_dataset(&spec(), 10, 0.5, 0, 32).unwrap();
        let spoof_only: Vec<Sample> = d.samples().iter().filter(|s| s.label == Label::Spoof).cloned().collect();
        let h = DatasetHandle::new(spoof_only, Origin::Synthetic);
        assert!(resample_balance(&h, 0).is_err());
    }

    #[test]
    fn split_is_stratified() {
        let d = generate_dataset(&spec(), 20, 0.5, 0, 32).unwrap();
        let (tr, te) = d.split(0.8, 4).unwrap();
        assert_eq!((tr.live_count(), tr.spoof_count()), (8, 8));
        assert_eq!((te.live_count(), te.spoof_count()), (2, 2));
        assert_eq!(d.split(0.8, 4).unwrap().0, tr);
    }
}
