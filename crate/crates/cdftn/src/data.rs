//! Image folders: ingestion of `root/{live,spoof}` and PNG export.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cdftn_core::nets::ShapeSpec;
use cdftn_core::synthdomain::{generate_dataset, make_domain_spec, DatasetHandle, Label, Origin, Sample};
use cdftn_core::Tensor;
use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};

use crate::config::{DomainSource, ExperimentConfig};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Load `root/live/*` and `root/spoof/*`, resized (bilinear) to `shape` and
/// scaled to `[0, 1]`. Live images come first, each class in sorted-name order.
pub fn ingest_folder(root: &Path, shape: &ShapeSpec, domain_id: u32) -> Result<DatasetHandle> {
    let mut samples = Vec::new();
    for label in [Label::Live, Label::Spoof] {
        let dir = root.join(label.name());
        if !dir.is_dir() {
            bail!("missing subdirectory `{}` in {}", label.name(), root.display());
        }
        for path in image_files(&dir)? {
            let img = image::open(&path)
                .with_context(|| format!("cannot decode image {}", path.display()))?
                .to_rgb8();
            let img = image::imageops::resize(&img, shape.width as u32, shape.height as u32, FilterType::Triangle);
            samples.push(Sample {
                image: rgb_to_tensor(&img),
                label,
                domain_id,
                sample_seed: samples.len() as u64,
            });
        }
    }
    Ok(DatasetHandle::new(samples, Origin::Ingested))
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// `[3, H, W]` tensor in `[0, 1]` from an 8-bit RGB image.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("buffer matches shape")
}

/// 8-bit RGB image from a `[3, H, W]` tensor, clamping to `[0, 1]`.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        bail!("expected a [3, H, W] image, got {:?}", s);
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| {
            let v = d[c * h * w + y as usize * w + x as usize];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([at(0), at(1), at(2)])
    }))
}

/// File name of an exported sample.
pub fn export_name(s: &Sample) -> String {
    format!("d{}_s{}_{}.png", s.domain_id, s.sample_seed, s.label.name())
}

/// Write every sample as an 8-bit PNG under `root/{live,spoof}/`.
pub fn export_dataset(d: &DatasetHandle, root: &Path) -> Result<usize> {
    for label in [Label::Live, Label::Spoof] {
        let dir = root.join(label.name());
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    for s in d.samples() {
        let path = root.join(s.label.name()).join(export_name(s));
        tensor_to_rgb(&s.image)?
            .save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(d.len())
}

/// First sample seed of synthetic domain `domain_id`; domains never share seeds.
pub fn base_sample_seed(data_seed: u64, domain_id: u32) -> u64 {
    data_seed
        .wrapping_mul(1 << 40)
        .wrapping_add(u64::from(domain_id) << 24)
}

/// All samples of one domain as configured.
pub fn load_domain(cfg: &ExperimentConfig, src: &DomainSource) -> Result<DatasetHandle> {
    match src {
        DomainSource::Synthetic { domain_id, style_seed } => {
            let spec = make_domain_spec(*domain_id, *style_seed);
            Ok(generate_dataset(
                &spec,
                cfg.samples_per_domain,
                cfg.live_fraction,
                base_sample_seed(cfg.data_seed, *domain_id),
                cfg.image_size(),
            )?)
        }
        DomainSource::Folder { domain_id, path } => ingest_folder(path, &cfg.stage_one.shape, *domain_id)
            .with_context(|| format!("ingesting domain {}", domain_id)),
    }
}

/// Train/test split of one domain, seeded by the data seed and domain id.
pub fn split_domain(cfg: &ExperimentConfig, d: &DatasetHandle, domain_id: u32) -> Result<(DatasetHandle, DatasetHandle)> {
    let seed = base_sample_seed(cfg.data_seed, domain_id) ^ SPLIT_STREAM;
    d.split(cfg.train_fraction, seed)
        .map_err(|e| anyhow!("splitting domain {}: {}", domain_id, e))
}

const SPLIT_STREAM: u64 = 0x5bd1_e995;
