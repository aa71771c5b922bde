//! Experiment configuration: TOML file, command-line overrides and defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cdftn_core::nets::ClassifierVariant;
use cdftn_core::trainer::{Mode, StageOneConfig, StageTwoConfig, Topology};
use serde::{Deserialize, Serialize};

/// Environment variable that replaces the configured output directory.
pub const OUTPUT_ROOT_ENV: &str = "CDFTN_OUTPUT_ROOT";

/// Where the images of one domain come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DomainSource {
    /// Procedurally rendered domain.
    Synthetic {
        domain_id: u32,
        #[serde(default)]
        style_seed: u64,
    },
    /// Pre-cropped images in `path/{live,spoof}/`.
    Folder { domain_id: u32, path: PathBuf },
}

impl DomainSource {
    pub fn domain_id(&self) -> u32 {
        match self {
            DomainSource::Synthetic { domain_id, .. } | DomainSource::Folder { domain_id, .. } => *domain_id,
        }
    }

    /// Parse `7` (synthetic domain 7) or `7=path/to/folder`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.split_once('=') {
            Some((id, path)) => Ok(DomainSource::Folder {
                domain_id: id.trim().parse().with_context(|| format!("bad domain id in `{}`", s))?,
                path: PathBuf::from(path.trim()),
            }),
            None => Ok(DomainSource::Synthetic {
                domain_id: s.trim().parse().with_context(|| format!("bad domain id `{}`", s))?,
                style_seed: 0,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub source: DomainSource,
    pub targets: Vec<DomainSource>,
    /// Samples rendered per synthetic domain, before the train/test split.
    pub samples_per_domain: usize,
    pub live_fraction: f64,
    pub train_fraction: f64,
    /// Seeds the synthetic samples and the train/test split, independent of `seed`.
    pub data_seed: u64,
    /// Overrides `stage_two.classifier_variant`.
    pub classifier_variant: ClassifierVariant,
    /// Target content images paired with each source image during synthesis.
    pub synthesis_multiplicity: usize,
    /// Overrides the seeds of both training stages.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub stage_one: StageOneConfig,
    pub stage_two: StageTwoConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::SS2ST,
            source: DomainSource::Synthetic {
                domain_id: 0,
                style_seed: 0,
            },
            targets: vec![DomainSource::Synthetic {
                domain_id: 1,
                style_seed: 0,
            }],
            samples_per_domain: 625,
            live_fraction: 0.5,
            train_fraction: 0.8,
            data_seed: 0,
            classifier_variant: ClassifierVariant::R,
            synthesis_multiplicity: 1,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            stage_one: StageOneConfig::default(),
            stage_two: StageTwoConfig::default(),
        }
    }
}

/// Values given on the command line; `None` keeps the file or default value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub source: Option<DomainSource>,
    pub targets: Option<Vec<DomainSource>>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub stage1_epochs: Option<usize>,
    pub stage2_epochs: Option<usize>,
    pub samples_per_domain: Option<usize>,
    pub classifier_variant: Option<ClassifierVariant>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing experiment config")?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serialising experiment config")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Defaults, then `file`, then the output-root variable, then `flags`.
    pub fn resolve(file: Option<&Path>, flags: &Overrides, output_root_env: Option<String>) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(root) = output_root_env.filter(|s| !s.is_empty()) {
            cfg.output_dir = PathBuf::from(root);
        }
        if let Some(m) = flags.mode {
            cfg.mode = m;
        }
        if let Some(s) = &flags.source {
            cfg.source = s.clone();
        }
        if let Some(t) = &flags.targets {
            cfg.targets = t.clone();
        }
        if let Some(s) = flags.seed {
            cfg.seed = s;
        }
        if let Some(o) = &flags.output_dir {
            cfg.output_dir = o.clone();
        }
        if let Some(e) = flags.stage1_epochs {
            cfg.stage_one.epochs = e;
        }
        if let Some(e) = flags.stage2_epochs {
            cfg.stage_two.epochs = e;
        }
        if let Some(n) = flags.samples_per_domain {
            cfg.samples_per_domain = n;
        }
        if let Some(v) = flags.classifier_variant {
            cfg.classifier_variant = v;
        }
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Push the top-level seed and classifier variant into the stage configs.
    pub fn normalize(&mut self) {
        self.stage_one.seed = self.seed;
        self.stage_two.seed = self.seed;
        self.stage_two.classifier_variant = self.classifier_variant;
    }

    pub fn topology(&self) -> Result<Topology> {
        Ok(Topology::new(
            self.mode,
            self.source.domain_id(),
            self.targets.iter().map(DomainSource::domain_id).collect(),
        )?)
    }

    /// Side length of the square images every domain is rendered or resized to.
    pub fn image_size(&self) -> usize {
        self.stage_one.shape.height
    }

    pub fn validate(&self) -> Result<()> {
        self.topology()?;
        self.stage_one.validate()?;
        let s = &self.stage_one.shape;
        if s.height != s.width {
            bail!("images must be square, got {}x{}", s.height, s.width);
        }
        if self.samples_per_domain < 4 {
            bail!("samples_per_domain must be at least 4, got {}", self.samples_per_domain);
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            bail!("train_fraction must lie in (0, 1), got {}", self.train_fraction);
        }
        if !(self.live_fraction > 0.0 && self.live_fraction < 1.0) {
            bail!("live_fraction must lie in (0, 1), got {}", self.live_fraction);
        }
        if self.synthesis_multiplicity == 0 {
            bail!("synthesis_multiplicity must be positive");
        }
        if self.stage_two.epochs == 0 || self.stage_two.batch_size == 0 {
            bail!("stage_two epochs and batch_size must be positive");
        }
        Ok(())
    }
}
