//! Two-stage training: cross-domain disentanglement and translation (stage 1),
//! then a classifier trained on pseudo-labeled translated images (stage 2).

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{self, GeneratorObjective, LossBreakdown, LossWeights};
use crate::nets::{
    ClassifierConfig, ClassifierVariant, DomainRole, EncoderKind, ImageClassifier, ModelBundle, NetConfig, Part,
    ShapeSpec,
};
use crate::optim::{Adam, AdamConfig, Direction};
use crate::params::ParamId;
use crate::synthdomain::{mix, DatasetHandle, Label, Origin, Sample, UnlabeledSet};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Single source to single target.
    SS2ST,
    /// Single source to several targets pooled into one blended domain.
    SS2BT,
    /// Single source to several targets joined in a translation ring.
    SS2MT,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::SS2ST => "ss2st",
            Mode::SS2BT => "ss2bt",
            Mode::SS2MT => "ss2mt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub mode: Mode,
    pub source: u32,
    pub targets: Vec<u32>,
}

impl Topology {
    pub fn new(mode: Mode, source: u32, targets: Vec<u32>) -> Result<Self> {
        let t = Self { mode, source, targets };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::InvalidTopology("no target domains".into()));
        }
        if self.targets.contains(&self.source) {
            return Err(Error::InvalidTopology(format!(
                "source domain {} is also listed as a target",
                self.source
            )));
        }
        let unique: BTreeSet<_> = self.targets.iter().collect();
        if unique.len() != self.targets.len() {
            return Err(Error::InvalidTopology("duplicate target domains".into()));
        }
        if self.mode == Mode::SS2ST && self.targets.len() != 1 {
            return Err(Error::InvalidTopology(format!(
                "ss2st takes exactly one target, got {}",
                self.targets.len()
            )));
        }
        Ok(())
    }

    /// Number of target slots the bundle is built with (pooled targets count once).
    pub fn effective_targets(&self) -> usize {
        match self.mode {
            Mode::SS2MT => self.targets.len(),
            Mode::SS2ST | Mode::SS2BT => 1,
        }
    }

    pub fn plan(&self) -> TranslationPlan {
        match self.mode {
            Mode::SS2MT => TranslationPlan::Ring {
                targets: self.targets.len(),
            },
            Mode::SS2ST | Mode::SS2BT => TranslationPlan::Pair,
        }
    }

    /// Liveness flows along `[source, t_1, ..., t_N]` and back to the source.
    pub fn ring_order(&self) -> Vec<u32> {
        core::iter::once(self.source).chain(self.targets.iter().copied()).collect()
    }
}

/// How liveness features are swapped between domains inside one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TranslationPlan {
    /// Source and one target exchange liveness features directly.
    Pair,
    /// Domain `i` renders the liveness features of domain `i - 1`, the source
    /// renders those of the last target.
    Ring { targets: usize },
}

impl TranslationPlan {
    pub fn slots(self) -> usize {
        match self {
            TranslationPlan::Pair => 2,
            TranslationPlan::Ring { targets } => targets + 1,
        }
    }

    /// Slot whose liveness features slot `slot` renders.
    pub fn donor(self, slot: usize) -> usize {
        let n = self.slots();
        (slot + n - 1) % n
    }

    /// Slot whose translated image carries slot `slot`'s liveness features.
    pub fn receiver(self, slot: usize) -> usize {
        (slot + 1) % self.slots()
    }
}

pub fn role(slot: usize) -> DomainRole {
    if slot == 0 {
        DomainRole::Source
    } else {
        DomainRole::Target(slot)
    }
}

/// Where an image fed to an encoder came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ImageRef {
    Real(DomainRole),
    /// Output of the translation generator of this domain.
    Translated(DomainRole),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentRef {
    pub kind: EncoderKind,
    pub encoder: DomainRole,
    pub input: ImageRef,
}

/// One encoder or generator invocation recorded during a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TraceEvent {
    Encode(LatentRef),
    Generate {
        generator: DomainRole,
        liveness: LatentRef,
        content: LatentRef,
    },
}

#[derive(Debug, Clone, Copy)]
struct Img {
    v: Var,
    r: ImageRef,
}

#[derive(Debug, Clone, Copy)]
struct Lat {
    v: Var,
    r: LatentRef,
}

struct Exec<'g, 's, 't, T: Real> {
    g: &'g mut Graph<'s, T>,
    bundle: &'s ModelBundle<T>,
    trace: Option<&'t mut Vec<TraceEvent>>,
}

impl<T: Real> Exec<'_, '_, '_, T> {
    fn real(&mut self, slot: usize, x: &Tensor<T>) -> Img {
        Img {
            v: self.g.input(x.clone()),
            r: ImageRef::Real(role(slot)),
        }
    }

    fn encode(&mut self, kind: EncoderKind, slot: usize, x: Img) -> Result<Lat> {
        let d = self.bundle.domain(role(slot));
        let enc = match kind {
            EncoderKind::Liveness => &d.liveness_encoder,
            EncoderKind::Content => &d.content_encoder,
        };
        let r = LatentRef {
            kind,
            encoder: role(slot),
            input: x.r,
        };
        if let Some(t) = self.trace.as_deref_mut() {
            t.push(TraceEvent::Encode(r));
        }
        Ok(Lat {
            v: enc.forward(self.g, x.v)?,
            r,
        })
    }

    fn generate(&mut self, slot: usize, l: Lat, c: Lat) -> Result<Var> {
        if let Some(t) = self.trace.as_deref_mut() {
            t.push(TraceEvent::Generate {
                generator: role(slot),
                liveness: l.r,
                content: c.r,
            });
        }
        self.bundle.domain(role(slot)).generator.forward(self.g, l.v, c.v)
    }

    fn encode_all(&mut self, kind: EncoderKind, xs: &[Img]) -> Result<Vec<Lat>> {
        xs.iter().enumerate().map(|(s, &x)| self.encode(kind, s, x)).collect()
    }

    /// Cross-domain translations `x_hat`, one per slot.
    fn translate(&mut self, plan: TranslationPlan, zl: &[Lat], zc: &[Lat]) -> Result<Vec<Img>> {
        let translated = |slot, v| Img {
            v,
            r: ImageRef::Translated(role(slot)),
        };
        match plan {
            TranslationPlan::Pair => {
                let xs = self.generate(0, zl[1], zc[0])?;
                let xt = self.generate(1, zl[0], zc[1])?;
                Ok(vec![translated(0, xs), translated(1, xt)])
            }
            TranslationPlan::Ring { .. } => (0..plan.slots())
                .map(|slot| Ok(translated(slot, self.generate(slot, zl[plan.donor(slot)], zc[slot])?)))
                .collect(),
        }
    }

    /// Liveness and content encodings of the translated images.
    fn encode_translated(&mut self, plan: TranslationPlan, xhat: &[Img]) -> Result<(Vec<Lat>, Vec<Lat>)> {
        match plan {
            TranslationPlan::Pair => {
                let ls = self.encode(EncoderKind::Liveness, 0, xhat[0])?;
                let cs = self.encode(EncoderKind::Content, 0, xhat[0])?;
                let lt = self.encode(EncoderKind::Liveness, 1, xhat[1])?;
                let ct = self.encode(EncoderKind::Content, 1, xhat[1])?;
                Ok((vec![ls, lt], vec![cs, ct]))
            }
            TranslationPlan::Ring { .. } => {
                let mut el = Vec::new();
                let mut ec = Vec::new();
                for (slot, &x) in xhat.iter().enumerate() {
                    el.push(self.encode(EncoderKind::Liveness, slot, x)?);
                    ec.push(self.encode(EncoderKind::Content, slot, x)?);
                }
                Ok((el, ec))
            }
        }
    }

    /// Images translated back to their own domain.
    fn cycle(&mut self, plan: TranslationPlan, el: &[Lat], ec: &[Lat]) -> Result<Vec<Var>> {
        match plan {
            TranslationPlan::Pair => Ok(vec![self.generate(0, el[1], ec[0])?, self.generate(1, el[0], ec[1])?]),
            TranslationPlan::Ring { .. } => (0..plan.slots())
                .map(|slot| self.generate(slot, el[plan.receiver(slot)], ec[slot]))
                .collect(),
        }
    }

    /// Eq. 1 value averaged over the liveness discriminators: source latents
    /// are "real", target `i` latents are "fake" for discriminator `i`.
    fn liveness_value(&mut self, zl: &[Lat]) -> Result<Var> {
        let n = zl.len() - 1;
        let mut terms = Vec::new();
        for i in 1..=n {
            let d = &self.bundle.liveness_discriminators[i - 1];
            let ps = d.forward(self.g, zl[0].v)?;
            let pt = d.forward(self.g, zl[i].v)?;
            terms.push((self.g.mean_log(ps)?, 1.0 / n as f64));
            terms.push((self.g.mean_log_complement(pt)?, 1.0 / n as f64));
        }
        self.g.weighted_sum(&terms)
    }

    /// Image adversarial value summed over domains.
    fn image_value(&mut self, x: &[Img], xhat: &[Img]) -> Result<Var> {
        let mut terms = Vec::new();
        for slot in 0..x.len() {
            let d = &self.bundle.domain(role(slot)).image_discriminator;
            let pr = d.forward(self.g, x[slot].v)?;
            let pf = d.forward(self.g, xhat[slot].v)?;
            terms.push((self.g.mean_log(pr)?, 1.0));
            terms.push((self.g.mean_log_complement(pf)?, 1.0));
        }
        self.g.weighted_sum(&terms)
    }

    /// Generator-side image adversarial loss summed over domains.
    fn generator_adv(&mut self, xhat: &[Img], objective: GeneratorObjective) -> Result<Var> {
        let mut terms = Vec::new();
        for (slot, x) in xhat.iter().enumerate() {
            let p = self.bundle.domain(role(slot)).image_discriminator.forward(self.g, x.v)?;
            terms.push(match objective {
                GeneratorObjective::NonSaturating => (self.g.mean_log(p)?, -1.0),
                GeneratorObjective::Saturating => (self.g.mean_log_complement(p)?, 1.0),
            });
        }
        self.g.weighted_sum(&terms)
    }

    fn recon(&mut self, x: &[Img], zl: &[Lat], zc: &[Lat]) -> Result<Var> {
        let mut terms = Vec::new();
        for slot in 0..x.len() {
            let y = self.generate(slot, zl[slot], zc[slot])?;
            terms.push((self.g.l1(y, x[slot].v)?, 1.0));
        }
        self.g.weighted_sum(&terms)
    }

    fn cycle_loss(&mut self, cyc: &[Var], x: &[Img]) -> Result<Var> {
        let mut terms = Vec::new();
        for (c, xi) in cyc.iter().zip(x) {
            terms.push((self.g.l1(*c, xi.v)?, 1.0));
        }
        self.g.weighted_sum(&terms)
    }

    /// The liveness code recovered from each translated image should match the
    /// code of the real image that donated it.
    fn latent_loss(&mut self, plan: TranslationPlan, el: &[Lat], zl: &[Lat]) -> Result<Var> {
        let mut terms = Vec::new();
        for slot in 0..el.len() {
            terms.push((self.g.l1(el[slot].v, zl[plan.donor(slot)].v)?, 1.0));
        }
        self.g.weighted_sum(&terms)
    }

    fn cls(&mut self, zl_source: Lat, labels: &[Label]) -> Result<Var> {
        let logits = self.bundle.classifier_c.forward(self.g, zl_source.v)?;
        self.g.cross_entropy(logits, labels)
    }
}

/// One batch per domain slot. Only the source carries labels.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBatch<T> {
    pub source: Tensor<T>,
    pub source_labels: Vec<Label>,
    pub targets: Vec<Tensor<T>>,
}

impl<T: Real> StepBatch<T> {
    fn images(&self) -> Vec<&Tensor<T>> {
        core::iter::once(&self.source).chain(self.targets.iter()).collect()
    }

    pub fn cast<U: Real>(&self) -> StepBatch<U> {
        StepBatch {
            source: self.source.cast(),
            source_labels: self.source_labels.clone(),
            targets: self.targets.iter().map(Tensor::cast).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageOneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub weights: LossWeights,
    pub seed: u64,
    pub shape: ShapeSpec,
    pub net: NetConfig,
    pub generator_objective: GeneratorObjective,
}

impl Default for StageOneConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 2,
            learning_rate: 1e-3,
            adam_betas: (0.5, 0.999),
            weights: LossWeights::default(),
            seed: 0,
            shape: ShapeSpec {
                height: 64,
                width: 64,
                image_channels: 3,
                liveness_channels: 64,
                content_channels: 64,
                downsample: 8,
            },
            net: NetConfig::default(),
            generator_objective: GeneratorObjective::NonSaturating,
        }
    }
}

impl StageOneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::OutOfRange {
                name: "learning_rate",
                value: self.learning_rate,
            });
        }
        self.weights.validate()?;
        self.shape.validate()
    }

    fn adam(&self) -> Adam {
        Adam::new(AdamConfig::new(self.learning_rate, self.adam_betas))
    }
}

/// Optimiser state of every stage-1 update group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Optimizers {
    /// `C` and the source liveness encoder on the classification loss.
    pub classification: Adam,
    /// Liveness encoders (descent) and liveness discriminators (ascent).
    pub liveness_adversarial: Adam,
    /// Content encoders and generators on reconstruction plus generator-side adversarial loss.
    pub generation: Adam,
    /// Image discriminators (ascent).
    pub image_discriminator: Adam,
    /// All encoders and generators on cycle and latent reconstruction.
    pub cycle: Adam,
}

impl Stage1Optimizers {
    pub fn new(cfg: &StageOneConfig) -> Self {
        Self {
            classification: cfg.adam(),
            liveness_adversarial: cfg.adam(),
            generation: cfg.adam(),
            image_discriminator: cfg.adam(),
            cycle: cfg.adam(),
        }
    }

    pub fn groups(&self) -> [(&'static str, &Adam); 5] {
        [
            ("classification", &self.classification),
            ("liveness_adversarial", &self.liveness_adversarial),
            ("generation", &self.generation),
            ("image_discriminator", &self.image_discriminator),
            ("cycle", &self.cycle),
        ]
    }

    pub fn groups_mut(&mut self) -> [(&'static str, &mut Adam); 5] {
        [
            ("classification", &mut self.classification),
            ("liveness_adversarial", &mut self.liveness_adversarial),
            ("generation", &mut self.generation),
            ("image_discriminator", &mut self.image_discriminator),
            ("cycle", &mut self.cycle),
        ]
    }
}

/// Parameters excluded from every update.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FreezeSet(BTreeSet<ParamId>);

impl FreezeSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn parts<T: Real>(bundle: &ModelBundle<T>, parts: &[Part]) -> Self {
        Self(bundle.params_of(parts).into_iter().collect())
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.0.contains(&id)
    }

    fn filter(&self, ids: Vec<ParamId>) -> Vec<ParamId> {
        ids.into_iter().filter(|id| !self.0.contains(id)).collect()
    }
}

fn parts_for(n_slots: usize, f: impl Fn(DomainRole) -> Part) -> Vec<Part> {
    (0..n_slots).map(|s| f(role(s))).collect()
}

fn liveness_discriminator_parts(n_slots: usize) -> Vec<Part> {
    (1..n_slots).map(Part::LivenessDiscriminator).collect()
}

fn check_finite<T: Real>(g: &Graph<'_, T>, v: Var, name: &str) -> Result<f64> {
    let x = g.scalar(v).to_f64();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(name.into()))
    }
}

fn check_batch<T: Real>(bundle: &ModelBundle<T>, batch: &StepBatch<T>, plan: TranslationPlan) -> Result<()> {
    if batch.targets.len() + 1 != plan.slots() || bundle.domains.len() != plan.slots() {
        return Err(Error::InvalidTopology(format!(
            "plan expects {} domains, bundle has {}, batch has {}",
            plan.slots(),
            bundle.domains.len(),
            batch.targets.len() + 1
        )));
    }
    if batch.source_labels.len() != batch.source.shape().first().copied().unwrap_or(0) {
        return Err(Error::InvalidArgument("source labels do not match the source batch".into()));
    }
    Ok(())
}

/// Handles of every stage-1 objective component recorded on one tape.
#[derive(Debug, Clone, Copy)]
pub struct Stage1Vars {
    pub cls: Var,
    pub liveness_adv: Var,
    pub image_adv: Var,
    pub re: Var,
    pub cyc: Var,
    pub lat: Var,
    pub total: Var,
}

/// Record the full weighted stage-1 objective on a single tape (no updates).
/// The trainer splits the same terms across separate update groups; this
/// form exists for inspection and gradient verification.
pub fn record_stage1_objective<'s, T: Real>(
    g: &mut Graph<'s, T>,
    bundle: &'s ModelBundle<T>,
    batch: &StepBatch<T>,
    plan: TranslationPlan,
    weights: &LossWeights,
    input_grad: bool,
) -> Result<(Stage1Vars, Vec<Var>)> {
    check_batch(bundle, batch, plan)?;
    let mut ex = Exec {
        g,
        bundle,
        trace: None,
    };
    let x: Vec<Img> = batch
        .images()
        .into_iter()
        .enumerate()
        .map(|(s, t)| Img {
            v: if input_grad {
                ex.g.input_with_grad(t.clone())
            } else {
                ex.g.input(t.clone())
            },
            r: ImageRef::Real(role(s)),
        })
        .collect();
    let zl = ex.encode_all(EncoderKind::Liveness, &x)?;
    let zc = ex.encode_all(EncoderKind::Content, &x)?;
    let cls = ex.cls(zl[0], &batch.source_labels)?;
    let liveness_adv = ex.liveness_value(&zl)?;
    let re = ex.recon(&x, &zl, &zc)?;
    let xhat = ex.translate(plan, &zl, &zc)?;
    let image_adv = ex.image_value(&x, &xhat)?;
    let (el, ec) = ex.encode_translated(plan, &xhat)?;
    let cyc_imgs = ex.cycle(plan, &el, &ec)?;
    let cyc = ex.cycle_loss(&cyc_imgs, &x)?;
    let lat = ex.latent_loss(plan, &el, &zl)?;
    let w = weights;
    let total = ex.g.weighted_sum(&[
        (cls, 1.0),
        (liveness_adv, w.lambda1),
        (image_adv, w.lambda2),
        (re, w.lambda3),
        (cyc, w.lambda4),
        (lat, w.lambda5),
    ])?;
    Ok((
        Stage1Vars {
            cls,
            liveness_adv,
            image_adv,
            re,
            cyc,
            lat,
            total,
        },
        x.iter().map(|i| i.v).collect(),
    ))
}

fn inputs<T: Real>(ex: &mut Exec<'_, '_, '_, T>, batch: &StepBatch<T>) -> Vec<Img> {
    batch
        .images()
        .into_iter()
        .enumerate()
        .map(|(s, t)| ex.real(s, t))
        .collect()
}

/// Update `C` and the source liveness encoder on the classification loss.
fn classification_update<T: Real>(
    bundle: &mut ModelBundle<T>,
    opt: &mut Adam,
    batch: &StepBatch<T>,
    freeze: &FreezeSet,
    trace: Option<&mut Vec<TraceEvent>>,
) -> Result<f64> {
    let (value, grads) = {
        let mut g = Graph::new(&bundle.store);
        let mut ex = Exec {
            g: &mut g,
            bundle,
            trace,
        };
        let xs = ex.real(0, &batch.source);
        let zl = ex.encode(EncoderKind::Liveness, 0, xs)?;
        let cls = ex.cls(zl, &batch.source_labels)?;
        let value = check_finite(&g, cls, losses::CLS_L)?;
        (value, g.backward(cls)?)
    };
    let ids = freeze.filter(bundle.params_of(&[Part::ClassifierC, Part::LivenessEncoder(DomainRole::Source)]));
    opt.step(&mut bundle.store, &grads, &ids, Direction::Descend);
    Ok(value)
}

/// Result of the liveness-feature game for one batch.
struct LivenessPhase<T> {
    value: f64,
    /// Liveness codes of every slot before any encoder update.
    codes: Vec<Tensor<T>>,
    /// Translations from the pre-update codes, when requested.
    translations: Option<Vec<Tensor<T>>>,
}

#[allow(clippy::too_many_arguments)]
fn liveness_phase<T: Real>(
    bundle: &mut ModelBundle<T>,
    opt: &mut Adam,
    batch: &StepBatch<T>,
    plan: TranslationPlan,
    lambda1: f64,
    freeze: &FreezeSet,
    mut trace: Option<&mut Vec<TraceEvent>>,
    translate: bool,
) -> Result<LivenessPhase<T>> {
    check_batch(bundle, batch, plan)?;
    let n = plan.slots();
    let enc_all = bundle.params_of(&parts_for(n, Part::LivenessEncoder));
    // Discriminators ascend first, with the encoders fixed on this tape.
    let (value, codes, translations, grads) = {
        let mut g = Graph::new(&bundle.store);
        g.freeze(enc_all.iter().copied());
        let mut ex = Exec {
            g: &mut g,
            bundle,
            trace: trace.as_deref_mut(),
        };
        let x = inputs(&mut ex, batch);
        let zl = ex.encode_all(EncoderKind::Liveness, &x)?;
        let translations = if translate {
            let zc = ex.encode_all(EncoderKind::Content, &x)?;
            let xhat = ex.translate(plan, &zl, &zc)?;
            Some(xhat.iter().map(|i| ex.g.value(i.v).clone()).collect::<Vec<_>>())
        } else {
            None
        };
        let v = ex.liveness_value(&zl)?;
        let scaled = ex.g.weighted_sum(&[(v, lambda1)])?;
        let value = check_finite(&g, v, losses::D_L)?;
        let codes = zl.iter().map(|z| g.value(z.v).clone()).collect();
        (value, codes, translations, g.backward(scaled)?)
    };
    let disc = freeze.filter(bundle.params_of(&liveness_discriminator_parts(n)));
    opt.step(&mut bundle.store, &grads, &disc, Direction::Ascend);
    drop(grads);
    // Encoders then descend against the updated discriminators.
    let grads = {
        let mut g = Graph::new(&bundle.store);
        g.freeze(bundle.params_of(&liveness_discriminator_parts(n)));
        let mut ex = Exec {
            g: &mut g,
            bundle,
            trace,
        };
        let x = inputs(&mut ex, batch);
        let zl = ex.encode_all(EncoderKind::Liveness, &x)?;
        let v = ex.liveness_value(&zl)?;
        let scaled = ex.g.weighted_sum(&[(v, lambda1)])?;
        check_finite(&g, v, losses::D_L)?;
        g.backward(scaled)?
    };
    let enc = freeze.filter(enc_all);
    opt.step(&mut bundle.store, &grads, &enc, Direction::Descend);
    Ok(LivenessPhase {
        value,
        codes,
        translations,
    })
}

/// One round of the liveness-feature game: the liveness discriminators ascend
/// the value, then the liveness encoders descend it against the updated
/// discriminators. Returns the value before the round and the liveness codes
/// it started from.
pub fn liveness_adversarial_update<T: Real>(
    bundle: &mut ModelBundle<T>,
    opt: &mut Adam,
    batch: &StepBatch<T>,
    plan: TranslationPlan,
    lambda1: f64,
    freeze: &FreezeSet,
    trace: Option<&mut Vec<TraceEvent>>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let p = liveness_phase(bundle, opt, batch, plan, lambda1, freeze, trace, false)?;
    Ok((p.value, p.codes))
}

/// Evaluate the liveness adversarial value on a batch without updating anything.
pub fn liveness_value<T: Real>(bundle: &ModelBundle<T>, batch: &StepBatch<T>, plan: TranslationPlan) -> Result<f64> {
    check_batch(bundle, batch, plan)?;
    let mut g = Graph::new(&bundle.store);
    let mut ex = Exec {
        g: &mut g,
        bundle,
        trace: None,
    };
    let x = inputs(&mut ex, batch);
    let zl = ex.encode_all(EncoderKind::Liveness, &x)?;
    let v = ex.liveness_value(&zl)?;
    check_finite(&g, v, losses::D_L)
}

/// Run one stage-1 iteration on `batch`:
/// 1. `C` and the source liveness encoder descend the classification loss;
/// 2. liveness discriminators ascend the latent adversarial value, then the
///    liveness encoders descend it;
/// 3. image discriminators ascend the image adversarial value on the current
///    (detached) translations, then content encoders and generators descend
///    reconstruction plus the generator-side image adversarial loss;
/// 4. all encoders and generators descend cycle plus latent reconstruction.
#[allow(clippy::too_many_arguments)]
pub fn stage1_step<T: Real>(
    bundle: &mut ModelBundle<T>,
    opts: &mut Stage1Optimizers,
    batch: &StepBatch<T>,
    weights: &LossWeights,
    objective: GeneratorObjective,
    plan: TranslationPlan,
    freeze: &FreezeSet,
    mut trace: Option<&mut Vec<TraceEvent>>,
) -> Result<LossBreakdown> {
    check_batch(bundle, batch, plan)?;
    let n = plan.slots();
    let w = weights;
    let cls = classification_update(bundle, &mut opts.classification, batch, freeze, trace.as_deref_mut())?;
    let phase = liveness_phase(
        bundle,
        &mut opts.liveness_adversarial,
        batch,
        plan,
        w.lambda1,
        freeze,
        trace.as_deref_mut(),
        true,
    )?;
    let (d_l, codes) = (phase.value, phase.codes);
    let xhat_values = phase.translations.expect("translations requested");

    // Image discriminators ascend on the current translations.
    let image_disc_ids = bundle.params_of(&parts_for(n, Part::ImageDiscriminator));
    let (adv_d, grads) = {
        let mut g = Graph::new(&bundle.store);
        let mut ex = Exec {
            g: &mut g,
            bundle,
            trace: None,
        };
        let x = inputs(&mut ex, batch);
        let xhat: Vec<Img> = xhat_values
            .into_iter()
            .enumerate()
            .map(|(s, t)| Img {
                v: ex.g.input(t),
                r: ImageRef::Translated(role(s)),
            })
            .collect();
        let v = ex.image_value(&x, &xhat)?;
        let scaled = ex.g.weighted_sum(&[(v, w.lambda2)])?;
        let value = check_finite(&g, v, losses::ADV_D)?;
        (value, g.backward(scaled)?)
    };
    let disc_ids = freeze.filter(image_disc_ids.clone());
    opts.image_discriminator.step(&mut bundle.store, &grads, &disc_ids, Direction::Ascend);
    drop(grads);

    // Image generation against the updated discriminators, liveness codes fixed.
    let (re, grads) = {
        let mut g = Graph::new(&bundle.store);
        g.freeze(image_disc_ids.iter().copied());
        let mut ex = Exec {
            g: &mut g,
            bundle,
            trace: trace.as_deref_mut(),
        };
        let x = inputs(&mut ex, batch);
        let zl: Vec<Lat> = codes
            .iter()
            .enumerate()
            .map(|(s, z)| Lat {
                v: ex.g.input(z.clone()),
                r: LatentRef {
                    kind: EncoderKind::Liveness,
                    encoder: role(s),
                    input: ImageRef::Real(role(s)),
                },
            })
            .collect();
        let zc = ex.encode_all(EncoderKind::Content, &x)?;
        let re = ex.recon(&x, &zl, &zc)?;
        let xhat = ex.translate(plan, &zl, &zc)?;
        let gen_adv = ex.generator_adv(&xhat, objective)?;
        let loss = ex.g.weighted_sum(&[(re, w.lambda3), (gen_adv, w.lambda2)])?;
        let re_v = check_finite(&g, re, losses::RE)?;
        check_finite(&g, gen_adv, losses::ADV_D)?;
        (re_v, g.backward(loss)?)
    };
    let mut gen_parts = parts_for(n, Part::ContentEncoder);
    gen_parts.extend(parts_for(n, Part::Generator));
    let gen_ids = freeze.filter(bundle.params_of(&gen_parts));
    opts.generation.step(&mut bundle.store, &grads, &gen_ids, Direction::Descend);
    drop(grads);

    // Cycle consistency and latent reconstruction.
    let (cyc, lat, grads) = {
        let mut g = Graph::new(&bundle.store);
        let mut ex = Exec {
            g: &mut g,
            bundle,
            trace: trace.as_deref_mut(),
        };
        let x = inputs(&mut ex, batch);
        let zl = ex.encode_all(EncoderKind::Liveness, &x)?;
        let zc = ex.encode_all(EncoderKind::Content, &x)?;
        let xhat = ex.translate(plan, &zl, &zc)?;
        let (el, ec) = ex.encode_translated(plan, &xhat)?;
        let cyc_imgs = ex.cycle(plan, &el, &ec)?;
        let cyc = ex.cycle_loss(&cyc_imgs, &x)?;
        let lat = ex.latent_loss(plan, &el, &zl)?;
        let loss = ex.g.weighted_sum(&[(cyc, w.lambda4), (lat, w.lambda5)])?;
        let cyc_v = check_finite(&g, cyc, losses::CYC)?;
        let lat_v = check_finite(&g, lat, losses::LAT)?;
        (cyc_v, lat_v, g.backward(loss)?)
    };
    let mut all_parts = gen_parts;
    all_parts.extend(parts_for(n, Part::LivenessEncoder));
    let ids = freeze.filter(bundle.params_of(&all_parts));
    opts.cycle.step(&mut bundle.store, &grads, &ids, Direction::Descend);

    let mut b = LossBreakdown::new()
        .with(losses::CLS_L, cls)
        .with(losses::D_L, d_l)
        .with(losses::ADV_D, adv_d)
        .with(losses::RE, re)
        .with(losses::CYC, cyc)
        .with(losses::LAT, lat);
    b.total = losses::stage1_total(&b, w)?;
    if let Some(name) = b.first_non_finite() {
        return Err(Error::NonFinite(name.into()));
    }
    Ok(b)
}

/// Everything needed to continue stage-1 training after `epochs_done` epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1State {
    pub bundle: ModelBundle<f32>,
    pub optimizers: Stage1Optimizers,
    pub epochs_done: usize,
    pub history: Vec<LossBreakdown>,
}

impl Stage1State {
    pub fn fresh(cfg: &StageOneConfig, topo: &Topology) -> Result<Self> {
        Ok(Self {
            bundle: ModelBundle::new(cfg.shape, cfg.net, topo.effective_targets(), cfg.seed)?,
            optimizers: Stage1Optimizers::new(cfg),
            epochs_done: 0,
            history: Vec::new(),
        })
    }
}

fn epoch_rng(seed: u64, stream: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed, stream), epoch as u64))
}

/// Targets as seen by the bundle: pooled into one set for SS2BT.
pub fn target_slots(targets: &[UnlabeledSet], topo: &Topology) -> Result<Vec<UnlabeledSet>> {
    if targets.len() != topo.targets.len() {
        return Err(Error::InvalidTopology(format!(
            "topology lists {} targets but {} datasets were given",
            topo.targets.len(),
            targets.len()
        )));
    }
    if targets.iter().any(|t| t.is_empty()) {
        return Err(Error::EmptyBatch("target dataset"));
    }
    Ok(match topo.mode {
        Mode::SS2BT => vec![UnlabeledSet::pool(targets)],
        _ => targets.to_vec(),
    })
}

/// Number of steps per stage-1 epoch.
pub fn steps_per_epoch(n_source: usize, batch_size: usize) -> usize {
    n_source.div_ceil(batch_size)
}

/// Train stage 1, optionally resuming from `state`. `on_epoch` runs after
/// every completed epoch (checkpointing, logging).
pub fn train_stage1(
    source: &DatasetHandle,
    targets: &[UnlabeledSet],
    cfg: &StageOneConfig,
    topo: &Topology,
    state: Option<Stage1State>,
    on_epoch: &mut dyn FnMut(&Stage1State) -> Result<()>,
) -> Result<Stage1State> {
    cfg.validate()?;
    topo.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyBatch("source dataset"));
    }
    let slots = target_slots(targets, topo)?;
    let plan = topo.plan();
    let mut state = match state {
        Some(s) => s,
        None => Stage1State::fresh(cfg, topo)?,
    };
    let freeze = FreezeSet::none();
    let bs = cfg.batch_size;
    for epoch in state.epochs_done..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, 0, epoch);
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.shuffle(&mut rng);
        let target_orders: Vec<Vec<usize>> = slots
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut o: Vec<usize> = (0..t.len()).collect();
                o.shuffle(&mut epoch_rng(cfg.seed, i as u64 + 1, epoch));
                o
            })
            .collect();
        for (k, chunk) in order.chunks(bs).enumerate() {
            let batch = StepBatch {
                source: source.batch(chunk)?,
                source_labels: chunk.iter().map(|&i| source.samples()[i].label).collect(),
                targets: slots
                    .iter()
                    .zip(&target_orders)
                    .map(|(t, o)| {
                        let idx: Vec<usize> = (0..chunk.len()).map(|j| o[(k * bs + j) % o.len()]).collect();
                        t.batch(&idx)
                    })
                    .collect::<Result<_>>()?,
            };
            let b = stage1_step(
                &mut state.bundle,
                &mut state.optimizers,
                &batch,
                &cfg.weights,
                cfg.generator_objective,
                plan,
                &freeze,
                None,
            )?;
            state.history.push(b);
        }
        state.epochs_done = epoch + 1;
        on_epoch(&state)?;
    }
    Ok(state)
}

/// Origin of one pseudo-labeled image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_index: usize,
    /// 1-based target slot of the generator that rendered the image.
    pub target_slot: usize,
    /// Domain id of the target image that donated the content code.
    pub target_domain: u32,
}

/// Translated images labeled with the label of their liveness donor.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeledSet {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<Label>,
    pub provenance: Vec<Provenance>,
}

impl PseudoLabeledSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn to_dataset(&self) -> DatasetHandle {
        let samples = self
            .images
            .iter()
            .zip(&self.labels)
            .zip(&self.provenance)
            .map(|((img, &label), p)| Sample {
                image: img.clone(),
                label,
                domain_id: p.target_domain,
                sample_seed: p.source_index as u64,
            })
            .collect();
        DatasetHandle::new(samples, Origin::Synthetic)
    }
}

/// Render every source sample into every target style with the frozen bundle:
/// `x*_i = G_i(E^L_s(x_s), E^C_i(x_i))`. Source sample `j` is paired with
/// target images `j * multiplicity + m` (cyclically) for `m < multiplicity`.
/// Output is ordered by target slot, then source index, then `m`.
pub fn synthesize_pseudo(
    bundle: &ModelBundle<f32>,
    source: &DatasetHandle,
    targets: &[UnlabeledSet],
    multiplicity: usize,
    batch_size: usize,
) -> Result<PseudoLabeledSet> {
    if source.is_empty() {
        return Err(Error::EmptyBatch("synthesize_pseudo source"));
    }
    if targets.len() != bundle.n_targets() {
        return Err(Error::InvalidTopology(format!(
            "bundle has {} target slots, {} target sets given",
            bundle.n_targets(),
            targets.len()
        )));
    }
    if multiplicity == 0 || batch_size == 0 {
        return Err(Error::InvalidArgument("multiplicity and batch_size must be positive".into()));
    }
    let mut out = PseudoLabeledSet {
        images: Vec::new(),
        labels: Vec::new(),
        provenance: Vec::new(),
    };
    for (i, target) in targets.iter().enumerate() {
        if target.is_empty() {
            return Err(Error::EmptyBatch("synthesize_pseudo target"));
        }
        let slot = i + 1;
        let pairs: Vec<(usize, usize)> = (0..source.len())
            .flat_map(|j| (0..multiplicity).map(move |m| (j, (j * multiplicity + m) % target.len())))
            .collect();
        for chunk in pairs.chunks(batch_size) {
            let src: Vec<usize> = chunk.iter().map(|p| p.0).collect();
            let tgt: Vec<usize> = chunk.iter().map(|p| p.1).collect();
            let xs = source.batch(&src)?;
            let xt = target.batch(&tgt)?;
            let zl = bundle.encode(&xs, DomainRole::Source, EncoderKind::Liveness)?;
            let zc = bundle.encode(&xt, DomainRole::Target(slot), EncoderKind::Content)?;
            let imgs = bundle.generate(&zl, &zc, DomainRole::Target(slot))?;
            for (k, &(j, t)) in chunk.iter().enumerate() {
                out.images.push(imgs.slice_batch(k, 1)?.reshape(&imgs.shape()[1..])?);
                out.labels.push(source.samples()[j].label);
                out.provenance.push(Provenance {
                    source_index: j,
                    target_slot: slot,
                    target_domain: target.domain_ids()[t],
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageTwoConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub classifier_variant: ClassifierVariant,
    pub weights: LossWeights,
    pub seed: u64,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub triplet_margin: f64,
    pub classifier: ClassifierConfig,
}

impl Default for StageTwoConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            classifier_variant: ClassifierVariant::R,
            weights: LossWeights::default(),
            seed: 0,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            triplet_margin: 0.3,
            classifier: ClassifierConfig::default(),
        }
    }
}

impl StageTwoConfig {
    /// Weights actually used: the plain binary classifier ignores the cue and
    /// triplet terms.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.classifier_variant == ClassifierVariant::R {
            w.alpha2 = 0.0;
            w.alpha3 = 0.0;
        }
        w
    }
}

/// Train the stage-2 classifier on labeled images (pseudo-labeled
/// translations, or raw source images for the source-only baseline).
pub fn train_stage2(
    data: &DatasetHandle,
    cfg: &StageTwoConfig,
    height: usize,
    width: usize,
) -> Result<(ImageClassifier<f32>, Vec<LossBreakdown>)> {
    if data.live_count() == 0 || data.spoof_count() == 0 {
        return Err(Error::SingleClass("stage-2 training set"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
    }
    cfg.weights.validate()?;
    let mut model = ImageClassifier::<f32>::new(cfg.classifier_variant, height, width, cfg.classifier.clone(), cfg.seed)?;
    let mut opt = Adam::new(AdamConfig::new(cfg.learning_rate, cfg.adam_betas));
    let w = cfg.effective_weights();
    let ids = model.trainable_params();
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, 0x5eed, epoch));
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.batch(chunk)?;
            let labels: Vec<Label> = chunk.iter().map(|&i| data.samples()[i].label).collect();
            let (b, grads, buffers) = {
                let mut g = Graph::new(&model.store);
                let xv = g.input(x);
                let out = model.forward(&mut g, xv)?;
                let la = g.cross_entropy(out.logits, &labels)?;
                let mut terms = vec![(la, w.alpha1)];
                let mut b = LossBreakdown::new().with(losses::L_A, check_finite(&g, la, losses::L_A)?);
                match (out.cue_map, out.embedding) {
                    (Some(cue), Some(emb)) => {
                        let lr = g.cue_l1(cue, &labels)?;
                        let lt = g.triplet(emb, &labels, cfg.triplet_margin)?;
                        b.set(losses::L_R, check_finite(&g, lr, losses::L_R)?);
                        b.set(losses::L_TRI, check_finite(&g, lt, losses::L_TRI)?);
                        terms.push((lr, w.alpha2));
                        terms.push((lt, w.alpha3));
                    }
                    _ => {
                        b.set(losses::L_R, 0.0);
                        b.set(losses::L_TRI, 0.0);
                    }
                }
                let total = g.weighted_sum(&terms)?;
                b.total = losses::stage2_total(
                    b.get(losses::L_A).unwrap_or(0.0),
                    b.get(losses::L_R).unwrap_or(0.0),
                    b.get(losses::L_TRI).unwrap_or(0.0),
                    &w,
                );
                let grads = g.backward(total)?;
                (b, grads, g.take_buffer_updates())
            };
            opt.step(&mut model.store, &grads, &ids, Direction::Descend);
            for (id, t) in buffers {
                *model.store.get_mut(id) = t;
            }
            history.push(b);
        }
    }
    Ok((model, history))
}

/// Live-class probabilities of every sample, in dataset order.
pub fn score_dataset(model: &ImageClassifier<f32>, data: &DatasetHandle, batch_size: usize) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        scores.extend(model.live_scores(&data.batch(chunk)?)?);
    }
    Ok(scores)
}

/// Name of a loss history column set, for CSV headers.
pub fn stage1_columns() -> Vec<String> {
    losses::STAGE1_COMPONENTS.iter().map(|s| String::from(*s)).collect()
}
