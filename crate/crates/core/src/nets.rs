//! Encoders, generators, discriminators and classifiers.
//!
//! Images are in `[0, 1]` at every public interface. Networks that consume
//! images rescale them to `[-1, 1]` internally and generators map their `tanh`
//! output back to `[0, 1]`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{fan_in_uniform, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub height: usize,
    pub width: usize,
    pub image_channels: usize,
    pub liveness_channels: usize,
    pub content_channels: usize,
    /// Latent maps are `height / downsample` by `width / downsample`.
    pub downsample: usize,
}

impl ShapeSpec {
    pub fn new(size: usize, latent_channels: usize, downsample: usize) -> Result<Self> {
        let s = Self {
            height: size,
            width: size,
            image_channels: 3,
            liveness_channels: latent_channels,
            content_channels: latent_channels,
            downsample,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels != 3 {
            return Err(Error::InvalidShape(format!(
                "image_channels must be 3, got {}",
                self.image_channels
            )));
        }
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            return Err(Error::InvalidShape(format!(
                "downsample factor must be a power of two >= 2, got {}",
                self.downsample
            )));
        }
        if self.height % self.downsample != 0 || self.width % self.downsample != 0 || self.height == 0 {
            return Err(Error::InvalidShape(format!(
                "{}x{} is not divisible by downsample factor {}",
                self.height, self.width, self.downsample
            )));
        }
        if self.liveness_channels == 0 || self.content_channels == 0 {
            return Err(Error::InvalidShape("latent channel counts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn latent_height(&self) -> usize {
        self.height / self.downsample
    }

    pub fn latent_width(&self) -> usize {
        self.width / self.downsample
    }

    /// Number of stride-2 stages between image and latent resolution.
    pub fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    pub fn image_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.image_channels, self.height, self.width]
    }

    pub fn latent_shape(&self, batch: usize, kind: EncoderKind) -> [usize; 4] {
        let c = match kind {
            EncoderKind::Liveness => self.liveness_channels,
            EncoderKind::Content => self.content_channels,
        };
        [batch, c, self.latent_height(), self.latent_width()]
    }
}

/// Layer widths shared by every network of a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Width of the first encoder block; doubles per stage.
    pub encoder_width: usize,
    /// Width of the generator trunk; halves per upsampling stage.
    pub generator_width: usize,
    pub residual_blocks: usize,
    pub disc_width: usize,
    /// Stride-2 blocks of the image discriminators.
    pub disc_blocks: usize,
    pub latent_disc_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            encoder_width: 16,
            generator_width: 64,
            residual_blocks: 2,
            disc_width: 16,
            disc_blocks: 4,
            latent_disc_width: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncoderKind {
    Liveness,
    Content,
}

/// Position of a domain in the bundle: the source or target `i` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DomainRole {
    Source,
    Target(usize),
}

impl DomainRole {
    pub fn name(self) -> String {
        match self {
            DomainRole::Source => "source".into(),
            DomainRole::Target(i) => format!("target{}", i),
        }
    }

    /// 0 for the source, `i` for target `i`.
    pub fn slot(self) -> usize {
        match self {
            DomainRole::Source => 0,
            DomainRole::Target(i) => i,
        }
    }
}

struct Builder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    ids: Vec<ParamId>,
}

impl<'a, T: Real> Builder<'a, T> {
    fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ids: Vec::new(),
        }
    }

    fn add(&mut self, name: String, t: Tensor<T>, trainable: bool) -> ParamId {
        let id = self.store.add(name, t, trainable);
        self.ids.push(id);
        id
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Conv {
        let fan_in = cin * k * k;
        let w = fan_in_uniform(&mut self.rng, &[cout, cin, k, k], fan_in);
        let w = self.add(format!("{}.weight", name), w, true);
        let b = bias.then(|| {
            let t = fan_in_uniform(&mut self.rng, &[cout], fan_in);
            self.add(format!("{}.bias", name), t, true)
        });
        Conv { w, b }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{}.gamma", name), Tensor::full(&[c], T::ONE), true),
            beta: self.add(format!("{}.beta", name), Tensor::zeros(&[c]), true),
        }
    }

    fn batch_norm(&mut self, name: &str, c: usize) -> BatchNorm {
        let affine = self.norm(name, c);
        BatchNorm {
            affine,
            running_mean: self.add(format!("{}.running_mean", name), Tensor::zeros(&[c]), false),
            running_var: self.add(format!("{}.running_var", name), Tensor::full(&[c], T::ONE), false),
        }
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) -> Linear {
        let w = fan_in_uniform(&mut self.rng, &[fout, fin], fin);
        let b = fan_in_uniform(&mut self.rng, &[fout], fin);
        Linear {
            w: self.add(format!("{}.weight", name), w, true),
            b: self.add(format!("{}.bias", name), b, true),
        }
    }

    fn finish(self) -> Vec<ParamId> {
        self.ids
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
}

impl Conv {
    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.conv2d(x, w, b, stride, pad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn instance<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.instance_norm(x, gm, bt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BatchNorm {
    affine: Norm,
    running_mean: ParamId,
    running_var: ParamId,
}

pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gm = g.param(self.affine.gamma);
        let bt = g.param(self.affine.beta);
        g.batch_norm(x, gm, bt, self.running_mean, self.running_var, BN_MOMENTUM)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, b)
    }
}

fn to_signed<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Var {
    g.affine(x, 2.0, -1.0)
}

fn check_image<T: Real>(g: &Graph<'_, T>, x: Var, shape: &ShapeSpec, context: &'static str) -> Result<usize> {
    let s = g.value(x).shape();
    let b = s.first().copied().unwrap_or(0);
    if s.len() != 4 || s[1..] != shape.image_shape(b)[1..] || b == 0 {
        return Err(shape_mismatch(context, &shape.image_shape(b.max(1)), s));
    }
    Ok(b)
}

/// Strided conv stack from image to latent map (`E^L_d` or `E^C_d`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    kind: EncoderKind,
    shape: ShapeSpec,
    blocks: Vec<(Conv, Option<Norm>)>,
}

impl Encoder {
    fn build<T: Real>(b: &mut Builder<'_, T>, prefix: &str, kind: EncoderKind, shape: &ShapeSpec, cfg: &NetConfig) -> Self {
        let out = shape.latent_shape(1, kind)[1];
        let stages = shape.stages();
        let mut cin = shape.image_channels;
        let blocks = (0..stages)
            .map(|i| {
                let last = i + 1 == stages;
                let cout = if last { out } else { cfg.encoder_width << i };
                let conv = b.conv(&format!("{}.conv{}", prefix, i), cin, cout, 4, last);
                let norm = (!last).then(|| b.norm(&format!("{}.norm{}", prefix, i), cout));
                cin = cout;
                (conv, norm)
            })
            .collect();
        Self {
            kind,
            shape: *shape,
            blocks,
        }
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        check_image(g, x, &self.shape, "encoder input")?;
        let mut h = to_signed(g, x);
        for (conv, norm) in &self.blocks {
            h = conv.forward(g, h, 2, 1)?;
            if let Some(n) = norm {
                h = n.instance(g, h)?;
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok(h)
    }
}

/// Decoder from concatenated `(z^L, z^C)` back to an image (`G_d`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    shape: ShapeSpec,
    stem: (Conv, Norm),
    residual: Vec<[(Conv, Norm); 2]>,
    up: Vec<(Conv, Norm)>,
    out: Conv,
}

impl Generator {
    fn build<T: Real>(b: &mut Builder<'_, T>, prefix: &str, shape: &ShapeSpec, cfg: &NetConfig) -> Self {
        let cin = shape.liveness_channels + shape.content_channels;
        let w = cfg.generator_width;
        let stem = (
            b.conv(&format!("{}.stem", prefix), cin, w, 3, false),
            b.norm(&format!("{}.stem_norm", prefix), w),
        );
        let residual = (0..cfg.residual_blocks)
            .map(|i| {
                [0, 1].map(|j| {
                    (
                        b.conv(&format!("{}.res{}.conv{}", prefix, i, j), w, w, 3, false),
                        b.norm(&format!("{}.res{}.norm{}", prefix, i, j), w),
                    )
                })
            })
            .collect();
        let mut width = w;
        let up = (0..shape.stages())
            .map(|i| {
                let next = (width / 2).max(8);
                let layer = (
                    b.conv(&format!("{}.up{}", prefix, i), width, next, 3, false),
                    b.norm(&format!("{}.up{}_norm", prefix, i), next),
                );
                width = next;
                layer
            })
            .collect();
        let out = b.conv(&format!("{}.out", prefix), width, shape.image_channels, 3, true);
        Self {
            shape: *shape,
            stem,
            residual,
            up,
            out,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, z_l: Var, z_c: Var) -> Result<Var> {
        let sl = g.value(z_l).shape().to_vec();
        let sc = g.value(z_c).shape().to_vec();
        let b = sl.first().copied().unwrap_or(0);
        let want_l = self.shape.latent_shape(b, EncoderKind::Liveness);
        let want_c = self.shape.latent_shape(b, EncoderKind::Content);
        if sl != want_l {
            return Err(shape_mismatch("generator liveness input", &want_l, &sl));
        }
        if sc != want_c {
            return Err(shape_mismatch("generator content input", &want_c, &sc));
        }
        let z = g.concat_channels(z_l, z_c)?;
        let mut h = self.stem.0.forward(g, z, 1, 1)?;
        h = self.stem.1.instance(g, h)?;
        h = g.relu(h);
        for block in &self.residual {
            let mut r = block[0].0.forward(g, h, 1, 1)?;
            r = block[0].1.instance(g, r)?;
            r = g.relu(r);
            r = block[1].0.forward(g, r, 1, 1)?;
            r = block[1].1.instance(g, r)?;
            h = g.add(h, r)?;
        }
        for (conv, norm) in &self.up {
            h = g.upsample_nearest(h, 2)?;
            h = conv.forward(g, h, 1, 1)?;
            h = norm.instance(g, h)?;
            h = g.relu(h);
        }
        h = self.out.forward(g, h, 1, 1)?;
        h = g.tanh(h);
        Ok(g.affine(h, 0.5, 0.5))
    }
}

/// Patch-style image discriminator reduced to one probability per image (`D_d`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDiscriminator {
    shape: ShapeSpec,
    blocks: Vec<(Conv, Option<Norm>)>,
    out: Conv,
}

impl ImageDiscriminator {
    fn build<T: Real>(b: &mut Builder<'_, T>, prefix: &str, shape: &ShapeSpec, cfg: &NetConfig) -> Self {
        let mut cin = shape.image_channels;
        let blocks = (0..cfg.disc_blocks)
            .map(|i| {
                let cout = cfg.disc_width << i;
                let conv = b.conv(&format!("{}.conv{}", prefix, i), cin, cout, 4, i == 0);
                let norm = (i > 0).then(|| b.norm(&format!("{}.norm{}", prefix, i), cout));
                cin = cout;
                (conv, norm)
            })
            .collect();
        let out = b.conv(&format!("{}.out", prefix), cin, 1, 3, true);
        Self {
            shape: *shape,
            blocks,
            out,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let bsz = check_image(g, x, &self.shape, "image discriminator input")?;
        let mut h = to_signed(g, x);
        for (conv, norm) in &self.blocks {
            h = conv.forward(g, h, 2, 1)?;
            if let Some(n) = norm {
                h = n.instance(g, h)?;
            }
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        h = self.out.forward(g, h, 1, 1)?;
        h = g.global_avg_pool(h)?;
        h = g.reshape(h, &[bsz])?;
        Ok(g.sigmoid(h))
    }
}

/// Probability that a liveness latent came from the source domain (`D^L`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDiscriminator {
    shape: ShapeSpec,
    convs: [Conv; 3],
}

impl LatentDiscriminator {
    fn build<T: Real>(b: &mut Builder<'_, T>, prefix: &str, shape: &ShapeSpec, cfg: &NetConfig) -> Self {
        let w = cfg.latent_disc_width;
        Self {
            shape: *shape,
            convs: [
                b.conv(&format!("{}.conv0", prefix), shape.liveness_channels, w, 3, true),
                b.conv(&format!("{}.conv1", prefix), w, w, 3, true),
                b.conv(&format!("{}.out", prefix), w, 1, 3, true),
            ],
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        let s = g.value(z).shape().to_vec();
        let bsz = s.first().copied().unwrap_or(0);
        let want = self.shape.latent_shape(bsz, EncoderKind::Liveness);
        if s != want || bsz == 0 {
            return Err(shape_mismatch("liveness discriminator input", &want, &s));
        }
        let mut h = self.convs[0].forward(g, z, 1, 1)?;
        h = g.leaky_relu(h, LEAKY_SLOPE);
        h = self.convs[1].forward(g, h, 1, 1)?;
        h = g.leaky_relu(h, LEAKY_SLOPE);
        h = self.convs[2].forward(g, h, 1, 1)?;
        h = g.global_avg_pool(h)?;
        h = g.reshape(h, &[bsz])?;
        Ok(g.sigmoid(h))
    }
}

/// Live/spoof head on liveness latents (`C`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentClassifier {
    shape: ShapeSpec,
    head: Linear,
}

impl LatentClassifier {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        let s = g.value(z).shape().to_vec();
        let want = self.shape.latent_shape(s.first().copied().unwrap_or(0), EncoderKind::Liveness);
        if s != want {
            return Err(shape_mismatch("latent classifier input", &want, &s));
        }
        let p = g.global_avg_pool(z)?;
        self.head.forward(g, p)
    }
}

/// The four networks owned by one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainNets {
    pub role: DomainRole,
    pub liveness_encoder: Encoder,
    pub content_encoder: Encoder,
    pub generator: Generator,
    pub image_discriminator: ImageDiscriminator,
}

/// Named group of parameters saved and frozen as a unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub params: Vec<ParamId>,
}

/// Every stage-1 network, sharing one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<T> {
    pub shape: ShapeSpec,
    pub config: NetConfig,
    pub store: ParamStore<T>,
    /// Index 0 is the source, index `i` is target `i`.
    pub domains: Vec<DomainNets>,
    pub liveness_discriminators: Vec<LatentDiscriminator>,
    pub classifier_c: LatentClassifier,
    components: Vec<Component>,
}

/// Which network of a bundle a [`Component`] refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Part {
    LivenessEncoder(DomainRole),
    ContentEncoder(DomainRole),
    Generator(DomainRole),
    ImageDiscriminator(DomainRole),
    LivenessDiscriminator(usize),
    ClassifierC,
}

impl Part {
    pub fn name(self) -> String {
        match self {
            Part::LivenessEncoder(r) => format!("{}.liveness_encoder", r.name()),
            Part::ContentEncoder(r) => format!("{}.content_encoder", r.name()),
            Part::Generator(r) => format!("{}.generator", r.name()),
            Part::ImageDiscriminator(r) => format!("{}.image_discriminator", r.name()),
            Part::LivenessDiscriminator(i) => format!("liveness_discriminator{}", i),
            Part::ClassifierC => "classifier_c".into(),
        }
    }
}

impl<T: Real> ModelBundle<T> {
    /// Fresh bundle for one source and `n_targets` targets, initialised from `seed`.
    pub fn new(shape: ShapeSpec, config: NetConfig, n_targets: usize, seed: u64) -> Result<Self> {
        shape.validate()?;
        if n_targets == 0 {
            return Err(Error::InvalidTopology("at least one target domain is required".into()));
        }
        let min_side = shape.height.min(shape.width);
        if config.disc_blocks == 0 || (min_side >> config.disc_blocks) == 0 {
            return Err(Error::InvalidShape(format!(
                "{} discriminator blocks do not fit {}x{} images",
                config.disc_blocks, shape.height, shape.width
            )));
        }
        let mut store = ParamStore::new();
        let mut components = Vec::new();
        let mut part_seed = seed;
        let mut next_seed = || {
            part_seed = part_seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            part_seed
        };
        let mut domains = Vec::new();
        for slot in 0..=n_targets {
            let role = if slot == 0 {
                DomainRole::Source
            } else {
                DomainRole::Target(slot)
            };
            let make = |part: Part, store: &mut ParamStore<T>, comps: &mut Vec<Component>, seed: u64| {
                let name = part.name();
                let mut b = Builder::new(store, seed);
                let out = match part {
                    Part::LivenessEncoder(_) => BuiltPart::Encoder(Encoder::build(&mut b, &name, EncoderKind::Liveness, &shape, &config)),
                    Part::ContentEncoder(_) => BuiltPart::Encoder(Encoder::build(&mut b, &name, EncoderKind::Content, &shape, &config)),
                    Part::Generator(_) => BuiltPart::Generator(Generator::build(&mut b, &name, &shape, &config)),
                    Part::ImageDiscriminator(_) => BuiltPart::ImageDisc(ImageDiscriminator::build(&mut b, &name, &shape, &config)),
                    _ => unreachable!(),
                };
                comps.push(Component {
                    name,
                    params: b.finish(),
                });
                out
            };
            let le = make(Part::LivenessEncoder(role), &mut store, &mut components, next_seed());
            let ce = make(Part::ContentEncoder(role), &mut store, &mut components, next_seed());
            let gen = make(Part::Generator(role), &mut store, &mut components, next_seed());
            let disc = make(Part::ImageDiscriminator(role), &mut store, &mut components, next_seed());
            match (le, ce, gen, disc) {
                (BuiltPart::Encoder(le), BuiltPart::Encoder(ce), BuiltPart::Generator(gen), BuiltPart::ImageDisc(disc)) => {
                    domains.push(DomainNets {
                        role,
                        liveness_encoder: le,
                        content_encoder: ce,
                        generator: gen,
                        image_discriminator: disc,
                    })
                }
                _ => unreachable!(),
            }
        }
        let mut liveness_discriminators = Vec::new();
        for i in 1..=n_targets {
            let name = Part::LivenessDiscriminator(i).name();
            let mut b = Builder::new(&mut store, next_seed());
            let d = LatentDiscriminator::build(&mut b, &name, &shape, &config);
            components.push(Component {
                name,
                params: b.finish(),
            });
            liveness_discriminators.push(d);
        }
        let name = Part::ClassifierC.name();
        let mut b = Builder::new(&mut store, next_seed());
        let head = b.linear(&format!("{}.head", name), shape.liveness_channels, 2);
        components.push(Component {
            name,
            params: b.finish(),
        });
        Ok(Self {
            shape,
            config,
            store,
            domains,
            liveness_discriminators,
            classifier_c: LatentClassifier { shape, head },
            components,
        })
    }

    pub fn n_targets(&self) -> usize {
        self.domains.len() - 1
    }

    pub fn domain(&self, role: DomainRole) -> &DomainNets {
        &self.domains[role.slot()]
    }

    pub fn roles(&self) -> impl Iterator<Item = DomainRole> + '_ {
        self.domains.iter().map(|d| d.role)
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn component(&self, part: Part) -> &Component {
        let name = part.name();
        self.components
            .iter()
            .find(|c| c.name == name)
            .expect("every part of a bundle has a component")
    }

    pub fn params_of(&self, parts: &[Part]) -> Vec<ParamId> {
        parts
            .iter()
            .flat_map(|&p| self.component(p).params.iter().copied())
            .collect()
    }

    /// Same networks with parameters converted to another scalar type.
    pub fn cast<U: Real>(&self) -> ModelBundle<U> {
        ModelBundle {
            shape: self.shape,
            config: self.config,
            store: self.store.cast(),
            domains: self.domains.clone(),
            liveness_discriminators: self.liveness_discriminators.clone(),
            classifier_c: self.classifier_c.clone(),
            components: self.components.clone(),
        }
    }

    /// Parameter digest over the whole bundle.
    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }

    fn run<R>(&self, f: impl FnOnce(&mut Graph<'_, T>) -> Result<Var>, out: impl FnOnce(&Tensor<T>) -> R) -> Result<R> {
        let mut g = Graph::eval(&self.store);
        let v = f(&mut g)?;
        Ok(out(g.value(v)))
    }

    /// Latent map of `x` under the chosen encoder of `role`.
    pub fn encode(&self, x: &Tensor<T>, role: DomainRole, kind: EncoderKind) -> Result<Tensor<T>> {
        let d = self.domain(role);
        let enc = match kind {
            EncoderKind::Liveness => &d.liveness_encoder,
            EncoderKind::Content => &d.content_encoder,
        };
        self.run(
            |g| {
                let xv = g.input(x.clone());
                enc.forward(g, xv)
            },
            Tensor::clone,
        )
    }

    pub fn generate(&self, z_l: &Tensor<T>, z_c: &Tensor<T>, role: DomainRole) -> Result<Tensor<T>> {
        let gen = &self.domain(role).generator;
        self.run(
            |g| {
                let l = g.input(z_l.clone());
                let c = g.input(z_c.clone());
                gen.forward(g, l, c)
            },
            Tensor::clone,
        )
    }

    pub fn discriminate_image(&self, x: &Tensor<T>, role: DomainRole) -> Result<Vec<T>> {
        let d = &self.domain(role).image_discriminator;
        self.run(
            |g| {
                let xv = g.input(x.clone());
                d.forward(g, xv)
            },
            |t| t.data().to_vec(),
        )
    }

    /// `index` is 1-based, matching target numbering.
    pub fn discriminate_liveness(&self, z_l: &Tensor<T>, index: usize) -> Result<Vec<T>> {
        let d = self
            .liveness_discriminators
            .get(index.wrapping_sub(1))
            .ok_or_else(|| Error::InvalidArgument(format!("no liveness discriminator {}", index)))?;
        self.run(
            |g| {
                let zv = g.input(z_l.clone());
                d.forward(g, zv)
            },
            |t| t.data().to_vec(),
        )
    }

    /// Logits `[B, 2]` of `C` on liveness latents.
    pub fn classify_latent(&self, z_l: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(
            |g| {
                let zv = g.input(z_l.clone());
                self.classifier_c.forward(g, zv)
            },
            Tensor::clone,
        )
    }
}

enum BuiltPart {
    Encoder(Encoder),
    Generator(Generator),
    ImageDisc(ImageDiscriminator),
}

/// Stage-2 classifier flavour: plain binary (`R`) or with spoof-cue and
/// embedding heads (`L`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassifierVariant {
    R,
    L,
}

/// Layer widths of the stage-2 classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub stage_widths: Vec<usize>,
    pub cue_width: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            stage_widths: vec![32, 64, 128, 256],
            cue_width: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BasicBlock {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    stride: usize,
    shortcut: Option<(Conv, BatchNorm)>,
}

impl BasicBlock {
    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut h = self.conv1.forward(g, x, self.stride, 1)?;
        h = self.bn1.forward(g, h)?;
        h = g.relu(h);
        h = self.conv2.forward(g, h, 1, 1)?;
        h = self.bn2.forward(g, h)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(g, x, self.stride, 0)?;
                bn.forward(g, s)?
            }
            None => x,
        };
        let y = g.add(h, skip)?;
        Ok(g.relu(y))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CueHead {
    convs: [Conv; 3],
    bns: [BatchNorm; 2],
}

/// Graph handles produced by one classifier forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierVars {
    pub logits: Var,
    pub cue_map: Option<Var>,
    pub embedding: Option<Var>,
}

/// Materialised classifier outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierOutput<T> {
    pub logits: Tensor<T>,
    pub cue_map: Option<Tensor<T>>,
    pub embedding: Option<Tensor<T>>,
}

/// Stage-2 image classifier `M`: a small residual network with batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageClassifier<T> {
    pub variant: ClassifierVariant,
    pub height: usize,
    pub width: usize,
    pub config: ClassifierConfig,
    pub store: ParamStore<T>,
    stem: (Conv, BatchNorm),
    blocks: Vec<BasicBlock>,
    head: Linear,
    cue: Option<CueHead>,
}

impl<T: Real> ImageClassifier<T> {
    pub fn new(variant: ClassifierVariant, height: usize, width: usize, config: ClassifierConfig, seed: u64) -> Result<Self> {
        let stages = config.stage_widths.len();
        if stages == 0 || config.stage_widths.contains(&0) {
            return Err(Error::InvalidArgument("classifier needs nonzero stage widths".into()));
        }
        if height.min(width) >> stages == 0 {
            return Err(Error::InvalidShape(format!(
                "{} classifier stages do not fit {}x{} images",
                stages, height, width
            )));
        }
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, seed);
        let cue = (variant == ClassifierVariant::L).then(|| {
            let w = config.cue_width;
            CueHead {
                convs: [
                    b.conv("cue.conv0", 3, w, 3, false),
                    b.conv("cue.conv1", w, w, 3, false),
                    b.conv("cue.out", w, 1, 3, true),
                ],
                bns: [b.batch_norm("cue.bn0", w), b.batch_norm("cue.bn1", w)],
            }
        });
        let in_ch = if cue.is_some() { 4 } else { 3 };
        let w0 = config.stage_widths[0];
        let stem = (b.conv("stem.conv", in_ch, w0, 3, false), b.batch_norm("stem.bn", w0));
        let mut cin = w0;
        let blocks = config
            .stage_widths
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let stride = if i == 0 { 1 } else { 2 };
                let shortcut = (stride != 1 || cin != cout).then(|| {
                    (
                        b.conv(&format!("stage{}.shortcut", i), cin, cout, 1, false),
                        b.batch_norm(&format!("stage{}.shortcut_bn", i), cout),
                    )
                });
                let block = BasicBlock {
                    conv1: b.conv(&format!("stage{}.conv1", i), cin, cout, 3, false),
                    bn1: b.batch_norm(&format!("stage{}.bn1", i), cout),
                    conv2: b.conv(&format!("stage{}.conv2", i), cout, cout, 3, false),
                    bn2: b.batch_norm(&format!("stage{}.bn2", i), cout),
                    stride,
                    shortcut,
                };
                cin = cout;
                block
            })
            .collect();
        let head = b.linear("head", cin, 2);
        drop(b);
        Ok(Self {
            variant,
            height,
            width,
            config,
            store,
            stem,
            blocks,
            head,
            cue,
        })
    }

    /// Record the forward pass on a graph over `self.store`.
    pub fn forward(&self, g: &mut Graph<'_, T>, x: Var) -> Result<ClassifierVars> {
        let s = g.value(x).shape().to_vec();
        let bsz = s.first().copied().unwrap_or(0);
        if s != [bsz, 3, self.height, self.width] || bsz == 0 {
            return Err(shape_mismatch("classifier input", &[bsz.max(1), 3, self.height, self.width], &s));
        }
        let xs = to_signed(g, x);
        let (input, cue_map) = match &self.cue {
            Some(head) => {
                let mut h = head.convs[0].forward(g, xs, 1, 1)?;
                h = head.bns[0].forward(g, h)?;
                h = g.relu(h);
                h = head.convs[1].forward(g, h, 1, 1)?;
                h = head.bns[1].forward(g, h)?;
                h = g.relu(h);
                let cue = head.convs[2].forward(g, h, 1, 1)?;
                (g.concat_channels(xs, cue)?, Some(cue))
            }
            None => (xs, None),
        };
        let mut h = self.stem.0.forward(g, input, 2, 1)?;
        h = self.stem.1.forward(g, h)?;
        h = g.relu(h);
        for block in &self.blocks {
            h = block.forward(g, h)?;
        }
        let feat = g.global_avg_pool(h)?;
        let logits = self.head.forward(g, feat)?;
        Ok(ClassifierVars {
            logits,
            cue_map,
            embedding: self.cue.as_ref().map(|_| feat),
        })
    }

    /// Evaluation-mode forward pass (running batch-norm statistics).
    pub fn classify(&self, x: &Tensor<T>) -> Result<ClassifierOutput<T>> {
        let mut g = Graph::eval(&self.store);
        let xv = g.input(x.clone());
        let vars = self.forward(&mut g, xv)?;
        Ok(ClassifierOutput {
            logits: g.value(vars.logits).clone(),
            cue_map: vars.cue_map.map(|v| g.value(v).clone()),
            embedding: vars.embedding.map(|v| g.value(v).clone()),
        })
    }

    /// Probability of the live class for each image.
    pub fn live_scores(&self, x: &Tensor<T>) -> Result<Vec<f64>> {
        let out = self.classify(x)?;
        let p = crate::losses::softmax_rows(&out.logits);
        Ok(p.data().chunks(2).map(|r| r[1].to_f64()).collect())
    }

    pub fn trainable_params(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }
}
