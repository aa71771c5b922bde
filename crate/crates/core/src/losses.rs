//! Training objectives for both stages, with analytic gradients.
//!
//! Every batch reduction is an arithmetic mean and every log is natural.
//! Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs;
//! gradients pass straight through the clamp.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::synthdomain::Label;
use crate::tensor::{Real, Tensor};

pub const PROB_EPS: f64 = 1e-7;

pub const CLS_L: &str = "cls_L";
pub const D_L: &str = "D_L";
pub const ADV_D: &str = "adv_D";
pub const RE: &str = "re";
pub const CYC: &str = "cyc";
pub const LAT: &str = "lat";
pub const STAGE1_COMPONENTS: [&str; 6] = [CLS_L, D_L, ADV_D, RE, CYC, LAT];

pub const L_A: &str = "a";
pub const L_R: &str = "r";
pub const L_TRI: &str = "tri";
pub const STAGE2_COMPONENTS: [&str; 3] = [L_A, L_R, L_TRI];

/// Weights of the stage-1 (`lambda*`) and stage-2 (`alpha*`) objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 10.0,
            lambda4: 10.0,
            lambda5: 10.0,
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5", self.lambda5),
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::OutOfRange { name, value: v });
            }
        }
        Ok(())
    }
}

/// Named scalar loss components plus their weighted total.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub components: Vec<(String, f64)>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.set(name, value);
        self
    }

    pub fn set(&mut self, name: &str, value: f64) {
        match self.components.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = value,
            None => self.components.push((name.to_string(), value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }

    fn require(&self, name: &str) -> Result<f64> {
        self.get(name)
            .ok_or_else(|| Error::MissingComponent(name.to_string()))
    }

    /// First component (or the total) that is NaN or infinite.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.components
            .iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n.as_str())
            .or(if self.total.is_finite() {
                None
            } else {
                Some("total")
            })
    }
}

#[inline]
fn clamp_prob<T: Real>(p: T) -> T {
    let lo = T::from_f64(PROB_EPS);
    let hi = T::ONE - lo;
    if p < lo {
        lo
    } else if p > hi {
        hi
    } else {
        p
    }
}

/// `mean(ln p)` over clamped probabilities.
pub fn mean_log<T: Real>(p: &[T]) -> Result<T> {
    if p.is_empty() {
        return Err(Error::EmptyBatch("mean_log"));
    }
    let mut acc = T::ZERO;
    for &v in p {
        acc += clamp_prob(v).ln();
    }
    Ok(acc / T::from_f64(p.len() as f64))
}

/// Gradient of [`mean_log`]. The clamp passes gradients straight through,
/// so a saturated discriminator still receives a signal.
pub fn mean_log_grad<T: Real>(p: &[T]) -> Vec<T> {
    let n = T::from_f64(p.len() as f64);
    p.iter().map(|&v| T::ONE / (clamp_prob(v) * n)).collect()
}

/// `mean(ln(1 - p))` over clamped probabilities.
pub fn mean_log_complement<T: Real>(p: &[T]) -> Result<T> {
    if p.is_empty() {
        return Err(Error::EmptyBatch("mean_log_complement"));
    }
    let mut acc = T::ZERO;
    for &v in p {
        acc += (T::ONE - clamp_prob(v)).ln();
    }
    Ok(acc / T::from_f64(p.len() as f64))
}

/// Gradient of [`mean_log_complement`], straight through the clamp.
pub fn mean_log_complement_grad<T: Real>(p: &[T]) -> Vec<T> {
    let n = T::from_f64(p.len() as f64);
    p.iter().map(|&v| -T::ONE / ((T::ONE - clamp_prob(v)) * n)).collect()
}

/// Domain adversarial value on liveness features:
/// `mean(ln p_source) + mean(ln(1 - p_target))`.
///
/// The discriminator ascends this value, the liveness encoders descend it.
pub fn liveness_adversarial_loss<T: Real>(p_source: &[T], p_target: &[T]) -> Result<T> {
    if p_source.is_empty() || p_target.is_empty() {
        return Err(Error::EmptyBatch("liveness_adversarial_loss"));
    }
    Ok(mean_log(p_source)? + mean_log_complement(p_target)?)
}

/// Gradients of [`liveness_adversarial_loss`] with respect to both probability vectors.
pub fn liveness_adversarial_grad<T: Real>(p_source: &[T], p_target: &[T]) -> (Vec<T>, Vec<T>) {
    (mean_log_grad(p_source), mean_log_complement_grad(p_target))
}

/// Image adversarial value `mean(ln p_real) + mean(ln(1 - p_fake))`, ascended by
/// the image discriminators.
pub fn image_adversarial_loss<T: Real>(p_real: &[T], p_fake: &[T]) -> Result<T> {
    if p_real.is_empty() || p_fake.is_empty() {
        return Err(Error::EmptyBatch("image_adversarial_loss"));
    }
    Ok(mean_log(p_real)? + mean_log_complement(p_fake)?)
}

pub fn image_adversarial_grad<T: Real>(p_real: &[T], p_fake: &[T]) -> (Vec<T>, Vec<T>) {
    (mean_log_grad(p_real), mean_log_complement_grad(p_fake))
}

/// Objective the generator side minimises on fake-image probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorObjective {
    /// `-mean(ln p_fake)`.
    #[default]
    NonSaturating,
    /// `mean(ln(1 - p_fake))`, the literal minimax form.
    Saturating,
}

pub fn generator_adversarial_loss<T: Real>(p_fake: &[T], objective: GeneratorObjective) -> Result<T> {
    match objective {
        GeneratorObjective::NonSaturating => Ok(-mean_log(p_fake)?),
        GeneratorObjective::Saturating => mean_log_complement(p_fake),
    }
}

pub fn generator_adversarial_grad<T: Real>(p_fake: &[T], objective: GeneratorObjective) -> Vec<T> {
    match objective {
        GeneratorObjective::NonSaturating => mean_log_grad(p_fake).into_iter().map(|g| -g).collect(),
        GeneratorObjective::Saturating => mean_log_complement_grad(p_fake),
    }
}

fn rows2<T: Real>(t: &Tensor<T>, context: &'static str) -> Result<usize> {
    match *t.shape() {
        [b, 2] if b > 0 => Ok(b),
        [0, 2] => Err(Error::EmptyBatch(context)),
        _ => Err(shape_mismatch(context, &[t.shape().first().copied().unwrap_or(0), 2], t.shape())),
    }
}

fn log_softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let m = row.iter().copied().fold(row[0], T::max);
    let lse = row.iter().fold(T::ZERO, |acc, &v| acc + (v - m).exp()).ln() + m;
    row.iter().map(|&v| v - lse).collect()
}

/// Row-wise softmax of a `[B, K]` logit matrix.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let k = *logits.shape().last().unwrap_or(&1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let ls = log_softmax_row(row);
        for (o, l) in row.iter_mut().zip(ls) {
            *o = l.exp();
        }
    }
    out
}

fn check_one_hot<T: Real>(onehot: &Tensor<T>) -> Result<()> {
    for (row, r) in onehot.data().chunks(2).enumerate() {
        let ok = (r[0] == T::ONE && r[1] == T::ZERO) || (r[0] == T::ZERO && r[1] == T::ONE);
        if !ok {
            return Err(Error::NotOneHot { row });
        }
    }
    Ok(())
}

/// Cross-entropy `mean_b(-sum_k y_bk * log_softmax(logits)_bk)` for two classes.
pub fn source_cls_loss<T: Real>(logits: &Tensor<T>, labels_onehot: &Tensor<T>) -> Result<T> {
    let b = rows2(logits, "source_cls_loss")?;
    if labels_onehot.shape() != logits.shape() {
        return Err(shape_mismatch("source_cls_loss", logits.shape(), labels_onehot.shape()));
    }
    check_one_hot(labels_onehot)?;
    let mut acc = T::ZERO;
    for (lr, yr) in logits.data().chunks(2).zip(labels_onehot.data().chunks(2)) {
        let ls = log_softmax_row(lr);
        acc -= yr[0] * ls[0] + yr[1] * ls[1];
    }
    Ok(acc / T::from_f64(b as f64))
}

/// Gradient of [`source_cls_loss`] with respect to the logits.
pub fn source_cls_grad<T: Real>(logits: &Tensor<T>, labels_onehot: &Tensor<T>) -> Tensor<T> {
    let b = T::from_f64(logits.shape()[0] as f64);
    let mut g = softmax_rows(logits);
    for (gv, &y) in g.data_mut().iter_mut().zip(labels_onehot.data()) {
        *gv = (*gv - y) / b;
    }
    g
}

/// One-hot `[B, 2]` matrix with column 1 = live.
pub fn one_hot<T: Real>(labels: &[Label]) -> Tensor<T> {
    let mut data = vec![T::ZERO; labels.len() * 2];
    for (i, l) in labels.iter().enumerate() {
        data[i * 2 + l.index()] = T::ONE;
    }
    Tensor::new(&[labels.len(), 2], data).expect("one-hot shape")
}

/// `mean(|x_hat - x|)` over all elements.
pub fn l1_reconstruction<T: Real>(x_hat: &Tensor<T>, x: &Tensor<T>) -> Result<T> {
    if x_hat.shape() != x.shape() {
        return Err(shape_mismatch("l1_reconstruction", x.shape(), x_hat.shape()));
    }
    if x.numel() == 0 {
        return Err(Error::EmptyBatch("l1_reconstruction"));
    }
    let mut acc = T::ZERO;
    for (&a, &b) in x_hat.data().iter().zip(x.data()) {
        acc += (a - b).abs();
    }
    Ok(acc / T::from_f64(x.numel() as f64))
}

/// Gradient of [`l1_reconstruction`] with respect to `x_hat` (the gradient for
/// `x` is its negation). `sign(0)` is taken as 0.
pub fn l1_reconstruction_grad<T: Real>(x_hat: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let n = T::from_f64(x.numel() as f64);
    let data = x_hat
        .data()
        .iter()
        .zip(x.data())
        .map(|(&a, &b)| {
            if a > b {
                T::ONE / n
            } else if a < b {
                -T::ONE / n
            } else {
                T::ZERO
            }
        })
        .collect();
    Tensor::new(x_hat.shape(), data).expect("same shape")
}

/// Cycle consistency: L1 between each cycled image and its original.
pub fn cycle_loss<T: Real>(
    x_cyc_s: &Tensor<T>,
    x_s: &Tensor<T>,
    x_cyc_t: &Tensor<T>,
    x_t: &Tensor<T>,
) -> Result<T> {
    Ok(l1_reconstruction(x_cyc_s, x_s)? + l1_reconstruction(x_cyc_t, x_t)?)
}

/// Latent reconstruction: liveness features of each translated image against the
/// liveness features of the image that donated them. Pairing is
/// `E_s^L(x_hat_s) ~ E_t^L(x_t)` and `E_t^L(x_hat_t) ~ E_s^L(x_s)`.
pub fn latent_loss<T: Real>(
    zl_of_xhat_s: &Tensor<T>,
    zl_of_x_t: &Tensor<T>,
    zl_of_xhat_t: &Tensor<T>,
    zl_of_x_s: &Tensor<T>,
) -> Result<T> {
    Ok(l1_reconstruction(zl_of_xhat_s, zl_of_x_t)? + l1_reconstruction(zl_of_xhat_t, zl_of_x_s)?)
}

/// `cls_L + l1*D_L + l2*adv_D + l3*re + l4*cyc + l5*lat`. Pure arithmetic; the
/// trainer decides which party ascends or descends each term.
pub fn stage1_total(breakdown: &LossBreakdown, w: &LossWeights) -> Result<f64> {
    Ok(breakdown.require(CLS_L)?
        + w.lambda1 * breakdown.require(D_L)?
        + w.lambda2 * breakdown.require(ADV_D)?
        + w.lambda3 * breakdown.require(RE)?
        + w.lambda4 * breakdown.require(CYC)?
        + w.lambda5 * breakdown.require(LAT)?)
}

fn live_mask(labels: &[Label]) -> (Vec<bool>, usize) {
    let mask: Vec<bool> = labels.iter().map(|l| *l == Label::Live).collect();
    let n = mask.iter().filter(|m| **m).count();
    (mask, n)
}

/// Mean of `|cue|` over the cue maps of live samples only (0 without live samples).
pub fn spoof_cue_loss<T: Real>(cue_map: &Tensor<T>, labels: &[Label]) -> Result<T> {
    let b = cue_map.shape().first().copied().unwrap_or(0);
    if b != labels.len() {
        return Err(shape_mismatch("spoof_cue_loss", &[labels.len()], &[b]));
    }
    let (mask, n_live) = live_mask(labels);
    if n_live == 0 {
        return Ok(T::ZERO);
    }
    let per = cue_map.item_len();
    let mut acc = T::ZERO;
    for (i, item) in cue_map.data().chunks(per).enumerate() {
        if mask[i] {
            acc += item.iter().fold(T::ZERO, |a, &v| a + v.abs());
        }
    }
    Ok(acc / T::from_f64((n_live * per) as f64))
}

pub fn spoof_cue_grad<T: Real>(cue_map: &Tensor<T>, labels: &[Label]) -> Tensor<T> {
    let (mask, n_live) = live_mask(labels);
    let mut g = Tensor::zeros(cue_map.shape());
    if n_live == 0 {
        return g;
    }
    let per = cue_map.item_len();
    let denom = T::from_f64((n_live * per) as f64);
    for (i, (gi, ci)) in g
        .data_mut()
        .chunks_mut(per)
        .zip(cue_map.data().chunks(per))
        .enumerate()
    {
        if mask[i] {
            for (gv, &c) in gi.iter_mut().zip(ci) {
                *gv = if c > T::ZERO {
                    T::ONE / denom
                } else if c < T::ZERO {
                    -T::ONE / denom
                } else {
                    T::ZERO
                };
            }
        }
    }
    g
}

fn triplets(labels: &[Label]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for a in 0..labels.len() {
        for p in 0..labels.len() {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for (n, ln) in labels.iter().enumerate() {
                if *ln != labels[a] {
                    out.push((a, p, n));
                }
            }
        }
    }
    out
}

fn dist_and_diff<T: Real>(x: &[T], y: &[T]) -> (T, Vec<T>) {
    let diff: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a - b).collect();
    let d = diff.iter().fold(T::ZERO, |acc, &v| acc + v * v).sqrt();
    (d, diff)
}

/// Batch-all triplet loss: mean over every valid `(anchor, positive, negative)`
/// of `max(0, |z_a - z_p| - |z_a - z_n| + margin)`. Zero without a valid triplet.
pub fn triplet_loss<T: Real>(embeddings: &Tensor<T>, labels: &[Label], margin: T) -> Result<T> {
    let (b, e) = match *embeddings.shape() {
        [b, e] => (b, e),
        _ => return Err(shape_mismatch("triplet_loss", &[labels.len(), 0], embeddings.shape())),
    };
    if b != labels.len() {
        return Err(shape_mismatch("triplet_loss", &[labels.len(), e], embeddings.shape()));
    }
    let ts = triplets(labels);
    if ts.is_empty() {
        return Ok(T::ZERO);
    }
    let z = embeddings.data();
    let row = |i: usize| &z[i * e..(i + 1) * e];
    let mut acc = T::ZERO;
    for &(a, p, n) in &ts {
        let (dp, _) = dist_and_diff(row(a), row(p));
        let (dn, _) = dist_and_diff(row(a), row(n));
        acc += (dp - dn + margin).max(T::ZERO);
    }
    Ok(acc / T::from_f64(ts.len() as f64))
}

pub fn triplet_grad<T: Real>(embeddings: &Tensor<T>, labels: &[Label], margin: T) -> Tensor<T> {
    let mut g = Tensor::zeros(embeddings.shape());
    let ts = triplets(labels);
    if ts.is_empty() {
        return g;
    }
    let e = embeddings.shape()[1];
    let z = embeddings.data();
    let scale = T::ONE / T::from_f64(ts.len() as f64);
    let gd = g.data_mut();
    for &(a, p, n) in &ts {
        let (dp, diff_p) = dist_and_diff(&z[a * e..(a + 1) * e], &z[p * e..(p + 1) * e]);
        let (dn, diff_n) = dist_and_diff(&z[a * e..(a + 1) * e], &z[n * e..(n + 1) * e]);
        if dp - dn + margin <= T::ZERO {
            continue;
        }
        for j in 0..e {
            if dp > T::ZERO {
                let u = diff_p[j] / dp * scale;
                gd[a * e + j] += u;
                gd[p * e + j] -= u;
            }
            if dn > T::ZERO {
                let v = diff_n[j] / dn * scale;
                gd[a * e + j] -= v;
                gd[n * e + j] += v;
            }
        }
    }
    g
}

/// `alpha1*L_a + alpha2*L_r + alpha3*L_tri`.
pub fn stage2_total(l_a: f64, l_r: f64, l_tri: f64, w: &LossWeights) -> f64 {
    w.alpha1 * l_a + w.alpha2 * l_r + w.alpha3 * l_tri
}
