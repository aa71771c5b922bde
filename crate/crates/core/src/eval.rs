//! Liveness metrics (FRR, FAR, HTER, AUC, equal-error threshold) and a linear
//! 2D projection for embedding plots.
//!
//! Scores are "higher = more live"; a sample is accepted as live iff its score
//! is at least the threshold.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdomain::Label;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    labels: Vec<Label>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyBatch("score set"));
        }
        if scores.len() != labels.len() {
            return Err(Error::InvalidArgument(alloc::format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::OutOfRange {
                name: "score",
                value: bad,
            });
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn n_live(&self) -> usize {
        self.labels.iter().filter(|&&l| l == Label::Live).count()
    }

    pub fn n_spoof(&self) -> usize {
        self.labels.len() - self.n_live()
    }

    fn both_classes(&self, context: &'static str) -> Result<(usize, usize)> {
        let (l, s) = (self.n_live(), self.n_spoof());
        if l == 0 || s == 0 {
            return Err(Error::SingleClass(context));
        }
        Ok((l, s))
    }

    /// (rejected live, accepted spoof) at `threshold`.
    fn errors_at(&self, threshold: f64) -> (usize, usize) {
        let mut rejected_live = 0;
        let mut accepted_spoof = 0;
        for (&s, &l) in self.scores.iter().zip(&self.labels) {
            match (l, s >= threshold) {
                (Label::Live, false) => rejected_live += 1,
                (Label::Spoof, true) => accepted_spoof += 1,
                _ => {}
            }
        }
        (rejected_live, accepted_spoof)
    }
}

pub fn frr_far(s: &ScoreSet, threshold: f64) -> Result<(f64, f64)> {
    let (nl, ns) = s.both_classes("frr_far")?;
    let (rl, aspf) = s.errors_at(threshold);
    Ok((rl as f64 / nl as f64, aspf as f64 / ns as f64))
}

pub fn hter(frr: f64, far: f64) -> Result<f64> {
    for (name, v) in [("frr", frr), ("far", far)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRange { name, value: v });
        }
    }
    Ok((frr + far) / 2.0)
}

/// Probability that a random live score beats a random spoof score, ties
/// counting one half.
pub fn auc(s: &ScoreSet) -> Result<f64> {
    let (nl, ns) = s.both_classes("auc")?;
    let mut pairs: Vec<(f64, Label)> = s.scores.iter().copied().zip(s.labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the Mann-Whitney U statistic, kept integral.
    let mut twice_u: u128 = 0;
    let mut spoof_below: u128 = 0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        let live_here = pairs[i..j].iter().filter(|p| p.1 == Label::Live).count() as u128;
        let spoof_here = (j - i) as u128 - live_here;
        twice_u += live_here * (2 * spoof_below + spoof_here);
        spoof_below += spoof_here;
        i = j;
    }
    Ok(twice_u as f64 / (2.0 * nl as f64 * ns as f64))
}

/// Threshold where FRR and FAR are closest. Candidates are `-inf`, the
/// midpoints between adjacent distinct scores, and `+inf`; ties go to the lower
/// HTER, then to the lower threshold.
pub fn eer_threshold(s: &ScoreSet) -> Result<f64> {
    let (nl, ns) = s.both_classes("eer_threshold")?;
    let mut uniq = s.scores.clone();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    let mut candidates = vec![f64::NEG_INFINITY];
    candidates.extend(uniq.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    candidates.push(f64::INFINITY);
    // Compare frr/far through integer cross-multiplication to keep ties exact.
    let key = |t: f64| {
        let (rl, aspf) = s.errors_at(t);
        let a = rl as u128 * ns as u128;
        let b = aspf as u128 * nl as u128;
        (a.abs_diff(b), a + b)
    };
    let mut best = candidates[0];
    let mut best_key = key(best);
    for &t in &candidates[1..] {
        let k = key(t);
        if k < best_key {
            best = t;
            best_key = k;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub frr: f64,
    pub far: f64,
    pub hter: f64,
    pub auc: f64,
    pub n_live: usize,
    pub n_spoof: usize,
}

pub fn report_at(s: &ScoreSet, threshold: f64) -> Result<EvalReport> {
    let (frr, far) = frr_far(s, threshold)?;
    Ok(EvalReport {
        threshold,
        frr,
        far,
        hter: hter(frr, far)?,
        auc: auc(s)?,
        n_live: s.n_live(),
        n_spoof: s.n_spoof(),
    })
}

/// Metrics at the equal-error threshold of the same score set.
pub fn report_at_eer(s: &ScoreSet) -> Result<EvalReport> {
    report_at(s, eer_threshold(s)?)
}

/// Symmetric eigen-decomposition by cyclic Jacobi rotations. Returns
/// eigenvalues and eigenvectors (columns of the row-major `m x m` matrix).
fn jacobi_eigen(mut a: Vec<f64>, m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; m * m];
    for i in 0..m {
        v[i * m + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..m)
            .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * m + j] * a[i * m + j])
            .sum();
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..m {
            for q in p + 1..m {
                let apq = a[p * m + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * m + q] - a[p * m + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..m {
                    let akp = a[k * m + p];
                    let akq = a[k * m + q];
                    a[k * m + p] = c * akp - s * akq;
                    a[k * m + q] = s * akp + c * akq;
                }
                for k in 0..m {
                    let apk = a[p * m + k];
                    let aqk = a[q * m + k];
                    a[p * m + k] = c * apk - s * aqk;
                    a[q * m + k] = s * apk + c * aqk;
                }
                for k in 0..m {
                    let vkp = v[k * m + p];
                    let vkq = v[k * m + q];
                    v[k * m + p] = c * vkp - s * vkq;
                    v[k * m + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..m).map(|i| a[i * m + i]).collect(), v)
}

/// Project the rows of an `n x d` matrix onto its top two principal
/// directions. Each direction is signed so its largest-magnitude coordinate is
/// positive.
pub fn project_2d(data: &[f64], n: usize, d: usize) -> Result<Vec<[f64; 2]>> {
    if n < 3 {
        return Err(Error::InvalidArgument(alloc::format!("project_2d needs n >= 3, got {}", n)));
    }
    if d < 2 {
        return Err(Error::InvalidArgument(alloc::format!("project_2d needs d >= 2, got {}", d)));
    }
    if data.len() != n * d {
        return Err(crate::error::shape_mismatch("project_2d", &[n, d], &[data.len()]));
    }
    let mut x = data.to_vec();
    for j in 0..d {
        let mean = (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            x[i * d + j] -= mean;
        }
    }
    // Eigen-decompose the smaller of X^T X (d x d) and X X^T (n x n).
    let directions: Vec<Vec<f64>> = if d <= n {
        let mut cov = vec![0.0; d * d];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] += row[a] * row[b];
                }
            }
        }
        let (vals, vecs) = jacobi_eigen(cov, d);
        top_two(&vals)
            .into_iter()
            .map(|k| (0..d).map(|a| vecs[a * d + k]).collect())
            .collect()
    } else {
        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                gram[i * n + j] = (0..d).map(|k| x[i * d + k] * x[j * d + k]).sum();
            }
        }
        let (vals, vecs) = jacobi_eigen(gram, n);
        top_two(&vals)
            .into_iter()
            .map(|k| {
                // v = X^T u / |X^T u|; a vanishing direction stays zero.
                let mut v: Vec<f64> = (0..d).map(|c| (0..n).map(|i| x[i * d + c] * vecs[i * n + k]).sum()).collect();
                let norm = libm::sqrt(v.iter().map(|t| t * t).sum());
                if norm > 1e-12 {
                    v.iter_mut().for_each(|t| *t /= norm);
                } else {
                    v.iter_mut().for_each(|t| *t = 0.0);
                }
                v
            })
            .collect()
    };
    let signed: Vec<Vec<f64>> = directions
        .into_iter()
        .map(|mut v| {
            let big = v.iter().copied().fold(0.0f64, |m, t| if t.abs() > m.abs() { t } else { m });
            if big < 0.0 {
                v.iter_mut().for_each(|t| *t = -*t);
            }
            v
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let row = &x[i * d..(i + 1) * d];
            let p = |v: &Vec<f64>| row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            [p(&signed[0]), p(&signed[1])]
        })
        .collect())
}

fn top_two(vals: &[f64]) -> [usize; 2] {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    [idx[0], idx[1]]
}
