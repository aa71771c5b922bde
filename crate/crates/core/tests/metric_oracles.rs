//! Metrics against brute-force enumeration on small score sets drawn from the
//! grid {0.1, ..., 0.9}, plus the metric invariants.

use cdftn_core::eval::{auc, eer_threshold, frr_far, hter, project_2d, report_at_eer, ScoreSet};
use cdftn_core::synthdomain::Label;
use proptest::prelude::*;

/// Score sets of size 2..=8 on the 0.1 grid with both classes present.
fn grid_set() -> impl Strategy<Value = (Vec<f64>, Vec<Label>)> {
    (2usize..=8)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(1u32..=9, n),
                prop::collection::vec(any::<bool>(), n),
                0..n,
                0..n,
            )
        })
        .prop_filter_map("needs both classes", |(grid, live, i, j)| {
            let mut live = live;
            if i == j {
                return None;
            }
            live[i] = true;
            live[j] = false;
            let scores = grid.iter().map(|&g| g as f64 / 10.0).collect();
            let labels = live.iter().map(|&l| if l { Label::Live } else { Label::Spoof }).collect();
            Some((scores, labels))
        })
}

fn counts(labels: &[Label]) -> (usize, usize) {
    let live = labels.iter().filter(|&&l| l == Label::Live).count();
    (live, labels.len() - live)
}

fn brute_frr_far(scores: &[f64], labels: &[Label], thr: f64) -> (f64, f64) {
    let (nl, ns) = counts(labels);
    let mut rejected = 0;
    let mut accepted = 0;
    for i in 0..scores.len() {
        let accept = scores[i] >= thr;
        if labels[i] == Label::Live && !accept {
            rejected += 1;
        }
        if labels[i] == Label::Spoof && accept {
            accepted += 1;
        }
    }
    (rejected as f64 / nl as f64, accepted as f64 / ns as f64)
}

fn brute_auc(scores: &[f64], labels: &[Label]) -> f64 {
    let mut credit = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == Label::Live && labels[j] == Label::Spoof {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    credit += 1.0;
                } else if scores[i] == scores[j] {
                    credit += 0.5;
                }
            }
        }
    }
    credit / pairs
}

/// Every distinct accept/reject split, indexed by the lowest accepted score
/// (`-inf` accepts everything, `+inf` nothing), as exact integer counts.
/// Returns the split minimising |frr - far|, then hter, then threshold.
fn brute_eer(scores: &[f64], labels: &[Label]) -> (f64, (usize, usize)) {
    let (nl, ns) = counts(labels);
    let mut cuts: Vec<f64> = scores.to_vec();
    cuts.push(f64::NEG_INFINITY);
    cuts.push(f64::INFINITY);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut best: Option<((u64, u64), f64, (usize, usize))> = None;
    for &c in &cuts {
        let rl = (0..scores.len()).filter(|&i| labels[i] == Label::Live && scores[i] < c).count();
        let asp = (0..scores.len()).filter(|&i| labels[i] == Label::Spoof && scores[i] >= c).count();
        let a = (rl * ns) as u64;
        let b = (asp * nl) as u64;
        let key = (a.abs_diff(b), a + b);
        if best.as_ref().is_none_or(|(k, _, _)| key < *k) {
            best = Some((key, c, (rl, asp)));
        }
    }
    let (_, c, split) = best.unwrap();
    (c, split)
}

fn set(scores: &[f64], labels: &[Label]) -> ScoreSet {
    ScoreSet::new(scores.to_vec(), labels.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1500))]

    #[test]
    fn metrics_match_brute_force((scores, labels) in grid_set(), thr_grid in 0u32..=10) {
        let s = set(&scores, &labels);
        let thr = thr_grid as f64 / 10.0 + 0.05;
        prop_assert_eq!(frr_far(&s, thr).unwrap(), brute_frr_far(&scores, &labels, thr));
        prop_assert_eq!(auc(&s).unwrap(), brute_auc(&scores, &labels));

        let (nl, ns) = counts(&labels);
        let t = eer_threshold(&s).unwrap();
        let (cut, (rl, asp)) = brute_eer(&scores, &labels);
        let (frr, far) = frr_far(&s, t).unwrap();
        prop_assert_eq!((frr, far), (rl as f64 / nl as f64, asp as f64 / ns as f64));
        // Same split: no score lies between the returned threshold and the brute-force cut.
        let (lo, hi) = if t <= cut { (t, cut) } else { (cut, t) };
        prop_assert!(!scores.iter().any(|&x| x >= lo && x < hi));

        let r = report_at_eer(&s).unwrap();
        prop_assert_eq!(r.hter, (r.frr + r.far) / 2.0);
        prop_assert_eq!((r.n_live, r.n_spoof), (nl, ns));
    }

    #[test]
    fn frr_far_is_monotone((scores, labels) in grid_set(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let s = set(&scores, &labels);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (frr_lo, far_lo) = frr_far(&s, lo).unwrap();
        let (frr_hi, far_hi) = frr_far(&s, hi).unwrap();
        prop_assert!(frr_hi >= frr_lo);
        prop_assert!(far_hi <= far_lo);
    }

    #[test]
    fn auc_is_invariant_under_increasing_transforms((scores, labels) in grid_set()) {
        let warped: Vec<f64> = scores.iter().map(|x| x * x * x + x.exp()).collect();
        prop_assert_eq!(auc(&set(&scores, &labels)).unwrap(), auc(&set(&warped, &labels)).unwrap());
    }

    #[test]
    fn eer_threshold_is_translation_equivariant((scores, labels) in grid_set(), shift in -5.0f64..5.0) {
        let s = set(&scores, &labels);
        let shifted: Vec<f64> = scores.iter().map(|x| x + shift).collect();
        let s2 = set(&shifted, &labels);
        let (t1, t2) = (eer_threshold(&s).unwrap(), eer_threshold(&s2).unwrap());
        if t1.is_finite() {
            prop_assert!((t2 - t1 - shift).abs() < 1e-9);
        } else {
            prop_assert_eq!(t1, t2);
        }
        prop_assert_eq!(frr_far(&s, t1).unwrap(), frr_far(&s2, t2).unwrap());
    }

    #[test]
    fn eer_balances_rates_within_one_sample(
        (scores, labels) in (4usize..=40).prop_flat_map(|n| {
            (Just(n), prop::collection::vec(any::<bool>(), n))
        }).prop_filter_map("needs both classes", |(n, live)| {
            let labels: Vec<Label> = live.iter().map(|&l| if l { Label::Live } else { Label::Spoof }).collect();
            let (nl, ns) = counts(&labels);
            // Distinct scores: a permutation of 0..n spread over (0, 1).
            let scores: Vec<f64> = (0..n).map(|i| ((i * 7919) % n) as f64 / n as f64 + 0.001).collect();
            (nl > 0 && ns > 0).then_some((scores, labels))
        })
    ) {
        let s = set(&scores, &labels);
        let (nl, ns) = counts(&labels);
        let (frr, far) = frr_far(&s, eer_threshold(&s).unwrap()).unwrap();
        prop_assert!((frr - far).abs() <= 1.0 / nl.min(ns) as f64 + 1e-12);
    }

    #[test]
    fn rank_sum_auc_equals_pairwise_on_larger_sets(
        (scores, labels) in (2usize..=100).prop_flat_map(|n| {
            (prop::collection::vec(0u32..20, n), prop::collection::vec(any::<bool>(), n))
        }).prop_filter_map("needs both classes", |(g, live)| {
            let labels: Vec<Label> = live.iter().map(|&l| if l { Label::Live } else { Label::Spoof }).collect();
            let (nl, ns) = counts(&labels);
            (nl > 0 && ns > 0).then(|| (g.iter().map(|&x| x as f64 / 7.0).collect::<Vec<_>>(), labels))
        })
    ) {
        prop_assert_eq!(auc(&set(&scores, &labels)).unwrap(), brute_auc(&scores, &labels));
    }

    #[test]
    fn duplicated_points_project_together(
        pts in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 3..10)
    ) {
        let n = pts.len();
        let data: Vec<f64> = pts.iter().chain(pts.iter()).flatten().copied().collect();
        let p = project_2d(&data, 2 * n, 4).unwrap();
        for i in 0..n {
            prop_assert!((p[i][0] - p[i + n][0]).abs() < 1e-9);
            prop_assert!((p[i][1] - p[i + n][1]).abs() < 1e-9);
        }
    }
}

#[test]
fn spec_examples() {
    use Label::*;
    let s = set(&[0.9, 0.2, 0.8, 0.1], &[Live, Live, Spoof, Spoof]);
    assert_eq!(frr_far(&s, 0.5).unwrap(), (0.5, 0.5));
    assert_eq!(frr_far(&s, 1.5).unwrap(), (1.0, 0.0));
    assert_eq!(hter(0.1, 0.3).unwrap(), 0.2);
    assert_eq!(auc(&set(&[0.9, 0.4, 0.8, 0.3], &[Live, Live, Spoof, Spoof])).unwrap(), 0.75);
    assert_eq!(auc(&set(&[0.3; 5], &[Live, Spoof, Spoof, Live, Spoof])).unwrap(), 0.5);
    let t = eer_threshold(&s).unwrap();
    assert_eq!(frr_far(&s, t).unwrap(), (0.5, 0.5));
    assert!(ScoreSet::new(vec![0.5, f64::NAN], vec![Live, Spoof]).is_err());
    assert!(auc(&set(&[0.5, 0.6], &[Live, Live])).is_err());
    assert!(eer_threshold(&set(&[0.5, 0.6], &[Spoof, Spoof])).is_err());
    assert!(project_2d(&[1.0, 2.0, 3.0, 4.0], 2, 2).is_err());
    assert!(project_2d(&[1.0, 2.0, 3.0], 3, 1).is_err());
}

#[test]
fn projection_sign_convention() {
    // Points spread along (1, -2): the leading direction must have a positive
    // largest-magnitude coordinate, so the point at t = 3 maps to a negative
    // first coordinate (its (1, -2) component dominates with sign flipped).
    let data: Vec<f64> = (0..5)
        .flat_map(|t| {
            let t = t as f64 - 2.0;
            [t, -2.0 * t + 0.01 * t * t]
        })
        .collect();
    let p = project_2d(&data, 5, 2).unwrap();
    assert!(p[4][0] < 0.0 && p[0][0] > 0.0);
}
