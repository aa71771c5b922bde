//! Every loss against an independent scalar-loop reference on random inputs,
//! plus agreement between the functional losses and the tape operations.

use cdftn_core::graph::Graph;
use cdftn_core::losses::{self, GeneratorObjective, LossBreakdown, LossWeights};
use cdftn_core::params::ParamStore;
use cdftn_core::synthdomain::Label;
use cdftn_core::Tensor;
use proptest::prelude::*;

const EPS: f64 = 1e-7;
const TOL: f64 = 1e-6;

fn rel_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * a.abs().max(b.abs()).max(1e-12)
}

fn clamp(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

fn ref_adv(p_a: &[f64], p_b: &[f64]) -> f64 {
    let mut s1 = 0.0;
    for &p in p_a {
        s1 += clamp(p).ln();
    }
    let mut s2 = 0.0;
    for &p in p_b {
        s2 += (1.0 - clamp(p)).ln();
    }
    s1 / p_a.len() as f64 + s2 / p_b.len() as f64
}

fn ref_cls(logits: &[f64], labels: &[Label]) -> f64 {
    let mut total = 0.0;
    for (i, l) in labels.iter().enumerate() {
        let e0 = logits[2 * i].exp();
        let e1 = logits[2 * i + 1].exp();
        let p = [e0 / (e0 + e1), e1 / (e0 + e1)];
        total += -p[l.index()].ln();
    }
    total / labels.len() as f64
}

fn ref_l1(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s / a.len() as f64
}

fn ref_cue(cue: &[f64], per: usize, labels: &[Label]) -> f64 {
    let mut s = 0.0;
    let mut count = 0usize;
    for (i, l) in labels.iter().enumerate() {
        if *l == Label::Live {
            for j in 0..per {
                s += cue[i * per + j].abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        s / count as f64
    }
}

fn ref_triplet(emb: &[f64], e: usize, labels: &[Label], margin: f64) -> f64 {
    let dist = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for k in 0..e {
            let d = emb[i * e + k] - emb[j * e + k];
            s += d * d;
        }
        s.sqrt()
    };
    let mut s = 0.0;
    let mut count = 0usize;
    for a in 0..labels.len() {
        for p in 0..labels.len() {
            for n in 0..labels.len() {
                if a != p && labels[a] == labels[p] && labels[a] != labels[n] {
                    s += (dist(a, p) - dist(a, n) + margin).max(0.0);
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        s / count as f64
    }
}

fn probs(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![8 => 0.001f64..0.999, 1 => Just(0.0), 1 => Just(1.0)], 1..=max)
}

fn labels(n: usize) -> impl Strategy<Value = Vec<Label>> {
    prop::collection::vec(prop_oneof![Just(Label::Live), Just(Label::Spoof)], n)
}

/// A pair of equally-shaped `[b, c, h, w]` arrays with b <= 4, spatial <= 8.
fn tensor_pair() -> impl Strategy<Value = (Vec<usize>, Vec<f64>, Vec<f64>)> {
    (1usize..=4, 1usize..=3, 1usize..=8, 1usize..=8).prop_flat_map(|(b, c, h, w)| {
        let n = b * c * h * w;
        (
            Just(vec![b, c, h, w]),
            prop::collection::vec(-2.0f64..2.0, n),
            prop::collection::vec(-2.0f64..2.0, n),
        )
    })
}

fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, d.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn liveness_adversarial_matches_reference(ps in probs(8), pt in probs(8)) {
        let v = losses::liveness_adversarial_loss(&ps, &pt).unwrap();
        prop_assert!(rel_close(v, ref_adv(&ps, &pt)));
    }

    #[test]
    fn image_adversarial_matches_reference(pr in probs(8), pf in probs(8)) {
        let v = losses::image_adversarial_loss(&pr, &pf).unwrap();
        prop_assert!(rel_close(v, ref_adv(&pr, &pf)));
    }

    #[test]
    fn generator_objectives_match_reference(pf in probs(8)) {
        let ns = losses::generator_adversarial_loss(&pf, GeneratorObjective::NonSaturating).unwrap();
        let mut s = 0.0;
        for &p in &pf {
            s -= clamp(p).ln();
        }
        prop_assert!(rel_close(ns, s / pf.len() as f64));
        let sat = losses::generator_adversarial_loss(&pf, GeneratorObjective::Saturating).unwrap();
        let mut s = 0.0;
        for &p in &pf {
            s += (1.0 - clamp(p)).ln();
        }
        prop_assert!(rel_close(sat, s / pf.len() as f64));
    }

    #[test]
    fn cls_matches_reference(
        (logits, labs) in (1usize..=8).prop_flat_map(|b| (prop::collection::vec(-6.0f64..6.0, 2 * b), labels(b)))
    ) {
        let b = labs.len();
        let v = losses::source_cls_loss(&t(&[b, 2], &logits), &losses::one_hot(&labs)).unwrap();
        prop_assert!(rel_close(v, ref_cls(&logits, &labs)));
    }

    #[test]
    fn l1_matches_reference((shape, a, b) in tensor_pair()) {
        let v = losses::l1_reconstruction(&t(&shape, &a), &t(&shape, &b)).unwrap();
        prop_assert!(rel_close(v, ref_l1(&a, &b)));
        let swapped = losses::l1_reconstruction(&t(&shape, &b), &t(&shape, &a)).unwrap();
        prop_assert_eq!(v, swapped);
    }

    #[test]
    fn cycle_matches_reference((shape, a, b) in tensor_pair(), (shape2, c, d) in tensor_pair()) {
        let v = losses::cycle_loss(&t(&shape, &a), &t(&shape, &b), &t(&shape2, &c), &t(&shape2, &d)).unwrap();
        prop_assert!(rel_close(v, ref_l1(&a, &b) + ref_l1(&c, &d)));
    }

    #[test]
    fn latent_matches_reference((shape, a, b) in tensor_pair(), (shape2, c, d) in tensor_pair()) {
        let v = losses::latent_loss(&t(&shape, &a), &t(&shape, &b), &t(&shape2, &c), &t(&shape2, &d)).unwrap();
        prop_assert!(rel_close(v, ref_l1(&a, &b) + ref_l1(&c, &d)));
    }

    #[test]
    fn cue_matches_reference(
        (shape, cue, labs) in (1usize..=4, 1usize..=8, 1usize..=8).prop_flat_map(|(b, h, w)| {
            (Just(vec![b, 1, h, w]), prop::collection::vec(-1.0f64..1.0, b * h * w), labels(b))
        })
    ) {
        let v = losses::spoof_cue_loss(&t(&shape, &cue), &labs).unwrap();
        let r = ref_cue(&cue, shape[2] * shape[3], &labs);
        prop_assert!(rel_close(v, r) || (v == 0.0 && r == 0.0));
    }

    #[test]
    fn triplet_matches_reference(
        (b, e, emb, labs, margin) in (2usize..=6, 1usize..=5).prop_flat_map(|(b, e)| {
            (Just(b), Just(e), prop::collection::vec(-1.0f64..1.0, b * e), labels(b), 0.0f64..1.0)
        })
    ) {
        let v = losses::triplet_loss(&t(&[b, e], &emb), &labs, margin).unwrap();
        let r = ref_triplet(&emb, e, &labs, margin);
        prop_assert!(rel_close(v, r) || (v == 0.0 && r == 0.0));
    }

    #[test]
    fn stage1_total_is_linear_in_each_component(
        comps in prop::collection::vec(-5.0f64..5.0, 6),
        lambdas in prop::collection::vec(0.0f64..10.0, 5),
        k in 0usize..6,
        delta in -3.0f64..3.0,
    ) {
        let w = LossWeights {
            lambda1: lambdas[0], lambda2: lambdas[1], lambda3: lambdas[2], lambda4: lambdas[3], lambda5: lambdas[4],
            ..LossWeights::default()
        };
        let make = |c: &[f64]| {
            losses::STAGE1_COMPONENTS.iter().zip(c).fold(LossBreakdown::new(), |b, (n, v)| b.with(n, *v))
        };
        let base = losses::stage1_total(&make(&comps), &w).unwrap();
        let mut bumped = comps.clone();
        bumped[k] += delta;
        let moved = losses::stage1_total(&make(&bumped), &w).unwrap();
        let coef = [1.0, w.lambda1, w.lambda2, w.lambda3, w.lambda4, w.lambda5][k];
        prop_assert!((moved - base - coef * delta).abs() <= 1e-9 * (1.0 + base.abs()));
    }

    #[test]
    fn nonnegative_terms_stay_nonnegative((shape, a, b) in tensor_pair(), pf in probs(6)) {
        prop_assert!(losses::l1_reconstruction(&t(&shape, &a), &t(&shape, &b)).unwrap() >= 0.0);
        prop_assert!(losses::liveness_adversarial_loss(&pf, &pf).unwrap() <= 0.0);
        prop_assert!(losses::image_adversarial_loss(&pf, &pf).unwrap() >= 2.0 * EPS.ln());
    }

    #[test]
    fn tape_ops_match_functional_losses(
        (shape, a, b) in tensor_pair(),
        ps in probs(6),
        labs in labels(4),
        logits in prop::collection::vec(-4.0f64..4.0, 8),
        emb in prop::collection::vec(-1.0f64..1.0, 12),
        cue in prop::collection::vec(-1.0f64..1.0, 4 * 9),
    ) {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let va = g.input(t(&shape, &a));
        let vb = g.input(t(&shape, &b));
        let l1 = g.l1(va, vb).unwrap();
        prop_assert!(rel_close(g.scalar(l1), losses::l1_reconstruction(&t(&shape, &a), &t(&shape, &b)).unwrap()));
        let vp = g.input(t(&[ps.len()], &ps));
        let ml = g.mean_log(vp).unwrap();
        let mc = g.mean_log_complement(vp).unwrap();
        prop_assert!(rel_close(g.scalar(ml), losses::mean_log(&ps).unwrap()));
        prop_assert!(rel_close(g.scalar(mc), losses::mean_log_complement(&ps).unwrap()));
        let vl = g.input(t(&[4, 2], &logits));
        let ce = g.cross_entropy(vl, &labs).unwrap();
        prop_assert!(rel_close(g.scalar(ce), ref_cls(&logits, &labs)));
        let ve = g.input(t(&[4, 3], &emb));
        let tri = g.triplet(ve, &labs, 0.3).unwrap();
        let r = ref_triplet(&emb, 3, &labs, 0.3);
        prop_assert!(rel_close(g.scalar(tri), r) || (g.scalar(tri) == 0.0 && r == 0.0));
        let vc = g.input(t(&[4, 1, 3, 3], &cue));
        let cl = g.cue_l1(vc, &labs).unwrap();
        let r = ref_cue(&cue, 9, &labs);
        prop_assert!(rel_close(g.scalar(cl), r) || (g.scalar(cl) == 0.0 && r == 0.0));
    }
}
