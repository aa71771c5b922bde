//! Central finite differences (f64, step 1e-5) against the analytic gradients
//! of every loss and of the full stage-1 objective on a micro model bundle.

use cdftn_core::graph::Graph;
use cdftn_core::losses::{self, GeneratorObjective, LossWeights};
use cdftn_core::nets::{ModelBundle, NetConfig, ShapeSpec};
use cdftn_core::params::{ParamId, ParamStore};
use cdftn_core::synthdomain::Label;
use cdftn_core::trainer::{record_stage1_objective, StepBatch, TranslationPlan};
use cdftn_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const MAX_REL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between `analytic` and central differences of `f`
/// around `x`.
fn fd_check(x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + STEP;
        let up = f(&xp);
        xp[i] = x[i] - STEP;
        let down = f(&xp);
        xp[i] = x[i];
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * STEP)));
    }
    worst
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

/// Values bounded away from zero so L1 kinks stay outside the FD stencil.
fn away_from_zero(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = r.random_range(0.05..1.0);
            if r.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

const LABELS: [Label; 5] = [Label::Live, Label::Spoof, Label::Live, Label::Spoof, Label::Spoof];

#[test]
fn adversarial_losses() {
    let mut r = rng();
    for _ in 0..20 {
        let ps = uniform(&mut r, 4, 0.05, 0.95);
        let pt = uniform(&mut r, 3, 0.05, 0.95);
        let (gs, gt) = losses::liveness_adversarial_grad(&ps, &pt);
        assert!(fd_check(&ps, &gs, |p| losses::liveness_adversarial_loss(p, &pt).unwrap()) <= MAX_REL);
        assert!(fd_check(&pt, &gt, |p| losses::liveness_adversarial_loss(&ps, p).unwrap()) <= MAX_REL);
        let (gr, gf) = losses::image_adversarial_grad(&ps, &pt);
        assert!(fd_check(&ps, &gr, |p| losses::image_adversarial_loss(p, &pt).unwrap()) <= MAX_REL);
        assert!(fd_check(&pt, &gf, |p| losses::image_adversarial_loss(&ps, p).unwrap()) <= MAX_REL);
        for obj in [GeneratorObjective::NonSaturating, GeneratorObjective::Saturating] {
            let g = losses::generator_adversarial_grad(&pt, obj);
            assert!(fd_check(&pt, &g, |p| losses::generator_adversarial_loss(p, obj).unwrap()) <= MAX_REL);
        }
    }
}

#[test]
fn classification_loss() {
    let mut r = rng();
    for _ in 0..20 {
        let logits = uniform(&mut r, 10, -3.0, 3.0);
        let y = losses::one_hot::<f64>(&LABELS);
        let g = losses::source_cls_grad(&Tensor::new(&[5, 2], logits.clone()).unwrap(), &y);
        let f = |l: &[f64]| losses::source_cls_loss(&Tensor::new(&[5, 2], l.to_vec()).unwrap(), &y).unwrap();
        assert!(fd_check(&logits, g.data(), f) <= MAX_REL);
    }
}

#[test]
fn reconstruction_cycle_and_latent_losses() {
    let mut r = rng();
    let shape = [2, 3, 4, 4];
    let n = 2 * 3 * 4 * 4;
    for _ in 0..10 {
        let x = uniform(&mut r, n, 0.0, 1.0);
        let d = away_from_zero(&mut r, n);
        let xh: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
        let xt = Tensor::new(&shape, x.clone()).unwrap();
        let g = losses::l1_reconstruction_grad(&Tensor::new(&shape, xh.clone()).unwrap(), &xt);
        let f = |v: &[f64]| losses::l1_reconstruction(&Tensor::new(&shape, v.to_vec()).unwrap(), &xt).unwrap();
        assert!(fd_check(&xh, g.data(), f) <= MAX_REL);
        // Cycle and latent losses are sums of two L1 terms; the gradient of
        // each argument is the corresponding L1 gradient.
        let other = Tensor::new(&shape, uniform(&mut r, n, 0.0, 1.0)).unwrap();
        let fc = |v: &[f64]| {
            losses::cycle_loss(&Tensor::new(&shape, v.to_vec()).unwrap(), &xt, &other, &other).unwrap()
        };
        assert!(fd_check(&xh, g.data(), fc) <= MAX_REL);
        let fl = |v: &[f64]| {
            losses::latent_loss(&other, &other, &Tensor::new(&shape, v.to_vec()).unwrap(), &xt).unwrap()
        };
        assert!(fd_check(&xh, g.data(), fl) <= MAX_REL);
    }
}

#[test]
fn cue_and_triplet_losses() {
    let mut r = rng();
    for _ in 0..20 {
        let cue = away_from_zero(&mut r, 5 * 9);
        let g = losses::spoof_cue_grad(&Tensor::new(&[5, 1, 3, 3], cue.clone()).unwrap(), &LABELS);
        let f = |v: &[f64]| losses::spoof_cue_loss(&Tensor::new(&[5, 1, 3, 3], v.to_vec()).unwrap(), &LABELS).unwrap();
        assert!(fd_check(&cue, g.data(), f) <= MAX_REL);

        let emb = uniform(&mut r, 5 * 4, -1.0, 1.0);
        let g = losses::triplet_grad(&Tensor::new(&[5, 4], emb.clone()).unwrap(), &LABELS, 0.3);
        let f = |v: &[f64]| losses::triplet_loss(&Tensor::new(&[5, 4], v.to_vec()).unwrap(), &LABELS, 0.3).unwrap();
        assert!(fd_check(&emb, g.data(), f) <= MAX_REL);
    }
}

#[test]
fn tape_loss_ops() {
    let mut r = rng();
    let store = ParamStore::<f64>::new();
    let logits = uniform(&mut r, 10, -3.0, 3.0);
    let emb = uniform(&mut r, 20, -1.0, 1.0);
    let cue = away_from_zero(&mut r, 45);
    let probs = uniform(&mut r, 5, 0.05, 0.95);
    let eval = |l: &[f64], e: &[f64], c: &[f64], p: &[f64], grads: bool| {
        let mut g = Graph::new(&store);
        let vl = g.input_with_grad(Tensor::new(&[5, 2], l.to_vec()).unwrap());
        let ve = g.input_with_grad(Tensor::new(&[5, 4], e.to_vec()).unwrap());
        let vc = g.input_with_grad(Tensor::new(&[5, 1, 3, 3], c.to_vec()).unwrap());
        let vp = g.input_with_grad(Tensor::new(&[5], p.to_vec()).unwrap());
        let ce = g.cross_entropy(vl, &LABELS).unwrap();
        let tri = g.triplet(ve, &LABELS, 0.3).unwrap();
        let cl = g.cue_l1(vc, &LABELS).unwrap();
        let ml = g.mean_log(vp).unwrap();
        let mc = g.mean_log_complement(vp).unwrap();
        let total = g
            .weighted_sum(&[(ce, 1.0), (tri, 2.0), (cl, 0.5), (ml, 0.7), (mc, -1.3)])
            .unwrap();
        let value = g.scalar(total);
        let grads = grads.then(|| {
            let gr = g.backward(total).unwrap();
            [vl, ve, vc, vp].map(|v| gr.of(v).unwrap().data().to_vec())
        });
        (value, grads)
    };
    let [gl, ge, gc, gp] = eval(&logits, &emb, &cue, &probs, true).1.unwrap();
    assert!(fd_check(&logits, &gl, |v| eval(v, &emb, &cue, &probs, false).0) <= MAX_REL);
    assert!(fd_check(&emb, &ge, |v| eval(&logits, v, &cue, &probs, false).0) <= MAX_REL);
    assert!(fd_check(&cue, &gc, |v| eval(&logits, &emb, v, &probs, false).0) <= MAX_REL);
    assert!(fd_check(&probs, &gp, |v| eval(&logits, &emb, &cue, v, false).0) <= MAX_REL);
}

fn micro_bundle(n_targets: usize) -> (ModelBundle<f64>, StepBatch<f64>) {
    let shape = ShapeSpec::new(8, 4, 4).unwrap();
    let net = NetConfig {
        encoder_width: 4,
        generator_width: 8,
        residual_blocks: 1,
        disc_width: 4,
        disc_blocks: 2,
        latent_disc_width: 4,
    };
    let bundle = ModelBundle::<f64>::new(shape, net, n_targets, 3).unwrap();
    let mut r = rng();
    let mut img = || Tensor::new(&[2, 3, 8, 8], uniform(&mut r, 2 * 3 * 64, 0.0, 1.0)).unwrap();
    let batch = StepBatch {
        source: img(),
        source_labels: vec![Label::Live, Label::Spoof],
        targets: (0..n_targets).map(|_| img()).collect(),
    };
    (bundle, batch)
}

fn objective(bundle: &ModelBundle<f64>, batch: &StepBatch<f64>, plan: TranslationPlan) -> f64 {
    let mut g = Graph::new(&bundle.store);
    let (vars, _) = record_stage1_objective(&mut g, bundle, batch, plan, &LossWeights::default(), false).unwrap();
    g.scalar(vars.total)
}

const FINE_STEP: f64 = 1e-7;

/// Relative error of the central difference at `STEP`. A coordinate that fails
/// there (a ReLU or L1 kink inside the stencil) is re-checked at `FINE_STEP`;
/// the flag reports whether that fallback was needed.
fn coordinate_error(analytic: f64, f: impl Fn(f64) -> f64) -> (f64, bool) {
    let e = rel_err(analytic, (f(STEP) - f(-STEP)) / (2.0 * STEP));
    if e <= MAX_REL {
        return (e, false);
    }
    (rel_err(analytic, (f(FINE_STEP) - f(-FINE_STEP)) / (2.0 * FINE_STEP)), true)
}

/// Checks a few coordinates of every parameter tensor, plus input pixels. At
/// most a tenth of them may need the fine-step fallback.
fn check_full_objective(n_targets: usize, plan: TranslationPlan) {
    let (bundle, batch) = micro_bundle(n_targets);
    let (param_grads, input_grads): (Vec<(ParamId, Vec<f64>)>, Vec<Vec<f64>>) = {
        let mut g = Graph::new(&bundle.store);
        let (vars, xs) = record_stage1_objective(&mut g, &bundle, &batch, plan, &LossWeights::default(), true).unwrap();
        let gr = g.backward(vars.total).unwrap();
        (
            gr.params().map(|(id, t)| (id, t.data().to_vec())).collect(),
            xs.iter().map(|&x| gr.of(x).unwrap().data().to_vec()).collect(),
        )
    };
    assert_eq!(param_grads.len(), bundle.store.len(), "every parameter receives a gradient");
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let (mut worst, mut checked, mut kinks) = (0.0f64, 0usize, 0usize);
    let mut record = |e: f64, kinked: bool, what: &dyn Fn() -> String| {
        assert!(e <= MAX_REL, "{}: relative error {e:.3e}", what());
        worst = worst.max(e);
        checked += 1;
        kinks += kinked as usize;
    };
    for (id, grad) in &param_grads {
        for _ in 0..3 {
            let k = r.random_range(0..grad.len());
            let (e, kinked) = coordinate_error(grad[k], |delta| {
                let mut probe = bundle.clone();
                probe.store.get_mut(*id).data_mut()[k] += delta;
                objective(&probe, &batch, plan)
            });
            record(e, kinked, &|| format!("{} [{k}]", bundle.store.entry(*id).name));
        }
    }
    for (slot, grad) in input_grads.iter().enumerate() {
        for _ in 0..4 {
            let k = r.random_range(0..grad.len());
            let (e, kinked) = coordinate_error(grad[k], |delta| {
                let mut b = batch.clone();
                let img = if slot == 0 { &mut b.source } else { &mut b.targets[slot - 1] };
                img.data_mut()[k] += delta;
                objective(&bundle, &b, plan)
            });
            record(e, kinked, &|| format!("input slot {slot} [{k}]"));
        }
    }
    println!("stage-1 objective: {checked} coordinates, {kinks} kinked, max relative error {worst:.3e}");
    assert!(kinks * 10 <= checked, "too many kinked coordinates: {kinks} of {checked}");
}

#[test]
fn stage1_objective_pair_plan() {
    check_full_objective(1, TranslationPlan::Pair);
}

#[test]
fn stage1_objective_ring_plan() {
    check_full_objective(2, TranslationPlan::Ring { targets: 2 });
}

