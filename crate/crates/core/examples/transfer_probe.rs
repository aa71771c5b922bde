//! Runs the source-only baseline and the translation pipeline on two
//! synthetic domains and prints target-test metrics.
//!
//! Settings come from environment variables: SIZE, LATENT, GW, N, E1, E2,
//! SRC, TGT, SEED, SKIP1 (baseline only).

use std::time::Instant;

use cdftn_core::eval::{report_at_eer, ScoreSet};
use cdftn_core::nets::{NetConfig, ShapeSpec};
use cdftn_core::synthdomain::{generate_dataset, make_domain_spec, resample_balance, DatasetHandle};
use cdftn_core::trainer::{
    score_dataset, synthesize_pseudo, train_stage1, train_stage2, Mode, StageOneConfig, StageTwoConfig, Topology,
};

fn env(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn report(name: &str, model: &cdftn_core::nets::ImageClassifier<f32>, test: &DatasetHandle) {
    let scores = score_dataset(model, test, 64).unwrap();
    let r = report_at_eer(&ScoreSet::new(scores, test.labels()).unwrap()).unwrap();
    println!("{name}: auc {:.4} hter {:.4}", r.auc, r.hter);
}

fn main() {
    let size = env("SIZE", 64);
    let n = env("N", 625);
    let seed = env("SEED", 0) as u64;
    let src = make_domain_spec(env("SRC", 0) as u32, 0);
    let tgt = make_domain_spec(env("TGT", 1) as u32, 0);
    println!("{src:?}\n{tgt:?}");
    let t0 = Instant::now();
    let (s_train, s_test) = generate_dataset(&src, n, 0.5, 0, size).unwrap().split(0.8, seed).unwrap();
    let (t_train, t_test) = generate_dataset(&tgt, n, 0.5, 100_000, size).unwrap().split(0.8, seed).unwrap();
    let s_bal = resample_balance(&s_train, seed).unwrap();
    let s2 = StageTwoConfig {
        epochs: env("E2", 5),
        seed,
        ..StageTwoConfig::default()
    };
    let (m0, _) = train_stage2(&s_bal, &s2, size, size).unwrap();
    report("baseline source-test", &m0, &s_test);
    report("baseline target-test", &m0, &t_test);
    println!("baseline done {:.0}s", t0.elapsed().as_secs_f64());
    if env("SKIP1", 0) == 1 {
        return;
    }
    let latent = env("LATENT", 64);
    let cfg = StageOneConfig {
        epochs: env("E1", 10),
        seed,
        shape: ShapeSpec::new(size, latent, 8).unwrap(),
        net: NetConfig {
            generator_width: env("GW", 64),
            ..NetConfig::default()
        },
        ..StageOneConfig::default()
    };
    let topo = Topology::new(Mode::SS2ST, src.domain_id, vec![tgt.domain_id]).unwrap();
    let targets = vec![t_train.unlabeled()];
    let state = train_stage1(&s_bal, &targets, &cfg, &topo, None, &mut |st| {
        let last = st.history.last().unwrap();
        println!("epoch {} {:?} {:.0}s", st.epochs_done, last.components, t0.elapsed().as_secs_f64());
        Ok(())
    })
    .unwrap();
    let pseudo = synthesize_pseudo(&state.bundle, &s_bal, &targets, 1, 16).unwrap();
    let pd = resample_balance(&pseudo.to_dataset(), seed).unwrap();
    let (m, _) = train_stage2(&pd, &s2, size, size).unwrap();
    report("cdftn target-test", &m, &t_test);
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
}
