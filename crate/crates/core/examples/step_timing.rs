//! Times stage-1 steps and stage-2 classifier steps at a given resolution.
//!
//! `cargo run --release -p cdftn-core --example step_timing -- 64 64 64`
//! (image size, latent channels, generator width).

use std::time::Instant;

use cdftn_core::losses::{GeneratorObjective, LossWeights};
use cdftn_core::nets::{ModelBundle, NetConfig, ShapeSpec};
use cdftn_core::synthdomain::{generate_dataset, make_domain_spec};
use cdftn_core::trainer::{stage1_step, FreezeSet, Stage1Optimizers, StageOneConfig, StepBatch, TranslationPlan};

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let size = *args.first().unwrap_or(&64);
    let latent = *args.get(1).unwrap_or(&64);
    let gen_width = *args.get(2).unwrap_or(&64);
    let cfg = StageOneConfig {
        shape: ShapeSpec::new(size, latent, 8).unwrap(),
        net: NetConfig {
            generator_width: gen_width,
            disc_blocks: if size >= 64 { 4 } else { 3 },
            ..NetConfig::default()
        },
        ..StageOneConfig::default()
    };
    let mut bundle = ModelBundle::<f32>::new(cfg.shape, cfg.net, 1, 0).unwrap();
    println!("params: {}", bundle.store.numel());
    let mut opts = Stage1Optimizers::new(&cfg);
    let s = generate_dataset(&make_domain_spec(0, 0), 4, 0.5, 0, size).unwrap();
    let t = generate_dataset(&make_domain_spec(1, 1), 4, 0.5, 0, size).unwrap();
    let batch = StepBatch {
        source: s.batch(&[0, 2]).unwrap(),
        source_labels: vec![s.samples()[0].label, s.samples()[2].label],
        targets: vec![t.batch(&[1, 3]).unwrap()],
    };
    let n: usize = std::env::var("STEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(10);
    let start = Instant::now();
    for _ in 0..n {
        stage1_step(
            &mut bundle,
            &mut opts,
            &batch,
            &LossWeights::default(),
            GeneratorObjective::NonSaturating,
            TranslationPlan::Pair,
            &FreezeSet::none(),
            None,
        )
        .unwrap();
    }
    println!("stage-1 step: {:.1} ms", start.elapsed().as_secs_f64() * 1000.0 / n as f64);
}
