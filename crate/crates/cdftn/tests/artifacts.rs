//! Folder ingestion, checkpoints, pseudo-image files and run directories.

use std::path::{Path, PathBuf};

use cdftn::checkpoint;
use cdftn::config::{DomainSource, ExperimentConfig};
use cdftn::data;
use cdftn::pipeline::{self, RunPaths};
use cdftn::records;
use cdftn_core::nets::{ClassifierConfig, ClassifierVariant, ImageClassifier, ModelBundle, NetConfig, ShapeSpec};
use cdftn_core::synthdomain::{generate_dataset, make_domain_spec, Label};
use cdftn_core::trainer::{score_dataset, synthesize_pseudo, Mode};
use image::{Rgb, RgbImage};

fn smoke_config(out: &Path) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg.normalize();
    cfg
}

fn write_png(path: &Path, size: u32, shade: u8) {
    RgbImage::from_fn(size, size, |x, y| Rgb([shade, (x % 256) as u8, (y % 256) as u8]))
        .save(path)
        .unwrap();
}

/// Each file's red channel encodes its name: 10 for `a.*`, 20 for `b.*`, ...
fn image_folder(root: &Path, live: &[&str], spoof: &[&str], size: u32) {
    for (dir, names) in [("live", live), ("spoof", spoof)] {
        std::fs::create_dir_all(root.join(dir)).unwrap();
        for n in names {
            let shade = 10 * (n.as_bytes()[0] - b'a' + 1);
            write_png(&root.join(dir).join(n), size, shade);
        }
    }
}

fn red_of(s: &cdftn_core::synthdomain::Sample) -> u8 {
    (s.image.data()[0] * 255.0).round() as u8
}

#[test]
fn ingest_reads_live_then_spoof_in_name_order() {
    let tmp = tempfile::tempdir().unwrap();
    image_folder(tmp.path(), &["c.png", "a.png", "b.png"], &["e.png", "d.png"], 64);
    std::fs::write(tmp.path().join("live").join("notes.txt"), "ignored").unwrap();
    let shape = ShapeSpec::new(64, 4, 4).unwrap();
    let d = data::ingest_folder(tmp.path(), &shape, 3).unwrap();
    assert_eq!(d.len(), 5);
    assert_eq!(d.labels(), [Label::Live, Label::Live, Label::Live, Label::Spoof, Label::Spoof]);
    assert!(d.samples().iter().all(|s| s.domain_id == 3));
    let reds: Vec<u8> = d.samples().iter().map(red_of).collect();
    assert_eq!(reds, [10, 20, 30, 40, 50]);
}

#[test]
fn ingest_resizes_to_the_configured_shape() {
    let tmp = tempfile::tempdir().unwrap();
    image_folder(tmp.path(), &["big.png"], &["big.jpg"], 128);
    let shape = ShapeSpec::new(64, 4, 4).unwrap();
    let d = data::ingest_folder(tmp.path(), &shape, 0).unwrap();
    for s in d.samples() {
        assert_eq!(s.image.shape(), [3, 64, 64]);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn ingest_counts_an_empty_class() {
    let tmp = tempfile::tempdir().unwrap();
    image_folder(tmp.path(), &[], &["a.png", "b.png"], 32);
    let d = data::ingest_folder(tmp.path(), &ShapeSpec::new(32, 4, 4).unwrap(), 0).unwrap();
    assert_eq!((d.live_count(), d.spoof_count()), (0, 2));
}

#[test]
fn ingest_errors_name_the_problem() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(tmp.path().join("live")).unwrap();
    let shape = ShapeSpec::new(32, 4, 4).unwrap();
    let err = format!("{:#}", data::ingest_folder(tmp.path(), &shape, 0).unwrap_err());
    assert!(err.contains("`spoof`"), "{err}");

    std::fs::create_dir_all(tmp.path().join("spoof")).unwrap();
    std::fs::write(tmp.path().join("spoof").join("broken.png"), b"not a png").unwrap();
    let err = format!("{:#}", data::ingest_folder(tmp.path(), &shape, 0).unwrap_err());
    assert!(err.contains("broken.png"), "{err}");
}

#[test]
fn exported_domains_ingest_back_within_quantisation() {
    let tmp = tempfile::tempdir().unwrap();
    let d = generate_dataset(&make_domain_spec(2, 0), 6, 0.5, 9, 32).unwrap();
    assert_eq!(data::export_dataset(&d, tmp.path()).unwrap(), 6);
    let back = data::ingest_folder(tmp.path(), &ShapeSpec::new(32, 4, 4).unwrap(), 2).unwrap();
    assert_eq!((back.live_count(), back.spoof_count()), (d.live_count(), d.spoof_count()));
    let mut originals: Vec<_> = d.samples().iter().collect();
    originals.sort_by_key(|s| (s.label != Label::Live, data::export_name(s)));
    for (a, b) in originals.iter().zip(back.samples()) {
        assert_eq!(a.label, b.label);
        let worst = a.image.data().iter().zip(b.image.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6, "max pixel error {worst}");
    }
}

fn tiny_bundle(n_targets: usize, seed: u64) -> ModelBundle<f32> {
    let net = NetConfig {
        encoder_width: 4,
        generator_width: 8,
        residual_blocks: 1,
        disc_width: 4,
        disc_blocks: 2,
        latent_disc_width: 4,
    };
    ModelBundle::new(ShapeSpec::new(32, 4, 8).unwrap(), net, n_targets, seed).unwrap()
}

fn params_bits(b: &ModelBundle<f32>) -> Vec<u32> {
    b.store.iter().flat_map(|(_, e)| e.value.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn bundle_checkpoints_round_trip_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let b = tiny_bundle(3, 4);
    checkpoint::save_bundle(&b, tmp.path()).unwrap();
    let back = checkpoint::load_bundle(tmp.path()).unwrap();
    assert_eq!(params_bits(&back), params_bits(&b));
    assert_eq!(back.checksum(), b.checksum());
    assert_eq!(back.n_targets(), 3);
    let m = checkpoint::read_manifest(tmp.path()).unwrap();
    let liveness_discs = m.components.iter().filter(|c| c.name.starts_with("liveness_discriminator")).count();
    assert_eq!(liveness_discs, 3);
}

fn component_file(dir: &Path, name: &str) -> PathBuf {
    let m = checkpoint::read_manifest(dir).unwrap();
    dir.join(&m.components.iter().find(|c| c.name == name).unwrap().file)
}

#[test]
fn corrupt_checkpoints_name_the_failing_component() {
    let tmp = tempfile::tempdir().unwrap();
    checkpoint::save_bundle(&tiny_bundle(1, 1), tmp.path()).unwrap();
    let file = component_file(tmp.path(), "target1.generator");
    let bytes = std::fs::read(&file).unwrap();

    std::fs::write(&file, &bytes[..bytes.len() - 3]).unwrap();
    let err = format!("{:#}", checkpoint::load_bundle(tmp.path()).unwrap_err());
    assert!(err.contains("target1.generator"), "{err}");

    let mut nan = bytes.clone();
    nan[..4].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(&file, &nan).unwrap();
    let err = format!("{:#}", checkpoint::load_bundle(tmp.path()).unwrap_err());
    assert!(err.contains("target1.generator") && err.contains("non-finite"), "{err}");

    std::fs::remove_file(&file).unwrap();
    let err = format!("{:#}", checkpoint::load_bundle(tmp.path()).unwrap_err());
    assert!(err.contains("target1.generator"), "{err}");
}

#[test]
fn classifiers_round_trip_with_identical_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let config = ClassifierConfig {
        stage_widths: vec![4, 8],
        cue_width: 4,
    };
    for variant in [ClassifierVariant::R, ClassifierVariant::L] {
        let c = ImageClassifier::<f32>::new(variant, 32, 32, config.clone(), 3).unwrap();
        let dir = tmp.path().join(format!("{variant:?}"));
        checkpoint::save_classifier(&c, &dir).unwrap();
        let back = checkpoint::load_classifier(&dir).unwrap();
        assert_eq!(back.checksum(), c.checksum());
        let d = generate_dataset(&make_domain_spec(0, 0), 6, 0.5, 1, 32).unwrap();
        assert_eq!(score_dataset(&back, &d, 4).unwrap(), score_dataset(&c, &d, 4).unwrap());
    }
}

#[test]
fn pseudo_sets_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = tiny_bundle(2, 8);
    let source = generate_dataset(&make_domain_spec(0, 0), 5, 0.5, 0, 32).unwrap();
    let targets: Vec<_> = (1..=2)
        .map(|i| generate_dataset(&make_domain_spec(i, 0), 3, 0.5, 40, 32).unwrap().unlabeled())
        .collect();
    let p = synthesize_pseudo(&bundle, &source, &targets, 1, 4).unwrap();
    pipeline::save_pseudo(&p, tmp.path()).unwrap();
    assert_eq!(pipeline::load_pseudo(tmp.path()).unwrap(), p);

    let bin = tmp.path().join("images.bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
    assert!(pipeline::load_pseudo(tmp.path()).is_err());
}

#[test]
fn resumed_stage_one_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let full_cfg = smoke_config(&tmp.path().join("full"));
    let d = pipeline::prepare_domains(&full_cfg).unwrap();
    let full = pipeline::run_stage1(&full_cfg, &d, &RunPaths::new(&full_cfg.output_dir), true).unwrap();

    let split_root = tmp.path().join("split");
    let mut first = smoke_config(&split_root);
    first.stage_one.epochs = 1;
    pipeline::run_stage1(&first, &d, &RunPaths::new(&split_root), true).unwrap();
    assert_eq!(checkpoint::latest_epoch(&split_root), Some(1));
    let second = smoke_config(&split_root);
    let resumed = pipeline::run_stage1(&second, &d, &RunPaths::new(&split_root), true).unwrap();

    assert_eq!(resumed.bundle.checksum(), full.bundle.checksum());
    assert_eq!(resumed.history, full.history);
    let a = std::fs::read(RunPaths::new(&full_cfg.output_dir).stage1_losses()).unwrap();
    let b = std::fs::read(RunPaths::new(&split_root).stage1_losses()).unwrap();
    assert_eq!(a, b);
    // Only the newest epoch keeps optimiser state.
    assert!(!checkpoint::epoch_dir(&split_root, 1).join("optimizer.bin").exists());
    assert!(checkpoint::epoch_dir(&split_root, 2).join("optimizer.bin").exists());
}

#[test]
fn tampered_stage_one_state_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(tmp.path());
    cfg.stage_one.epochs = 1;
    let d = pipeline::prepare_domains(&cfg).unwrap();
    let run = RunPaths::new(tmp.path());
    pipeline::run_stage1(&cfg, &d, &run, true).unwrap();
    let dir = checkpoint::epoch_dir(tmp.path(), 1);
    let file = component_file(&dir, "source.generator");
    let mut bytes = std::fs::read(&file).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&file, bytes).unwrap();
    let fresh = cdftn_core::trainer::Stage1Optimizers::new(&cfg.stage_one);
    assert!(checkpoint::load_stage1_state(&dir, fresh).is_err());
}

fn three_target_config(out: &Path, mode: Mode) -> ExperimentConfig {
    let mut cfg = smoke_config(out);
    cfg.mode = mode;
    cfg.targets = (1..=3).map(|i| DomainSource::Synthetic { domain_id: i, style_seed: 0 }).collect();
    cfg.samples_per_domain = 20;
    cfg.stage_one.epochs = 1;
    cfg.stage_two.epochs = 1;
    cfg
}

#[test]
fn multi_target_runs_report_every_target_for_both_models() {
    let tmp = tempfile::tempdir().unwrap();
    for mode in [Mode::SS2MT, Mode::SS2BT] {
        let cfg = three_target_config(&tmp.path().join(mode.name()), mode);
        let (manifest, rows) = pipeline::run_pipeline(&cfg, false).unwrap();
        assert_eq!(manifest.status, "completed");
        let run = RunPaths::new(&cfg.output_dir);
        assert_eq!(records::read_eval_csv(&run.eval()).unwrap(), rows);
        for model in ["cdftn", "baseline"] {
            let targets: Vec<u32> = rows.iter().filter(|r| r.model == model).map(|r| r.target).collect();
            assert_eq!(targets, [1, 2, 3], "{} {}", mode.name(), model);
        }
        let header = std::fs::read_to_string(run.eval()).unwrap();
        let header = header.lines().next().unwrap();
        assert!(header.contains(",hter,") && header.contains("hter_at_half"), "{header}");
        let bundle = checkpoint::load_bundle(&run.final_bundle(&cfg)).unwrap();
        assert_eq!(bundle.n_targets(), if mode == Mode::SS2MT { 3 } else { 1 });
        assert_eq!(ExperimentConfig::from_toml(&std::fs::read_to_string(run.config()).unwrap()).unwrap(), cfg);
        pipeline::verify_run(&cfg, &run).unwrap();
    }
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let files = |root: &Path| -> Vec<Vec<u8>> {
        let run = RunPaths::new(root);
        [run.stage1_losses(), run.stage2_losses(), run.baseline_losses(), run.eval()]
            .iter()
            .map(|p| std::fs::read(p).unwrap())
            .collect()
    };
    let a = smoke_config(&tmp.path().join("a"));
    let b = smoke_config(&tmp.path().join("b"));
    pipeline::run_pipeline(&a, false).unwrap();
    pipeline::run_pipeline(&b, false).unwrap();
    assert_eq!(files(&a.output_dir), files(&b.output_dir));
}

#[test]
fn aborted_runs_record_the_failing_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(&tmp.path().join("run"));
    cfg.source = DomainSource::Folder {
        domain_id: 0,
        path: tmp.path().join("missing"),
    };
    assert!(pipeline::run_pipeline(&cfg, false).is_err());
    let m = pipeline::RunManifest::load(&RunPaths::new(&cfg.output_dir).manifest()).unwrap();
    assert_eq!(m.status, "aborted");
    let last = m.stages.last().unwrap();
    assert_eq!((last.name.as_str(), last.status.as_str()), ("prepare-data", "aborted"));
    assert!(last.error.as_deref().unwrap().contains("live"));
}
