//! The `cdftn` binary: subcommands, overrides and exit status.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn cdftn(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdftn"))
        .args(args)
        .arg("--config")
        .arg(smoke())
        .arg("--output-dir")
        .arg(out)
        .env("RUST_LOG", "warn")
        .env_remove("CDFTN_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_data_writes_deterministic_class_folders() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["generate-data", "--mode", "ss2mt", "--targets", "1,2,3", "--samples-per-domain", "12"];
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_ok(&cdftn(&args, &a));
    assert_ok(&cdftn(&args, &b));
    let data = a.join("data");
    let mut domains: Vec<String> = std::fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    domains.sort();
    assert_eq!(domains, ["d0", "d1", "d2", "d3"]);
    for d in &domains {
        for class in ["live", "spoof"] {
            assert_eq!(std::fs::read_dir(data.join(d).join(class)).unwrap().count(), 6, "{d}/{class}");
        }
    }
    let fa = files_under(&data);
    assert_eq!(fa.len(), 48);
    assert_eq!(fa, files_under(&b.join("data")));
}

#[test]
fn subcommands_chain_into_a_complete_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    for cmd in ["train", "synthesize", "train-classifier", "evaluate", "report"] {
        assert_ok(&cdftn(&[cmd, "--stage1-epochs", "1", "--stage2-epochs", "1"], out));
    }
    let report = std::fs::read_to_string(out.join("report.md")).unwrap();
    assert!(report.contains("HTER@EER") && report.contains("HTER@0.5"), "{report}");
    for f in ["stage1_losses.csv", "stage2_losses.csv", "eval.csv", "ckpt/epoch_1/manifest.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    for f in ["stage1_losses.png", "stage2_losses.png", "latent_scatter.png", "pseudo_grid.png"] {
        let img = image::open(out.join("plots").join(f)).unwrap();
        assert!(img.width() > 0 && img.height() > 0);
    }
}

#[test]
fn multi_target_training_builds_one_liveness_discriminator_per_target() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cdftn(
        &["train", "--mode", "ss2mt", "--targets", "1,2,3", "--samples-per-domain", "16", "--stage1-epochs", "1"],
        tmp.path(),
    );
    assert_ok(&o);
    let manifest = std::fs::read_to_string(tmp.path().join("ckpt/epoch_1/manifest.json")).unwrap();
    for k in 1..=3 {
        assert!(manifest.contains(&format!("\"liveness_discriminator{k}\"")), "missing discriminator {k}");
    }
    assert!(!manifest.contains("\"liveness_discriminator4\""));
}

#[test]
fn output_root_variable_yields_to_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let (env_root, flag_root) = (tmp.path().join("env"), tmp.path().join("flag"));
    let run = |with_flag: bool| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_cdftn"));
        c.args(["generate-data", "--samples-per-domain", "4", "--config"]).arg(smoke());
        if with_flag {
            c.arg("--output-dir").arg(&flag_root);
        }
        c.env("CDFTN_OUTPUT_ROOT", &env_root).env("RUST_LOG", "warn").output().unwrap()
    };
    assert_ok(&run(false));
    assert!(env_root.join("data/d0/live").is_dir());
    assert_ok(&run(true));
    assert!(flag_root.join("data/d0/live").is_dir());
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cdftn(&["evaluate"], tmp.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));

    let o = cdftn(&["run", "--source", "0=/nonexistent/folder"], tmp.path());
    assert!(!o.status.success());
    let m = std::fs::read_to_string(tmp.path().join("run_manifest.json")).unwrap();
    assert!(m.contains("\"aborted\""));

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "no_such_key = 1\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cdftn"))
        .args(["train", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));

    let o = cdftn(&["train", "--mode", "ss9"], tmp.path());
    assert!(!o.status.success());
}

#[test]
fn corrupt_checkpoint_fails_synthesis_naming_the_component() {
    let tmp = tempfile::tempdir().unwrap();
    assert_ok(&cdftn(&["train", "--stage1-epochs", "1"], tmp.path()));
    let file = tmp.path().join("ckpt/epoch_1/target1.content_encoder.bin");
    std::fs::write(&file, b"xx").unwrap();
    let o = cdftn(&["synthesize", "--stage1-epochs", "1"], tmp.path());
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("target1.content_encoder"), "{err}");
}
