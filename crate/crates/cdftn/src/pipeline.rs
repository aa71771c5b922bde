//! Experiment stages and the end-to-end run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use cdftn_core::eval::{project_2d, report_at, report_at_eer, ScoreSet};
use cdftn_core::losses::{LossBreakdown, STAGE1_COMPONENTS, STAGE2_COMPONENTS};
use cdftn_core::nets::{DomainRole, EncoderKind, ImageClassifier, ModelBundle};
use cdftn_core::synthdomain::{resample_balance, DatasetHandle, Label, UnlabeledSet};
use cdftn_core::trainer::{
    score_dataset, synthesize_pseudo, target_slots, train_stage1, train_stage2, Provenance, PseudoLabeledSet,
    Stage1Optimizers, Stage1State,
};
use cdftn_core::Tensor;
use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::data;
use crate::plots::{self, ScatterPoint};
use crate::records::{self, EvalRow};

/// Fixed threshold of the secondary HTER column.
pub const HALF_THRESHOLD: f64 = 0.5;
/// Samples per domain drawn in the latent scatter and image grid.
const FIGURE_SAMPLES: usize = 64;
const GRID_COLUMNS: usize = 8;
const SCORE_BATCH: usize = 64;

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn stage1_losses(&self) -> PathBuf {
        self.root.join("stage1_losses.csv")
    }
    pub fn stage2_losses(&self) -> PathBuf {
        self.root.join("stage2_losses.csv")
    }
    pub fn baseline_losses(&self) -> PathBuf {
        self.root.join("baseline_losses.csv")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.csv")
    }
    pub fn final_bundle(&self, cfg: &ExperimentConfig) -> PathBuf {
        checkpoint::epoch_dir(&self.root, cfg.stage_one.epochs)
    }
    pub fn cdftn_model(&self) -> PathBuf {
        self.root.join("models").join("cdftn")
    }
    pub fn baseline_model(&self) -> PathBuf {
        self.root.join("models").join("baseline")
    }
    pub fn pseudo(&self) -> PathBuf {
        self.root.join("pseudo")
    }
    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("run_manifest.json")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.md")
    }

    /// Files every completed run must contain, relative to the root.
    pub fn required(&self, cfg: &ExperimentConfig) -> Vec<PathBuf> {
        let mut v = vec![
            self.config(),
            self.stage1_losses(),
            self.stage2_losses(),
            self.baseline_losses(),
            self.eval(),
            self.final_bundle(cfg).join(checkpoint::MANIFEST),
            self.cdftn_model().join(checkpoint::MANIFEST),
            self.baseline_model().join(checkpoint::MANIFEST),
        ];
        v.extend(PLOT_FILES.iter().map(|f| self.plots().join(f)));
        v
    }
}

pub const PLOT_FILES: [&str; 4] = ["stage1_losses.png", "stage2_losses.png", "latent_scatter.png", "pseudo_grid.png"];

/// Train/test splits of every configured domain.
pub struct Domains {
    pub source_train: DatasetHandle,
    pub source_test: DatasetHandle,
    pub target_train: Vec<DatasetHandle>,
    pub target_test: Vec<DatasetHandle>,
}

impl Domains {
    /// Target training images without labels, in configured order.
    pub fn target_views(&self) -> Vec<UnlabeledSet> {
        self.target_train.iter().map(DatasetHandle::unlabeled).collect()
    }
}

pub fn prepare_domains(cfg: &ExperimentConfig) -> Result<Domains> {
    let split = |src| -> Result<(DatasetHandle, DatasetHandle)> {
        let d = data::load_domain(cfg, src)?;
        data::split_domain(cfg, &d, src.domain_id())
    };
    let (source_train, source_test) = split(&cfg.source)?;
    let mut target_train = Vec::new();
    let mut target_test = Vec::new();
    for t in &cfg.targets {
        let (a, b) = split(t)?;
        target_train.push(a);
        target_test.push(b);
    }
    Ok(Domains {
        source_train,
        source_test,
        target_train,
        target_test,
    })
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stream)
}

/// Source training split oversampled to balance, shared by stage 1 and the baseline.
pub fn balanced_source(cfg: &ExperimentConfig, d: &Domains) -> Result<DatasetHandle> {
    Ok(resample_balance(&d.source_train, stream_seed(cfg.seed, 1))?)
}

/// Write `config.toml` into the run directory.
pub fn write_config_copy(cfg: &ExperimentConfig, run: &RunPaths) -> Result<()> {
    std::fs::create_dir_all(&run.root).with_context(|| format!("creating {}", run.root.display()))?;
    std::fs::write(run.config(), cfg.to_toml()?).context("writing config copy")
}

fn epoch_means(history: &[LossBreakdown], steps: usize) -> String {
    let tail = &history[history.len().saturating_sub(steps)..];
    STAGE1_COMPONENTS
        .iter()
        .map(|c| {
            let m = tail.iter().filter_map(|b| b.get(c)).sum::<f64>() / tail.len().max(1) as f64;
            format!("{} {:.4}", c, m)
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Stage 1 with a checkpoint per epoch, resuming from the newest checkpoint
/// in the run directory when `resume` is set.
pub fn run_stage1(cfg: &ExperimentConfig, d: &Domains, run: &RunPaths, resume: bool) -> Result<Stage1State> {
    let topo = cfg.topology()?;
    let source = balanced_source(cfg, d)?;
    let state = match checkpoint::latest_epoch(&run.root).filter(|_| resume) {
        Some(k) if k <= cfg.stage_one.epochs => {
            info!("resuming stage 1 after epoch {}", k);
            let s = checkpoint::load_stage1_state(&checkpoint::epoch_dir(&run.root, k), Stage1Optimizers::new(&cfg.stage_one))?;
            if s.bundle.shape != cfg.stage_one.shape || s.bundle.n_targets() != topo.effective_targets() {
                bail!("checkpoint epoch_{} does not match the configured bundle", k);
            }
            Some(s)
        }
        Some(k) => bail!("checkpoint epoch_{} is past the configured {} epochs", k, cfg.stage_one.epochs),
        None => None,
    };
    let steps = cdftn_core::trainer::steps_per_epoch(source.len(), cfg.stage_one.batch_size);
    let started = Instant::now();
    let mut on_epoch = |s: &Stage1State| -> cdftn_core::Result<()> {
        let dir = checkpoint::epoch_dir(&run.root, s.epochs_done);
        checkpoint::save_stage1_state(s, &dir).map_err(|e| cdftn_core::Error::InvalidArgument(format!("checkpoint: {:#}", e)))?;
        if s.epochs_done > 1 {
            prune_optimizer_state(&checkpoint::epoch_dir(&run.root, s.epochs_done - 1));
        }
        info!(
            "stage 1 epoch {}/{}: {} ({:.0}s)",
            s.epochs_done,
            cfg.stage_one.epochs,
            epoch_means(&s.history, steps),
            started.elapsed().as_secs_f64()
        );
        Ok(())
    };
    let state = train_stage1(&source, &d.target_views(), &cfg.stage_one, &topo, state, &mut on_epoch)?;
    records::write_loss_csv(&run.stage1_losses(), &state.history, &STAGE1_COMPONENTS)?;
    Ok(state)
}

/// Older epochs keep their weights; only the newest keeps optimiser moments.
fn prune_optimizer_state(dir: &Path) {
    for f in ["optimizer.bin", "optimizer.json"] {
        let _ = std::fs::remove_file(dir.join(f));
    }
}

/// Translate every source training image into each target style.
pub fn run_synthesis(cfg: &ExperimentConfig, bundle: &ModelBundle<f32>, d: &Domains, run: &RunPaths) -> Result<PseudoLabeledSet> {
    let topo = cfg.topology()?;
    let slots = target_slots(&d.target_views(), &topo)?;
    let pseudo = synthesize_pseudo(bundle, &d.source_train, &slots, cfg.synthesis_multiplicity, SCORE_BATCH)?;
    save_pseudo(&pseudo, &run.pseudo())?;
    info!("synthesised {} pseudo-labeled images", pseudo.len());
    Ok(pseudo)
}

const PSEUDO_IMAGES: &str = "images.bin";
const PSEUDO_INDEX: &str = "index.csv";

#[derive(Debug, Serialize, Deserialize)]
struct PseudoRow {
    index: usize,
    label: Label,
    source_index: usize,
    target_slot: usize,
    target_domain: u32,
    channels: usize,
    height: usize,
    width: usize,
}

/// Images as little-endian f32 in `images.bin`, labels and provenance in `index.csv`.
pub fn save_pseudo(p: &PseudoLabeledSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    let mut w = csv::Writer::from_path(dir.join(PSEUDO_INDEX))?;
    for (i, ((img, &label), prov)) in p.images.iter().zip(&p.labels).zip(&p.provenance).enumerate() {
        for v in img.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let s = img.shape();
        w.serialize(PseudoRow {
            index: i,
            label,
            source_index: prov.source_index,
            target_slot: prov.target_slot,
            target_domain: prov.target_domain,
            channels: s[0],
            height: s[1],
            width: s[2],
        })?;
    }
    w.flush()?;
    std::fs::write(dir.join(PSEUDO_IMAGES), bytes)?;
    Ok(())
}

pub fn load_pseudo(dir: &Path) -> Result<PseudoLabeledSet> {
    let bytes = std::fs::read(dir.join(PSEUDO_IMAGES)).with_context(|| format!("reading {}", dir.display()))?;
    let mut r = csv::Reader::from_path(dir.join(PSEUDO_INDEX))?;
    let mut out = PseudoLabeledSet {
        images: Vec::new(),
        labels: Vec::new(),
        provenance: Vec::new(),
    };
    let mut at = 0usize;
    for row in r.deserialize() {
        let row: PseudoRow = row?;
        let n = row.channels * row.height * row.width;
        if at + 4 * n > bytes.len() {
            bail!("pseudo image payload is truncated at image {}", row.index);
        }
        let data = bytes[at..at + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        at += 4 * n;
        out.images.push(Tensor::new(&[row.channels, row.height, row.width], data)?);
        out.labels.push(row.label);
        out.provenance.push(Provenance {
            source_index: row.source_index,
            target_slot: row.target_slot,
            target_domain: row.target_domain,
        });
    }
    if at != bytes.len() {
        bail!("pseudo image payload has {} trailing bytes", bytes.len() - at);
    }
    Ok(out)
}

/// Train the classifier on balanced pseudo-labeled images and the source-only
/// baseline on balanced source images.
pub fn run_classifiers(
    cfg: &ExperimentConfig,
    pseudo: &PseudoLabeledSet,
    d: &Domains,
    run: &RunPaths,
) -> Result<(ImageClassifier<f32>, ImageClassifier<f32>)> {
    let (h, w) = (cfg.stage_one.shape.height, cfg.stage_one.shape.width);
    let train = resample_balance(&pseudo.to_dataset(), stream_seed(cfg.seed, 2))?;
    let (model, history) = train_stage2(&train, &cfg.stage_two, h, w)?;
    records::write_loss_csv(&run.stage2_losses(), &history, &STAGE2_COMPONENTS)?;
    checkpoint::save_classifier(&model, &run.cdftn_model())?;
    info!("trained classifier on {} translated images", train.len());
    let source = balanced_source(cfg, d)?;
    let (baseline, history) = train_stage2(&source, &cfg.stage_two, h, w)?;
    records::write_loss_csv(&run.baseline_losses(), &history, &STAGE2_COMPONENTS)?;
    checkpoint::save_classifier(&baseline, &run.baseline_model())?;
    info!("trained source-only baseline on {} images", source.len());
    Ok((model, baseline))
}

/// Evaluation rows for both classifiers on every target test split.
pub fn evaluate_models(
    cfg: &ExperimentConfig,
    d: &Domains,
    models: &[(&str, &ImageClassifier<f32>)],
) -> Result<Vec<EvalRow>> {
    let topo = cfg.topology()?;
    let mut rows = Vec::new();
    for &(name, model) in models {
        for (spec, test) in cfg.targets.iter().zip(&d.target_test) {
            let scores = score_dataset(model, test, SCORE_BATCH)?;
            let set = ScoreSet::new(scores, test.labels())?;
            let eer = report_at_eer(&set)?;
            let half = report_at(&set, HALF_THRESHOLD)?;
            rows.push(EvalRow::new(topo.mode.name(), name, topo.source, spec.domain_id(), &eer, &half));
        }
    }
    Ok(rows)
}

/// Evaluate saved classifiers, write `eval.csv` and every figure.
pub fn run_evaluation(cfg: &ExperimentConfig, d: &Domains, run: &RunPaths) -> Result<Vec<EvalRow>> {
    let model = checkpoint::load_classifier(&run.cdftn_model()).context("loading the translated-image classifier")?;
    let baseline = checkpoint::load_classifier(&run.baseline_model()).context("loading the baseline classifier")?;
    let rows = evaluate_models(cfg, d, &[("cdftn", &model), ("baseline", &baseline)])?;
    records::write_eval_csv(&run.eval(), &rows)?;
    let bundle = checkpoint::load_bundle(&run.final_bundle(cfg)).context("loading the final stage-1 checkpoint")?;
    write_figures(cfg, &bundle, d, run)?;
    Ok(rows)
}

fn first_n(d: &DatasetHandle, n: usize) -> Vec<usize> {
    (0..d.len().min(n)).collect()
}

fn flatten_rows(t: &Tensor<f32>) -> (Vec<f64>, usize, usize) {
    let n = t.shape()[0];
    let per = t.numel() / n.max(1);
    (t.data().iter().map(|&v| f64::from(v)).collect(), n, per)
}

/// Loss curves, the pre/post-translation latent scatter and the image grid.
pub fn write_figures(cfg: &ExperimentConfig, bundle: &ModelBundle<f32>, d: &Domains, run: &RunPaths) -> Result<()> {
    let dir = run.plots();
    std::fs::create_dir_all(&dir)?;
    let s1 = records::read_loss_csv(&run.stage1_losses())?;
    plots::loss_curves(&dir.join(PLOT_FILES[0]), &s1, &STAGE1_COMPONENTS)?;
    let s2 = records::read_loss_csv(&run.stage2_losses())?;
    let shown: Vec<&str> = STAGE2_COMPONENTS
        .iter()
        .copied()
        .filter(|c| s2.iter().any(|b| b.get(c).is_some_and(|v| v != 0.0)))
        .collect();
    plots::loss_curves(&dir.join(PLOT_FILES[1]), &s2, if shown.is_empty() { &STAGE2_COMPONENTS[..1] } else { &shown })?;

    // Target slot of each configured target: pooled targets share slot 1.
    let slot_of = |i: usize| if cfg.mode == cdftn_core::trainer::Mode::SS2MT { i + 1 } else { 1 };
    let src_idx = first_n(&d.source_test, FIGURE_SAMPLES);
    let xs = d.source_test.batch(&src_idx)?;
    let zl_s = bundle.encode(&xs, DomainRole::Source, EncoderKind::Liveness)?;
    let zc_s = bundle.encode(&xs, DomainRole::Source, EncoderKind::Content)?;
    let mut pre: Vec<(Tensor<f32>, usize, Vec<Label>)> = vec![(zl_s.clone(), 0, d.source_test.labels()[..src_idx.len()].to_vec())];
    let mut post = Vec::new();
    let mut grid = vec![(0..GRID_COLUMNS.min(src_idx.len())).map(|i| d.source_test.samples()[i].image.clone()).collect::<Vec<_>>()];
    for (i, test) in d.target_test.iter().enumerate() {
        let role = DomainRole::Target(slot_of(i));
        let idx = first_n(test, src_idx.len());
        let xt = test.batch(&idx)?;
        let labels: Vec<Label> = test.labels()[..idx.len()].to_vec();
        let zl_t = bundle.encode(&xt, role, EncoderKind::Liveness)?;
        let zc_t = bundle.encode(&xt, role, EncoderKind::Content)?;
        let m = idx.len().min(src_idx.len());
        let to_target = bundle.generate(&zl_s.slice_batch(0, m)?, &zc_t.slice_batch(0, m)?, role)?;
        let to_source = bundle.generate(&zl_t.slice_batch(0, m)?, &zc_s.slice_batch(0, m)?, DomainRole::Source)?;
        post.push((bundle.encode(&to_target, role, EncoderKind::Liveness)?, 0, d.source_test.labels()[..m].to_vec()));
        post.push((bundle.encode(&to_source, DomainRole::Source, EncoderKind::Liveness)?, i + 1, labels[..m].to_vec()));
        pre.push((zl_t, i + 1, labels));
        let k = GRID_COLUMNS.min(m);
        grid.push((0..k).map(|j| to_target.slice_batch(j, 1).and_then(|t| t.reshape(&[3, cfg.image_size(), cfg.image_size()]))).collect::<cdftn_core::Result<Vec<_>>>()?);
        grid.push((0..k).map(|j| test.samples()[j].image.clone()).collect());
    }
    let panel = |sets: &[(Tensor<f32>, usize, Vec<Label>)]| -> Result<Vec<ScatterPoint>> {
        let parts: Vec<&Tensor<f32>> = sets.iter().map(|s| &s.0).collect();
        let all = Tensor::concat_batch(&parts)?;
        let (flat, n, per) = flatten_rows(&all);
        let xy = project_2d(&flat, n, per)?;
        let meta = sets.iter().flat_map(|(_, g, ls)| ls.iter().map(move |l| (*g, *l == Label::Live)));
        Ok(xy.into_iter().zip(meta).map(|(xy, (group, filled))| ScatterPoint { xy, group, filled }).collect())
    };
    plots::scatter_panels(&dir.join(PLOT_FILES[2]), &[panel(&pre)?, panel(&post)?])?;
    plots::image_grid(&dir.join(PLOT_FILES[3]), &grid)?;
    Ok(())
}

/// Outcome of one stage in the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: String,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: String,
    pub stages: Vec<StageRecord>,
    /// Relative paths of the produced artifacts.
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn total_seconds(&self) -> f64 {
        self.stages.iter().map(|s| s.seconds).sum()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Check that a run directory holds every artifact of a completed run.
pub fn verify_run(cfg: &ExperimentConfig, run: &RunPaths) -> Result<()> {
    let missing: Vec<String> = run
        .required(cfg)
        .into_iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        bail!("run directory is incomplete, missing: {}", missing.join(", "));
    }
    Ok(())
}

fn run_stage<T>(stages: &mut Vec<StageRecord>, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    info!("stage `{}` started", name);
    let t = Instant::now();
    let out = f();
    stages.push(StageRecord {
        name: name.into(),
        status: if out.is_ok() { "ok" } else { "aborted" }.into(),
        seconds: t.elapsed().as_secs_f64(),
        error: out.as_ref().err().map(|e| format!("{:#}", e)),
    });
    out
}

fn write_manifest(cfg: &ExperimentConfig, run: &RunPaths, stages: Vec<StageRecord>, ok: bool) -> Result<RunManifest> {
    let files = run
        .required(cfg)
        .into_iter()
        .filter(|p| p.is_file())
        .filter_map(|p| p.strip_prefix(&run.root).ok().map(|r| r.display().to_string()))
        .collect();
    let m = RunManifest {
        status: if ok { "completed" } else { "aborted" }.into(),
        stages,
        files,
    };
    std::fs::write(run.manifest(), serde_json::to_string_pretty(&m)?)?;
    Ok(m)
}

/// Every stage in order: split, balance, stage 1, synthesis, stage 2 and the
/// baseline, evaluation. Writes `run_manifest.json` whether or not a stage aborts.
pub fn run_pipeline(cfg: &ExperimentConfig, resume: bool) -> Result<(RunManifest, Vec<EvalRow>)> {
    cfg.validate()?;
    let run = RunPaths::new(&cfg.output_dir);
    write_config_copy(cfg, &run)?;
    let mut stages = Vec::new();
    let result = (|| -> Result<Vec<EvalRow>> {
        let d = run_stage(&mut stages, "prepare-data", || prepare_domains(cfg))?;
        let state = run_stage(&mut stages, "train", || run_stage1(cfg, &d, &run, resume))?;
        let pseudo = run_stage(&mut stages, "synthesize", || run_synthesis(cfg, &state.bundle, &d, &run))?;
        run_stage(&mut stages, "train-classifier", || run_classifiers(cfg, &pseudo, &d, &run))?;
        let rows = run_stage(&mut stages, "evaluate", || run_evaluation(cfg, &d, &run))?;
        verify_run(cfg, &run)?;
        Ok(rows)
    })();
    let manifest = write_manifest(cfg, &run, stages, result.is_ok())?;
    let rows = result?;
    Ok((manifest, rows))
}

/// Mean AUC over the target rows of one model.
pub fn mean_auc(rows: &[EvalRow], model: &str) -> Result<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.model == model).map(|r| r.auc).collect();
    if v.is_empty() {
        return Err(anyhow!("no evaluation rows for model `{}`", model));
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Markdown summary of an evaluation CSV.
pub fn render_report(rows: &[EvalRow]) -> String {
    let mut s = String::from(
        "| model | topology | source | target | n_live | n_spoof | AUC | HTER@EER | threshold | HTER@0.5 |\n\
         |---|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            r.model, r.topology, r.source, r.target, r.n_live, r.n_spoof, r.auc, r.hter, r.threshold, r.hter_at_half
        ));
    }
    let mut models: Vec<&str> = rows.iter().map(|r| r.model.as_str()).collect();
    models.dedup();
    for m in models {
        if let Ok(a) = mean_auc(rows, m) {
            s.push_str(&format!("\nmean target AUC ({}): {:.4}", m, a));
        }
    }
    s.push('\n');
    s
}
