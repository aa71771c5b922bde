//! Checkpoints: a JSON manifest plus one little-endian f32 payload per component.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cdftn_core::losses::LossBreakdown;
use cdftn_core::nets::{ClassifierConfig, ClassifierVariant, ModelBundle, NetConfig, ShapeSpec};
use cdftn_core::optim::{Adam, MomentState};
use cdftn_core::params::{ParamId, ParamStore};
use cdftn_core::trainer::{Stage1Optimizers, Stage1State};
use cdftn_core::nets::ImageClassifier;
use serde::{Deserialize, Serialize};

use crate::records;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentEntry {
    pub name: String,
    pub file: String,
    pub tensors: Vec<TensorEntry>,
}

/// What a checkpoint directory holds and how to rebuild its networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Bundle {
        shape: ShapeSpec,
        net: NetConfig,
        n_targets: usize,
    },
    Classifier {
        variant: ClassifierVariant,
        height: usize,
        width: usize,
        config: ClassifierConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelSpec,
    pub components: Vec<ComponentEntry>,
}

fn component_file(name: &str) -> String {
    format!("{}.bin", name.replace(['/', '\\'], "_"))
}

fn write_components(dir: &Path, store: &ParamStore<f32>, groups: &[(String, Vec<ParamId>)]) -> Result<Vec<ComponentEntry>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut out = Vec::new();
    for (name, ids) in groups {
        let mut bytes = Vec::new();
        let mut tensors = Vec::new();
        for &id in ids {
            let e = store.entry(id);
            for v in e.value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                dtype: DTYPE.into(),
                trainable: e.trainable,
            });
        }
        let file = component_file(name);
        std::fs::write(dir.join(&file), bytes).with_context(|| format!("writing component `{}`", name))?;
        out.push(ComponentEntry {
            name: name.clone(),
            file,
            tensors,
        });
    }
    Ok(out)
}

fn read_components(dir: &Path, manifest: &Manifest, store: &mut ParamStore<f32>, groups: &[(String, Vec<ParamId>)]) -> Result<()> {
    if manifest.components.len() != groups.len() {
        bail!(
            "checkpoint lists {} components, the model has {}",
            manifest.components.len(),
            groups.len()
        );
    }
    for ((name, ids), entry) in groups.iter().zip(&manifest.components) {
        let fail = |msg: String| anyhow!("component `{}`: {}", name, msg);
        if &entry.name != name {
            return Err(fail(format!("manifest has `{}` in its place", entry.name)));
        }
        if entry.tensors.len() != ids.len() {
            return Err(fail(format!("expected {} tensors, manifest lists {}", ids.len(), entry.tensors.len())));
        }
        let bytes = std::fs::read(dir.join(&entry.file)).map_err(|e| fail(format!("cannot read {}: {}", entry.file, e)))?;
        let expected: usize = ids.iter().map(|&id| store.get(id).numel() * 4).sum();
        if bytes.len() != expected {
            return Err(fail(format!("payload is {} bytes, expected {}", bytes.len(), expected)));
        }
        let mut at = 0;
        for (&id, t) in ids.iter().zip(&entry.tensors) {
            let e = store.entry(id);
            if t.name != e.name || t.shape != e.value.shape() || t.dtype != DTYPE {
                return Err(fail(format!(
                    "tensor `{}` {:?} {} does not match model tensor `{}` {:?}",
                    t.name,
                    t.shape,
                    t.dtype,
                    e.name,
                    e.value.shape()
                )));
            }
            let p = store.get_mut(id);
            for v in p.data_mut() {
                *v = f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
                at += 4;
            }
            if !p.all_finite() {
                return Err(fail(format!("tensor `{}` holds non-finite values", t.name)));
            }
        }
    }
    Ok(())
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(m)?;
    std::fs::write(dir.join(MANIFEST), text).with_context(|| format!("writing manifest in {}", dir.display()))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if m.format_version != FORMAT_VERSION {
        bail!("unsupported checkpoint format version {}", m.format_version);
    }
    Ok(m)
}

fn bundle_groups(b: &ModelBundle<f32>) -> Vec<(String, Vec<ParamId>)> {
    b.components().iter().map(|c| (c.name.clone(), c.params.clone())).collect()
}

pub fn save_bundle(b: &ModelBundle<f32>, dir: &Path) -> Result<()> {
    let groups = bundle_groups(b);
    let covered: usize = groups.iter().map(|g| g.1.len()).sum();
    if covered != b.store.len() {
        bail!("bundle components cover {} of {} tensors", covered, b.store.len());
    }
    let components = write_components(dir, &b.store, &groups)?;
    write_manifest(
        dir,
        &Manifest {
            format_version: FORMAT_VERSION,
            model: ModelSpec::Bundle {
                shape: b.shape,
                net: b.config,
                n_targets: b.n_targets(),
            },
            components,
        },
    )
}

pub fn load_bundle(dir: &Path) -> Result<ModelBundle<f32>> {
    let m = read_manifest(dir)?;
    let ModelSpec::Bundle { shape, net, n_targets } = m.model else {
        bail!("{} holds a classifier, not a translation bundle", dir.display());
    };
    let mut b = ModelBundle::<f32>::new(shape, net, n_targets, 0)?;
    let groups = bundle_groups(&b);
    read_components(dir, &m, &mut b.store, &groups)?;
    Ok(b)
}

const CLASSIFIER_COMPONENT: &str = "classifier";

pub fn save_classifier(c: &ImageClassifier<f32>, dir: &Path) -> Result<()> {
    let ids: Vec<ParamId> = c.store.iter().map(|(id, _)| id).collect();
    let components = write_components(dir, &c.store, &[(CLASSIFIER_COMPONENT.into(), ids)])?;
    write_manifest(
        dir,
        &Manifest {
            format_version: FORMAT_VERSION,
            model: ModelSpec::Classifier {
                variant: c.variant,
                height: c.height,
                width: c.width,
                config: c.config.clone(),
            },
            components,
        },
    )
}

pub fn load_classifier(dir: &Path) -> Result<ImageClassifier<f32>> {
    let m = read_manifest(dir)?;
    let ModelSpec::Classifier {
        variant,
        height,
        width,
        config,
    } = m.model.clone()
    else {
        bail!("{} holds a translation bundle, not a classifier", dir.display());
    };
    let mut c = ImageClassifier::<f32>::new(variant, height, width, config, 0)?;
    let ids: Vec<ParamId> = c.store.iter().map(|(id, _)| id).collect();
    read_components(dir, &m, &mut c.store, &[(CLASSIFIER_COMPONENT.into(), ids)])?;
    Ok(c)
}

/// Per-group optimiser bookkeeping; moments live in `optimizer.bin` as
/// little-endian f64, `m` then `v`, in the listed tensor order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerGroup {
    name: String,
    config: cdftn_core::optim::AdamConfig,
    tensors: Vec<(String, u64)>,
}

const OPTIMIZER_INDEX: &str = "optimizer.json";
const OPTIMIZER_PAYLOAD: &str = "optimizer.bin";
const HISTORY: &str = "history.csv";
const STATE: &str = "state.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateInfo {
    epochs_done: usize,
    bundle_checksum: u64,
}

fn save_optimizers(opt: &Stage1Optimizers, store: &ParamStore<f32>, dir: &Path) -> Result<()> {
    let mut groups = Vec::new();
    let mut bytes = Vec::new();
    for (name, adam) in opt.groups() {
        let mut tensors = Vec::new();
        for (id, st) in adam.state() {
            tensors.push((store.entry(*id).name.clone(), st.step));
            for v in st.m.iter().chain(&st.v) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        groups.push(OptimizerGroup {
            name: name.into(),
            config: adam.config,
            tensors,
        });
    }
    std::fs::write(dir.join(OPTIMIZER_INDEX), serde_json::to_string_pretty(&groups)?)?;
    std::fs::write(dir.join(OPTIMIZER_PAYLOAD), bytes)?;
    Ok(())
}

fn load_optimizers(store: &ParamStore<f32>, dir: &Path, opt: &mut Stage1Optimizers) -> Result<()> {
    let text = std::fs::read_to_string(dir.join(OPTIMIZER_INDEX)).context("reading optimizer index")?;
    let groups: Vec<OptimizerGroup> = serde_json::from_str(&text).context("parsing optimizer index")?;
    let bytes = std::fs::read(dir.join(OPTIMIZER_PAYLOAD)).context("reading optimizer payload")?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<Vec<f64>> {
        if at + 8 * n > bytes.len() {
            bail!("optimizer payload is truncated");
        }
        let v = bytes[at..at + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        at += 8 * n;
        Ok(v)
    };
    for (name, adam) in opt.groups_mut() {
        let g = groups
            .iter()
            .find(|g| g.name == name)
            .ok_or_else(|| anyhow!("optimizer group `{}` missing from checkpoint", name))?;
        let mut state = BTreeMap::new();
        for (tensor, step) in &g.tensors {
            let id = store
                .find(tensor)
                .ok_or_else(|| anyhow!("optimizer group `{}` refers to unknown tensor `{}`", name, tensor))?;
            let n = store.get(id).numel();
            let m = take(n)?;
            let v = take(n)?;
            state.insert(id, MomentState { step: *step, m, v });
        }
        *adam = Adam::new(g.config);
        adam.set_state(state);
    }
    if at != bytes.len() {
        bail!("optimizer payload has {} trailing bytes", bytes.len() - at);
    }
    Ok(())
}

/// Directory of the checkpoint written after epoch `k` (1-based).
pub fn epoch_dir(run: &Path, k: usize) -> PathBuf {
    run.join("ckpt").join(format!("epoch_{}", k))
}

/// Bundle, optimiser moments and loss history after a completed epoch.
pub fn save_stage1_state(state: &Stage1State, dir: &Path) -> Result<()> {
    save_bundle(&state.bundle, dir)?;
    save_optimizers(&state.optimizers, &state.bundle.store, dir)?;
    records::write_loss_csv(&dir.join(HISTORY), &state.history, &cdftn_core::losses::STAGE1_COMPONENTS)?;
    let info = StateInfo {
        epochs_done: state.epochs_done,
        bundle_checksum: state.bundle.checksum(),
    };
    std::fs::write(dir.join(STATE), serde_json::to_string_pretty(&info)?)?;
    Ok(())
}

/// Inverse of [`save_stage1_state`]; `fresh` supplies optimiser defaults.
pub fn load_stage1_state(dir: &Path, fresh: Stage1Optimizers) -> Result<Stage1State> {
    let bundle = load_bundle(dir)?;
    let info: StateInfo = serde_json::from_str(&std::fs::read_to_string(dir.join(STATE)).context("reading stage-1 state")?)?;
    if info.bundle_checksum != bundle.checksum() {
        bail!("bundle parameters in {} do not match the recorded checksum", dir.display());
    }
    let mut optimizers = fresh;
    load_optimizers(&bundle.store, dir, &mut optimizers)?;
    let history: Vec<LossBreakdown> = records::read_loss_csv(&dir.join(HISTORY))?;
    Ok(Stage1State {
        bundle,
        optimizers,
        epochs_done: info.epochs_done,
        history,
    })
}

/// Highest `k` with a complete `ckpt/epoch_{k}` directory.
pub fn latest_epoch(run: &Path) -> Option<usize> {
    let entries = std::fs::read_dir(run.join("ckpt")).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let k: usize = name.strip_prefix("epoch_")?.parse().ok()?;
            e.path().join(STATE).is_file().then_some(k)
        })
        .max()
}
