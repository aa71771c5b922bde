//! CSV records: loss histories and evaluation rows.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use cdftn_core::eval::EvalReport;
use cdftn_core::losses::LossBreakdown;
use serde::{Deserialize, Serialize};

/// One row per step: `step`, one column per component, `total`.
/// Values use the shortest representation that parses back exactly.
pub fn write_loss_csv(path: &Path, history: &[LossBreakdown], components: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header = vec!["step"];
    header.extend_from_slice(components);
    header.push("total");
    w.write_record(&header)?;
    for (step, b) in history.iter().enumerate() {
        let mut row = vec![step.to_string()];
        for c in components {
            let v = b
                .get(c)
                .ok_or_else(|| anyhow!("step {} has no `{}` component", step, c))?;
            row.push(v.to_string());
        }
        row.push(b.total.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossBreakdown>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header.len() < 2 || header[0] != "step" || header[header.len() - 1] != "total" {
        bail!("{} is not a loss history", path.display());
    }
    let names = &header[1..header.len() - 1];
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |j: usize| -> Result<f64> {
            rec.get(j)
                .ok_or_else(|| anyhow!("row {} is short", i))?
                .parse()
                .with_context(|| format!("row {} column {} of {}", i, j, path.display()))
        };
        let mut b = LossBreakdown::new();
        for (j, n) in names.iter().enumerate() {
            b.set(n, num(j + 1)?);
        }
        b.total = num(header.len() - 1)?;
        out.push(b);
    }
    Ok(out)
}

/// One evaluation CSV row. The leading columns follow [`EvalReport`]; the
/// `*_at_half` columns use the fixed threshold 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub topology: String,
    pub source: u32,
    pub target: u32,
    pub n_live: usize,
    pub n_spoof: usize,
    pub threshold: f64,
    pub frr: f64,
    pub far: f64,
    pub hter: f64,
    pub auc: f64,
    /// `cdftn` (classifier trained on translated images) or `baseline`.
    pub model: String,
    pub frr_at_half: f64,
    pub far_at_half: f64,
    pub hter_at_half: f64,
}

impl EvalRow {
    pub fn new(topology: &str, model: &str, source: u32, target: u32, eer: &EvalReport, half: &EvalReport) -> Self {
        Self {
            topology: topology.into(),
            source,
            target,
            n_live: eer.n_live,
            n_spoof: eer.n_spoof,
            threshold: eer.threshold,
            frr: eer.frr,
            far: eer.far,
            hter: eer.hter,
            auc: eer.auc,
            model: model.into(),
            frr_at_half: half.frr,
            far_at_half: half.far,
            hter_at_half: half.hter,
        }
    }
}

pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize()
        .map(|row| row.with_context(|| format!("parsing {}", path.display())))
        .collect()
}
