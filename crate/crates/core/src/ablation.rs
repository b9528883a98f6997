//! Desk-scale ablations on the training set: schedule kind, structure
//! corruption, consensus ensembling, step count and log-SNR shift.

use std::path::{Path, PathBuf};

use candle_core::Device;
use ndarray::Array2;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::DatasetSample;
use crate::error::{Error, Result};
use crate::inference::{gt_of, mask_iou, Predictor, SamplePrediction};
use crate::metrics::{MetricReport, Scores};
use crate::schedule::ScheduleKind;
use crate::trainer::{device_from_env, load_training_set, train_loop};

/// Step counts compared by the `steps` ablation.
pub const STEP_SWEEP: [usize; 4] = [1, 2, 5, 10];
/// Shift values `−2 ln k` compared by the `shift` ablation.
pub const SHIFT_SWEEP: [f64; 4] = [1.0, 2.0, 5.5, 8.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    Snr,
    Sc,
    Cte,
    Steps,
    Shift,
}

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Snr => "snr",
            AblationKind::Sc => "sc",
            AblationKind::Cte => "cte",
            AblationKind::Steps => "steps",
            AblationKind::Shift => "shift",
        }
    }
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snr" => Ok(AblationKind::Snr),
            "sc" => Ok(AblationKind::Sc),
            "cte" => Ok(AblationKind::Cte),
            "steps" => Ok(AblationKind::Steps),
            "shift" => Ok(AblationKind::Shift),
            other => Err(Error::InvalidArgument(format!(
                "unknown ablation `{other}` (expected snr, sc, cte, steps or shift)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub report: MetricReport,
    pub mean_iou: f64,
}

/// Scores a set of maps against the samples' masks.
pub fn score_maps(maps: &[&Array2<f64>], samples: &[DatasetSample]) -> Result<(MetricReport, f64)> {
    if maps.len() != samples.len() {
        return Err(Error::InvalidArgument(format!("{} predictions for {} samples", maps.len(), samples.len())));
    }
    let mut scores = Vec::with_capacity(maps.len());
    let mut iou = 0.0;
    for (map, s) in maps.iter().zip(samples) {
        let gt = gt_of(s);
        scores.push(Scores::compute(map.view(), gt.view())?);
        iou += mask_iou(map, &gt)?;
    }
    Ok((MetricReport::from_scores(&scores)?, iou / samples.len().max(1) as f64))
}

fn row(label: impl Into<String>, maps: &[&Array2<f64>], samples: &[DatasetSample]) -> Result<AblationRow> {
    let (report, mean_iou) = score_maps(maps, samples)?;
    Ok(AblationRow { label: label.into(), report, mean_iou })
}

fn consensus_maps(preds: &[SamplePrediction]) -> Vec<&Array2<f64>> {
    preds.iter().map(|p| &p.mask).collect()
}

fn final_maps(preds: &[SamplePrediction]) -> Vec<&Array2<f64>> {
    preds.iter().map(|p| &p.final_x0).collect()
}

pub fn table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(7);
    let mut out = format!(
        "{:<width$} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "variant", "MAE", "S_alpha", "F_beta_w", "E_phi", "IoU"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<width$} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            r.label, r.report.mae, r.report.s_alpha, r.report.f_beta_w, r.report.e_phi, r.mean_iou
        ));
    }
    out
}

fn train_variant(cfg: &RunConfig, dir: PathBuf, device: &Device) -> Result<Predictor> {
    let mut cfg = cfg.clone();
    cfg.output.dir = dir;
    let path = train_loop(&cfg, None)?;
    Predictor::from_checkpoint(&Checkpoint::load(&path, device)?, None, device.clone())
}

/// Runs one ablation. `base` supplies an already trained model for the
/// sampling-only ablations (`cte`, `steps`); otherwise one is trained.
/// Training runs are written under `<output.dir>/ablate_<kind>/`.
pub fn run_ablation(cfg: &RunConfig, kind: AblationKind, base: Option<&Path>) -> Result<Vec<AblationRow>> {
    let device = device_from_env()?;
    let root = cfg.output.dir.join(format!("ablate_{}", kind.name()));
    let samples = load_training_set(cfg, cfg.data.resolution)?;
    let (mode, seed, batch) = (cfg.sampler.mode, cfg.sampler.seed, cfg.sampler.batch_size);
    let baseline = |dir: &str| -> Result<Predictor> {
        match base {
            Some(path) => Predictor::from_checkpoint(&Checkpoint::load(path, &device)?, None, device.clone()),
            None => train_variant(cfg, root.join(dir), &device),
        }
    };
    let mut rows = Vec::new();
    match kind {
        AblationKind::Cte => {
            let p = baseline("base")?;
            let preds = p.predict(&samples, mode, seed, batch)?;
            rows.push(row("cte", &consensus_maps(&preds), &samples)?);
            rows.push(row("final_x0", &final_maps(&preds), &samples)?);
        }
        AblationKind::Steps => {
            let p = baseline("base")?;
            for t in STEP_SWEEP {
                let preds = p.with_steps(t)?.predict(&samples, mode, seed, batch)?;
                rows.push(row(format!("T={t}"), &consensus_maps(&preds), &samples)?);
            }
        }
        AblationKind::Snr => {
            for (label, kind) in [("snr_shifted", ScheduleKind::SnrShifted), ("cosine", ScheduleKind::Cosine)] {
                let mut c = cfg.clone();
                c.schedule.kind = kind;
                let preds = train_variant(&c, root.join(label), &device)?.predict(&samples, mode, seed, batch)?;
                rows.push(row(label, &consensus_maps(&preds), &samples)?);
            }
        }
        AblationKind::Sc => {
            for (label, enabled) in [("with_sc", true), ("without_sc", false)] {
                let mut c = cfg.clone();
                c.corruption.enabled = enabled;
                let preds = train_variant(&c, root.join(label), &device)?.predict(&samples, mode, seed, batch)?;
                rows.push(row(label, &consensus_maps(&preds), &samples)?);
            }
        }
        AblationKind::Shift => {
            for k in SHIFT_SWEEP {
                let label = format!("shift=-2ln{k}");
                let mut c = cfg.clone();
                c.schedule.kind = ScheduleKind::SnrShifted;
                c.schedule.shift = -2.0 * f64::ln(k);
                let preds = train_variant(&c, root.join(format!("shift_{k}")), &device)?.predict(&samples, mode, seed, batch)?;
                rows.push(row(label, &consensus_maps(&preds), &samples)?);
            }
        }
    }
    Ok(rows)
}
