//! Scoring fitted models on the test split.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use pamsurv::eval::{censoring_km, integrated_brier, quantile, quartile_horizons, relative_ibs, BrierResult};
use pamsurv::synth::{SimConfig, N_CLASSES};
use pamsurv::{Error, Result, SurvivalRecord64};
use serde::{Deserialize, Serialize};

use crate::config::ModelKind;
use crate::models::FittedModel;

pub const QUARTILES: [&str; 3] = ["q25", "q50", "q75"];
/// Time at which between-class log-hazard offsets are read off.
pub const OFFSET_TIME: f64 = 4.0;
const HAZARD_GRID_POINTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub model: ModelKind,
    pub ibs: [f64; 3],
    /// Signed relative IBS in percent against `pam_correct`, when it was evaluated.
    pub rel_ibs: Option<[f64; 3]>,
    /// Subjects dropped for zero censoring weight, per horizon.
    pub dropped: [usize; 3],
    /// `median(log h | class k) - median(log h | class 0)` at [`OFFSET_TIME`] for k = 1, 2.
    pub class_offsets: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardRow {
    pub class: u8,
    pub t: f64,
    pub q05: f64,
    pub median: f64,
    pub q95: f64,
    /// Median true log-hazard over the class's test subjects.
    pub true_hazard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub horizons: [f64; 3],
    pub horizon_basis: String,
    pub scores: Vec<ModelScores>,
    #[serde(skip)]
    pub hazards: Vec<(ModelKind, Vec<HazardRow>)>,
    #[serde(skip)]
    pub brier: Vec<(ModelKind, BrierResult<f64>)>,
}

impl Evaluation {
    pub fn score(&self, model: ModelKind) -> Option<&ModelScores> {
        self.scores.iter().find(|s| s.model == model)
    }
}

fn medians_by_class(test: &[SurvivalRecord64], values: &[f64]) -> Result<Vec<f64>> {
    (0..N_CLASSES)
        .map(|k| {
            let v: Vec<f64> = test
                .iter()
                .zip(values)
                .filter(|(r, _)| r.true_class == Some(k))
                .map(|(_, &v)| v)
                .collect();
            quantile(&v, 0.5)
        })
        .collect()
}

fn hazard_rows(
    test: &[SurvivalRecord64],
    sim: &SimConfig,
    times: &[f64],
    log_h: &[Vec<f64>],
) -> Result<Vec<HazardRow>> {
    let mut rows = Vec::new();
    for class in 0..N_CLASSES {
        let members: Vec<usize> = (0..test.len()).filter(|&i| test[i].true_class == Some(class)).collect();
        if members.is_empty() {
            continue;
        }
        for (k, &t) in times.iter().enumerate() {
            let pred: Vec<f64> = members.iter().map(|&i| log_h[i][k]).collect();
            let truth: Vec<f64> = members
                .iter()
                .map(|&i| {
                    let f = &test[i].features;
                    sim.log_hazard_true(t, f[0], f[1], class)
                })
                .collect();
            rows.push(HazardRow {
                class,
                t,
                q05: quantile(&pred, 0.05)?,
                median: quantile(&pred, 0.5)?,
                q95: quantile(&pred, 0.95)?,
                true_hazard: quantile(&truth, 0.5)?,
            });
        }
    }
    Ok(rows)
}

/// IBS at the three quartile horizons for every model, relative IBS against
/// `pam_correct`, per-class log-hazard summaries and class offsets.
pub fn evaluate(
    train: &[SurvivalRecord64],
    test: &[SurvivalRecord64],
    sim: &SimConfig,
    models: &[FittedModel],
) -> Result<Evaluation> {
    if models.is_empty() {
        return Err(Error::Empty);
    }
    let horizons = quartile_horizons(train)?;
    let cens = censoring_km(train)?;
    let t_max = train.iter().map(|r| r.time).fold(0.0, f64::max);
    let times: Vec<f64> = (1..=HAZARD_GRID_POINTS)
        .map(|k| t_max * k as f64 / HAZARD_GRID_POINTS as f64)
        .collect();
    let has_classes = test.iter().all(|r| r.true_class.is_some());

    let mut scores = Vec::new();
    let mut hazards = Vec::new();
    let mut brier = Vec::new();
    for m in models {
        let curves = m.curves(test)?;
        let mut ibs = [0.0; 3];
        let mut dropped = [0; 3];
        for (q, &tau) in horizons.iter().enumerate() {
            let res = integrated_brier(test, &curves, tau, &cens)?;
            ibs[q] = res.ibs;
            dropped[q] = res.dropped;
            if q == 2 {
                brier.push((m.kind(), res));
            }
        }
        let mut class_offsets = None;
        if has_classes {
            if let Some(log_h) = m.log_hazards(test, &times)? {
                hazards.push((m.kind(), hazard_rows(test, sim, &times, &log_h)?));
                let at = m.log_hazards(test, &[OFFSET_TIME])?.expect("same model kind");
                let flat: Vec<f64> = at.iter().map(|v| v[0]).collect();
                let med = medians_by_class(test, &flat)?;
                class_offsets = Some([med[1] - med[0], med[2] - med[0]]);
            }
        }
        scores.push(ModelScores {
            model: m.kind(),
            ibs,
            rel_ibs: None,
            dropped,
            class_offsets,
        });
    }
    if let Some(reference) = scores.iter().find(|s| s.model == ModelKind::PamCorrect).map(|s| s.ibs) {
        for s in &mut scores {
            s.rel_ibs = Some([
                relative_ibs(s.ibs[0], reference[0])?,
                relative_ibs(s.ibs[1], reference[1])?,
                relative_ibs(s.ibs[2], reference[2])?,
            ]);
        }
    }
    Ok(Evaluation {
        horizons,
        horizon_basis: "quartiles of uncensored training times".into(),
        scores,
        hazards,
        brier,
    })
}

/// Writes `results.csv`, `summary.json`, `hazard_<model>.csv` and `brier_<model>.csv` into `dir`.
pub fn write_evaluation(eval: &Evaluation, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("results.csv"))?;
    w.write_record(["model", "quartile", "tau", "ibs", "rel_ibs"])?;
    for s in &eval.scores {
        for q in 0..3 {
            let rel = s.rel_ibs.map(|r| r[q].to_string()).unwrap_or_default();
            w.write_record([
                s.model.name().to_string(),
                QUARTILES[q].to_string(),
                eval.horizons[q].to_string(),
                s.ibs[q].to_string(),
                rel,
            ])?;
        }
    }
    w.flush()?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("summary.json"))?), eval)?;
    for (kind, rows) in &eval.hazards {
        let mut w = csv::Writer::from_path(dir.join(format!("hazard_{kind}.csv")))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    for (kind, res) in &eval.brier {
        res.write_csv(File::create(dir.join(format!("brier_{kind}.csv")))?)?;
    }
    Ok(())
}
