//! Replicated benchmark runs and their aggregation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use pamsurv::synth::{generate_dataset, write_dataset, SimConfig};
use pamsurv::Result;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ModelKind};
use crate::evaluate::{evaluate, write_evaluation, Evaluation, QUARTILES};
use crate::models::{fit_baseline, fit_correct, fit_deep, FittedModel};
use pamsurv::eval::kaplan_meier;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub seed: u64,
    pub converged: bool,
    /// Set when the replicate failed; no scores are recorded then.
    pub error: Option<String>,
    pub evaluation: Option<Evaluation>,
}

/// One row of `table2.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: ModelKind,
    pub quartile: String,
    pub n: usize,
    pub mean_ibs: f64,
    pub mean_rel_ibs: Option<f64>,
    pub sd_rel_ibs: Option<f64>,
    pub mean_abs_rel_ibs: Option<f64>,
    pub sd_abs_rel_ibs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seeds: Vec<u64>,
    pub replicates: Vec<ReplicateOutcome>,
    pub table: Vec<TableRow>,
    pub all_converged: bool,
}

impl ExperimentReport {
    pub fn failed(&self) -> bool {
        !self.all_converged || self.replicates.iter().any(|r| r.error.is_some())
    }

    pub fn row(&self, model: ModelKind, quartile: &str) -> Option<&TableRow> {
        self.table.iter().find(|r| r.model == model && r.quartile == quartile)
    }
}

/// Seed of replicate `r`; the trainer seed is offset by the same amount.
pub fn replicate_seed(cfg: &ExperimentConfig, r: usize) -> u64 {
    cfg.sim.seed + r as u64
}

/// Simulates, fits and evaluates one replicate, writing its files under `dir`.
pub fn run_replicate(cfg: &ExperimentConfig, r: usize, dir: &Path) -> Result<(Vec<FittedModel>, Evaluation)> {
    let seed = replicate_seed(cfg, r);
    let sim = SimConfig {
        seed,
        ..cfg.sim.clone()
    };
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.train.seed.wrapping_add(seed);
    std::fs::create_dir_all(dir)?;
    let data = generate_dataset(&sim)?;
    if cfg.save_datasets {
        write_dataset(dir.join("data"), &sim, &data)?;
    }
    let models = cfg.model_list();
    let mut fitted = Vec::new();
    // the baseline PAM doubles as the DeepPAM warm start
    let mut baseline = None;
    for &kind in &models {
        let m = match kind {
            ModelKind::Km => FittedModel::Km {
                curve: kaplan_meier(&data.train)?,
            },
            ModelKind::PamBaseline => {
                let fit = fit_baseline(&data, cfg)?;
                baseline = Some(fit.clone());
                FittedModel::PamBaseline { fit }
            }
            ModelKind::PamCorrect => FittedModel::PamCorrect {
                fit: fit_correct(&data, cfg)?,
            },
            ModelKind::Deeppam => {
                let warm = match baseline.take() {
                    Some(w) => w,
                    None => fit_baseline(&data, cfg)?,
                };
                let model = fit_deep(&data, &train_cfg, &warm)?;
                let mut log = File::create(dir.join("deeppam_train_log.csv"))?;
                model.write_train_log(&mut log)?;
                FittedModel::Deeppam { model }
            }
        };
        m.save(dir.join(format!("{kind}.json")))?;
        fitted.push(m);
    }
    let eval = evaluate(&data.train, &data.test, &sim, &fitted)?;
    write_evaluation(&eval, dir)?;
    Ok((fitted, eval))
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Mean and sample standard deviation across completed replicates.
pub fn aggregate(models: &[ModelKind], evals: &[&Evaluation]) -> Vec<TableRow> {
    let mut rows = Vec::new();
    for &model in models {
        for (q, quartile) in QUARTILES.iter().enumerate() {
            let scores: Vec<_> = evals.iter().filter_map(|e| e.score(model)).collect();
            if scores.is_empty() {
                continue;
            }
            let ibs: Vec<f64> = scores.iter().map(|s| s.ibs[q]).collect();
            let rel: Option<Vec<f64>> = scores.iter().map(|s| s.rel_ibs.map(|r| r[q])).collect();
            let (rel_stats, abs_stats) = match &rel {
                Some(r) => {
                    let abs: Vec<f64> = r.iter().map(|v| v.abs()).collect();
                    (Some(mean_sd(r)), Some(mean_sd(&abs)))
                }
                None => (None, None),
            };
            rows.push(TableRow {
                model,
                quartile: quartile.to_string(),
                n: scores.len(),
                mean_ibs: mean_sd(&ibs).0,
                mean_rel_ibs: rel_stats.map(|s| s.0),
                sd_rel_ibs: rel_stats.map(|s| s.1),
                mean_abs_rel_ibs: abs_stats.map(|s| s.0),
                sd_abs_rel_ibs: abs_stats.map(|s| s.1),
            });
        }
    }
    rows
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_table(rows: &[TableRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record([
        "model",
        "quartile",
        "n",
        "mean_ibs",
        "mean_rel_ibs",
        "sd_rel_ibs",
        "mean_abs_rel_ibs",
        "sd_abs_rel_ibs",
    ])?;
    for r in rows {
        w.write_record([
            r.model.name().to_string(),
            r.quartile.clone(),
            r.n.to_string(),
            format!("{:.6}", r.mean_ibs),
            fmt_opt(r.mean_rel_ibs),
            fmt_opt(r.sd_rel_ibs),
            fmt_opt(r.mean_abs_rel_ibs),
            fmt_opt(r.sd_abs_rel_ibs),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every replicate in order; a failing replicate is recorded and the rest still run.
/// Writes `table2.csv` and `report.json` to the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    let mut replicates = Vec::new();
    for r in 0..cfg.n_replicates {
        let seed = replicate_seed(cfg, r);
        let dir = out.join(format!("replicate_{r:02}"));
        let outcome = match run_replicate(cfg, r, &dir) {
            Ok((fitted, eval)) => ReplicateOutcome {
                replicate: r,
                seed,
                converged: fitted.iter().all(FittedModel::converged),
                error: None,
                evaluation: Some(eval),
            },
            Err(e) => ReplicateOutcome {
                replicate: r,
                seed,
                converged: false,
                error: Some(e.to_string()),
                evaluation: None,
            },
        };
        replicates.push(outcome);
    }
    let evals: Vec<&Evaluation> = replicates.iter().filter_map(|r| r.evaluation.as_ref()).collect();
    let table = aggregate(&cfg.model_list(), &evals);
    write_table(&table, &out.join("table2.csv"))?;
    let report = ExperimentReport {
        seeds: replicates.iter().map(|r| r.seed).collect(),
        all_converged: replicates.iter().all(|r| r.converged),
        replicates,
        table,
    };
    let mut f = BufWriter::new(File::create(out.join("report.json"))?);
    serde_json::to_writer_pretty(&mut f, &report)?;
    f.flush()?;
    Ok(report)
}
