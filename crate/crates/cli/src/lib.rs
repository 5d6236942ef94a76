//! Experiment harness: simulate the point-cloud survival benchmark, fit KM,
//! PAM and DeepPAM models, score them with the integrated Brier score and
//! aggregate replicated runs.

pub mod config;
pub mod evaluate;
pub mod experiment;
pub mod models;

use std::fs::File;
use std::path::{Path, PathBuf};

use pamsurv::synth::{generate_dataset, read_dataset, write_dataset, Manifest, SimConfig};
use pamsurv::Result;

pub use config::{ExperimentConfig, ModelKind};
pub use evaluate::{evaluate, write_evaluation, Evaluation, ModelScores};
pub use experiment::{run_experiment, ExperimentReport};
pub use models::{fit_model, FittedModel};

/// Simulates a dataset and writes it, with its manifest, to `out`.
pub fn cmd_simulate(sim: &SimConfig, out: &Path) -> Result<Manifest> {
    let data = generate_dataset(sim)?;
    write_dataset(out, sim, &data)
}

/// Fits one model on a dataset directory and writes `<out>/<model>.json`
/// (plus the training log for DeepPAM). Returns the model file path.
pub fn cmd_fit(data_dir: &Path, kind: ModelKind, cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let (_, data) = read_dataset(data_dir, kind == ModelKind::Deeppam)?;
    let fitted = fit_model(kind, &data, cfg)?;
    std::fs::create_dir_all(out)?;
    if let FittedModel::Deeppam { model } = &fitted {
        model.write_train_log(File::create(out.join("deeppam_train_log.csv"))?)?;
    }
    let path = out.join(format!("{kind}.json"));
    fitted.save(&path)?;
    Ok(path)
}

/// Scores saved models on the dataset's test split and writes the result files to `out`.
pub fn cmd_evaluate(data_dir: &Path, model_files: &[PathBuf], out: &Path) -> Result<Evaluation> {
    let models = model_files
        .iter()
        .map(FittedModel::load)
        .collect::<Result<Vec<_>>>()?;
    let need_clouds = models.iter().any(|m| m.kind() == ModelKind::Deeppam);
    let (manifest, data) = read_dataset(data_dir, need_clouds)?;
    let eval = evaluate(&data.train, &data.test, &manifest.config, &models)?;
    write_evaluation(&eval, out)?;
    Ok(eval)
}

/// Runs the replicated benchmark described by `cfg`.
pub fn cmd_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment(cfg)
}
