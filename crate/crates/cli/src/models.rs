//! Fitting and predicting the four benchmark models.

use std::path::Path;

use pamsurv::deepnet::{fit_deeppam, TrainConfig};
use pamsurv::eval::{kaplan_meier, SurvivalCurve};
use pamsurv::pam::{fit_pam, PamFit, PiecewiseHazard, PsiSelection, StructuredSpec};
use pamsurv::ped::{make_cut_points, transform_to_ped, CutStrategy, SurvivalRecord};
use pamsurv::synth::{feature_names, sha256_hex, Dataset};
use pamsurv::{DeepPamModel64, Error, PamFit64, Result, StepFunction64, SurvivalRecord64};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ModelKind};

pub const CLASS_DUMMIES: [&str; 2] = ["class1", "class2"];

/// A fitted model as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedModel {
    Km { curve: StepFunction64 },
    PamBaseline { fit: PamFit64 },
    PamCorrect { fit: PamFit64 },
    Deeppam { model: DeepPamModel64 },
}

/// Survival curve of one test subject.
#[derive(Debug, Clone)]
pub enum Curve {
    Step(StepFunction64),
    Piecewise(PiecewiseHazard<f64>),
}

impl SurvivalCurve<f64> for Curve {
    fn survival_at(&self, t: f64) -> f64 {
        match self {
            Curve::Step(s) => s.eval(t),
            Curve::Piecewise(p) => p.survival(t),
        }
    }
}

/// Copies of `records` with the true-class dummies appended to the features.
pub fn with_class_dummies(records: &[SurvivalRecord64]) -> Result<Vec<SurvivalRecord64>> {
    records
        .iter()
        .map(|r| {
            let class = r
                .true_class
                .ok_or_else(|| Error::Config(format!("subject {} has no true class", r.id)))?;
            let mut out = r.clone();
            out.features.push(if class == 1 { 1.0 } else { 0.0 });
            out.features.push(if class == 2 { 1.0 } else { 0.0 });
            Ok(out)
        })
        .collect()
}

fn correct_spec(spec: &StructuredSpec) -> StructuredSpec {
    CLASS_DUMMIES.iter().fold(spec.clone(), |s, d| s.linear(d))
}

fn correct_names() -> Vec<String> {
    let mut names = feature_names();
    names.extend(CLASS_DUMMIES.iter().map(|s| s.to_string()));
    names
}

/// PAM on the dataset's training split with smoothing parameters tuned on the validation split.
pub fn fit_structured(
    train: &[SurvivalRecord64],
    val: &[SurvivalRecord64],
    names: &[String],
    spec: &StructuredSpec,
    cuts: CutStrategy<f64>,
) -> Result<PamFit64> {
    let cuts = make_cut_points(train, cuts)?;
    let ped = transform_to_ped(train, &cuts, names)?;
    let vped = transform_to_ped(val, &cuts, names)?;
    fit_pam(&ped, spec, PsiSelection::Grid { validation: &vped })
}

pub fn fit_baseline(data: &Dataset, cfg: &ExperimentConfig) -> Result<PamFit64> {
    fit_structured(&data.train, &data.val, &feature_names(), &cfg.spec, cfg.cuts)
}

pub fn fit_correct(data: &Dataset, cfg: &ExperimentConfig) -> Result<PamFit64> {
    fit_structured(
        &with_class_dummies(&data.train)?,
        &with_class_dummies(&data.val)?,
        &correct_names(),
        &correct_spec(&cfg.spec),
        cfg.cuts,
    )
}

/// DeepPAM warm-started from `warm`, recording the warm fit's hash.
pub fn fit_deep(data: &Dataset, train_cfg: &TrainConfig, warm: &PamFit64) -> Result<DeepPamModel64> {
    let mut model = fit_deeppam(&data.train, &data.val, train_cfg, warm)?;
    model.warm_start_sha256 = Some(sha256_hex(warm.to_json()?.as_bytes()));
    Ok(model)
}

/// Fits one model kind. `deeppam` first fits a fresh `pam_baseline` as warm start.
pub fn fit_model(kind: ModelKind, data: &Dataset, cfg: &ExperimentConfig) -> Result<FittedModel> {
    Ok(match kind {
        ModelKind::Km => FittedModel::Km {
            curve: kaplan_meier(&data.train)?,
        },
        ModelKind::PamBaseline => FittedModel::PamBaseline {
            fit: fit_baseline(data, cfg)?,
        },
        ModelKind::PamCorrect => FittedModel::PamCorrect {
            fit: fit_correct(data, cfg)?,
        },
        ModelKind::Deeppam => {
            if let Some(r) = data.train.iter().chain(&data.val).find(|r| r.cloud.is_none()) {
                return Err(Error::MissingCloud { id: r.id });
            }
            let warm = fit_baseline(data, cfg)?;
            FittedModel::Deeppam {
                model: fit_deep(data, &cfg.train, &warm)?,
            }
        }
    })
}

impl FittedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            FittedModel::Km { .. } => ModelKind::Km,
            FittedModel::PamBaseline { .. } => ModelKind::PamBaseline,
            FittedModel::PamCorrect { .. } => ModelKind::PamCorrect,
            FittedModel::Deeppam { .. } => ModelKind::Deeppam,
        }
    }

    /// False only for a structured fit whose Newton iterations hit the cap.
    pub fn converged(&self) -> bool {
        match self {
            FittedModel::PamBaseline { fit } | FittedModel::PamCorrect { fit } => fit.converged,
            _ => true,
        }
    }

    pub fn pam(&self) -> Option<&PamFit64> {
        match self {
            FittedModel::PamBaseline { fit } | FittedModel::PamCorrect { fit } => Some(fit),
            _ => None,
        }
    }

    /// Survival curves for `test`, in order.
    pub fn curves(&self, test: &[SurvivalRecord64]) -> Result<Vec<Curve>> {
        match self {
            FittedModel::Km { curve } => Ok(test.iter().map(|_| Curve::Step(curve.clone())).collect()),
            FittedModel::PamBaseline { fit } => pam_curves(fit, test),
            FittedModel::PamCorrect { fit } => pam_curves(fit, &with_class_dummies(test)?),
            FittedModel::Deeppam { model } => {
                Ok(model.curves(test)?.into_iter().map(Curve::Piecewise).collect())
            }
        }
    }

    /// Predicted log-hazard curves for `test`, one row per subject; `None` for KM.
    pub fn log_hazards(&self, test: &[SurvivalRecord64], times: &[f64]) -> Result<Option<Vec<Vec<f64>>>> {
        if matches!(self, FittedModel::Km { .. }) {
            return Ok(None);
        }
        let curves = self.curves(test)?;
        Ok(Some(
            curves
                .iter()
                .map(|c| match c {
                    Curve::Piecewise(p) => times.iter().map(|&t| p.log_hazard(t)).collect(),
                    Curve::Step(_) => unreachable!("only KM yields step curves"),
                })
                .collect(),
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn pam_curves(fit: &PamFit<f64>, test: &[SurvivalRecord<f64>]) -> Result<Vec<Curve>> {
    let profile = fit.time_profile();
    test.iter()
        .map(|r| fit.curve_from_profile(&profile, &r.features, 0.0).map(Curve::Piecewise))
        .collect()
}
