//! DeepPAM: a PAM whose log-hazard gains an additive, time-constant term
//! `zeta_i . gamma` where `zeta_i` is a latent vector computed from subject i's
//! point cloud. PED rows are built outside the network; each subject's cloud is
//! encoded once and its latent vector is repeated over that subject's rows.

mod adam;
mod encoder;

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use encoder::{
    backward, encode, encode_call_count, forward_trace, Dense, EncoderParams, EncoderSpec, EncoderTrace,
};

use crate::error::{Error, Result};
use crate::pam::{DesignLayout, PamFit, PiecewiseHazard, StructuredSpec};
use crate::ped::{transform_to_ped, CutPoints, SurvivalRecord};
use crate::synth::jitter_cloud;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    /// Subjects per mini-batch.
    pub batch_size: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Smoothing parameters; taken from the warm-start PAM when absent.
    pub psi: Option<Vec<f64>>,
    pub seed: u64,
    /// Half-width of the uniform jitter applied to training clouds each epoch.
    pub noise_halfwidth: f64,
    pub encoder: EncoderSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            max_epochs: 75,
            batch_size: 32,
            patience: 5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            psi: None,
            seed: 0,
            noise_halfwidth: 0.01,
            encoder: EncoderSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "need lr > 0, max_epochs > 0, patience >= 1 and batch_size >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        if !(self.noise_halfwidth >= 0.0) {
            return Err(Error::Config("noise_halfwidth must be non-negative".into()));
        }
        if let Some(psi) = &self.psi {
            if psi.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::Config("smoothing parameters must be non-negative".into()));
            }
        }
        self.encoder.validate()
    }
}

/// Trainable parameters: structured coefficients, latent weights and encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepParams<T> {
    pub structured_w: Array1<T>,
    pub gamma: Array1<T>,
    pub encoder: EncoderParams<T>,
}

impl<T: Scalar> DeepParams<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            structured_w: Array1::zeros(self.structured_w.len()),
            gamma: Array1::zeros(self.gamma.len()),
            encoder: EncoderParams {
                point: self.encoder.point.iter().map(|l| Dense::zeros(l.w.nrows(), l.w.ncols())).collect(),
                global: self.encoder.global.iter().map(|l| Dense::zeros(l.w.nrows(), l.w.ncols())).collect(),
            },
        }
    }

    /// Flat views of every block, in a fixed order.
    pub fn blocks(&self) -> Vec<&[T]> {
        let mut out = vec![
            self.structured_w.as_slice().expect("contiguous"),
            self.gamma.as_slice().expect("contiguous"),
        ];
        for l in self.encoder.layers() {
            out.push(l.w.as_slice().expect("contiguous"));
            out.push(l.b.as_slice().expect("contiguous"));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = vec![
            self.structured_w.as_slice_mut().expect("contiguous"),
            self.gamma.as_slice_mut().expect("contiguous"),
        ];
        for l in self.encoder.layers_mut() {
            out.push(l.w.as_slice_mut().expect("contiguous"));
            out.push(l.b.as_slice_mut().expect("contiguous"));
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// One subject prepared for training: its cloud and its PED rows in design form.
#[derive(Debug, Clone)]
pub struct SubjectBlock<T> {
    pub id: u64,
    pub cloud: Array2<T>,
    /// Structured design rows, one per interval at risk.
    pub design: Array2<T>,
    pub t_risk: Array1<T>,
    pub status: Array1<T>,
}

impl<T: Scalar> SubjectBlock<T> {
    pub fn n_rows(&self) -> usize {
        self.design.nrows()
    }
}

/// Builds per-subject blocks, ordered by id. Every record needs a cloud.
pub fn prepare_subjects<T: Scalar>(
    records: &[SurvivalRecord<T>],
    cuts: &CutPoints<T>,
    layout: &DesignLayout<T>,
) -> Result<Vec<SubjectBlock<T>>> {
    let clouds: HashMap<u64, &Array2<T>> = records
        .iter()
        .map(|r| r.cloud.as_ref().map(|c| (r.id, c)).ok_or(Error::MissingCloud { id: r.id }))
        .collect::<Result<_>>()?;
    let ped = transform_to_ped(records, cuts, &layout.feature_names)?;
    let design = layout.design(&ped)?;
    ped.subject_ranges()
        .into_iter()
        .map(|(id, range)| {
            let rows = &ped.rows[range.clone()];
            Ok(SubjectBlock {
                id,
                cloud: clouds[&id].clone(),
                design: design.slice(s![range, ..]).to_owned(),
                t_risk: rows.iter().map(|r| r.t_risk).collect(),
                status: rows
                    .iter()
                    .map(|r| if r.status { T::one() } else { T::zero() })
                    .collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Poisson nll summed over the epoch's mini-batches (full data at epoch 0).
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepPamModel<T> {
    pub params: DeepParams<T>,
    pub encoder_spec: EncoderSpec,
    pub spec: StructuredSpec,
    pub layout: DesignLayout<T>,
    pub psi: Vec<T>,
    pub cuts: CutPoints<T>,
    pub train_log: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    /// Hash of the warm-start model, when recorded by the caller.
    pub warm_start_sha256: Option<String>,
}

/// Output of [`forward_batch`].
#[derive(Debug, Clone)]
pub struct BatchForward<T> {
    /// Hazard per PED row, one array per subject.
    pub hazards: Vec<Array1<T>>,
    /// Latent vector per subject.
    pub zetas: Vec<Array1<T>>,
    /// Encoder passes performed.
    pub encode_calls: usize,
}

fn subject_eta<T: Scalar>(design: ArrayView2<'_, T>, w: &Array1<T>, offset: T) -> Array1<T> {
    let mut eta = design.dot(w);
    eta.mapv_inplace(|e| e + offset);
    eta
}

/// Row hazards `exp(B_ij w + zeta_i . gamma)`. Each cloud is encoded exactly once.
pub fn forward_batch<T: Scalar>(subjects: &[&SubjectBlock<T>], model: &DeepPamModel<T>) -> Result<BatchForward<T>> {
    let p = &model.params;
    let before = encode_call_count();
    let mut hazards = Vec::with_capacity(subjects.len());
    let mut zetas = Vec::with_capacity(subjects.len());
    for sub in subjects {
        let zeta = encode(sub.cloud.view(), &p.encoder)?;
        let offset = zeta.dot(&p.gamma);
        hazards.push(subject_eta(sub.design.view(), &p.structured_w, offset).mapv(T::exp));
        zetas.push(zeta);
    }
    Ok(BatchForward {
        hazards,
        zetas,
        encode_calls: encode_call_count() - before,
    })
}

fn poisson_terms<T: Scalar>(eta: &Array1<T>, sub: &SubjectBlock<T>) -> (T, Array1<T>) {
    let mut nll = T::zero();
    let mut resid = Array1::zeros(eta.len());
    for (k, ((&e, &t), &d)) in eta.iter().zip(sub.t_risk.iter()).zip(sub.status.iter()).enumerate() {
        let mu = t * e.exp();
        nll += mu - d * (e + t.ln());
        resid[k] = mu - d;
    }
    (nll, resid)
}

/// Loss and gradients on one mini-batch.
#[derive(Debug, Clone)]
pub struct LossGrads<T> {
    /// Poisson nll plus scaled spline penalty plus encoder weight penalty.
    pub loss: T,
    /// Poisson nll alone.
    pub nll: T,
    pub grads: DeepParams<T>,
}

/// Batch objective `nll + penalty_scale * sum psi_l theta_l' S_l theta_l + l2 * |W|^2`
/// and its gradient with respect to every parameter block.
pub fn loss_and_grads<T: Scalar>(
    batch: &[&SubjectBlock<T>],
    model: &DeepPamModel<T>,
    psi: &[T],
    penalty_scale: T,
    batch_id: usize,
) -> Result<LossGrads<T>> {
    let p = &model.params;
    let mut grads = p.zeros_like();
    let mut nll = T::zero();
    for sub in batch {
        let trace = forward_trace(sub.cloud.view(), &p.encoder)?;
        let zeta = trace.latent();
        let eta = subject_eta(sub.design.view(), &p.structured_w, zeta.dot(&p.gamma));
        let (sub_nll, resid) = poisson_terms(&eta, sub);
        nll += sub_nll;
        grads.structured_w += &sub.design.t().dot(&resid);
        let r_sum = resid.sum();
        grads.gamma.scaled_add(r_sum, zeta);
        let d_zeta = p.gamma.mapv(|g| g * r_sum);
        backward(&trace, &p.encoder, d_zeta.view(), &mut grads.encoder);
    }
    model
        .penalties()
        .add_gradient(p.structured_w.view(), psi, penalty_scale, &mut grads.structured_w);
    let l2 = T::lit(model.encoder_spec.l2);
    let two_l2 = l2 + l2;
    for (g, w) in grads.encoder.layers_mut().zip(p.encoder.layers()) {
        g.w.scaled_add(two_l2, &w.w);
    }
    let loss = nll
        + penalty_scale * model.penalties().value(p.structured_w.view(), psi)
        + l2 * p.encoder.weight_sq_norm();
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFiniteLoss { batch: batch_id });
    }
    Ok(LossGrads { loss, nll, grads })
}

/// Unpenalized Poisson nll over all subjects, using their stored clouds.
pub fn poisson_nll_subjects<T: Scalar>(subjects: &[SubjectBlock<T>], model: &DeepPamModel<T>) -> Result<T> {
    let p = &model.params;
    let mut nll = T::zero();
    for sub in subjects {
        let offset = encode(sub.cloud.view(), &p.encoder)?.dot(&p.gamma);
        nll += poisson_terms(&subject_eta(sub.design.view(), &p.structured_w, offset), sub).0;
    }
    Ok(nll)
}

impl<T: Scalar> DeepPamModel<T> {
    /// Untrained model: structured part copied from `warm`, gamma zero, encoder
    /// weights drawn uniformly with fan-in scaling.
    pub fn from_warm_start(warm: &PamFit<T>, encoder_spec: &EncoderSpec, seed: u64) -> Result<Self> {
        encoder_spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            params: DeepParams {
                structured_w: warm.w.clone(),
                gamma: Array1::zeros(encoder_spec.latent_dim()),
                encoder: EncoderParams::init(encoder_spec, &mut rng),
            },
            encoder_spec: encoder_spec.clone(),
            spec: warm.spec.clone(),
            layout: warm.layout.clone(),
            psi: warm.psi.clone(),
            cuts: warm.cuts.clone(),
            train_log: Vec::new(),
            best_epoch: 0,
            warm_start_sha256: None,
        })
    }

    pub fn penalties(&self) -> crate::pam::Penalties<T> {
        self.layout.penalties()
    }

    pub fn latent(&self, cloud: ArrayView2<'_, T>) -> Result<Array1<T>> {
        encode(cloud, &self.params.encoder)
    }

    /// Additive log-hazard contribution `zeta . gamma` of a cloud.
    pub fn cloud_effect(&self, cloud: ArrayView2<'_, T>) -> Result<T> {
        Ok(self.latent(cloud)?.dot(&self.params.gamma))
    }

    pub fn time_profile(&self) -> Array1<T> {
        self.layout.time_profile(self.params.structured_w.view(), &self.cuts)
    }

    /// Hazard curve of one subject; requires its cloud.
    pub fn curve(&self, record: &SurvivalRecord<T>) -> Result<PiecewiseHazard<T>> {
        self.curve_from_profile(&self.time_profile(), record)
    }

    pub fn curve_from_profile(&self, profile: &Array1<T>, record: &SurvivalRecord<T>) -> Result<PiecewiseHazard<T>> {
        let cloud = record.cloud.as_ref().ok_or(Error::MissingCloud { id: record.id })?;
        if record.features.len() != self.layout.feature_names.len() {
            return Err(Error::Shape(format!(
                "{} features given, model expects {}",
                record.features.len(),
                self.layout.feature_names.len()
            )));
        }
        let shift = self.layout.covariate_effect(self.params.structured_w.view(), &record.features)
            + self.cloud_effect(cloud.view())?;
        PiecewiseHazard::new(self.cuts.clone(), profile.iter().map(|&p| p + shift).collect())
    }

    pub fn curves(&self, records: &[SurvivalRecord<T>]) -> Result<Vec<PiecewiseHazard<T>>> {
        let profile = self.time_profile();
        records.iter().map(|r| self.curve_from_profile(&profile, r)).collect()
    }

    /// `log h(t)` for one subject.
    pub fn log_hazard(&self, record: &SurvivalRecord<T>, t: T) -> Result<T> {
        Ok(self.curve(record)?.log_hazard(t))
    }

    pub fn to_json(&self) -> Result<String>
    where
        T: Serialize,
    {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self>
    where
        T: for<'de> Deserialize<'de>,
    {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()>
    where
        T: Serialize,
    {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self>
    where
        T: for<'de> Deserialize<'de>,
    {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Writes `epoch,train_nll,val_nll`.
    pub fn write_train_log<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.train_log {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains a DeepPAM starting from `warm`: Adam over shuffled subject mini-batches,
/// training clouds re-jittered every epoch, validation nll on clean clouds after
/// every epoch, early stopping with `patience`, best-validation parameters returned.
pub fn fit_deeppam<T: Scalar>(
    train: &[SurvivalRecord<T>],
    val: &[SurvivalRecord<T>],
    cfg: &TrainConfig,
    warm: &PamFit<T>,
) -> Result<DeepPamModel<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty);
    }
    let mut model = DeepPamModel::from_warm_start(warm, &cfg.encoder, cfg.seed)?;
    let psi: Vec<T> = match &cfg.psi {
        Some(p) => {
            if p.len() != warm.psi.len() {
                return Err(Error::Config(format!(
                    "{} smoothing parameters given, spec has {} smooths",
                    p.len(),
                    warm.psi.len()
                )));
            }
            p.iter().map(|&v| T::lit(v)).collect()
        }
        None => warm.psi.clone(),
    };
    model.psi = psi.clone();
    let train_sub = prepare_subjects(train, &model.cuts, &model.layout)?;
    let val_sub = prepare_subjects(val, &model.cuts, &model.layout)?;
    let n_train = train_sub.len();

    // separate stream from the one used for initialization
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);

    let val0 = poisson_nll_subjects(&val_sub, &model)?;
    let train0 = poisson_nll_subjects(&train_sub, &model)?;
    model.train_log.push(EpochLog {
        epoch: 0,
        train_nll: train0.as_f64(),
        val_nll: val0.as_f64(),
    });
    let mut best_val = val0;
    let mut best_params = model.params.clone();
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut jittered: Vec<SubjectBlock<T>> = train_sub.clone();
    let mut batch_id = 0;

    for epoch in 1..=cfg.max_epochs {
        for (dst, src) in jittered.iter_mut().zip(&train_sub) {
            dst.cloud = jitter_cloud(&src.cloud, cfg.noise_halfwidth, &mut rng);
        }
        order.shuffle(&mut rng);
        let mut epoch_nll = T::zero();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SubjectBlock<T>> = chunk.iter().map(|&i| &jittered[i]).collect();
            let scale = T::from_usize_lossy(batch.len()) / T::from_usize_lossy(n_train);
            let lg = loss_and_grads(&batch, &model, &psi, scale, batch_id)?;
            batch_id += 1;
            epoch_nll += lg.nll;
            opt.update(model.params.blocks_mut(), lg.grads.blocks());
        }
        let val_nll = poisson_nll_subjects(&val_sub, &model);
        let val_nll = match val_nll {
            Ok(v) if v.is_finite() => v,
            Ok(v) => {
                return Err(Error::Diverged {
                    epoch,
                    value: v.as_f64(),
                })
            }
            Err(Error::NonFiniteInput(_)) | Err(Error::NonFinitePredictor { .. }) => {
                return Err(Error::Diverged { epoch, value: f64::NAN })
            }
            Err(e) => return Err(e),
        };
        model.train_log.push(EpochLog {
            epoch,
            train_nll: epoch_nll.as_f64(),
            val_nll: val_nll.as_f64(),
        });
        if val_nll < best_val {
            best_val = val_nll;
            best_params = model.params.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.params = best_params;
    model.best_epoch = best_epoch;
    Ok(model)
}
