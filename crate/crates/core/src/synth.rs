//! Synthetic benchmark: three shape classes as point clouds, two uniform
//! features, and survival times from a known log-quadratic baseline hazard
//! with class and feature effects, right-censored exponentially and at a horizon.

use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ped::SurvivalRecord;
use crate::Scalar;

pub const N_CLASSES: u8 = 3;

/// Simulation settings; the defaults reproduce the benchmark design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_points: usize,
    /// Linear effects of `x1`, `x2`.
    pub beta: [f64; 2],
    /// Effects of the class-1 and class-2 dummies (class 0 is the reference).
    pub gamma: [f64; 2],
    /// `(b0, b1, c)` for the log baseline `b0 + b1 (t - c)^2`.
    pub baseline_coefs: [f64; 3],
    pub admin_cens: f64,
    pub cens_rate: f64,
    pub noise_halfwidth: f64,
    pub grid_step: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_train: 1008,
            n_val: 144,
            n_test: 216,
            n_points: 1024,
            beta: [-0.25, 0.3],
            gamma: [0.5, -1.0],
            baseline_coefs: [-0.5, -0.1, 4.0],
            admin_cens: 10.0,
            cens_rate: 0.02,
            noise_halfwidth: 0.01,
            grid_step: 0.005,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 || self.n_points == 0 {
            return Err(Error::Config("sample sizes and n_points must be positive".into()));
        }
        if !(self.cens_rate >= 0.0) || !(self.admin_cens > 0.0) || !(self.grid_step > 0.0) {
            return Err(Error::Config(
                "need cens_rate >= 0, admin_cens > 0 and grid_step > 0".into(),
            ));
        }
        if !(self.noise_halfwidth >= 0.0) {
            return Err(Error::Config("noise_halfwidth must be non-negative".into()));
        }
        Ok(())
    }

    pub fn n_total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    /// True log-hazard at time `t`.
    pub fn log_hazard_true(&self, t: f64, x1: f64, x2: f64, class_id: u8) -> f64 {
        let [b0, b1, c] = self.baseline_coefs;
        let class_effect = match class_id {
            1 => self.gamma[0],
            2 => self.gamma[1],
            _ => 0.0,
        };
        b0 + b1 * (t - c) * (t - c) + self.beta[0] * x1 + self.beta[1] * x2 + class_effect
    }
}

pub fn hazard_true(cfg: &SimConfig, t: f64, x1: f64, x2: f64, class_id: u8) -> f64 {
    cfg.log_hazard_true(t, x1, x2, class_id).exp()
}

/// RNG for subject `index`: one ChaCha stream per subject under the dataset seed.
pub fn subject_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Subtracts the centroid and scales so that the largest point norm is 1.
pub fn normalize_cloud<T: Scalar>(cloud: &mut Array2<T>) {
    let n = T::from_usize_lossy(cloud.nrows());
    for c in 0..3 {
        let mean = cloud.column(c).sum() / n;
        cloud.column_mut(c).mapv_inplace(|v| v - mean);
    }
    let max_norm = cloud
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .fold(T::zero(), T::max);
    if max_norm > T::zero() {
        cloud.mapv_inplace(|v| v / max_norm);
    }
}

/// Adds i.i.d. uniform noise on `[-halfwidth, halfwidth]` to every coordinate.
pub fn add_noise<T: Scalar, R: Rng + ?Sized>(cloud: &mut Array2<T>, halfwidth: f64, rng: &mut R) {
    if halfwidth > 0.0 {
        cloud.mapv_inplace(|v| v + T::lit(rng.random_range(-halfwidth..=halfwidth)));
    }
}

/// Noisy, renormalized copy of a cloud.
pub fn jitter_cloud<T: Scalar, R: Rng + ?Sized>(cloud: &Array2<T>, halfwidth: f64, rng: &mut R) -> Array2<T> {
    let mut out = cloud.clone();
    add_noise(&mut out, halfwidth, rng);
    normalize_cloud(&mut out);
    out
}

/// Raw surface samples before noise and normalization: unit sphere (class 0),
/// cube of half-width 1 (class 1), cylinder of radius 0.6 and height 2 (class 2).
pub fn sample_shape<R: Rng + ?Sized>(class_id: u8, n_points: usize, rng: &mut R) -> Result<Array2<f64>> {
    let mut cloud = Array2::zeros((n_points, 3));
    for mut row in cloud.rows_mut() {
        let p: [f64; 3] = match class_id {
            0 => loop {
                let v: [f64; 3] = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if norm > 1e-12 {
                    break [v[0] / norm, v[1] / norm, v[2] / norm];
                }
            },
            1 => {
                let face = rng.random_range(0..6usize);
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut v = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), 0.0];
                v.swap(2, axis);
                v[axis] = sign;
                v
            }
            2 => {
                const R: f64 = 0.6;
                const HALF_H: f64 = 1.0;
                let lateral = 2.0 * std::f64::consts::PI * R * (2.0 * HALF_H);
                let caps = 2.0 * std::f64::consts::PI * R * R;
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                if rng.random::<f64>() < lateral / (lateral + caps) {
                    [R * theta.cos(), R * theta.sin(), rng.random_range(-HALF_H..=HALF_H)]
                } else {
                    let rad = R * rng.random::<f64>().sqrt();
                    let z = if rng.random::<bool>() { HALF_H } else { -HALF_H };
                    [rad * theta.cos(), rad * theta.sin(), z]
                }
            }
            other => return Err(Error::Config(format!("unknown class {other}"))),
        };
        for (d, v) in row.iter_mut().zip(p) {
            *d = v;
        }
    }
    Ok(cloud)
}

/// Shape samples with uniform coordinate noise, then normalized.
pub fn generate_cloud<R: Rng + ?Sized>(
    class_id: u8,
    n_points: usize,
    noise_halfwidth: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let mut cloud = sample_shape(class_id, n_points, rng)?;
    add_noise(&mut cloud, noise_halfwidth, rng);
    normalize_cloud(&mut cloud);
    Ok(cloud)
}

/// Inverse-transform draw of the event time under a midpoint-rule piecewise-constant
/// approximation of the true hazard, then censoring. Returns `(time, status)`.
pub fn simulate_time<R: Rng + ?Sized>(
    cfg: &SimConfig,
    x1: f64,
    x2: f64,
    class_id: u8,
    rng: &mut R,
    grid_step: f64,
) -> (f64, bool) {
    let target: f64 = Exp::new(1.0).expect("unit rate").sample(rng);
    let event = invert_cumulative_hazard(cfg, x1, x2, class_id, grid_step, target);
    let cens = if cfg.cens_rate > 0.0 {
        Exp::new(cfg.cens_rate).expect("positive rate").sample(rng)
    } else {
        f64::INFINITY
    };
    let bound = cens.min(cfg.admin_cens);
    let time = event.min(bound);
    (time, event <= bound)
}

/// First `t` with cumulative hazard `>= target`, or infinity when the horizon is reached first.
pub fn invert_cumulative_hazard(
    cfg: &SimConfig,
    x1: f64,
    x2: f64,
    class_id: u8,
    grid_step: f64,
    target: f64,
) -> f64 {
    let mut cum = 0.0;
    let mut a = 0.0;
    let mut k = 0u64;
    while a < cfg.admin_cens {
        let b = ((k + 1) as f64 * grid_step).min(cfg.admin_cens);
        let h = hazard_true(cfg, 0.5 * (a + b), x1, x2, class_id);
        let next = cum + h * (b - a);
        if next >= target {
            return a + (target - cum) / h;
        }
        cum = next;
        k += 1;
        a = b;
    }
    f64::INFINITY
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<SurvivalRecord<f64>>,
    pub val: Vec<SurvivalRecord<f64>>,
    pub test: Vec<SurvivalRecord<f64>>,
}

pub const FEATURE_NAMES: [&str; 2] = ["x1", "x2"];

pub fn feature_names() -> Vec<String> {
    FEATURE_NAMES.iter().map(|s| s.to_string()).collect()
}

/// One subject drawn from its own RNG stream. Stored clouds carry no noise;
/// training noise is added per epoch by the trainer.
pub fn generate_subject(cfg: &SimConfig, index: u64) -> Result<SurvivalRecord<f64>> {
    let mut rng = subject_rng(cfg.seed, index);
    let class_id = rng.random_range(0..N_CLASSES);
    let x1: f64 = rng.random();
    let x2: f64 = rng.random();
    let cloud = generate_cloud(class_id, cfg.n_points, 0.0, &mut rng)?;
    let (time, status) = simulate_time(cfg, x1, x2, class_id, &mut rng, cfg.grid_step);
    Ok(SurvivalRecord {
        id: index,
        time,
        status,
        features: vec![x1, x2],
        cloud: Some(cloud),
        true_class: Some(class_id),
    })
}

pub fn generate_dataset(cfg: &SimConfig) -> Result<Dataset> {
    cfg.validate()?;
    let all = (0..cfg.n_total() as u64)
        .map(|i| generate_subject(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let mut it = all.into_iter();
    let train = it.by_ref().take(cfg.n_train).collect();
    let val = it.by_ref().take(cfg.n_val).collect();
    let test = it.collect();
    Ok(Dataset { train, val, test })
}

/// On-disk description of a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SimConfig,
    pub records_file: String,
    pub clouds_dir: String,
    /// Half-open id ranges of the splits.
    pub train_ids: [u64; 2],
    pub val_ids: [u64; 2],
    pub test_ids: [u64; 2],
    pub records_sha256: String,
    pub clouds_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex(&Sha256::digest(data))
}

pub fn cloud_path(dir: &Path, clouds_dir: &str, id: u64) -> PathBuf {
    dir.join(clouds_dir).join(format!("{id}.bin"))
}

/// Little-endian `f64`, row-major `n_points x 3`.
pub fn cloud_to_bytes(cloud: &Array2<f64>) -> Vec<u8> {
    cloud.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn cloud_from_bytes(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() % 24 != 0 {
        return Err(Error::Parse(format!("cloud file of {} bytes is not n x 3 f64", bytes.len())));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Array2::from_shape_vec((vals.len() / 3, 3), vals).map_err(|e| Error::Shape(e.to_string()))
}

fn write_records<W: Write>(records: &[&SurvivalRecord<f64>], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["id", "time", "status", "x1", "x2", "true_class"])?;
    for r in records {
        wtr.write_record([
            r.id.to_string(),
            r.time.to_string(),
            u8::from(r.status).to_string(),
            r.features[0].to_string(),
            r.features[1].to_string(),
            r.true_class.map(|c| c.to_string()).unwrap_or_default(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse(format!("bad {what}: {s:?}")))
}

fn read_records<R: Read>(input: R) -> Result<Vec<SurvivalRecord<f64>>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 6 {
            return Err(Error::Parse(format!("expected 6 columns, got {}", rec.len())));
        }
        let status: u8 = parse_field(&rec[2], "status")?;
        out.push(SurvivalRecord {
            id: parse_field(&rec[0], "id")?,
            time: parse_field(&rec[1], "time")?,
            status: status == 1,
            features: vec![parse_field(&rec[3], "x1")?, parse_field(&rec[4], "x2")?],
            cloud: None,
            true_class: if rec[5].is_empty() {
                None
            } else {
                Some(parse_field(&rec[5], "true_class")?)
            },
        });
    }
    Ok(out)
}

/// Writes `records.csv`, `clouds/<id>.bin` and `manifest.json` into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, cfg: &SimConfig, data: &Dataset) -> Result<Manifest> {
    let dir = dir.as_ref();
    let clouds_dir = "clouds";
    std::fs::create_dir_all(dir.join(clouds_dir))?;
    let all: Vec<&SurvivalRecord<f64>> = data.train.iter().chain(&data.val).chain(&data.test).collect();
    let mut records_bytes = Vec::new();
    write_records(&all, &mut records_bytes)?;
    std::fs::write(dir.join("records.csv"), &records_bytes)?;
    let mut cloud_hasher = Sha256::new();
    for r in &all {
        let cloud = r.cloud.as_ref().ok_or(Error::MissingCloud { id: r.id })?;
        let bytes = cloud_to_bytes(cloud);
        cloud_hasher.update(&bytes);
        std::fs::write(cloud_path(dir, clouds_dir, r.id), bytes)?;
    }
    let range = |v: &[SurvivalRecord<f64>]| -> [u64; 2] {
        match (v.first(), v.last()) {
            (Some(a), Some(b)) => [a.id, b.id + 1],
            _ => [0, 0],
        }
    };
    let manifest = Manifest {
        config: cfg.clone(),
        records_file: "records.csv".into(),
        clouds_dir: clouds_dir.into(),
        train_ids: range(&data.train),
        val_ids: range(&data.val),
        test_ids: range(&data.test),
        records_sha256: sha256_hex(&records_bytes),
        clouds_sha256: hex(&cloud_hasher.finalize()),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.as_ref().join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a dataset written by [`write_dataset`]; clouds are loaded when `with_clouds`.
pub fn read_dataset(dir: impl AsRef<Path>, with_clouds: bool) -> Result<(Manifest, Dataset)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let file = std::fs::File::open(dir.join(&manifest.records_file))?;
    let mut records = read_records(BufReader::new(file))?;
    if with_clouds {
        for r in &mut records {
            let path = cloud_path(dir, &manifest.clouds_dir, r.id);
            let bytes = std::fs::read(&path).map_err(|_| Error::MissingCloud { id: r.id })?;
            r.cloud = Some(cloud_from_bytes(&bytes)?);
        }
    }
    let in_range = |id: u64, r: [u64; 2]| id >= r[0] && id < r[1];
    let mut data = Dataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for r in records {
        if in_range(r.id, manifest.train_ids) {
            data.train.push(r);
        } else if in_range(r.id, manifest.val_ids) {
            data.val.push(r);
        } else if in_range(r.id, manifest.test_ids) {
            data.test.push(r);
        }
    }
    Ok((manifest, data))
}
