//! Survival records and their piecewise-exponential (PED) augmentation.
//!
//! A right-censored subject observed until `t_i` with cut points
//! `0 = k_0 < k_1 < ... < k_J` contributes one row per interval `(k_{j-1}, k_j]`
//! it was at risk in. Each row carries the time at risk in that interval (the
//! Poisson offset) and whether the event happened there.

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::Scalar;

/// One subject: observed time, event indicator, tabular features and an optional point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalRecord<T> {
    pub id: u64,
    pub time: T,
    /// `true` for an observed event, `false` for censoring.
    pub status: bool,
    pub features: Vec<T>,
    /// `n_points x 3` coordinates.
    pub cloud: Option<Array2<T>>,
    /// Simulation ground truth; never read by models that learn from clouds.
    pub true_class: Option<u8>,
}

impl<T: Scalar> SurvivalRecord<T> {
    pub fn new(id: u64, time: T, status: bool, features: Vec<T>) -> Self {
        Self {
            id,
            time,
            status,
            features,
            cloud: None,
            true_class: None,
        }
    }

    /// Converts every real field to another scalar type.
    pub fn cast<U: Scalar>(&self) -> SurvivalRecord<U> {
        let conv = |v: T| U::lit(v.as_f64());
        SurvivalRecord {
            id: self.id,
            time: conv(self.time),
            status: self.status,
            features: self.features.iter().map(|&v| conv(v)).collect(),
            cloud: self.cloud.as_ref().map(|c| c.mapv(conv)),
            true_class: self.true_class,
        }
    }

    pub fn validate(&self, cloud_size: Option<usize>) -> Result<()> {
        if !(self.time > T::zero()) {
            return Err(Error::NonPositiveTime { id: self.id });
        }
        if let Some(cloud) = &self.cloud {
            if cloud.ncols() != 3 {
                return Err(Error::Shape(format!(
                    "cloud of subject {} has {} columns, expected 3",
                    self.id,
                    cloud.ncols()
                )));
            }
            if let Some(n) = cloud_size {
                if cloud.nrows() != n {
                    return Err(Error::Shape(format!(
                        "cloud of subject {} has {} points, expected {n}",
                        self.id,
                        cloud.nrows()
                    )));
                }
            }
            if cloud.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput(format!("cloud of subject {}", self.id)));
            }
        }
        Ok(())
    }
}

/// Strictly increasing interval boundaries starting at zero.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CutPoints<T> {
    cuts: Vec<T>,
}

impl<T: Scalar> CutPoints<T> {
    pub fn new(cuts: Vec<T>) -> Result<Self> {
        if cuts.len() < 2 {
            return Err(Error::Config("cut points need at least one interval".into()));
        }
        if cuts[0] != T::zero() {
            return Err(Error::Config("first cut point must be 0".into()));
        }
        if cuts.iter().any(|c| !c.is_finite()) || cuts.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("cut points must be finite and strictly increasing".into()));
        }
        Ok(Self { cuts })
    }

    pub fn as_slice(&self) -> &[T] {
        &self.cuts
    }

    /// Number of intervals `J`.
    pub fn n_intervals(&self) -> usize {
        self.cuts.len() - 1
    }

    pub fn last(&self) -> T {
        self.cuts[self.cuts.len() - 1]
    }

    /// Closing endpoint `k_j` of interval `j` (1-based).
    pub fn upper(&self, j: usize) -> T {
        self.cuts[j]
    }

    pub fn width(&self, j: usize) -> T {
        self.cuts[j] - self.cuts[j - 1]
    }

    /// 1-based index of the interval `(k_{j-1}, k_j]` containing `t`.
    /// Non-positive times map to the first interval, times beyond `k_J` to the last.
    pub fn interval_of(&self, t: T) -> usize {
        // number of cuts strictly below t
        let below = self.cuts.partition_point(|&c| c < t);
        below.clamp(1, self.n_intervals())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CutStrategy<T> {
    /// `{0}` together with the distinct event times.
    EventTimes,
    /// `n_intervals + 1` equidistant points on `[0, t_max]`.
    Grid { n_intervals: usize, t_max: T },
}

impl<T> Default for CutStrategy<T> {
    fn default() -> Self {
        CutStrategy::EventTimes
    }
}

pub fn make_cut_points<T: Scalar>(
    records: &[SurvivalRecord<T>],
    strategy: CutStrategy<T>,
) -> Result<CutPoints<T>> {
    match strategy {
        CutStrategy::EventTimes => {
            let mut times: Vec<T> = records.iter().filter(|r| r.status).map(|r| r.time).collect();
            if times.is_empty() {
                return Err(Error::NoEvents);
            }
            if let Some(r) = records.iter().find(|r| !(r.time > T::zero())) {
                return Err(Error::NonPositiveTime { id: r.id });
            }
            times.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
            times.dedup();
            let mut cuts = Vec::with_capacity(times.len() + 1);
            cuts.push(T::zero());
            cuts.extend(times);
            CutPoints::new(cuts)
        }
        CutStrategy::Grid { n_intervals, t_max } => {
            if n_intervals == 0 || !(t_max > T::zero()) || !t_max.is_finite() {
                return Err(Error::InvalidGrid);
            }
            let step = t_max / T::from_usize_lossy(n_intervals);
            let mut cuts: Vec<T> = (0..n_intervals)
                .map(|k| T::from_usize_lossy(k) * step)
                .collect();
            cuts.push(t_max);
            CutPoints::new(cuts)
        }
    }
}

/// One subject-interval row.
#[derive(Debug, Clone, PartialEq)]
pub struct PedRow<T> {
    pub id: u64,
    /// 1-based interval index.
    pub j: usize,
    /// Time representation of the interval (its closing cut point).
    pub t_j: T,
    /// Time at risk inside the interval.
    pub t_risk: T,
    pub status: bool,
    pub features: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PedData<T> {
    pub rows: Vec<PedRow<T>>,
    pub cuts: CutPoints<T>,
    pub feature_names: Vec<String>,
}

impl<T: Scalar> PedData<T> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_events(&self) -> usize {
        self.rows.iter().filter(|r| r.status).count()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    /// Contiguous row ranges per subject, in row order.
    pub fn subject_ranges(&self) -> Vec<(u64, Range<usize>)> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.rows.len() {
            if i == self.rows.len() || self.rows[i].id != self.rows[start].id {
                out.push((self.rows[start].id, start..i));
                start = i;
            }
        }
        out
    }
}

/// Expands records into PED rows ordered by (id, j). Times beyond the last cut
/// are truncated there with status 0.
pub fn transform_to_ped<T: Scalar>(
    records: &[SurvivalRecord<T>],
    cuts: &CutPoints<T>,
    feature_names: &[String],
) -> Result<PedData<T>> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by_key(|&i| records[i].id);
    let last = cuts.last();
    let mut rows = Vec::new();
    for i in order {
        let rec = &records[i];
        if !(rec.time > T::zero()) {
            return Err(Error::NonPositiveTime { id: rec.id });
        }
        if rec.features.len() != feature_names.len() {
            return Err(Error::Shape(format!(
                "subject {} has {} features, expected {}",
                rec.id,
                rec.features.len(),
                feature_names.len()
            )));
        }
        let truncated = rec.time > last;
        let closing = cuts.interval_of(rec.time);
        for j in 1..=closing {
            let is_last = j == closing;
            let t_risk = if is_last && !truncated {
                rec.time - cuts.upper(j - 1)
            } else {
                cuts.width(j)
            };
            rows.push(PedRow {
                id: rec.id,
                j,
                t_j: cuts.upper(j),
                t_risk,
                status: is_last && !truncated && rec.status,
                features: rec.features.clone(),
            });
        }
    }
    Ok(PedData {
        rows,
        cuts: cuts.clone(),
        feature_names: feature_names.to_vec(),
    })
}

/// Writes PED rows as CSV: `id,j,t_j,t_risk,status,<features...>`, sorted by (id, j).
pub fn write_ped<T: Scalar, W: Write>(ped: &PedData<T>, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string(), "j".into(), "t_j".into(), "t_risk".into(), "status".into()];
    header.extend(ped.feature_names.iter().cloned());
    wtr.write_record(&header)?;
    let mut idx: Vec<usize> = (0..ped.rows.len()).collect();
    idx.sort_by_key(|&i| (ped.rows[i].id, ped.rows[i].j));
    for i in idx {
        let r = &ped.rows[i];
        let mut rec = vec![
            r.id.to_string(),
            r.j.to_string(),
            r.t_j.to_string(),
            r.t_risk.to_string(),
            u8::from(r.status).to_string(),
        ];
        rec.extend(r.features.iter().map(|v| v.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn export_ped<T: Scalar>(ped: &PedData<T>, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_ped(ped, std::io::BufWriter::new(file))
}

fn parse<T: std::str::FromStr>(field: &str, what: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad {what}: {field:?}")))
}

/// Reads the CSV produced by [`write_ped`]. Cut points are rebuilt from the
/// interval endpoints present in the file, so they must be supplied when intervals
/// may be missing from the rows.
pub fn read_ped<T: Scalar, R: Read>(input: R, cuts: CutPoints<T>) -> Result<PedData<T>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    let fixed = ["id", "j", "t_j", "t_risk", "status"];
    if header.len() < fixed.len() || fixed.iter().zip(header.iter()).any(|(a, b)| *a != b) {
        return Err(Error::Parse(format!("unexpected PED header: {header:?}")));
    }
    let feature_names: Vec<String> = header.iter().skip(fixed.len()).map(String::from).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let status: u8 = parse(&rec[4], "status")?;
        rows.push(PedRow {
            id: parse(&rec[0], "id")?,
            j: parse(&rec[1], "j")?,
            t_j: parse(&rec[2], "t_j")?,
            t_risk: parse(&rec[3], "t_risk")?,
            status: status == 1,
            features: rec
                .iter()
                .skip(fixed.len())
                .map(|f| parse(f, "feature"))
                .collect::<Result<_>>()?,
        });
    }
    Ok(PedData {
        rows,
        cuts,
        feature_names,
    })
}

pub fn import_ped<T: Scalar>(path: impl AsRef<Path>, cuts: CutPoints<T>) -> Result<PedData<T>> {
    read_ped(std::fs::File::open(path)?, cuts)
}
