//! Kaplan-Meier curves and inverse-probability-of-censoring weighted Brier scores.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pam::PiecewiseHazard;
use crate::ped::SurvivalRecord;
use crate::Scalar;

/// Right-continuous step function: `values[k]` holds on `[knots[k-1], knots[k])`,
/// with `values[0]` before the first knot and the last value extended to infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction<T> {
    pub knots: Vec<T>,
    pub values: Vec<T>,
}

impl<T: Scalar> StepFunction<T> {
    pub fn new(knots: Vec<T>, values: Vec<T>) -> Result<Self> {
        if values.len() != knots.len() + 1 {
            return Err(Error::Shape(format!(
                "{} values for {} jump points",
                values.len(),
                knots.len()
            )));
        }
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("step function knots must increase".into()));
        }
        Ok(Self { knots, values })
    }

    pub fn constant(v: T) -> Self {
        Self {
            knots: Vec::new(),
            values: vec![v],
        }
    }

    pub fn eval(&self, t: T) -> T {
        self.values[self.knots.partition_point(|&k| k <= t)]
    }

    /// Left limit at `t`.
    pub fn eval_left(&self, t: T) -> T {
        self.values[self.knots.partition_point(|&k| k < t)]
    }
}

/// Anything that yields a survival probability at time `t` for one subject.
pub trait SurvivalCurve<T> {
    fn survival_at(&self, t: T) -> T;
}

impl<T: Scalar> SurvivalCurve<T> for StepFunction<T> {
    fn survival_at(&self, t: T) -> T {
        self.eval(t)
    }
}

impl<T: Scalar> SurvivalCurve<T> for PiecewiseHazard<T> {
    fn survival_at(&self, t: T) -> T {
        self.survival(t)
    }
}

impl<T, F: Fn(T) -> T> SurvivalCurve<T> for F {
    fn survival_at(&self, t: T) -> T {
        self(t)
    }
}

fn sorted_by_time<T: Scalar>(times: &[T], flags: &[bool]) -> Vec<(T, bool)> {
    let mut pairs: Vec<(T, bool)> = times.iter().copied().zip(flags.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    pairs
}

/// Product-limit estimate. At a time shared by `counted` and non-counted
/// observations, `ties_leave_first` removes the non-counted ones from the risk
/// set before the counted drop; otherwise both are at risk.
fn product_limit<T: Scalar>(times: &[T], counted: &[bool], ties_leave_first: bool) -> Result<StepFunction<T>> {
    if times.is_empty() {
        return Err(Error::Empty);
    }
    let pairs = sorted_by_time(times, counted);
    let mut at_risk = pairs.len();
    let mut surv = T::one();
    let mut knots = Vec::new();
    let mut values = vec![T::one()];
    let mut i = 0;
    while i < pairs.len() {
        let t = pairs[i].0;
        let mut d = 0;
        let mut other = 0;
        while i < pairs.len() && pairs[i].0 == t {
            if pairs[i].1 {
                d += 1;
            } else {
                other += 1;
            }
            i += 1;
        }
        let n = if ties_leave_first { at_risk - other } else { at_risk };
        if d > 0 {
            surv = surv * (T::one() - T::from_usize_lossy(d) / T::from_usize_lossy(n));
            knots.push(t);
            values.push(surv);
        }
        at_risk -= d + other;
    }
    StepFunction::new(knots, values)
}

/// Kaplan-Meier estimate of the survival function. Censorings tied with events
/// stay in the risk set at that time.
pub fn kaplan_meier<T: Scalar>(records: &[SurvivalRecord<T>]) -> Result<StepFunction<T>> {
    let times: Vec<T> = records.iter().map(|r| r.time).collect();
    let status: Vec<bool> = records.iter().map(|r| r.status).collect();
    product_limit(&times, &status, false)
}

/// Kaplan-Meier estimate of the censoring survivor function `G`. Events tied
/// with censorings are taken to happen first and leave the risk set.
pub fn censoring_km<T: Scalar>(records: &[SurvivalRecord<T>]) -> Result<StepFunction<T>> {
    let times: Vec<T> = records.iter().map(|r| r.time).collect();
    let censored: Vec<bool> = records.iter().map(|r| !r.status).collect();
    product_limit(&times, &censored, true)
}

/// Brier score at one time with the number of subjects dropped for a zero weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrierPoint<T> {
    pub bs: T,
    pub dropped: usize,
}

/// IPCW Brier score at `t`. `curves[i]` is the predicted survival of `test[i]`.
pub fn brier_score<T: Scalar, C: SurvivalCurve<T>>(
    test: &[SurvivalRecord<T>],
    curves: &[C],
    t: T,
    cens_km: &StepFunction<T>,
) -> Result<BrierPoint<T>> {
    if test.len() != curves.len() {
        return Err(Error::Shape(format!(
            "{} subjects but {} predictions",
            test.len(),
            curves.len()
        )));
    }
    let g_t = cens_km.eval(t);
    let mut sum = T::zero();
    let mut used = 0usize;
    let mut dropped = 0usize;
    for (rec, curve) in test.iter().zip(curves) {
        if rec.time <= t && rec.status {
            let g = cens_km.eval_left(rec.time);
            if g > T::zero() {
                let s = curve.survival_at(t);
                sum += s * s / g;
                used += 1;
            } else {
                dropped += 1;
            }
        } else if rec.time > t {
            if g_t > T::zero() {
                let s = curve.survival_at(t);
                sum += (T::one() - s) * (T::one() - s) / g_t;
                used += 1;
            } else {
                dropped += 1;
            }
        } else {
            // censored before t: zero contribution, still counted
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::NoMass);
    }
    Ok(BrierPoint {
        bs: sum / T::from_usize_lossy(used),
        dropped,
    })
}

/// Brier curve on a grid and the integrated score over `[0, tau]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrierResult<T> {
    pub times: Vec<T>,
    pub bs: Vec<T>,
    pub tau: T,
    pub ibs: T,
    /// Largest number of zero-weight subjects dropped at any grid time.
    pub dropped: usize,
}

impl<T: Scalar> BrierResult<T> {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["t", "bs"])?;
        for (t, b) in self.times.iter().zip(&self.bs) {
            wtr.write_record([t.to_string(), b.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Trapezoid rule over `(times, values)`, with the first value held constant back to 0.
pub fn integrate_from_zero<T: Scalar>(times: &[T], values: &[T]) -> T {
    let Some(&first) = times.first() else {
        return T::zero();
    };
    let half = T::lit(0.5);
    let mut area = values[0] * first;
    for k in 1..times.len() {
        area += half * (values[k] + values[k - 1]) * (times[k] - times[k - 1]);
    }
    area
}

/// Distinct event times of `test` in `(0, tau]`.
pub fn event_grid<T: Scalar>(test: &[SurvivalRecord<T>], tau: T) -> Vec<T> {
    let mut grid: Vec<T> = test
        .iter()
        .filter(|r| r.status && r.time > T::zero() && r.time <= tau)
        .map(|r| r.time)
        .collect();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    grid.dedup();
    grid
}

/// Brier score integrated over `[0, tau]` on the given grid, divided by `tau`.
pub fn integrated_brier_on_grid<T: Scalar, C: SurvivalCurve<T>>(
    test: &[SurvivalRecord<T>],
    curves: &[C],
    grid: &[T],
    tau: T,
    cens_km: &StepFunction<T>,
) -> Result<BrierResult<T>> {
    if !(tau > T::zero()) {
        return Err(Error::Config("horizon must be positive".into()));
    }
    if grid.is_empty() {
        return Err(Error::NoEventTimes { tau: tau.as_f64() });
    }
    let mut bs = Vec::with_capacity(grid.len());
    let mut dropped = 0;
    for &t in grid {
        let p = brier_score(test, curves, t, cens_km)?;
        bs.push(p.bs);
        dropped = dropped.max(p.dropped);
    }
    let ibs = integrate_from_zero(grid, &bs) / tau;
    Ok(BrierResult {
        times: grid.to_vec(),
        bs,
        tau,
        ibs,
        dropped,
    })
}

/// Integrated Brier score over `[0, tau]` using the distinct test event times as grid.
pub fn integrated_brier<T: Scalar, C: SurvivalCurve<T>>(
    test: &[SurvivalRecord<T>],
    curves: &[C],
    tau: T,
    cens_km: &StepFunction<T>,
) -> Result<BrierResult<T>> {
    let grid = event_grid(test, tau);
    integrated_brier_on_grid(test, curves, &grid, tau, cens_km)
}

/// Signed relative difference in percent.
pub fn relative_ibs<T: Scalar>(model_ibs: T, reference_ibs: T) -> Result<T> {
    if !(reference_ibs > T::zero()) {
        return Err(Error::ZeroReference);
    }
    Ok(T::lit(100.0) * (model_ibs - reference_ibs) / reference_ibs)
}

/// Linear-interpolation sample quantile (type 7) of unsorted data.
pub fn quantile<T: Scalar>(data: &[T], q: f64) -> Result<T> {
    if data.is_empty() {
        return Err(Error::Empty);
    }
    let mut v = data.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = T::lit(h - lo as f64);
    Ok(v[lo] + (v[hi] - v[lo]) * frac)
}

/// Evaluation horizons: 25%, 50% and 75% quantiles of the uncensored training times.
pub fn quartile_horizons<T: Scalar>(train: &[SurvivalRecord<T>]) -> Result<[T; 3]> {
    let events: Vec<T> = train.iter().filter(|r| r.status).map(|r| r.time).collect();
    if events.is_empty() {
        return Err(Error::NoEvents);
    }
    Ok([
        quantile(&events, 0.25)?,
        quantile(&events, 0.5)?,
        quantile(&events, 0.75)?,
    ])
}
