//! Piecewise exponential additive models.
//!
//! The log-hazard in interval `j` is `B_ij w`, an intercept plus a penalized
//! spline of the interval time, linear feature effects and penalized feature
//! smooths. Coefficients minimize the penalized Poisson negative log-likelihood
//! with the log time at risk as offset.

use std::ops::Range;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::basis::{difference_penalty, CenterTransform, PenaltyMatrix, SplineSpec};
use crate::error::{Error, Result};
use crate::linalg::solve_spd_with_ridge;
use crate::ped::{CutPoints, PedData};
use crate::Scalar;

/// Basis size and penalty of a smooth whose range is taken from the training data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmoothBasis {
    pub degree: usize,
    pub n_basis: usize,
    pub penalty_order: usize,
}

impl SmoothBasis {
    pub const fn cubic(n_basis: usize) -> Self {
        Self {
            degree: 3,
            n_basis,
            penalty_order: 2,
        }
    }

    /// A single constant basis function; it is absorbed by the intercept and adds no columns.
    pub const fn constant() -> Self {
        Self {
            degree: 0,
            n_basis: 1,
            penalty_order: 0,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.n_basis <= 1
    }

    fn with_range<T: Scalar>(&self, lo: T, hi: T) -> Result<SplineSpec<T>> {
        SplineSpec::new(self.degree, self.n_basis, lo, hi, self.penalty_order)
    }
}

impl Default for SmoothBasis {
    fn default() -> Self {
        Self::cubic(10)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "term", rename_all = "snake_case")]
pub enum Term {
    Intercept,
    /// Smooth of the interval time `t_j`.
    Baseline { basis: SmoothBasis },
    Linear { feature: String },
    Smooth { feature: String, basis: SmoothBasis },
}

/// Terms of the additive predictor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredSpec {
    pub terms: Vec<Term>,
}

impl StructuredSpec {
    /// Intercept plus a penalized baseline smooth.
    pub fn with_baseline(basis: SmoothBasis) -> Self {
        Self {
            terms: vec![Term::Intercept, Term::Baseline { basis }],
        }
    }

    /// Constant hazard.
    pub fn intercept_only() -> Self {
        Self::with_baseline(SmoothBasis::constant())
    }

    pub fn linear(mut self, feature: &str) -> Self {
        self.terms.push(Term::Linear {
            feature: feature.to_string(),
        });
        self
    }

    pub fn smooth(mut self, feature: &str, basis: SmoothBasis) -> Self {
        self.terms.push(Term::Smooth {
            feature: feature.to_string(),
            basis,
        });
        self
    }

    pub fn validate(&self) -> Result<()> {
        let intercepts = self.terms.iter().filter(|t| matches!(t, Term::Intercept)).count();
        let baselines = self
            .terms
            .iter()
            .filter(|t| matches!(t, Term::Baseline { .. }))
            .count();
        if intercepts != 1 || baselines != 1 {
            return Err(Error::Config(format!(
                "spec needs exactly one intercept and one baseline term (got {intercepts} and {baselines})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Intercept,
    Baseline,
    Linear,
    Smooth,
}

/// A contiguous group of design columns belonging to one term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block<T> {
    pub kind: BlockKind,
    pub name: String,
    pub columns: Range<usize>,
    /// Position of the source feature in the feature vector.
    pub feature: Option<usize>,
    pub spline: Option<SplineSpec<T>>,
    pub center: Option<CenterTransform<T>>,
    /// Penalty in the (centered) coefficient coordinates of this block.
    pub penalty: Option<PenaltyMatrix<T>>,
}

impl<T: Scalar> Block<T> {
    fn fill(&self, t_j: T, features: &[T], out: &mut [T]) {
        let dst = &mut out[self.columns.clone()];
        match self.kind {
            BlockKind::Intercept => dst[0] = T::one(),
            BlockKind::Linear => dst[0] = features[self.feature.expect("linear block has a feature")],
            BlockKind::Baseline | BlockKind::Smooth => {
                let x = match self.kind {
                    BlockKind::Baseline => t_j,
                    _ => features[self.feature.expect("smooth block has a feature")],
                };
                let spline = self.spline.as_ref().expect("smooth block has a spline");
                let raw = spline.eval(x);
                let row = match &self.center {
                    Some(c) => c.apply_row(raw.view()),
                    None => raw,
                };
                for (d, v) in dst.iter_mut().zip(row.iter()) {
                    *d = *v;
                }
            }
        }
    }
}

/// Column map from terms to design columns, with everything needed to build rows for new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignLayout<T> {
    pub blocks: Vec<Block<T>>,
    pub n_columns: usize,
    pub feature_names: Vec<String>,
}

impl<T: Scalar> DesignLayout<T> {
    pub fn block(&self, name: &str) -> Option<&Block<T>> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Blocks carrying a smoothing parameter, in `psi` order.
    pub fn penalized_blocks(&self) -> impl Iterator<Item = &Block<T>> {
        self.blocks.iter().filter(|b| b.penalty.is_some())
    }

    pub fn n_penalties(&self) -> usize {
        self.penalized_blocks().count()
    }

    pub fn penalties(&self) -> Penalties<T> {
        Penalties {
            blocks: self
                .penalized_blocks()
                .map(|b| (b.columns.clone(), b.penalty.clone().expect("filtered")))
                .collect(),
        }
    }

    pub fn row(&self, t_j: T, features: &[T]) -> Array1<T> {
        let mut out = vec![T::zero(); self.n_columns];
        for b in &self.blocks {
            b.fill(t_j, features, &mut out);
        }
        Array1::from(out)
    }

    /// Design for new PED data using the stored ranges and centering.
    pub fn design(&self, ped: &PedData<T>) -> Result<Array2<T>> {
        if ped.feature_names != self.feature_names {
            return Err(Error::Config(format!(
                "feature names {:?} do not match the fitted layout {:?}",
                ped.feature_names, self.feature_names
            )));
        }
        let mut x = Array2::zeros((ped.rows.len(), self.n_columns));
        for (r, row) in ped.rows.iter().enumerate() {
            let dst = x.row_mut(r).into_slice().expect("standard layout");
            for b in &self.blocks {
                b.fill(row.t_j, &row.features, dst);
            }
        }
        Ok(x)
    }

    fn is_time_block(b: &Block<T>) -> bool {
        matches!(b.kind, BlockKind::Intercept | BlockKind::Baseline)
    }

    /// Intercept plus baseline contribution at each interval's closing cut point.
    pub fn time_profile(&self, w: ArrayView1<'_, T>, cuts: &CutPoints<T>) -> Array1<T> {
        let mut row = vec![T::zero(); self.n_columns];
        let time_blocks: Vec<&Block<T>> = self.blocks.iter().filter(|b| Self::is_time_block(b)).collect();
        (1..=cuts.n_intervals())
            .map(|j| {
                row.iter_mut().for_each(|v| *v = T::zero());
                for b in &time_blocks {
                    b.fill(cuts.upper(j), &[], &mut row);
                }
                ArrayView1::from(&row[..]).dot(&w)
            })
            .collect()
    }

    /// Contribution of the time-constant feature terms.
    pub fn covariate_effect(&self, w: ArrayView1<'_, T>, features: &[T]) -> T {
        let mut row = vec![T::zero(); self.n_columns];
        for b in self.blocks.iter().filter(|b| !Self::is_time_block(b)) {
            b.fill(T::zero(), features, &mut row);
        }
        ArrayView1::from(&row[..]).dot(&w)
    }
}

fn feature_range<T: Scalar>(ped: &PedData<T>, idx: usize, name: &str) -> Result<(T, T)> {
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for r in &ped.rows {
        lo = lo.min(r.features[idx]);
        hi = hi.max(r.features[idx]);
    }
    if !(lo < hi) {
        return Err(Error::Config(format!("feature {name} is constant; cannot build a smooth")));
    }
    Ok((lo, hi))
}

fn smooth_block<T: Scalar>(
    kind: BlockKind,
    name: String,
    feature: Option<usize>,
    spline: SplineSpec<T>,
    inputs: impl Iterator<Item = T>,
    start: usize,
) -> Result<Block<T>> {
    let mut sums = Array1::<T>::zeros(spline.n_basis);
    for x in inputs {
        sums += &spline.eval(x);
    }
    let center = CenterTransform::from_column_sums(sums.view())?;
    let penalty = center.penalty(&difference_penalty(spline.n_basis, spline.penalty_order)?);
    let width = center.n_constrained();
    Ok(Block {
        kind,
        name,
        columns: start..start + width,
        feature,
        spline: Some(spline),
        center: Some(center),
        penalty: Some(penalty),
    })
}

/// Builds the column layout from training data and returns it with the design.
/// Column order: intercept, baseline, linear terms, smooth terms.
pub fn build_design<T: Scalar>(
    ped: &PedData<T>,
    spec: &StructuredSpec,
) -> Result<(DesignLayout<T>, Array2<T>)> {
    spec.validate()?;
    let lookup = |name: &str| {
        ped.feature_index(name)
            .ok_or_else(|| Error::Config(format!("unknown feature {name:?}")))
    };
    let mut blocks = Vec::new();
    let mut next = 0;
    blocks.push(Block {
        kind: BlockKind::Intercept,
        name: "intercept".into(),
        columns: 0..1,
        feature: None,
        spline: None,
        center: None,
        penalty: None,
    });
    next += 1;

    for term in &spec.terms {
        if let Term::Baseline { basis } = term {
            if !basis.is_constant() {
                let spline = basis.with_range(T::zero(), ped.cuts.last())?;
                let b = smooth_block(
                    BlockKind::Baseline,
                    "baseline".into(),
                    None,
                    spline,
                    ped.rows.iter().map(|r| r.t_j),
                    next,
                )?;
                next = b.columns.end;
                blocks.push(b);
            }
        }
    }
    for term in &spec.terms {
        if let Term::Linear { feature } = term {
            let idx = lookup(feature)?;
            blocks.push(Block {
                kind: BlockKind::Linear,
                name: feature.clone(),
                columns: next..next + 1,
                feature: Some(idx),
                spline: None,
                center: None,
                penalty: None,
            });
            next += 1;
        }
    }
    for term in &spec.terms {
        if let Term::Smooth { feature, basis } = term {
            let idx = lookup(feature)?;
            let (lo, hi) = feature_range(ped, idx, feature)?;
            let spline = basis.with_range(lo, hi)?;
            let b = smooth_block(
                BlockKind::Smooth,
                format!("s({feature})"),
                Some(idx),
                spline,
                ped.rows.iter().map(|r| r.features[idx]),
                next,
            )?;
            next = b.columns.end;
            blocks.push(b);
        }
    }
    let layout = DesignLayout {
        blocks,
        n_columns: next,
        feature_names: ped.feature_names.clone(),
    };
    let design = layout.design(ped)?;
    Ok((layout, design))
}

/// Block-diagonal quadratic penalty `sum_l psi_l theta_l' S_l theta_l`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Penalties<T> {
    pub blocks: Vec<(Range<usize>, PenaltyMatrix<T>)>,
}

impl<T: Scalar> Penalties<T> {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn value(&self, w: ArrayView1<'_, T>, psi: &[T]) -> T {
        self.blocks
            .iter()
            .zip(psi)
            .map(|((cols, s), &p)| p * s.quadratic_form(w.slice(ndarray::s![cols.clone()])))
            .sum()
    }

    /// Unweighted roughness `theta' S theta` summed over blocks.
    pub fn roughness(&self, w: ArrayView1<'_, T>) -> T {
        self.blocks
            .iter()
            .map(|(cols, s)| s.quadratic_form(w.slice(ndarray::s![cols.clone()])))
            .sum()
    }

    /// Adds `scale * 2 psi S w` to `grad`.
    pub fn add_gradient(&self, w: ArrayView1<'_, T>, psi: &[T], scale: T, grad: &mut Array1<T>) {
        let two = T::lit(2.0);
        for ((cols, s), &p) in self.blocks.iter().zip(psi) {
            let g = s.matrix.dot(&w.slice(ndarray::s![cols.clone()]));
            let mut dst = grad.slice_mut(ndarray::s![cols.clone()]);
            dst.scaled_add(scale * two * p, &g);
        }
    }

    pub fn add_hessian(&self, psi: &[T], hess: &mut Array2<T>) {
        let two = T::lit(2.0);
        for ((cols, s), &p) in self.blocks.iter().zip(psi) {
            let mut dst = hess.slice_mut(ndarray::s![cols.clone(), cols.clone()]);
            dst.scaled_add(two * p, &s.matrix);
        }
    }
}

fn check_dims<T: Scalar>(
    w: ArrayView1<'_, T>,
    design: ArrayView2<'_, T>,
    t_risk: ArrayView1<'_, T>,
    status: ArrayView1<'_, T>,
    psi: &[T],
    penalties: &Penalties<T>,
) -> Result<()> {
    if design.ncols() != w.len() || design.nrows() != t_risk.len() || t_risk.len() != status.len() {
        return Err(Error::Shape(format!(
            "design {:?}, w {}, t_risk {}, status {}",
            design.dim(),
            w.len(),
            t_risk.len(),
            status.len()
        )));
    }
    if psi.len() != penalties.len() {
        return Err(Error::Shape(format!(
            "{} smoothing parameters for {} penalties",
            psi.len(),
            penalties.len()
        )));
    }
    Ok(())
}

/// Poisson negative log-likelihood of PED rows given linear predictors, with
/// `log t_risk` as offset. The `log(delta!)` term vanishes for binary status.
pub fn poisson_nll<T: Scalar>(
    eta: ArrayView1<'_, T>,
    t_risk: ArrayView1<'_, T>,
    status: ArrayView1<'_, T>,
) -> Result<T> {
    let mut nll = T::zero();
    for (row, ((&e, &t), &d)) in eta.iter().zip(t_risk.iter()).zip(status.iter()).enumerate() {
        if !e.is_finite() {
            return Err(Error::NonFinitePredictor { row });
        }
        nll += t * e.exp() - d * (e + t.ln());
    }
    Ok(nll)
}

/// Penalized negative Poisson log-likelihood of the PED rows.
pub fn penalized_nll<T: Scalar>(
    w: ArrayView1<'_, T>,
    design: ArrayView2<'_, T>,
    t_risk: ArrayView1<'_, T>,
    status: ArrayView1<'_, T>,
    psi: &[T],
    penalties: &Penalties<T>,
) -> Result<T> {
    check_dims(w, design, t_risk, status, psi, penalties)?;
    let eta = design.dot(&w);
    Ok(poisson_nll(eta.view(), t_risk, status)? + penalties.value(w, psi))
}

/// Analytic gradient `-B'(delta - mu) + 2 S_psi w`.
pub fn penalized_nll_gradient<T: Scalar>(
    w: ArrayView1<'_, T>,
    design: ArrayView2<'_, T>,
    t_risk: ArrayView1<'_, T>,
    status: ArrayView1<'_, T>,
    psi: &[T],
    penalties: &Penalties<T>,
) -> Result<Array1<T>> {
    check_dims(w, design, t_risk, status, psi, penalties)?;
    let eta = design.dot(&w);
    let resid: Array1<T> = eta
        .iter()
        .zip(t_risk.iter())
        .zip(status.iter())
        .map(|((&e, &t), &d)| t * e.exp() - d)
        .collect();
    let mut g = design.t().dot(&resid);
    penalties.add_gradient(w, psi, T::one(), &mut g);
    Ok(g)
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions<T> {
    pub max_iter: usize,
    pub rel_tol: T,
    pub grad_tol: T,
    pub ridge: T,
    /// Bound on `|B w|` inside the exponential while iterating.
    pub eta_clamp: T,
    pub max_halvings: usize,
}

impl<T: Scalar> Default for NewtonOptions<T> {
    fn default() -> Self {
        Self {
            max_iter: 200,
            rel_tol: T::lit(1e-9),
            grad_tol: T::lit(1e-8),
            ridge: T::lit(1e-8),
            eta_clamp: T::lit(30.0),
            max_halvings: 60,
        }
    }
}

/// Poisson problem on a fixed design.
pub struct PoissonProblem<'a, T> {
    pub design: ArrayView2<'a, T>,
    pub t_risk: ArrayView1<'a, T>,
    pub status: ArrayView1<'a, T>,
    pub penalties: &'a Penalties<T>,
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome<T> {
    pub w: Array1<T>,
    pub objective: T,
    pub converged: bool,
    pub n_iter: usize,
}

impl<'a, T: Scalar> PoissonProblem<'a, T> {
    pub fn objective(&self, w: ArrayView1<'_, T>, psi: &[T]) -> Result<T> {
        penalized_nll(w, self.design, self.t_risk, self.status, psi, self.penalties)
    }

    fn objective_or_inf(&self, w: ArrayView1<'_, T>, psi: &[T]) -> T {
        match self.objective(w, psi) {
            Ok(v) if v.is_finite() => v,
            _ => T::infinity(),
        }
    }

    pub fn gradient(&self, w: ArrayView1<'_, T>, psi: &[T]) -> Result<Array1<T>> {
        penalized_nll_gradient(w, self.design, self.t_risk, self.status, psi, self.penalties)
    }

    fn clamped_mu(&self, w: ArrayView1<'_, T>, clamp: T) -> Array1<T> {
        let eta = self.design.dot(&w);
        eta.iter()
            .zip(self.t_risk.iter())
            .map(|(&e, &t)| t * e.max(-clamp).min(clamp).exp())
            .collect()
    }

    fn optimal(&self, g: &Array1<T>, objective: T) -> bool {
        norm(g) <= T::lit(1e-6) * (T::one() + objective.abs())
    }

    /// Newton iterations with step halving from `w0`.
    pub fn minimize(&self, w0: Array1<T>, psi: &[T], opts: &NewtonOptions<T>) -> Result<NewtonOutcome<T>> {
        let mut w = w0;
        let mut obj = self.objective(w.view(), psi)?;
        if !obj.is_finite() {
            return Err(Error::Fit("objective is not finite at the starting point".into()));
        }
        for iter in 0..opts.max_iter {
            let mu = self.clamped_mu(w.view(), opts.eta_clamp);
            let resid = &mu - &self.status;
            let mut g = self.design.t().dot(&resid);
            self.penalties.add_gradient(w.view(), psi, T::one(), &mut g);
            if norm(&g) < opts.grad_tol {
                return Ok(NewtonOutcome {
                    w,
                    objective: obj,
                    converged: true,
                    n_iter: iter,
                });
            }
            let mut scaled = self.design.to_owned();
            for (mut row, m) in scaled.axis_iter_mut(Axis(0)).zip(mu.iter()) {
                row *= m.sqrt();
            }
            let mut hess = scaled.t().dot(&scaled);
            self.penalties.add_hessian(psi, &mut hess);
            let neg_g = g.mapv(|v| -v);
            let step = solve_spd_with_ridge(&hess, neg_g.view(), opts.ridge)
                .ok_or_else(|| Error::Fit("singular Hessian after ridge fallback".into()))?;

            let mut alpha = T::one();
            let mut accepted = None;
            for _ in 0..=opts.max_halvings {
                let cand = &w + &(&step * alpha);
                let val = self.objective_or_inf(cand.view(), psi);
                if val <= obj {
                    accepted = Some((cand, val));
                    break;
                }
                alpha = alpha * T::lit(0.5);
            }
            let Some((cand, val)) = accepted else {
                // no decrease possible in floating point: we are at the minimum up to rounding
                let g = self.gradient(w.view(), psi)?;
                let converged = self.optimal(&g, obj);
                return Ok(NewtonOutcome {
                    w,
                    objective: obj,
                    converged,
                    n_iter: iter + 1,
                });
            };
            let change = (obj - val).abs() / obj.abs().max(T::min_positive_value());
            w = cand;
            obj = val;
            if change < opts.rel_tol {
                let g = self.gradient(w.view(), psi)?;
                if self.optimal(&g, obj) {
                    return Ok(NewtonOutcome {
                        w,
                        objective: obj,
                        converged: true,
                        n_iter: iter + 1,
                    });
                }
            }
        }
        Ok(NewtonOutcome {
            w,
            objective: obj,
            converged: false,
            n_iter: opts.max_iter,
        })
    }
}

fn norm<T: Scalar>(v: &Array1<T>) -> T {
    v.dot(v).sqrt()
}

/// How smoothing parameters are chosen.
#[derive(Debug, Clone)]
pub enum PsiSelection<'a, T> {
    Fixed(Vec<T>),
    /// Coordinate-wise search over `10^-4 .. 10^4` (13 values) minimizing the
    /// unpenalized Poisson nll of the validation data; ties go to the larger value.
    Grid { validation: &'a PedData<T> },
}

pub fn psi_grid<T: Scalar>() -> Vec<T> {
    (0..13)
        .map(|k| T::lit(10f64.powf(-4.0 + 2.0 * k as f64 / 3.0)))
        .collect()
}

/// Fitted PAM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PamFit<T> {
    /// Coefficients in design-column order.
    pub w: Array1<T>,
    pub spec: StructuredSpec,
    pub layout: DesignLayout<T>,
    pub psi: Vec<T>,
    pub penalties: Penalties<T>,
    pub cuts: CutPoints<T>,
    pub converged: bool,
    pub final_penalized_nll: T,
    pub n_iter: usize,
    /// Unpenalized validation nll at the selected smoothing parameters, when tuned.
    pub validation_nll: Option<T>,
}

pub(crate) fn status_vector<T: Scalar>(ped: &PedData<T>) -> Array1<T> {
    ped.rows
        .iter()
        .map(|r| if r.status { T::one() } else { T::zero() })
        .collect()
}

pub(crate) fn risk_vector<T: Scalar>(ped: &PedData<T>) -> Array1<T> {
    ped.rows.iter().map(|r| r.t_risk).collect()
}

pub fn fit_pam<T: Scalar>(
    ped: &PedData<T>,
    spec: &StructuredSpec,
    psi: PsiSelection<'_, T>,
) -> Result<PamFit<T>> {
    fit_pam_with(ped, spec, psi, &NewtonOptions::default())
}

pub fn fit_pam_with<T: Scalar>(
    ped: &PedData<T>,
    spec: &StructuredSpec,
    psi: PsiSelection<'_, T>,
    opts: &NewtonOptions<T>,
) -> Result<PamFit<T>> {
    if ped.is_empty() {
        return Err(Error::Empty);
    }
    let n_events = ped.n_events();
    if n_events == 0 {
        return Err(Error::NoEvents);
    }
    let (layout, design) = build_design(ped, spec)?;
    let penalties = layout.penalties();
    let t_risk = risk_vector(ped);
    let status = status_vector(ped);
    let problem = PoissonProblem {
        design: design.view(),
        t_risk: t_risk.view(),
        status: status.view(),
        penalties: &penalties,
    };
    let mut w0 = Array1::zeros(layout.n_columns);
    w0[0] = (T::from_usize_lossy(n_events) / t_risk.sum()).ln();

    let (outcome, psi, validation_nll) = match psi {
        PsiSelection::Fixed(psi) => {
            if psi.len() != penalties.len() {
                return Err(Error::Config(format!(
                    "{} smoothing parameters given, spec has {} smooths",
                    psi.len(),
                    penalties.len()
                )));
            }
            if psi.iter().any(|p| !(*p >= T::zero())) {
                return Err(Error::Config("smoothing parameters must be non-negative".into()));
            }
            (problem.minimize(w0, &psi, opts)?, psi, None)
        }
        PsiSelection::Grid { validation } => {
            let val_design = layout.design(validation)?;
            let val_risk = risk_vector(validation);
            let val_status = status_vector(validation);
            let val_nll = |w: &Array1<T>| -> Result<T> {
                poisson_nll(val_design.dot(w).view(), val_risk.view(), val_status.view())
            };
            let grid = psi_grid::<T>();
            let mut psi = vec![T::one(); penalties.len()];
            let mut current = problem.minimize(w0, &psi, opts)?;
            let mut best_val = val_nll(&current.w)?;
            for _sweep in 0..3 {
                let mut changed = false;
                for l in 0..psi.len() {
                    let mut warm = current.w.clone();
                    for &cand in &grid {
                        let mut trial = psi.clone();
                        trial[l] = cand;
                        let out = problem.minimize(warm.clone(), &trial, opts)?;
                        warm = out.w.clone();
                        let v = val_nll(&out.w)?;
                        // ascending grid: `<=` keeps the larger value on ties
                        if v <= best_val {
                            changed |= trial[l] != psi[l];
                            best_val = v;
                            psi = trial;
                            current = out;
                        }
                    }
                }
                if !changed {
                    break;
                }
            }
            (current, psi, Some(best_val))
        }
    };
    Ok(PamFit {
        w: outcome.w,
        spec: spec.clone(),
        layout,
        psi,
        penalties,
        cuts: ped.cuts.clone(),
        converged: outcome.converged,
        final_penalized_nll: outcome.objective,
        n_iter: outcome.n_iter,
        validation_nll,
    })
}

/// Piecewise-constant hazard over cut points, constant beyond the last cut.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseHazard<T> {
    cuts: CutPoints<T>,
    log_hazard: Vec<T>,
    /// Cumulative hazard at each cut point.
    cumulative: Vec<T>,
}

impl<T: Scalar> PiecewiseHazard<T> {
    pub fn new(cuts: CutPoints<T>, log_hazard: Vec<T>) -> Result<Self> {
        if log_hazard.len() != cuts.n_intervals() {
            return Err(Error::Shape(format!(
                "{} log-hazards for {} intervals",
                log_hazard.len(),
                cuts.n_intervals()
            )));
        }
        let mut cumulative = Vec::with_capacity(log_hazard.len() + 1);
        cumulative.push(T::zero());
        let mut acc = T::zero();
        for (j, lh) in log_hazard.iter().enumerate() {
            acc += lh.exp() * cuts.width(j + 1);
            cumulative.push(acc);
        }
        Ok(Self {
            cuts,
            log_hazard,
            cumulative,
        })
    }

    pub fn log_hazard_by_interval(&self) -> &[T] {
        &self.log_hazard
    }

    pub fn log_hazard(&self, t: T) -> T {
        self.log_hazard[self.cuts.interval_of(t) - 1]
    }

    pub fn hazard(&self, t: T) -> T {
        self.log_hazard(t).exp()
    }

    pub fn cumulative_hazard(&self, t: T) -> T {
        if !(t > T::zero()) {
            return T::zero();
        }
        let j = self.cuts.interval_of(t);
        self.cumulative[j - 1] + self.log_hazard[j - 1].exp() * (t - self.cuts.upper(j - 1))
    }

    pub fn survival(&self, t: T) -> T {
        (-self.cumulative_hazard(t)).exp()
    }
}

impl<T: Scalar> PamFit<T> {
    pub fn coefficients(&self) -> ArrayView1<'_, T> {
        self.w.view()
    }

    /// Coefficient of a linear term.
    pub fn linear_coefficient(&self, feature: &str) -> Option<T> {
        self.layout
            .blocks
            .iter()
            .find(|b| b.kind == BlockKind::Linear && b.name == feature)
            .map(|b| self.w[b.columns.start])
    }

    pub fn intercept(&self) -> T {
        self.w[0]
    }

    /// Fitted smooth of a feature (uncentered basis coordinates are not needed for prediction).
    pub fn smooth_values(&self, feature: &str, x: ArrayView1<'_, T>) -> Option<Array1<T>> {
        let b = self.layout.block(&format!("s({feature})"))?;
        let spline = b.spline.as_ref()?;
        let center = b.center.as_ref()?;
        let theta = center.expand(self.w.slice(ndarray::s![b.columns.clone()]));
        Some(x.iter().map(|&v| spline.eval(v).dot(&theta)).collect())
    }

    /// Intercept-plus-baseline log-hazard per interval.
    pub fn time_profile(&self) -> Array1<T> {
        self.layout.time_profile(self.w.view(), &self.cuts)
    }

    pub fn covariate_effect(&self, features: &[T]) -> T {
        self.layout.covariate_effect(self.w.view(), features)
    }

    /// Hazard curve for one feature vector, with an extra additive log-hazard offset.
    pub fn curve_with_offset(&self, features: &[T], offset: T) -> Result<PiecewiseHazard<T>> {
        self.curve_from_profile(&self.time_profile(), features, offset)
    }

    pub fn curve(&self, features: &[T]) -> Result<PiecewiseHazard<T>> {
        self.curve_with_offset(features, T::zero())
    }

    /// Same as [`Self::curve_with_offset`] but reusing a precomputed [`Self::time_profile`].
    pub fn curve_from_profile(
        &self,
        profile: &Array1<T>,
        features: &[T],
        offset: T,
    ) -> Result<PiecewiseHazard<T>> {
        if features.len() != self.layout.feature_names.len() {
            return Err(Error::Shape(format!(
                "{} features given, model expects {}",
                features.len(),
                self.layout.feature_names.len()
            )));
        }
        let shift = self.covariate_effect(features) + offset;
        PiecewiseHazard::new(self.cuts.clone(), profile.iter().map(|&p| p + shift).collect())
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
}

/// `exp(B(t, x) w)` with `t_j` the closing cut of the interval containing `t`.
pub fn predict_hazard<T: Scalar>(fit: &PamFit<T>, features: &[T], t: T) -> T {
    let j = fit.cuts.interval_of(t);
    fit.layout.row(fit.cuts.upper(j), features).dot(&fit.w).exp()
}

/// `exp(-integral_0^t h)`, with the integral a finite sum over intervals.
pub fn predict_survival<T: Scalar>(fit: &PamFit<T>, features: &[T], t: T) -> Result<T> {
    Ok(fit.curve(features)?.survival(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ped::{transform_to_ped, CutStrategy, SurvivalRecord};
    use crate::ped::make_cut_points;
    use ndarray::array;

    fn single_interval_ped(times: &[f64]) -> PedData<f64> {
        let recs: Vec<_> = times
            .iter()
            .enumerate()
            .map(|(i, &t)| SurvivalRecord::new(i as u64, t, true, vec![]))
            .collect();
        let cuts = CutPoints::new(vec![0.0, 100.0]).unwrap();
        transform_to_ped(&recs, &cuts, &[]).unwrap()
    }

    #[test]
    fn intercept_only_design_is_ones() {
        let ped = single_interval_ped(&[1.0, 2.0]);
        let (layout, x) = build_design(&ped, &StructuredSpec::intercept_only()).unwrap();
        assert_eq!(layout.n_columns, 1);
        assert_eq!(x, Array2::<f64>::ones((2, 1)));
    }

    #[test]
    fn nll_at_zero() {
        let x = Array2::<f64>::ones((1, 1));
        let v = penalized_nll(
            array![0.0].view(),
            x.view(),
            array![1.0].view(),
            array![0.0].view(),
            &[],
            &Penalties::default(),
        )
        .unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn non_finite_predictor_reports_row() {
        let x = array![[1.0], [f64::NAN]];
        let err = penalized_nll(
            array![1.0].view(),
            x.view(),
            array![1.0, 1.0].view(),
            array![0.0, 1.0].view(),
            &[],
            &Penalties::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinitePredictor { row: 1 }));
    }

    #[test]
    fn exponential_mle() {
        let ped = single_interval_ped(&[1.0, 2.0, 3.0]);
        let fit = fit_pam(&ped, &StructuredSpec::intercept_only(), PsiSelection::Fixed(vec![])).unwrap();
        assert!(fit.converged);
        assert!((fit.intercept().exp() - 0.5).abs() < 1e-8);
        assert!((predict_hazard(&fit, &[], 2.5) - 0.5).abs() < 1e-8);
        let s = predict_survival(&fit, &[], 2.0).unwrap();
        assert!((s - (-1.0f64).exp()).abs() < 1e-8);
        assert_eq!(predict_survival(&fit, &[], 0.0).unwrap(), 1.0);
    }

    #[test]
    fn unknown_feature_is_config_error() {
        let ped = single_interval_ped(&[1.0, 2.0]);
        let spec = StructuredSpec::intercept_only().linear("age");
        assert!(matches!(build_design(&ped, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn spec_needs_one_intercept_and_baseline() {
        let spec = StructuredSpec { terms: vec![Term::Intercept] };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn no_events_is_rejected() {
        let recs = vec![SurvivalRecord::new(0, 1.0, false, vec![])];
        let cuts = CutPoints::new(vec![0.0, 2.0]).unwrap();
        let ped = transform_to_ped(&recs, &cuts, &[]).unwrap();
        let err = fit_pam(&ped, &StructuredSpec::intercept_only(), PsiSelection::Fixed(vec![])).unwrap_err();
        assert!(matches!(err, Error::NoEvents));
    }

    #[test]
    fn piecewise_survival_sums_intervals() {
        let cuts = CutPoints::new(vec![0.0, 1.0, 3.0]).unwrap();
        let h = PiecewiseHazard::new(cuts, vec![0.5f64.ln(), 2.0f64.ln()]).unwrap();
        assert!((h.cumulative_hazard(2.0) - (0.5 + 2.0)).abs() < 1e-12);
        assert!((h.cumulative_hazard(4.0) - (0.5 + 4.0 + 2.0)).abs() < 1e-12);
        assert_eq!(h.hazard(1.0), 0.5);
        assert!((h.hazard(1.0 + 1e-9) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn column_count_and_json_round_trip() {
        let recs: Vec<_> = (0..40)
            .map(|i| {
                let x = i as f64 / 40.0;
                SurvivalRecord::new(i, 0.5 + (i % 7) as f64, i % 3 != 0, vec![x, 1.0 - x * x])
            })
            .collect();
        let cuts = make_cut_points(&recs, CutStrategy::EventTimes).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        let ped = transform_to_ped(&recs, &cuts, &names).unwrap();
        let spec = StructuredSpec::with_baseline(SmoothBasis::cubic(6))
            .linear("a")
            .smooth("b", SmoothBasis::cubic(5));
        let (layout, x) = build_design(&ped, &spec).unwrap();
        assert_eq!(layout.n_columns, 1 + 5 + 1 + 4);
        assert_eq!(x.ncols(), 11);
        // linear column is verbatim
        for (r, row) in ped.rows.iter().enumerate() {
            assert_eq!(x[[r, 6]], row.features[0]);
        }
        let fit = fit_pam(&ped, &spec, PsiSelection::Fixed(vec![1.0, 1.0])).unwrap();
        let back = PamFit::<f64>::from_json(&fit.to_json().unwrap()).unwrap();
        assert_eq!(back, fit);
    }
}
