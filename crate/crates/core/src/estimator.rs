//! Nested maximum-likelihood fitting.
//!
//! The inner problem is a ridge-penalized logistic regression over the
//! design columns, solved by damped Newton steps on sparse rows. The outer
//! problem searches the nonlinear feature parameters inside their boxes
//! with [`minimize_bounded`], running one full inner fit per candidate.

use std::cell::RefCell;

use indexmap::IndexMap;
use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::data::{ColumnMap, Dataset, HistoryPolicy};
use crate::dsl::{render_model, ModelSpec};
use crate::error::{Error, Result};
use crate::features::{build_design_matrix, resolve_params, DesignLayout, DesignMatrix, FeatureData, TermParams};
use crate::search::{minimize_bounded, SearchConfig};

/// Default ridge penalty, in log-likelihood units per squared coefficient.
pub const DEFAULT_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerOptions {
    pub ridge: f64,
    pub max_iterations: usize,
    pub gradient_tol: f64,
    pub relative_ll_tol: f64,
    /// Coefficient magnitude treated as evidence of separation.
    pub separation_bound: f64,
}

impl Default for InnerOptions {
    fn default() -> Self {
        InnerOptions {
            ridge: DEFAULT_RIDGE,
            max_iterations: 100,
            gradient_tol: 1e-8,
            relative_ll_tol: 1e-10,
            separation_bound: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerFit {
    pub coefficients: Vec<f64>,
    /// Unpenalized log-likelihood at the solution.
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub separated: bool,
}

/// `y·η − ln(1 + e^η)`, the log-likelihood of one Bernoulli outcome.
pub fn bernoulli_ll(eta: f64, y: f64) -> f64 {
    y * eta - softplus(eta)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_likelihood(design: &DesignMatrix, beta: &[f64]) -> f64 {
    (0..design.n_rows())
        .map(|i| bernoulli_ll(design.dot(i, beta), design.outcomes[i]))
        .sum()
}

/// Inner objective: log-likelihood minus `ridge·‖β‖²/2`.
pub fn penalized_log_likelihood(design: &DesignMatrix, beta: &[f64], ridge: f64) -> f64 {
    log_likelihood(design, beta) - 0.5 * ridge * beta.iter().map(|b| b * b).sum::<f64>()
}

pub fn gradient(design: &DesignMatrix, beta: &[f64], ridge: f64) -> Vec<f64> {
    let mut g: Vec<f64> = beta.iter().map(|b| -ridge * b).collect();
    for i in 0..design.n_rows() {
        let residual = design.outcomes[i] - sigmoid(design.dot(i, beta));
        let (idx, vals) = design.row(i);
        for (&j, &v) in idx.iter().zip(vals) {
            g[j as usize] += residual * v;
        }
    }
    g
}

/// Log-likelihood of predicting the constant `rate` for `outcomes`.
pub fn null_log_likelihood(outcomes: &[f64], rate: f64) -> f64 {
    outcomes
        .iter()
        .map(|&y| {
            let p = if y == 1.0 { rate } else { 1.0 - rate };
            if p > 0.0 {
                p.ln()
            } else if p == 0.0 {
                f64::NEG_INFINITY
            } else {
                0.0
            }
        })
        .sum()
}

/// Lower-triangular Cholesky factor of a dense symmetric matrix, or the
/// index of the first pivot that fails the relative tolerance.
#[allow(clippy::needless_range_loop)]
fn cholesky(a: &[Vec<f64>], rel_tol: f64) -> std::result::Result<Vec<Vec<f64>>, usize> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut d = a[j][j];
        for k in 0..j {
            d -= l[j][k] * l[j][k];
        }
        if d.is_nan() || d <= rel_tol * a[j][j].abs() || d <= 0.0 {
            return Err(j);
        }
        let d = d.sqrt();
        l[j][j] = d;
        for i in j + 1..n {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = s / d;
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = l.len();
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i][k] * y[k];
        }
        y[i] /= l[i][i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k][i] * y[k];
        }
        y[i] /= l[i][i];
    }
    y
}

/// Weighted cross-product `Xᵀ W X` restricted to `active` columns.
#[allow(clippy::needless_range_loop)]
fn weighted_gram(
    design: &DesignMatrix,
    weights: Option<&[f64]>,
    position: &[Option<usize>],
    p: usize,
) -> Vec<Vec<f64>> {
    let mut h = vec![vec![0.0; p]; p];
    for i in 0..design.n_rows() {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        let (idx, vals) = design.row(i);
        for (a, (&ja, &va)) in idx.iter().zip(vals).enumerate() {
            let Some(ra) = position[ja as usize] else { continue };
            for (&jb, &vb) in idx[..=a].iter().zip(&vals[..=a]) {
                let Some(rb) = position[jb as usize] else { continue };
                let (hi, lo) = if ra >= rb { (ra, rb) } else { (rb, ra) };
                h[hi][lo] += w * va * vb;
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            h[j][i] = h[i][j];
        }
    }
    h
}

/// Detect exact linear dependence among active columns via the Gram
/// matrix; the error names the dependent column and its partners.
fn check_collinearity(design: &DesignMatrix, active: &[usize], position: &[Option<usize>]) -> Result<()> {
    let gram = weighted_gram(design, None, position, active.len());
    // scale to unit diagonal so the tolerance is relative
    let scale: Vec<f64> = (0..active.len()).map(|i| gram[i][i].sqrt()).collect();
    let normalized: Vec<Vec<f64>> = (0..active.len())
        .map(|i| (0..active.len()).map(|j| gram[i][j] / (scale[i] * scale[j])).collect())
        .collect();
    match cholesky(&normalized, 1e-10) {
        Ok(_) => Ok(()),
        Err(bad) => {
            // express the failing column through the ones before it
            let prefix: Vec<Vec<f64>> = normalized[..bad].iter().map(|r| r[..bad].to_vec()).collect();
            let rhs: Vec<f64> = normalized[bad][..bad].to_vec();
            let others = match cholesky(&prefix, 0.0) {
                Ok(l) => {
                    let a = cholesky_solve(&l, &rhs);
                    a.iter()
                        .enumerate()
                        .filter(|(_, v)| v.abs() > 1e-6)
                        .map(|(k, _)| design.columns[active[k]].clone())
                        .collect()
                }
                Err(_) => Vec::new(),
            };
            Err(Error::Collinear {
                column: design.columns[active[bad]].clone(),
                others,
            })
        }
    }
}

/// Maximize the penalized log-likelihood of `design`.
///
/// All-zero columns keep a zero coefficient. Starting from `start` (zeros by
/// default), Newton steps with step halving run until the largest gradient
/// component falls below `gradient_tol` or the relative objective change
/// below `relative_ll_tol`.
pub fn fit_inner(design: &DesignMatrix, options: &InnerOptions, start: Option<&[f64]>) -> Result<InnerFit> {
    let n_cols = design.n_cols();
    if design.n_rows() == 0 {
        return Err(Error::EmptyDesign("no rows".into()));
    }
    if design.n_rows() <= n_cols {
        warn!("design has {} rows for {} columns", design.n_rows(), n_cols);
    }
    let zero: std::collections::HashSet<usize> = design.zero_columns().into_iter().collect();
    let active: Vec<usize> = (0..n_cols).filter(|j| !zero.contains(j)).collect();
    let mut position = vec![None; n_cols];
    for (r, &j) in active.iter().enumerate() {
        position[j] = Some(r);
    }
    check_collinearity(design, &active, &position)?;

    let p = active.len();
    let mut beta = start.map_or_else(|| vec![0.0; n_cols], <[f64]>::to_vec);
    for &j in &zero {
        beta[j] = 0.0;
    }
    let ridge = options.ridge;
    let mut objective = penalized_log_likelihood(design, &beta, ridge);
    let mut iterations = 0;
    let mut converged = false;
    let mut separated = false;
    let mut weights = vec![0.0; design.n_rows()];

    while iterations < options.max_iterations {
        let g_full = gradient(design, &beta, ridge);
        let g: Vec<f64> = active.iter().map(|&j| g_full[j]).collect();
        let max_grad = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_grad < options.gradient_tol {
            converged = true;
            break;
        }
        if beta.iter().any(|b| b.abs() > options.separation_bound) {
            separated = true;
            break;
        }
        for (i, w) in weights.iter_mut().enumerate() {
            let q = sigmoid(design.dot(i, &beta));
            *w = q * (1.0 - q);
        }
        let mut h = weighted_gram(design, Some(&weights), &position, p);
        for (i, row) in h.iter_mut().enumerate() {
            row[i] += ridge;
        }
        let l = cholesky(&h, 0.0).map_err(|bad| Error::Collinear {
            column: design.columns[active[bad]].clone(),
            others: Vec::new(),
        })?;
        let step = cholesky_solve(&l, &g);

        iterations += 1;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut candidate = beta.clone();
            for (r, &j) in active.iter().enumerate() {
                candidate[j] += t * step[r];
            }
            let value = penalized_log_likelihood(design, &candidate, ridge);
            if value >= objective {
                let change = (value - objective).abs() / objective.abs().max(1e-300);
                beta = candidate;
                objective = value;
                accepted = true;
                if change < options.relative_ll_tol {
                    converged = true;
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // no ascent direction left at machine precision
            converged = true;
        }
        if converged {
            break;
        }
    }
    if separated {
        converged = false;
    }
    Ok(InnerFit {
        log_likelihood: log_likelihood(design, &beta),
        coefficients: beta,
        iterations,
        converged,
        separated,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub inner: InnerOptions,
    pub search: SearchConfig,
    pub policy: HistoryPolicy,
    pub columns: ColumnMap,
}

/// Serializable summary of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub formula: String,
    pub columns: Vec<String>,
    pub coefficients: IndexMap<String, f64>,
    /// Term label → parameter name → value, pinned parameters included.
    pub nl_params: IndexMap<String, IndexMap<String, f64>>,
    pub log_likelihood: f64,
    pub null_log_likelihood: f64,
    pub n_observations: usize,
    pub ridge: f64,
    /// Newton iterations of the returned inner fit.
    pub iterations_inner: usize,
    pub outer_evals: usize,
    pub converged: bool,
    /// Best log-likelihood after each outer evaluation.
    pub outer_trace: Vec<f64>,
}

/// A fitted model that can score new students.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub spec: ModelSpec,
    pub layout: DesignLayout,
    pub params: TermParams,
    pub coefficients: Vec<f64>,
    pub policy: HistoryPolicy,
    pub result: FitResult,
}

impl FittedModel {
    pub fn design(&self, dataset: &Dataset) -> DesignMatrix {
        let data = FeatureData::new(dataset, &self.spec, self.policy.clone());
        build_design_matrix(&self.spec, &data, &self.layout, &self.params)
    }

    /// Predicted success probabilities in global row order. Features use
    /// each student's own history; levels unseen in training contribute 0.
    pub fn predict(&self, dataset: &Dataset) -> Vec<f64> {
        let design = self.design(dataset);
        (0..design.n_rows())
            .map(|i| sigmoid(design.dot(i, &self.coefficients)))
            .collect()
    }
}

fn describe_params(spec: &ModelSpec, free: &[f64]) -> String {
    spec.free_params()
        .iter()
        .zip(free)
        .map(|(&p, v)| format!("{}.{}={v}", spec.terms[p.term].feature.name(), spec.param_spec(p).name))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Fit `spec` to `dataset`: pinned parameters stay fixed, the free ones
/// are searched, and the best candidate's inner fit is returned.
pub fn fit_model(spec: &ModelSpec, dataset: &Dataset, options: &FitOptions) -> Result<FittedModel> {
    spec.validate()?;
    if dataset.n_trials() == 0 {
        return Err(Error::EmptyDesign("dataset has no trials".into()));
    }
    let layout = DesignLayout::new(spec, dataset, &options.columns);
    let data = FeatureData::new(dataset, spec, options.policy.clone());
    let free = spec.free_params();
    let bounds: Vec<(f64, f64)> = free
        .iter()
        .map(|&p| {
            let s = spec.param_spec(p);
            (s.lower, s.upper)
        })
        .collect();
    let start: Vec<f64> = free.iter().map(|&p| spec.param_spec(p).start).collect();

    // Inner fits start from the best coefficients seen so far; the ridge
    // keeps the optimum unique, so this only saves Newton iterations.
    let warm: RefCell<Option<(f64, Vec<f64>)>> = RefCell::new(None);
    let evaluate = |x: &[f64]| -> Result<(InnerFit, DesignMatrix)> {
        let params = resolve_params(spec, x);
        let design = build_design_matrix(spec, &data, &layout, &params);
        let start = warm.borrow().as_ref().map(|(_, b)| b.clone());
        let fit = fit_inner(&design, &options.inner, start.as_deref()).map_err(|e| Error::Candidate {
            params: describe_params(spec, x),
            source: Box::new(e),
        })?;
        let mut best = warm.borrow_mut();
        if fit.converged && best.as_ref().is_none_or(|(ll, _)| fit.log_likelihood > *ll) {
            *best = Some((fit.log_likelihood, fit.coefficients.clone()));
        }
        Ok((fit, design))
    };

    let outcome = minimize_bounded(
        |x: &[f64]| {
            let (fit, _) = evaluate(x)?;
            debug!(
                "outer candidate [{}] ll={}",
                describe_params(spec, x),
                fit.log_likelihood
            );
            Ok::<f64, Error>(-fit.log_likelihood)
        },
        &bounds,
        &start,
        &options.search,
    )?;
    let (fit, design) = evaluate(&outcome.best_x)?;
    let params = resolve_params(spec, &outcome.best_x);

    let n = design.n_rows();
    let rate = design.outcomes.iter().sum::<f64>() / n as f64;
    let mut nl_params = IndexMap::new();
    for (term, values) in spec.terms.iter().zip(&params) {
        if values.is_empty() {
            continue;
        }
        let named = term
            .feature
            .params()
            .iter()
            .zip(values)
            .map(|(p, &v)| (p.name.to_owned(), v))
            .collect();
        nl_params.insert(term.label(&options.columns), named);
    }
    let result = FitResult {
        formula: render_model(spec, &options.columns),
        columns: layout.columns.clone(),
        coefficients: layout
            .columns
            .iter()
            .cloned()
            .zip(fit.coefficients.iter().copied())
            .collect(),
        nl_params,
        log_likelihood: fit.log_likelihood,
        null_log_likelihood: null_log_likelihood(&design.outcomes, rate),
        n_observations: n,
        ridge: options.inner.ridge,
        iterations_inner: fit.iterations,
        outer_evals: outcome.evals,
        converged: fit.converged && outcome.converged,
        outer_trace: outcome.trace.iter().map(|f| -f).collect(),
    };
    Ok(FittedModel {
        spec: spec.clone(),
        layout,
        params,
        coefficients: fit.coefficients,
        policy: options.policy.clone(),
        result,
    })
}
