//! Feature columns computed as a streaming pass over each student's trials.
//!
//! Counting features read the per-trial [`SequenceContext`]; `logitdec`
//! keeps a decayed success/failure state per component level. The design
//! matrix is assembled in global `(student, sequence_index)` order as a
//! sparse row-major matrix, since per-level intercepts make most entries
//! zero.

use std::collections::HashMap;

use log::warn;

use crate::data::ColumnMap;
use crate::data::{
    build_context_for, ComparisonTag, Component, Dataset, HistoryPolicy, SequenceContext, MIN_ELAPSED_SECONDS,
};
use crate::dsl::{Feature, ModelSpec, SplitLevel, Term};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecencyParams {
    pub d: f64,
}

/// Activation with age-weighted model time and spacing-dependent decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpeParams {
    /// Age-weighting exponent.
    pub x: f64,
    /// Practice-count exponent.
    pub c: f64,
    /// Base decay.
    pub b: f64,
    /// Sensitivity of decay to spacing.
    pub m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Base4Params {
    /// Exponent on mean spacing.
    pub x: f64,
    /// Practice-count exponent.
    pub c: f64,
    /// Decay on the age of the first practice.
    pub d: f64,
    /// Smoothing offset added to mean spacing, seconds.
    pub s0: f64,
}

impl RecencyParams {
    pub fn from_slice(v: &[f64]) -> Self {
        RecencyParams { d: v[0] }
    }
}

impl PpeParams {
    pub fn from_slice(v: &[f64]) -> Self {
        PpeParams {
            x: v[0],
            c: v[1],
            b: v[2],
            m: v[3],
        }
    }
}

impl Base4Params {
    pub fn from_slice(v: &[f64]) -> Self {
        Base4Params {
            x: v[0],
            c: v[1],
            d: v[2],
            s0: v[3],
        }
    }
}

/// Exponentially decayed success and failure mass, seeded at one each.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitdecState {
    pub w: f64,
    pub s: f64,
    pub f: f64,
}

impl LogitdecState {
    pub fn new(w: f64) -> Self {
        LogitdecState { w, s: 1.0, f: 1.0 }
    }

    pub fn update(&mut self, outcome: u8) {
        let y = f64::from(outcome);
        self.s = self.s * self.w + y;
        self.f = self.f * self.w + (1.0 - y);
    }

    pub fn value(&self) -> f64 {
        (self.s / self.f).ln()
    }
}

fn split_tag(split: SplitLevel) -> ComparisonTag {
    match split {
        SplitLevel::Same => ComparisonTag::Same,
        SplitLevel::Different => ComparisonTag::Different,
    }
}

pub fn feat_lineafm(ctx: &SequenceContext, split: Option<SplitLevel>) -> f64 {
    match split {
        None => f64::from(ctx.prior_count),
        Some(level) => f64::from(ctx.by_tag.total(split_tag(level))),
    }
}

pub fn feat_linesuc(ctx: &SequenceContext, split: Option<SplitLevel>) -> f64 {
    match split {
        None => f64::from(ctx.prior_successes),
        Some(level) => f64::from(ctx.by_tag.successes(split_tag(level))),
    }
}

pub fn feat_linefail(ctx: &SequenceContext, split: Option<SplitLevel>) -> f64 {
    match split {
        None => f64::from(ctx.prior_failures),
        Some(level) => f64::from(ctx.by_tag.failures(split_tag(level))),
    }
}

pub fn feat_logitdec(history: &[u8], w: f64) -> f64 {
    let mut state = LogitdecState::new(w);
    for &y in history {
        state.update(y);
    }
    state.value()
}

pub fn feat_recency(ctx: &SequenceContext, params: &RecencyParams) -> f64 {
    match ctx.ages.last() {
        None => 0.0,
        Some(&age) => age.max(MIN_ELAPSED_SECONDS).powf(-params.d),
    }
}

pub fn feat_ppe(ctx: &SequenceContext, params: &PpeParams) -> f64 {
    let n = ctx.ages.len();
    if n == 0 {
        return 0.0;
    }
    let mut weight_sum = 0.0;
    let mut weighted_age = 0.0;
    for &age in &ctx.ages {
        let t = age.max(MIN_ELAPSED_SECONDS);
        let w = t.powf(-params.x);
        weight_sum += w;
        weighted_age += w * t;
    }
    let model_time = weighted_age / weight_sum;
    let stability = if n >= 2 {
        ctx.lags
            .iter()
            .map(|&lag| 1.0 / (lag + std::f64::consts::E).ln())
            .sum::<f64>()
            / (n - 1) as f64
    } else {
        0.0
    };
    let decay = params.b + params.m * stability;
    (n as f64).powf(params.c) * model_time.powf(-decay)
}

pub fn feat_base4(ctx: &SequenceContext, params: &Base4Params) -> f64 {
    let n = ctx.ages.len();
    if n == 0 {
        return 0.0;
    }
    let first_age = ctx.ages[0].max(MIN_ELAPSED_SECONDS);
    let mean_spacing = if ctx.lags.is_empty() {
        0.0
    } else {
        ctx.lags.iter().sum::<f64>() / ctx.lags.len() as f64
    };
    (mean_spacing + params.s0).powf(params.x) * (n as f64).powf(params.c) * first_age.powf(-params.d)
}

/// Full nonlinear parameter vector for every term (empty for linear terms).
pub type TermParams = Vec<Vec<f64>>;

/// Parameter vectors with pinned values applied and free slots taken from
/// `free`, in [`ModelSpec::free_params`] order.
pub fn resolve_params(spec: &ModelSpec, free: &[f64]) -> TermParams {
    let mut free = free.iter();
    spec.terms
        .iter()
        .map(|term| {
            term.feature
                .params()
                .iter()
                .map(|p| match term.fixed_params.get(p.name) {
                    Some(&v) => v,
                    None => *free.next().expect("one free value per free parameter"),
                })
                .collect()
        })
        .collect()
}

/// Parameters at their starting values (pinned values kept).
pub fn start_params(spec: &ModelSpec) -> TermParams {
    let free: Vec<f64> = spec.free_params().iter().map(|&p| spec.param_spec(p).start).collect();
    resolve_params(spec, &free)
}

/// A term's contribution for one trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TermValue<'a> {
    Scalar(f64),
    /// Value belonging to the column of one component level.
    Level(&'a str, f64),
}

/// Value of a context-driven term (everything except `intercept` and
/// `logitdec`, which need no context).
fn context_value(term: &Term, ctx: &SequenceContext, params: &[f64]) -> f64 {
    match term.feature {
        Feature::Lineafm => feat_lineafm(ctx, term.split),
        Feature::Linesuc => feat_linesuc(ctx, term.split),
        Feature::Linefail => feat_linefail(ctx, term.split),
        Feature::Recency => feat_recency(ctx, &RecencyParams::from_slice(params)),
        Feature::Ppe => feat_ppe(ctx, &PpeParams::from_slice(params)),
        Feature::Base4 => feat_base4(ctx, &Base4Params::from_slice(params)),
        Feature::Intercept | Feature::Logitdec => unreachable!("not context driven"),
    }
}

fn needs_context(feature: Feature) -> bool {
    !matches!(feature, Feature::Intercept | Feature::Logitdec)
}

/// Components whose contexts a spec needs.
fn context_components(spec: &ModelSpec) -> Vec<Component> {
    let mut out: Vec<Component> = spec
        .terms
        .iter()
        .filter(|t| needs_context(t.feature))
        .map(|t| t.component)
        .collect();
    out.sort();
    out.dedup();
    out
}

/// Incremental per-student evaluator used both for batch design assembly
/// and for outcome simulation, where outcomes are drawn one trial at a
/// time.
pub struct StudentStream<'s, 'p> {
    spec: &'s ModelSpec,
    params: &'s TermParams,
    trackers: Vec<(Component, crate::data::HistoryTracker<'p>)>,
    logitdec: Vec<HashMap<String, LogitdecState>>,
    policy: &'p HistoryPolicy,
}

impl<'s, 'p> StudentStream<'s, 'p> {
    pub fn new(spec: &'s ModelSpec, params: &'s TermParams, policy: &'p HistoryPolicy) -> Self {
        StudentStream {
            spec,
            params,
            trackers: context_components(spec)
                .into_iter()
                .map(|c| (c, crate::data::HistoryTracker::new(c, policy)))
                .collect(),
            logitdec: vec![HashMap::new(); spec.terms.len()],
            policy,
        }
    }

    /// Term values for the upcoming trial, computed from history only.
    pub fn values<'t>(&self, trial: &'t crate::data::TrialRecord) -> Vec<TermValue<'t>> {
        let contexts: Vec<(Component, SequenceContext)> = self
            .trackers
            .iter()
            .map(|(c, tracker)| (*c, tracker.context(trial)))
            .collect();
        let lookup = |component: Component| {
            &contexts
                .iter()
                .find(|(c, _)| *c == component)
                .expect("context for every needed component")
                .1
        };
        self.spec
            .terms
            .iter()
            .enumerate()
            .map(|(i, term)| term_value(term, trial, &self.params[i], &self.logitdec[i], lookup))
            .collect()
    }

    pub fn observe(&mut self, trial: &crate::data::TrialRecord) {
        for (_, tracker) in &mut self.trackers {
            tracker.observe(trial);
        }
        if !self.policy.updates_history(trial.phase) {
            return;
        }
        for (i, term) in self.spec.terms.iter().enumerate() {
            if term.feature == Feature::Logitdec {
                let w = self.params[i][0];
                self.logitdec[i]
                    .entry(trial.level(term.component).to_owned())
                    .or_insert_with(|| LogitdecState::new(w))
                    .update(trial.outcome);
            }
        }
    }
}

fn term_value<'t, 'c>(
    term: &Term,
    trial: &'t crate::data::TrialRecord,
    params: &[f64],
    logitdec: &HashMap<String, LogitdecState>,
    context: impl Fn(Component) -> &'c SequenceContext,
) -> TermValue<'t> {
    let level = trial.level(term.component);
    let value = match term.feature {
        Feature::Intercept => 1.0,
        Feature::Logitdec => logitdec.get(level).map_or(0.0, LogitdecState::value),
        _ => context_value(term, context(term.component), params),
    };
    if term.expands_levels() {
        TermValue::Level(level, value)
    } else {
        TermValue::Scalar(value)
    }
}

/// Per-student contexts cached across repeated design builds, so the outer
/// search only recomputes the cheap nonlinear transforms.
pub struct FeatureData<'d> {
    pub dataset: &'d Dataset,
    pub policy: HistoryPolicy,
    /// `contexts[component][student][trial]`
    contexts: [Option<Vec<Vec<SequenceContext>>>; 3],
}

impl<'d> FeatureData<'d> {
    pub fn new(dataset: &'d Dataset, spec: &ModelSpec, policy: HistoryPolicy) -> Self {
        let mut contexts: [Option<Vec<Vec<SequenceContext>>>; 3] = [None, None, None];
        for component in context_components(spec) {
            contexts[component.index()] = Some(
                dataset
                    .students
                    .iter()
                    .map(|s| build_context_for(&s.trials, component, &policy))
                    .collect(),
            );
        }
        FeatureData {
            dataset,
            policy,
            contexts,
        }
    }

    fn context(&self, component: Component, student: usize, trial: usize) -> &SequenceContext {
        &self.contexts[component.index()]
            .as_ref()
            .expect("contexts built for the spec's components")[student][trial]
    }
}

#[derive(Debug, Clone)]
struct TermBlock {
    start: usize,
    level_index: Option<HashMap<String, usize>>,
}

/// Column layout of a design matrix: term order, then sorted level order.
#[derive(Debug, Clone)]
pub struct DesignLayout {
    pub columns: Vec<String>,
    blocks: Vec<TermBlock>,
}

impl DesignLayout {
    /// Layout whose level columns are the levels present in `dataset`.
    pub fn new(spec: &ModelSpec, dataset: &Dataset, columns: &ColumnMap) -> Self {
        let mut cache: HashMap<Component, Vec<String>> = HashMap::new();
        Self::with_levels(spec, columns, |c| {
            cache.entry(c).or_insert_with(|| dataset.levels(c)).clone()
        })
    }

    pub fn with_levels(
        spec: &ModelSpec,
        columns: &ColumnMap,
        mut levels: impl FnMut(Component) -> Vec<String>,
    ) -> Self {
        let mut names = Vec::new();
        let mut blocks = Vec::new();
        for term in &spec.terms {
            let label = term.label(columns);
            let start = names.len();
            if term.expands_levels() {
                let mut lv = levels(term.component);
                lv.sort();
                lv.dedup();
                let index = lv.iter().enumerate().map(|(i, l)| (l.clone(), start + i)).collect();
                names.extend(lv.iter().map(|l| format!("{label}#{l}")));
                blocks.push(TermBlock {
                    start,
                    level_index: Some(index),
                });
            } else {
                names.push(label);
                blocks.push(TermBlock {
                    start,
                    level_index: None,
                });
            }
        }
        DesignLayout { columns: names, blocks }
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    /// Column for a term value; `None` for a level unknown to the layout.
    pub fn column_of(&self, term: usize, value: &TermValue<'_>) -> Option<usize> {
        let block = &self.blocks[term];
        match (value, &block.level_index) {
            (TermValue::Scalar(_), None) => Some(block.start),
            (TermValue::Level(level, _), Some(index)) => index.get(*level).copied(),
            _ => unreachable!("term value kind matches its block"),
        }
    }
}

/// Sparse row-major design matrix with outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub columns: Vec<String>,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<u32>,
    pub values: Vec<f64>,
    pub outcomes: Vec<f64>,
    /// `(student index, trial index)` of each row.
    pub rows: Vec<(u32, u32)>,
}

impl DesignMatrix {
    pub fn from_dense(columns: Vec<String>, dense: &[Vec<f64>], outcomes: Vec<f64>) -> Self {
        let mut m = DesignMatrix {
            columns,
            row_ptr: vec![0],
            col_idx: Vec::new(),
            values: Vec::new(),
            outcomes,
            rows: Vec::new(),
        };
        for (i, row) in dense.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    m.col_idx.push(j as u32);
                    m.values.push(v);
                }
            }
            m.row_ptr.push(m.col_idx.len());
            m.rows.push((0, i as u32));
        }
        m
    }

    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[range.clone()], &self.values[range])
    }

    pub fn dot(&self, i: usize, beta: &[f64]) -> f64 {
        let (idx, vals) = self.row(i);
        idx.iter().zip(vals).map(|(&j, &v)| v * beta[j as usize]).sum()
    }

    pub fn dense_row(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols()];
        let (idx, vals) = self.row(i);
        for (&j, &v) in idx.iter().zip(vals) {
            out[j as usize] += v;
        }
        out
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|i| self.dense_row(i)[j]).collect()
    }

    /// Indices of columns without a single nonzero entry.
    pub fn zero_columns(&self) -> Vec<usize> {
        let mut seen = vec![false; self.n_cols()];
        for (&j, &v) in self.col_idx.iter().zip(&self.values) {
            if v != 0.0 {
                seen[j as usize] = true;
            }
        }
        (0..self.n_cols()).filter(|&j| !seen[j]).collect()
    }

    /// Delimited dump with a header naming each column.
    pub fn write_delimited<W: std::io::Write>(&self, writer: W, delimiter: u8) -> Result<()> {
        let mut out = csv::WriterBuilder::new().delimiter(delimiter).from_writer(writer);
        let mut header = vec!["row".to_owned(), "outcome".to_owned()];
        header.extend(self.columns.iter().cloned());
        out.write_record(&header)?;
        for i in 0..self.n_rows() {
            let mut record = vec![i.to_string(), self.outcomes[i].to_string()];
            record.extend(self.dense_row(i).iter().map(|v| v.to_string()));
            out.write_record(&record)?;
        }
        out.flush().map_err(|source| Error::Io {
            path: "<output>".into(),
            source,
        })?;
        Ok(())
    }
}

/// Assemble the design matrix of `spec` for every trial in `data`.
pub fn build_design_matrix(
    spec: &ModelSpec,
    data: &FeatureData<'_>,
    layout: &DesignLayout,
    params: &TermParams,
) -> DesignMatrix {
    let n = data.dataset.n_trials();
    let mut m = DesignMatrix {
        columns: layout.columns.clone(),
        row_ptr: Vec::with_capacity(n + 1),
        col_idx: Vec::with_capacity(n * spec.terms.len()),
        values: Vec::with_capacity(n * spec.terms.len()),
        outcomes: Vec::with_capacity(n),
        rows: Vec::with_capacity(n),
    };
    m.row_ptr.push(0);
    let mut row_entries: Vec<(u32, f64)> = Vec::with_capacity(spec.terms.len());
    for (s, student) in data.dataset.students.iter().enumerate() {
        let mut logitdec: Vec<HashMap<&str, LogitdecState>> = vec![HashMap::new(); spec.terms.len()];
        for (t, trial) in student.trials.iter().enumerate() {
            row_entries.clear();
            for (k, term) in spec.terms.iter().enumerate() {
                let level = trial.level(term.component);
                let value = match term.feature {
                    Feature::Intercept => 1.0,
                    Feature::Logitdec => logitdec[k].get(level).map_or(0.0, LogitdecState::value),
                    _ => context_value(term, data.context(term.component, s, t), &params[k]),
                };
                let tv = if term.expands_levels() {
                    TermValue::Level(level, value)
                } else {
                    TermValue::Scalar(value)
                };
                if value != 0.0 {
                    if let Some(j) = layout.column_of(k, &tv) {
                        row_entries.push((j as u32, value));
                    }
                }
            }
            row_entries.sort_by_key(|e| e.0);
            for &(j, v) in &row_entries {
                m.col_idx.push(j);
                m.values.push(v);
            }
            m.row_ptr.push(m.col_idx.len());
            m.outcomes.push(f64::from(trial.outcome));
            m.rows.push((s as u32, t as u32));

            if data.policy.updates_history(trial.phase) {
                for (k, term) in spec.terms.iter().enumerate() {
                    if term.feature == Feature::Logitdec {
                        let w = params[k][0];
                        logitdec[k]
                            .entry(trial.level(term.component))
                            .or_insert_with(|| LogitdecState::new(w))
                            .update(trial.outcome);
                    }
                }
            }
        }
    }
    m
}

/// Warn about layout columns that are entirely zero in `design`.
pub fn warn_zero_columns(design: &DesignMatrix) -> Vec<usize> {
    let zero = design.zero_columns();
    for &j in &zero {
        warn!(
            "design column `{}` is all zeros; its coefficient stays at 0",
            design.columns[j]
        );
    }
    zero
}
