//! Student-stratified repeated cross-validation and fit metrics.
//!
//! Undefined metrics (degenerate outcomes, too few groups) are `None`:
//! they are left out of every mean and counted in the report.

use std::collections::{BTreeMap, HashMap};

use indexmap::IndexMap;
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ColumnMap, Dataset, Phase, TrialRecord};
use crate::dsl::ModelSpec;
use crate::error::{Error, Result};
use crate::estimator::{fit_model, FitOptions, FittedModel};

const P_CLIP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvPlan {
    pub n_folds: usize,
    pub n_repeats: usize,
    pub seed: u64,
}

impl Default for CvPlan {
    fn default() -> Self {
        CvPlan {
            n_folds: 5,
            n_repeats: 10,
            seed: 0,
        }
    }
}

/// Fold index of every student (in input order), one vector per repeat.
pub fn make_folds<S: AsRef<str>>(students: &[S], plan: &CvPlan) -> Result<Vec<Vec<usize>>> {
    if plan.n_folds < 2 || plan.n_repeats == 0 {
        return Err(Error::Cv("need at least 2 folds and 1 repeat".into()));
    }
    if students.len() < plan.n_folds {
        return Err(Error::Cv(format!(
            "{} students cannot fill {} folds",
            students.len(),
            plan.n_folds
        )));
    }
    Ok((0..plan.n_repeats)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
            rng.set_stream(r as u64);
            let mut order: Vec<usize> = (0..students.len()).collect();
            order.shuffle(&mut rng);
            let mut fold = vec![0; students.len()];
            for (rank, &s) in order.iter().enumerate() {
                fold[s] = rank % plan.n_folds;
            }
            fold
        })
        .collect())
}

fn clip(p: f64) -> f64 {
    p.clamp(P_CLIP, 1.0 - P_CLIP)
}

fn ll(p: f64, y: f64) -> f64 {
    let p = clip(p);
    y * p.ln() + (1.0 - y) * (1.0 - p).ln()
}

/// McFadden R² against a constant `null_rate` (the training base rate).
pub fn metric_r2(p: &[f64], y: &[f64], null_rate: f64) -> Option<f64> {
    if y.is_empty() || y.iter().all(|&v| v == y[0]) {
        return None;
    }
    let model: f64 = p.iter().zip(y).map(|(&p, &y)| ll(p, y)).sum();
    let null: f64 = y.iter().map(|&y| ll(null_rate, y)).sum();
    Some(1.0 - model / null)
}

/// Rank-based AUC with ties counted one half.
pub fn metric_auc(p: &[f64], y: &[f64]) -> Option<f64> {
    let n_pos = y.iter().filter(|&&v| v > 0.5).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    // sum of midranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && p[order[j + 1]] == p[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let positives = order[i..=j].iter().filter(|&&k| y[k] > 0.5).count();
        rank_sum += midrank * positives as f64;
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

pub fn metric_rmse(p: &[f64], y: &[f64]) -> Option<f64> {
    if p.is_empty() {
        return None;
    }
    let sse: f64 = p.iter().zip(y).map(|(p, y)| (p - y) * (p - y)).sum();
    Some((sse / p.len() as f64).sqrt())
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Rows filtered by `column = value` pairs and grouped by key columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    pub name: String,
    pub filter: Vec<(String, String)>,
    pub key: Vec<String>,
}

impl Grouping {
    /// Learning-session accuracy by block size and repetition.
    pub fn r1() -> Self {
        Grouping {
            name: "r1".into(),
            filter: vec![("phase".into(), "learning".into())],
            key: vec!["block_size".into(), "repetition".into()],
        }
    }

    /// Posttest accuracy by block size and item novelty.
    pub fn r2() -> Self {
        Grouping {
            name: "r2".into(),
            filter: vec![("phase".into(), "posttest".into())],
            key: vec!["block_size".into(), "Novel".into()],
        }
    }

    /// The posttest grouping restricted to one similarity condition.
    pub fn r3(column: &str, value: &str) -> Self {
        let mut g = Grouping::r2();
        g.name = "r3".into();
        g.filter.push((column.into(), value.into()));
        g
    }

    pub fn defaults(similarity: Option<(&str, &str)>) -> Vec<Grouping> {
        let mut out = vec![Grouping::r1(), Grouping::r2()];
        if let Some((c, v)) = similarity {
            out.push(Grouping::r3(c, v));
        }
        out
    }

    /// `name=key1,key2[;col=value...]`, e.g. `r2=block_size;phase=posttest`.
    pub fn parse(text: &str) -> Result<Grouping> {
        let bad = || Error::Config(format!("grouping `{text}` is not `name=key,...[;column=value...]`"));
        let mut parts = text.split(';');
        let (name, keys) = parts.next().and_then(|h| h.split_once('=')).ok_or_else(bad)?;
        let key: Vec<String> = keys
            .split(',')
            .map(|k| k.trim().to_owned())
            .filter(|k| !k.is_empty())
            .collect();
        if name.trim().is_empty() || key.is_empty() {
            return Err(bad());
        }
        let filter = parts.map(parse_filter).collect::<Result<Vec<_>>>()?;
        Ok(Grouping {
            name: name.trim().to_owned(),
            filter,
            key,
        })
    }
}

/// `column=value`.
pub fn parse_filter(text: &str) -> Result<(String, String)> {
    let (c, v) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("filter `{text}` is not `column=value`")))?;
    Ok((c.trim().to_owned(), v.trim().to_owned()))
}

/// Resolves grouping columns on trial rows: phase, block size, student,
/// item, KC, category, extra columns, and a derived `repetition` (the
/// occurrence number of the item within its phase).
pub struct RowValues<'d> {
    dataset: &'d Dataset,
    columns: &'d ColumnMap,
    repetition: Vec<usize>,
}

impl<'d> RowValues<'d> {
    pub fn new(dataset: &'d Dataset, columns: &'d ColumnMap) -> Self {
        let mut repetition = Vec::with_capacity(dataset.n_trials());
        for s in &dataset.students {
            let mut seen: HashMap<(Phase, &str), usize> = HashMap::new();
            for t in &s.trials {
                let n = seen.entry((t.phase, t.item_id.as_str())).or_insert(0);
                *n += 1;
                repetition.push(*n);
            }
        }
        RowValues {
            dataset,
            columns,
            repetition,
        }
    }

    fn builtin(&self, name: &str) -> Option<Builtin> {
        let lower = name.to_ascii_lowercase();
        let is = |alias: &str, mapped: &str| lower == alias || name == mapped;
        let c = self.columns;
        Some(if is("phase", &c.phase) {
            Builtin::Phase
        } else if is("block_size", &c.block_size) || lower == "blocksize" {
            Builtin::BlockSize
        } else if is("student", &c.student) {
            Builtin::Student
        } else if is("item", &c.item) {
            Builtin::Item
        } else if is("kc", &c.kc) {
            Builtin::Kc
        } else if is("category", &c.category) {
            Builtin::Category
        } else {
            return None;
        })
    }

    /// Whether `name` can be looked up at all on this dataset.
    pub fn knows(&self, name: &str) -> bool {
        self.builtin(name).is_some()
            || self.dataset.extra_index(name).is_some()
            || name.eq_ignore_ascii_case("repetition")
    }

    /// Value of `name` on global row `row`; `None` when missing.
    pub fn get(&self, row: usize, trial: &TrialRecord, name: &str) -> Option<String> {
        let v = match self.builtin(name) {
            Some(Builtin::Phase) => trial.phase.as_str().to_owned(),
            Some(Builtin::BlockSize) => trial.block_size?.to_string(),
            Some(Builtin::Student) => trial.student_id.clone(),
            Some(Builtin::Item) => trial.item_id.clone(),
            Some(Builtin::Kc) => trial.kc_id.clone(),
            Some(Builtin::Category) => trial.category.clone(),
            None => match self.dataset.extra_index(name) {
                Some(k) => trial.extra.get(k)?.clone(),
                None if name.eq_ignore_ascii_case("repetition") => self.repetition[row].to_string(),
                None => return None,
            },
        };
        (!v.is_empty()).then_some(v)
    }
}

enum Builtin {
    Phase,
    BlockSize,
    Student,
    Item,
    Kc,
    Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub key: Vec<String>,
    pub n: usize,
    pub mean_prediction: f64,
    pub mean_observed: f64,
}

#[derive(Debug, Clone, Default)]
struct GroupSums {
    groups: BTreeMap<Vec<String>, (usize, f64, f64)>,
}

impl GroupSums {
    fn add(&mut self, key: Vec<String>, p: f64, y: f64) {
        let e = self.groups.entry(key).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 += p;
        e.2 += y;
    }

    fn merge(&mut self, other: &GroupSums) {
        for (k, &(n, p, y)) in &other.groups {
            let e = self.groups.entry(k.clone()).or_insert((0, 0.0, 0.0));
            e.0 += n;
            e.1 += p;
            e.2 += y;
        }
    }

    fn table(&self) -> Vec<GroupRow> {
        self.groups
            .iter()
            .map(|(k, &(n, p, y))| GroupRow {
                key: k.clone(),
                n,
                mean_prediction: p / n as f64,
                mean_observed: y / n as f64,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedCorrelation {
    pub r: Option<f64>,
    pub table: Vec<GroupRow>,
}

fn correlation_of(table: &[GroupRow]) -> Option<f64> {
    if table.len() < 3 {
        return None;
    }
    let p: Vec<f64> = table.iter().map(|g| g.mean_prediction).collect();
    let y: Vec<f64> = table.iter().map(|g| g.mean_observed).collect();
    pearson(&p, &y)
}

fn group_sums(
    p: &[f64],
    y: &[f64],
    rows: &[(usize, &TrialRecord)],
    values: &RowValues<'_>,
    grouping: &Grouping,
) -> GroupSums {
    let mut sums = GroupSums::default();
    'rows: for (i, &(row, trial)) in rows.iter().enumerate() {
        for (col, want) in &grouping.filter {
            match values.get(row, trial, col) {
                Some(v) if v.eq_ignore_ascii_case(want) => {}
                _ => continue 'rows,
            }
        }
        let mut key = Vec::with_capacity(grouping.key.len());
        for col in &grouping.key {
            match values.get(row, trial, col) {
                Some(v) => key.push(v),
                None => continue 'rows,
            }
        }
        sums.add(key, p[i], y[i]);
    }
    sums
}

/// Pearson correlation between per-group mean prediction and mean
/// observed accuracy. `rows[i]` is the global row index and trial behind
/// `p[i]`, `y[i]`.
pub fn grouped_correlation(
    p: &[f64],
    y: &[f64],
    rows: &[(usize, &TrialRecord)],
    values: &RowValues<'_>,
    grouping: &Grouping,
) -> GroupedCorrelation {
    let table = group_sums(p, y, rows, values, grouping).table();
    GroupedCorrelation {
        r: correlation_of(&table),
        table,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub repeat: usize,
    pub fold: usize,
    pub n_train_students: usize,
    pub n_test_students: usize,
    pub n_test_trials: usize,
    pub converged: bool,
    pub r2_mcfadden: Option<f64>,
    pub auc: Option<f64>,
    pub rmse: Option<f64>,
    pub correlations: IndexMap<String, Option<f64>>,
    /// Set when the fold's fit failed; such folds carry no metrics.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    /// Folds contributing to the mean.
    pub n: usize,
    /// Folds (not failed) where the metric was undefined.
    pub undefined: usize,
}

impl MetricSummary {
    fn of(values: impl Iterator<Item = Option<f64>>) -> Self {
        let (mut sum, mut n, mut undefined) = (0.0, 0, 0);
        for v in values {
            match v {
                Some(v) => {
                    sum += v;
                    n += 1;
                }
                None => undefined += 1,
            }
        }
        MetricSummary {
            mean: (n > 0).then(|| sum / n as f64),
            n,
            undefined,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub formula: String,
    pub model_name: Option<String>,
    pub plan: CvPlan,
    pub groupings: Vec<Grouping>,
    pub folds: Vec<FoldRecord>,
    pub failed_folds: usize,
    pub r2_mcfadden: MetricSummary,
    pub auc: MetricSummary,
    pub rmse: MetricSummary,
    pub correlations: IndexMap<String, MetricSummary>,
    /// Test predictions pooled over every fold and repeat.
    pub group_tables: IndexMap<String, GroupedCorrelation>,
}

impl CvReport {
    pub fn all_converged(&self) -> bool {
        self.failed_folds == 0 && self.folds.iter().all(|f| f.converged)
    }
}

/// Fit `spec` on the named students only.
pub fn fit_fold<S: AsRef<str>>(
    spec: &ModelSpec,
    dataset: &Dataset,
    train: &[S],
    options: &FitOptions,
) -> Result<FittedModel> {
    fit_model(spec, &dataset.subset(train), options)
}

struct FoldOutput {
    record: FoldRecord,
    sums: Vec<GroupSums>,
}

fn base_rate(ds: &Dataset) -> f64 {
    let n = ds.n_trials();
    ds.trials().filter(|t| t.is_correct()).count() as f64 / n.max(1) as f64
}

/// Drop key and filter columns the dataset does not have.
fn usable_groupings(groupings: &[Grouping], values: &RowValues<'_>) -> Vec<Grouping> {
    groupings
        .iter()
        .map(|g| {
            let mut g = g.clone();
            g.key.retain(|k| {
                let ok = values.knows(k);
                if !ok {
                    warn!("grouping {}: column `{k}` not in data; dropped from key", g.name);
                }
                ok
            });
            for (c, _) in &g.filter {
                if !values.knows(c) {
                    warn!(
                        "grouping {}: filter column `{c}` not in data; no rows will match",
                        g.name
                    );
                }
            }
            g
        })
        .collect()
}

/// Repeated student-stratified cross-validation. Every fold refits both
/// parameter levels from scratch on its training students; test students
/// are scored with features from their own histories.
pub fn run_cv(
    spec: &ModelSpec,
    dataset: &Dataset,
    plan: &CvPlan,
    groupings: &[Grouping],
    options: &FitOptions,
) -> Result<CvReport> {
    let ids = dataset.student_ids();
    let assignments = make_folds(&ids, plan)?;
    let values = RowValues::new(dataset, &options.columns);
    let groupings = usable_groupings(groupings, &values);

    // global row offset of each student
    let mut offsets = Vec::with_capacity(ids.len());
    let mut acc = 0;
    for s in &dataset.students {
        offsets.push(acc);
        acc += s.trials.len();
    }

    let jobs: Vec<(usize, usize)> = (0..plan.n_repeats)
        .flat_map(|r| (0..plan.n_folds).map(move |f| (r, f)))
        .collect();
    let outputs: Vec<FoldOutput> = jobs
        .par_iter()
        .map(|&(repeat, fold)| {
            let assign = &assignments[repeat];
            let (test, train): (Vec<usize>, Vec<usize>) = (0..ids.len()).partition(|&s| assign[s] == fold);
            let train_ids: Vec<&str> = train.iter().map(|&s| ids[s].as_str()).collect();
            let test_ids: Vec<&str> = test.iter().map(|&s| ids[s].as_str()).collect();
            let test_ds = dataset.subset(&test_ids);
            let mut record = FoldRecord {
                repeat,
                fold,
                n_train_students: train.len(),
                n_test_students: test.len(),
                n_test_trials: test_ds.n_trials(),
                converged: false,
                r2_mcfadden: None,
                auc: None,
                rmse: None,
                correlations: IndexMap::new(),
                error: None,
            };
            let train_ds = dataset.subset(&train_ids);
            let model = match fit_model(spec, &train_ds, options) {
                Ok(m) => m,
                Err(e) => {
                    warn!("repeat {repeat} fold {fold}: fit failed: {e}");
                    record.error = Some(e.to_string());
                    return FoldOutput {
                        record,
                        sums: Vec::new(),
                    };
                }
            };
            record.converged = model.result.converged;
            let p = model.predict(&test_ds);
            let y: Vec<f64> = test_ds.trials().map(|t| f64::from(t.outcome)).collect();
            record.r2_mcfadden = metric_r2(&p, &y, base_rate(&train_ds));
            record.auc = metric_auc(&p, &y);
            record.rmse = metric_rmse(&p, &y);
            let rows: Vec<(usize, &TrialRecord)> = test
                .iter()
                .flat_map(|&s| {
                    let base = offsets[s];
                    dataset.students[s]
                        .trials
                        .iter()
                        .enumerate()
                        .map(move |(k, t)| (base + k, t))
                })
                .collect();
            let mut sums = Vec::with_capacity(groupings.len());
            for g in &groupings {
                let s = group_sums(&p, &y, &rows, &values, g);
                record.correlations.insert(g.name.clone(), correlation_of(&s.table()));
                sums.push(s);
            }
            info!(
                "repeat {repeat} fold {fold}: R2 {:?} AUC {:?} RMSE {:?}",
                record.r2_mcfadden, record.auc, record.rmse
            );
            FoldOutput { record, sums }
        })
        .collect();

    let ok = || outputs.iter().filter(|o| o.record.error.is_none());
    let mut correlations = IndexMap::new();
    let mut group_tables = IndexMap::new();
    for (k, g) in groupings.iter().enumerate() {
        correlations.insert(
            g.name.clone(),
            MetricSummary::of(ok().map(|o| o.record.correlations.get(&g.name).copied().flatten())),
        );
        let mut pooled = GroupSums::default();
        for o in ok() {
            pooled.merge(&o.sums[k]);
        }
        let table = pooled.table();
        group_tables.insert(
            g.name.clone(),
            GroupedCorrelation {
                r: correlation_of(&table),
                table,
            },
        );
    }
    Ok(CvReport {
        formula: crate::dsl::render_model(spec, &options.columns),
        model_name: spec.name.clone(),
        plan: *plan,
        groupings,
        failed_folds: outputs.iter().filter(|o| o.record.error.is_some()).count(),
        r2_mcfadden: MetricSummary::of(ok().map(|o| o.record.r2_mcfadden)),
        auc: MetricSummary::of(ok().map(|o| o.record.auc)),
        rmse: MetricSummary::of(ok().map(|o| o.record.rmse)),
        correlations,
        group_tables,
        folds: outputs.into_iter().map(|o| o.record).collect(),
    })
}
