//! Trial records, trial-log ingestion, and per-trial sequence context.
//!
//! A [`Dataset`] holds one chronologically ordered stream per student.
//! [`HistoryTracker`] walks such a stream and yields, for every trial, the
//! [`SequenceContext`] built from strictly earlier trials: practice counts,
//! ages, inter-practice lags, and the comparison tag against the
//! immediately preceding trial.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to every elapsed time before a power-law transform.
pub const MIN_ELAPSED_SECONDS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretest,
    Learning,
    Posttest,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretest => "pretest",
            Phase::Learning => "learning",
            Phase::Posttest => "posttest",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pretest" | "pre" | "pre-test" => Ok(Phase::Pretest),
            "learning" | "learn" | "study" | "training" | "" => Ok(Phase::Learning),
            "posttest" | "post" | "post-test" | "test" => Ok(Phase::Posttest),
            other => Err(format!("unknown phase `{other}`")),
        }
    }
}

/// The three roles a model component can refer to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Student,
    Item,
    Kc,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Student, Component::Item, Component::Kc];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub student_id: String,
    pub item_id: String,
    pub kc_id: String,
    pub outcome: u8,
    /// Seconds from the student's first trial.
    pub time: f64,
    pub phase: Phase,
    pub category: String,
    pub block_size: Option<u32>,
    pub sequence_index: usize,
    /// Values of unmapped input columns, aligned with [`Dataset::extra_columns`].
    #[serde(default)]
    pub extra: Vec<String>,
}

impl TrialRecord {
    pub fn level(&self, component: Component) -> &str {
        match component {
            Component::Student => &self.student_id,
            Component::Item => &self.item_id,
            Component::Kc => &self.kc_id,
        }
    }

    pub fn is_correct(&self) -> bool {
        self.outcome == 1
    }
}

/// Column names for each logical field of a trial log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub student: String,
    pub item: String,
    pub kc: String,
    pub outcome: String,
    pub time: String,
    pub phase: String,
    pub category: String,
    pub block_size: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            student: "Anon.Student.Id".into(),
            item: "Problem.Name".into(),
            kc: "KC..Default.".into(),
            outcome: "Outcome".into(),
            time: "CF..Time".into(),
            phase: "Phase".into(),
            category: "Category".into(),
            block_size: "BlockSize".into(),
        }
    }
}

impl ColumnMap {
    pub fn component_name(&self, component: Component) -> &str {
        match component {
            Component::Student => &self.student,
            Component::Item => &self.item,
            Component::Kc => &self.kc,
        }
    }

    /// Resolve a component name written in a model formula. Both the mapped
    /// column names and the logical role names are accepted.
    pub fn resolve_component(&self, name: &str) -> Option<Component> {
        let squashed: String = name.chars().filter(|c| !c.is_whitespace()).collect();
        for component in Component::ALL {
            if squashed == self.component_name(component) {
                return Some(component);
            }
        }
        match squashed.to_ascii_lowercase().as_str() {
            "student" => Some(Component::Student),
            "item" => Some(Component::Item),
            "kc" => Some(Component::Kc),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Keep file order within a student instead of sorting by time; a
    /// decreasing time then becomes a validation error.
    pub keep_file_order: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedRow {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub dropped: Vec<DroppedRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentTrials {
    pub id: String,
    pub trials: Vec<TrialRecord>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    /// Students in lexicographic id order.
    pub students: Vec<StudentTrials>,
    pub extra_columns: Vec<String>,
}

impl Dataset {
    /// Assemble a dataset from loose records. Records are grouped by
    /// student, ordered by `(time, input position)`, and renumbered.
    pub fn from_records(records: Vec<TrialRecord>, extra_columns: Vec<String>) -> Self {
        let mut grouped: BTreeMap<String, Vec<TrialRecord>> = BTreeMap::new();
        for record in records {
            grouped.entry(record.student_id.clone()).or_default().push(record);
        }
        let students = grouped
            .into_iter()
            .map(|(id, mut trials)| {
                trials.sort_by(|a, b| a.time.total_cmp(&b.time));
                for (i, t) in trials.iter_mut().enumerate() {
                    t.sequence_index = i;
                }
                StudentTrials { id, trials }
            })
            .collect();
        Dataset {
            students,
            extra_columns,
        }
    }

    pub fn n_trials(&self) -> usize {
        self.students.iter().map(|s| s.trials.len()).sum()
    }

    pub fn trials(&self) -> impl Iterator<Item = &TrialRecord> {
        self.students.iter().flat_map(|s| s.trials.iter())
    }

    pub fn student_ids(&self) -> Vec<String> {
        self.students.iter().map(|s| s.id.clone()).collect()
    }

    /// Dataset restricted to the given students, in this dataset's order.
    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> Dataset {
        let keep: std::collections::HashSet<&str> = ids.iter().map(|s| s.as_ref()).collect();
        Dataset {
            students: self
                .students
                .iter()
                .filter(|s| keep.contains(s.id.as_str()))
                .cloned()
                .collect(),
            extra_columns: self.extra_columns.clone(),
        }
    }

    pub fn extra_index(&self, name: &str) -> Option<usize> {
        self.extra_columns
            .iter()
            .position(|c| c == name)
            .or_else(|| self.extra_columns.iter().position(|c| c.eq_ignore_ascii_case(name)))
    }

    /// Sorted distinct levels of a component.
    pub fn levels(&self, component: Component) -> Vec<String> {
        let mut levels: Vec<String> = self.trials().map(|t| t.level(component).to_owned()).collect();
        levels.sort();
        levels.dedup();
        levels
    }

    /// Write the dataset in the ingestion schema so that [`load_trials`]
    /// reads it back unchanged.
    pub fn write_csv<W: Write>(&self, writer: W, columns: &ColumnMap) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header = vec![
            columns.student.as_str(),
            columns.item.as_str(),
            columns.kc.as_str(),
            columns.outcome.as_str(),
            columns.time.as_str(),
            columns.phase.as_str(),
            columns.category.as_str(),
            columns.block_size.as_str(),
        ];
        header.extend(self.extra_columns.iter().map(String::as_str));
        out.write_record(&header)?;
        for t in self.trials() {
            let mut row = vec![
                t.student_id.clone(),
                t.item_id.clone(),
                t.kc_id.clone(),
                t.outcome.to_string(),
                t.time.to_string(),
                t.phase.to_string(),
                t.category.clone(),
                t.block_size.map(|b| b.to_string()).unwrap_or_default(),
            ];
            row.extend(t.extra.iter().cloned());
            out.write_record(&row)?;
        }
        out.flush().map_err(|source| Error::Io {
            path: "<output>".into(),
            source,
        })?;
        Ok(())
    }
}

fn parse_outcome(raw: &str) -> Option<u8> {
    match raw.trim().to_ascii_uppercase().as_str() {
        "1" | "1.0" | "CORRECT" => Some(1),
        "0" | "0.0" | "INCORRECT" => Some(0),
        _ => None,
    }
}

fn parse_time(raw: &str) -> Option<f64> {
    let raw = raw.trim();
    if let Ok(v) = raw.parse::<f64>() {
        return v.is_finite().then_some(v);
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(raw) {
        return Some(dt.timestamp_millis() as f64 / 1000.0);
    }
    for fmt in ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f", "%Y/%m/%d %H:%M:%S%.f"] {
        if let Ok(dt) = chrono::NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(dt.and_utc().timestamp_millis() as f64 / 1000.0);
        }
    }
    None
}

fn is_missing(raw: &str) -> bool {
    let raw = raw.trim();
    raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan")
}

fn detect_delimiter(path: &Path) -> Result<u8> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut header = String::new();
    BufReader::new(file)
        .read_line(&mut header)
        .map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
    Ok(if header.contains('\t') { b'\t' } else { b',' })
}

/// Read a delimited trial log. Optional columns (time, phase, category,
/// block size) are skipped when absent under their default name and are an
/// error when a non-default name was requested.
pub fn load_trials(path: &Path, columns: &ColumnMap, options: &LoadOptions) -> Result<(Dataset, LoadReport)> {
    let delimiter = detect_delimiter(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(false)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_owned()).collect();
    let find = |name: &str| header.iter().position(|h| h == name);
    let required = |name: &str| {
        find(name).ok_or_else(|| Error::MissingColumn {
            column: name.to_owned(),
        })
    };
    let defaults = ColumnMap::default();
    let optional = |name: &str, default: &str| -> Result<Option<usize>> {
        match find(name) {
            Some(i) => Ok(Some(i)),
            None if name == default => Ok(None),
            None => Err(Error::MissingColumn {
                column: name.to_owned(),
            }),
        }
    };

    let student_col = required(&columns.student)?;
    let item_col = required(&columns.item)?;
    let kc_col = required(&columns.kc)?;
    let outcome_col = required(&columns.outcome)?;
    let time_col = optional(&columns.time, &defaults.time)?;
    let phase_col = optional(&columns.phase, &defaults.phase)?;
    let category_col = optional(&columns.category, &defaults.category)?;
    let block_col = optional(&columns.block_size, &defaults.block_size)?;

    let mapped: Vec<usize> = [
        Some(student_col),
        Some(item_col),
        Some(kc_col),
        Some(outcome_col),
        time_col,
        phase_col,
        category_col,
        block_col,
    ]
    .into_iter()
    .flatten()
    .collect();
    let extra_idx: Vec<usize> = (0..header.len()).filter(|i| !mapped.contains(i)).collect();
    let extra_columns: Vec<String> = extra_idx.iter().map(|&i| header[i].clone()).collect();

    let mut report = LoadReport::default();
    // (student, raw time or None, file position, record)
    let mut per_student: BTreeMap<String, Vec<(Option<f64>, TrialRecord)>> = BTreeMap::new();
    for (pos, row) in reader.records().enumerate() {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(pos + 2);
        report.rows_read += 1;
        let get = |i: usize| row.get(i).unwrap_or("").trim();

        let student = get(student_col);
        if student.is_empty() {
            report.dropped.push(DroppedRow {
                line,
                reason: "missing student id".into(),
            });
            continue;
        }
        let raw_outcome = get(outcome_col);
        if is_missing(raw_outcome) {
            report.dropped.push(DroppedRow {
                line,
                reason: "missing outcome".into(),
            });
            continue;
        }
        let outcome = parse_outcome(raw_outcome)
            .ok_or_else(|| Error::row(line, format!("unparseable outcome `{raw_outcome}`")))?;
        let time = match time_col {
            Some(i) => {
                Some(parse_time(get(i)).ok_or_else(|| Error::row(line, format!("unparseable time `{}`", get(i))))?)
            }
            None => None,
        };
        let phase = match phase_col {
            Some(i) => get(i).parse::<Phase>().map_err(|e| Error::row(line, e))?,
            None => Phase::Learning,
        };
        let kc = get(kc_col).to_owned();
        let category = match category_col.map(get) {
            Some(c) if !is_missing(c) => c.to_owned(),
            _ => kc.clone(),
        };
        let block_size = match block_col.map(get) {
            Some(b) if !is_missing(b) => Some(
                b.parse::<u32>()
                    .ok()
                    .filter(|&v| v > 0)
                    .ok_or_else(|| Error::row(line, format!("block size `{b}` is not a positive integer")))?,
            ),
            _ => None,
        };
        let record = TrialRecord {
            student_id: student.to_owned(),
            item_id: get(item_col).to_owned(),
            kc_id: kc,
            outcome,
            time: 0.0,
            phase,
            category,
            block_size,
            sequence_index: 0,
            extra: extra_idx.iter().map(|&i| get(i).to_owned()).collect(),
        };
        per_student.entry(student.to_owned()).or_default().push((time, record));
    }

    let mut students = Vec::with_capacity(per_student.len());
    for (id, mut rows) in per_student {
        if rows.iter().all(|(t, _)| t.is_some()) {
            if options.keep_file_order {
                if let Some(w) = rows.windows(2).find(|w| w[1].0 < w[0].0) {
                    return Err(Error::Validation {
                        student: id,
                        message: format!(
                            "time decreases from {} to {} at trial {}",
                            w[0].0.unwrap_or_default(),
                            w[1].0.unwrap_or_default(),
                            w[1].1.item_id
                        ),
                    });
                }
            } else {
                // stable: ties keep file order
                rows.sort_by(|a, b| a.0.unwrap_or(0.0).total_cmp(&b.0.unwrap_or(0.0)));
            }
        }
        let origin = rows.iter().filter_map(|(t, _)| *t).fold(f64::INFINITY, f64::min);
        let trials = rows
            .into_iter()
            .enumerate()
            .map(|(i, (t, mut record))| {
                record.sequence_index = i;
                record.time = match t {
                    Some(t) => t - origin,
                    None => i as f64,
                };
                record
            })
            .collect();
        students.push(StudentTrials { id, trials });
    }
    Ok((
        Dataset {
            students,
            extra_columns,
        },
        report,
    ))
}

/// Which phases feed the practice history. Trials of excluded phases are
/// still predicted, they just never count as prior practice.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryPolicy {
    pub excluded_phases: Vec<Phase>,
}

impl HistoryPolicy {
    pub fn updates_history(&self, phase: Phase) -> bool {
        !self.excluded_phases.contains(&phase)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComparisonTag {
    Same,
    Different,
    /// First trial of a stream: there is nothing to compare against.
    Initial,
}

impl ComparisonTag {
    fn slot(self) -> usize {
        match self {
            ComparisonTag::Same => 0,
            ComparisonTag::Different => 1,
            ComparisonTag::Initial => 2,
        }
    }
}

/// Earlier same-level trial counts, split by comparison tag and outcome.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TagCounts {
    // [tag][outcome]: outcome 0 = failure, 1 = success
    counts: [[u32; 2]; 3],
}

impl TagCounts {
    pub fn add(&mut self, tag: ComparisonTag, outcome: u8) {
        self.counts[tag.slot()][usize::from(outcome == 1)] += 1;
    }

    pub fn successes(&self, tag: ComparisonTag) -> u32 {
        self.counts[tag.slot()][1]
    }

    pub fn failures(&self, tag: ComparisonTag) -> u32 {
        self.counts[tag.slot()][0]
    }

    pub fn total(&self, tag: ComparisonTag) -> u32 {
        self.successes(tag) + self.failures(tag)
    }
}

/// History of one trial's level (its KC by default) over strictly earlier
/// trials.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceContext {
    pub prior_count: u32,
    pub prior_successes: u32,
    pub prior_failures: u32,
    /// Elapsed seconds from each earlier same-level trial to now, oldest first.
    pub ages: Vec<f64>,
    /// Spacing in seconds between consecutive earlier same-level trials.
    pub lags: Vec<f64>,
    pub by_tag: TagCounts,
    pub comparison_tag: ComparisonTag,
    /// Outcomes of the earlier same-level trials, oldest first.
    pub prior_outcomes: Vec<u8>,
}

impl SequenceContext {
    pub fn is_first_exposure(&self) -> bool {
        self.prior_count == 0
    }
}

#[derive(Debug, Default, Clone)]
struct LevelHistory {
    times: Vec<f64>,
    outcomes: Vec<u8>,
    successes: u32,
    failures: u32,
    by_tag: TagCounts,
}

/// Incremental builder of [`SequenceContext`]s for one student's stream.
///
/// Call [`context`](Self::context) for the upcoming trial, then
/// [`observe`](Self::observe) once its outcome is known.
#[derive(Debug, Clone)]
pub struct HistoryTracker<'p> {
    component: Component,
    policy: &'p HistoryPolicy,
    levels: HashMap<String, LevelHistory>,
    previous_category: Option<String>,
}

impl<'p> HistoryTracker<'p> {
    pub fn new(component: Component, policy: &'p HistoryPolicy) -> Self {
        Self {
            component,
            policy,
            levels: HashMap::new(),
            previous_category: None,
        }
    }

    pub fn tag_for(&self, trial: &TrialRecord) -> ComparisonTag {
        match &self.previous_category {
            None => ComparisonTag::Initial,
            Some(prev) if *prev == trial.category => ComparisonTag::Same,
            Some(_) => ComparisonTag::Different,
        }
    }

    pub fn context(&self, trial: &TrialRecord) -> SequenceContext {
        let comparison_tag = self.tag_for(trial);
        match self.levels.get(trial.level(self.component)) {
            None => SequenceContext {
                prior_count: 0,
                prior_successes: 0,
                prior_failures: 0,
                ages: Vec::new(),
                lags: Vec::new(),
                by_tag: TagCounts::default(),
                comparison_tag,
                prior_outcomes: Vec::new(),
            },
            Some(h) => SequenceContext {
                prior_count: h.successes + h.failures,
                prior_successes: h.successes,
                prior_failures: h.failures,
                ages: h.times.iter().map(|&t| trial.time - t).collect(),
                lags: h.times.windows(2).map(|w| w[1] - w[0]).collect(),
                by_tag: h.by_tag,
                comparison_tag,
                prior_outcomes: h.outcomes.clone(),
            },
        }
    }

    pub fn observe(&mut self, trial: &TrialRecord) {
        let tag = self.tag_for(trial);
        if self.policy.updates_history(trial.phase) {
            let h = self.levels.entry(trial.level(self.component).to_owned()).or_default();
            h.times.push(trial.time);
            h.outcomes.push(trial.outcome);
            if trial.is_correct() {
                h.successes += 1;
            } else {
                h.failures += 1;
            }
            h.by_tag.add(tag, trial.outcome);
        }
        self.previous_category = Some(trial.category.clone());
    }
}

/// Contexts of one student's ordered trials, keyed on the KC.
pub fn build_context(trials: &[TrialRecord], policy: &HistoryPolicy) -> Vec<SequenceContext> {
    build_context_for(trials, Component::Kc, policy)
}

pub fn build_context_for(trials: &[TrialRecord], component: Component, policy: &HistoryPolicy) -> Vec<SequenceContext> {
    let mut tracker = HistoryTracker::new(component, policy);
    trials
        .iter()
        .map(|trial| {
            let ctx = tracker.context(trial);
            tracker.observe(trial);
            ctx
        })
        .collect()
}
