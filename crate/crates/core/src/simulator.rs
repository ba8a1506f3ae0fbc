//! Synthetic category-learning sessions with a known logistic learner.
//!
//! [`generate_sequence`] lays out trial skeletons (pretest, learning
//! session in runs of `block_size` same-category trials, posttest with
//! novel exemplars); [`simulate_outcomes`] draws each outcome from the
//! ground-truth model given the realized history.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ColumnMap, Dataset, HistoryPolicy, Phase, StudentTrials, TrialRecord};
use crate::dsl::{parse_model, ModelSpec};
use crate::error::{Error, Result};
use crate::estimator::sigmoid;
use crate::features::{StudentStream, TermParams, TermValue};

/// Extra columns written by the simulator.
pub const COL_REPETITION: &str = "Repetition";
pub const COL_NOVEL: &str = "Novel";
pub const COL_SIMILARITY: &str = "Similarity";
pub const COL_SESSION: &str = "Session";

const WARMUP_CATEGORY: &str = "warmup";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignConfig {
    pub n_categories: usize,
    pub n_exemplars: usize,
    /// Presentations of every exemplar per learning session.
    pub n_repetitions: usize,
    /// Block sizes assigned to students (and sessions) round-robin.
    pub block_sizes: Vec<u32>,
    /// Seconds between consecutive trials.
    pub inter_trial_time: f64,
    /// Extra seconds inserted between phases.
    pub phase_gap: f64,
    pub n_students: usize,
    pub pretest: bool,
    pub posttest: bool,
    pub novel_per_category: usize,
    /// Practice trials on a separate category before each learning session.
    pub warmup_trials: usize,
    /// Learning-plus-posttest cycles per student.
    pub sessions: usize,
    /// Labels assigned to students round-robin in the similarity column.
    pub similarity_levels: Vec<String>,
    pub seed: u64,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig::bird()
    }
}

impl DesignConfig {
    /// 10 categories × 4 exemplars × 4 repetitions, block sizes 1–16,
    /// 40-item pretest, 8 warm-up trials, 60-item posttest (20 novel).
    pub fn bird() -> Self {
        DesignConfig {
            n_categories: 10,
            n_exemplars: 4,
            n_repetitions: 4,
            block_sizes: vec![1, 2, 4, 8, 16],
            inter_trial_time: 5.0,
            phase_gap: 0.0,
            n_students: 181,
            pretest: true,
            posttest: true,
            novel_per_category: 2,
            warmup_trials: 8,
            sessions: 1,
            similarity_levels: vec!["high".into(), "low".into()],
            seed: 0,
        }
    }

    /// Three categories, two study-and-test cycles of 288 + 48 trials, one
    /// interleaved and one blocked.
    pub fn blob() -> Self {
        DesignConfig {
            n_categories: 3,
            n_exemplars: 8,
            n_repetitions: 12,
            block_sizes: vec![1, 24],
            inter_trial_time: 3.0,
            phase_gap: 0.0,
            n_students: 60,
            pretest: false,
            posttest: true,
            novel_per_category: 8,
            warmup_trials: 0,
            sessions: 2,
            similarity_levels: vec!["high".into(), "low".into()],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.n_categories == 0 || self.n_exemplars == 0 || self.n_repetitions == 0 {
            return bad("categories, exemplars and repetitions must be positive");
        }
        if self.block_sizes.is_empty() || self.block_sizes.contains(&0) {
            return bad("block sizes must be a nonempty list of positive integers");
        }
        if self.inter_trial_time.is_nan() || self.inter_trial_time <= 0.0 || self.phase_gap < 0.0 {
            return bad("inter-trial time must be positive and phase gap nonnegative");
        }
        if self.sessions == 0 {
            return bad("at least one session is required");
        }
        Ok(())
    }

    pub fn learning_trials_per_session(&self) -> usize {
        self.n_categories * self.n_exemplars * self.n_repetitions + self.warmup_trials
    }

    pub fn block_size_for(&self, student: usize, session: usize) -> u32 {
        self.block_sizes[(student + session) % self.block_sizes.len()]
    }
}

pub fn category_name(c: usize) -> String {
    format!("c{:02}", c + 1)
}

pub fn item_name(c: usize, e: usize) -> String {
    format!("c{:02}_e{}", c + 1, e + 1)
}

fn novel_item_name(c: usize, k: usize) -> String {
    format!("c{:02}_n{}", c + 1, k + 1)
}

pub fn student_name(i: usize) -> String {
    format!("s{:04}", i + 1)
}

/// Learning-session category order for one block size: categories cycle
/// in `order`, each contributing a run of up to `block` trials per visit.
/// Each entry is `(category, exemplar, repetition)`.
pub fn block_schedule(
    order: &[usize],
    n_exemplars: usize,
    n_repetitions: usize,
    block: u32,
    rng: &mut impl Rng,
) -> Vec<(usize, usize, usize)> {
    let mut queues: Vec<std::collections::VecDeque<(usize, usize, usize)>> = order
        .iter()
        .map(|&c| {
            let mut q = std::collections::VecDeque::new();
            for r in 0..n_repetitions {
                let mut ex: Vec<usize> = (0..n_exemplars).collect();
                ex.shuffle(rng);
                q.extend(ex.into_iter().map(|e| (c, e, r + 1)));
            }
            q
        })
        .collect();
    let mut out = Vec::with_capacity(order.len() * n_exemplars * n_repetitions);
    while queues.iter().any(|q| !q.is_empty()) {
        for q in &mut queues {
            for _ in 0..block {
                match q.pop_front() {
                    Some(t) => out.push(t),
                    None => break,
                }
            }
        }
    }
    out
}

struct SkeletonBuilder<'c> {
    config: &'c DesignConfig,
    student: String,
    similarity: String,
    time: f64,
    trials: Vec<TrialRecord>,
}

impl SkeletonBuilder<'_> {
    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        item: String,
        category: &str,
        phase: Phase,
        block: Option<u32>,
        repetition: usize,
        novel: bool,
        session: usize,
    ) {
        if let Some(last) = self.trials.last() {
            self.time += self.config.inter_trial_time;
            if last.phase != phase {
                self.time += self.config.phase_gap;
            }
        }
        self.trials.push(TrialRecord {
            student_id: self.student.clone(),
            item_id: item,
            kc_id: category.to_owned(),
            outcome: 0,
            time: self.time,
            phase,
            category: category.to_owned(),
            block_size: block,
            sequence_index: self.trials.len(),
            extra: vec![
                repetition.to_string(),
                u8::from(novel).to_string(),
                self.similarity.clone(),
                (session + 1).to_string(),
            ],
        });
    }
}

/// Trial skeletons (outcomes all 0) for every student in the design.
pub fn generate_sequence(config: &DesignConfig) -> Result<Dataset> {
    config.validate()?;
    for &b in &config.block_sizes {
        if config.n_categories == 1 && (b as usize) < config.n_exemplars * config.n_repetitions {
            warn!("block size {b} with a single category cannot interleave; runs will be adjacent");
        }
    }
    let mut students = Vec::with_capacity(config.n_students);
    for s in 0..config.n_students {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(s as u64);
        let similarity = config
            .similarity_levels
            .get(s % config.similarity_levels.len().max(1))
            .cloned()
            .unwrap_or_default();
        let mut b = SkeletonBuilder {
            config,
            student: student_name(s),
            similarity,
            time: 0.0,
            trials: Vec::new(),
        };
        let learned: Vec<(usize, usize)> = (0..config.n_categories)
            .flat_map(|c| (0..config.n_exemplars).map(move |e| (c, e)))
            .collect();

        if config.pretest {
            let mut items = learned.clone();
            items.shuffle(&mut rng);
            for (c, e) in items {
                b.push(item_name(c, e), &category_name(c), Phase::Pretest, None, 0, false, 0);
            }
        }
        for session in 0..config.sessions {
            for w in 0..config.warmup_trials {
                b.push(
                    format!("warmup_{}", w + 1),
                    WARMUP_CATEGORY,
                    Phase::Learning,
                    None,
                    0,
                    false,
                    session,
                );
            }
            let block = config.block_size_for(s, session);
            let mut order: Vec<usize> = (0..config.n_categories).collect();
            order.shuffle(&mut rng);
            for (c, e, r) in block_schedule(&order, config.n_exemplars, config.n_repetitions, block, &mut rng) {
                b.push(
                    item_name(c, e),
                    &category_name(c),
                    Phase::Learning,
                    Some(block),
                    r,
                    false,
                    session,
                );
            }
            if config.posttest {
                let mut items: Vec<(String, usize, bool)> =
                    learned.iter().map(|&(c, e)| (item_name(c, e), c, false)).collect();
                for c in 0..config.n_categories {
                    for k in 0..config.novel_per_category {
                        items.push((novel_item_name(c, k), c, true));
                    }
                }
                items.shuffle(&mut rng);
                for (item, c, novel) in items {
                    b.push(item, &category_name(c), Phase::Posttest, Some(block), 0, novel, session);
                }
            }
        }
        students.push(StudentTrials {
            id: b.student,
            trials: b.trials,
        });
    }
    Ok(Dataset {
        students,
        extra_columns: vec![
            COL_REPETITION.into(),
            COL_NOVEL.into(),
            COL_SIMILARITY.into(),
            COL_SESSION.into(),
        ],
    })
}

/// A model formula with true coefficients and nonlinear parameters.
///
/// Coefficients are keyed by design column name (`term` or `term#level`).
/// A key equal to a term label alone applies to every level of that term
/// that has no explicit entry; absent levels contribute nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLearner {
    pub formula: String,
    pub coefficients: BTreeMap<String, f64>,
    /// Term label → parameter name → value, for parameters not pinned in
    /// the formula.
    #[serde(default)]
    pub nl_params: BTreeMap<String, BTreeMap<String, f64>>,
}

/// A truth resolved against a column mapping.
#[derive(Debug, Clone)]
pub struct ResolvedTruth {
    pub spec: ModelSpec,
    pub params: TermParams,
    labels: Vec<String>,
    coefficients: BTreeMap<String, f64>,
}

impl GroundTruthLearner {
    /// AFM with recency: the default learner for simulated designs.
    pub fn afm_recency(config: &DesignConfig) -> Self {
        let mut coefficients = BTreeMap::new();
        coefficients.insert("logitdec(Anon.Student.Id)".into(), 0.2);
        coefficients.insert("lineafm(KC..Default.)".into(), 0.06);
        coefficients.insert("recency(KC..Default.)".into(), 2.0);
        for c in 0..config.n_categories {
            for e in 0..config.n_exemplars {
                let v = -1.5 + 0.3 * ((c + e) % 5) as f64;
                coefficients.insert(format!("intercept(Problem.Name)#{}", item_name(c, e)), v);
            }
        }
        for w in 0..config.warmup_trials {
            coefficients.insert(format!("intercept(Problem.Name)#warmup_{}", w + 1), 0.0);
        }
        let mut nl_params = BTreeMap::new();
        nl_params.insert(
            "logitdec(Anon.Student.Id)".into(),
            BTreeMap::from([("w".to_owned(), 0.8)]),
        );
        nl_params.insert("recency(KC..Default.)".into(), BTreeMap::from([("d".to_owned(), 0.5)]));
        GroundTruthLearner {
            formula: "logitdec(Anon.Student.Id)+intercept(Problem.Name)+lineafm(KC..Default.)+recency(KC..Default.)"
                .into(),
            coefficients,
            nl_params,
        }
    }

    pub fn resolve(&self, columns: &ColumnMap) -> Result<ResolvedTruth> {
        let spec = parse_model(&self.formula, columns)?;
        let labels: Vec<String> = spec.terms.iter().map(|t| t.label(columns)).collect();
        let mut params = Vec::with_capacity(spec.terms.len());
        for (term, label) in spec.terms.iter().zip(&labels) {
            let given = self.nl_params.get(label);
            let mut values = Vec::new();
            for p in term.feature.params() {
                let v = term
                    .fixed_params
                    .get(p.name)
                    .or_else(|| given.and_then(|g| g.get(p.name)))
                    .copied()
                    .ok_or_else(|| {
                        Error::Simulation(format!("truth is missing parameter `{}` of `{label}`", p.name))
                    })?;
                if !(p.lower..=p.upper).contains(&v) {
                    return Err(Error::Simulation(format!(
                        "truth parameter `{}` of `{label}` = {v} is outside [{}, {}]",
                        p.name, p.lower, p.upper
                    )));
                }
                values.push(v);
            }
            params.push(values);
        }
        Ok(ResolvedTruth {
            spec,
            params,
            labels,
            coefficients: self.coefficients.clone(),
        })
    }
}

impl ResolvedTruth {
    fn coefficient(&self, term: usize, value: &TermValue<'_>) -> (f64, f64) {
        let label = &self.labels[term];
        match *value {
            TermValue::Scalar(x) => (self.coefficients.get(label).copied().unwrap_or(0.0), x),
            TermValue::Level(level, x) => {
                let key = format!("{label}#{level}");
                let beta = self
                    .coefficients
                    .get(&key)
                    .or_else(|| self.coefficients.get(label))
                    .copied()
                    .unwrap_or(0.0);
                (beta, x)
            }
        }
    }

    fn linear_predictor(&self, values: &[TermValue<'_>]) -> f64 {
        values
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let (beta, x) = self.coefficient(k, v);
                beta * x
            })
            .sum()
    }

    /// True success probabilities for observed data, in global row order.
    pub fn predict(&self, dataset: &Dataset, policy: &HistoryPolicy) -> Vec<f64> {
        let mut out = Vec::with_capacity(dataset.n_trials());
        for student in &dataset.students {
            let mut stream = StudentStream::new(&self.spec, &self.params, policy);
            for trial in &student.trials {
                out.push(sigmoid(self.linear_predictor(&stream.values(trial))));
                stream.observe(trial);
            }
        }
        out
    }
}

/// Draw outcomes trial by trial; each probability uses the realized
/// history, so success-dependent features see simulated successes.
pub fn simulate_outcomes(skeleton: &Dataset, truth: &ResolvedTruth, policy: &HistoryPolicy, seed: u64) -> Dataset {
    let students = skeleton
        .students
        .iter()
        .enumerate()
        .map(|(s, student)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let mut stream = StudentStream::new(&truth.spec, &truth.params, policy);
            let mut trials = Vec::with_capacity(student.trials.len());
            for skeleton_trial in &student.trials {
                let mut trial = skeleton_trial.clone();
                let p = sigmoid(truth.linear_predictor(&stream.values(&trial)));
                trial.outcome = u8::from(rng.gen_bool(p));
                stream.observe(&trial);
                trials.push(trial);
            }
            StudentTrials {
                id: student.id.clone(),
                trials,
            }
        })
        .collect();
    Dataset {
        students,
        extra_columns: skeleton.extra_columns.clone(),
    }
}

/// Generate a design and simulate it in one step.
pub fn simulate(
    config: &DesignConfig,
    truth: &GroundTruthLearner,
    columns: &ColumnMap,
    policy: &HistoryPolicy,
) -> Result<Dataset> {
    let skeleton = generate_sequence(config)?;
    let resolved = truth.resolve(columns)?;
    Ok(simulate_outcomes(
        &skeleton,
        &resolved,
        policy,
        config.seed.wrapping_add(0x5eed),
    ))
}
