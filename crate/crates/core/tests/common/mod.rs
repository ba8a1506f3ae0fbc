#![allow(dead_code)]

use lkt_seq::data::{ColumnMap, Component, Dataset, HistoryPolicy, Phase, TrialRecord};
use lkt_seq::dsl::{parse_model, Feature, ModelSpec, SplitLevel, Term};
use lkt_seq::features::{build_design_matrix, resolve_params, DesignLayout, FeatureData, TermParams};
use rand::Rng;

/// Every feature on the KC, the comparison splits, logitdec at two
/// levels and recency on the item.
pub const ORACLE_FORMULA: &str = "intercept(KC..Default.)+lineafm(KC..Default.)+linesuc(KC..Default.)+\
    linefail(KC..Default.)+lineafm(KC..Default.%Comparison%Same)+lineafm(KC..Default.%Comparison%Different)+\
    linesuc(KC..Default.%Comparison%Same)+linesuc(KC..Default.%Comparison%Different)+\
    linefail(KC..Default.%Comparison%Same)+linefail(KC..Default.%Comparison%Different)+\
    logitdec(Anon.Student.Id)+logitdec(KC..Default.)+recency(KC..Default.)+recency(Problem.Name)+\
    ppe(KC..Default.)+base4(KC..Default.)";

pub fn oracle_spec() -> ModelSpec {
    parse_model(ORACLE_FORMULA, &ColumnMap::default()).unwrap()
}

/// A random stream for one student: up to `max_len` trials over a few
/// KCs and categories, with ties, sub-second gaps and mixed phases.
pub fn random_stream(rng: &mut impl Rng, student: &str, max_len: usize) -> Vec<TrialRecord> {
    let n = rng.gen_range(1..=max_len);
    let n_kc = rng.gen_range(1..=4);
    let n_cat = rng.gen_range(1..=3);
    let mut time = rng.gen_range(0.0..1e6);
    (0..n)
        .map(|i| {
            time += match rng.gen_range(0..4) {
                0 => 0.0,
                1 => rng.gen_range(0.0..1.0),
                2 => rng.gen_range(1.0..30.0),
                _ => rng.gen_range(30.0..5000.0),
            };
            let kc = format!("k{}", rng.gen_range(0..n_kc));
            TrialRecord {
                student_id: student.to_owned(),
                item_id: format!("{kc}_i{}", rng.gen_range(0..3)),
                kc_id: kc,
                outcome: u8::from(rng.gen_bool(0.6)),
                time,
                phase: [Phase::Pretest, Phase::Learning, Phase::Learning, Phase::Posttest][rng.gen_range(0..4)],
                category: format!("c{}", rng.gen_range(0..n_cat)),
                block_size: None,
                sequence_index: i,
                extra: vec![],
            }
        })
        .collect()
}

pub fn random_policy(rng: &mut impl Rng) -> HistoryPolicy {
    match rng.gen_range(0..3) {
        0 => HistoryPolicy::default(),
        1 => HistoryPolicy {
            excluded_phases: vec![Phase::Pretest],
        },
        _ => HistoryPolicy {
            excluded_phases: vec![Phase::Posttest, Phase::Pretest],
        },
    }
}

/// A uniformly random point inside every free parameter's box.
pub fn random_params(rng: &mut impl Rng, spec: &ModelSpec) -> TermParams {
    let free: Vec<f64> = spec
        .free_params()
        .iter()
        .map(|&p| {
            let s = spec.param_spec(p);
            rng.gen_range(s.lower..=s.upper)
        })
        .collect();
    resolve_params(spec, &free)
}

fn level(trial: &TrialRecord, component: Component) -> &str {
    match component {
        Component::Student => &trial.student_id,
        Component::Item => &trial.item_id,
        Component::Kc => &trial.kc_id,
    }
}

/// The comparison tag of trial `j`, as 0 = first trial, 1 = same
/// category as the trial before, 2 = different.
fn tag(trials: &[TrialRecord], j: usize) -> u8 {
    if j == 0 {
        0
    } else if trials[j].category == trials[j - 1].category {
        1
    } else {
        2
    }
}

/// Feature value of `term` at trial `t`, recomputed from scratch by
/// scanning the stream prefix.
pub fn oracle_value(term: &Term, trials: &[TrialRecord], t: usize, params: &[f64], policy: &HistoryPolicy) -> f64 {
    let now = &trials[t];
    let here = level(now, term.component);
    let prior: Vec<usize> = (0..t)
        .filter(|&j| level(&trials[j], term.component) == here && !policy.excluded_phases.contains(&trials[j].phase))
        .collect();
    let in_split = |j: usize| match term.split {
        None => true,
        Some(SplitLevel::Same) => tag(trials, j) == 1,
        Some(SplitLevel::Different) => tag(trials, j) == 2,
    };
    let clamp = |x: f64| if x < 1.0 { 1.0 } else { x };
    match term.feature {
        Feature::Intercept => 1.0,
        Feature::Lineafm => prior.iter().filter(|&&j| in_split(j)).count() as f64,
        Feature::Linesuc => prior.iter().filter(|&&j| in_split(j) && trials[j].outcome == 1).count() as f64,
        Feature::Linefail => prior.iter().filter(|&&j| in_split(j) && trials[j].outcome == 0).count() as f64,
        Feature::Logitdec => {
            let w = params[0];
            let (mut s, mut f) = (1.0, 1.0);
            for &j in &prior {
                let y = f64::from(trials[j].outcome);
                s = w * s + y;
                f = w * f + (1.0 - y);
            }
            (s / f).ln()
        }
        Feature::Recency => match prior.last() {
            None => 0.0,
            Some(&j) => clamp(now.time - trials[j].time).powf(-params[0]),
        },
        Feature::Ppe => {
            if prior.is_empty() {
                return 0.0;
            }
            let (x, c, b, m) = (params[0], params[1], params[2], params[3]);
            let n = prior.len() as f64;
            let ages: Vec<f64> = prior.iter().map(|&j| clamp(now.time - trials[j].time)).collect();
            let weights: Vec<f64> = ages.iter().map(|a| a.powf(-x)).collect();
            let total: f64 = weights.iter().sum();
            let time: f64 = ages.iter().zip(&weights).map(|(a, w)| a * w).sum::<f64>() / total;
            let mut spacing = 0.0;
            for pair in prior.windows(2) {
                let lag = trials[pair[1]].time - trials[pair[0]].time;
                spacing += 1.0 / (lag + std::f64::consts::E).ln();
            }
            if prior.len() > 1 {
                spacing /= n - 1.0;
            }
            n.powf(c) * time.powf(-(b + m * spacing))
        }
        Feature::Base4 => {
            if prior.is_empty() {
                return 0.0;
            }
            let (x, c, d, s0) = (params[0], params[1], params[2], params[3]);
            let n = prior.len() as f64;
            let first = clamp(now.time - trials[prior[0]].time);
            let lags: Vec<f64> = prior
                .windows(2)
                .map(|p| trials[p[1]].time - trials[p[0]].time)
                .collect();
            let mean_lag = if lags.is_empty() {
                0.0
            } else {
                lags.iter().sum::<f64>() / lags.len() as f64
            };
            (mean_lag + s0).powf(x) * n.powf(c) * first.powf(-d)
        }
    }
}

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    a == b || (a - b).abs() <= rel * a.abs().max(b.abs())
}

/// Compare the batch design matrix with the oracle on every cell; returns
/// the first mismatch as text.
pub fn check_against_oracle(
    dataset: &Dataset,
    spec: &ModelSpec,
    params: &TermParams,
    policy: &HistoryPolicy,
) -> Result<usize, String> {
    let columns = ColumnMap::default();
    let layout = DesignLayout::new(spec, dataset, &columns);
    let data = FeatureData::new(dataset, spec, policy.clone());
    let design = build_design_matrix(spec, &data, &layout, params);
    let index: std::collections::HashMap<&str, usize> = layout
        .columns
        .iter()
        .enumerate()
        .map(|(j, c)| (c.as_str(), j))
        .collect();
    let mut row = 0;
    let mut cells = 0;
    for student in &dataset.students {
        for t in 0..student.trials.len() {
            let dense = design.dense_row(row);
            for (k, term) in spec.terms.iter().enumerate() {
                let mut name = term.label(&columns);
                if term.expands_levels() {
                    name = format!("{name}#{}", level(&student.trials[t], term.component));
                }
                let got = dense[index[name.as_str()]];
                let want = oracle_value(term, &student.trials, t, &params[k], policy);
                if !close(got, want, 1e-12) {
                    return Err(format!(
                        "student {} trial {t} column {name}: {got} vs oracle {want}",
                        student.id
                    ));
                }
                cells += 1;
            }
            row += 1;
        }
    }
    Ok(cells)
}
