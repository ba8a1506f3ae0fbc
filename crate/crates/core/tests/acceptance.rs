//! End-to-end acceptance checks, one PASS/FAIL line each.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use common::{oracle_spec, random_params, random_policy, random_stream};
use lkt_seq::data::{load_trials, ColumnMap, Dataset, HistoryPolicy, LoadOptions, Phase};
use lkt_seq::dsl::{catalog, parse_model, ModelSpec};
use lkt_seq::estimator::{fit_inner, gradient, penalized_log_likelihood, sigmoid, FitOptions, InnerOptions};
use lkt_seq::evaluation::{
    fit_fold, grouped_correlation, make_folds, metric_auc, metric_r2, metric_rmse, run_cv, CvPlan, Grouping, RowValues,
};
use lkt_seq::features::{build_design_matrix, DesignLayout, DesignMatrix, FeatureData};
use lkt_seq::simulator::{item_name, simulate, DesignConfig, GroundTruthLearner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn columns() -> ColumnMap {
    ColumnMap::default()
}

/// Same-split + Different-split + no-predecessor counts against the
/// unsplit count, on every trial; returns trials checked or a mismatch.
fn partition_identity(dataset: &Dataset, policy: &HistoryPolicy) -> Result<usize, String> {
    let spec = parse_model(
        "lineafm(KC..Default.)+lineafm(KC..Default.%Comparison%Same)+lineafm(KC..Default.%Comparison%Different)",
        &columns(),
    )
    .unwrap();
    let layout = DesignLayout::new(&spec, dataset, &columns());
    let data = FeatureData::new(dataset, &spec, policy.clone());
    let m = build_design_matrix(&spec, &data, &layout, &vec![vec![]; 3]);
    let mut row = 0;
    for s in &dataset.students {
        let first = &s.trials[0];
        for (t, trial) in s.trials.iter().enumerate() {
            let r = m.dense_row(row);
            // the stream's first trial is the only one without a predecessor
            let initial =
                usize::from(t > 0 && first.kc_id == trial.kc_id && policy.updates_history(first.phase)) as f64;
            if r[0] != r[1] + r[2] + initial {
                return Err(format!(
                    "student {} trial {t}: {} != {} + {} + {initial}",
                    s.id, r[0], r[1], r[2]
                ));
            }
            row += 1;
        }
    }
    Ok(row)
}

fn criterion_1_and_8() -> (Outcome, Outcome) {
    let start = Instant::now();
    let spec = oracle_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut cells = 0;
    let mut datasets = Vec::new();
    let mut failure = None;
    // 100 datasets of 10 independent streams each
    for batch in 0..100 {
        let records = (0..10)
            .flat_map(|s| random_stream(&mut rng, &format!("b{batch:03}s{s}"), 200))
            .collect();
        let dataset = Dataset::from_records(records, vec![]);
        let params = random_params(&mut rng, &spec);
        let policy = random_policy(&mut rng);
        match common::check_against_oracle(&dataset, &spec, &params, &policy) {
            Ok(n) => cells += n,
            Err(e) => {
                failure = Some(format!("batch {batch}: {e}"));
                break;
            }
        }
        datasets.push((dataset, policy));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let c1 = match failure {
        Some(e) => outcome(false, e),
        None => outcome(
            elapsed < 60.0,
            format!("1000 streams, {cells} cells equal to prefix recomputation within 1e-12, {elapsed:.1}s"),
        ),
    };
    let mut trials = 0;
    let mut err = None;
    for (ds, policy) in datasets {
        match partition_identity(&ds, &policy) {
            Ok(n) => trials += n,
            Err(e) => err = Some(e),
        }
    }
    let c8 = match err {
        Some(e) => outcome(false, e),
        None => outcome(true, format!("{trials} trials")),
    };
    (c1, c8)
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_auc: f64 = 0.0;
    let mut worst_other: f64 = 0.0;
    for case in 0..60 {
        let n = rng.gen_range(2..=500);
        let levels = if case % 2 == 0 { 10 } else { 1_000_000 };
        let p: Vec<f64> = (0..n)
            .map(|_| (rng.gen_range(0..levels) as f64 + 0.5) / levels as f64)
            .collect();
        let y: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.45)))).collect();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if y[i] == 1.0 && y[j] == 0.0 {
                    pairs += 1.0;
                    wins += if p[i] > p[j] {
                        1.0
                    } else if p[i] == p[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        match metric_auc(&p, &y) {
            Some(a) => worst_auc = worst_auc.max((a - wins / pairs).abs()),
            None if pairs == 0.0 => {}
            None => return outcome(false, format!("case {case}: AUC undefined with {pairs} pairs")),
        }
        let rate: f64 = rng.gen_range(0.05..0.95);
        let direct_ll: f64 = p
            .iter()
            .zip(&y)
            .map(|(p, y)| y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            .sum();
        let null_ll: f64 = y.iter().map(|y| y * rate.ln() + (1.0 - y) * (1.0 - rate).ln()).sum();
        if let Some(r2) = metric_r2(&p, &y, rate) {
            worst_other = worst_other.max((r2 - (1.0 - direct_ll / null_ll)).abs());
        }
        let mse: f64 = p.iter().zip(&y).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / n as f64;
        worst_other = worst_other.max((metric_rmse(&p, &y).unwrap() - mse.sqrt()).abs());
    }

    // hand-built four-group table: block sizes 1, 2, 4, 8 with two rows each
    let records: Vec<_> = [1u32, 1, 2, 2, 4, 4, 8, 8]
        .iter()
        .enumerate()
        .map(|(i, &b)| lkt_seq::data::TrialRecord {
            student_id: "s".into(),
            item_id: format!("i{i}"),
            kc_id: "k".into(),
            outcome: 0,
            time: i as f64,
            phase: lkt_seq::data::Phase::Posttest,
            category: "k".into(),
            block_size: Some(b),
            sequence_index: i,
            extra: vec![],
        })
        .collect();
    let ds = Dataset::from_records(records, vec![]);
    let cm = columns();
    let values = RowValues::new(&ds, &cm);
    let rows: Vec<_> = ds.trials().enumerate().collect();
    let grouping = Grouping {
        name: "g".into(),
        filter: vec![],
        key: vec!["block_size".into()],
    };
    let p = [0.1, 0.3, 0.4, 0.4, 0.7, 0.5, 0.9, 0.7];
    let y = [0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
    // group means: p = .2 .4 .6 .8, y = 0 .5 .5 1; textbook Pearson = 0.9486832980505138
    let mp = [0.2, 0.4, 0.6, 0.8];
    let my = [0.0, 0.5, 0.5, 1.0];
    let (ax, ay) = (0.5, 0.5);
    let sxy: f64 = mp.iter().zip(&my).map(|(a, b)| (a - ax) * (b - ay)).sum();
    let sxx: f64 = mp.iter().map(|a| (a - ax) * (a - ax)).sum();
    let syy: f64 = my.iter().map(|b| (b - ay) * (b - ay)).sum();
    let textbook = sxy / (sxx * syy).sqrt();
    let got = grouped_correlation(&p, &y, &rows, &values, &grouping)
        .r
        .unwrap_or(f64::NAN);
    let pearson_err = (got - textbook).abs();
    let pass = worst_auc <= 1e-12 && worst_other <= 1e-12 && pearson_err <= 1e-12;
    outcome(
        pass,
        format!(
            "AUC max |diff| {worst_auc:.1e} over 60 cases (n<=500); R2/RMSE max |diff| {worst_other:.1e}; grouped r {got:.6} vs {textbook:.6}"
        ),
    )
}

fn random_design(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DesignMatrix {
    let beta: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let r: Vec<f64> = (0..p).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let eta: f64 = r.iter().zip(&beta).map(|(a, b)| a * b).sum();
        y.push(f64::from(u8::from(rng.gen_bool(sigmoid(eta)))));
        rows.push(r);
    }
    DesignMatrix::from_dense((0..p).map(|j| format!("x{j}")).collect(), &rows, y)
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_grad: f64 = 0.0;
    let mut worst_start: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.gen_range(50..400);
        let p = rng.gen_range(2..8);
        let d = random_design(&mut rng, n, p);
        let ridge = rng.gen_range(1e-3..1.0);
        let beta: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let g = gradient(&d, &beta, ridge);
        for j in 0..p {
            let h = 1e-5;
            let mut up = beta.clone();
            up[j] += h;
            let mut down = beta.clone();
            down[j] -= h;
            let fd =
                (penalized_log_likelihood(&d, &up, ridge) - penalized_log_likelihood(&d, &down, ridge)) / (2.0 * h);
            worst_grad = worst_grad.max((fd - g[j]).abs() / g[j].abs().max(1.0));
        }
        let opts = InnerOptions {
            ridge,
            ..InnerOptions::default()
        };
        let a = fit_inner(&d, &opts, None).unwrap();
        let other: Vec<f64> = (0..p).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b = fit_inner(&d, &opts, Some(&other)).unwrap();
        for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
            worst_start = worst_start.max((x - y).abs());
        }
    }
    outcome(
        worst_grad <= 1e-6 && worst_start <= 1e-6,
        format!("gradient vs central differences max rel {worst_grad:.1e}; two starts max |diff| {worst_start:.1e} (20 instances)"),
    )
}

/// Mean test-fold R² of the truth itself on the folds of `plan`.
fn truth_cv_r2(dataset: &Dataset, truth: &GroundTruthLearner, plan: &CvPlan) -> f64 {
    let resolved = truth.resolve(&columns()).unwrap();
    let p = resolved.predict(dataset, &HistoryPolicy::default());
    let y: Vec<f64> = dataset.trials().map(|t| f64::from(t.outcome)).collect();
    let ids = dataset.student_ids();
    let folds = make_folds(&ids, plan).unwrap();
    let mut offsets = vec![0];
    for s in &dataset.students {
        offsets.push(offsets.last().unwrap() + s.trials.len());
    }
    let mut values = Vec::new();
    for assign in &folds {
        for f in 0..plan.n_folds {
            let (mut tp, mut ty, mut train_pos, mut train_n) = (Vec::new(), Vec::new(), 0.0, 0.0);
            for s in 0..ids.len() {
                let range = offsets[s]..offsets[s + 1];
                if assign[s] == f {
                    tp.extend_from_slice(&p[range.clone()]);
                    ty.extend_from_slice(&y[range]);
                } else {
                    train_pos += y[range.clone()].iter().sum::<f64>();
                    train_n += range.len() as f64;
                }
            }
            values.push(metric_r2(&tp, &ty, train_pos / train_n).unwrap());
        }
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn criterion_4() -> (Outcome, Dataset) {
    let start = Instant::now();
    let config = DesignConfig {
        n_students: 200,
        seed: 4,
        ..DesignConfig::bird()
    };
    let truth = GroundTruthLearner::afm_recency(&config);
    let dataset = simulate(&config, &truth, &columns(), &HistoryPolicy::default()).unwrap();
    let spec = parse_model(&catalog::formula("AFM+recency").unwrap(), &columns()).unwrap();
    let model = lkt_seq::estimator::fit_model(&spec, &dataset, &FitOptions::default()).unwrap();
    let fitted = &model.result.coefficients;

    // every fitted column has a true value; absent truth entries (novel
    // items) are zero
    let mut worst_scalar: (f64, String) = (0.0, String::new());
    let mut item_devs: Vec<(f64, String)> = Vec::new();
    for (name, &b) in fitted {
        let t = truth.coefficients.get(name).copied().unwrap_or(0.0);
        let dev = (b - t).abs();
        if name.contains('#') {
            item_devs.push((dev, name.clone()));
        } else if dev >= worst_scalar.0 {
            worst_scalar = (dev, name.clone());
        }
    }
    item_devs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let items_within = item_devs.iter().filter(|d| d.0 <= 0.05).count();
    let learned: Vec<f64> = item_devs
        .iter()
        .filter(|d| (0..10).any(|c| (0..4).any(|e| d.1.ends_with(&format!("#{}", item_name(c, e))))))
        .map(|d| d.0)
        .collect();
    let fitted_d = model.result.nl_params["recency(KC..Default.)"]["d"];
    let d_ok = (fitted_d - 0.5).abs() <= 0.1;

    let plan = CvPlan {
        n_folds: 5,
        n_repeats: 2,
        seed: 4,
    };
    let report = run_cv(&spec, &dataset, &plan, &[], &FitOptions::default()).unwrap();
    let cv_r2 = report.r2_mcfadden.mean.unwrap();
    let truth_r2 = truth_cv_r2(&dataset, &truth, &plan);
    let cv_ok = (cv_r2 - truth_r2).abs() <= 0.03;
    let elapsed = start.elapsed().as_secs_f64();
    let coef_ok = worst_scalar.0 <= 0.05 && items_within == item_devs.len();
    let rmse_learned = (learned.iter().map(|d| d * d).sum::<f64>() / learned.len() as f64).sqrt();
    (
        outcome(
            coef_ok && d_ok && cv_ok && elapsed < 600.0,
            format!(
                "scalar coefs max |err| {:.3} ({}); item intercepts within 0.05: {}/{} (worst {:.3} at {}, learned-item RMS err {:.3}); d = {:.3}; CV R2 {:.4} vs truth {:.4}; {:.0}s",
                worst_scalar.0,
                worst_scalar.1,
                items_within,
                item_devs.len(),
                item_devs[0].0,
                item_devs[0].1,
                rmse_learned,
                fitted_d,
                cv_r2,
                truth_r2,
                elapsed
            ),
        ),
        dataset,
    )
}

fn posttest_r2(spec: &ModelSpec, dataset: &Dataset, seed: u64, policy: &HistoryPolicy) -> f64 {
    let plan = CvPlan {
        n_folds: 2,
        n_repeats: 1,
        seed,
    };
    let mut options = FitOptions::default();
    options.search.seed = seed;
    options.policy = policy.clone();
    let report = run_cv(spec, dataset, &plan, &[Grouping::r2()], &options).unwrap();
    report.correlations["r2"].mean.unwrap_or(f64::NAN)
}

fn truth_with(
    formula: &str,
    scalars: &[(&str, f64)],
    nl: &[(&str, &str, f64)],
    config: &DesignConfig,
) -> GroundTruthLearner {
    let mut t = GroundTruthLearner::afm_recency(config);
    t.formula = formula.into();
    t.coefficients.retain(|k, _| k.contains('#'));
    // harder learned items keep posttest accuracy off the ceiling
    for (k, v) in t.coefficients.iter_mut() {
        if k.contains("#c") {
            *v -= 1.0;
        }
    }
    for &(k, v) in scalars {
        t.coefficients.insert(k.into(), v);
    }
    t.nl_params = BTreeMap::new();
    for &(term, name, v) in nl {
        t.nl_params.entry(term.into()).or_default().insert(name.into(), v);
    }
    t
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let afm = parse_model(&catalog::formula("AFM").unwrap(), &columns()).unwrap();
    let afm_rec = parse_model(&catalog::formula("AFM+recency").unwrap(), &columns()).unwrap();
    let afm_ppe = parse_model(&catalog::formula("AFM+ppe").unwrap(), &columns()).unwrap();
    let a_afm_ppe = parse_model(&catalog::formula("a-AFM+ppe").unwrap(), &columns()).unwrap();
    let (mut wins_a, mut wins_b) = (0, 0);
    let mut detail_a = Vec::new();
    let mut detail_b = Vec::new();
    // test trials carry no feedback, so they never enter the history
    let policy = HistoryPolicy {
        excluded_phases: vec![Phase::Posttest],
    };
    for seed in 0..10u64 {
        let config = DesignConfig {
            n_students: 120,
            seed: 500 + seed,
            ..DesignConfig::bird()
        };
        let recency_truth = truth_with(
            &catalog::formula("AFM+recency").unwrap(),
            &[
                ("logitdec(Anon.Student.Id)", 0.2),
                ("lineafm(KC..Default.)", 0.05),
                ("recency(KC..Default.)", 6.0),
            ],
            &[
                ("logitdec(Anon.Student.Id)", "w", 0.8),
                ("recency(KC..Default.)", "d", 0.5),
            ],
            &config,
        );
        let ds = simulate(&config, &recency_truth, &columns(), &policy).unwrap();
        let (ra, rb) = (
            posttest_r2(&afm_rec, &ds, seed, &policy),
            posttest_r2(&afm, &ds, seed, &policy),
        );
        wins_a += usize::from(ra > rb);
        detail_a.push(format!("{ra:.2}/{rb:.2}"));

        let split_truth = truth_with(
            &catalog::formula("a-AFM+ppe").unwrap(),
            &[
                ("logitdec(Anon.Student.Id)", 0.2),
                ("lineafm(KC..Default.%Comparison%Same)", 0.01),
                ("lineafm(KC..Default.%Comparison%Different)", 0.12),
                ("ppe(KC..Default.)", 1.0),
            ],
            &[
                ("logitdec(Anon.Student.Id)", "w", 0.8),
                ("ppe(KC..Default.)", "x", 0.6),
                ("ppe(KC..Default.)", "c", 0.1),
                ("ppe(KC..Default.)", "b", 0.04),
                ("ppe(KC..Default.)", "m", 0.08),
            ],
            &config,
        );
        // the split slopes separate the models without needing the larger cohort
        let config = DesignConfig {
            n_students: 60,
            ..config
        };
        let ds = simulate(&config, &split_truth, &columns(), &policy).unwrap();
        let (ra, rb) = (
            posttest_r2(&a_afm_ppe, &ds, seed, &policy),
            posttest_r2(&afm_ppe, &ds, seed, &policy),
        );
        wins_b += usize::from(ra >= rb);
        detail_b.push(format!("{ra:.2}/{rb:.2}"));
    }
    outcome(
        wins_a >= 9 && wins_b >= 9,
        format!(
            "AFM+recency > AFM in {wins_a}/10 [{}]; a-AFM+ppe >= AFM+ppe in {wins_b}/10 [{}]; {:.0}s",
            detail_a.join(" "),
            detail_b.join(" "),
            start.elapsed().as_secs_f64()
        ),
    )
}

/// Runs only when `LKT_SEQ_BLOB_DATA` names the downloaded blob trial log.
/// `LKT_SEQ_BLOB_R3_FILTER` (`column=value`) selects the high-similarity
/// rows; without it the posttest grouping is used.
fn criterion_6() -> Option<Outcome> {
    let path = std::env::var("LKT_SEQ_BLOB_DATA").ok()?;
    let (dataset, _) = match load_trials(path.as_ref(), &columns(), &LoadOptions::default()) {
        Ok(d) => d,
        Err(e) => return Some(outcome(false, format!("{path}: {e}"))),
    };
    let filter = std::env::var("LKT_SEQ_BLOB_R3_FILTER").ok();
    let grouping = match filter.as_deref().map(lkt_seq::evaluation::parse_filter) {
        Some(Ok((c, v))) => Grouping::r3(&c, &v),
        Some(Err(e)) => return Some(outcome(false, e.to_string())),
        None => Grouping::r2(),
    };
    let names = ["AFM", "AFM+recency", "a-AFM+recency", "AFM+ppe", "a-AFM+ppe"];
    let mut means = Vec::new();
    let mut spreads = Vec::new();
    for name in names {
        let spec = parse_model(&catalog::formula(name).unwrap(), &columns()).unwrap();
        let report = match run_cv(
            &spec,
            &dataset,
            &CvPlan::default(),
            std::slice::from_ref(&grouping),
            &FitOptions::default(),
        ) {
            Ok(r) => r,
            Err(e) => return Some(outcome(false, format!("{name}: {e}"))),
        };
        let rs: Vec<f64> = report
            .folds
            .iter()
            .filter_map(|f| f.correlations.get(&grouping.name).copied().flatten())
            .collect();
        let mean = rs.iter().sum::<f64>() / rs.len().max(1) as f64;
        let sd = (rs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (rs.len().max(2) - 1) as f64).sqrt();
        means.push(mean);
        spreads.push(sd);
    }
    // strict steps may tie within the repeats' spread; the fourth step is ≤
    let ordered = (0..4).all(|k| {
        let slack = spreads[k].max(spreads[k + 1]);
        if k == 2 {
            means[k] <= means[k + 1] + slack
        } else {
            means[k] < means[k + 1] + slack
        }
    });
    let listing: Vec<String> = names.iter().zip(&means).map(|(n, m)| format!("{n} {m:.2}")).collect();
    Some(outcome(ordered, listing.join(", ")))
}

fn criterion_7() -> Outcome {
    let config = DesignConfig {
        n_students: 20,
        seed: 7,
        ..DesignConfig::bird()
    };
    let truth = GroundTruthLearner::afm_recency(&config);
    let dataset = simulate(&config, &truth, &columns(), &HistoryPolicy::default()).unwrap();
    let spec = parse_model(&catalog::formula("AFM+recency").unwrap(), &columns()).unwrap();
    let options = FitOptions::default();
    let ids = dataset.student_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    for probe in 0..20 {
        let plan = CvPlan {
            n_folds: 5,
            n_repeats: 1,
            seed: rng.gen(),
        };
        let assign = &make_folds(&ids, &plan).unwrap()[0];
        let fold = rng.gen_range(0..5);
        let train: Vec<&str> = (0..ids.len())
            .filter(|&s| assign[s] != fold)
            .map(|s| ids[s].as_str())
            .collect();
        let test: Vec<&str> = (0..ids.len())
            .filter(|&s| assign[s] == fold)
            .map(|s| ids[s].as_str())
            .collect();
        let drop = test[rng.gen_range(0..test.len())];
        let keep: Vec<&str> = ids.iter().map(String::as_str).filter(|s| *s != drop).collect();
        let reduced = dataset.subset(&keep);
        let a = fit_fold(&spec, &dataset, &train, &options).unwrap();
        let b = fit_fold(&spec, &reduced, &train, &options).unwrap();
        let same_bits = a.coefficients.len() == b.coefficients.len()
            && a.coefficients
                .iter()
                .zip(&b.coefficients)
                .all(|(x, y)| x.to_bits() == y.to_bits())
            && a.result == b.result;
        if !same_bits {
            return outcome(false, format!("probe {probe}: removing {drop} changed the fold model"));
        }
    }
    outcome(true, "20 probes, fold models bit-identical")
}

fn line(n: usize, o: &Outcome) -> String {
    format!("{} criterion {n}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail)
}

fn main() {
    // cargo passes harness flags such as `--nocapture`; a name filter that
    // is not "acceptance" skips the suite
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let mut failed = 0;
    let mut report = |n: usize, o: Outcome| {
        println!("{}", line(n, &o));
        failed += usize::from(!o.pass);
    };
    let (c1, c8) = criterion_1_and_8();
    report(1, c1);
    report(2, criterion_2());
    report(3, criterion_3());
    let (c4, recovery_data) = criterion_4();
    report(4, c4);
    report(5, criterion_5());
    match criterion_6() {
        Some(o) => report(6, o),
        None => println!("SKIP criterion 6: set LKT_SEQ_BLOB_DATA to the blob trial log to run"),
    }
    report(7, criterion_7());
    let c8 = match partition_identity(&recovery_data, &HistoryPolicy::default()) {
        Ok(n) if c8.pass => outcome(
            true,
            format!("{} random-stream trials and {n} simulated trials", c8.detail),
        ),
        Ok(_) => c8,
        Err(e) => outcome(false, e),
    };
    report(8, c8);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
