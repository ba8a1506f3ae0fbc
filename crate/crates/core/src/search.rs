//! Bounded Nelder-Mead with restarts.
//!
//! The simplex lives in the unit cube; trial points are projected back onto
//! it, so every evaluated point respects the parameter box. Restarts run in
//! sequence: the first from the supplied start, odd restarts from a seeded
//! random point, even restarts from the best point found so far.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub restarts: usize,
    /// Objective evaluations allowed per restart.
    pub max_evals: usize,
    pub seed: u64,
    /// Simplex diameter, in unit-cube coordinates, at which a restart stops.
    pub x_tol: f64,
    /// Relative spread of simplex values at which a restart stops.
    pub f_tol: f64,
    /// Edge length of the initial simplex in unit-cube coordinates.
    pub initial_step: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            restarts: 3,
            max_evals: 200,
            seed: 0,
            x_tol: 1e-4,
            f_tol: 1e-12,
            initial_step: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best_x: Vec<f64>,
    pub best_f: f64,
    /// Distinct points evaluated.
    pub evals: usize,
    pub converged: bool,
    /// Best objective value seen after each evaluation (nonincreasing).
    pub trace: Vec<f64>,
}

struct Evaluator<'f, F, E> {
    objective: &'f mut F,
    lower: Vec<f64>,
    width: Vec<f64>,
    cache: HashMap<Vec<u64>, f64>,
    trace: Vec<f64>,
    best: Option<(Vec<f64>, f64)>,
    _err: std::marker::PhantomData<E>,
}

impl<F, E> Evaluator<'_, F, E>
where
    F: FnMut(&[f64]) -> Result<f64, E>,
{
    fn to_params(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lower.iter().zip(&self.width))
            .map(|(&ui, (&lo, &w))| lo + ui.clamp(0.0, 1.0) * w)
            .collect()
    }

    fn eval(&mut self, u: &[f64]) -> Result<f64, E> {
        let x = self.to_params(u);
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        if let Some(&f) = self.cache.get(&key) {
            return Ok(f);
        }
        let raw = (self.objective)(&x)?;
        let f = if raw.is_nan() { f64::INFINITY } else { raw };
        self.cache.insert(key, f);
        let better = match &self.best {
            None => true,
            Some((bx, bf)) => f < *bf || (f == *bf && x < *bx),
        };
        if better {
            self.best = Some((x, f));
        }
        self.trace.push(self.best.as_ref().map_or(f, |b| b.1));
        Ok(f)
    }
}

fn project(u: &mut [f64]) {
    for v in u {
        *v = v.clamp(0.0, 1.0);
    }
}

/// One Nelder-Mead run from `start` (unit coordinates). Returns whether it
/// stopped on tolerance rather than budget.
fn nelder_mead<F, E>(ev: &mut Evaluator<'_, F, E>, start: &[f64], config: &SearchConfig) -> Result<bool, E>
where
    F: FnMut(&[f64]) -> Result<f64, E>,
{
    let k = start.len();
    let budget_end = ev.trace.len() + config.max_evals;
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
    simplex.push(start.to_vec());
    for i in 0..k {
        let mut v = start.to_vec();
        v[i] = if v[i] + config.initial_step <= 1.0 {
            v[i] + config.initial_step
        } else {
            v[i] - config.initial_step
        };
        simplex.push(v);
    }
    let mut values = Vec::with_capacity(k + 1);
    for v in &simplex {
        values.push(ev.eval(v)?);
    }

    loop {
        let mut order: Vec<usize> = (0..=k).collect();
        order.sort_by(|&a, &b| {
            values[a]
                .total_cmp(&values[b])
                .then_with(|| simplex[a].partial_cmp(&simplex[b]).unwrap())
        });
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let diameter = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        let spread = values[k] - values[0];
        if diameter < config.x_tol || spread.abs() <= config.f_tol * (1.0 + values[0].abs()) {
            return Ok(true);
        }
        if ev.trace.len() >= budget_end {
            return Ok(false);
        }

        let centroid: Vec<f64> = (0..k)
            .map(|d| simplex[..k].iter().map(|v| v[d]).sum::<f64>() / k as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid.iter().zip(&simplex[k]).map(|(c, w)| c + t * (c - w)).collect();
            project(&mut p);
            p
        };

        let reflected = along(1.0);
        let fr = ev.eval(&reflected)?;
        if fr < values[0] {
            let expanded = along(2.0);
            let fe = ev.eval(&expanded)?;
            if fe < fr {
                simplex[k] = expanded;
                values[k] = fe;
            } else {
                simplex[k] = reflected;
                values[k] = fr;
            }
            continue;
        }
        if fr < values[k - 1] {
            simplex[k] = reflected;
            values[k] = fr;
            continue;
        }
        let (contracted, fc) = if fr < values[k] {
            let p = along(0.5);
            let f = ev.eval(&p)?;
            (p, f)
        } else {
            let p = along(-0.5);
            let f = ev.eval(&p)?;
            (p, f)
        };
        if fc < values[k].min(fr) {
            simplex[k] = contracted;
            values[k] = fc;
            continue;
        }
        // shrink toward the best vertex
        for i in 1..=k {
            let shrunk: Vec<f64> = simplex[i]
                .iter()
                .zip(&simplex[0])
                .map(|(v, b)| b + 0.5 * (v - b))
                .collect();
            values[i] = ev.eval(&shrunk)?;
            simplex[i] = shrunk;
        }
    }
}

/// Minimize `objective` over the box `bounds`, starting at `start`.
///
/// Errors from the objective abort the search and are returned unchanged.
pub fn minimize_bounded<F, E>(
    mut objective: F,
    bounds: &[(f64, f64)],
    start: &[f64],
    config: &SearchConfig,
) -> Result<SearchOutcome, E>
where
    F: FnMut(&[f64]) -> Result<f64, E>,
{
    assert_eq!(bounds.len(), start.len(), "one bound per parameter");
    let lower: Vec<f64> = bounds.iter().map(|b| b.0).collect();
    let width: Vec<f64> = bounds.iter().map(|b| b.1 - b.0).collect();
    let to_unit = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(lower.iter().zip(&width))
            .map(|(&v, (&lo, &w))| if w > 0.0 { ((v - lo) / w).clamp(0.0, 1.0) } else { 0.0 })
            .collect()
    };
    let start_unit = to_unit(start);
    let mut ev = Evaluator {
        objective: &mut objective,
        lower: lower.clone(),
        width: width.clone(),
        cache: HashMap::new(),
        trace: Vec::new(),
        best: None,
        _err: std::marker::PhantomData,
    };

    if bounds.is_empty() {
        ev.eval(&[])?;
        let (best_x, best_f) = ev.best.clone().expect("one evaluation");
        return Ok(SearchOutcome {
            best_x,
            best_f,
            evals: 1,
            converged: true,
            trace: ev.trace,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut converged = false;
    let mut previous_best = f64::INFINITY;
    let mut last_gain = f64::INFINITY;
    for restart in 0..config.restarts.max(1) {
        let from = if restart == 0 {
            start_unit.clone()
        } else if restart % 2 == 1 {
            (0..start.len()).map(|_| rng.gen::<f64>()).collect()
        } else {
            let best = ev.best.as_ref().expect("evaluated").0.clone();
            to_unit(&best)
        };
        let stopped_on_tolerance = nelder_mead(&mut ev, &from, config)?;
        converged |= stopped_on_tolerance;
        let best_f = ev.best.as_ref().expect("evaluated").1;
        last_gain = previous_best - best_f;
        previous_best = best_f;
    }
    // a final restart that cannot improve on the incumbent also counts
    if config.restarts > 1 && last_gain <= 1e-6 * (1.0 + previous_best.abs()) {
        converged = true;
    }
    let (best_x, best_f) = ev.best.clone().expect("evaluated");
    Ok(SearchOutcome {
        best_x,
        best_f,
        evals: ev.cache.len(),
        converged,
        trace: ev.trace,
    })
}
