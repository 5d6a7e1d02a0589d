use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Settings for [`nelder_mead`] and the restart loops built on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimplexConfig {
    /// Initial simplex edge along each coordinate.
    pub step: f64,
    /// Stop once `max f - min f` over the simplex falls below this...
    pub ftol: f64,
    /// ...and the simplex diameter falls below this.
    pub xtol: f64,
    pub max_evaluations: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SimplexConfig {
    fn default() -> Self {
        SimplexConfig { step: 0.5, ftol: 1e-6, xtol: 1e-6, max_evaluations: 20_000, restarts: 8, seed: 0 }
    }
}

impl SimplexConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ftol > 0.0 && self.xtol > 0.0) {
            return Err(Error::invalid("simplex tolerances must be positive"));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("restart count must be at least 1"));
        }
        if !(self.step > 0.0) || self.max_evaluations == 0 {
            return Err(Error::invalid("simplex step and evaluation budget must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub evaluations: usize,
    /// False when the evaluation budget ran out first.
    pub converged: bool,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

/// Minimizes `objective` from `x0` with the standard simplex moves.
///
/// Non-finite values met after the start are treated as `+inf`.
pub fn nelder_mead<F>(mut objective: F, x0: &[f64], config: &SimplexConfig) -> Result<SimplexOutcome>
where
    F: FnMut(&[f64]) -> f64,
{
    config.validate()?;
    let d = x0.len();
    if d == 0 {
        return Err(Error::invalid("nelder_mead needs at least one coordinate"));
    }
    let mut evaluations = 0usize;
    let mut eval = |x: &[f64], evaluations: &mut usize| {
        *evaluations += 1;
        let v = objective(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..d {
        let mut v = x0.to_vec();
        v[i] += config.step;
        simplex.push(v);
    }
    let mut values = Vec::with_capacity(d + 1);
    for v in &simplex {
        let f = eval(v, &mut evaluations);
        if !f.is_finite() {
            return Err(Error::invalid("objective is not finite on the initial simplex"));
        }
        values.push(f);
    }

    let mut converged = false;
    let mut order: Vec<usize> = (0..=d).collect();
    loop {
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let (best, worst, second) = (order[0], order[d], order[d - 1]);
        let spread = values[worst] - values[best];
        let diameter = simplex
            .iter()
            .map(|v| v.iter().zip(&simplex[best]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread <= config.ftol && diameter <= config.xtol {
            converged = true;
            break;
        }
        if evaluations >= config.max_evaluations {
            break;
        }

        let mut centroid = vec![0.0; d];
        for &i in &order[..d] {
            for (c, x) in centroid.iter_mut().zip(&simplex[i]) {
                *c += x / d as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&simplex[worst]).map(|(c, w)| c + t * (c - w)).collect() };

        let xr = along(REFLECT);
        let fr = eval(&xr, &mut evaluations);
        if fr < values[best] {
            let xe = along(REFLECT * EXPAND);
            let fe = eval(&xe, &mut evaluations);
            if fe < fr {
                simplex[worst] = xe;
                values[worst] = fe;
            } else {
                simplex[worst] = xr;
                values[worst] = fr;
            }
            continue;
        }
        if fr < values[second] {
            simplex[worst] = xr;
            values[worst] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[worst] {
            let xc = along(REFLECT * CONTRACT);
            let fc = eval(&xc, &mut evaluations);
            (xc, fc)
        } else {
            let xc = along(-CONTRACT);
            let fc = eval(&xc, &mut evaluations);
            (xc, fc)
        };
        if fc < values[worst].min(fr) {
            simplex[worst] = xc;
            values[worst] = fc;
            continue;
        }
        let anchor = simplex[best].clone();
        for &i in &order[1..] {
            for (x, a) in simplex[i].iter_mut().zip(&anchor) {
                *x = a + SHRINK * (*x - a);
            }
            values[i] = eval(&simplex[i], &mut evaluations);
        }
    }
    let best = (0..=d).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    Ok(SimplexOutcome { x: simplex[best].clone(), f: values[best], evaluations, converged })
}
