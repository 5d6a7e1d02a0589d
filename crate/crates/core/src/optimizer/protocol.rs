use std::cell::RefCell;
use std::collections::HashMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{evolve, success_probability, DensityMatrix, EvolveOptions, Propagator, SystemModel};
use crate::error::{Error, Result};
use crate::model::CycleSpec;
use crate::pulses::{Layout, ProtocolSchedule, ScheduleTemplate, Shape};

use super::nelder_mead::{nelder_mead, SimplexConfig};

/// Everything that shapes a protocol search besides the cycle and duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeConfig {
    pub simplex: SimplexConfig,
    /// Optimize laser detunings as well as amplitudes.
    pub detuning: bool,
    /// Coarse split fractions tried before local refinement.
    pub split_fractions: Vec<f64>,
    /// Golden-section iterations refining the best coarse split.
    pub split_refinements: usize,
    /// Half-width of the refinement bracket, as a fraction of the duration.
    pub split_bracket: f64,
    /// Integration step of the fast propagator, in units of the inverse rate bound.
    pub step_scale: f64,
    /// Simplex polishing passes restarted from each local optimum.
    pub polish_passes: usize,
    /// In scans, seed one restart with the previous duration's segment optimum.
    pub warm_start: bool,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            simplex: SimplexConfig::default(),
            detuning: false,
            split_fractions: vec![0.3, 0.4, 0.5, 0.6, 0.7],
            split_refinements: 6,
            split_bracket: 0.1,
            step_scale: 0.25,
            polish_passes: 2,
            warm_start: false,
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        self.simplex.validate()?;
        if self.split_fractions.is_empty() || self.split_fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(Error::invalid("split fractions must be a nonempty list inside (0, 1)"));
        }
        if !(self.split_bracket >= 0.0 && self.split_bracket < 0.5) {
            return Err(Error::invalid("split bracket must lie in [0, 0.5)"));
        }
        if !(self.step_scale > 0.0 && self.step_scale <= 0.5) {
            return Err(Error::invalid("step scale must lie in (0, 0.5]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationResult {
    pub schedule: ProtocolSchedule,
    /// Loss probability `p`.
    pub loss: f64,
    pub success: f64,
    pub evaluations: usize,
    /// Objective reached by each restart (or by each split candidate for a full protocol).
    pub restart_values: Vec<f64>,
    /// The simplex runs behind the reported optimum stopped on tolerance rather than budget.
    pub converged: bool,
}

impl OptimizationResult {
    fn from_parts(schedule: ProtocolSchedule, loss: f64, evaluations: usize, restart_values: Vec<f64>, converged: bool) -> Self {
        let loss = loss.clamp(0.0, 1.0);
        OptimizationResult { schedule, loss, success: 1.0 - loss, evaluations, restart_values, converged }
    }
}

/// What a segment search maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    /// Population of the absorbed state at the end, starting from the initial state.
    Absorb,
    /// Success probability, starting from the absorbed state.
    Deliver,
    /// Success probability from the initial state.
    Full,
}

struct Search<'a> {
    propagator: &'a Propagator,
    template: ScheduleTemplate,
    target: Target,
}

impl Search<'_> {
    fn objective(&self, x: &[f64]) -> Result<f64> {
        let s = self.template.from_vector(x)?;
        let basis = &self.propagator.model().basis;
        let value = match self.target {
            Target::Absorb => self.propagator.run(&s, basis.initial())?.population(basis.absorbed()),
            Target::Deliver => {
                let out = self.propagator.run(&s, basis.absorbed())?;
                out.population(basis.delivered()) + out.population(basis.output())
            }
            Target::Full => self.propagator.success(&s)?,
        };
        Ok(1.0 - value)
    }

    /// Multi-start simplex search; `seeds` are tried first, random points fill the rest.
    fn run(&self, config: &OptimizeConfig, seeds: Vec<Vec<f64>>) -> Result<OptimizationResult> {
        let simplex = &config.simplex;
        let mut rng = ChaCha8Rng::seed_from_u64(simplex.seed);
        let mut starts = seeds;
        starts.truncate(simplex.restarts);
        while starts.len() < simplex.restarts {
            starts.push(random_start(&self.template, &mut rng));
        }
        let failure: RefCell<Option<Error>> = RefCell::new(None);
        let f = |x: &[f64]| match self.objective(x) {
            Ok(v) => v,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                f64::NAN
            }
        };
        let mut best: Option<(Vec<f64>, f64, bool)> = None;
        let mut values = Vec::new();
        let mut evaluations = 0;
        for x0 in starts {
            let mut out = nelder_mead(f, &x0, simplex)?;
            let mut used = out.evaluations;
            for _ in 0..config.polish_passes {
                if used >= simplex.max_evaluations {
                    break;
                }
                let budget = SimplexConfig { max_evaluations: simplex.max_evaluations - used, ..simplex.clone() };
                let again = nelder_mead(f, &out.x, &budget)?;
                used += again.evaluations;
                let gain = out.f - again.f;
                if again.f <= out.f {
                    out = again;
                }
                if gain <= simplex.ftol {
                    break;
                }
            }
            if let Some(e) = failure.borrow_mut().take() {
                return Err(e);
            }
            evaluations += used;
            values.push(out.f);
            if best.as_ref().is_none_or(|b| out.f < b.1) {
                best = Some((out.x, out.f, out.converged));
            }
        }
        let (x, f, converged) = best.expect("at least one restart");
        let schedule = self.template.from_vector(&x)?;
        Ok(OptimizationResult::from_parts(schedule, f, evaluations, values, converged))
    }
}

fn random_start(t: &ScheduleTemplate, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = Vec::with_capacity(t.arity());
    if t.layout == Layout::TwoSegmentFree {
        v.push(rng.random_range(-0.8..0.8));
    }
    for block in &t.blocks {
        match t.shape {
            Shape::Piecewise(n) => {
                v.extend((1..n).map(|_| rng.random_range(-1.0..1.0)));
                v.extend((0..block.len() * n).map(|_| rng.random_range(-3.0..3.0)));
                if t.detuning {
                    v.extend((0..block.len() * n).map(|_| rng.random_range(-1.0..1.0)));
                }
            }
            Shape::Gaussian => {
                for _ in block {
                    v.push(rng.random_range(-2.0..3.0));
                    v.push(rng.random_range(0.0..1.0));
                    v.push(rng.random_range(-2.3..0.0));
                }
                if t.detuning {
                    v.extend(block.iter().map(|_| rng.random_range(-1.0..1.0)));
                }
            }
        }
    }
    v
}

/// Counterintuitive ordering: within a window, the drive later in the loop
/// peaks earlier.
fn stirap_start(t: &ScheduleTemplate) -> Vec<f64> {
    let mut v = Vec::with_capacity(t.arity());
    if t.layout == Layout::TwoSegmentFree {
        v.push(0.0);
    }
    for block in &t.blocks {
        let k = block.len();
        let lead = |i: usize| if k > 1 { i as f64 / (k - 1) as f64 } else { 0.5 };
        match t.shape {
            Shape::Piecewise(n) => {
                v.extend((1..n).map(|_| 0.0));
                for i in 0..k {
                    // Early drives ramp up over the window, later ones ramp down.
                    for j in 0..n {
                        let phase = if n > 1 { j as f64 / (n - 1) as f64 } else { 0.5 };
                        let ramp = if k > 1 { (1.0 - lead(i)) * phase + lead(i) * (1.0 - phase) } else { 0.5 };
                        v.push(4.0 * ramp - 2.0);
                    }
                }
                if t.detuning {
                    v.extend((0..k * n).map(|_| 0.0));
                }
            }
            Shape::Gaussian => {
                for i in 0..k {
                    v.push(1.0);
                    v.push(0.65 - 0.3 * lead(i));
                    v.push((0.3f64).ln());
                }
                if t.detuning {
                    v.extend((0..k).map(|_| 0.0));
                }
            }
        }
    }
    v
}

/// Runs one protocol half on its own window.
///
/// Segment 1 starts in the initial state and scores the absorbed-state
/// population; segment 2 starts in the absorbed state and scores success.
pub fn optimize_segment(cycle: &CycleSpec, segment: usize, duration: f64, shape: Shape, config: &OptimizeConfig) -> Result<OptimizationResult> {
    config.validate()?;
    let model = SystemModel::new(cycle)?;
    let propagator = Propagator::new(&model)?.with_step_scale(config.step_scale);
    optimize_segment_with(&propagator, segment, duration, shape, config, None)
}

fn optimize_segment_with(
    propagator: &Propagator,
    segment: usize,
    duration: f64,
    shape: Shape,
    config: &OptimizeConfig,
    hint: Option<&Vec<f64>>,
) -> Result<OptimizationResult> {
    let cycle = &propagator.model().cycle;
    let template = ScheduleTemplate::segment(cycle, segment, duration, shape, config.detuning)?;
    let target = if segment == 1 { Target::Absorb } else { Target::Deliver };
    let search = Search { propagator, template, target };
    let mut seeds = vec![stirap_start(&search.template)];
    seeds.extend(hint.filter(|h| h.len() == search.template.arity()).cloned());
    search.run(config, seeds)
}

/// Segment optima keyed by (segment, duration); they depend on nothing else
/// for a fixed cycle, shape and config.
#[derive(Debug, Default)]
pub struct SegmentMemo {
    entries: HashMap<(usize, u64), OptimizationResult>,
    /// Latest optimum coordinates per segment, for warm starts.
    hints: HashMap<usize, Vec<f64>>,
}

impl SegmentMemo {
    pub fn new() -> Self {
        SegmentMemo::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn get_or_run(
        &mut self,
        propagator: &Propagator,
        segment: usize,
        duration: f64,
        shape: Shape,
        config: &OptimizeConfig,
    ) -> Result<(OptimizationResult, bool)> {
        // Durations are rounded to 1e-9 ns so that equal splits reached by different arithmetic share an entry.
        let key = (segment, (duration * 1e9).round() as u64);
        if let Some(r) = self.entries.get(&key) {
            return Ok((r.clone(), false));
        }
        let hint = if config.warm_start { self.hints.get(&segment) } else { None };
        let r = optimize_segment_with(propagator, segment, duration, shape, config, hint)?;
        let template = ScheduleTemplate::segment(&propagator.model().cycle, segment, duration, shape, config.detuning)?;
        self.hints.insert(segment, template.parameter_vector(&r.schedule)?);
        self.entries.insert(key, r.clone());
        Ok((r, true))
    }
}

/// Optimizes the full protocol of duration `tau` via the two-segment split.
pub fn optimize_protocol(cycle: &CycleSpec, tau: f64, shape: Shape, config: &OptimizeConfig) -> Result<OptimizationResult> {
    optimize_protocol_memo(cycle, tau, shape, config, &mut SegmentMemo::new())
}

/// As [`optimize_protocol`], reusing and filling `memo`. The memo must only
/// be shared between calls with the same cycle, shape and config.
pub fn optimize_protocol_memo(
    cycle: &CycleSpec,
    tau: f64,
    shape: Shape,
    config: &OptimizeConfig,
    memo: &mut SegmentMemo,
) -> Result<OptimizationResult> {
    config.validate()?;
    if !(tau > 0.0) {
        return Err(Error::invalid("protocol duration must be positive"));
    }
    let model = SystemModel::new(cycle)?;
    let propagator = Propagator::new(&model)?.with_step_scale(config.step_scale);
    let mut evaluations = 0usize;
    let mut tried: Vec<(f64, f64, ProtocolSchedule, bool)> = Vec::new();

    let mut try_split = |fraction: f64, memo: &mut SegmentMemo| -> Result<f64> {
        let mut half = |segment: usize, duration: f64| -> Result<OptimizationResult> {
            let (r, fresh) = memo.get_or_run(&propagator, segment, duration, shape, config)?;
            if fresh {
                evaluations += r.evaluations;
            }
            Ok(r)
        };
        let first = half(1, fraction * tau)?;
        let second = half(2, (1.0 - fraction) * tau)?;
        let schedule = ProtocolSchedule::concatenate(&first.schedule, &second.schedule)?;
        let loss = 1.0 - propagator.success(&schedule)?;
        tried.push((fraction, loss, schedule, first.converged && second.converged));
        Ok(loss)
    };

    let mut best = (f64::NAN, f64::INFINITY);
    for &f in &config.split_fractions {
        let loss = try_split(f, memo)?;
        if loss < best.1 {
            best = (f, loss);
        }
    }
    if config.split_refinements > 0 && config.split_bracket > 0.0 {
        let lo = (best.0 - config.split_bracket).max(0.05);
        let hi = (best.0 + config.split_bracket).min(0.95);
        golden_section(lo, hi, config.split_refinements, |f| try_split(f, memo))?;
    }

    let (_, _, schedule, converged) = tried
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .expect("at least one split was tried");
    let restart_values: Vec<f64> = tried.iter().map(|t| t.1).collect();
    let loss = full_loss(&model, &schedule)?;
    Ok(OptimizationResult::from_parts(schedule, loss, evaluations, restart_values, converged))
}

/// Loss from one dense master-equation run of the whole schedule.
pub fn full_loss(model: &SystemModel, schedule: &ProtocolSchedule) -> Result<f64> {
    let rho0 = DensityMatrix::pure(model.dim(), model.basis.initial());
    let traj = evolve(model, &rho0, schedule, EvolveOptions { stride: usize::MAX, ..Default::default() })?;
    Ok(1.0 - success_probability(&model.basis, traj.last()))
}

/// Minimizes a unimodal function on `[lo, hi]` with `iterations` interior probes.
fn golden_section(mut lo: f64, mut hi: f64, iterations: usize, mut f: impl FnMut(f64) -> Result<f64>) -> Result<(f64, f64)> {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - r * (hi - lo);
    let mut b = lo + r * (hi - lo);
    let mut fa = f(a)?;
    let mut fb = f(b)?;
    for _ in 2..iterations.max(2) {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - r * (hi - lo);
            fa = f(a)?;
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + r * (hi - lo);
            fb = f(b)?;
        }
    }
    Ok(if fa <= fb { (a, fa) } else { (b, fb) })
}

/// Best constant drive: every laser on at a fixed level over the whole duration.
pub fn constant_drive_baseline(cycle: &CycleSpec, tau: f64, config: &OptimizeConfig) -> Result<OptimizationResult> {
    config.validate()?;
    let model = SystemModel::new(cycle)?;
    let propagator = Propagator::new(&model)?.with_step_scale(config.step_scale);
    let template = ScheduleTemplate::protocol(cycle, tau, Layout::Continuous, Shape::Piecewise(1), false)?;
    let search = Search { propagator: &propagator, template, target: Target::Full };
    let r = search.run(config, vec![vec![0.0; search.template.arity()]])?;
    let loss = full_loss(&model, &r.schedule)?;
    Ok(OptimizationResult::from_parts(r.schedule, loss, r.evaluations, r.restart_values, r.converged))
}

/// Single-shot search over all parameters of both segments and the split,
/// started from `start` (normally a two-segment optimum).
pub fn optimize_joint(cycle: &CycleSpec, start: &ProtocolSchedule, config: &OptimizeConfig) -> Result<OptimizationResult> {
    config.validate()?;
    let model = SystemModel::new(cycle)?;
    let propagator = Propagator::new(&model)?.with_step_scale(config.step_scale);
    let template = ScheduleTemplate::infer(cycle, start)?;
    if template.layout != Layout::TwoSegmentFree {
        return Err(Error::invalid("joint search needs a two-segment schedule"));
    }
    let x0 = template.parameter_vector(start)?;
    let search = Search { propagator: &propagator, template, target: Target::Full };
    let r = search.run(&OptimizeConfig { simplex: SimplexConfig { restarts: 1, ..config.simplex.clone() }, ..config.clone() }, vec![x0])?;
    let loss = full_loss(&model, &r.schedule)?;
    Ok(OptimizationResult::from_parts(r.schedule, loss, r.evaluations, r.restart_values, r.converged))
}
