//! Master-equation dynamics on the reduced joint basis.
//!
//! The Hamiltonian is
//! `H = sum_(j,k) Omega_jk(t) exp(-i Delta_jk t) |j><k| + g_m a^dag sigma_m + g_o b^dag sigma_o + h.c.`
//! restricted to the enumerated basis, and the dissipator routes every atomic
//! decay to the loss sink and every optical-cavity emission to the output
//! sink. Both sinks are absorbing.
//!
//! Two integrators are provided. [`evolve`] propagates the full density
//! matrix with fixed-step RK4 and a step-halving check. [`Propagator`] uses
//! the fact that no jump lands on a coupled state: the coupled block then
//! stays pure under the no-jump Hamiltonian `H - i/2 sum c^dag c` and the
//! sink populations are the time-integrated jump rates. It is the fast path
//! used by the optimizer.

use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::{enumerate_basis, CycleSpec, JointBasis, JointState, TransitionKind};
use crate::pulses::{max_detuning, ControlSample, ProtocolSchedule};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;

const I: C64 = C64::new(0.0, 1.0);

/// Hermitian, unit-trace, positive matrix over a [`JointBasis`].
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(pub CMatrix);

impl DensityMatrix {
    /// `|index><index|` in a basis of size `dim`.
    pub fn pure(dim: usize, index: usize) -> Self {
        let mut m = CMatrix::zeros(dim, dim);
        m[(index, index)] = C64::new(1.0, 0.0);
        DensityMatrix(m)
    }

    /// Diagonal mixture `sum_i w_i |i><i|`.
    pub fn diagonal(weights: &[f64]) -> Self {
        let n = weights.len();
        let mut m = CMatrix::zeros(n, n);
        for (i, &w) in weights.iter().enumerate() {
            m[(i, i)] = C64::new(w, 0.0);
        }
        DensityMatrix(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn population(&self, index: usize) -> f64 {
        self.0[(index, index)].re
    }

    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.population(i)).collect()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace().re
    }

    /// `max |rho - rho^dag|` over entries.
    pub fn hermiticity_error(&self) -> f64 {
        let m = &self.0;
        let mut worst: f64 = 0.0;
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
            }
        }
        worst
    }

    /// Smallest eigenvalue of the Hermitian part.
    pub fn min_eigenvalue(&self) -> f64 {
        let h = (&self.0 + self.0.adjoint()) * C64::new(0.5, 0.0);
        h.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn purity(&self) -> f64 {
        (&self.0 * &self.0).trace().re
    }

    pub fn check_valid(&self, tol: f64) -> Result<()> {
        if self.0.nrows() != self.0.ncols() {
            return Err(Error::invalid("density matrix must be square"));
        }
        if (self.trace() - 1.0).abs() > tol || self.hermiticity_error() > tol || self.min_eigenvalue() < -tol {
            return Err(Error::invalid("density matrix is not a valid state"));
        }
        Ok(())
    }
}

/// `c = sqrt(rate) |target><source|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpOperator {
    pub source: usize,
    pub target: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct JumpSet {
    pub jumps: Vec<JumpOperator>,
}

impl JumpSet {
    /// Atomic decay into the loss sink and cavity emission into the output sink.
    pub fn for_basis(cycle: &CycleSpec, basis: &JointBasis) -> Result<JumpSet> {
        let loss = basis.index_of(JointState::LossSink).ok_or_else(|| Error::invalid("basis lacks a loss sink"))?;
        let output = basis.index_of(JointState::OutputSink).ok_or_else(|| Error::invalid("basis lacks an output sink"))?;
        let mut jumps = Vec::new();
        for (s, state) in basis.states.iter().enumerate() {
            if let JointState::Atom { level, optical, .. } = *state {
                let gamma = cycle.level(level).decay_rate;
                if gamma > 0.0 {
                    jumps.push(JumpOperator { source: s, target: loss, rate: gamma });
                }
                if optical == 1 && cycle.kappa > 0.0 {
                    jumps.push(JumpOperator { source: s, target: output, rate: cycle.kappa });
                }
            }
        }
        Ok(JumpSet { jumps })
    }

    /// Total outgoing jump rate of each basis state.
    pub fn escape_rates(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for j in &self.jumps {
            out[j.source] += j.rate;
        }
        out
    }
}

/// Laser link between two basis states: `H[row, col] = Omega exp(-i Delta t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaserLink {
    pub laser: usize,
    pub row: usize,
    pub col: usize,
}

/// Constant cavity link: `H[row, col] = H[col, row] = g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CavityLink {
    pub row: usize,
    pub col: usize,
    pub g: f64,
}

/// Everything needed to build `H(t)` and the dissipator for one cycle.
#[derive(Debug, Clone)]
pub struct SystemModel {
    pub cycle: CycleSpec,
    pub basis: JointBasis,
    /// Laser pairs in cycle order; [`LaserLink::laser`] indexes this list.
    pub lasers: Vec<(usize, usize)>,
    pub laser_links: Vec<LaserLink>,
    pub cavity_links: Vec<CavityLink>,
    pub jumps: JumpSet,
}

impl SystemModel {
    pub fn new(cycle: &CycleSpec) -> Result<SystemModel> {
        cycle.validate()?;
        let basis = enumerate_basis(cycle)?;
        let jumps = JumpSet::for_basis(cycle, &basis)?;
        SystemModel::with_basis(cycle, basis, jumps)
    }

    /// Builds couplings for an arbitrary list of joint states. Couplings only
    /// join `Atom` states; vacuum and sinks stay uncoupled.
    pub fn with_basis(cycle: &CycleSpec, basis: JointBasis, jumps: JumpSet) -> Result<SystemModel> {
        let lasers: Vec<(usize, usize)> = cycle.lasers().map(|t| t.pair).collect();
        let find = |level: usize, microwave: u8, optical: u8| basis.index_of(JointState::atom(level, microwave, optical));
        let mut laser_links = Vec::new();
        let mut cavity_links = Vec::new();
        for (row, state) in basis.states.iter().enumerate() {
            let JointState::Atom { level, microwave, optical } = *state else { continue };
            for (laser, &(j, k)) in lasers.iter().enumerate() {
                if level == j {
                    if let Some(col) = find(k, microwave, optical) {
                        laser_links.push(LaserLink { laser, row, col });
                    }
                }
            }
            for t in &cycle.transitions {
                let (j, k) = t.pair;
                let partner = match t.kind {
                    TransitionKind::MicrowaveCavity if level == j && microwave > 0 => find(k, microwave - 1, optical),
                    TransitionKind::OpticalCavity if level == j && optical > 0 => find(k, microwave, optical - 1),
                    _ => None,
                };
                if let Some(col) = partner {
                    let g = if t.kind == TransitionKind::MicrowaveCavity { cycle.g_m } else { cycle.g_o };
                    cavity_links.push(CavityLink { row, col, g });
                }
            }
        }
        for j in &jumps.jumps {
            if j.source >= basis.len() || j.target >= basis.len() || !(j.rate >= 0.0) {
                return Err(Error::invalid("jump operator outside the basis"));
            }
        }
        Ok(SystemModel { cycle: cycle.clone(), basis, lasers, laser_links, cavity_links, jumps })
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    /// Laser caps in cycle order.
    pub fn caps(&self) -> Vec<f64> {
        self.lasers.iter().map(|&p| self.cycle.laser(p).unwrap().max_rate).collect()
    }

    /// Maps the drives of `schedule` onto cycle laser indices.
    fn drive_slots(&self, schedule: &ProtocolSchedule) -> Result<Vec<usize>> {
        schedule
            .drives
            .iter()
            .map(|d| {
                self.lasers
                    .iter()
                    .position(|&p| p == d.pair)
                    .ok_or_else(|| Error::invalid(format!("{:?} is not a laser of cycle {}", d.pair, self.cycle.name)))
            })
            .collect()
    }

    /// Adds the laser and cavity terms at time `t` to `h` (which must be zeroed).
    fn fill_hamiltonian(&self, rabi: &[f64], detuning: &[f64], t: f64, h: &mut CMatrix) {
        for link in &self.laser_links {
            let z = C64::from_polar(rabi[link.laser], -detuning[link.laser] * t);
            h[(link.row, link.col)] += z;
            h[(link.col, link.row)] += z.conj();
        }
        for c in &self.cavity_links {
            h[(c.row, c.col)] += c.g;
            h[(c.col, c.row)] += c.g;
        }
    }
}

/// Interaction-picture Hamiltonian at time `t` for the given controls.
pub fn assemble_hamiltonian(model: &SystemModel, controls: &ControlSample, t: f64) -> Result<CMatrix> {
    let n = model.lasers.len();
    let mut rabi = vec![0.0; n];
    let mut detuning = vec![0.0; n];
    let caps = model.caps();
    for (i, &pair) in controls.pairs.iter().enumerate() {
        let slot = model
            .lasers
            .iter()
            .position(|&p| p == pair)
            .ok_or_else(|| Error::invalid(format!("{pair:?} is not a laser transition")))?;
        let (r, d) = (controls.rabi[i], controls.detuning[i]);
        if !(0.0..=caps[slot] * (1.0 + 1e-12)).contains(&r) {
            return Err(Error::invalid(format!("Rabi frequency {r} of {pair:?} outside [0, {}]", caps[slot])));
        }
        if !(d.abs() <= max_detuning() * (1.0 + 1e-12)) {
            return Err(Error::invalid(format!("detuning {d} of {pair:?} exceeds 2pi x 10 MHz")));
        }
        rabi[slot] += r;
        detuning[slot] = d;
    }
    let mut h = CMatrix::zeros(model.dim(), model.dim());
    model.fill_hamiltonian(&rabi, &detuning, t, &mut h);
    Ok(h)
}

/// `-i[H, rho] + sum_c (c rho c^dag - 1/2 {c^dag c, rho})` for rank-one jumps.
pub fn lindblad_rhs(rho: &CMatrix, h: &CMatrix, jumps: &JumpSet) -> CMatrix {
    let mut out = (h * rho - rho * h) * (-I);
    add_dissipator(rho, jumps, &mut out);
    out
}

fn add_dissipator(rho: &CMatrix, jumps: &JumpSet, out: &mut CMatrix) {
    let n = rho.nrows();
    for j in &jumps.jumps {
        let (s, r) = (j.source, j.rate);
        out[(j.target, j.target)] += rho[(s, s)] * r;
        // c^dag c = r |s><s|: removes half the rate from row s and column s.
        for k in 0..n {
            out[(s, k)] -= rho[(s, k)] * (0.5 * r);
            out[(k, s)] -= rho[(k, s)] * (0.5 * r);
        }
    }
}

/// Success = delivered-state population plus output-sink population.
pub fn success_probability(basis: &JointBasis, rho: &DensityMatrix) -> f64 {
    (rho.population(basis.delivered()) + rho.population(basis.output())).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvolveOptions {
    /// Maximum change of the final success probability, and of every final
    /// population, when the step is halved.
    pub tol: f64,
    /// Steps across the whole horizon on the first attempt.
    pub base_steps: usize,
    pub max_refinements: usize,
    /// Keep every `stride`-th step of the accepted run (plus the final point).
    pub stride: usize,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions { tol: 1e-6, base_steps: 4000, max_refinements: 8, stride: 1 }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DensityMatrix>,
    /// Steps used by the accepted run.
    pub steps: usize,
    /// Largest population change observed at the last halving.
    pub step_error: f64,
}

impl Trajectory {
    pub fn last(&self) -> &DensityMatrix {
        self.states.last().expect("trajectory holds at least the initial state")
    }
}

/// Integrates the master equation over the whole schedule.
pub fn evolve(model: &SystemModel, rho0: &DensityMatrix, schedule: &ProtocolSchedule, opts: EvolveOptions) -> Result<Trajectory> {
    if rho0.dim() != model.dim() {
        return Err(Error::invalid(format!("initial state has dimension {}, basis has {}", rho0.dim(), model.dim())));
    }
    if !(schedule.duration > 0.0) {
        return Err(Error::invalid("schedule duration must be positive"));
    }
    if !(opts.tol > 0.0) || opts.base_steps == 0 {
        return Err(Error::invalid("evolve needs a positive tolerance and step count"));
    }
    let slots = model.drive_slots(schedule)?;
    let mut steps = opts.base_steps;
    let mut coarse = integrate_density(model, rho0, schedule, &slots, steps, usize::MAX)?;
    let mut last_diff = f64::NAN;
    for _ in 0..opts.max_refinements {
        steps *= 2;
        let fine = integrate_density(model, rho0, schedule, &slots, steps, opts.stride)?;
        let (a, b) = (coarse.last(), fine.last());
        let diff = (0..model.dim())
            .map(|i| (a.population(i) - b.population(i)).abs())
            .fold((success_probability(&model.basis, a) - success_probability(&model.basis, b)).abs(), f64::max);
        last_diff = diff;
        if diff < opts.tol {
            return Ok(Trajectory { step_error: diff, ..fine });
        }
        coarse = fine;
    }
    Err(Error::Numerical(format!(
        "step refinement did not converge: populations changed by {last_diff:.3e} at {steps} steps (tol {:.1e})",
        opts.tol
    )))
}

/// Steps per interval between breakpoints so that each step is at most `h`.
fn step_plan(schedule: &ProtocolSchedule, h: f64) -> Vec<(f64, f64, usize)> {
    let pts = schedule.breakpoints();
    pts.windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| (w[0], w[1], ((w[1] - w[0]) / h).ceil().max(1.0) as usize))
        .collect()
}

/// Time at which to sample controls for a node inside `[a, b]`. Nodes on
/// either edge are nudged inside so that jumps fall between intervals even
/// when the edges carry rounding error.
#[inline]
fn node_time(t: f64, a: f64, b: f64) -> f64 {
    let nudge = 1e-9 * (b - a);
    t.clamp(a + nudge, b - nudge)
}

fn integrate_density(
    model: &SystemModel,
    rho0: &DensityMatrix,
    schedule: &ProtocolSchedule,
    slots: &[usize],
    steps: usize,
    stride: usize,
) -> Result<Trajectory> {
    let n = model.dim();
    let h_nominal = schedule.duration / steps as f64;
    let plan = step_plan(schedule, h_nominal);
    let n_drives = schedule.drives.len();
    let mut drive_rabi = vec![0.0; n_drives];
    let mut drive_det = vec![0.0; n_drives];
    let mut rabi = vec![0.0; model.lasers.len()];
    let mut det = vec![0.0; model.lasers.len()];

    let mut hamiltonian_at = |t: f64, a: f64, b: f64| -> CMatrix {
        let te = node_time(t, a, b);
        schedule.fill_controls(te, &mut drive_rabi, &mut drive_det);
        rabi.iter_mut().for_each(|x| *x = 0.0);
        det.iter_mut().for_each(|x| *x = 0.0);
        for (d, &slot) in slots.iter().enumerate() {
            rabi[slot] += drive_rabi[d];
            if drive_rabi[d] != 0.0 {
                det[slot] = drive_det[d];
            }
        }
        let mut h = CMatrix::zeros(n, n);
        model.fill_hamiltonian(&rabi, &det, t, &mut h);
        h
    };

    let mut rho = rho0.0.clone();
    let mut times = vec![0.0];
    let mut states = vec![rho0.clone()];
    let mut counter = 0usize;
    let total: usize = plan.iter().map(|p| p.2).sum();
    for &(a, b, k) in &plan {
        let dt = (b - a) / k as f64;
        for i in 0..k {
            let t = a + i as f64 * dt;
            let h0 = hamiltonian_at(t, a, b);
            let hm = hamiltonian_at(t + 0.5 * dt, a, b);
            let h1 = hamiltonian_at(t + dt, a, b);
            let k1 = lindblad_rhs(&rho, &h0, &model.jumps);
            let k2 = lindblad_rhs(&(&rho + &k1 * C64::from(0.5 * dt)), &hm, &model.jumps);
            let k3 = lindblad_rhs(&(&rho + &k2 * C64::from(0.5 * dt)), &hm, &model.jumps);
            let k4 = lindblad_rhs(&(&rho + &k3 * C64::from(dt)), &h1, &model.jumps);
            rho += (k1 + k2 * C64::from(2.0) + k3 * C64::from(2.0) + k4) * C64::from(dt / 6.0);
            counter += 1;
            if !rho[(0, 0)].re.is_finite() {
                return Err(Error::Numerical(format!("density matrix diverged at t = {t} ns")));
            }
            if (stride != usize::MAX && counter.is_multiple_of(stride)) || counter == total {
                times.push(if counter == total { schedule.duration } else { t + dt });
                states.push(DensityMatrix(rho.clone()));
            }
        }
    }
    if states.len() == 1 {
        times.push(schedule.duration);
        states.push(DensityMatrix(rho));
    }
    Ok(Trajectory { times, states, steps: total, step_error: f64::NAN })
}

/// Writes `t_ns`, one population column per basis state, `success`, `loss`.
pub fn write_trajectory_csv<W: Write>(basis: &JointBasis, traj: &Trajectory, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t_ns".to_string()];
    header.extend(basis.states.iter().map(|s| format!("pop_{}", s.label())));
    header.push("success".to_string());
    header.push("loss".to_string());
    w.write_record(&header)?;
    for (t, rho) in traj.times.iter().zip(&traj.states) {
        let mut rec = vec![format!("{t:.6}")];
        rec.extend(rho.populations().iter().map(|p| format!("{p:.10e}")));
        rec.push(format!("{:.10e}", success_probability(basis, rho)));
        rec.push(format!("{:.10e}", rho.population(basis.loss())));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Pure-state fast path

/// Result of a pure-state propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct PureOutcome {
    /// Populations of the non-sink states, in basis order.
    pub populations: Vec<f64>,
    /// Integrated jump flow into each sink, indexed like the basis.
    pub sinks: Vec<f64>,
    pub steps: usize,
}

impl PureOutcome {
    pub fn population(&self, index: usize) -> f64 {
        self.populations.get(index).copied().unwrap_or(0.0) + self.sinks.get(index).copied().unwrap_or(0.0)
    }
}

/// No-jump propagation of a pure initial state through a schedule.
#[derive(Debug, Clone)]
pub struct Propagator {
    model: SystemModel,
    /// Number of coherent (non-sink) states; they occupy the first slots.
    coherent: usize,
    half_escape: Vec<f64>,
    /// `(source, target, rate)` with `target` a sink.
    flows: Vec<(usize, usize, f64)>,
    /// Upper bound on the magnitude of the generator, rad/ns.
    spectral_bound: f64,
    /// Step length times `spectral_bound`.
    pub step_scale: f64,
}

impl Propagator {
    pub fn new(model: &SystemModel) -> Result<Propagator> {
        let coherent = model.basis.states.iter().take_while(|s| !s.is_sink()).count();
        if model.basis.states[coherent..].iter().any(|s| !s.is_sink()) {
            return Err(Error::invalid("fast path needs the sinks at the end of the basis"));
        }
        let mut flows = Vec::new();
        for j in &model.jumps.jumps {
            if j.target < coherent || j.source >= coherent {
                return Err(Error::invalid("fast path needs jumps from coherent states into sinks"));
            }
            flows.push((j.source, j.target, j.rate));
        }
        let escape = model.jumps.escape_rates(model.dim());
        let mut p = Propagator {
            model: model.clone(),
            coherent,
            half_escape: escape[..coherent].iter().map(|g| 0.5 * g).collect(),
            flows,
            spectral_bound: 0.0,
            step_scale: 0.1,
        };
        p.spectral_bound = p.rate_bound(&model.caps(), 0.0);
        Ok(p)
    }

    /// Gershgorin bound on `|H - i Gamma/2|` for the given laser amplitudes,
    /// plus the fastest detuning phase.
    fn rate_bound(&self, amplitudes: &[f64], detuning: f64) -> f64 {
        let mut row_sum = self.half_escape.clone();
        for l in &self.model.laser_links {
            row_sum[l.row] += amplitudes[l.laser];
            row_sum[l.col] += amplitudes[l.laser];
        }
        for c in &self.model.cavity_links {
            row_sum[c.row] += c.g;
            row_sum[c.col] += c.g;
        }
        row_sum.into_iter().fold(1e-3, f64::max) + detuning
    }

    /// Step bound for one schedule, from the drive peaks it actually reaches.
    pub fn max_step_for(&self, schedule: &ProtocolSchedule, slots: &[usize]) -> f64 {
        let mut peaks = vec![0.0; self.model.lasers.len()];
        let mut detuning: f64 = 0.0;
        for (d, &slot) in schedule.drives.iter().zip(slots) {
            peaks[slot] += d.peak();
            detuning = detuning.max(d.peak_detuning());
        }
        self.step_scale / self.rate_bound(&peaks, detuning)
    }

    pub fn model(&self) -> &SystemModel {
        &self.model
    }

    pub fn with_step_scale(mut self, scale: f64) -> Self {
        self.step_scale = scale;
        self
    }

    /// Step bound valid for any schedule within the caps.
    pub fn max_step(&self) -> f64 {
        self.step_scale / self.spectral_bound
    }

    #[inline]
    fn deriv(&self, z: &[C64], psi: &[C64], out: &mut [C64]) {
        for s in 0..self.coherent {
            out[s] = psi[s] * (-self.half_escape[s]);
        }
        for l in &self.model.laser_links {
            let w = z[l.laser];
            out[l.row] -= I * w * psi[l.col];
            out[l.col] -= I * w.conj() * psi[l.row];
        }
        for c in &self.model.cavity_links {
            out[c.row] -= I * c.g * psi[c.col];
            out[c.col] -= I * c.g * psi[c.row];
        }
    }

    #[inline]
    fn flow_rate(&self, psi: &[C64], sinks: &mut [f64]) {
        sinks.iter_mut().for_each(|x| *x = 0.0);
        for &(s, t, r) in &self.flows {
            sinks[t] += r * psi[s].norm_sqr();
        }
    }

    /// Propagates basis state `initial` through the whole schedule.
    pub fn run(&self, schedule: &ProtocolSchedule, initial: usize) -> Result<PureOutcome> {
        let mut psi = vec![C64::new(0.0, 0.0); self.coherent];
        if initial >= self.coherent {
            return Err(Error::invalid("initial state must be a coherent state"));
        }
        psi[initial] = C64::new(1.0, 0.0);
        self.run_from(schedule, psi)
    }

    pub fn run_from(&self, schedule: &ProtocolSchedule, mut psi: Vec<C64>) -> Result<PureOutcome> {
        if psi.len() != self.coherent {
            return Err(Error::invalid("amplitude vector does not match the coherent block"));
        }
        let slots = self.model.drive_slots(schedule)?;
        let plan = step_plan(schedule, self.max_step_for(schedule, &slots));
        let n = self.coherent;
        let dim = self.model.dim();
        let n_lasers = self.model.lasers.len();
        let nd = schedule.drives.len();
        let (mut dr, mut dd) = (vec![0.0; nd], vec![0.0; nd]);
        let mut z0 = vec![C64::new(0.0, 0.0); n_lasers];
        let mut zm = z0.clone();
        let mut z1 = z0.clone();
        let mut k = [vec![C64::new(0.0, 0.0); n], vec![C64::new(0.0, 0.0); n], vec![C64::new(0.0, 0.0); n], vec![C64::new(0.0, 0.0); n]];
        let mut tmp = vec![C64::new(0.0, 0.0); n];
        let mut f = [vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]];
        let mut sinks = vec![0.0; dim];
        let mut steps = 0;

        let mut controls = |t: f64, a: f64, b: f64, z: &mut [C64]| {
            schedule.fill_controls(node_time(t, a, b), &mut dr, &mut dd);
            z.iter_mut().for_each(|x| *x = C64::new(0.0, 0.0));
            for (d, &slot) in slots.iter().enumerate() {
                if dd[d] != 0.0 {
                    z[slot] += C64::from_polar(dr[d], -dd[d] * t);
                } else {
                    z[slot] += dr[d];
                }
            }
        };

        for &(a, b, m) in &plan {
            let dt = (b - a) / m as f64;
            controls(a, a, b, &mut z1);
            for i in 0..m {
                let t = a + i as f64 * dt;
                std::mem::swap(&mut z0, &mut z1);
                controls(t + 0.5 * dt, a, b, &mut zm);
                controls(t + dt, a, b, &mut z1);

                self.deriv(&z0, &psi, &mut k[0]);
                self.flow_rate(&psi, &mut f[0]);
                for s in 0..n {
                    tmp[s] = psi[s] + k[0][s] * (0.5 * dt);
                }
                self.deriv(&zm, &tmp, &mut k[1]);
                self.flow_rate(&tmp, &mut f[1]);
                for s in 0..n {
                    tmp[s] = psi[s] + k[1][s] * (0.5 * dt);
                }
                self.deriv(&zm, &tmp, &mut k[2]);
                self.flow_rate(&tmp, &mut f[2]);
                for s in 0..n {
                    tmp[s] = psi[s] + k[2][s] * dt;
                }
                self.deriv(&z1, &tmp, &mut k[3]);
                self.flow_rate(&tmp, &mut f[3]);
                let w = dt / 6.0;
                for s in 0..n {
                    psi[s] += (k[0][s] + (k[1][s] + k[2][s]) * 2.0 + k[3][s]) * w;
                }
                for s in n..dim {
                    sinks[s] += (f[0][s] + 2.0 * (f[1][s] + f[2][s]) + f[3][s]) * w;
                }
            }
            steps += m;
        }
        if psi.iter().any(|a| !a.re.is_finite() || !a.im.is_finite()) {
            return Err(Error::Numerical("pure-state propagation diverged".into()));
        }
        Ok(PureOutcome { populations: psi.iter().map(|a| a.norm_sqr()).collect(), sinks, steps })
    }

    /// Success probability from the standard initial state.
    pub fn success(&self, schedule: &ProtocolSchedule) -> Result<f64> {
        let basis = &self.model.basis;
        let out = self.run(schedule, basis.initial())?;
        Ok((out.population(basis.delivered()) + out.population(basis.output())).clamp(0.0, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{mhz_2pi, CycleName, CycleOverrides, KappaPolicy, LevelOverride};
    use crate::pulses::{Drive, Envelope, PiecewiseEnvelope};

    fn model_a(kappa: KappaPolicy) -> SystemModel {
        SystemModel::new(&CycleSpec::build(CycleName::A, kappa)).unwrap()
    }

    fn controls(pairs: &[((usize, usize), f64)]) -> ControlSample {
        ControlSample {
            pairs: pairs.iter().map(|p| p.0).collect(),
            rabi: pairs.iter().map(|p| p.1).collect(),
            detuning: vec![0.0; pairs.len()],
        }
    }

    #[test]
    fn bare_hamiltonian_has_two_cavity_pairs() {
        let m = model_a(KappaPolicy::TwoGO);
        let h = assemble_hamiltonian(&m, &controls(&[]), 3.0).unwrap();
        let mut nonzero = Vec::new();
        for i in 0..m.dim() {
            for j in 0..m.dim() {
                if h[(i, j)].norm() > 0.0 {
                    nonzero.push((i, j));
                }
            }
        }
        assert_eq!(nonzero, vec![(2, 3), (3, 2), (4, 5), (5, 4)]);
        assert_eq!(h[(2, 3)].re, m.cycle.g_m);
        assert_eq!(h[(5, 4)].re, m.cycle.g_o);
    }

    #[test]
    fn single_laser_term() {
        let m = model_a(KappaPolicy::TwoGO);
        let h = assemble_hamiltonian(&m, &controls(&[((1, 2), 0.3)]), 0.0).unwrap();
        assert_eq!(h[(0, 1)], C64::new(0.3, 0.0));
        assert_eq!(h, h.adjoint());
        let vac = m.basis.vacuum();
        for k in 0..m.dim() {
            assert_eq!(h[(vac, k)].norm(), 0.0);
            assert_eq!(h[(m.basis.loss(), k)].norm(), 0.0);
            assert_eq!(h[(m.basis.output(), k)].norm(), 0.0);
        }
    }

    #[test]
    fn detuned_hamiltonian_is_hermitian() {
        let m = model_a(KappaPolicy::TwoGO);
        let mut c = controls(&[((1, 2), 1.0), ((2, 3), 0.2), ((4, 5), 0.1), ((1, 6), 2.0)]);
        c.detuning = vec![0.05, -0.03, 0.06, 0.01];
        let h = assemble_hamiltonian(&m, &c, 17.3).unwrap();
        assert_eq!(h, h.adjoint());
        let phase = C64::from_polar(1.0, -0.05 * 17.3);
        assert!((h[(0, 1)] - phase).norm() < 1e-15);
    }

    #[test]
    fn out_of_bound_controls_rejected() {
        let m = model_a(KappaPolicy::TwoGO);
        assert!(assemble_hamiltonian(&m, &controls(&[((2, 3), 1.0)]), 0.0).is_err());
        assert!(assemble_hamiltonian(&m, &controls(&[((2, 3), -0.1)]), 0.0).is_err());
        let mut c = controls(&[((1, 2), 0.1)]);
        c.detuning[0] = 1.0;
        assert!(assemble_hamiltonian(&m, &c, 0.0).is_err());
        assert!(assemble_hamiltonian(&m, &controls(&[((3, 4), 0.001)]), 0.0).is_err());
    }

    #[test]
    fn absorbing_sink_is_stationary() {
        let m = model_a(KappaPolicy::TwoGO);
        let rho = DensityMatrix::pure(m.dim(), m.basis.loss());
        let h = assemble_hamiltonian(&m, &controls(&[((1, 2), 1.0), ((1, 6), 1.0)]), 0.0).unwrap();
        let d = lindblad_rhs(&rho.0, &h, &m.jumps);
        assert_eq!(d.norm(), 0.0);
    }

    #[test]
    fn rhs_is_traceless_and_hermitian() {
        let m = model_a(KappaPolicy::TwoGO);
        let n = m.dim();
        // Random-ish valid state: normalized Gram matrix.
        let a = CMatrix::from_fn(n, n, |i, j| C64::new(((i * 7 + j * 3) as f64).sin(), ((i + 2 * j) as f64).cos()));
        let mut rho = &a * a.adjoint();
        let tr = rho.trace();
        rho /= tr;
        let h = assemble_hamiltonian(&m, &controls(&[((1, 2), 1.0), ((2, 3), 0.3), ((4, 5), 0.2), ((1, 6), 3.0)]), 4.0).unwrap();
        let d = lindblad_rhs(&rho, &h, &m.jumps);
        assert!(d.trace().norm() < 1e-12);
        assert!((&d - d.adjoint()).norm() < 1e-12);
    }

    #[test]
    fn success_probability_cases() {
        let m = model_a(KappaPolicy::TwoGO);
        let b = &m.basis;
        let n = m.dim();
        assert_eq!(success_probability(b, &DensityMatrix::pure(n, b.output())), 1.0);
        assert_eq!(success_probability(b, &DensityMatrix::pure(n, b.loss())), 0.0);
        let mut w = vec![0.0; n];
        w[b.delivered()] = 0.5;
        w[b.loss()] = 0.5;
        assert_eq!(success_probability(b, &DensityMatrix::diagonal(&w)), 0.5);
    }

    #[test]
    fn jumps_never_leave_sinks() {
        for name in [CycleName::A, CycleName::B] {
            let m = SystemModel::new(&CycleSpec::build(name, KappaPolicy::TwoGO)).unwrap();
            for j in &m.jumps.jumps {
                assert!(!m.basis.states[j.source].is_sink());
                assert!(m.basis.states[j.target].is_sink());
            }
        }
    }

    #[test]
    fn empty_schedule_rejected() {
        let m = model_a(KappaPolicy::TwoGO);
        let s = ProtocolSchedule { cycle: CycleName::A, duration: 0.0, split: None, drives: vec![] };
        let rho = DensityMatrix::pure(m.dim(), 0);
        assert!(evolve(&m, &rho, &s, EvolveOptions::default()).is_err());
    }

    fn lossless_a() -> SystemModel {
        let ov = CycleOverrides {
            level: (1..=6).map(|index| LevelOverride { index, lifetime_ns: f64::INFINITY }).collect(),
            ..Default::default()
        };
        SystemModel::new(&CycleSpec::build(CycleName::A, KappaPolicy::TwoGO).with_overrides(&ov).unwrap()).unwrap()
    }

    fn constant_drive(pair: (usize, usize), cap: f64, value: f64, duration: f64) -> ProtocolSchedule {
        ProtocolSchedule {
            cycle: CycleName::A,
            duration,
            split: None,
            drives: vec![Drive {
                pair,
                cap,
                window: (0.0, duration),
                envelope: Envelope::Piecewise(PiecewiseEnvelope::constant(duration, value)),
                detuning: None,
            }],
        }
    }

    fn idle(duration: f64) -> ProtocolSchedule {
        ProtocolSchedule { cycle: CycleName::A, duration, split: None, drives: vec![] }
    }

    #[test]
    fn two_level_rabi_transfer() {
        let m = lossless_a();
        let omega = mhz_2pi(5.0);
        let s = constant_drive((1, 2), m.caps()[0], omega, std::f64::consts::PI / (2.0 * omega));
        let traj = evolve(&m, &DensityMatrix::pure(m.dim(), 0), &s, EvolveOptions::default()).unwrap();
        for (t, rho) in traj.times.iter().zip(&traj.states) {
            assert!((rho.population(1) - (omega * t).sin().powi(2)).abs() < 1e-6);
        }
        assert!((traj.last().population(1) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn vacuum_rabi_exchange() {
        let m = lossless_a();
        let g = m.cycle.g_m;
        let from = m.basis.index_of(JointState::atom(3, 1, 0)).unwrap();
        let to = m.basis.absorbed();
        let t_swap = std::f64::consts::PI / (2.0 * g);
        let mut rho0 = DensityMatrix::pure(m.dim(), from);
        let traj = evolve(&m, &rho0, &idle(t_swap), EvolveOptions::default()).unwrap();
        for (t, rho) in traj.times.iter().zip(&traj.states) {
            assert!((rho.population(to) - (g * t).sin().powi(2)).abs() < 1e-6);
        }
        assert!((traj.last().population(to) - 1.0).abs() < 1e-6);
        rho0 = DensityMatrix::pure(m.dim(), m.basis.vacuum());
        let still = evolve(&m, &rho0, &idle(50.0), EvolveOptions::default()).unwrap();
        assert_eq!(still.last(), &rho0);
    }

    #[test]
    fn spontaneous_decay_is_exponential() {
        let m = model_a(KappaPolicy::TwoGO);
        let start = 1;
        let gamma = m.cycle.level(2).decay_rate;
        let traj = evolve(&m, &DensityMatrix::pure(m.dim(), start), &idle(100.0), EvolveOptions::default()).unwrap();
        for (t, rho) in traj.times.iter().zip(&traj.states) {
            assert!((rho.population(start) - (-gamma * t).exp()).abs() < 1e-6);
            assert!((rho.population(m.basis.loss()) - (1.0 - (-gamma * t).exp())).abs() < 1e-6);
        }
    }

    #[test]
    fn stride_keeps_end_point() {
        let m = model_a(KappaPolicy::TwoGO);
        let opts = EvolveOptions { stride: 1000, ..Default::default() };
        let traj = evolve(&m, &DensityMatrix::pure(m.dim(), 1), &idle(10.0), opts).unwrap();
        assert_eq!(*traj.times.last().unwrap(), 10.0);
        assert_eq!(traj.times.len(), traj.steps / 1000 + 1 + usize::from(!traj.steps.is_multiple_of(1000)));
    }

    #[test]
    fn fast_path_matches_density_matrix() {
        let m = model_a(KappaPolicy::TwoGO);
        let drive = |pair, cap, window: (f64, f64), v: [f64; 2]| Drive {
            pair,
            cap,
            window,
            envelope: Envelope::Piecewise(PiecewiseEnvelope {
                durations: vec![0.4 * (window.1 - window.0), 0.6 * (window.1 - window.0)],
                values: v.to_vec(),
            }),
            detuning: None,
        };
        let caps = m.caps();
        let s = ProtocolSchedule {
            cycle: CycleName::A,
            duration: 60.0,
            split: Some(30.0),
            drives: vec![
                drive((1, 2), caps[0], (0.0, 30.0), [0.3, 0.5]),
                drive((2, 3), caps[1], (0.0, 30.0), [0.4, 0.2]),
                drive((4, 5), caps[2], (30.0, 60.0), [0.3, 0.1]),
                drive((1, 6), caps[3], (30.0, 60.0), [1.0, 2.0]),
            ],
        };
        let traj = evolve(&m, &DensityMatrix::pure(m.dim(), 0), &s, EvolveOptions { tol: 1e-9, ..Default::default() }).unwrap();
        let fast = Propagator::new(&m).unwrap().with_step_scale(0.05);
        let out = fast.run(&s, 0).unwrap();
        let rho = traj.last();
        for i in 0..m.dim() {
            assert!((rho.population(i) - out.population(i)).abs() < 1e-7, "state {i}: {} vs {}", rho.population(i), out.population(i));
        }
        assert!((fast.success(&s).unwrap() - success_probability(&m.basis, rho)).abs() < 1e-7);
    }
}
