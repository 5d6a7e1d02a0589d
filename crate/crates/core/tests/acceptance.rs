//! Acceptance suite. Each test prints one `[PASS]`/`[FAIL]` line and then
//! asserts it.
//!
//! Optimized protocols come from the scan cache in `tests/data/cache`,
//! produced with the optimizer settings in `tests/data/optimizer.toml`
//! (`optimizer_ladder.toml` for the parametrization comparison, whose
//! piecewise landscapes need more restarts).
//! Missing points fail fast; set `QFCONV_RECOMPUTE=1` to optimize and store
//! them instead (hours of CPU for the full set).

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use qfconv::channel::{capacity, coherent_information_closed, coherent_information_direct, rate_scan, IoWindow, QubitState, DEFAULT_RESOLUTION};
use qfconv::dynamics::{evolve, C64, DensityMatrix, EvolveOptions, SystemModel};
use qfconv::model::{mhz_2pi, CycleName, CycleOverrides, CycleSpec, JointState, KappaPolicy, LevelOverride};
use qfconv::optimizer::{
    constant_drive_baseline, loss_vs_duration_scan, optimize_joint, robustness_study, OptimizeConfig, ScanCache, ScanPoint,
    DEFAULT_RELATIVE_SD,
};
use qfconv::pulses::{Drive, Envelope, PiecewiseEnvelope, ProtocolSchedule, Shape};
use qfconv::Result;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TAUS_A: [f64; 14] = [50.0, 60.0, 70.0, 80.0, 90.0, 100.0, 110.0, 120.0, 135.0, 150.0, 175.0, 200.0, 250.0, 300.0];
const TAUS_B: [f64; 14] = [60.0, 70.0, 80.0, 90.0, 100.0, 120.0, 140.0, 160.0, 180.0, 200.0, 220.0, 250.0, 300.0, 350.0];
const TAUS_A_NO_KAPPA: [f64; 10] = [90.0, 100.0, 110.0, 120.0, 135.0, 150.0, 175.0, 200.0, 250.0, 300.0];

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("data")
}

fn optimizer(detuning: bool) -> OptimizeConfig {
    settings("optimizer.toml", detuning)
}

fn settings(file: &str, detuning: bool) -> OptimizeConfig {
    let text = std::fs::read_to_string(data_dir().join(file)).expect("optimizer settings");
    OptimizeConfig { detuning, ..toml::from_str(&text).expect("valid optimizer settings") }
}

fn cache() -> ScanCache {
    let root = data_dir().join("cache");
    if std::env::var_os("QFCONV_RECOMPUTE").is_some() {
        ScanCache::new(root)
    } else {
        ScanCache::read_only(root)
    }
}

fn cycle(name: CycleName, kappa: KappaPolicy) -> CycleSpec {
    CycleSpec::build(name, kappa)
}

fn scan(c: &CycleSpec, taus: &[f64], shape: Shape, detuning: bool) -> Result<Vec<ScanPoint>> {
    loss_vs_duration_scan(c, taus, shape, &optimizer(detuning), Some(&cache()))
}

fn point(c: &CycleSpec, tau: f64, shape: Shape, detuning: bool) -> Result<ScanPoint> {
    Ok(scan(c, &[tau], shape, detuning)?.remove(0))
}

/// Prints the verdict outside the test harness's capture, then asserts it.
fn verdict(name: &str, pass: bool, detail: String) {
    let line = format!("[{}] {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{name}: {detail}");
}

fn fail_on_error<T>(name: &str, r: Result<T>) -> T {
    match r {
        Ok(v) => v,
        Err(e) => {
            verdict(name, false, format!("error: {e}"));
            unreachable!()
        }
    }
}

#[test]
fn channel_oracle_equivalence() {
    let name = "coherent information, closed form vs direct";
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0_f64;
    for _ in 0..10_000 {
        let q: f64 = rng.random_range(0.0..=1.0);
        let r = rng.random_range(0.0..=1.0) * (q * (1.0 - q)).sqrt();
        let c = C64::from_polar(r, rng.random_range(0.0..std::f64::consts::TAU));
        let p: f64 = rng.random_range(0.0..=1.0);
        let closed = coherent_information_closed(q, c, p).unwrap();
        let direct = coherent_information_direct(QubitState::new(q, c).unwrap(), p).unwrap();
        worst = worst.max((closed - direct).abs());
    }
    let secs = clock.elapsed().as_secs_f64();
    verdict(name, worst < 1e-10 && secs < 1.0, format!("max deviation {worst:.2e} over 10^4 states in {secs:.2} s"));
}

#[test]
fn capacity_endpoints_and_shape() {
    let name = "capacity endpoints and monotonicity";
    let clock = Instant::now();
    let c0 = capacity(0.0, DEFAULT_RESOLUTION).unwrap();
    let tail: Vec<f64> = [0.5, 0.6, 0.75, 1.0].iter().map(|&p| capacity(p, DEFAULT_RESOLUTION).unwrap()).collect();
    let grid: Vec<f64> = (0..200).map(|i| capacity(i as f64 / 199.0, DEFAULT_RESOLUTION).unwrap()).collect();
    let rises = grid.windows(2).filter(|w| w[1] > w[0] + 1e-8).count();
    let secs = clock.elapsed().as_secs_f64();
    let pass = (c0 - 1.0).abs() < 1e-6 && tail.iter().all(|c| c.abs() < 1e-6) && rises == 0 && secs < 10.0;
    verdict(name, pass, format!("C(0) = {c0:.8}, max C(p >= 0.5) = {:.2e}, {rises} rises on 200 points, {secs:.2} s", tail.iter().fold(0.0_f64, |a, b| a.max(b.abs()))));
}

fn lossless_a() -> SystemModel {
    let ov = CycleOverrides {
        level: (1..=6).map(|index| LevelOverride { index, lifetime_ns: f64::INFINITY }).collect(),
        ..Default::default()
    };
    SystemModel::new(&cycle(CycleName::A, KappaPolicy::TwoGO).with_overrides(&ov).unwrap()).unwrap()
}

fn hold(duration: f64, drives: Vec<Drive>) -> ProtocolSchedule {
    ProtocolSchedule { cycle: CycleName::A, duration, split: None, drives }
}

#[test]
fn dynamics_analytic_oracles() {
    let name = "Rabi transfer, vacuum Rabi exchange and spontaneous decay";
    let clock = Instant::now();
    let opts = EvolveOptions::default();

    let m = lossless_a();
    let omega = mhz_2pi(5.0);
    let t_pi = std::f64::consts::PI / (2.0 * omega);
    let drive = Drive {
        pair: (1, 2),
        cap: m.caps()[0],
        window: (0.0, t_pi),
        envelope: Envelope::Piecewise(PiecewiseEnvelope::constant(t_pi, omega)),
        detuning: None,
    };
    let traj = evolve(&m, &DensityMatrix::pure(m.dim(), m.basis.initial()), &hold(t_pi, vec![drive]), opts).unwrap();
    let excited = m.basis.index_of(JointState::atom(2, 1, 0)).unwrap();
    let rabi = traj
        .times
        .iter()
        .zip(&traj.states)
        .map(|(t, r)| (r.population(excited) - (omega * t).sin().powi(2)).abs())
        .fold(0.0, f64::max);
    let rabi_end = (traj.last().population(excited) - 1.0).abs();

    let g = m.cycle.g_m;
    let t_swap = std::f64::consts::PI / (2.0 * g);
    let from = m.basis.index_of(JointState::atom(3, 1, 0)).unwrap();
    let traj = evolve(&m, &DensityMatrix::pure(m.dim(), from), &hold(t_swap, vec![]), opts).unwrap();
    let vacuum = traj
        .times
        .iter()
        .zip(&traj.states)
        .map(|(t, r)| (r.population(m.basis.absorbed()) - (g * t).sin().powi(2)).abs())
        .fold(0.0, f64::max);

    let lossy = SystemModel::new(&cycle(CycleName::A, KappaPolicy::TwoGO)).unwrap();
    // Level 2 couples to nothing once the lasers are off.
    let start = lossy.basis.index_of(JointState::atom(2, 1, 0)).unwrap();
    let gamma = lossy.cycle.level(2).decay_rate;
    let traj = evolve(&lossy, &DensityMatrix::pure(lossy.dim(), start), &hold(100.0, vec![]), opts).unwrap();
    let decay = traj
        .times
        .iter()
        .zip(&traj.states)
        .map(|(t, r)| (r.population(start) - (-gamma * t).exp()).abs())
        .fold(0.0, f64::max);
    let secs = clock.elapsed().as_secs_f64();
    let pass = rabi.max(rabi_end) < 1e-6 && vacuum < 1e-6 && decay < 1e-6 && secs < 10.0;
    verdict(
        name,
        pass,
        format!("Rabi error {:.1e}, vacuum Rabi error {vacuum:.1e}, decay error {decay:.1e}, {secs:.2} s", rabi.max(rabi_end)),
    );
}

#[test]
fn physicality_along_optimized_protocol() {
    let name = "trace, Hermiticity, positivity and sink monotonicity along an optimized protocol";
    let c = cycle(CycleName::A, KappaPolicy::TwoGO);
    let p = fail_on_error(name, point(&c, 150.0, Shape::Gaussian, false));
    let model = SystemModel::new(&c).unwrap();
    let opts = EvolveOptions { tol: 1e-8, ..Default::default() };
    let traj = evolve(&model, &DensityMatrix::pure(model.dim(), model.basis.initial()), &p.result.schedule, opts).unwrap();
    let (mut trace, mut herm, mut min_eig, mut sink_drop) = (0.0_f64, 0.0_f64, f64::INFINITY, 0.0_f64);
    let sinks = [model.basis.loss(), model.basis.output()];
    for (i, r) in traj.states.iter().enumerate() {
        trace = trace.max((r.trace() - 1.0).abs());
        herm = herm.max(r.hermiticity_error());
        min_eig = min_eig.min(r.min_eigenvalue());
        if i > 0 {
            for &s in &sinks {
                sink_drop = sink_drop.max(traj.states[i - 1].population(s) - r.population(s));
            }
        }
    }
    let pass = trace < 1e-8 && herm < 1e-10 && min_eig > -1e-8 && sink_drop <= 0.0;
    verdict(
        name,
        pass,
        format!(
            "{} samples (step tolerance 1e-8): |tr - 1| <= {trace:.1e}, Hermiticity {herm:.1e}, min eigenvalue {min_eig:.1e}, largest sink decrease {sink_drop:.1e}",
            traj.states.len()
        ),
    );
}

#[test]
fn optimized_vs_constant_gap() {
    let name = "optimized vs constant drive, cycle A at 150 ns";
    let c = cycle(CycleName::A, KappaPolicy::TwoGO);
    let shaped = fail_on_error(name, point(&c, 150.0, Shape::Gaussian, false)).result;
    let constant = fail_on_error(name, constant_drive_baseline(&c, 150.0, &optimizer(false)));
    let gap = shaped.success - constant.success;
    let pass = (0.80..=0.95).contains(&shaped.success) && (0.27..=0.48).contains(&constant.success) && gap >= 0.3;
    verdict(
        name,
        pass,
        format!(
            "optimized {:.4} (window [0.80, 0.95]), constant {:.4} (window [0.27, 0.48]), gap {gap:.4} (need >= 0.3); split at {:.1} ns",
            shaped.success,
            constant.success,
            shaped.schedule.split.unwrap_or(f64::NAN)
        ),
    );
}

fn best_rate(points: &[ScanPoint], kappa: f64) -> (f64, f64) {
    let table: Vec<(f64, f64)> = points.iter().map(|p| (p.tau, p.result.loss)).collect();
    let scan = rate_scan(&table, IoWindow::from_kappa(kappa).unwrap()).unwrap();
    let best = scan.best_point();
    (best.tau, best.rate_mqbps())
}

#[test]
fn rate_maxima() {
    let name = "communication rate maxima of cycles A and B";
    let a = cycle(CycleName::A, KappaPolicy::TwoGO);
    let b = cycle(CycleName::B, KappaPolicy::TwoGO);
    let scan_a = fail_on_error(name, scan(&a, &TAUS_A, Shape::Gaussian, false));
    let scan_b = fail_on_error(name, scan(&b, &TAUS_B, Shape::Gaussian, false));
    let (tau_a, rate_a) = best_rate(&scan_a, a.kappa);
    let (tau_b, rate_b) = best_rate(&scan_b, b.kappa);
    let pass = (4.5..=9.0).contains(&rate_a)
        && (60.0..=120.0).contains(&tau_a)
        && (2.5..=5.5).contains(&rate_b)
        && (140.0..=240.0).contains(&tau_b)
        && rate_a > rate_b;
    verdict(
        name,
        pass,
        format!(
            "A: {rate_a:.3} Mqb/s at {tau_a} ns (window [4.5, 9.0] at [60, 120]); B: {rate_b:.3} Mqb/s at {tau_b} ns (window [2.5, 5.5] at [140, 240])"
        ),
    );
}

/// First scanned duration whose success is within 0.05 of the best in the scan.
fn plateau_onset(points: &[ScanPoint]) -> f64 {
    let top = points.iter().map(|p| p.result.success).fold(0.0, f64::max);
    points.iter().find(|p| p.result.success >= top - 0.05).expect("nonempty scan").tau
}

#[test]
fn closed_cavity_bound() {
    let name = "no-decay optical cavity vs open cavity beyond the plateau onset";
    let open = cycle(CycleName::A, KappaPolicy::TwoGO);
    let closed = cycle(CycleName::A, KappaPolicy::Zero);
    let scan_open = fail_on_error(name, scan(&open, &TAUS_A, Shape::Gaussian, false));
    let onset = plateau_onset(&scan_open);
    let taus: Vec<f64> = TAUS_A_NO_KAPPA.iter().copied().filter(|&t| t >= onset).collect();
    if taus.len() < 3 || taus[0] != onset {
        verdict(name, false, format!("plateau onset {onset} ns is not covered by the closed-cavity grid"));
    }
    let scan_closed = fail_on_error(name, scan(&closed, &taus, Shape::Gaussian, false));
    let mut worst = f64::INFINITY;
    let mut rows = Vec::new();
    for q in &scan_closed {
        let o = scan_open.iter().find(|p| p.tau == q.tau).expect("shared grid");
        worst = worst.min(q.result.success - o.result.success);
        rows.push(format!("{}: {:.4}/{:.4}", q.tau, q.result.success, o.result.success));
    }
    verdict(
        name,
        worst >= -0.02,
        format!("onset {onset} ns; closed/open success {}; smallest margin {worst:.4} (need >= -0.02)", rows.join(", ")),
    );
}

#[test]
fn plateau_efficiency() {
    let name = "plateau efficiency of cycle A";
    let c = cycle(CycleName::A, KappaPolicy::TwoGO);
    let points = fail_on_error(name, scan(&c, &TAUS_A, Shape::Gaussian, false));
    let best = points.iter().max_by(|a, b| a.result.success.total_cmp(&b.result.success)).unwrap();
    verdict(name, best.result.success > 0.90, format!("best success {:.4} at {} ns (need > 0.90)", best.result.success, best.tau));
}

#[test]
#[ignore = "long-running joint search over both segments"]
fn two_segment_cost() {
    let name = "joint single-shot search vs two-segment optimum";
    let c = cycle(CycleName::A, KappaPolicy::TwoGO);
    let start = fail_on_error(name, point(&c, 100.0, Shape::Gaussian, false)).result;
    let joint = fail_on_error(name, optimize_joint(&c, &start.schedule, &optimizer(false)));
    let gain = joint.success - start.success;
    verdict(
        name,
        gain < 0.03,
        format!("two-segment {:.4}, joint {:.4}, gain {gain:.4} (need < 0.03) at 100 ns", start.success, joint.success),
    );
}

#[test]
fn robustness_harness() {
    let name = "robustness to envelope errors";
    let c = cycle(CycleName::A, KappaPolicy::TwoGO);
    let s = fail_on_error(name, point(&c, 150.0, Shape::Gaussian, false)).result.schedule;
    let seed = 25;
    let first = robustness_study(&c, &s, 200, seed, DEFAULT_RELATIVE_SD).unwrap();
    let again = robustness_study(&c, &s, 200, seed, DEFAULT_RELATIVE_SD).unwrap();
    let zero = robustness_study(&c, &s, 200, seed, 0.0).unwrap();
    let doubled = robustness_study(&c, &s, 200, seed, 2.0 * DEFAULT_RELATIVE_SD).unwrap();
    let pass = first == again
        && zero.mean_fractional_increase == 0.0
        && first.mean_fractional_increase.is_finite()
        && first.standard_error.is_finite()
        && first.standard_error > 0.0
        && doubled.mean_fractional_increase >= first.mean_fractional_increase;
    verdict(
        name,
        pass,
        format!(
            "mean fractional loss increase {:.4} +/- {:.4} (sd mu/25), {:.4} +/- {:.4} (sd mu/12.5), zero-noise {}, repeat identical: {}",
            first.mean_fractional_increase,
            first.standard_error,
            doubled.mean_fractional_increase,
            doubled.standard_error,
            zero.mean_fractional_increase,
            first == again
        ),
    );
}

#[test]
fn parametrization_ladder() {
    let name = "piecewise N = 1, 2, 3 and Gaussian envelopes, cycle A at 150 ns";
    let c = cycle(CycleName::A, KappaPolicy::TwoGO);
    let cfg = settings("optimizer_ladder.toml", false);
    let loss = |shape| {
        let points = loss_vs_duration_scan(&c, &[150.0], shape, &cfg, Some(&cache()));
        fail_on_error(name, points).remove(0).result.loss
    };
    let (p1, p2, p3, pg) = (loss(Shape::Piecewise(1)), loss(Shape::Piecewise(2)), loss(Shape::Piecewise(3)), loss(Shape::Gaussian));
    let step = p1 - p2;
    let pass = p1 > p2 && (p2 - p3).abs() <= 0.25 * step && (pg - p2).abs() <= 0.03;
    verdict(
        name,
        pass,
        format!(
            "loss N=1 {p1:.4}, N=2 {p2:.4}, N=3 {p3:.4}, Gaussian {pg:.4}; |N2 - N3| / (N1 - N2) = {:.3} (need <= 0.25), |Gaussian - N2| = {:.4} (need <= 0.03)",
            (p2 - p3).abs() / step,
            (pg - p2).abs()
        ),
    );
}

#[test]
fn detuning_nullity() {
    let name = "laser detunings as extra controls";
    let c = cycle(CycleName::A, KappaPolicy::TwoGO);
    let plain = fail_on_error(name, point(&c, 150.0, Shape::Gaussian, false)).result.loss;
    let tuned = fail_on_error(name, point(&c, 150.0, Shape::Gaussian, true)).result.loss;
    verdict(name, (plain - tuned).abs() < 0.01, format!("loss {plain:.4} resonant, {tuned:.4} with detunings (need |difference| < 0.01)"));
}
