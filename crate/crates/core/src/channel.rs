//! Amplitude-damping channel induced by a loss probability `p`.
//!
//! Kraus pair `K0 = |0><0| + sqrt(1-p)|1><1|`, `K1 = sqrt(p)|0><1|`. All
//! entropies are in bits (qubits per channel use).

use std::io::Write;

use nalgebra::Matrix2;

use crate::dynamics::C64;
use crate::error::{Error, Result};

/// Qubit density matrix `[[1-q, c], [c*, q]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QubitState {
    pub q: f64,
    pub c: C64,
}

impl QubitState {
    pub fn new(q: f64, c: C64) -> Result<Self> {
        let s = QubitState { q, c };
        s.validate()?;
        Ok(s)
    }

    pub fn diagonal(q: f64) -> Result<Self> {
        QubitState::new(q, C64::new(0.0, 0.0))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.q) {
            return Err(Error::invalid(format!("excited population {} outside [0, 1]", self.q)));
        }
        if !(self.c.norm_sqr() <= self.q * (1.0 - self.q) * (1.0 + 1e-12) + 1e-15) {
            return Err(Error::invalid("coherence exceeds sqrt(q(1-q))"));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix2<C64> {
        Matrix2::new(C64::new(1.0 - self.q, 0.0), self.c, self.c.conj(), C64::new(self.q, 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DampingChannel {
    pub p: f64,
}

impl DampingChannel {
    pub fn new(p: f64) -> Result<Self> {
        check_loss(p)?;
        Ok(DampingChannel { p })
    }

    pub fn kraus(&self) -> [Matrix2<C64>; 2] {
        let z = C64::new(0.0, 0.0);
        let k0 = Matrix2::new(C64::new(1.0, 0.0), z, z, C64::new((1.0 - self.p).sqrt(), 0.0));
        let k1 = Matrix2::new(z, C64::new(self.p.sqrt(), 0.0), z, z);
        [k0, k1]
    }

    /// `sum_j K_j^dag K_j`, which is the identity.
    pub fn completeness(&self) -> Matrix2<C64> {
        self.kraus().iter().map(|k| k.adjoint() * k).sum()
    }
}

fn check_loss(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("loss probability {p} outside [0, 1]")));
    }
    Ok(())
}

pub fn apply_channel(rho: QubitState, p: f64) -> Result<QubitState> {
    rho.validate()?;
    check_loss(p)?;
    Ok(QubitState { q: (1.0 - p) * rho.q, c: rho.c * (1.0 - p).sqrt() })
}

/// `x log2 x`, zero at `x = 0`.
fn xlog2x(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.log2()
    }
}

/// Closed-form coherent information in bits.
pub fn coherent_information_closed(q: f64, c: C64, p: f64) -> Result<f64> {
    QubitState { q, c }.validate()?;
    check_loss(p)?;
    let c2 = c.norm_sqr();
    let a = ((2.0 * (p - 1.0) * q + 1.0).powi(2) - 4.0 * (p - 1.0) * c2).max(0.0).sqrt().min(1.0);
    let b = ((1.0 - 2.0 * p * q).powi(2) + 4.0 * p * c2).max(0.0).sqrt().min(1.0);
    let term = |x: f64| xlog2x(1.0 - x) + xlog2x(1.0 + x);
    Ok(0.5 * (term(b) - term(a)))
}

/// Von Neumann entropy in bits of a 2x2 Hermitian matrix.
fn entropy_bits(m: &Matrix2<C64>) -> f64 {
    let h = (m + m.adjoint()) * C64::new(0.5, 0.0);
    -h.symmetric_eigenvalues().iter().map(|&l| xlog2x(l.max(0.0))).sum::<f64>()
}

/// `S(E[rho]) - S(W)` with `W_jk = Tr[K_j rho K_k^dag]`, in bits.
pub fn coherent_information_direct(rho: QubitState, p: f64) -> Result<f64> {
    rho.validate()?;
    let ch = DampingChannel::new(p)?;
    let r = rho.matrix();
    let ks = ch.kraus();
    let out: Matrix2<C64> = ks.iter().map(|k| k * r * k.adjoint()).sum();
    let w = Matrix2::from_fn(|j, k| (ks[j] * r * ks[k].adjoint()).trace());
    Ok(entropy_bits(&out) - entropy_bits(&w))
}

/// Capacity and the maximizing excited population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityPoint {
    pub capacity: f64,
    pub q: f64,
}

/// Maximum coherent information over diagonal inputs: grid at `resolution`,
/// then golden-section refinement around the best grid point.
pub fn capacity_point(p: f64, resolution: f64) -> Result<CapacityPoint> {
    check_loss(p)?;
    if !(resolution > 0.0 && resolution <= 0.5) {
        return Err(Error::invalid("capacity resolution must lie in (0, 0.5]"));
    }
    let info = |q: f64| coherent_information_closed(q, C64::new(0.0, 0.0), p).unwrap_or(f64::NEG_INFINITY);
    let n = (1.0 / resolution).ceil() as usize;
    let (mut best_q, mut best) = (0.0, info(0.0));
    for i in 1..=n {
        let q = (i as f64 / n as f64).min(1.0);
        let v = info(q);
        if v > best {
            best = v;
            best_q = q;
        }
    }
    let step = 1.0 / n as f64;
    let (mut lo, mut hi) = ((best_q - step).max(0.0), (best_q + step).min(1.0));
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (hi - r * (hi - lo), lo + r * (hi - lo));
    let (mut fa, mut fb) = (info(a), info(b));
    while hi - lo > 1e-12 {
        if fa >= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - r * (hi - lo);
            fa = info(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + r * (hi - lo);
            fb = info(b);
        }
    }
    for (q, v) in [(a, fa), (b, fb)] {
        if v > best {
            best = v;
            best_q = q;
        }
    }
    Ok(CapacityPoint { capacity: best.max(0.0), q: best_q })
}

pub const DEFAULT_RESOLUTION: f64 = 1e-3;

/// Single-use quantum capacity in qubits.
pub fn capacity(p: f64, resolution: f64) -> Result<f64> {
    Ok(capacity_point(p, resolution)?.capacity)
}

/// Readout window added to the protocol duration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IoWindow {
    /// Ten cavity lifetimes, `10 / kappa`.
    CavityLifetimes { kappa: f64 },
    Explicit { ns: f64 },
}

impl IoWindow {
    pub fn from_kappa(kappa: f64) -> Result<Self> {
        if !(kappa > 0.0) || !kappa.is_finite() {
            return Err(Error::invalid("a 10/kappa readout window needs kappa > 0; pass an explicit window instead"));
        }
        Ok(IoWindow::CavityLifetimes { kappa })
    }

    pub fn ns(&self) -> Result<f64> {
        match *self {
            IoWindow::CavityLifetimes { kappa } if kappa > 0.0 && kappa.is_finite() => Ok(10.0 / kappa),
            IoWindow::Explicit { ns } if ns >= 0.0 && ns.is_finite() => Ok(ns),
            _ => Err(Error::invalid("readout window must be finite and nonnegative")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatePoint {
    pub tau: f64,
    pub loss: f64,
    pub capacity: f64,
    /// `tau` plus the readout window, ns.
    pub total_time: f64,
    /// Qubits per ns.
    pub rate: f64,
}

impl RatePoint {
    pub fn rate_mqbps(&self) -> f64 {
        self.rate * 1e3
    }
}

pub fn comm_rate(tau: f64, p: f64, io: IoWindow) -> Result<RatePoint> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::invalid("protocol duration must be finite and nonnegative"));
    }
    let capacity = capacity(p, DEFAULT_RESOLUTION)?;
    let total_time = tau + io.ns()?;
    if !(total_time > 0.0) {
        return Err(Error::invalid("total cycle time must be positive"));
    }
    Ok(RatePoint { tau, loss: p, capacity, total_time, rate: capacity / total_time })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateScan {
    pub points: Vec<RatePoint>,
    /// Index of the largest rate; the first one on ties.
    pub best: usize,
}

impl RateScan {
    pub fn best_point(&self) -> &RatePoint {
        &self.points[self.best]
    }
}

pub fn rate_scan(scan: &[(f64, f64)], io: IoWindow) -> Result<RateScan> {
    if scan.is_empty() {
        return Err(Error::invalid("rate scan needs at least one point"));
    }
    let points = scan.iter().map(|&(tau, p)| comm_rate(tau, p, io)).collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, pt) in points.iter().enumerate() {
        if pt.rate > points[best].rate {
            best = i;
        }
    }
    Ok(RateScan { points, best })
}

/// Capacity curve as `p,capacity_qubits`.
pub fn write_capacity_csv<W: Write>(points: &[(f64, f64)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["p", "capacity_qubits"])?;
    for (p, c) in points {
        w.write_record([format!("{p:.6}"), format!("{c:.12}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Rate curve as `tau_ns,loss_p,capacity,T_ns,rate_Mqbps`.
pub fn write_rate_csv<W: Write>(scan: &RateScan, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tau_ns", "loss_p", "capacity", "T_ns", "rate_Mqbps"])?;
    for pt in &scan.points {
        w.write_record([
            format!("{:.6}", pt.tau),
            format!("{:.10}", pt.loss),
            format!("{:.10}", pt.capacity),
            format!("{:.6}", pt.total_time),
            format!("{:.8}", pt.rate_mqbps()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn h2(x: f64) -> f64 {
        -xlog2x(x) - xlog2x(1.0 - x)
    }

    #[test]
    fn kraus_pair_is_complete() {
        for i in 0..=100 {
            let m = DampingChannel::new(i as f64 / 100.0).unwrap().completeness();
            assert!((m - Matrix2::identity()).norm() < 1e-14);
        }
    }

    #[test]
    fn channel_action() {
        let full = apply_channel(QubitState::diagonal(1.0).unwrap(), 1.0).unwrap();
        assert_eq!((full.q, full.c), (0.0, C64::new(0.0, 0.0)));
        let s = QubitState::new(0.3, C64::new(0.2, -0.1)).unwrap();
        assert_eq!(apply_channel(s, 0.0).unwrap(), s);
        let out = apply_channel(QubitState::new(0.5, C64::new(0.5, 0.0)).unwrap(), 0.36).unwrap();
        assert_abs_diff_eq!(out.q, 0.32, epsilon = 1e-15);
        assert_abs_diff_eq!(out.c.re, 0.4, epsilon = 1e-15);
        // Same numbers from explicit Kraus algebra.
        let ks = DampingChannel::new(0.36).unwrap().kraus();
        let r = QubitState::new(0.5, C64::new(0.5, 0.0)).unwrap().matrix();
        let m: Matrix2<C64> = ks.iter().map(|k| k * r * k.adjoint()).sum();
        assert_abs_diff_eq!(m[(1, 1)].re, 0.32, epsilon = 1e-15);
        assert_abs_diff_eq!(m[(0, 1)].re, 0.4, epsilon = 1e-15);
        assert!(apply_channel(s, 1.5).is_err());
        assert!(QubitState::new(0.5, C64::new(0.6, 0.0)).is_err());
    }

    #[test]
    fn closed_form_special_cases() {
        for p in [0.0, 0.2, 0.5, 0.9, 1.0] {
            assert_abs_diff_eq!(coherent_information_closed(1.0, C64::new(0.0, 0.0), p).unwrap(), 0.0, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(coherent_information_closed(0.5, C64::new(0.0, 0.0), 0.0).unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn direct_special_cases() {
        let s = QubitState::diagonal(1.0).unwrap();
        let out = apply_channel(s, 0.3).unwrap();
        assert_abs_diff_eq!(entropy_bits(&out.matrix()), h2(0.3), epsilon = 1e-12);
        assert_abs_diff_eq!(coherent_information_direct(s, 0.3).unwrap(), 0.0, epsilon = 1e-12);
        let s = QubitState::new(0.3, C64::new(0.1, 0.2)).unwrap();
        let ev = s.matrix().symmetric_eigenvalues();
        let s_rho = -ev.iter().map(|&l| xlog2x(l)).sum::<f64>();
        assert_abs_diff_eq!(coherent_information_direct(s, 0.0).unwrap(), s_rho, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_matches_direct_on_grid() {
        let n = 50;
        for i in 0..n {
            let q = i as f64 / (n - 1) as f64;
            for j in 0..n {
                let c = C64::new((q * (1.0 - q)).sqrt() * j as f64 / (n - 1) as f64, 0.0);
                for k in 0..n {
                    let p = k as f64 / (n - 1) as f64;
                    let a = coherent_information_closed(q, c, p).unwrap();
                    let b = coherent_information_direct(QubitState { q, c }, p).unwrap();
                    assert!((a - b).abs() < 1e-10, "q={q} c={c} p={p}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn capacity_endpoints() {
        assert_abs_diff_eq!(capacity(0.0, DEFAULT_RESOLUTION).unwrap(), 1.0, epsilon = 1e-6);
        for p in [0.5, 0.6, 0.75, 1.0] {
            assert_abs_diff_eq!(capacity(p, DEFAULT_RESOLUTION).unwrap(), 0.0, epsilon = 1e-6);
        }
        let c = capacity(0.1, DEFAULT_RESOLUTION).unwrap();
        assert!(c > 0.0 && c < 1.0);
        assert!(capacity(-0.1, DEFAULT_RESOLUTION).is_err());
    }

    #[test]
    fn capacity_is_nonincreasing() {
        let mut last = f64::INFINITY;
        for i in 0..=200 {
            let c = capacity(i as f64 / 200.0, DEFAULT_RESOLUTION).unwrap();
            assert!(c <= last + 1e-8);
            last = c;
        }
    }

    #[test]
    fn rate_examples() {
        let r = comm_rate(100.0, 0.0, IoWindow::Explicit { ns: 0.0 }).unwrap();
        assert_abs_diff_eq!(r.rate_mqbps(), 10.0, epsilon = 1e-9);
        assert_eq!(comm_rate(50.0, 0.7, IoWindow::Explicit { ns: 3.0 }).unwrap().rate, 0.0);
        assert!(IoWindow::from_kappa(0.0).is_err());
        let one = comm_rate(0.0, 0.0, IoWindow::Explicit { ns: 20.0 }).unwrap();
        let two = comm_rate(0.0, 0.0, IoWindow::Explicit { ns: 40.0 }).unwrap();
        assert_eq!(one.rate, 2.0 * two.rate);
        let io = IoWindow::from_kappa(2.0).unwrap();
        assert_eq!(comm_rate(10.0, 0.0, io).unwrap().total_time, 15.0);
    }

    #[test]
    fn rate_scan_has_interior_maximum() {
        // Loss falling to a plateau: p(tau) = 0.05 + 0.95 exp(-tau / 30).
        let scan: Vec<(f64, f64)> = (1..=60).map(|i| {
            let tau = 5.0 * i as f64;
            (tau, 0.05 + 0.95 * (-tau / 30.0).exp())
        }).collect();
        let r = rate_scan(&scan, IoWindow::Explicit { ns: 5.0 }).unwrap();
        assert!(r.best > 0 && r.best < scan.len() - 1);
        for w in r.points[..=r.best].windows(2) {
            assert!(w[1].rate >= w[0].rate);
        }
        for w in r.points[r.best..].windows(2) {
            assert!(w[1].rate <= w[0].rate);
        }
        let dead = rate_scan(&[(10.0, 1.0), (20.0, 1.0)], IoWindow::Explicit { ns: 1.0 }).unwrap();
        assert!(dead.points.iter().all(|p| p.rate == 0.0));
        assert!(rate_scan(&[], IoWindow::Explicit { ns: 1.0 }).is_err());
    }

    #[test]
    fn csv_headers() {
        let mut buf = Vec::new();
        write_capacity_csv(&[(0.0, 1.0)], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("p,capacity_qubits\n"));
        let scan = rate_scan(&[(10.0, 0.2)], IoWindow::Explicit { ns: 1.0 }).unwrap();
        let mut buf = Vec::new();
        write_rate_csv(&scan, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("tau_ns,loss_p,capacity,T_ns,rate_Mqbps\n"));
    }

    proptest! {
        #[test]
        fn closed_form_matches_direct(q in 0.0f64..=1.0, r in 0.0f64..=1.0, phase in 0.0f64..std::f64::consts::TAU, p in 0.0f64..=1.0) {
            let c = C64::from_polar((q * (1.0 - q)).sqrt() * r, phase);
            let a = coherent_information_closed(q, c, p).unwrap();
            let b = coherent_information_direct(QubitState { q, c }, p).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn capacity_is_bounded(p in 0.0f64..=1.0) {
            let c = capacity(p, 1e-2).unwrap();
            prop_assert!((0.0..=1.0).contains(&c));
        }
    }
}
