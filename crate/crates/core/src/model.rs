//! Cesium level cycles and the reduced joint state space.
//!
//! All times are in ns and all rates are angular frequencies in rad/ns
//! (hbar = 1). Table rates quoted as `2pi x f MHz` convert through
//! [`mhz_2pi`].
//!
//! The joint basis follows the loop of the cycle. Starting from the ground
//! level with one microwave photon, the atom walks the microwave-bearing arc
//! until it absorbs the photon on the microwave transition, continues with no
//! photons until it emits into the optical cavity, and then walks the
//! optical-bearing arc back to the ground level. For cycle B the arc
//! assignment of levels 5 and 6 (no photon) is forced by this topology rather
//! than stated with the level data.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Converts a rate quoted as `2pi x mhz` MHz into rad/ns.
pub fn mhz_2pi(mhz: f64) -> f64 {
    2.0 * std::f64::consts::PI * mhz * 1e-3
}

/// Inverse of [`mhz_2pi`].
pub fn to_mhz_2pi(rad_per_ns: f64) -> f64 {
    rad_per_ns / (2.0 * std::f64::consts::PI * 1e-3)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CycleName {
    A,
    B,
}

impl fmt::Display for CycleName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CycleName::A => write!(f, "A"),
            CycleName::B => write!(f, "B"),
        }
    }
}

impl FromStr for CycleName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(CycleName::A),
            "B" | "b" => Ok(CycleName::B),
            other => Err(Error::invalid(format!("unknown cycle {other:?}, expected A or B"))),
        }
    }
}

/// How the optical cavity decay rate is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaPolicy {
    /// kappa = 2 g_o
    #[serde(rename = "two_g_o")]
    TwoGO,
    Zero,
    /// Explicit rate in ns^-1.
    Explicit(f64),
}

impl KappaPolicy {
    pub fn resolve(&self, g_o: f64) -> f64 {
        match *self {
            KappaPolicy::TwoGO => 2.0 * g_o,
            KappaPolicy::Zero => 0.0,
            KappaPolicy::Explicit(k) => k,
        }
    }

    /// Short tag used in cache keys and file names.
    pub fn tag(&self) -> String {
        match *self {
            KappaPolicy::TwoGO => "two_g_o".to_string(),
            KappaPolicy::Zero => "zero".to_string(),
            KappaPolicy::Explicit(k) => format!("explicit_{k:e}"),
        }
    }
}

impl FromStr for KappaPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "two_g_o" | "2go" | "2g_o" => Ok(KappaPolicy::TwoGO),
            "zero" | "0" => Ok(KappaPolicy::Zero),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|k| k.is_finite() && *k >= 0.0)
                .map(KappaPolicy::Explicit)
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "kappa policy {other:?}: expected two_g_o, zero or a rate in ns^-1"
                    ))
                }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtomicLevel {
    /// 1-based level number.
    pub index: usize,
    /// Lifetime in ns, `f64::INFINITY` for stable levels.
    pub lifetime: f64,
    /// Spontaneous decay rate in ns^-1.
    pub decay_rate: f64,
}

impl AtomicLevel {
    pub fn new(index: usize, lifetime: f64) -> Result<Self> {
        let decay_rate = decay_rate(lifetime)?;
        Ok(AtomicLevel { index, lifetime, decay_rate })
    }
}

/// `1/lifetime`, or zero for an infinite lifetime.
pub fn decay_rate(lifetime: f64) -> Result<f64> {
    if lifetime.is_nan() || lifetime <= 0.0 {
        return Err(Error::invalid(format!("level lifetime must be positive, got {lifetime}")));
    }
    Ok(if lifetime.is_infinite() { 0.0 } else { 1.0 / lifetime })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionKind {
    Laser,
    MicrowaveCavity,
    OpticalCavity,
}

/// A coupled pair of levels. `pair = (j, k)` names the operator `|j><k|`;
/// for the cavities this is the atomic part of the photon-creating term.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub pair: (usize, usize),
    pub kind: TransitionKind,
    /// Maximum Rabi frequency (lasers) or vacuum coupling (cavities), rad/ns.
    pub max_rate: f64,
    /// Wavelength or frequency as quoted, e.g. "495 nm".
    pub label: &'static str,
    /// Laser power in mW, metadata only.
    pub power_mw: Option<f64>,
}

impl Transition {
    pub fn touches(&self, level: usize) -> bool {
        self.pair.0 == level || self.pair.1 == level
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleSpec {
    pub name: CycleName,
    pub levels: Vec<AtomicLevel>,
    pub transitions: Vec<Transition>,
    pub g_m: f64,
    pub g_o: f64,
    pub kappa_policy: KappaPolicy,
    /// Optical cavity decay rate, ns^-1. The microwave cavity is undamped.
    pub kappa: f64,
}

struct LevelRow {
    lifetime: f64,
    label: &'static str,
    power_mw: Option<f64>,
    max_mhz: f64,
}

const fn row(lifetime: f64, label: &'static str, power_mw: Option<f64>, max_mhz: f64) -> LevelRow {
    LevelRow { lifetime, label, power_mw, max_mhz }
}

// Row n describes level n and the transition from n to the next level of the loop.
const TABLE_A: [LevelRow; 6] = [
    row(f64::INFINITY, "895 nm", Some(0.001), 630.0),
    row(34.8, "495 nm", Some(10.0), 70.0),
    row(8e5, "5.04 GHz", None, 3.0),
    row(2e6, "778 nm", Some(10.0), 50.0),
    row(48.0, "1470 nm", None, 200.0),
    row(30.4, "852 nm", Some(0.001), 880.0),
];

const TABLE_B: [LevelRow; 7] = [
    row(f64::INFINITY, "895 nm", Some(0.001), 630.0),
    row(34.8, "495 nm", Some(10.0), 70.0),
    row(8e5, "5.04 GHz", None, 3.0),
    row(2e6, "319 nm", Some(10.0), 20.0),
    row(f64::INFINITY, "459 nm", Some(1.0), 1200.0),
    row(155.0, "1376 nm", None, 100.0),
    row(910.0, "690 nm", Some(10.0), 250.0),
];

impl CycleSpec {
    /// Builds cycle A or B with the tabulated constants.
    pub fn build(name: CycleName, kappa_policy: KappaPolicy) -> CycleSpec {
        let (table, optical_from): (&[LevelRow], usize) = match name {
            CycleName::A => (&TABLE_A, 5),
            CycleName::B => (&TABLE_B, 6),
        };
        let n = table.len();
        let levels = table
            .iter()
            .enumerate()
            .map(|(i, r)| AtomicLevel::new(i + 1, r.lifetime).expect("table lifetimes are positive"))
            .collect();

        let transitions = table
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let from = i + 1;
                let to = if from == n { 1 } else { from + 1 };
                let (pair, kind) = if from == 3 {
                    ((3, 4), TransitionKind::MicrowaveCavity)
                } else if from == optical_from {
                    ((to, from), TransitionKind::OpticalCavity)
                } else if to == 1 {
                    ((1, from), TransitionKind::Laser)
                } else {
                    ((from, to), TransitionKind::Laser)
                };
                Transition { pair, kind, max_rate: mhz_2pi(r.max_mhz), label: r.label, power_mw: r.power_mw }
            })
            .collect::<Vec<_>>();

        let g_m = mhz_2pi(table[2].max_mhz);
        let g_o = mhz_2pi(table[optical_from - 1].max_mhz);
        CycleSpec {
            name,
            levels,
            transitions,
            g_m,
            g_o,
            kappa_policy,
            kappa: kappa_policy.resolve(g_o),
        }
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, index: usize) -> &AtomicLevel {
        &self.levels[index - 1]
    }

    pub fn lasers(&self) -> impl Iterator<Item = &Transition> {
        self.transitions.iter().filter(|t| t.kind == TransitionKind::Laser)
    }

    pub fn n_lasers(&self) -> usize {
        self.lasers().count()
    }

    pub fn laser(&self, pair: (usize, usize)) -> Option<&Transition> {
        self.lasers().find(|t| t.pair == pair)
    }

    fn cavity(&self, kind: TransitionKind) -> &Transition {
        self.transitions
            .iter()
            .find(|t| t.kind == kind)
            .expect("validated cycle has both cavity transitions")
    }

    pub fn microwave(&self) -> &Transition {
        self.cavity(TransitionKind::MicrowaveCavity)
    }

    pub fn optical(&self) -> &Transition {
        self.cavity(TransitionKind::OpticalCavity)
    }

    /// Replaces the optical decay policy, keeping everything else.
    pub fn with_kappa(mut self, policy: KappaPolicy) -> CycleSpec {
        self.kappa_policy = policy;
        self.kappa = policy.resolve(self.g_o);
        self
    }

    /// Level sequence of the loop, starting at level 1 and oriented so that
    /// the microwave photon is absorbed on the way round.
    pub fn loop_order(&self) -> Result<Vec<usize>> {
        let n = self.n_levels();
        let mut adjacency = vec![Vec::new(); n + 1];
        for t in &self.transitions {
            let (j, k) = t.pair;
            if j == 0 || k == 0 || j > n || k > n || j == k {
                return Err(Error::invalid(format!("transition {:?} does not join two levels", t.pair)));
            }
            adjacency[j].push(k);
            adjacency[k].push(j);
        }
        if let Some(level) = (1..=n).find(|&l| adjacency[l].len() != 2) {
            return Err(Error::invalid(format!("level {level} is not on a single closed loop")));
        }

        let (mw_lower, mw_upper) = self.microwave().pair;
        for &first in &adjacency[1] {
            let mut order = vec![1, first];
            while order.len() < n {
                let cur = order[order.len() - 1];
                let prev = order[order.len() - 2];
                let next = if adjacency[cur][0] == prev { adjacency[cur][1] } else { adjacency[cur][0] };
                if next == 1 {
                    break;
                }
                order.push(next);
            }
            if order.len() != n || !adjacency[order[n - 1]].contains(&1) {
                return Err(Error::invalid("transitions do not form one loop through every level"));
            }
            let pos = |l: usize| order.iter().position(|&x| x == l).unwrap();
            if pos(mw_upper) == pos(mw_lower) + 1 {
                return Ok(order);
            }
        }
        Err(Error::invalid("microwave transition is not an edge of the loop"))
    }

    /// Laser pairs in loop order, split by protocol segment: the first holds
    /// the lasers before microwave absorption, the second the remainder.
    pub fn segment_lasers(&self) -> Result<[Vec<(usize, usize)>; 2]> {
        let order = self.loop_order()?;
        let n = order.len();
        let mut segments = [Vec::new(), Vec::new()];
        let mut seg = 0;
        for i in 0..n {
            let (a, b) = (order[i], order[(i + 1) % n]);
            let t = self
                .transitions
                .iter()
                .find(|t| t.pair == (a, b) || t.pair == (b, a))
                .expect("loop edges come from transitions");
            match t.kind {
                TransitionKind::MicrowaveCavity => seg = 1,
                TransitionKind::OpticalCavity => {}
                TransitionKind::Laser => segments[seg].push(t.pair),
            }
        }
        Ok(segments)
    }

    /// Checks the structural invariants of a cycle.
    pub fn validate(&self) -> Result<()> {
        let count = |k| self.transitions.iter().filter(|t| t.kind == k).count();
        if count(TransitionKind::MicrowaveCavity) != 1 || count(TransitionKind::OpticalCavity) != 1 {
            return Err(Error::invalid("a cycle needs exactly one microwave and one optical cavity transition"));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.index != i + 1 {
                return Err(Error::invalid("levels must be numbered 1..n in order"));
            }
            if l.decay_rate < 0.0 || !l.decay_rate.is_finite() {
                return Err(Error::invalid(format!("level {} has an invalid decay rate", l.index)));
            }
        }
        for t in &self.transitions {
            if !(t.max_rate >= 0.0) || !t.max_rate.is_finite() {
                return Err(Error::invalid(format!("transition {:?} needs a finite, nonnegative max rate", t.pair)));
            }
        }
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return Err(Error::invalid("kappa must be a finite non-negative rate"));
        }
        // The optical photon must be created in the direction of travel.
        let order = self.loop_order()?;
        let (created_at, emitted_from) = self.optical().pair;
        let pos = |l: usize| order.iter().position(|&x| x == l).unwrap();
        if (pos(emitted_from) + 1) % order.len() != pos(created_at) {
            return Err(Error::invalid("optical emission runs against the loop direction"));
        }
        if pos(created_at) == 0 {
            return Err(Error::invalid("optical emission may not land on level 1"));
        }
        Ok(())
    }

    /// Applies a what-if override document.
    pub fn with_overrides(mut self, ov: &CycleOverrides) -> Result<CycleSpec> {
        if let Some(c) = ov.cycle {
            if c != self.name {
                return Err(Error::config(format!("override targets cycle {c}, not {}", self.name)));
            }
        }
        for lv in &ov.level {
            if lv.index == 0 || lv.index > self.n_levels() {
                return Err(Error::config(format!("override names unknown level {}", lv.index)));
            }
            self.levels[lv.index - 1] = AtomicLevel::new(lv.index, lv.lifetime_ns).map_err(|e| Error::config(e.to_string()))?;
        }
        for tr in &ov.transition {
            let pair = (tr.pair[0], tr.pair[1]);
            let t = self
                .transitions
                .iter_mut()
                .find(|t| t.pair == pair || t.pair == (pair.1, pair.0))
                .ok_or_else(|| Error::config(format!("override names unknown transition {:?}", tr.pair)))?;
            t.max_rate = mhz_2pi(tr.max_rate_mhz_over_2pi);
        }
        let mut g_m = self.microwave().max_rate;
        let mut g_o = self.optical().max_rate;
        if let Some(g) = ov.g_m_mhz_over_2pi {
            g_m = mhz_2pi(g);
        }
        if let Some(g) = ov.g_o_mhz_over_2pi {
            g_o = mhz_2pi(g);
        }
        for t in self.transitions.iter_mut() {
            match t.kind {
                TransitionKind::MicrowaveCavity => t.max_rate = g_m,
                TransitionKind::OpticalCavity => t.max_rate = g_o,
                TransitionKind::Laser => {}
            }
        }
        self.g_m = g_m;
        self.g_o = g_o;
        let policy = ov.kappa_policy.unwrap_or(self.kappa_policy);
        let spec = self.with_kappa(policy);
        spec.validate().map_err(|e| Error::config(e.to_string()))?;
        Ok(spec)
    }

    /// Builds a cycle and applies an override file, if given.
    pub fn load(name: CycleName, policy: KappaPolicy, overrides: Option<&Path>) -> Result<CycleSpec> {
        let spec = CycleSpec::build(name, policy);
        match overrides {
            None => Ok(spec),
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                let ov: CycleOverrides = toml::from_str(&text)?;
                spec.with_overrides(&ov)
            }
        }
    }
}

/// What-if replacement of tabulated constants.
///
/// ```toml
/// cycle = "A"
/// kappa_policy = "two_g_o"          # or "zero", or { explicit = 2.5 }
/// g_m_mhz_over_2pi = 3.0
/// [[level]]
/// index = 2
/// lifetime_ns = 34.8                # inf for stable levels
/// [[transition]]
/// pair = [1, 2]
/// max_rate_mhz_over_2pi = 630.0
/// ```
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleOverrides {
    pub cycle: Option<CycleName>,
    pub kappa_policy: Option<KappaPolicy>,
    pub g_m_mhz_over_2pi: Option<f64>,
    pub g_o_mhz_over_2pi: Option<f64>,
    #[serde(default)]
    pub level: Vec<LevelOverride>,
    #[serde(default)]
    pub transition: Vec<TransitionOverride>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelOverride {
    pub index: usize,
    pub lifetime_ns: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionOverride {
    pub pair: [usize; 2],
    pub max_rate_mhz_over_2pi: f64,
}

/// One element of the reduced joint basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JointState {
    /// Atom in `level` with the given microwave and optical photon numbers.
    Atom { level: usize, microwave: u8, optical: u8 },
    /// Ground atom with no photons: the untouched `|0>` branch of a superposition.
    Vacuum,
    LossSink,
    OutputSink,
}

impl JointState {
    pub fn atom(level: usize, microwave: u8, optical: u8) -> Self {
        JointState::Atom { level, microwave, optical }
    }

    /// Column-friendly label, e.g. `a3_m1_o0`, `vac`, `loss`, `out`.
    pub fn label(&self) -> String {
        match *self {
            JointState::Atom { level, microwave, optical } => format!("a{level}_m{microwave}_o{optical}"),
            JointState::Vacuum => "vac".to_string(),
            JointState::LossSink => "loss".to_string(),
            JointState::OutputSink => "out".to_string(),
        }
    }

    pub fn is_sink(&self) -> bool {
        matches!(self, JointState::LossSink | JointState::OutputSink)
    }

    pub fn level(&self) -> Option<usize> {
        match *self {
            JointState::Atom { level, .. } => Some(level),
            JointState::Vacuum => Some(1),
            _ => None,
        }
    }

    pub fn has_optical_photon(&self) -> bool {
        matches!(self, JointState::Atom { optical: 1, .. })
    }
}

/// Ordered reduced basis: the `n + 1` loop states, then vacuum, loss and output.
#[derive(Debug, Clone, PartialEq)]
pub struct JointBasis {
    pub states: Vec<JointState>,
}

impl JointBasis {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn index_of(&self, s: JointState) -> Option<usize> {
        self.states.iter().position(|&x| x == s)
    }

    /// Number of loop states (everything except vacuum and the sinks).
    pub fn n_live(&self) -> usize {
        self.len() - 3
    }

    pub fn initial(&self) -> usize {
        0
    }

    /// Ground atom with the photon in the optical cavity.
    pub fn delivered(&self) -> usize {
        self.n_live() - 1
    }

    pub fn vacuum(&self) -> usize {
        self.len() - 3
    }

    pub fn loss(&self) -> usize {
        self.len() - 2
    }

    pub fn output(&self) -> usize {
        self.len() - 1
    }

    /// The loop state reached right after microwave absorption.
    pub fn absorbed(&self) -> usize {
        self.states
            .iter()
            .position(|s| matches!(s, JointState::Atom { microwave: 0, optical: 0, .. }))
            .expect("loop contains the no-photon arc")
    }
}

/// Enumerates the joint states reachable from (1, 1 microwave, 0 optical).
pub fn enumerate_basis(cycle: &CycleSpec) -> Result<JointBasis> {
    let order = cycle.loop_order()?;
    let mw_upper = cycle.microwave().pair.1;
    let opt_created = cycle.optical().pair.0;
    let (mut microwave, mut optical) = (1u8, 0u8);
    let mut states = Vec::with_capacity(order.len() + 4);
    for &level in &order {
        if level == mw_upper {
            microwave = 0;
        }
        if level == opt_created {
            optical = 1;
        }
        states.push(JointState::atom(level, microwave, optical));
    }
    if optical != 1 || microwave != 0 {
        return Err(Error::invalid("loop does not absorb the microwave photon and emit an optical one"));
    }
    states.push(JointState::atom(1, 0, 1));
    states.push(JointState::Vacuum);
    states.push(JointState::LossSink);
    states.push(JointState::OutputSink);
    Ok(JointBasis { states })
}
