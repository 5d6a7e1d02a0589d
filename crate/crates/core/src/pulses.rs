//! Laser control envelopes and the two-segment protocol layout.
//!
//! A [`ProtocolSchedule`] holds one [`Drive`] per driven laser transition.
//! Each drive is active on a half-open window `[start, end)` (the window that
//! ends at the protocol duration is closed) and evaluates to exactly zero
//! outside it. In the two-segment layout the first window covers the lasers
//! that carry the atom from the ground level up to the microwave transition,
//! and the second window covers the rest of the loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mhz_2pi, to_mhz_2pi, CycleName, CycleSpec};

/// Largest detuning magnitude, 2pi x 10 MHz, in rad/ns.
pub fn max_detuning() -> f64 {
    mhz_2pi(10.0)
}

/// Piecewise-constant envelope. `durations` are relative to the start of the
/// owning window and sum to its length; boundaries are right-continuous.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseEnvelope {
    pub durations: Vec<f64>,
    pub values: Vec<f64>,
}

impl PiecewiseEnvelope {
    pub fn constant(length: f64, value: f64) -> Self {
        PiecewiseEnvelope { durations: vec![length], values: vec![value] }
    }

    /// Value at `local` time measured from the window start.
    pub fn value_at(&self, local: f64) -> f64 {
        let mut edge = 0.0;
        let last = self.values.len() - 1;
        for (i, (&d, &v)) in self.durations.iter().zip(&self.values).enumerate() {
            edge += d;
            if local < edge || i == last {
                return v;
            }
        }
        self.values[last]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianEnvelope {
    pub amplitude: f64,
    /// Absolute time of the peak, ns.
    pub center: f64,
    pub width: f64,
}

impl GaussianEnvelope {
    pub fn value_at(&self, t: f64, cap: f64) -> f64 {
        let x = (t - self.center) / self.width;
        (self.amplitude * (-0.5 * x * x).exp()).clamp(0.0, cap)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Envelope {
    Piecewise(PiecewiseEnvelope),
    Gaussian(GaussianEnvelope),
}

/// Control of one laser transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Drive {
    pub pair: (usize, usize),
    /// Rabi frequency cap, rad/ns.
    pub cap: f64,
    /// Active window `[start, end]` in ns.
    pub window: (f64, f64),
    pub envelope: Envelope,
    /// Optional piecewise detuning over the same window, rad/ns.
    pub detuning: Option<PiecewiseEnvelope>,
}

impl Drive {
    fn window_len(&self) -> f64 {
        self.window.1 - self.window.0
    }

    #[inline]
    fn active(&self, t: f64, duration: f64) -> bool {
        t >= self.window.0 && (t < self.window.1 || (t == self.window.1 && self.window.1 >= duration))
    }

    /// Rabi frequency at `t` assuming the drive is active.
    #[inline]
    fn rabi_active(&self, t: f64) -> f64 {
        match &self.envelope {
            Envelope::Piecewise(p) => p.value_at(t - self.window.0).clamp(0.0, self.cap),
            Envelope::Gaussian(g) => g.value_at(t, self.cap),
        }
    }

    /// Largest Rabi frequency the drive reaches.
    pub fn peak(&self) -> f64 {
        let raw = match &self.envelope {
            Envelope::Piecewise(p) => p.values.iter().copied().fold(0.0, f64::max),
            Envelope::Gaussian(g) => g.amplitude,
        };
        raw.clamp(0.0, self.cap)
    }

    /// Largest detuning magnitude of the drive.
    pub fn peak_detuning(&self) -> f64 {
        self.detuning.as_ref().map_or(0.0, |d| d.values.iter().fold(0.0, |m, v| m.max(v.abs())))
    }

    fn detuning_active(&self, t: f64) -> f64 {
        self.detuning.as_ref().map_or(0.0, |d| d.value_at(t - self.window.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolSchedule {
    pub cycle: CycleName,
    /// Total duration tau, ns.
    pub duration: f64,
    /// Segment split time, `None` for a single continuous window.
    pub split: Option<f64>,
    pub drives: Vec<Drive>,
}

/// Instantaneous laser controls: `(rabi, detuning)` per drive, in drive order.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSample {
    pub pairs: Vec<(usize, usize)>,
    pub rabi: Vec<f64>,
    pub detuning: Vec<f64>,
}

impl ProtocolSchedule {
    /// Rabi frequency of `pair` at `t`; transitions without a drive are off.
    pub fn evaluate(&self, pair: (usize, usize), t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self
            .drives
            .iter()
            .filter(|d| d.pair == pair && d.active(t, self.duration))
            .map(|d| d.rabi_active(t))
            .sum())
    }

    pub fn evaluate_detuning(&self, pair: (usize, usize), t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self
            .drives
            .iter()
            .filter(|d| d.pair == pair && d.active(t, self.duration))
            .map(|d| d.detuning_active(t))
            .sum())
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.duration).contains(&t) {
            return Err(Error::invalid(format!("t = {t} ns lies outside [0, {}]", self.duration)));
        }
        Ok(())
    }

    /// Writes the controls of every drive at `t` into the slices (drive order).
    #[inline]
    pub fn fill_controls(&self, t: f64, rabi: &mut [f64], detuning: &mut [f64]) {
        for (i, d) in self.drives.iter().enumerate() {
            if d.active(t, self.duration) {
                rabi[i] = d.rabi_active(t);
                detuning[i] = d.detuning_active(t);
            } else {
                rabi[i] = 0.0;
                detuning[i] = 0.0;
            }
        }
    }

    pub fn controls_at(&self, t: f64) -> Result<ControlSample> {
        self.check_time(t)?;
        let n = self.drives.len();
        let mut rabi = vec![0.0; n];
        let mut detuning = vec![0.0; n];
        self.fill_controls(t, &mut rabi, &mut detuning);
        Ok(ControlSample { pairs: self.drives.iter().map(|d| d.pair).collect(), rabi, detuning })
    }

    pub fn has_detuning(&self) -> bool {
        self.drives.iter().any(|d| d.detuning.is_some())
    }

    /// Sorted times at which some control may jump: window edges and
    /// piecewise boundaries, always including 0 and the duration.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut pts = vec![0.0, self.duration];
        if let Some(s) = self.split {
            pts.push(s);
        }
        for d in &self.drives {
            pts.push(d.window.0);
            pts.push(d.window.1);
            let mut push_edges = |p: &PiecewiseEnvelope| {
                let mut edge = d.window.0;
                for &len in &p.durations[..p.durations.len().saturating_sub(1)] {
                    edge += len;
                    pts.push(edge);
                }
            };
            if let Envelope::Piecewise(p) = &d.envelope {
                push_edges(p);
            }
            if let Some(p) = &d.detuning {
                push_edges(p);
            }
        }
        pts.retain(|t| (0.0..=self.duration).contains(t));
        pts.sort_by(f64::total_cmp);
        pts.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * self.duration.max(1.0));
        pts
    }

    /// Joins two single-window schedules, shifting the second by the
    /// duration of the first. The result uses the two-segment layout.
    pub fn concatenate(first: &ProtocolSchedule, second: &ProtocolSchedule) -> Result<ProtocolSchedule> {
        if first.cycle != second.cycle {
            return Err(Error::invalid("cannot join schedules of different cycles"));
        }
        let shift = first.duration;
        let mut drives = first.drives.clone();
        for d in &second.drives {
            let mut d = d.clone();
            d.window = (d.window.0 + shift, d.window.1 + shift);
            if let Envelope::Gaussian(g) = &mut d.envelope {
                g.center += shift;
            }
            drives.push(d);
        }
        Ok(ProtocolSchedule { cycle: first.cycle, duration: first.duration + second.duration, split: Some(shift), drives })
    }

    /// Checks the schedule against the caps of `cycle`.
    pub fn validate(&self, cycle: &CycleSpec) -> Result<()> {
        if cycle.name != self.cycle {
            return Err(Error::invalid(format!("schedule is for cycle {}, not {}", self.cycle, cycle.name)));
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::invalid("schedule duration must be positive"));
        }
        if let Some(s) = self.split {
            if !(s > 0.0 && s < self.duration) {
                return Err(Error::invalid(format!("split {s} ns must lie strictly inside (0, {})", self.duration)));
            }
        }
        let tol = 1e-9 * self.duration;
        for d in &self.drives {
            let laser = cycle
                .laser(d.pair)
                .ok_or_else(|| Error::invalid(format!("{:?} is not a laser transition of cycle {}", d.pair, cycle.name)))?;
            if !(d.cap >= 0.0) || d.cap > laser.max_rate * (1.0 + 1e-9) {
                return Err(Error::invalid(format!("cap of {:?} exceeds the transition limit", d.pair)));
            }
            let (s, e) = d.window;
            if !(s >= -tol && e <= self.duration + tol && e > s) {
                return Err(Error::invalid(format!("window of {:?} must lie inside [0, duration]", d.pair)));
            }
            match &d.envelope {
                Envelope::Piecewise(p) => {
                    check_piecewise(p, d.window_len(), d.pair)?;
                    if p.values.iter().any(|&v| !(0.0..=d.cap * (1.0 + 1e-12)).contains(&v)) {
                        return Err(Error::invalid(format!("envelope of {:?} leaves [0, cap]", d.pair)));
                    }
                }
                Envelope::Gaussian(g) => {
                    if !(g.width > 0.0) || !g.amplitude.is_finite() || !g.center.is_finite() {
                        return Err(Error::invalid(format!("gaussian of {:?} needs a positive width", d.pair)));
                    }
                }
            }
            if let Some(p) = &d.detuning {
                check_piecewise(p, d.window_len(), d.pair)?;
                if p.values.iter().any(|v| v.abs() > max_detuning() * (1.0 + 1e-12)) {
                    return Err(Error::invalid(format!("detuning of {:?} exceeds 2pi x 10 MHz", d.pair)));
                }
            }
        }
        Ok(())
    }
}

fn check_piecewise(p: &PiecewiseEnvelope, len: f64, pair: (usize, usize)) -> Result<()> {
    if p.durations.is_empty() || p.durations.len() != p.values.len() {
        return Err(Error::invalid(format!("piecewise envelope of {pair:?} needs matching durations and values")));
    }
    if p.durations.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::invalid(format!("piecewise durations of {pair:?} must be positive")));
    }
    let total: f64 = p.durations.iter().sum();
    if (total - len).abs() > 1e-9 * len.max(1.0) {
        return Err(Error::invalid(format!("piecewise durations of {pair:?} sum to {total}, window is {len}")));
    }
    Ok(())
}

/// Evaluates the Rabi frequency of `pair` in `schedule` at `t`.
pub fn evaluate(schedule: &ProtocolSchedule, pair: (usize, usize), t: f64) -> Result<f64> {
    schedule.evaluate(pair, t)
}

// ---------------------------------------------------------------------------
// Search-space encoding

/// Envelope family used by a template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Piecewise(usize),
    Gaussian,
}

impl Shape {
    pub fn tag(&self) -> String {
        match self {
            Shape::Piecewise(n) => format!("pw{n}"),
            Shape::Gaussian => "gauss".to_string(),
        }
    }
}

impl std::str::FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "gaussian" || s == "gauss" {
            return Ok(Shape::Gaussian);
        }
        let n = s
            .strip_prefix("piecewise")
            .or_else(|| s.strip_prefix("pw"))
            .map(|r| r.trim_start_matches([':', '-', '=']))
            .and_then(|r| r.parse::<usize>().ok())
            .filter(|&n| n >= 1);
        n.map(Shape::Piecewise)
            .ok_or_else(|| Error::invalid(format!("parametrization {s:?}: expected gaussian or piecewise:N")))
    }
}

/// How the split between the two segments is set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layout {
    /// All drives share the full window.
    Continuous,
    /// Split time is part of the parameter vector.
    TwoSegmentFree,
    /// Split pinned at the given fraction of the duration.
    TwoSegmentPinned(f64),
}

/// Structure of a schedule whose free numbers form the search space.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleTemplate {
    pub cycle: CycleName,
    pub duration: f64,
    pub layout: Layout,
    pub shape: Shape,
    pub detuning: bool,
    /// Drives of each window as `(pair, cap)`; one block for `Continuous`.
    pub blocks: Vec<Vec<((usize, usize), f64)>>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const LOGIT_LIMIT: f64 = 40.0;
/// Log of the relative Gaussian width is clamped so widths stay positive and finite.
const LOG_WIDTH_LIMIT: f64 = 40.0;

#[inline]
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    ((p / (1.0 - p)).ln()).clamp(-LOGIT_LIMIT, LOGIT_LIMIT)
}

/// Maps any real onto `[0, cap]`.
#[inline]
pub fn squash(x: f64, cap: f64) -> f64 {
    cap * sigmoid(x)
}

#[inline]
pub fn unsquash(v: f64, cap: f64) -> f64 {
    if cap > 0.0 {
        logit(v / cap)
    } else {
        0.0
    }
}

fn squash_sym(x: f64, bound: f64) -> f64 {
    bound * (2.0 * sigmoid(x) - 1.0)
}

fn unsquash_sym(v: f64, bound: f64) -> f64 {
    logit(0.5 * (v / bound + 1.0))
}

impl ScheduleTemplate {
    /// Full protocol over `duration` using every laser of `cycle`.
    pub fn protocol(cycle: &CycleSpec, duration: f64, layout: Layout, shape: Shape, detuning: bool) -> Result<Self> {
        let caps = |pairs: &[(usize, usize)]| -> Vec<((usize, usize), f64)> {
            pairs.iter().map(|&p| (p, cycle.laser(p).expect("segment lasers exist").max_rate)).collect()
        };
        let segments = cycle.segment_lasers()?;
        let blocks = match layout {
            Layout::Continuous => vec![cycle.lasers().map(|t| (t.pair, t.max_rate)).collect()],
            _ => vec![caps(&segments[0]), caps(&segments[1])],
        };
        let t = ScheduleTemplate { cycle: cycle.name, duration, layout, shape, detuning, blocks };
        t.check()?;
        Ok(t)
    }

    /// One protocol segment on its own window `[0, duration]`.
    pub fn segment(cycle: &CycleSpec, segment: usize, duration: f64, shape: Shape, detuning: bool) -> Result<Self> {
        if !(1..=2).contains(&segment) {
            return Err(Error::invalid(format!("segment id must be 1 or 2, got {segment}")));
        }
        let pairs = &cycle.segment_lasers()?[segment - 1];
        let block = pairs.iter().map(|&p| (p, cycle.laser(p).unwrap().max_rate)).collect();
        let t = ScheduleTemplate {
            cycle: cycle.name,
            duration,
            layout: Layout::Continuous,
            shape,
            detuning,
            blocks: vec![block],
        };
        t.check()?;
        Ok(t)
    }

    /// Scales every cap by `factor` (used for what-if resource studies).
    pub fn with_cap_scale(mut self, factor: f64) -> Self {
        for block in &mut self.blocks {
            for (_, cap) in block.iter_mut() {
                *cap *= factor;
            }
        }
        self
    }

    fn check(&self) -> Result<()> {
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::invalid(format!("duration must be positive, got {}", self.duration)));
        }
        if let Shape::Piecewise(0) = self.shape {
            return Err(Error::invalid("piecewise envelopes need at least one interval"));
        }
        if let Layout::TwoSegmentPinned(f) = self.layout {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::invalid("pinned split fraction must lie in (0, 1)"));
            }
        }
        Ok(())
    }

    fn block_arity(&self, block: usize) -> usize {
        let lasers = self.blocks[block].len();
        let det = if self.detuning { 1 } else { 0 };
        match self.shape {
            Shape::Piecewise(n) => (n - 1) + lasers * n * (1 + det),
            Shape::Gaussian => lasers * (3 + det),
        }
    }

    /// Length of the parameter vector.
    pub fn arity(&self) -> usize {
        let split = usize::from(self.layout == Layout::TwoSegmentFree);
        split + (0..self.blocks.len()).map(|b| self.block_arity(b)).sum::<usize>()
    }

    fn windows(&self, split: Option<f64>) -> Vec<(f64, f64)> {
        match split {
            None => vec![(0.0, self.duration)],
            Some(s) => vec![(0.0, s), (s, self.duration)],
        }
    }

    /// Builds the schedule encoded by `v`.
    pub fn from_vector(&self, v: &[f64]) -> Result<ProtocolSchedule> {
        if v.len() != self.arity() {
            return Err(Error::invalid(format!("parameter vector has {} entries, template needs {}", v.len(), self.arity())));
        }
        let mut it = v.iter().copied();
        let split = match self.layout {
            Layout::Continuous => None,
            Layout::TwoSegmentFree => Some(self.duration * split_fraction(it.next().unwrap())),
            Layout::TwoSegmentPinned(f) => Some(self.duration * f),
        };
        let mut drives = Vec::new();
        for (block, window) in self.blocks.iter().zip(self.windows(split)) {
            let len = window.1 - window.0;
            match self.shape {
                Shape::Piecewise(n) => {
                    let durations = stick_break(&mut it, n, len);
                    let mut values: Vec<Vec<f64>> = Vec::new();
                    for &(_, cap) in block {
                        values.push((0..n).map(|_| squash(it.next().unwrap(), cap)).collect());
                    }
                    let mut det: Vec<Option<PiecewiseEnvelope>> = vec![None; block.len()];
                    if self.detuning {
                        for d in det.iter_mut() {
                            let vals = (0..n).map(|_| squash_sym(it.next().unwrap(), max_detuning())).collect();
                            *d = Some(PiecewiseEnvelope { durations: durations.clone(), values: vals });
                        }
                    }
                    for ((&(pair, cap), values), detuning) in block.iter().zip(values).zip(det) {
                        drives.push(Drive {
                            pair,
                            cap,
                            window,
                            envelope: Envelope::Piecewise(PiecewiseEnvelope { durations: durations.clone(), values }),
                            detuning,
                        });
                    }
                }
                Shape::Gaussian => {
                    let mut block_drives = Vec::new();
                    for &(pair, cap) in block {
                        let amplitude = squash(it.next().unwrap(), cap);
                        let center = window.0 + len * it.next().unwrap();
                        let width = len * it.next().unwrap().clamp(-LOG_WIDTH_LIMIT, LOG_WIDTH_LIMIT).exp();
                        block_drives.push(Drive {
                            pair,
                            cap,
                            window,
                            envelope: Envelope::Gaussian(GaussianEnvelope { amplitude, center, width }),
                            detuning: None,
                        });
                    }
                    if self.detuning {
                        for d in block_drives.iter_mut() {
                            let value = squash_sym(it.next().unwrap(), max_detuning());
                            d.detuning = Some(PiecewiseEnvelope::constant(len, value));
                        }
                    }
                    drives.extend(block_drives);
                }
            }
        }
        Ok(ProtocolSchedule { cycle: self.cycle, duration: self.duration, split, drives })
    }

    /// Inverse of [`ScheduleTemplate::from_vector`] for schedules with this structure.
    pub fn parameter_vector(&self, s: &ProtocolSchedule) -> Result<Vec<f64>> {
        let mismatch = || Error::invalid("schedule does not match the template structure");
        if s.cycle != self.cycle || (s.duration - self.duration).abs() > 1e-9 * self.duration {
            return Err(mismatch());
        }
        let mut out = Vec::with_capacity(self.arity());
        match (self.layout, s.split) {
            (Layout::Continuous, None) => {}
            (Layout::TwoSegmentFree, Some(split)) => out.push(split_coordinate(split / self.duration)),
            (Layout::TwoSegmentPinned(f), Some(split)) if (split - f * self.duration).abs() <= 1e-9 * self.duration => {}
            _ => return Err(mismatch()),
        }
        let mut drives = s.drives.iter();
        for block in &self.blocks {
            let block_drives: Vec<&Drive> = drives.by_ref().take(block.len()).collect();
            if block_drives.len() != block.len() || block_drives.iter().zip(block).any(|(d, (p, _))| d.pair != *p) {
                return Err(mismatch());
            }
            let window = block_drives[0].window;
            let len = window.1 - window.0;
            match self.shape {
                Shape::Piecewise(n) => {
                    let durations = match &block_drives[0].envelope {
                        Envelope::Piecewise(p) if p.durations.len() == n => p.durations.clone(),
                        _ => return Err(mismatch()),
                    };
                    out.extend(stick_unbreak(&durations, len));
                    for d in &block_drives {
                        match &d.envelope {
                            Envelope::Piecewise(p) if p.values.len() == n => {
                                out.extend(p.values.iter().map(|&v| unsquash(v, d.cap)))
                            }
                            _ => return Err(mismatch()),
                        }
                    }
                    if self.detuning {
                        for d in &block_drives {
                            let p = d.detuning.as_ref().filter(|p| p.values.len() == n).ok_or_else(mismatch)?;
                            out.extend(p.values.iter().map(|&v| unsquash_sym(v, max_detuning())));
                        }
                    }
                }
                Shape::Gaussian => {
                    for d in &block_drives {
                        match &d.envelope {
                            Envelope::Gaussian(g) => {
                                out.push(unsquash(g.amplitude.min(d.cap), d.cap));
                                out.push((g.center - window.0) / len);
                                out.push((g.width / len).ln());
                            }
                            _ => return Err(mismatch()),
                        }
                    }
                    if self.detuning {
                        for d in &block_drives {
                            let p = d.detuning.as_ref().ok_or_else(mismatch)?;
                            out.push(unsquash_sym(p.values[0], max_detuning()));
                        }
                    }
                }
            }
        }
        if drives.next().is_some() {
            return Err(mismatch());
        }
        Ok(out)
    }

    /// Infers the template of a schedule produced by [`ScheduleTemplate::from_vector`].
    pub fn infer(cycle: &CycleSpec, s: &ProtocolSchedule) -> Result<Self> {
        let shape = match s.drives.first().map(|d| &d.envelope) {
            Some(Envelope::Gaussian(_)) => Shape::Gaussian,
            Some(Envelope::Piecewise(p)) => Shape::Piecewise(p.durations.len()),
            None => return Err(Error::invalid("schedule has no drives")),
        };
        let layout = if s.split.is_some() { Layout::TwoSegmentFree } else { Layout::Continuous };
        let mut blocks: Vec<Vec<((usize, usize), f64)>> = Vec::new();
        let mut last_window = None;
        for d in &s.drives {
            if last_window != Some(d.window) {
                blocks.push(Vec::new());
                last_window = Some(d.window);
            }
            blocks.last_mut().unwrap().push((d.pair, d.cap));
        }
        let t = ScheduleTemplate {
            cycle: cycle.name,
            duration: s.duration,
            layout,
            shape,
            detuning: s.has_detuning(),
            blocks,
        };
        t.check()?;
        Ok(t)
    }
}

/// Flattens a schedule into the unconstrained search coordinates.
pub fn parameter_vector(cycle: &CycleSpec, s: &ProtocolSchedule) -> Result<Vec<f64>> {
    ScheduleTemplate::infer(cycle, s)?.parameter_vector(s)
}

// The split stays at least this fraction of the duration away from either end.
const SPLIT_MARGIN: f64 = 1e-3;

fn split_fraction(x: f64) -> f64 {
    SPLIT_MARGIN + (1.0 - 2.0 * SPLIT_MARGIN) * sigmoid(x)
}

fn split_coordinate(f: f64) -> f64 {
    logit((f - SPLIT_MARGIN) / (1.0 - 2.0 * SPLIT_MARGIN))
}

fn stick_break(it: &mut impl Iterator<Item = f64>, n: usize, len: f64) -> Vec<f64> {
    let mut remaining = 1.0;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n - 1 {
        let f = remaining * sigmoid(it.next().unwrap());
        out.push(f * len);
        remaining -= f;
    }
    out.push(remaining * len);
    out
}

fn stick_unbreak(durations: &[f64], len: f64) -> Vec<f64> {
    let mut remaining = 1.0;
    let mut out = Vec::with_capacity(durations.len().saturating_sub(1));
    for &d in &durations[..durations.len() - 1] {
        let f = d / len;
        out.push(logit(f / remaining));
        remaining -= f;
    }
    out
}

// ---------------------------------------------------------------------------
// Text serialization

const SCHEDULE_FORMAT: &str = "qfconv-schedule/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleDoc {
    format: String,
    cycle: CycleName,
    duration_ns: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split_ns: Option<f64>,
    #[serde(default)]
    drive: Vec<DriveDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DriveDoc {
    pair: [usize; 2],
    cap_mhz_2pi: f64,
    window_ns: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gaussian: Option<GaussianDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    piecewise: Option<PiecewiseDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    detuning: Option<PiecewiseDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianDoc {
    amplitude_mhz_2pi: f64,
    center_ns: f64,
    width_ns: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PiecewiseDoc {
    durations_ns: Vec<f64>,
    values_mhz_2pi: Vec<f64>,
}

impl PiecewiseDoc {
    fn from_envelope(p: &PiecewiseEnvelope) -> Self {
        PiecewiseDoc { durations_ns: p.durations.clone(), values_mhz_2pi: p.values.iter().map(|&v| to_mhz_2pi(v)).collect() }
    }

    fn into_envelope(self) -> PiecewiseEnvelope {
        PiecewiseEnvelope { durations: self.durations_ns, values: self.values_mhz_2pi.into_iter().map(mhz_2pi).collect() }
    }
}

impl ProtocolSchedule {
    /// Serializes to the TOML schedule document (rates in MHz x 2pi).
    pub fn to_toml(&self) -> Result<String> {
        let doc = ScheduleDoc {
            format: SCHEDULE_FORMAT.to_string(),
            cycle: self.cycle,
            duration_ns: self.duration,
            split_ns: self.split,
            drive: self
                .drives
                .iter()
                .map(|d| {
                    let (gaussian, piecewise) = match &d.envelope {
                        Envelope::Gaussian(g) => (
                            Some(GaussianDoc { amplitude_mhz_2pi: to_mhz_2pi(g.amplitude), center_ns: g.center, width_ns: g.width }),
                            None,
                        ),
                        Envelope::Piecewise(p) => (None, Some(PiecewiseDoc::from_envelope(p))),
                    };
                    DriveDoc {
                        pair: [d.pair.0, d.pair.1],
                        cap_mhz_2pi: to_mhz_2pi(d.cap),
                        window_ns: [d.window.0, d.window.1],
                        gaussian,
                        piecewise,
                        detuning: d.detuning.as_ref().map(PiecewiseDoc::from_envelope),
                    }
                })
                .collect(),
        };
        Ok(toml::to_string(&doc)?)
    }

    pub fn from_toml(text: &str) -> Result<ProtocolSchedule> {
        let doc: ScheduleDoc = toml::from_str(text)?;
        if doc.format != SCHEDULE_FORMAT {
            return Err(Error::config(format!("unsupported schedule format {:?}, expected {SCHEDULE_FORMAT:?}", doc.format)));
        }
        let mut drives = Vec::with_capacity(doc.drive.len());
        for (i, d) in doc.drive.into_iter().enumerate() {
            let envelope = match (d.gaussian, d.piecewise) {
                (Some(g), None) => Envelope::Gaussian(GaussianEnvelope {
                    amplitude: mhz_2pi(g.amplitude_mhz_2pi),
                    center: g.center_ns,
                    width: g.width_ns,
                }),
                (None, Some(p)) => Envelope::Piecewise(p.into_envelope()),
                _ => {
                    return Err(Error::config(format!("drive[{i}]: exactly one of `gaussian` or `piecewise` is required")))
                }
            };
            drives.push(Drive {
                pair: (d.pair[0], d.pair[1]),
                cap: mhz_2pi(d.cap_mhz_2pi),
                window: (d.window_ns[0], d.window_ns[1]),
                envelope,
                detuning: d.detuning.map(PiecewiseDoc::into_envelope),
            });
        }
        Ok(ProtocolSchedule { cycle: doc.cycle, duration: doc.duration_ns, split: doc.split_ns, drives })
    }

    pub fn load(path: &std::path::Path, cycle: &CycleSpec) -> Result<ProtocolSchedule> {
        let text = std::fs::read_to_string(path)?;
        let s = ProtocolSchedule::from_toml(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        s.validate(cycle).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Ok(s)
    }
}
