//! Monte Carlo sensitivity of an optimized schedule to envelope errors.
//!
//! Each envelope parameter `mu` is replaced, one at a time, by a draw from
//! `Normal(mu, mu * relative_sd)` and the schedule is re-simulated. The
//! figure of merit is the fractional loss increase `(p_noisy - p) / p`.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dynamics::{Propagator, SystemModel};
use crate::error::{Error, Result};
use crate::model::CycleSpec;
use crate::pulses::{Envelope, ProtocolSchedule};

/// Relative spread of the default noise model, `sigma = mu / 25`.
pub const DEFAULT_RELATIVE_SD: f64 = 1.0 / 25.0;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    pub sample: usize,
    pub parameter: usize,
    pub label: String,
    pub nominal: f64,
    pub perturbed: f64,
    pub loss: f64,
    pub fractional_increase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    pub baseline_loss: f64,
    pub relative_sd: f64,
    pub seed: u64,
    pub samples: usize,
    pub mean_fractional_increase: f64,
    /// Standard error of the mean over all (sample, parameter) draws.
    pub standard_error: f64,
    pub min_fractional_increase: f64,
    pub max_fractional_increase: f64,
    pub rows: Vec<NoiseSample>,
}

/// Envelope parameters of a schedule as `(drive, slot, label, value)`.
///
/// Gaussian drives contribute amplitude, center and width; piecewise drives
/// contribute their interval values.
pub fn control_parameters(schedule: &ProtocolSchedule) -> Vec<(usize, usize, String, f64)> {
    let mut out = Vec::new();
    for (i, d) in schedule.drives.iter().enumerate() {
        let name = format!("{}{}", d.pair.0, d.pair.1);
        match &d.envelope {
            Envelope::Gaussian(g) => {
                out.push((i, 0, format!("amplitude_{name}"), g.amplitude));
                out.push((i, 1, format!("center_{name}"), g.center));
                out.push((i, 2, format!("width_{name}"), g.width));
            }
            Envelope::Piecewise(p) => {
                for (j, &v) in p.values.iter().enumerate() {
                    out.push((i, j, format!("value_{name}_{j}"), v));
                }
            }
        }
    }
    out
}

fn with_parameter(schedule: &ProtocolSchedule, drive: usize, slot: usize, value: f64) -> ProtocolSchedule {
    let mut s = schedule.clone();
    match &mut s.drives[drive].envelope {
        Envelope::Gaussian(g) => match slot {
            0 => g.amplitude = value.max(0.0),
            1 => g.center = value,
            _ => g.width = value.abs().max(1e-9),
        },
        Envelope::Piecewise(p) => p.values[slot] = value.max(0.0),
    }
    s
}

pub fn robustness_study(
    cycle: &CycleSpec,
    schedule: &ProtocolSchedule,
    samples: usize,
    seed: u64,
    relative_sd: f64,
) -> Result<RobustnessReport> {
    robustness_study_threaded(cycle, schedule, samples, seed, relative_sd, 1)
}

/// As [`robustness_study`], simulating draws on `threads` workers.
///
/// Draws are taken in a fixed order before any simulation, so the report
/// does not depend on the thread count.
pub fn robustness_study_threaded(
    cycle: &CycleSpec,
    schedule: &ProtocolSchedule,
    samples: usize,
    seed: u64,
    relative_sd: f64,
    threads: usize,
) -> Result<RobustnessReport> {
    if samples == 0 {
        return Err(Error::invalid("robustness study needs at least one sample"));
    }
    if !(relative_sd >= 0.0) || !relative_sd.is_finite() {
        return Err(Error::invalid("relative noise must be finite and nonnegative"));
    }
    schedule.validate(cycle)?;
    let model = SystemModel::new(cycle)?;
    let propagator = Propagator::new(&model)?;
    let baseline_loss = 1.0 - propagator.success(schedule)?;
    if !(baseline_loss > 0.0) {
        return Err(Error::Numerical("baseline loss is zero; fractional increase undefined".into()));
    }
    let params = control_parameters(schedule);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows = Vec::with_capacity(samples * params.len());
    for sample in 0..samples {
        for (k, (_, _, label, mu)) in params.iter().enumerate() {
            // Draw through a unit normal so that runs with different spreads share their draws.
            let z: f64 = unit.sample(&mut rng);
            let perturbed = if relative_sd == 0.0 { *mu } else { mu + mu.abs() * relative_sd * z };
            rows.push(NoiseSample {
                sample,
                parameter: k,
                label: label.clone(),
                nominal: *mu,
                perturbed,
                loss: baseline_loss,
                fractional_increase: 0.0,
            });
        }
    }
    let simulate = |chunk: &mut [NoiseSample]| -> Result<()> {
        for r in chunk {
            if r.perturbed != r.nominal {
                let (drive, slot, ..) = params[r.parameter];
                r.loss = 1.0 - propagator.success(&with_parameter(schedule, drive, slot, r.perturbed))?;
                r.fractional_increase = (r.loss - baseline_loss) / baseline_loss;
            }
        }
        Ok(())
    };
    let threads = threads.clamp(1, rows.len());
    if threads == 1 {
        simulate(&mut rows)?;
    } else {
        let size = rows.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = rows.chunks_mut(size).map(|c| {
                let simulate = &simulate;
                scope.spawn(move || simulate(c))
            }).collect();
            handles.into_iter().try_for_each(|h| h.join().expect("robustness worker panicked"))
        })?;
    }
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r.fractional_increase).sum::<f64>() / n;
    let var = if rows.len() > 1 {
        rows.iter().map(|r| (r.fractional_increase - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let (lo, hi) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.fractional_increase), b.max(r.fractional_increase)));
    Ok(RobustnessReport {
        baseline_loss,
        relative_sd,
        seed,
        samples,
        mean_fractional_increase: mean,
        standard_error: (var / n).sqrt(),
        min_fractional_increase: lo,
        max_fractional_increase: hi,
        rows,
    })
}

/// One row per draw, then a `summary` row.
pub fn write_robustness_csv<W: Write>(report: &RobustnessReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row", "sample", "parameter", "nominal", "perturbed", "loss_p", "fractional_increase", "std_error"])?;
    for r in &report.rows {
        w.write_record([
            "draw".to_string(),
            r.sample.to_string(),
            r.label.clone(),
            format!("{:.10e}", r.nominal),
            format!("{:.10e}", r.perturbed),
            format!("{:.10e}", r.loss),
            format!("{:.10e}", r.fractional_increase),
            String::new(),
        ])?;
    }
    w.write_record([
        "summary".to_string(),
        report.samples.to_string(),
        "all".to_string(),
        String::new(),
        String::new(),
        format!("{:.10e}", report.baseline_loss),
        format!("{:.10e}", report.mean_fractional_increase),
        format!("{:.10e}", report.standard_error),
    ])?;
    w.flush()?;
    Ok(())
}
