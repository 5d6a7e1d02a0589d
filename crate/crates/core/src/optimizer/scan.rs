//! Duration scans with an on-disk result cache.
//!
//! Cache layout (format `qfconv-scan/1`):
//!
//! ```text
//! <root>/v1/<cycle>/<kappa>/<parametrization>/seed-<seed>/tau-<tau>-<fingerprint>.toml
//! ```
//!
//! `<fingerprint>` is a 64-bit FNV-1a digest of the cycle constants and the
//! optimizer config, so runs with different settings never share a file.
//! Each file holds one optimized point including its full schedule, and is
//! written once through a temporary file and a rename.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CycleSpec;
use crate::pulses::{ProtocolSchedule, Shape};

use super::protocol::{optimize_protocol_memo, OptimizationResult, OptimizeConfig, SegmentMemo};

pub const CACHE_FORMAT: &str = "qfconv-scan/1";

#[derive(Debug, Clone, PartialEq)]
pub struct ScanPoint {
    pub tau: f64,
    pub result: OptimizationResult,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheRecord {
    format: String,
    cycle: String,
    tau_ns: f64,
    kappa: String,
    parametrization: String,
    seed: u64,
    fingerprint: String,
    loss_p: f64,
    success: f64,
    evaluations: usize,
    converged: bool,
    restart_losses: Vec<f64>,
    schedule: String,
}

/// Where scan results live and whether missing points may be computed.
#[derive(Debug, Clone)]
pub struct ScanCache {
    pub root: PathBuf,
    /// Fail with [`Error::MissingCache`] instead of optimizing a missing point.
    pub read_only: bool,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Digest of everything besides the key fields that changes a result.
pub fn fingerprint(cycle: &CycleSpec, config: &OptimizeConfig) -> Result<String> {
    let text = format!("{:?}\n{}", cycle, toml::to_string(config)?);
    Ok(format!("{:016x}", fnv1a(text.as_bytes())))
}

impl ScanCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ScanCache { root: root.into(), read_only: false }
    }

    pub fn read_only(root: impl Into<PathBuf>) -> Self {
        ScanCache { root: root.into(), read_only: true }
    }

    pub fn path(&self, cycle: &CycleSpec, tau: f64, shape: Shape, config: &OptimizeConfig) -> Result<PathBuf> {
        let det = if config.detuning { "-det" } else { "" };
        Ok(self
            .root
            .join("v1")
            .join(cycle.name.to_string())
            .join(cycle.kappa_policy.tag())
            .join(format!("{}{det}", shape.tag()))
            .join(format!("seed-{}", config.simplex.seed))
            .join(format!("tau-{tau:.4}-{}.toml", fingerprint(cycle, config)?)))
    }

    pub fn load(&self, cycle: &CycleSpec, tau: f64, shape: Shape, config: &OptimizeConfig) -> Result<Option<ScanPoint>> {
        let path = self.path(cycle, tau, shape, config)?;
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)?;
        let rec: CacheRecord = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        if rec.format != CACHE_FORMAT {
            return Err(Error::config(format!("{}: unsupported cache format {:?}", path.display(), rec.format)));
        }
        let schedule = ProtocolSchedule::from_toml(&rec.schedule)?;
        schedule.validate(cycle)?;
        let result = OptimizationResult {
            schedule,
            loss: rec.loss_p,
            success: rec.success,
            evaluations: rec.evaluations,
            restart_values: rec.restart_losses,
            converged: rec.converged,
        };
        Ok(Some(ScanPoint { tau: rec.tau_ns, result, seed: rec.seed }))
    }

    pub fn store(&self, cycle: &CycleSpec, shape: Shape, config: &OptimizeConfig, point: &ScanPoint) -> Result<PathBuf> {
        let path = self.path(cycle, point.tau, shape, config)?;
        let rec = CacheRecord {
            format: CACHE_FORMAT.to_string(),
            cycle: cycle.name.to_string(),
            tau_ns: point.tau,
            kappa: cycle.kappa_policy.tag(),
            parametrization: shape.tag(),
            seed: point.seed,
            fingerprint: fingerprint(cycle, config)?,
            loss_p: point.result.loss,
            success: point.result.success,
            evaluations: point.result.evaluations,
            converged: point.result.converged,
            restart_losses: point.result.restart_values.clone(),
            schedule: point.result.schedule.to_toml()?,
        };
        let dir = path.parent().expect("cache paths have a parent");
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(".{}.{}.tmp", path.file_name().unwrap().to_string_lossy(), std::process::id()));
        fs::write(&tmp, toml::to_string(&rec)?)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }
}

/// Optimizes each duration in `taus` (ascending), reusing cached points.
///
/// Segment optima are shared across durations through one [`SegmentMemo`].
pub fn loss_vs_duration_scan(
    cycle: &CycleSpec,
    taus: &[f64],
    shape: Shape,
    config: &OptimizeConfig,
    cache: Option<&ScanCache>,
) -> Result<Vec<ScanPoint>> {
    loss_vs_duration_scan_with(cycle, taus, shape, config, cache, |_| {})
}

/// As [`loss_vs_duration_scan`], calling `progress` after every point.
pub fn loss_vs_duration_scan_with(
    cycle: &CycleSpec,
    taus: &[f64],
    shape: Shape,
    config: &OptimizeConfig,
    cache: Option<&ScanCache>,
    mut progress: impl FnMut(&ScanPoint),
) -> Result<Vec<ScanPoint>> {
    if taus.is_empty() {
        return Err(Error::invalid("duration list is empty"));
    }
    if taus.windows(2).any(|w| !(w[1] > w[0])) || !(taus[0] > 0.0) {
        return Err(Error::invalid("durations must be positive and strictly ascending"));
    }
    config.validate()?;
    let mut memo = SegmentMemo::new();
    let mut out = Vec::with_capacity(taus.len());
    for &tau in taus {
        let cached = match cache {
            Some(c) => c.load(cycle, tau, shape, config)?,
            None => None,
        };
        let point = match cached {
            Some(p) => p,
            None => {
                if let Some(c) = cache.filter(|c| c.read_only) {
                    return Err(Error::MissingCache(c.path(cycle, tau, shape, config)?.display().to_string()));
                }
                let result = optimize_protocol_memo(cycle, tau, shape, config, &mut memo)?;
                let point = ScanPoint { tau, result, seed: config.simplex.seed };
                if let Some(c) = cache {
                    c.store(cycle, shape, config, &point)?;
                }
                point
            }
        };
        progress(&point);
        out.push(point);
    }
    Ok(out)
}

/// Runs scan points on `threads` workers sharing the cache.
///
/// Points are independent unless warm starts are enabled, in which case the
/// scan runs sequentially to keep results independent of scheduling.
pub fn loss_vs_duration_scan_parallel(
    cycle: &CycleSpec,
    taus: &[f64],
    shape: Shape,
    config: &OptimizeConfig,
    cache: Option<&ScanCache>,
    threads: usize,
    progress: impl Fn(&ScanPoint) + Sync,
) -> Result<Vec<ScanPoint>> {
    if threads <= 1 || config.warm_start || taus.len() < 2 {
        return loss_vs_duration_scan_with(cycle, taus, shape, config, cache, progress);
    }
    // Validates the grid and config once up front.
    if taus.windows(2).any(|w| !(w[1] > w[0])) || !(taus[0] > 0.0) {
        return Err(Error::invalid("durations must be positive and strictly ascending"));
    }
    config.validate()?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<ScanPoint>>>> = Mutex::new((0..taus.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.min(taus.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= taus.len() {
                    break;
                }
                let point = loss_vs_duration_scan_with(cycle, &taus[i..=i], shape, config, cache, &progress)
                    .map(|mut v| v.remove(0));
                let failed = point.is_err();
                slots.lock().expect("scan slots poisoned")[i] = Some(point);
                if failed {
                    next.store(taus.len(), Ordering::Relaxed);
                }
            });
        }
    });
    let slots = slots.into_inner().expect("scan slots poisoned");
    let mut out = Vec::with_capacity(taus.len());
    for slot in slots {
        match slot {
            Some(point) => out.push(point?),
            None => return Err(Error::Numerical("scan stopped before every point ran".into())),
        }
    }
    Ok(out)
}

/// Scan table as `tau_ns,loss_p,success,evaluations,seed`.
pub fn write_scan_csv<W: Write>(points: &[ScanPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tau_ns", "loss_p", "success", "evaluations", "seed"])?;
    for p in points {
        w.write_record([
            format!("{:.6}", p.tau),
            format!("{:.10}", p.result.loss),
            format!("{:.10}", p.result.success),
            p.result.evaluations.to_string(),
            p.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a scan table written by [`write_scan_csv`] as `(tau, loss)` pairs.
pub fn read_scan_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::config(format!("{}: missing column {name}", path.display())))
    };
    let (ti, li) = (col("tau_ns")?, col("loss_p")?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::config(format!("{}: bad number {:?}: {e}", path.display(), &rec[i])))
        };
        out.push((parse(ti)?, parse(li)?));
    }
    Ok(out)
}
