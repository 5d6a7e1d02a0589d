//! Derivative-free search over pulse schedules.

pub mod nelder_mead;
pub mod protocol;
pub mod robustness;
pub mod scan;

pub use nelder_mead::{nelder_mead, SimplexConfig, SimplexOutcome};
pub use protocol::{
    constant_drive_baseline, full_loss, optimize_joint, optimize_protocol, optimize_protocol_memo, optimize_segment, OptimizationResult,
    OptimizeConfig, SegmentMemo,
};
pub use robustness::{robustness_study, robustness_study_threaded, write_robustness_csv, RobustnessReport, DEFAULT_RELATIVE_SD};
pub use scan::{loss_vs_duration_scan, loss_vs_duration_scan_parallel, loss_vs_duration_scan_with, read_scan_csv, write_scan_csv, ScanCache, ScanPoint};
