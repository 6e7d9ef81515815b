//! Machine-readable run, comparison, and validation reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diagnostics::{EnsembleSummary, PosteriorError};
use crate::error::Result;
use crate::linsolve::SolveReport;
use crate::problems::{DataRealization, LinearVariant};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Incomplete,
}

/// Wall-clock measurements from a monotonic clock. Kept apart from
/// everything else so reports can be compared with timing stripped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub per_iteration_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticMoments {
    pub mean_average: f64,
    pub cov_trace: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInfo {
    pub name: String,
    pub dim: usize,
    pub data: DataRealization,
    pub analytic: Option<AnalyticMoments>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointReport {
    pub iteration: usize,
    pub particles_file: String,
    pub summary: EnsembleSummary,
    pub mean_log_density: f64,
    pub posterior_error: Option<PosteriorError>,
    /// Problem-specific scalars such as mode fractions or band coverage.
    pub diagnostics: BTreeMap<String, f64>,
}

/// What happened during the update from `iteration` to `iteration + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub step_size: f64,
    pub bandwidth: Option<f64>,
    pub solve: Option<SolveReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub report_version: u32,
    pub config: RunConfig,
    pub status: RunStatus,
    pub error: Option<String>,
    pub problem: ProblemInfo,
    pub iterations_completed: usize,
    pub checkpoints: Vec<CheckpointReport>,
    pub iterations: Vec<IterationReport>,
    pub timing: Timing,
}

impl RunReport {
    pub fn final_checkpoint(&self) -> Option<&CheckpointReport> {
        self.checkpoints.last()
    }
}

pub fn parse_run_report(text: &str) -> Result<RunReport> {
    Ok(serde_json::from_str(text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub label: String,
    pub status: RunStatus,
    pub error: Option<String>,
    pub iterations_completed: usize,
    pub summary: Option<EnsembleSummary>,
    pub posterior_error: Option<PosteriorError>,
}

/// Symmetric relative differences of first and second moments, each
/// normalized by the average magnitude of the pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentDiscrepancy {
    pub a: String,
    pub b: String,
    pub mean_rel_diff: f64,
    pub cov_trace_rel_diff: f64,
    pub cov_frobenius_rel_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub report_version: u32,
    pub variants: Vec<VariantSummary>,
    pub pairwise: Vec<MomentDiscrepancy>,
    /// Seconds per variant, by label.
    pub timing: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub values: Vec<Option<f64>>,
}

/// Theoretical versus estimated posterior-mean averages and covariance
/// traces, one column per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationTables {
    pub report_version: u32,
    pub variant: LinearVariant,
    pub dims: Vec<usize>,
    pub n: usize,
    pub iterations: usize,
    pub seed: u64,
    pub mean_average: Vec<TableRow>,
    pub trace: Vec<TableRow>,
    pub errors: BTreeMap<String, Vec<Option<PosteriorError>>>,
    pub failures: Vec<String>,
    pub timing: BTreeMap<String, f64>,
}

impl ValidationTables {
    pub fn row<'a>(rows: &'a [TableRow], label: &str) -> Option<&'a TableRow> {
        rows.iter().find(|r| r.label == label)
    }
}
