//! JSON report written by `solve` and `certify`.

use serde::{Deserialize, Serialize};
use slamcert::certificate::CertificateReport;

/// Bumped whenever a field is renamed or removed.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub assembly_s: f64,
    pub solve_s: f64,
    pub certify_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateSection {
    pub trace_lambda: f64,
    pub primal_cost: f64,
    pub min_eig: f64,
    pub min_eig_normalized: f64,
    pub threshold: f64,
    pub corank_estimate: usize,
    pub pass: bool,
    pub asymmetry: f64,
    pub stationarity_residual: f64,
    pub lanczos_iters: usize,
    pub dense_fallback: bool,
}

impl CertificateSection {
    pub fn new(c: &CertificateReport, threshold: f64) -> Self {
        Self {
            trace_lambda: c.dual_value,
            primal_cost: c.primal_cost,
            min_eig: c.min_eig,
            min_eig_normalized: c.min_eig_normalized,
            threshold,
            corank_estimate: c.corank_estimate,
            pass: c.pass,
            asymmetry: c.asymmetry,
            stationarity_residual: c.stationarity_residual,
            lanczos_iters: c.lanczos_iters,
            dense_fallback: c.dense_fallback,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub variant: String,
    pub n_poses: usize,
    pub n_landmarks: usize,
    /// Full cost of the reported state.
    pub final_cost: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    pub timings: Timings,
    /// Present when a certificate was computed.
    #[serde(flatten, default)]
    pub certificate: Option<CertificateSection>,
}

impl Report {
    pub fn new(command: &str, variant: &str, n_poses: usize, n_landmarks: usize, final_cost: f64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            variant: variant.to_string(),
            n_poses,
            n_landmarks,
            final_cost,
            iterations: None,
            converged: None,
            seed: None,
            timings: Timings::default(),
            certificate: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
