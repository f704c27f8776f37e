//! Machine-readable experiment reports and their export formats.
//!
//! Reports embed the configuration they were produced from, carry no
//! wall-clock data, and use only order-stable containers, so identical
//! (config, seed) runs serialize to byte-identical JSON.

use super::config::ExperimentConfig;
use crate::coeffs::ValidationReport;
use crate::error::Result;
use crate::fbsde::EnsembleStat;
use crate::homog::EllipticityReport;
use crate::pde::{MollificationIndex, SolveStats};
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize)]
pub struct EnvironmentStamp {
    pub crate_version: String,
    pub requested_threads: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellsStageReport {
    pub cache_key: String,
    /// informational only; excluded from the serialized report so cold and
    /// warm runs produce identical bytes
    #[serde(skip)]
    pub cache_hit: bool,
    pub n_entries: usize,
    pub min_density: f64,
    pub max_invariant_residual: f64,
    pub max_poisson_residual: f64,
    pub max_centering_shift: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TableStageReport {
    pub cache_key: String,
    #[serde(skip)]
    pub cache_hit: bool,
    pub ellipticity: EllipticityReport,
    /// (y, ᾱ(y)) samples along the first axis
    pub alpha_samples: Vec<(f64, f64)>,
    pub provenance: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct FieldReport {
    pub cache_key: String,
    #[serde(skip)]
    pub cache_hit: bool,
    pub stats: SolveStats,
    /// discrete maximum-principle surrogate: sup|θ| per slice stays under
    /// sup|H| + (T − t) sup|v̄|
    pub bound_monitor_ok: bool,
    pub grad_holder_quotient: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PdeStageReport {
    pub limit: FieldReport,
    pub regularized: Vec<(u32, FieldReport)>,
    pub oscillatory: Vec<(u32, FieldReport)>,
    pub m_selection: Vec<MollificationIndex>,
    /// profiles θ(0, ·) keyed by field name, as (x, value) pairs
    pub profiles: BTreeMap<String, Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub eps_k: u32,
    pub n_reg: u32,
    pub metrics: BTreeMap<String, EnsembleStat>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerdictRow {
    pub metric: String,
    /// fixed regularization level, when the metric depends on it
    pub n_reg: Option<u32>,
    pub verdict: crate::fbsde::DecayVerdict,
    pub values: Vec<EnsembleStat>,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub verdicts: Vec<VerdictRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub crate_name: String,
    pub environment: EnvironmentStamp,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub validation: ValidationReport,
    pub cells: Option<CellsStageReport>,
    pub table: Option<TableStageReport>,
    pub pde: Option<PdeStageReport>,
    pub sweep: Option<SweepReport>,
    pub checks: Vec<CheckOutcome>,
    pub overall_pass: bool,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Sweep table as CSV: one row per (ε, n) with sorted metric columns.
    pub fn to_csv(&self) -> String {
        let Some(sweep) = &self.sweep else {
            return String::from("eps_k,n_reg\n");
        };
        let mut names: Vec<String> = Vec::new();
        for row in &sweep.rows {
            for k in row.metrics.keys() {
                if !names.contains(k) {
                    names.push(k.clone());
                }
            }
        }
        names.sort();
        let mut out = String::from("eps_k,n_reg");
        for n in &names {
            out.push_str(&format!(",{n},{n}_se"));
        }
        out.push('\n');
        for row in &sweep.rows {
            out.push_str(&format!("{},{}", row.eps_k, row.n_reg));
            for n in &names {
                match row.metrics.get(n) {
                    Some(s) => out.push_str(&format!(",{:.12e},{:.12e}", s.value, s.se)),
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Long-format plot data: metric rows and θ(0, ·) profile samples.
    pub fn to_plotdata(&self) -> String {
        let mut out = String::from("kind,name,eps_k,n_reg,x,value,se\n");
        if let Some(sweep) = &self.sweep {
            for row in &sweep.rows {
                for (name, s) in &row.metrics {
                    out.push_str(&format!(
                        "metric,{name},{},{},,{:.12e},{:.12e}\n",
                        row.eps_k, row.n_reg, s.value, s.se
                    ));
                }
            }
        }
        if let Some(pde) = &self.pde {
            for (name, profile) in &pde.profiles {
                for (x, v) in profile {
                    out.push_str(&format!("profile,{name},,,{x:.12e},{v:.12e},\n"));
                }
            }
        }
        out
    }
}
