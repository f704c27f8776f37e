//! Declarative experiment configuration (TOML).
//!
//! One file fully determines a run: coefficients (preset name or expression
//! strings), structural constants, grids, cell/table/PDE/MC settings and the
//! sweep lists. Exact key names are fixed here; ε entries are written as the
//! integer reciprocals `eps_k`. The seed is mandatory — there is no silent
//! default.

use crate::cell::CenteringMode;
use crate::coeffs::{CoefficientSpec, Constants};
use crate::error::{HomError, Result};
use crate::expr::Expr;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub coefficients: CoefficientsSection,
    #[serde(default)]
    pub constants: Option<ConstantsSection>,
    pub grid: GridSection,
    #[serde(default)]
    pub cell: CellSection,
    #[serde(default)]
    pub table: TableSection,
    pub pde: PdeSection,
    pub mc: McSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct CoefficientsSection {
    /// catalog preset name; mutually exclusive with the expression fields
    #[serde(default)]
    pub preset: Option<String>,
    /// P×P row-major expressions for σ
    #[serde(default)]
    pub sigma: Vec<String>,
    #[serde(default)]
    pub b: Vec<String>,
    #[serde(default)]
    pub e: Vec<String>,
    #[serde(default)]
    pub c: Vec<String>,
    #[serde(default)]
    pub f: Vec<String>,
    #[serde(default)]
    pub h: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstantsSection {
    pub k: f64,
    pub lambda: f64,
    #[serde(rename = "Lambda")]
    pub big_lambda: f64,
    /// sampled nondecreasing map K as (radius, value) pairs
    #[serde(default)]
    pub k_map: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSection {
    pub p_dim: usize,
    pub q_dim: usize,
    /// torus nodes per axis for cell problems
    pub n_cell: usize,
    /// spatial nodes per axis for the limit/regularized PDE solves
    pub m_pde: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSection {
    pub y_min: f64,
    pub y_max: f64,
    pub y_nodes: usize,
    pub comp_tol: f64,
    pub residual_tol: f64,
    pub h_y: f64,
    /// "auto" or "strict"
    pub centering: String,
    /// sample points per axis for hypothesis validation
    pub validation_density: usize,
}

impl Default for CellSection {
    fn default() -> Self {
        CellSection {
            y_min: -2.0,
            y_max: 2.0,
            y_nodes: 33,
            comp_tol: 1e-8,
            residual_tol: 1e-9,
            h_y: 1e-3,
            centering: "auto".into(),
            validation_density: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableSection {
    pub z_min: f64,
    pub z_max: f64,
    pub z_nodes: usize,
}

impl Default for TableSection {
    fn default() -> Self {
        TableSection {
            z_min: -5.0,
            z_max: 5.0,
            z_nodes: 9,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PdeSection {
    pub t_end: f64,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default = "default_atol")]
    pub atol: f64,
    #[serde(default = "default_dt_init")]
    pub dt_init: f64,
    #[serde(default = "default_dt_min")]
    pub dt_min: f64,
    #[serde(default = "default_true")]
    pub dealias: bool,
}

fn default_rtol() -> f64 {
    1e-8
}
fn default_atol() -> f64 {
    1e-10
}
fn default_dt_init() -> f64 {
    1e-6
}
fn default_dt_min() -> f64 {
    1e-8
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McSection {
    pub t0: f64,
    pub x0: Vec<f64>,
    pub n_paths: usize,
    pub n_steps: usize,
    /// stored-node stride; 0 selects an automatic value targeting ~128 nodes
    #[serde(default)]
    pub store_every: usize,
    /// mandatory: no silent default
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SweepSection {
    /// ε values as integer reciprocals 1/k
    #[serde(default)]
    pub eps_k: Vec<u32>,
    #[serde(default)]
    pub n_reg: Vec<u32>,
    #[serde(default)]
    pub m_candidates: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputSection {
    pub dir: String,
    pub formats: Vec<String>,
    pub raw_paths: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "out".into(),
            formats: vec!["json".into()],
            raw_paths: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(src: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(src).map_err(|e| HomError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.p_dim == 0 || self.grid.q_dim == 0 {
            return Err(HomError::Config("p_dim and q_dim must be positive".into()));
        }
        if self.mc.x0.len() != self.grid.p_dim {
            return Err(HomError::Config("mc.x0 length must equal p_dim".into()));
        }
        for &k in &self.sweep.eps_k {
            if k == 0 {
                return Err(HomError::Config("eps_k entries must be positive integers".into()));
            }
        }
        if !matches!(self.cell.centering.as_str(), "auto" | "strict") {
            return Err(HomError::Config(
                "cell.centering must be \"auto\" or \"strict\"".into(),
            ));
        }
        Ok(())
    }

    pub fn centering_mode(&self) -> CenteringMode {
        match self.cell.centering.as_str() {
            "strict" => CenteringMode::Strict,
            _ => CenteringMode::Auto,
        }
    }

    /// Build the coefficient spec from a preset name or expression strings.
    pub fn to_spec(&self) -> Result<CoefficientSpec> {
        if let Some(name) = &self.coefficients.preset {
            let spec = CoefficientSpec::preset(name)?;
            if spec.p_dim != self.grid.p_dim || spec.q_dim != self.grid.q_dim {
                return Err(HomError::Config(format!(
                    "preset `{name}` has P = {}, Q = {} but the grid section says P = {}, Q = {}",
                    spec.p_dim, spec.q_dim, self.grid.p_dim, self.grid.q_dim
                )));
            }
            return Ok(spec);
        }
        let p = self.grid.p_dim;
        let q = self.grid.q_dim;
        let parse_all = |name: &str, srcs: &[String], want: usize| -> Result<Vec<Expr>> {
            if srcs.len() != want {
                return Err(HomError::Config(format!(
                    "coefficients.{name} needs {want} expressions, got {}",
                    srcs.len()
                )));
            }
            srcs.iter()
                .map(|s| {
                    Expr::parse(s).map_err(|e| {
                        HomError::Config(format!("coefficients.{name}: {e}"))
                    })
                })
                .collect()
        };
        let consts = self.constants.as_ref().ok_or_else(|| {
            HomError::Config("a [constants] section is required with explicit coefficients".into())
        })?;
        let k_map = if consts.k_map.is_empty() {
            vec![(0.0, 1.0), (10.0, 1.0)]
        } else {
            consts.k_map.clone()
        };
        CoefficientSpec::new(
            p,
            q,
            parse_all("sigma", &self.coefficients.sigma, p * p)?,
            parse_all("b", &self.coefficients.b, p)?,
            parse_all("e", &self.coefficients.e, q)?,
            parse_all("c", &self.coefficients.c, p)?,
            parse_all("f", &self.coefficients.f, q)?,
            parse_all("h", &self.coefficients.h, q)?,
            Constants {
                k: consts.k,
                lambda: consts.lambda,
                big_lambda: consts.big_lambda,
                k_map,
            },
        )
    }

    /// Effective stored-node stride for the Monte Carlo layer.
    pub fn store_every(&self) -> usize {
        if self.mc.store_every > 0 {
            return self.mc.store_every;
        }
        let target = 128usize;
        let mut stride = (self.mc.n_steps / target).max(1);
        while self.mc.n_steps % stride != 0 {
            stride -= 1;
        }
        stride
    }

    /// Content hash of the full configuration (canonical JSON).
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Content hash of a subset of sections, for cache keys.
    pub fn section_hash(&self, sections: &[&str]) -> String {
        let mut hasher = Sha256::new();
        for s in sections {
            let val = match *s {
                "coefficients" => serde_json::to_string(&self.coefficients),
                "constants" => serde_json::to_string(&self.constants),
                "grid" => serde_json::to_string(&self.grid),
                "cell" => serde_json::to_string(&self.cell),
                "table" => serde_json::to_string(&self.table),
                "pde" => serde_json::to_string(&self.pde),
                "mc" => serde_json::to_string(&self.mc),
                "sweep" => serde_json::to_string(&self.sweep),
                _ => continue,
            }
            .expect("section serializes");
            hasher.update(s.as_bytes());
            hasher.update(val.as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const SAMPLE: &str = r#"
[coefficients]
preset = "harmonic-1d"

[grid]
p_dim = 1
q_dim = 1
n_cell = 64
m_pde = 64

[pde]
t_end = 0.25

[mc]
t0 = 0.0
x0 = [0.1]
n_paths = 100
n_steps = 64
seed = 7

[sweep]
eps_k = [4, 8]
n_reg = [2, 4]
m_candidates = [2, 4, 8]
"#;

    #[test]
    fn parses_and_hashes() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.coefficients.preset.as_deref(), Some("harmonic-1d"));
        assert_eq!(cfg.sweep.eps_k, vec![4, 8]);
        let h1 = cfg.config_hash();
        let h2 = cfg.config_hash();
        assert_eq!(h1, h2);
        let spec = cfg.to_spec().unwrap();
        assert_eq!(spec.p_dim, 1);
    }

    #[test]
    fn missing_seed_is_an_error() {
        let bad = SAMPLE.replace("seed = 7", "");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn explicit_coefficients() {
        let src = r#"
[coefficients]
sigma = ["1"]
b = ["0"]
e = ["0"]
c = ["0"]
f = ["0"]
h = ["sin(2*pi*x)"]

[constants]
k = 7.0
lambda = 1.0
Lambda = 2.0

[grid]
p_dim = 1
q_dim = 1
n_cell = 32
m_pde = 32

[pde]
t_end = 0.1

[mc]
t0 = 0.0
x0 = [0.0]
n_paths = 10
n_steps = 32
seed = 1
"#;
        let cfg = ExperimentConfig::from_toml(src).unwrap();
        let spec = cfg.to_spec().unwrap();
        assert!((spec.eval_a(&[0.3], &[0.0])[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bad_eps_rejected() {
        let bad = SAMPLE.replace("eps_k = [4, 8]", "eps_k = [0]");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }
}
