//! JSON experiment configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{parse, ExprError};
use crate::fefferman_phong::BlockOptions;
use crate::manifold::{lattice_centers, wrap1, AtlasOptions};
use crate::operator::{OperatorError, OperatorSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported schema_version {found}, expected {SCHEMA_VERSION}")]
    Schema { found: u32 },
    #[error("{field}: {source}")]
    Expr { field: String, source: ExprError },
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub operator: OperatorBlock,
    pub geometry: GeometryBlock,
    pub walk: WalkBlock,
    #[serde(default)]
    pub analysis: AnalysisBlock,
    #[serde(default)]
    pub output: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OperatorBlock {
    pub name: String,
    pub dimension: usize,
    /// Rows of the principal coefficient matrix.
    pub coefficients: Vec<Vec<String>>,
    #[serde(default)]
    pub drift: Vec<String>,
    #[serde(default = "zero")]
    pub potential: String,
    pub epsilon: f64,
}

fn zero() -> String {
    "0".into()
}

/// Chart centers: a product lattice or, in two dimensions, columns with
/// their own number of centers along x2.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Centers {
    Lattice { counts: Vec<usize>, offset: Vec<f64> },
    Columns(Vec<Column>),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Column {
    pub x1: f64,
    pub count: usize,
    #[serde(default)]
    pub offset: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GeometryBlock {
    pub rho: f64,
    pub centers: Centers,
    /// Grid cells per axis for the Markov matrix.
    pub grid: usize,
    #[serde(default = "default_samples")]
    pub samples_per_axis: usize,
    #[serde(default = "default_c_star")]
    pub c_star: f64,
    #[serde(default = "default_max_side")]
    pub max_side: f64,
    #[serde(default = "default_coverage")]
    pub coverage_resolution: usize,
}

fn default_samples() -> usize {
    64
}
fn default_c_star() -> f64 {
    1.5
}
fn default_max_side() -> f64 {
    0.3
}
fn default_coverage() -> usize {
    200
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct WalkBlock {
    pub h: Vec<f64>,
    pub steps: usize,
    pub ensemble: usize,
    pub seed: u64,
    pub start: Vec<f64>,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

fn default_bins() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisBlock {
    pub t_nodes: usize,
    pub zeta_points: usize,
    pub c_prime: f64,
    pub eigen_band: f64,
    /// Kernel ball radius as a fraction of h; by default half the slowest
    /// chart speed.
    pub kernel_delta: Option<f64>,
    /// Every `tv_stride`-th grid node per axis is a TV start point.
    pub tv_stride: usize,
    /// Step size used for the TV decay fit.
    pub tv_h: Option<f64>,
    /// Finer grid for the gap-scaling fit, solved by Lanczos.
    pub gap_grid: Option<usize>,
    pub ballbox_resolution: usize,
    pub ballbox_center: Option<Vec<f64>>,
    pub test_functions: Vec<String>,
    pub test_pairs: Vec<(String, String)>,
}

impl Default for AnalysisBlock {
    fn default() -> Self {
        Self {
            t_nodes: 8,
            zeta_points: 24,
            c_prime: 0.1,
            eigen_band: 0.9,
            kernel_delta: None,
            tv_stride: 1,
            tv_h: None,
            gap_grid: None,
            ballbox_resolution: 96,
            ballbox_center: None,
            test_functions: Vec::new(),
            test_pairs: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        text.parse()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Schema { found: self.schema_version });
        }
        let n = self.operator.dimension;
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if n == 0 || n > 4 {
            return bad("operator.dimension must be in 1..=4");
        }
        if self.operator.coefficients.len() != n || self.operator.coefficients.iter().any(|r| r.len() != n) {
            return bad("operator.coefficients must be dimension × dimension");
        }
        if !(self.geometry.rho > 0.0 && self.geometry.rho < 0.5) {
            return bad("geometry.rho must be in (0, 0.5)");
        }
        match &self.geometry.centers {
            Centers::Lattice { counts, offset } => {
                if counts.len() != n || offset.len() != n || counts.contains(&0) {
                    return bad("geometry.centers.lattice needs one positive count and offset per axis");
                }
            }
            Centers::Columns(cols) => {
                if n != 2 || cols.is_empty() || cols.iter().any(|c| c.count == 0) {
                    return bad("geometry.centers.columns needs dimension 2 and positive counts");
                }
            }
        }
        if self.geometry.grid < 16 {
            return bad("geometry.grid must be at least 16");
        }
        if self.walk.h.is_empty() || self.walk.h.iter().any(|h| !(*h > 0.0)) {
            return bad("walk.h must be a nonempty list of positive step sizes");
        }
        if self.walk.start.len() != n {
            return bad("walk.start must have one coordinate per dimension");
        }
        if self.walk.steps == 0 || self.walk.ensemble == 0 || self.walk.bins == 0 {
            return bad("walk.steps, walk.ensemble and walk.bins must be positive");
        }
        if self.analysis.t_nodes < 8 {
            return bad("analysis.t_nodes must be at least 8");
        }
        if self.analysis.gap_grid.is_some_and(|g| g < 16) {
            return bad("analysis.gap_grid must be at least 16");
        }
        if self.analysis.tv_stride == 0 || self.analysis.zeta_points < 2 {
            return bad("analysis.tv_stride and analysis.zeta_points out of range");
        }
        self.operator()?;
        for (i, f) in self.analysis.test_functions.iter().enumerate() {
            expr(&format!("analysis.test_functions[{i}]"), f)?;
        }
        for (i, (f, g)) in self.analysis.test_pairs.iter().enumerate() {
            expr(&format!("analysis.test_pairs[{i}].0"), f)?;
            expr(&format!("analysis.test_pairs[{i}].1"), g)?;
        }
        Ok(())
    }

    pub fn operator(&self) -> Result<OperatorSpec, ConfigError> {
        let op = &self.operator;
        let a2 = op
            .coefficients
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(j, s)| expr(&format!("operator.coefficients[{i}][{j}]"), s))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let b = op
            .drift
            .iter()
            .enumerate()
            .map(|(i, s)| expr(&format!("operator.drift[{i}]"), s))
            .collect::<Result<Vec<_>, _>>()?;
        let d = expr("operator.potential", &op.potential)?;
        Ok(OperatorSpec::new(op.name.clone(), a2, b, d, op.epsilon)?)
    }

    pub fn centers(&self) -> Vec<Vec<f64>> {
        match &self.geometry.centers {
            Centers::Lattice { counts, offset } => lattice_centers(counts, offset),
            Centers::Columns(cols) => cols
                .iter()
                .flat_map(|c| {
                    (0..c.count).map(move |k| vec![wrap1(c.x1), wrap1(c.offset + k as f64 / c.count as f64)])
                })
                .collect(),
        }
    }

    pub fn block_options(&self) -> BlockOptions {
        BlockOptions {
            samples_per_axis: self.geometry.samples_per_axis,
            c_star: self.geometry.c_star,
            max_side: self.geometry.max_side,
        }
    }

    pub fn atlas_options(&self) -> AtlasOptions {
        AtlasOptions { block: self.block_options(), coverage_resolution: self.geometry.coverage_resolution }
    }
}

impl std::str::FromStr for ExperimentConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn expr(field: &str, text: &str) -> Result<crate::expr::Expr, ConfigError> {
    parse(text).map_err(|source| ConfigError::Expr { field: field.into(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "name": "t",
        "operator": {"name": "laplacian", "dimension": 1, "coefficients": [["1"]], "epsilon": 1.0},
        "geometry": {"rho": 0.25, "centers": {"lattice": {"counts": [4], "offset": [0.125]}}, "grid": 64},
        "walk": {"h": [0.2], "steps": 10, "ensemble": 4, "seed": 1, "start": [0.3]}
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: ExperimentConfig = MINIMAL.parse().unwrap();
        assert_eq!(cfg.analysis.t_nodes, 8);
        assert_eq!(cfg.centers().len(), 4);
        assert_eq!(cfg.operator().unwrap().n, 1);
    }

    #[test]
    fn wrong_schema_rejected() {
        let text = MINIMAL.replace("\"schema_version\": 1", "\"schema_version\": 7");
        assert!(matches!(text.parse::<ExperimentConfig>(), Err(ConfigError::Schema { found: 7 })));
    }

    #[test]
    fn malformed_expression_reports_offset() {
        let text = MINIMAL.replace("[[\"1\"]]", "[[\"1 + * x1\"]]");
        let err = text.parse::<ExperimentConfig>().unwrap_err();
        match err {
            ConfigError::Expr { field, source: ExprError::Syntax { offset, .. } } => {
                assert_eq!(field, "operator.coefficients[0][0]");
                assert_eq!(offset, 4);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_field_rejected() {
        let text = MINIMAL.replace("\"name\": \"t\",", "\"name\": \"t\", \"extra\": 3,");
        assert!(matches!(text.parse::<ExperimentConfig>(), Err(ConfigError::Json(_))));
    }

    #[test]
    fn columns_expand_per_column() {
        let text = MINIMAL
            .replace("\"dimension\": 1, \"coefficients\": [[\"1\"]]", "\"dimension\": 2, \"coefficients\": [[\"1\",\"0\"],[\"0\",\"1\"]]")
            .replace("{\"lattice\": {\"counts\": [4], \"offset\": [0.125]}}", "{\"columns\": [{\"x1\": 0.0, \"count\": 3}, {\"x1\": 0.5, \"count\": 2, \"offset\": 0.25}]}")
            .replace("\"start\": [0.3]", "\"start\": [0.3, 0.3]");
        let cfg: ExperimentConfig = text.parse().unwrap();
        let c = cfg.centers();
        assert_eq!(c.len(), 5);
        assert_eq!(c[3], vec![0.5, 0.25]);
        assert_eq!(c[4], vec![0.5, 0.75]);
    }
}
