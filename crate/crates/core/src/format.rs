//! JSON file formats: network files, system/scenario configs and design
//! reports. Field names are fixed; unknown keys are rejected.

use crate::expr::parse_expression;
use crate::nn::{ActivationKind, Layer, NeuralNetwork, NnError};
use crate::plant::{
    BoundingDecomposition, FSpace, InputMode, LipschitzSystem, PlantError, Scenario,
};
use crate::synthesis::{
    DesignReport, Diagnostics, GainDesign, GainMode, SMatrixChain, StabilityCertificate,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error for {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("network error: {0}")]
    Nn(#[from] NnError),
    #[error("{0}")]
    Plant(#[from] PlantError),
    #[error("expression error: {0}")]
    Expr(#[from] crate::expr::ExprError),
}

// ---------------------------------------------------------------------------
// network files

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub layers: Vec<LayerFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerFile {
    pub activation: String,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, ConfigError> {
    if rows.is_empty() {
        return Err(ConfigError::Invalid(format!("{what}: no rows")));
    }
    let cols = rows[0].len();
    if cols == 0 {
        return Err(ConfigError::Invalid(format!("{what}: empty rows")));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != cols {
            return Err(ConfigError::Invalid(format!(
                "{what}: ragged rows (row {} has {} entries, row 1 has {cols})",
                i + 1,
                row.len()
            )));
        }
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

impl NetworkFile {
    pub fn to_network(&self) -> Result<NeuralNetwork, ConfigError> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let weight = matrix_from_rows(&layer.weights, &format!("layer {} weights", idx + 1))?;
            let activation = ActivationKind::from_name(&layer.activation)?;
            layers.push(Layer::new(
                weight,
                DVector::from_vec(layer.bias.clone()),
                activation,
            )?);
        }
        Ok(NeuralNetwork::new(layers)?)
    }

    pub fn from_network(nn: &NeuralNetwork) -> Self {
        NetworkFile {
            layers: nn
                .layers()
                .iter()
                .map(|l| LayerFile {
                    activation: l.activation.name().to_string(),
                    weights: matrix_to_rows(&l.weight),
                    bias: l.bias.iter().copied().collect(),
                })
                .collect(),
        }
    }
}

pub fn load_network(path: &Path) -> Result<NeuralNetwork, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: NetworkFile = serde_json::from_str(&text).map_err(|source| ConfigError::Json {
        path: path.display().to_string(),
        source,
    })?;
    file.to_network()
}

// ---------------------------------------------------------------------------
// system / scenario configs

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkSpec {
    Path(String),
    Inline(NetworkFile),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    /// Direct input feedthrough; zero when omitted.
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
    pub f: Vec<String>,
    /// `"state"` (default) or `"output"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_space: Option<String>,
    pub beta: f64,
    pub network: NetworkSpec,
    pub nn_input_mode: String,
    /// 1-based input indices visible to the network (output-driven mode).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nn_visible_inputs: Option<Vec<usize>>,
    pub embedding: Vec<Vec<f64>>,
    pub decomposition: DecompositionFile,
    pub scenario: ScenarioFile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompositionFile {
    pub f_lower: Vec<String>,
    pub f_upper: Vec<String>,
    pub gamma_lower_1: f64,
    pub gamma_lower_2: f64,
    pub gamma_upper_1: f64,
    pub gamma_upper_2: f64,
    pub rho_lower: Vec<f64>,
    pub rho_upper: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub u: Vec<String>,
    pub u_lower: Vec<f64>,
    pub u_upper: Vec<f64>,
    pub x0: Vec<f64>,
    pub x0_lower: Vec<f64>,
    pub x0_upper: Vec<f64>,
    pub t_end: f64,
    pub dt: f64,
}

fn parse_exprs(texts: &[String], what: &str) -> Result<Vec<crate::expr::Expr>, ConfigError> {
    texts
        .iter()
        .enumerate()
        .map(|(i, s)| {
            parse_expression(s).map_err(|e| {
                ConfigError::Invalid(format!("{what} component {}: {e}", i + 1))
            })
        })
        .collect()
}

impl ConfigFile {
    /// Builds the domain objects, resolving a network path relative to
    /// `base_dir`.
    pub fn to_domain(
        &self,
        base_dir: &Path,
    ) -> Result<(LipschitzSystem, BoundingDecomposition, Scenario), ConfigError> {
        let a = matrix_from_rows(&self.a, "A")?;
        let c = matrix_from_rows(&self.c, "C")?;
        let n_u = self.scenario.u.len();
        let b = match &self.b {
            Some(rows) => {
                let b = matrix_from_rows(rows, "B")?;
                if b.ncols() != n_u {
                    return Err(ConfigError::Invalid(format!(
                        "B has {} columns but the scenario defines {n_u} inputs",
                        b.ncols()
                    )));
                }
                b
            }
            None => DMatrix::zeros(a.nrows(), n_u),
        };
        let f_space = match self.f_space.as_deref() {
            None | Some("state") => FSpace::State,
            Some("output") => FSpace::Output,
            Some(other) => {
                return Err(ConfigError::Invalid(format!(
                    "f_space must be `state` or `output`, got `{other}`"
                )))
            }
        };
        let nn = match &self.network {
            NetworkSpec::Path(rel) => load_network(&base_dir.join(rel))?,
            NetworkSpec::Inline(file) => file.to_network()?,
        };
        let mode = match self.nn_input_mode.as_str() {
            "state_driven" => InputMode::StateDriven,
            "output_driven" => InputMode::OutputDriven,
            other => {
                return Err(ConfigError::Invalid(format!(
                    "nn_input_mode must be `state_driven` or `output_driven`, got `{other}`"
                )))
            }
        };
        let visible = match &self.nn_visible_inputs {
            Some(list) => {
                let mut v = Vec::with_capacity(list.len());
                for &idx in list {
                    if idx == 0 {
                        return Err(ConfigError::Invalid(
                            "nn_visible_inputs are 1-based; 0 is invalid".to_string(),
                        ));
                    }
                    v.push(idx - 1);
                }
                v
            }
            None => Vec::new(),
        };
        let embedding = matrix_from_rows(&self.embedding, "embedding")?;
        let system = LipschitzSystem::new(
            a,
            c,
            b,
            parse_exprs(&self.f, "f")?,
            f_space,
            self.beta,
            nn,
            mode,
            visible,
            embedding,
        )?;
        let decomp = BoundingDecomposition::new(
            parse_exprs(&self.decomposition.f_lower, "f_lower")?,
            parse_exprs(&self.decomposition.f_upper, "f_upper")?,
            self.decomposition.gamma_lower_1,
            self.decomposition.gamma_lower_2,
            self.decomposition.gamma_upper_1,
            self.decomposition.gamma_upper_2,
            DVector::from_vec(self.decomposition.rho_lower.clone()),
            DVector::from_vec(self.decomposition.rho_upper.clone()),
        )?;
        let scenario = Scenario::new(
            parse_exprs(&self.scenario.u, "u")?,
            DVector::from_vec(self.scenario.u_lower.clone()),
            DVector::from_vec(self.scenario.u_upper.clone()),
            DVector::from_vec(self.scenario.x0.clone()),
            DVector::from_vec(self.scenario.x0_lower.clone()),
            DVector::from_vec(self.scenario.x0_upper.clone()),
            self.scenario.t_end,
            self.scenario.dt,
        )?;
        Ok((system, decomp, scenario))
    }
}

/// Loads a config file and builds the domain objects. Network paths are
/// resolved relative to the config file's directory.
pub fn load_config(
    path: &Path,
) -> Result<(LipschitzSystem, BoundingDecomposition, Scenario), ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: ConfigFile = serde_json::from_str(&text).map_err(|source| ConfigError::Json {
        path: path.display().to_string(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    file.to_domain(base)
}

// ---------------------------------------------------------------------------
// design reports

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub mode: String,
    pub l_lower: Vec<Vec<f64>>,
    pub l_upper: Vec<Vec<f64>>,
    pub x_diag: Vec<f64>,
    pub a: f64,
    pub u_lower: Vec<f64>,
    pub u_upper: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<ChainFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<CertificateFile>,
    pub diagnostics: DiagnosticsFile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainFile {
    pub alpha: f64,
    pub split_col: usize,
    pub s_lower: Vec<Vec<Vec<f64>>>,
    pub s_upper: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateFile {
    pub lambda: f64,
    pub big_c: f64,
    pub radius_r: f64,
    pub theta: f64,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsFile {
    pub strict_margin: f64,
    pub substitution_min_margin: Option<f64>,
}

impl ReportFile {
    pub fn from_report(report: &DesignReport) -> Self {
        ReportFile {
            mode: report.design.mode.name().to_string(),
            l_lower: matrix_to_rows(&report.design.l_lower),
            l_upper: matrix_to_rows(&report.design.l_upper),
            x_diag: report.design.x_diag.iter().copied().collect(),
            a: report.design.a,
            u_lower: report.u_lower.iter().copied().collect(),
            u_upper: report.u_upper.iter().copied().collect(),
            chain: report.chain.as_ref().map(|chain| ChainFile {
                alpha: chain.alpha,
                split_col: chain.split_col,
                s_lower: chain.s_lower.iter().map(matrix_to_rows).collect(),
                s_upper: chain.s_upper.iter().map(matrix_to_rows).collect(),
            }),
            certificate: report.certificate.as_ref().map(|c| CertificateFile {
                lambda: c.lambda,
                big_c: c.big_c,
                radius_r: c.radius_r,
                theta: c.theta,
                v: c.v.iter().copied().collect(),
            }),
            diagnostics: DiagnosticsFile {
                strict_margin: report.diagnostics.strict_margin,
                substitution_min_margin: report
                    .diagnostics
                    .substitution
                    .as_ref()
                    .map(|s| s.min_margin()),
            },
        }
    }

    /// Rebuilds a report against `system`. Gains are taken as stored, with
    /// no Metzler re-validation: a tampered report must load so the
    /// monitor can surface its violations; `check` re-verifies separately.
    pub fn to_report(&self, system: &LipschitzSystem) -> Result<DesignReport, ConfigError> {
        let mode = match self.mode.as_str() {
            "metzler_only" => GainMode::MetzlerOnly,
            "stable_state_driven" => GainMode::StableStateDriven,
            "stable_output_driven" => GainMode::StableOutputDriven,
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown design mode `{other}`"
                )))
            }
        };
        let l_lower = matrix_from_rows(&self.l_lower, "l_lower")?;
        let l_upper = matrix_from_rows(&self.l_upper, "l_upper")?;
        let n = system.num_states();
        let m = system.num_outputs();
        for (name, l) in [("l_lower", &l_lower), ("l_upper", &l_upper)] {
            if l.nrows() != n || l.ncols() != m {
                return Err(ConfigError::Invalid(format!(
                    "{name} must be {n}x{m}, got {}x{}",
                    l.nrows(),
                    l.ncols()
                )));
            }
        }
        if self.x_diag.len() != n {
            return Err(ConfigError::Invalid(format!(
                "x_diag must have {n} entries, got {}",
                self.x_diag.len()
            )));
        }
        let design = GainDesign::from_raw_parts(
            l_lower,
            l_upper,
            DVector::from_vec(self.x_diag.clone()),
            self.a,
            mode,
            system.a_matrix.clone(),
            system.c_matrix.clone(),
        );
        let aux_pair = crate::nn::make_auxiliary_pair(&system.nn);
        let chain = match &self.chain {
            Some(file) => {
                let s_lower: Result<Vec<_>, _> = file
                    .s_lower
                    .iter()
                    .enumerate()
                    .map(|(i, rows)| matrix_from_rows(rows, &format!("chain lower level {i}")))
                    .collect();
                let s_upper: Result<Vec<_>, _> = file
                    .s_upper
                    .iter()
                    .enumerate()
                    .map(|(i, rows)| matrix_from_rows(rows, &format!("chain upper level {i}")))
                    .collect();
                Some(
                    SMatrixChain::from_levels(
                        s_lower?,
                        s_upper?,
                        &aux_pair,
                        file.alpha,
                        file.split_col,
                        crate::synthesis::CHECK_TOL,
                    )
                    .map_err(|e| ConfigError::Invalid(format!("stored chain invalid: {e}")))?,
                )
            }
            None => None,
        };
        let certificate = self.certificate.as_ref().map(|c| StabilityCertificate {
            lambda: c.lambda,
            big_c: c.big_c,
            radius_r: c.radius_r,
            theta: c.theta,
            v: DVector::from_vec(c.v.clone()),
        });
        if self.u_lower.len() != system.num_inputs() || self.u_upper.len() != system.num_inputs()
        {
            return Err(ConfigError::Invalid(
                "report input envelope does not match the system input count".to_string(),
            ));
        }
        Ok(DesignReport {
            design,
            chain,
            certificate,
            aux_pair,
            u_lower: DVector::from_vec(self.u_lower.clone()),
            u_upper: DVector::from_vec(self.u_upper.clone()),
            diagnostics: Diagnostics {
                strict_margin: self.diagnostics.strict_margin,
                ..Default::default()
            },
        })
    }
}

pub fn save_report(report: &DesignReport, path: &Path) -> Result<(), ConfigError> {
    let file = ReportFile::from_report(report);
    let text = serde_json::to_string_pretty(&file).map_err(|source| ConfigError::Json {
        path: path.display().to_string(),
        source,
    })?;
    std::fs::write(path, text + "\n").map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_report(path: &Path, system: &LipschitzSystem) -> Result<DesignReport, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: ReportFile = serde_json::from_str(&text).map_err(|source| ConfigError::Json {
        path: path.display().to_string(),
        source,
    })?;
    file.to_report(system)
}
