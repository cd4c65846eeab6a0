use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{IntegrationConfig, Optimizer, OptimizerKind};
use crate::error::{Error, Result};
use crate::kernels::ActivationKind;
use crate::state::{InitNorm, InitOptions, TeacherConfig};

/// Thresholds that turn a terminal state into a label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationThresholds {
    /// Runs with terminal loss below this reached the global minimum.
    pub epsilon: f64,
    /// Runs whose terminal gradient max-norm exceeds this did not converge.
    pub delta: f64,
}

impl Default for ClassificationThresholds {
    fn default() -> Self {
        ClassificationThresholds { epsilon: 1e-4, delta: 1e-6 }
    }
}

impl ClassificationThresholds {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        let t = ClassificationThresholds { epsilon, delta };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.delta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "thresholds must be positive, got epsilon={} delta={}",
                self.epsilon, self.delta
            )));
        }
        Ok(())
    }
}

/// Where initial conditions come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSpec {
    /// Gaussian weights sampled at this input dimension.
    DInit(usize),
    /// The `d → ∞` limit (`Q = I`, `R = 0`), identical for every seed.
    InfiniteD,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherSpec {
    Orthonormal,
    /// Gaussian teacher sampled at the init dimension.
    Gaussian,
    /// Teacher overlap matrix read from a headerless CSV file.
    MatrixFile(PathBuf),
}

/// One ensemble experiment. Field names are the keys of the TOML config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub activation: ActivationKind,
    pub optimizer: OptimizerKind,
    pub integration: IntegrationConfig,
    pub n_seeds: usize,
    pub seed_base: u64,
    pub init: InitSpec,
    pub teacher: TeacherSpec,
    /// Alignment tolerance of the family classifier.
    pub classify_tol: f64,
    pub thresholds: ClassificationThresholds,
    /// Attach the solver's family losses to ensemble reports.
    pub attach_catalog: bool,
    pub catalog_k1_max: usize,
    pub histogram_bins: usize,
    pub outputs: PathBuf,
}

/// Integration defaults for ensembles: `dt · η = 0.05`.
pub fn ensemble_integration(eta: f64) -> IntegrationConfig {
    IntegrationConfig {
        dt: 0.05 / eta,
        max_steps: 2_000_000,
        grad_tol: 1e-8,
        loss_floor: 1e-5,
        ..IntegrationConfig::for_eta(eta)
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let optimizer = OptimizerKind::default();
        ExperimentConfig {
            k: 8,
            m: 8,
            activation: ActivationKind::Relu,
            integration: ensemble_integration(optimizer.eta),
            optimizer,
            n_seeds: 100,
            seed_base: 0,
            init: InitSpec::DInit(784),
            teacher: TeacherSpec::Orthonormal,
            classify_tol: 0.05,
            thresholds: ClassificationThresholds::default(),
            attach_catalog: false,
            catalog_k1_max: 4,
            histogram_bins: 100,
            outputs: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn new(k: usize, m: usize) -> Self {
        ExperimentConfig { k, m, ..Default::default() }
    }

    /// Same experiment with another optimizer; the step is rescaled so that
    /// `dt · η` is unchanged.
    pub fn with_optimizer(mut self, kind: Optimizer, eta: f64) -> Self {
        let h = self.integration.dt * self.optimizer.eta;
        self.optimizer = OptimizerKind { kind, eta, ..self.optimizer };
        self.integration.dt = h / eta;
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 {
            return Err(Error::InvalidArgument("K and M must be at least 1".into()));
        }
        if self.n_seeds == 0 {
            return Err(Error::InvalidArgument("n_seeds must be at least 1".into()));
        }
        if let InitSpec::DInit(0) = self.init {
            return Err(Error::InvalidArgument("d_init must be at least 1".into()));
        }
        if let TeacherSpec::MatrixFile(p) = &self.teacher {
            if !p.exists() {
                return Err(Error::InvalidArgument(format!("teacher file {} does not exist", p.display())));
            }
        }
        if !(self.classify_tol > 0.0) {
            return Err(Error::InvalidArgument("classify_tol must be > 0".into()));
        }
        if self.histogram_bins == 0 {
            return Err(Error::InvalidArgument("histogram_bins must be at least 1".into()));
        }
        self.thresholds.validate()?;
        self.optimizer.validate()?;
        self.integration.validate()
    }

    /// Student-weight constraint implied by the optimizer.
    pub fn init_norm(&self) -> InitNorm {
        match self.optimizer.kind {
            Optimizer::Ngd => InitNorm::UnitNorm,
            Optimizer::Ongd => InitNorm::Orthonormal,
            _ => InitNorm::Free,
        }
    }

    pub fn init_options(&self) -> Result<InitOptions> {
        let teacher = match &self.teacher {
            TeacherSpec::Orthonormal => TeacherConfig::Orthonormal,
            TeacherSpec::Gaussian => TeacherConfig::Gaussian,
            TeacherSpec::MatrixFile(p) => {
                let t = read_matrix_csv(p)?;
                if t.nrows() != self.m || t.ncols() != self.m {
                    return Err(Error::Shape(format!(
                        "teacher file is {}x{}, expected {}x{}",
                        t.nrows(),
                        t.ncols(),
                        self.m,
                        self.m
                    )));
                }
                TeacherConfig::Matrix { t: t.transpose().as_slice().to_vec() }
            }
        };
        let d_init = match self.init {
            InitSpec::DInit(d) => Some(d),
            InitSpec::InfiniteD => None,
        };
        Ok(InitOptions { d_init, norm: self.init_norm(), teacher })
    }
}

/// Reads a square matrix from a headerless CSV file.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|x| x.parse::<f64>().map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display()))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(Error::Shape(format!("{}: ragged or empty matrix", path.display())));
    }
    Ok(DMatrix::from_fn(n, rows[0].len(), |i, j| rows[i][j]))
}
