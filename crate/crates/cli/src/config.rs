//! Resolved run configuration and the per-command presets.
//!
//! Resolution order is preset, then an optional JSON config file merged key by
//! key over the preset, then command-line flags. The resolved value is what
//! gets written to `config.json`; feeding that file back through `--config`
//! reproduces the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rqr_core::data::{CsvOptions, SyntheticSpec};
use rqr_core::losses::QuantileLevel;
use rqr_core::net::{self, AdamConfig, LayerSpec};
use rqr_core::trainers::{LrSchedule, Method, MethodKind, TrainConfig, Trim};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    StarCluster,
    Toy,
    Fit,
    Grid,
}

impl CommandKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CommandKind::StarCluster => "star-cluster",
            CommandKind::Toy => "toy",
            CommandKind::Fit => "fit",
            CommandKind::Grid => "grid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// The bundled star-cluster table, or a checksum-verified copy on disk.
    Bundled {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        options: CsvOptions,
    },
    Synthetic {
        spec: SyntheticSpec,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Linear,
    ReluMlp { hidden: usize },
}

impl ModelSpec {
    pub fn layers(self, input_dim: usize) -> Vec<LayerSpec> {
        match self {
            ModelSpec::Linear => net::linear(input_dim),
            ModelSpec::ReluMlp { hidden } => net::relu_mlp(input_dim, hidden),
        }
    }
}

/// Method hyperparameters. The robust ones have no default outside the
/// presets, so `fit` can insist on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodParams {
    pub beta: Option<f64>,
    pub sigma: f64,
    pub lambda: Option<f64>,
    pub gamma_lr: f64,
    pub outer_iters: usize,
    pub inner_steps: usize,
    pub trim_fraction: Option<f64>,
}

impl Default for MethodParams {
    fn default() -> Self {
        Self {
            beta: None,
            sigma: 1.0,
            lambda: None,
            gamma_lr: 0.01,
            outer_iters: 100,
            inner_steps: 50,
            trim_fraction: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub betas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub trim_fractions: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            betas: vec![0.1, 0.5, 1.0, 2.0, 5.0],
            lambdas: vec![0.01, 0.1, 1.0, 10.0],
            trim_fractions: vec![0.70, 0.80, 0.90, 0.95],
        }
    }
}

/// A seeded shuffle split; the seed is kept apart from the training seed so
/// that per-cell seeds of a grid see the same split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Validation {
    pub fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: CommandKind,
    pub data: DataSource,
    /// Size of a clean held-out draw from the synthetic generator used for
    /// evaluation. Synthetic data only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout: Option<usize>,
    /// Rows held out for scoring and evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<Validation>,
    pub model: ModelSpec,
    pub methods: Vec<MethodKind>,
    pub alphas: Vec<f64>,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub convergence_tol: f64,
    pub standardize: bool,
    /// Seeded starts for the non-convex objectives (TQR, β-QR); the convex
    /// ones always train once.
    pub restarts: usize,
    pub params: MethodParams,
    /// When set, robust hyperparameters are chosen per (method, α) by
    /// validation pinball loss over this grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tune: Option<GridSpec>,
    pub emit_plot_data: bool,
    pub plot_points: usize,

    #[serde(skip)]
    pub out_dir: PathBuf,
    #[serde(skip)]
    pub jobs: Option<usize>,
    #[serde(skip)]
    pub timings: bool,
}

impl RunConfig {
    pub fn preset(command: CommandKind) -> Self {
        let base = Self {
            command,
            data: DataSource::Bundled { path: None },
            holdout: None,
            validation: None,
            model: ModelSpec::Linear,
            methods: MethodKind::ALL.to_vec(),
            alphas: vec![0.25, 0.5, 0.75],
            seed: 0,
            epochs: 5000,
            batch_size: None,
            learning_rate: 0.01,
            lr_schedule: LrSchedule::Constant,
            convergence_tol: 1e-8,
            standardize: true,
            restarts: 50,
            params: MethodParams::default(),
            tune: None,
            emit_plot_data: false,
            plot_points: 200,
            out_dir: PathBuf::from("out"),
            jobs: None,
            timings: false,
        };
        match command {
            CommandKind::StarCluster => Self {
                tune: Some(GridSpec::default()),
                ..base
            },
            CommandKind::Toy => Self {
                data: DataSource::Synthetic {
                    spec: SyntheticSpec::default(),
                },
                holdout: Some(1000),
                model: ModelSpec::ReluMlp { hidden: 64 },
                epochs: 500,
                batch_size: Some(128),
                learning_rate: 1e-3,
                lr_schedule: LrSchedule::Linear,
                // mini-batch loss estimates are too noisy for a change test
                convergence_tol: 0.0,
                restarts: 1,
                params: MethodParams {
                    beta: Some(1.0),
                    lambda: Some(0.1),
                    trim_fraction: Some(0.99),
                    outer_iters: 10,
                    inner_steps: 500,
                    ..MethodParams::default()
                },
                ..base
            },
            CommandKind::Fit => Self {
                data: DataSource::Csv {
                    path: PathBuf::new(),
                    options: CsvOptions::default(),
                },
                methods: vec![MethodKind::Qr],
                alphas: vec![0.5],
                epochs: 1000,
                restarts: 1,
                ..base
            },
            CommandKind::Grid => Self {
                data: DataSource::Csv {
                    path: PathBuf::new(),
                    options: CsvOptions::default(),
                },
                epochs: 1000,
                restarts: 1,
                tune: Some(GridSpec::default()),
                ..base
            },
        }
    }

    /// Merges a JSON object over this configuration, key by key.
    pub fn merge_json(&self, overlay: serde_json::Value) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        merge(&mut value, overlay);
        let mut merged: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("config file does not describe a run: {e}")))?;
        merged.out_dir = self.out_dir.clone();
        merged.jobs = self.jobs;
        merged.timings = self.timings;
        Ok(merged)
    }

    pub fn from_file(&self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let overlay: serde_json::Value =
            serde_json::from_str(&text).map_err(|source| Error::ConfigFile {
                path: path.to_path_buf(),
                source,
            })?;
        if !overlay.is_object() {
            return Err(Error::Config(format!(
                "{} must hold a JSON object",
                path.display()
            )));
        }
        self.merge_json(overlay)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }

    pub fn quantile_levels(&self) -> Result<Vec<QuantileLevel>> {
        if self.alphas.is_empty() {
            return Err(Error::Config("--alphas needs at least one level".into()));
        }
        self.alphas
            .iter()
            .map(|&a| QuantileLevel::new(a).map_err(|e| Error::Config(format!("--alphas: {e}"))))
            .collect()
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<()> {
        self.quantile_levels()?;
        if self.methods.is_empty() {
            return Err(Error::Config("--method needs at least one method".into()));
        }
        if let DataSource::Csv { path, .. } = &self.data {
            if path.as_os_str().is_empty() {
                return Err(Error::Config(format!(
                    "{} needs a dataset: pass --data <csv>",
                    self.command.as_str()
                )));
            }
        }
        if self.holdout.is_some() && !matches!(self.data, DataSource::Synthetic { .. }) {
            return Err(Error::Config("a holdout draw needs synthetic data".into()));
        }
        if self.holdout == Some(0) {
            return Err(Error::Config("--holdout must be positive".into()));
        }
        if let Some(Validation { fraction: f, .. }) = self.validation {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!(
                    "--val-fraction must lie in (0, 1), got {f}"
                )));
            }
        }
        if let ModelSpec::ReluMlp { hidden: 0 } = self.model {
            return Err(Error::Config("--hidden must be positive".into()));
        }
        if self.plot_points < 2 {
            return Err(Error::Config("--plot-points must be at least 2".into()));
        }
        if self.command == CommandKind::Grid && self.tune.is_none() {
            return Err(Error::Config("grid needs a hyperparameter grid".into()));
        }
        match &self.tune {
            Some(grid) => {
                for &m in &self.methods {
                    if grid_values(grid, m).is_some_and(|v| v.is_empty()) {
                        return Err(Error::Config(format!(
                            "empty grid for method {m} (--{})",
                            grid_flag(m)
                        )));
                    }
                }
            }
            None => {
                for &m in &self.methods {
                    self.method(m)?;
                }
            }
        }
        Ok(())
    }

    /// The method with this run's fixed hyperparameters; names the missing
    /// flag when one is required.
    pub fn method(&self, kind: MethodKind) -> Result<Method> {
        let p = &self.params;
        let missing = |flag: &str| Error::Config(format!("method {kind} requires --{flag}"));
        Ok(match kind {
            MethodKind::Qr => Method::Qr,
            MethodKind::Tqr => Method::Tqr {
                trim: Trim::Fraction(p.trim_fraction.ok_or_else(|| missing("trim-fraction"))?),
            },
            MethodKind::Rcp => self.rcp(p.lambda.ok_or_else(|| missing("lambda"))?),
            MethodKind::BetaQr => Method::BetaQr {
                beta: p.beta.ok_or_else(|| missing("beta"))?,
                sigma: p.sigma,
            },
        })
    }

    pub fn rcp(&self, lambda: f64) -> Method {
        Method::Rcp {
            lambda,
            gamma_lr: self.params.gamma_lr,
            outer_iters: self.params.outer_iters,
            inner_steps: self.params.inner_steps,
        }
    }

    /// Training settings for one method. RCP always trains full batch.
    pub fn train_config(&self, method: Method, alphas: &[QuantileLevel], seed: u64) -> TrainConfig {
        let batch_size = match method {
            Method::Rcp { .. } => None,
            _ => self.batch_size,
        };
        let restarts = match method {
            Method::Tqr { .. } | Method::BetaQr { .. } => self.restarts,
            Method::Qr | Method::Rcp { .. } => 1,
        };
        TrainConfig {
            alphas: alphas.to_vec(),
            method,
            epochs: self.epochs,
            batch_size,
            adam: AdamConfig::with_learning_rate(self.learning_rate),
            seed,
            convergence_tol: self.convergence_tol,
            standardize: self.standardize,
            restarts,
            lr_schedule: self.lr_schedule,
        }
    }
}

pub(crate) fn grid_values(grid: &GridSpec, kind: MethodKind) -> Option<&[f64]> {
    match kind {
        MethodKind::Qr => None,
        MethodKind::Tqr => Some(&grid.trim_fractions),
        MethodKind::Rcp => Some(&grid.lambdas),
        MethodKind::BetaQr => Some(&grid.betas),
    }
}

fn grid_flag(kind: MethodKind) -> &'static str {
    match kind {
        MethodKind::Tqr => "trim-fractions",
        MethodKind::Rcp => "lambdas",
        _ => "betas",
    }
}

fn same_source(a: &serde_json::Value, b: &serde_json::Value) -> bool {
    match (a.get("source"), b.get("source")) {
        (Some(x), Some(y)) => x == y,
        (None, None) => true,
        _ => false,
    }
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    // a different data source replaces the whole block
                    Some(slot) if slot.is_object() && v.is_object() && same_source(slot, &v) => {
                        merge(slot, v)
                    }
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
