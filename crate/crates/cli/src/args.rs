use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use rqr_core::data::{CsvOptions, SyntheticSpec};
use rqr_core::trainers::{LrSchedule, MethodKind};

use crate::config::{DataSource, GridSpec, ModelSpec, RunConfig, Validation};
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "rqr",
    version,
    about = "Robust quantile regression experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Linear quantile fits on the bundled 47-star cluster with four giants.
    StarCluster(RunArgs),
    /// Three-layer ReLU network on the contaminated synthetic data.
    Toy(RunArgs),
    /// Fit chosen methods on a CSV file.
    Fit(RunArgs),
    /// Hyperparameter grid search scored by validation pinball loss.
    Grid(RunArgs),
    /// Write a synthetic dataset as CSV.
    GenData(GenArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON file merged over the command's preset; flags still win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub print_config: bool,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads for independent fits.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Record wall time in report.json.
    #[arg(long)]
    pub timings: bool,

    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    /// One or more of qr, tqr, rcp, beta_qr.
    #[arg(long, value_delimiter = ',')]
    pub method: Option<Vec<String>>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma_lr: Option<f64>,
    #[arg(long)]
    pub outer_iters: Option<usize>,
    #[arg(long)]
    pub inner_steps: Option<usize>,
    #[arg(long)]
    pub trim_fraction: Option<f64>,

    #[arg(long)]
    pub epochs: Option<usize>,
    /// A positive size or `full`.
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// `constant` or `linear`.
    #[arg(long)]
    pub lr_schedule: Option<String>,
    #[arg(long)]
    pub convergence_tol: Option<f64>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long, value_name = "BOOL")]
    pub standardize: Option<bool>,
    /// `linear` or `relu-mlp`.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub hidden: Option<usize>,

    /// Write the data, dense prediction curves and (synthetic data) the
    /// oracle quantiles.
    #[arg(long)]
    pub emit_plot_data: bool,
    #[arg(long)]
    pub plot_points: Option<usize>,

    /// Choose robust hyperparameters per level over the grid.
    #[arg(long, conflicts_with = "no_tune")]
    pub tune: bool,
    #[arg(long)]
    pub no_tune: bool,
    #[arg(long, value_delimiter = ',')]
    pub betas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub trim_fractions: Option<Vec<f64>>,
    #[arg(long)]
    pub val_fraction: Option<f64>,

    /// CSV dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub response: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<String>>,
    #[arg(long)]
    pub inlier_column: Option<String>,
    #[arg(long)]
    pub no_header: bool,
    /// Star-cluster CSV to use instead of the bundled copy (checksum
    /// verified).
    #[arg(long)]
    pub data_path: Option<PathBuf>,

    #[command(flatten)]
    pub synthetic: SyntheticArgs,
    /// Size of the clean held-out draw (synthetic data).
    #[arg(long)]
    pub holdout: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SyntheticArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub x_low: Option<f64>,
    #[arg(long)]
    pub x_high: Option<f64>,
    #[arg(long)]
    pub noise_scale: Option<f64>,
    #[arg(long)]
    pub homoscedastic: bool,
    #[arg(long)]
    pub outlier_fraction: Option<f64>,
    #[arg(long)]
    pub outlier_magnitude: Option<f64>,
    /// Generator seed; defaults to `--seed`.
    #[arg(long)]
    pub data_seed: Option<u64>,
}

impl SyntheticArgs {
    fn apply(&self, spec: &mut SyntheticSpec, set: &mut Vec<String>) {
        macro_rules! take {
            ($field:ident, $flag:literal) => {
                if let Some(v) = self.$field {
                    spec.$field = v;
                    set.push($flag.into());
                }
            };
        }
        take!(n, "--n");
        take!(x_low, "--x-low");
        take!(x_high, "--x-high");
        take!(noise_scale, "--noise-scale");
        take!(outlier_fraction, "--outlier-fraction");
        take!(outlier_magnitude, "--outlier-magnitude");
        if self.homoscedastic {
            spec.heteroscedastic = false;
            set.push("--homoscedastic".into());
        }
        if let Some(s) = self.data_seed {
            spec.seed = s;
            set.push("--data-seed".into());
        }
    }

    fn any(&self) -> bool {
        self.n.is_some()
            || self.x_low.is_some()
            || self.x_high.is_some()
            || self.noise_scale.is_some()
            || self.homoscedastic
            || self.outlier_fraction.is_some()
            || self.outlier_magnitude.is_some()
            || self.data_seed.is_some()
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub synthetic: SyntheticArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV; the generator settings go next to it as JSON.
    #[arg(long, default_value = "synthetic.csv")]
    pub out: PathBuf,
}

impl GenArgs {
    pub fn spec(&self) -> SyntheticSpec {
        let mut spec = SyntheticSpec {
            seed: self.seed,
            ..SyntheticSpec::default()
        };
        self.synthetic.apply(&mut spec, &mut Vec::new());
        spec
    }
}

pub fn parse_schedule(s: &str) -> Result<LrSchedule> {
    match s {
        "constant" => Ok(LrSchedule::Constant),
        "linear" => Ok(LrSchedule::Linear),
        other => Err(Error::Config(format!(
            "--lr-schedule: expected constant or linear, got `{other}`"
        ))),
    }
}

impl RunArgs {
    /// Applies the flags on top of `cfg`; returns the names of the flags that
    /// changed something.
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<Vec<String>> {
        let mut set: Vec<String> = Vec::new();
        macro_rules! take {
            ($src:expr, $dst:expr, $flag:literal) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                    set.push($flag.into());
                }
            };
        }
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = dir.clone();
        }
        if self.jobs.is_some() {
            cfg.jobs = self.jobs;
        }
        cfg.timings |= self.timings;

        take!(self.seed, cfg.seed, "--seed");
        take!(self.alphas, cfg.alphas, "--alphas");
        if let Some(names) = &self.method {
            cfg.methods = names
                .iter()
                .map(|n| n.parse::<MethodKind>())
                .collect::<rqr_core::Result<Vec<_>>>()
                .map_err(|e| Error::Config(format!("--method: {e}")))?;
            set.push("--method".into());
        }
        if let Some(b) = self.beta {
            cfg.params.beta = Some(b);
            set.push("--beta".into());
        }
        take!(self.sigma, cfg.params.sigma, "--sigma");
        if let Some(l) = self.lambda {
            cfg.params.lambda = Some(l);
            set.push("--lambda".into());
        }
        take!(self.gamma_lr, cfg.params.gamma_lr, "--gamma-lr");
        take!(self.outer_iters, cfg.params.outer_iters, "--outer-iters");
        take!(self.inner_steps, cfg.params.inner_steps, "--inner-steps");
        if let Some(t) = self.trim_fraction {
            cfg.params.trim_fraction = Some(t);
            set.push("--trim-fraction".into());
        }
        take!(self.epochs, cfg.epochs, "--epochs");
        if let Some(b) = &self.batch_size {
            cfg.batch_size = match b.as_str() {
                "full" => None,
                n => match n.parse::<usize>() {
                    Ok(n) if n > 0 => Some(n),
                    _ => {
                        return Err(Error::Config(format!(
                            "--batch-size: expected a positive integer or `full`, got `{b}`"
                        )))
                    }
                },
            };
            set.push("--batch-size".into());
        }
        take!(self.lr, cfg.learning_rate, "--lr");
        if let Some(s) = &self.lr_schedule {
            cfg.lr_schedule = parse_schedule(s)?;
            set.push("--lr-schedule".into());
        }
        take!(
            self.convergence_tol,
            cfg.convergence_tol,
            "--convergence-tol"
        );
        take!(self.restarts, cfg.restarts, "--restarts");
        take!(self.standardize, cfg.standardize, "--standardize");
        if let Some(m) = &self.model {
            cfg.model = match m.as_str() {
                "linear" => ModelSpec::Linear,
                "relu-mlp" | "relu_mlp" | "mlp" => ModelSpec::ReluMlp {
                    hidden: self.hidden.unwrap_or(64),
                },
                other => {
                    return Err(Error::Config(format!(
                        "--model: expected linear or relu-mlp, got `{other}`"
                    )))
                }
            };
            set.push("--model".into());
        }
        if let Some(h) = self.hidden {
            match &mut cfg.model {
                ModelSpec::ReluMlp { hidden } => *hidden = h,
                ModelSpec::Linear => {
                    return Err(Error::Config("--hidden needs --model relu-mlp".into()))
                }
            }
            set.push("--hidden".into());
        }
        if self.emit_plot_data {
            cfg.emit_plot_data = true;
            set.push("--emit-plot-data".into());
        }
        take!(self.plot_points, cfg.plot_points, "--plot-points");

        if self.no_tune {
            cfg.tune = None;
            set.push("--no-tune".into());
        }
        let grid_flags =
            self.betas.is_some() || self.lambdas.is_some() || self.trim_fractions.is_some();
        if self.tune || (grid_flags && !self.no_tune) {
            let grid = cfg.tune.get_or_insert_with(GridSpec::default);
            if self.tune {
                set.push("--tune".into());
            }
            take!(self.betas, grid.betas, "--betas");
            take!(self.lambdas, grid.lambdas, "--lambdas");
            take!(self.trim_fractions, grid.trim_fractions, "--trim-fractions");
        }
        // an explicit value for a method's parameter fixes it
        if let Some(grid) = &mut cfg.tune {
            if let (Some(b), None) = (self.beta, &self.betas) {
                grid.betas = vec![b];
            }
            if let (Some(l), None) = (self.lambda, &self.lambdas) {
                grid.lambdas = vec![l];
            }
            if let (Some(t), None) = (self.trim_fraction, &self.trim_fractions) {
                grid.trim_fractions = vec![t];
            }
        }

        if let Some(path) = &self.data {
            let options = CsvOptions {
                no_header: self.no_header,
                feature_columns: self.features.clone(),
                response_column: self.response.clone(),
                inlier_column: self.inlier_column.clone(),
            };
            cfg.data = DataSource::Csv {
                path: path.clone(),
                options,
            };
            set.push("--data".into());
        } else if self.no_header
            || self.features.is_some()
            || self.response.is_some()
            || self.inlier_column.is_some()
        {
            match &mut cfg.data {
                DataSource::Csv { options, .. } => {
                    options.no_header |= self.no_header;
                    if self.features.is_some() {
                        options.feature_columns = self.features.clone();
                    }
                    if self.response.is_some() {
                        options.response_column = self.response.clone();
                    }
                    if self.inlier_column.is_some() {
                        options.inlier_column = self.inlier_column.clone();
                    }
                    set.push("--csv-options".into());
                }
                _ => {
                    return Err(Error::Config(
                        "column options apply to CSV data only (--data)".into(),
                    ))
                }
            }
        }
        if let Some(p) = &self.data_path {
            match &mut cfg.data {
                DataSource::Bundled { path } => *path = Some(p.clone()),
                _ => {
                    return Err(Error::Config(
                        "--data-path overrides the bundled star-cluster table only".into(),
                    ))
                }
            }
            set.push("--data-path".into());
        }
        if let DataSource::Synthetic { spec } = &mut cfg.data {
            if let Some(seed) = self.seed {
                spec.seed = seed;
            }
            self.synthetic.apply(spec, &mut set);
        } else if self.synthetic.any() {
            return Err(Error::Config(
                "generator flags (--n, --outlier-fraction, ...) apply to synthetic data only"
                    .into(),
            ));
        }
        take!(self.holdout.map(Some), cfg.holdout, "--holdout");

        match (self.val_fraction, &mut cfg.validation) {
            (Some(fraction), _) => {
                cfg.validation = Some(Validation {
                    fraction,
                    seed: cfg.seed,
                });
                set.push("--val-fraction".into());
            }
            (None, Some(v)) if self.seed.is_some() => v.seed = cfg.seed,
            _ => {}
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CommandKind;

    fn parse(args: &[&str]) -> RunArgs {
        let mut full = vec!["rqr", "fit"];
        full.extend_from_slice(args);
        match Cli::parse_from(full).command {
            Command::Fit(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn flags_override_preset() {
        let mut cfg = RunConfig::preset(CommandKind::Fit);
        let set = parse(&[
            "--data",
            "d.csv",
            "--method",
            "beta_qr,qr",
            "--beta",
            "0.5",
            "--alphas",
            "0.1,0.5,0.9",
        ])
        .apply(&mut cfg)
        .unwrap();
        assert_eq!(cfg.methods, vec![MethodKind::BetaQr, MethodKind::Qr]);
        assert_eq!(cfg.params.beta, Some(0.5));
        assert_eq!(cfg.alphas, vec![0.1, 0.5, 0.9]);
        assert!(set.contains(&"--beta".to_string()));
        cfg.validate().unwrap();
    }

    #[test]
    fn explicit_parameter_pins_a_tuned_grid() {
        let mut cfg = RunConfig::preset(CommandKind::StarCluster);
        parse(&["--beta", "2"]).apply(&mut cfg).unwrap();
        assert_eq!(cfg.tune.unwrap().betas, vec![2.0]);
    }

    #[test]
    fn seed_reaches_the_generator() {
        let mut cfg = RunConfig::preset(CommandKind::Toy);
        parse(&["--seed", "7", "--n", "50"])
            .apply(&mut cfg)
            .unwrap();
        match cfg.data {
            DataSource::Synthetic { spec } => {
                assert_eq!((spec.seed, spec.n), (7, 50));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut cfg = RunConfig::preset(CommandKind::Fit);
        assert!(parse(&["--batch-size", "0"]).apply(&mut cfg).is_err());
        assert!(parse(&["--method", "ols"]).apply(&mut cfg).is_err());
        assert!(parse(&["--n", "10"]).apply(&mut cfg).is_err());
        let mut cfg = RunConfig::preset(CommandKind::Toy);
        assert!(parse(&["--data-path", "x.csv"]).apply(&mut cfg).is_err());
    }
}
