//! Runs a resolved configuration: data preparation, fitting (optionally
//! tuned over a grid), evaluation and artifact emission.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rqr_core::data::{self, Dataset, SyntheticSpec};
use rqr_core::eval::{self, EvalReport};
use rqr_core::losses::{self, QuantileLevel};
use rqr_core::net::LayerSpec;
use rqr_core::trainers::{self, AlphaFit, FitResult, Method, MethodKind, Trim};

use crate::config::{grid_values, CommandKind, DataSource, RunConfig, Validation};
use crate::error::{Error, Result};
use crate::output::{num, quantile_column, Artifacts, Table};

/// Training, scoring and evaluation views of the configured data.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    /// Rows the grid is scored on: validation rows when split, otherwise the
    /// training rows; inliers only when a mask exists.
    pub score: Dataset,
    /// Rows the report is computed on.
    pub eval: Dataset,
    /// Clean law behind synthetic data, for oracle curves.
    pub law: Option<SyntheticSpec>,
}

pub fn load_data(source: &DataSource) -> Result<Dataset> {
    Ok(match source {
        DataSource::Bundled { path: None } => data::star_cluster_dataset()?,
        DataSource::Bundled { path: Some(p) } => data::star_cluster_from_path(p)?,
        DataSource::Csv { path, options } => data::load_csv(path, options)?,
        DataSource::Synthetic { spec } => data::gen_synthetic(spec)?,
    })
}

/// Seed of the clean held-out draw that accompanies synthetic data.
pub fn holdout_spec(spec: &SyntheticSpec, n: usize) -> SyntheticSpec {
    SyntheticSpec {
        n,
        outlier_fraction: 0.0,
        seed: spec.seed.wrapping_add(1),
        ..spec.clone()
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let full = load_data(&cfg.data)?;
    let (train, held) = match cfg.validation {
        Some(Validation { fraction, seed }) => {
            let (t, v) = data::split(&full, fraction, seed)?;
            (t, Some(v))
        }
        None => (full, None),
    };
    let law = match &cfg.data {
        DataSource::Synthetic { spec } => Some(spec.clone()),
        _ => None,
    };
    let holdout = match (cfg.holdout, &law) {
        (Some(n), Some(spec)) => Some(data::gen_synthetic(&holdout_spec(spec, n))?),
        _ => None,
    };
    let score_base = held.clone().unwrap_or_else(|| train.clone());
    let score = if score_base.inlier_mask().is_some() {
        score_base.inliers()?
    } else {
        score_base
    };
    if score.is_empty() {
        return Err(Error::Core(rqr_core::Error::Data(
            "no rows left to score on".into(),
        )));
    }
    let eval = holdout.or(held).unwrap_or_else(|| train.clone());
    Ok(Prepared {
        train,
        score,
        eval,
        law,
    })
}

/// Mean pinball loss of `fit` over `data`.
pub fn pinball_score(fit: &AlphaFit, data: &Dataset) -> Result<f64> {
    let mut sum = 0.0;
    for i in 0..data.len() {
        let r = data.responses()[i] - fit.predict(data.row(i))?;
        sum += losses::pinball(r, fit.alpha);
    }
    Ok(sum / data.len() as f64)
}

/// One grid point: a method, its tuned hyperparameter (if any) and a level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub method: MethodKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parameter: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCell {
    pub cell: Cell,
    pub score: f64,
    /// 1 = best within its (method, α) group.
    pub rank: usize,
}

pub fn parameter_name(kind: MethodKind) -> Option<&'static str> {
    match kind {
        MethodKind::Qr => None,
        MethodKind::Tqr => Some("trim_fraction"),
        MethodKind::Rcp => Some("lambda"),
        MethodKind::BetaQr => Some("beta"),
    }
}

pub fn grid_cells(cfg: &RunConfig) -> Result<Vec<Cell>> {
    let grid = cfg
        .tune
        .as_ref()
        .ok_or_else(|| Error::Config("no hyperparameter grid configured".into()))?;
    let alphas = cfg.quantile_levels()?;
    let mut cells = Vec::new();
    for &method in &cfg.methods {
        let values: Vec<Option<f64>> = match grid_values(grid, method) {
            Some(v) => v.iter().map(|&x| Some(x)).collect(),
            None => vec![None],
        };
        if values.is_empty() {
            return Err(Error::Config(format!("empty grid for method {method}")));
        }
        for value in values {
            for alpha in &alphas {
                let index = cells.len();
                cells.push(Cell {
                    index,
                    method,
                    parameter: value.and(parameter_name(method)).map(str::to_string),
                    value,
                    alpha: alpha.value(),
                    seed: cfg.seed.wrapping_add(index as u64),
                });
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    Ok(cells)
}

/// The configuration that `fit` would need to reproduce one cell.
pub fn cell_config(cfg: &RunConfig, cell: &Cell) -> RunConfig {
    let mut out = cfg.clone();
    out.command = CommandKind::Fit;
    out.methods = vec![cell.method];
    out.alphas = vec![cell.alpha];
    out.seed = cell.seed;
    out.tune = None;
    match cell.method {
        MethodKind::Qr => {}
        MethodKind::Tqr => out.params.trim_fraction = cell.value,
        MethodKind::Rcp => out.params.lambda = cell.value,
        MethodKind::BetaQr => out.params.beta = cell.value,
    }
    out
}

fn cell_method(cfg: &RunConfig, cell: &Cell) -> Method {
    let v = cell.value.unwrap_or_default();
    match cell.method {
        MethodKind::Qr => Method::Qr,
        MethodKind::Tqr => Method::Tqr {
            trim: Trim::Fraction(v),
        },
        MethodKind::Rcp => cfg.rcp(v),
        MethodKind::BetaQr => Method::BetaQr {
            beta: v,
            sigma: cfg.params.sigma,
        },
    }
}

fn pool(cfg: &RunConfig, tasks: usize) -> Result<rayon::ThreadPool> {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let threads = cfg.jobs.unwrap_or_else(|| tasks.min(available)).max(1);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))
}

/// Trains and scores every cell. The result is grouped by (method, α) and
/// ranked by score within each group.
pub fn run_grid(
    cfg: &RunConfig,
    prepared: &Prepared,
    arch: &[LayerSpec],
) -> Result<Vec<(ScoredCell, FitResult)>> {
    let cells = grid_cells(cfg)?;
    let pool = pool(cfg, cells.len())?;
    let fitted: Vec<Result<(Cell, FitResult, f64)>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let alpha = QuantileLevel::new(cell.alpha)?;
                let tc = cfg.train_config(cell_method(cfg, cell), &[alpha], cell.seed);
                let fit = trainers::train(&prepared.train, arch, &tc)?;
                let score = pinball_score(&fit.fits[0], &prepared.score)?;
                Ok((cell.clone(), fit, score))
            })
            .collect()
    });
    let fitted = fitted.into_iter().collect::<Result<Vec<_>>>()?;

    let mut out: Vec<(ScoredCell, FitResult)> = fitted
        .into_iter()
        .map(|(cell, fit, score)| {
            (
                ScoredCell {
                    cell,
                    score,
                    rank: 0,
                },
                fit,
            )
        })
        .collect();
    let mut order: Vec<usize> = (0..out.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&out[a].0, &out[b].0);
        x.cell
            .method
            .cmp(&y.cell.method)
            .then(x.cell.alpha.total_cmp(&y.cell.alpha))
            .then(x.score.total_cmp(&y.score))
            .then(x.cell.index.cmp(&y.cell.index))
    });
    let mut rank = 0;
    let mut group: Option<(MethodKind, f64)> = None;
    for &i in &order {
        let key = (out[i].0.cell.method, out[i].0.cell.alpha);
        if group != Some(key) {
            group = Some(key);
            rank = 0;
        }
        rank += 1;
        out[i].0.rank = rank;
    }
    let mut ranked = Vec::with_capacity(out.len());
    let mut slots: Vec<Option<(ScoredCell, FitResult)>> = out.into_iter().map(Some).collect();
    for i in order {
        ranked.push(slots[i].take().expect("each index once"));
    }
    Ok(ranked)
}

pub fn grid_table(scored: &[ScoredCell]) -> Table {
    let mut t = Table::new([
        "rank",
        "method",
        "alpha",
        "parameter",
        "value",
        "seed",
        "score",
    ]);
    for s in scored {
        t.push(vec![
            s.rank.to_string(),
            s.cell.method.to_string(),
            num(s.cell.alpha),
            s.cell.parameter.clone().unwrap_or_default(),
            s.cell.value.map(num).unwrap_or_default(),
            s.cell.seed.to_string(),
            num(s.score),
        ]);
    }
    t
}

/// Fits of one method, one `FitResult` per training configuration used.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodFits {
    pub method: MethodKind,
    /// Grid winners, one per level, when the run was tuned.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub selected: Vec<ScoredCell>,
    pub fits: Vec<FitResult>,
}

impl MethodFits {
    pub fn alpha_fits(&self) -> impl Iterator<Item = &AlphaFit> {
        self.fits.iter().flat_map(|f| f.fits.iter())
    }

    pub fn fit_for(&self, alpha: QuantileLevel) -> Option<&AlphaFit> {
        self.alpha_fits().find(|f| f.alpha == alpha)
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub prepared: Prepared,
    pub methods: Vec<MethodFits>,
    pub reference: Option<FitResult>,
    pub report: Option<EvalReport>,
    pub grid: Vec<ScoredCell>,
}

/// Fits every configured method (tuned or not) and the reference, then
/// builds the report when an inlier mask is available.
pub fn execute(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let started = Instant::now();
    let prepared = prepare(cfg)?;
    let arch = cfg.model.layers(prepared.train.n_features());
    let alphas = cfg.quantile_levels()?;

    let reference = if prepared.train.inlier_mask().is_some() {
        let tc = cfg.train_config(Method::Qr, &alphas, cfg.seed);
        Some(trainers::fit_reference(&prepared.train, &arch, &tc)?)
    } else {
        None
    };

    let (methods, grid) = if cfg.tune.is_some() {
        let ranked = run_grid(cfg, &prepared, &arch)?;
        let mut methods = Vec::new();
        for &kind in &cfg.methods {
            let winners: Vec<&(ScoredCell, FitResult)> = ranked
                .iter()
                .filter(|(s, _)| s.cell.method == kind && s.rank == 1)
                .collect();
            methods.push(MethodFits {
                method: kind,
                selected: winners.iter().map(|(s, _)| s.clone()).collect(),
                fits: winners.iter().map(|(_, f)| f.clone()).collect(),
            });
        }
        (methods, ranked.into_iter().map(|(s, _)| s).collect())
    } else {
        let jobs: Vec<(MethodKind, Method)> = cfg
            .methods
            .iter()
            .map(|&k| Ok((k, cfg.method(k)?)))
            .collect::<Result<_>>()?;
        let pool = pool(cfg, jobs.len())?;
        let fitted: Vec<Result<MethodFits>> = pool.install(|| {
            jobs.par_iter()
                .map(|(kind, method)| {
                    let tc = cfg.train_config(method.clone(), &alphas, cfg.seed);
                    Ok(MethodFits {
                        method: *kind,
                        selected: Vec::new(),
                        fits: vec![trainers::train(&prepared.train, &arch, &tc)?],
                    })
                })
                .collect()
        });
        (fitted.into_iter().collect::<Result<Vec<_>>>()?, Vec::new())
    };

    let report = match &reference {
        Some(reference) => {
            let all: Vec<FitResult> = methods.iter().flat_map(|m| m.fits.clone()).collect();
            let mut report = eval::build_report(&all, reference, &prepared.eval)?;
            report.seed = cfg.seed;
            report.config = cfg.to_json();
            if cfg.timings {
                report.wall_time_secs = Some(started.elapsed().as_secs_f64());
            }
            Some(report)
        }
        None => None,
    };

    Ok(Outcome {
        prepared,
        methods,
        reference,
        report,
        grid,
    })
}

/// Table-shaped summary: one row per method, one column per level.
pub fn frobenius_table(report: &EvalReport, cfg: &RunConfig) -> Table {
    let mut header = vec!["method".to_string()];
    header.extend(cfg.alphas.iter().map(|&a| quantile_column(a)));
    let mut t = Table::new(header);
    for &m in &cfg.methods {
        let mut row = vec![m.to_string()];
        for &a in &cfg.alphas {
            let cell = QuantileLevel::new(a)
                .ok()
                .and_then(|q| report.record(m, q))
                .map(|r| num(r.frobenius_to_reference))
                .unwrap_or_default();
            row.push(cell);
        }
        t.push(row);
    }
    t
}

fn feature_header(data: &Dataset) -> Vec<String> {
    if data.n_features() == 1 {
        vec!["x".to_string()]
    } else {
        data.feature_names().to_vec()
    }
}

fn prediction_table(fits: &[&AlphaFit], rows: &[Vec<f64>], header: Vec<String>) -> Result<Table> {
    let mut header = header;
    header.extend(fits.iter().map(|f| quantile_column(f.alpha.value())));
    let mut t = Table::new(header);
    for x in rows {
        let mut row: Vec<String> = x.iter().map(|&v| num(v)).collect();
        for f in fits {
            row.push(num(f.predict(x)?));
        }
        t.push(row);
    }
    Ok(t)
}

fn data_rows(data: &Dataset) -> Vec<Vec<f64>> {
    (0..data.len()).map(|i| data.row(i).to_vec()).collect()
}

fn dense_grid(data: &Dataset, points: usize) -> Vec<Vec<f64>> {
    let (lo, hi) = data
        .features()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    (0..points)
        .map(|k| vec![lo + (hi - lo) * k as f64 / (points - 1) as f64])
        .collect()
}

fn ordered<'a>(fits: impl Iterator<Item = &'a AlphaFit>, cfg: &RunConfig) -> Vec<&'a AlphaFit> {
    let all: Vec<&AlphaFit> = fits.collect();
    cfg.alphas
        .iter()
        .filter_map(|&a| all.iter().copied().find(|f| f.alpha.value() == a))
        .collect()
}

#[derive(Serialize)]
struct FitArtifact<'a> {
    config: serde_json::Value,
    method: String,
    #[serde(skip_serializing_if = "<[ScoredCell]>::is_empty")]
    selected: &'a [ScoredCell],
    fits: &'a [FitResult],
}

/// Writes the artifacts of a fitting run (`star-cluster`, `toy`, `fit`).
pub fn write_fit_artifacts(cfg: &RunConfig, outcome: &Outcome, out: &Artifacts) -> Result<()> {
    out.write_json("config.json", &cfg.to_json())?;
    let eval_rows = data_rows(&outcome.prepared.eval);
    let header = feature_header(&outcome.prepared.eval);
    let one_d = outcome.prepared.train.n_features() == 1;
    let curve_rows = if cfg.emit_plot_data && one_d {
        dense_grid(&outcome.prepared.train, cfg.plot_points)
    } else {
        Vec::new()
    };

    let emit = |name: &str, fits: Vec<&AlphaFit>, artifact: FitArtifact<'_>| -> Result<()> {
        out.write_json(&format!("fit_{name}.json"), &artifact)?;
        out.write_table(
            &format!("predictions_{name}.csv"),
            &prediction_table(&fits, &eval_rows, header.clone())?,
        )?;
        for f in &fits {
            let mut t = Table::new(["epoch", "loss"]);
            t.push(vec!["0".into(), num(f.initial_loss)]);
            for (e, v) in f.trajectory.iter().enumerate() {
                t.push(vec![(e + 1).to_string(), num(*v)]);
            }
            out.write_table(&format!("trajectory_{name}_{}.csv", f.alpha), &t)?;
        }
        if !curve_rows.is_empty() {
            out.write_table(
                &format!("curve_{name}.csv"),
                &prediction_table(&fits, &curve_rows, vec!["x".into()])?,
            )?;
        }
        Ok(())
    };

    for m in &outcome.methods {
        emit(
            m.method.as_str(),
            ordered(m.alpha_fits(), cfg),
            FitArtifact {
                config: cfg.to_json(),
                method: m.method.to_string(),
                selected: &m.selected,
                fits: &m.fits,
            },
        )?;
    }
    if let Some(reference) = &outcome.reference {
        emit(
            "reference",
            ordered(reference.fits.iter(), cfg),
            FitArtifact {
                config: cfg.to_json(),
                method: "reference".into(),
                selected: &[],
                fits: std::slice::from_ref(reference),
            },
        )?;
    }
    if let Some(report) = &outcome.report {
        out.write_json("report.json", report)?;
        out.write_table("frobenius.csv", &frobenius_table(report, cfg))?;
    }
    if !outcome.grid.is_empty() {
        out.write_table("grid.csv", &grid_table(&outcome.grid))?;
    }
    if cfg.emit_plot_data {
        let train = &outcome.prepared.train;
        let mut header = feature_header(train);
        header.push("y".into());
        header.push("inlier".into());
        let mut t = Table::new(header);
        for i in 0..train.len() {
            let mut row: Vec<String> = train.row(i).iter().map(|&v| num(v)).collect();
            row.push(num(train.responses()[i]));
            row.push(if train.is_inlier(i) { "1" } else { "0" }.into());
            t.push(row);
        }
        out.write_table("data.csv", &t)?;
        if let (Some(law), false) = (&outcome.prepared.law, curve_rows.is_empty()) {
            let mut header = vec!["x".to_string()];
            header.extend(cfg.alphas.iter().map(|&a| quantile_column(a)));
            let mut t = Table::new(header);
            let levels = cfg.quantile_levels()?;
            for x in &curve_rows {
                let mut row = vec![num(x[0])];
                row.extend(
                    levels
                        .iter()
                        .map(|&a| num(data::conditional_quantile_oracle(law, x[0], a))),
                );
                t.push(row);
            }
            out.write_table("curve_oracle.csv", &t)?;
        }
    }
    Ok(())
}

/// Writes the ranked table and one reproducible `fit` config per winner.
pub fn write_grid_artifacts(cfg: &RunConfig, outcome: &Outcome, out: &Artifacts) -> Result<()> {
    out.write_json("config.json", &cfg.to_json())?;
    out.write_table("grid.csv", &grid_table(&outcome.grid))?;
    for s in outcome.grid.iter().filter(|s| s.rank == 1) {
        let best = cell_config(cfg, &s.cell);
        out.write_json(
            &format!("best_{}_{}.json", s.cell.method, s.cell.alpha),
            &best.to_json(),
        )?;
    }
    Ok(())
}

pub fn format_frobenius(table: &Table) -> String {
    let widths: Vec<usize> = (0..table.header.len())
        .map(|c| {
            std::iter::once(&table.header[c])
                .chain(table.rows.iter().map(|r| &r[c]))
                .map(|s| s.len().min(12))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |cells: Vec<String>| -> String {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    out.push_str(&line(table.header.clone()));
    out.push('\n');
    for r in &table.rows {
        let cells = r
            .iter()
            .enumerate()
            .map(|(i, c)| match (i, c.parse::<f64>()) {
                (0, _) | (_, Err(_)) => c.clone(),
                (_, Ok(v)) => format!("{v:.4}"),
            })
            .collect();
        out.push_str(&line(cells));
        out.push('\n');
    }
    out
}
