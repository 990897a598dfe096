//! Command-line harness around `rqr-core`: experiment presets, generic
//! fitting, grid search and synthetic data generation.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure, 1 anything else.

pub mod args;
pub mod config;
pub mod error;
pub mod experiment;
pub mod output;

use std::path::PathBuf;

use serde::Serialize;

use args::{Cli, Command, GenArgs, RunArgs};
use config::{CommandKind, RunConfig};
use error::{exit, Result};
use output::Artifacts;

pub use error::Error;

/// Where each setting of a run came from. Written next to the artifacts but
/// not part of the reproducible set.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub command: String,
    pub version: String,
    pub preset: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_file: Option<PathBuf>,
    pub flags: Vec<String>,
    pub dataset: String,
}

/// Preset, then config file, then flags.
pub fn resolve(command: CommandKind, args: &RunArgs) -> Result<(RunConfig, Provenance)> {
    let mut cfg = RunConfig::preset(command);
    if let Some(path) = &args.config {
        cfg = cfg.from_file(path)?;
        if cfg.command != command {
            return Err(Error::Config(format!(
                "{} holds a `{}` configuration, not `{}`",
                path.display(),
                cfg.command.as_str(),
                command.as_str()
            )));
        }
    }
    let flags = args.apply(&mut cfg)?;
    let provenance = Provenance {
        command: command.as_str().into(),
        version: env!("CARGO_PKG_VERSION").into(),
        preset: command.as_str().into(),
        config_file: args.config.clone(),
        flags,
        dataset: String::new(),
    };
    Ok((cfg, provenance))
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::StarCluster(a) => run_experiment(CommandKind::StarCluster, &a),
        Command::Toy(a) => run_experiment(CommandKind::Toy, &a),
        Command::Fit(a) => run_experiment(CommandKind::Fit, &a),
        Command::Grid(a) => run_experiment(CommandKind::Grid, &a),
        Command::GenData(a) => gen_data(&a),
    }
}

fn run_experiment(command: CommandKind, args: &RunArgs) -> Result<i32> {
    let (cfg, mut provenance) = resolve(command, args)?;
    if args.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg.to_json())?);
        return Ok(exit::OK);
    }
    cfg.validate()?;
    let out = Artifacts::create(&cfg.out_dir)?;
    eprintln!(
        "rqr {}: preset {}{}{}",
        command.as_str(),
        provenance.preset,
        provenance
            .config_file
            .as_ref()
            .map(|p| format!(", config file {}", p.display()))
            .unwrap_or_default(),
        if provenance.flags.is_empty() {
            String::new()
        } else {
            format!(", flags {}", provenance.flags.join(" "))
        }
    );

    let outcome = experiment::execute(&cfg)?;
    provenance.dataset = outcome.prepared.train.provenance().to_string();
    out.write_json("provenance.json", &provenance)?;

    if command == CommandKind::Grid {
        experiment::write_grid_artifacts(&cfg, &outcome, &out)?;
        for s in outcome.grid.iter().filter(|s| s.rank == 1) {
            println!(
                "{:8} alpha={:<5} {}={:<6} score={:.6}",
                s.cell.method,
                s.cell.alpha,
                s.cell.parameter.as_deref().unwrap_or("-"),
                s.cell
                    .value
                    .map(|v| v.to_string())
                    .unwrap_or_else(|| "-".into()),
                s.score
            );
        }
    } else {
        experiment::write_fit_artifacts(&cfg, &outcome, &out)?;
        match &outcome.report {
            Some(report) => {
                println!(
                    "frobenius distance to the inlier-only fit ({})",
                    report.dataset
                );
                print!(
                    "{}",
                    experiment::format_frobenius(&experiment::frobenius_table(report, &cfg))
                );
            }
            None => println!("no inlier mask: fitted models written without a report"),
        }
    }
    eprintln!("artifacts in {}", out.dir().display());
    Ok(exit::OK)
}

fn gen_data(args: &GenArgs) -> Result<i32> {
    let spec = args.spec();
    let data = rqr_core::data::gen_synthetic(&spec)?;
    let mut table = output::Table::new(["x", "y", "inlier"]);
    for i in 0..data.len() {
        table.push(vec![
            output::num(data.row(i)[0]),
            output::num(data.responses()[i]),
            if data.is_inlier(i) { "1" } else { "0" }.into(),
        ]);
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| Error::Write {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    output::write_atomic(&args.out, table.to_csv().as_bytes())?;
    let mut meta = serde_json::to_string_pretty(&spec)?;
    meta.push('\n');
    output::write_atomic(&args.out.with_extension("json"), meta.as_bytes())?;
    eprintln!("wrote {} rows to {}", data.len(), args.out.display());
    Ok(exit::OK)
}
