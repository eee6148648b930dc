//! Diversity-weight sweep: train and evaluate one cell per λ_div value,
//! isolating per-cell failures, and emit the driving-score table.

use std::io::Write;
use std::path::{Path, PathBuf};

use super::dataset::collect;
use super::evaluate::{evaluate, EvalSubject};
use super::train::train;
use super::RunConfig;
use crate::error::{Error, Result};

/// The default λ_div grid: 5·10⁻¹ down to 5·10⁻⁶.
pub const DEFAULT_GRID: [f64; 6] = [5e-1, 5e-2, 5e-3, 5e-4, 5e-5, 5e-6];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda_div: f64,
    pub ds_mean: Option<f64>,
    pub ds_std: Option<f64>,
    pub status: String,
}

pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    /// λ with the best mean driving score among completed cells.
    pub best_lambda: Option<f64>,
    pub table_path: PathBuf,
}

/// Parse a comma-separated λ list.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let grid: Vec<f64> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("bad lambda {s:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    Ok(grid)
}

/// Run the sweep. Each cell is its own experiment: the cell config (with its
/// λ_div) is hashed, data is collected under it, and training/evaluation run
/// from scratch. A failing cell is marked in the table without aborting the
/// others.
pub fn sweep(config: &RunConfig, grid: &[f64], out_dir: &Path) -> Result<SweepOutcome> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("sweep grid must be non-empty".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for (i, &lambda) in grid.iter().enumerate() {
        let mut cell_cfg = config.clone();
        cell_cfg.weights.lambda_div = lambda;
        let cell_dir = out_dir.join(format!("cell_{i}"));
        let result = run_cell(&cell_cfg, &cell_dir);
        match result {
            Ok((mean, std)) => rows.push(SweepRow {
                lambda_div: lambda,
                ds_mean: Some(mean),
                ds_std: Some(std),
                status: "ok".into(),
            }),
            Err(e) => rows.push(SweepRow {
                lambda_div: lambda,
                ds_mean: None,
                ds_std: None,
                status: format!("failed: {e}"),
            }),
        }
    }
    let best_lambda = rows
        .iter()
        .filter_map(|r| r.ds_mean.map(|m| (r.lambda_div, m)))
        .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite scores"))
        .map(|(l, _)| l);

    let table_path = out_dir.join("sweep.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&table_path)?);
    writeln!(f, "# config_hash={}", config.hash_hex())?;
    writeln!(f, "lambda_div,ds_mean,ds_std,status")?;
    for row in &rows {
        writeln!(
            f,
            "{},{},{},{}",
            row.lambda_div,
            row.ds_mean.map(|v| v.to_string()).unwrap_or_default(),
            row.ds_std.map(|v| v.to_string()).unwrap_or_default(),
            row.status.replace(',', ";")
        )?;
    }
    f.flush()?;
    Ok(SweepOutcome { rows, best_lambda, table_path })
}

fn run_cell(config: &RunConfig, cell_dir: &Path) -> Result<(f64, f64)> {
    std::fs::create_dir_all(cell_dir)?;
    let outcome = collect(config)?;
    let dataset_path = cell_dir.join("dataset.bin");
    outcome.dataset.write_file(&dataset_path)?;
    let trained = train(config, &outcome.dataset, cell_dir)?;
    let eval = evaluate(
        config,
        EvalSubject::Model(Box::new(trained.model)),
        None,
        &cell_dir.join("eval"),
    )?;
    Ok((eval.bench.ds_mean, eval.bench.ds_std))
}
