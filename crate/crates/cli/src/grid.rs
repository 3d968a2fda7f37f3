//! Parallel execution of the experiment grid and report emission.

use std::path::PathBuf;

use anyhow::{Context, Result};
use rayon::prelude::*;

use sync_mrac::sim::{run_simulation, RunMetrics, SimTrajectory};

use crate::config::{ExperimentConfig, GridCell, OutputFormat};
use crate::csvio::{write_summary, write_trajectory, SummaryRow};
use crate::plot::{write_figures, PlotCell};

#[derive(Debug, Clone)]
pub struct GridOptions {
    pub workers: usize,
    pub out_dir_override: Option<PathBuf>,
    pub h_override: Option<f64>,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            workers: 4,
            out_dir_override: None,
            h_override: None,
        }
    }
}

#[derive(Debug)]
pub struct CellOutcome {
    pub cell: GridCell,
    pub k_p: f64,
    pub k_i: Option<f64>,
    pub mu: f64,
    pub metrics: RunMetrics,
    pub trajectory: SimTrajectory,
    pub traj_file: PathBuf,
}

#[derive(Debug)]
pub struct GridReport {
    pub outcomes: Vec<CellOutcome>,
    pub summary_file: PathBuf,
    pub figure_files: Vec<PathBuf>,
    pub out_dir: PathBuf,
}

/// Run every grid cell (in parallel up to `workers`), write one trajectory
/// CSV per cell plus the metrics summary, and optionally the figure SVGs.
/// Diverged cells are reported in the summary, not treated as failures.
pub fn run_grid(config: &ExperimentConfig, opts: &GridOptions) -> Result<GridReport> {
    let mut config = config.clone();
    if let Some(h) = opts.h_override {
        config.h = h;
    }
    let out_dir = opts
        .out_dir_override
        .clone()
        .unwrap_or_else(|| config.out_dir.clone());
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;

    let cells = config.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .context("building worker pool")?;

    let results: Vec<Result<CellOutcome>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| -> Result<CellOutcome> {
                let setup = config.build_setup(*cell)?;
                let gain = &config.gains[cell.gain_idx];
                let mu = config.mu_values[cell.mu_idx];
                let (trajectory, metrics) = run_simulation(&setup)
                    .map_err(|e| anyhow::anyhow!("cell {} mu={mu}: {e}", gain.label()))?;
                let traj_file = out_dir.join(format!("traj_{}_mu{}.csv", gain.label(), mu));
                write_trajectory(&traj_file, &trajectory, config.plant.dim())?;
                Ok(CellOutcome {
                    cell: *cell,
                    k_p: gain.k_p(),
                    k_i: gain.k_i(),
                    mu,
                    metrics,
                    trajectory,
                    traj_file,
                })
            })
            .collect()
    });

    let mut outcomes = Vec::with_capacity(results.len());
    for r in results {
        outcomes.push(r?);
    }

    let mut rows: Vec<SummaryRow> = outcomes
        .iter()
        .map(|o| SummaryRow {
            k_p: o.k_p,
            k_i: o.k_i,
            mu: o.mu,
            metrics: o.metrics.clone(),
        })
        .collect();
    let summary_file = out_dir.join("summary.csv");
    write_summary(&summary_file, &mut rows)?;

    let figure_files = if config.formats.contains(&OutputFormat::Svg) {
        let plot_cells: Vec<PlotCell<'_>> = outcomes
            .iter()
            .map(|o| PlotCell {
                gain_label: config.gains[o.cell.gain_idx].label(),
                mu: o.mu,
                gain_idx: o.cell.gain_idx,
                mu_idx: o.cell.mu_idx,
                traj: &o.trajectory,
            })
            .collect();
        write_figures(&out_dir, &plot_cells)?
    } else {
        Vec::new()
    };

    Ok(GridReport {
        outcomes,
        summary_file,
        figure_files,
        out_dir,
    })
}
