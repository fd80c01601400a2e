//! One-axis parameter sweeps over an experiment config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::experiment::run_experiment;
use crate::trainer::RunOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    BufferBudget,
    Alpha,
    Zeta,
    Strategy,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 4] = [
        SweepAxis::BufferBudget,
        SweepAxis::Alpha,
        SweepAxis::Zeta,
        SweepAxis::Strategy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::BufferBudget => "buffer_budget",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Zeta => "zeta",
            SweepAxis::Strategy => "strategy",
        }
    }

    /// Config key the axis overrides.
    pub fn key(self) -> String {
        format!("trainer.{}", self.name())
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown sweep axis `{s}` (buffer_budget, alpha, zeta, strategy)"
                ))
            })
    }
}

/// Result of one sweep cell. A failed cell keeps its error message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: String,
    pub config_hash: String,
    pub run_dir: PathBuf,
    pub outcome: std::result::Result<MetricsReport, String>,
}

/// One config per value, validated before anything runs.
pub fn sweep_configs(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
) -> Result<Vec<ExperimentConfig>> {
    if values.is_empty() {
        return Err(Error::Config(format!(
            "sweep over {} needs at least one value",
            axis.name()
        )));
    }
    values
        .iter()
        .map(|v| {
            let mut cfg = base.with_overrides(&[format!("{}={}", axis.key(), v.trim())])?;
            cfg.name = format!("{}-{}-{}", base.name, axis.name(), v.trim());
            Ok(cfg)
        })
        .collect()
}

/// Run every cell in order under `base.output_root`. Cell failures are
/// recorded and the sweep moves on.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
) -> Result<Vec<SweepCell>> {
    let configs = sweep_configs(base, axis, values)?;
    let mut cells = Vec::with_capacity(configs.len());
    for (cfg, value) in configs.iter().zip(values) {
        let run_dir = cfg.run_dir();
        log::info!("sweep {}={value}: {}", axis.name(), run_dir.display());
        let opts = RunOptions {
            run_dir: Some(run_dir.clone()),
            ..RunOptions::default()
        };
        let outcome = run_experiment(cfg, &opts)
            .map(|o| o.report.metrics)
            .map_err(|e| {
                log::error!("sweep cell {}={value} failed: {e}", axis.name());
                e.to_string()
            });
        cells.push(SweepCell {
            value: value.trim().to_string(),
            config_hash: cfg.hash(),
            run_dir,
            outcome,
        });
    }
    Ok(cells)
}

pub const SWEEP_CSV: &str = "tables.csv";

pub fn sweep_csv(axis: SweepAxis, cells: &[SweepCell]) -> String {
    let mut s = format!("{},la,wp,tp,knn,status,run_dir\n", axis.name());
    for c in cells {
        let dir = c.run_dir.display();
        match &c.outcome {
            Ok(m) => {
                let knn = m
                    .knn_accuracy
                    .map(|v| format!("{v:.6}"))
                    .unwrap_or_default();
                let _ = writeln!(
                    s,
                    "{},{:.6},{:.6},{:.6},{knn},ok,{dir}",
                    c.value, m.la, m.wp, m.tp
                );
            }
            Err(e) => {
                let _ = writeln!(
                    s,
                    "{},,,,,\"failed: {}\",{dir}",
                    c.value,
                    e.replace('"', "'")
                );
            }
        }
    }
    s
}

/// Write `tables.csv` and `sweep_<axis>.png` (final LA per cell) to `out`.
pub fn write_sweep(out: &Path, axis: SweepAxis, cells: &[SweepCell]) -> Result<Vec<PathBuf>> {
    if cells.is_empty() {
        return Err(Error::InvalidArgument("no sweep cells to write".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let csv = out.join(SWEEP_CSV);
    fs::write(&csv, sweep_csv(axis, cells)).map_err(|e| Error::io(&csv, e))?;
    let png = out.join(format!("sweep_{}.png", axis.name()));
    plot_sweep(&png, axis, cells).map_err(|e| Error::Plot(e.to_string()))?;
    Ok(vec![csv, png])
}

fn plot_sweep(
    path: &Path,
    axis: SweepAxis,
    cells: &[SweepCell],
) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let text = crate::plot::register_font();
    let root = BitMapBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE)?;
    let n = cells.len();
    let mut builder = ChartBuilder::on(&root);
    builder.margin(10);
    if text {
        builder
            .caption(format!("final LA by {}", axis.name()), ("sans-serif", 20))
            .x_label_area_size(30)
            .y_label_area_size(40);
    }
    let mut chart = builder.build_cartesian_2d(-0.5f64..(n as f64 - 0.5), 0f64..100f64)?;
    let label = |x: &f64| {
        let i = x.round();
        if (x - i).abs() < 1e-9 && i >= 0.0 && (i as usize) < n {
            cells[i as usize].value.clone()
        } else {
            String::new()
        }
    };
    if text {
        chart
            .configure_mesh()
            .x_labels(n.max(2) * 2 + 1)
            .x_label_formatter(&label)
            .x_desc(axis.name())
            .y_desc("LA (%)")
            .draw()?;
    } else {
        chart
            .configure_mesh()
            .disable_x_axis()
            .disable_y_axis()
            .draw()?;
    }
    let pts: Vec<(f64, f64)> = cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.outcome.as_ref().ok().map(|m| (i as f64, 100.0 * m.la)))
        .collect();
    chart.draw_series(LineSeries::new(pts.clone(), BLUE))?;
    chart.draw_series(pts.iter().map(|&p| Circle::new(p, 4, BLUE.filled())))?;
    root.present()?;
    Ok(())
}
