//! Chart helpers shared by the reporting code.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::trainer::StepRecord;

/// Environment variable naming a TrueType font for plot text.
pub const PLOT_FONT_ENV: &str = "CROMO_PLOT_FONT";

const SYSTEM_FONTS: [&str; 4] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
];

/// Register a `sans-serif` font once per process. Returns false when no
/// font could be loaded; charts are then drawn without text.
pub fn register_font() -> bool {
    static LOADED: OnceLock<bool> = OnceLock::new();
    *LOADED.get_or_init(|| {
        let candidates = std::env::var(PLOT_FONT_ENV)
            .ok()
            .into_iter()
            .chain(SYSTEM_FONTS.iter().map(|s| s.to_string()));
        for path in candidates {
            if let Ok(bytes) = fs::read(&path) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no font found for plot text; set {PLOT_FONT_ENV} to a .ttf file");
        false
    })
}

/// Per-step loss terms of a `metrics.log`, one line per term, task
/// boundaries marked by vertical rules.
pub fn plot_loss_curves(records: &[StepRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no step records to plot".into()));
    }
    draw_losses(records, path).map_err(|e| Error::Plot(e.to_string()))
}

fn draw_losses(
    records: &[StepRecord],
    path: &Path,
) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let text = register_font();
    let terms: [(&str, fn(&StepRecord) -> f64); 4] = [
        ("total", |r| r.loss.total),
        ("task", |r| r.loss.task_loss),
        ("distill", |r| r.loss.distill_loss),
        ("mixup", |r| r.loss.cromo_loss_v1 + r.loss.cromo_loss_v2),
    ];
    let values = records
        .iter()
        .flat_map(|r| terms.iter().map(move |(_, f)| f(r)));
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    let pad = ((hi - lo) * 0.05).max(1e-6);
    let first = records[0].step as f64;
    let last = records[records.len() - 1].step as f64;

    let root = BitMapBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(10);
    if text {
        builder
            .caption("training loss", ("sans-serif", 20))
            .x_label_area_size(30)
            .y_label_area_size(50);
    }
    let mut chart =
        builder.build_cartesian_2d(first..last.max(first + 1.0), (lo - pad)..(hi + pad))?;
    if text {
        chart.configure_mesh().x_desc("step").draw()?;
    } else {
        chart
            .configure_mesh()
            .disable_x_axis()
            .disable_y_axis()
            .draw()?;
    }
    for w in records.windows(2).filter(|w| w[0].task != w[1].task) {
        let x = w[1].step as f64;
        chart.draw_series(LineSeries::new(
            [(x, lo - pad), (x, hi + pad)],
            BLACK.mix(0.3),
        ))?;
    }
    for (i, (name, f)) in terms.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(
                records.iter().map(|r| (r.step as f64, f(r))),
                color,
            ))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
    }
    root.present()?;
    Ok(())
}
