//! Training curves as SVG: training loss and validation SI-SDR per epoch.

use std::path::{Path, PathBuf};

use plotters::prelude::*;
use selfremix::trainer::{read_metrics, MetricsRecord};

use crate::{CliError, Result};

const COLORS: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn label(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(0.1);
    (lo - pad, hi + pad)
}

fn plot_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Plot(e.to_string())
}

/// Two stacked panels, one series per log.
pub fn training_curves(logs: &[PathBuf], out: &Path) -> Result<()> {
    let runs: Vec<(String, Vec<MetricsRecord>)> = logs
        .iter()
        .map(|p| Ok((label(p), read_metrics(p)?)))
        .collect::<Result<_>>()?;
    if runs.iter().all(|(_, r)| r.is_empty()) {
        return Err(CliError::Usage("metrics logs are empty".into()));
    }
    let max_epoch = runs
        .iter()
        .flat_map(|(_, r)| r.iter().map(|m| m.epoch))
        .max()
        .unwrap_or(0)
        .max(1) as f64;

    let root = SVGBackend::new(out, (900, 700)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let panels = root.split_evenly((2, 1));
    type Getter = fn(&MetricsRecord) -> f64;
    let series: [(&str, Getter); 2] = [
        ("training loss (dB)", |m| m.train_loss_db),
        ("validation SI-SDR (dB)", |m| m.valid_sisdr_db),
    ];
    for (area, (name, get)) in panels.iter().zip(series) {
        let (lo, hi) = range(runs.iter().flat_map(|(_, r)| r.iter().map(get)));
        let mut chart = ChartBuilder::on(area)
            .caption(name, ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(0f64..max_epoch, lo..hi)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("epoch")
            .draw()
            .map_err(plot_err)?;
        for (i, (label, recs)) in runs.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            chart
                .draw_series(LineSeries::new(
                    recs.iter().map(|m| (m.epoch as f64, get(m))).filter(|p| p.1.is_finite()),
                    color.stroke_width(2),
                ))
                .map_err(plot_err)?
                .label(label.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}
