//! SVG figures from a run directory: one loss curve per logged stage and a
//! bar chart of probe accuracies.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{read_log, stage_steps, LogRecord};
use crate::pipeline::{CompareTable, METRICS_FILE};
use crate::probe::TransferReport;

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Invalid(format!("plotting {}: {e}", path.display()))
}

/// Trailing-window mean, used to make noisy minibatch curves readable.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// Draws `(label, points)` series on one set of axes.
pub fn line_chart(path: &Path, title: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return Err(Error::Invalid(format!("{title}: nothing to plot")));
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| plot_err(path, e))?;
    chart.configure_mesh().x_desc("step").y_desc("loss").draw().map_err(|e| plot_err(path, e))?;
    for (i, (label, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(points.iter().copied(), &color))
            .map_err(|e| plot_err(path, e))?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// Grouped bars: one group per model, one bar per dataset plus the average.
pub fn bar_chart(path: &Path, title: &str, table: &CompareTable) -> Result<()> {
    let mut labels: Vec<String> = table.datasets.clone();
    labels.push("avg".into());
    let per = labels.len() as f64 + 1.0;
    let width = table.rows.len() as f64 * per;
    let root = SVGBackend::new(path, (160 + 120 * table.rows.len() as u32, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(45)
        .build_cartesian_2d(0.0..width.max(1.0), 0.0..100.0)
        .map_err(|e| plot_err(path, e))?;
    let names: Vec<String> = table.rows.iter().map(|r| r.model.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .y_desc("accuracy (%)")
        .x_labels(names.len().max(1))
        .x_label_formatter(&|x| {
            let g = (*x / per).floor() as usize;
            names.get(g).cloned().unwrap_or_default()
        })
        .draw()
        .map_err(|e| plot_err(path, e))?;
    for (j, label) in labels.iter().enumerate() {
        let color = PALETTE[j % PALETTE.len()];
        let bars = table.rows.iter().enumerate().map(|(g, r)| {
            let v = if j < r.datasets.len() { r.datasets[j].accuracy } else { r.avg_cls };
            let x = g as f64 * per + j as f64 + 0.5;
            Rectangle::new([(x, 0.0), (x + 0.9, 100.0 * v)], color.filled())
        });
        chart
            .draw_series(bars)
            .map_err(|e| plot_err(path, e))?
            .label(label.as_str())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// Writes `loss_<stage>.svg` for every stage in the log and `probe.svg`
/// from the compare table or the latest transfer report. Returns the files.
pub fn write_report(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let log = dir.join(METRICS_FILE);
    let records = if log.exists() { read_log(&log)? } else { Vec::new() };
    let mut stages: Vec<String> = Vec::new();
    for r in &records {
        if let LogRecord::Step(s) = r {
            if !stages.contains(&s.stage) {
                stages.push(s.stage.clone());
            }
        }
    }
    for stage in &stages {
        let steps = stage_steps(&records, stage);
        let totals: Vec<f64> = steps.iter().map(|s| s.total).collect();
        let window = (steps.len() / 50).max(1);
        let smooth = moving_average(&totals, window);
        let series = vec![
            ("loss".to_string(), steps.iter().zip(&totals).map(|(s, &v)| (s.step as f64, v)).collect()),
            (format!("mean of last {window}"), steps.iter().zip(&smooth).map(|(s, &v)| (s.step as f64, v)).collect()),
        ];
        let file = dir.join(format!("loss_{}.svg", stage.replace('/', "_")));
        line_chart(&file, &format!("{stage} loss"), &series)?;
        written.push(file);
    }
    let csv = dir.join("compare.csv");
    let table = if csv.exists() {
        let text = std::fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?;
        Some(CompareTable::from_csv(&text)?)
    } else {
        let latest: Option<TransferReport> = records.iter().rev().find_map(|r| match r {
            LogRecord::Transfer(t) => Some(t.clone()),
            _ => None,
        });
        latest.map(|t| CompareTable::from_reports(vec![t]))
    };
    if let Some(table) = table.filter(|t| !t.rows.is_empty()) {
        let file = dir.join("probe.svg");
        bar_chart(&file, "linear probe accuracy", &table)?;
        written.push(file);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_windows() {
        assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
        assert_eq!(moving_average(&[2.0, 4.0], 1), vec![2.0, 4.0]);
    }

    #[test]
    fn svg_files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.svg");
        line_chart(&p, "t", &[("a".into(), vec![(1.0, 2.0), (2.0, 1.0)])]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("<svg"));
    }
}
