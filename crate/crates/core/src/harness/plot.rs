use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::TrainingRecord;
use crate::error::{ensure, Error, Result};

pub const VAL_PLOT_FILE: &str = "val_accuracy.svg";

fn draw_err(e: impl std::fmt::Display) -> Error {
    Error::Serde(format!("plot: {e}"))
}

/// Writes `val_accuracy.svg` under `dir`: one validation curve per record,
/// labelled by policy.
pub fn emit_plots(records: &[TrainingRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    ensure(records.iter().any(|r| !r.epochs.is_empty()), || "training record is empty".into())?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(VAL_PLOT_FILE);
    let max_epoch = records.iter().flat_map(|r| r.epochs.iter().map(|e| e.epoch)).max().unwrap_or(1);
    {
        let root = SVGBackend::new(&path, (800, 500)).into_drawing_area();
        root.fill(&WHITE).map_err(draw_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("validation accuracy", ("sans-serif", 22))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(0f64..(max_epoch as f64 + 1.0), 0f64..1f64)
            .map_err(draw_err)?;
        chart.configure_mesh().x_desc("epoch").y_desc("accuracy").draw().map_err(draw_err)?;
        for (i, r) in records.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            let pts: Vec<(f64, f64)> = r.epochs.iter().map(|e| (e.epoch as f64, e.val_accuracy)).collect();
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                .map_err(draw_err)?
                .label(r.policy.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
            chart.draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled()))).map_err(draw_err)?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .position(SeriesLabelPosition::LowerRight)
            .draw()
            .map_err(draw_err)?;
        root.present().map_err(draw_err)?;
    }
    Ok(vec![path])
}
