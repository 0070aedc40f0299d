use std::path::Path;

use plotters::prelude::*;

use super::{sensitivity_at, FrocCurve, CPM_FPS};
use crate::error::{Error, Result};

/// Renders sensitivity against FP/scan (log2 axis over the CPM range) as SVG.
pub fn render_froc_svg(curve: &FrocCurve, path: impl AsRef<Path>, title: &str) -> Result<()> {
    let err = |e: String| Error::Evaluation(format!("plot {}: {e}", path.as_ref().display()));
    let root = SVGBackend::new(path.as_ref(), (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(48)
        .build_cartesian_2d((0.1f64..10.0).log_scale(), 0.0f64..1.0)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("false positives per scan")
        .y_desc("sensitivity")
        .draw()
        .map_err(|e| err(e.to_string()))?;
    let n = 200;
    let series = (0..=n).map(|i| {
        let f = 0.1 * 100f64.powf(i as f64 / n as f64);
        (f, sensitivity_at(curve, f))
    });
    chart.draw_series(LineSeries::new(series, &BLUE)).map_err(|e| err(e.to_string()))?;
    chart
        .draw_series(CPM_FPS.iter().map(|&f| Circle::new((f, sensitivity_at(curve, f)), 3, RED.filled())))
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))?;
    Ok(())
}
