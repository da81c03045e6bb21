//! Static SVG plots of the emitted data. The CSVs remain the contract.

use plotters::prelude::*;

use crate::error::CliError;
use crate::output::Staging;

const PALETTE: [RGBColor; 5] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(255, 127, 14),
];

fn bounds(series: &[(&str, Vec<(f64, f64)>)], log: bool) -> Option<((f64, f64), (f64, f64))> {
    let pts = series.iter().flat_map(|(_, v)| v.iter()).filter(|(x, y)| {
        x.is_finite() && y.is_finite() && (!log || (*x > 0.0 && *y > 0.0))
    });
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    let mut any = false;
    for &(x, y) in pts {
        any = true;
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !any {
        return None;
    }
    let pad = |lo: f64, hi: f64| {
        if log {
            (lo / 1.2, hi * 1.2)
        } else if hi > lo {
            let d = 0.05 * (hi - lo);
            (lo - d, hi + d)
        } else {
            (lo - 1.0, hi + 1.0)
        }
    };
    Some((pad(x0, x1), pad(y0, y1)))
}

fn draw_err(e: impl std::fmt::Display) -> CliError {
    CliError::Other(anyhow::anyhow!("plot: {e}"))
}

/// Line plot of several series; `log` puts both axes on a log scale.
pub fn lines(
    out: &mut Staging,
    name: &str,
    title: &str,
    labels: (&str, &str),
    series: &[(&str, Vec<(f64, f64)>)],
    log: bool,
) -> Result<(), CliError> {
    let Some(((x0, x1), (y0, y1))) = bounds(series, log) else {
        log::warn!("{name}: nothing to plot");
        return Ok(());
    };
    let path = out.path(name);
    {
        let root = SVGBackend::new(&path, (800, 560)).into_drawing_area();
        root.fill(&WHITE).map_err(draw_err)?;
        let mut builder = ChartBuilder::on(&root);
        builder.caption(title, ("sans-serif", 20)).margin(16).x_label_area_size(40).y_label_area_size(70);
        macro_rules! body {
            ($chart:expr) => {{
                let mut chart = $chart;
                chart
                    .configure_mesh()
                    .x_desc(labels.0)
                    .y_desc(labels.1)
                    .draw()
                    .map_err(draw_err)?;
                for (i, (label, pts)) in series.iter().enumerate() {
                    let color = PALETTE[i % PALETTE.len()];
                    let pts: Vec<(f64, f64)> =
                        pts.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
                    chart
                        .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                        .map_err(draw_err)?
                        .label(*label)
                        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
                    if log {
                        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled()))).map_err(draw_err)?;
                    }
                }
                chart
                    .configure_series_labels()
                    .background_style(WHITE.mix(0.8))
                    .border_style(BLACK)
                    .draw()
                    .map_err(draw_err)?;
            }};
        }
        if log {
            body!(builder.build_cartesian_2d((x0..x1).log_scale(), (y0..y1).log_scale()).map_err(draw_err)?);
        } else {
            body!(builder.build_cartesian_2d(x0..x1, y0..y1).map_err(draw_err)?);
        }
        root.present().map_err(draw_err)?;
    }
    out.add(name);
    Ok(())
}
