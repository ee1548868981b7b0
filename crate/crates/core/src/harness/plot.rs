//! SVG plots of optimization curves and success rates.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::harness::eval::{AttackReport, Method, Split};
use crate::scenesim::ObjectClass;

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: format!("plotting failed: {e}"),
    }
}

/// Trailing moving average.
pub fn smooth(curve: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(curve.len());
    let mut sum = 0.0;
    for (i, v) in curve.iter().enumerate() {
        sum += v;
        if i >= w {
            sum -= curve[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// Objective per iteration for each cluster's patch against the all-frames patch.
pub fn plot_convergence(path: &Path, title: &str, clusters: &[Vec<f64>], all_data: &[f64]) -> Result<()> {
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let x_max = clusters.iter().map(Vec::len).chain([all_data.len()]).max().unwrap_or(1).max(2);
    let y_max = clusters
        .iter()
        .flatten()
        .chain(all_data)
        .copied()
        .fold(0.0f64, f64::max)
        .max(1e-3)
        * 1.05;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(0usize..x_max, 0.0..y_max)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("iteration")
        .y_desc("objective (moving average)")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    let window = 20;
    for (id, c) in clusters.iter().enumerate() {
        let color = PALETTE[id % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(smooth(c, window).into_iter().enumerate(), color.stroke_width(2)))
            .map_err(|e| plot_err(path, e))?
            .label(format!("cluster {id}"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .draw_series(LineSeries::new(smooth(all_data, window).into_iter().enumerate(), BLACK.stroke_width(2)))
        .map_err(|e| plot_err(path, e))?
        .label("all frames")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], BLACK.stroke_width(2)));
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// Grouped bars: success rate per sign and split for each method.
pub fn plot_success_rates(path: &Path, report: &AttackReport) -> Result<()> {
    let mut signs: Vec<ObjectClass> = report.cells.iter().map(|c| c.sign).collect();
    signs.sort();
    signs.dedup();
    let groups: Vec<(ObjectClass, Split)> = signs
        .iter()
        .flat_map(|&s| Split::ALL.into_iter().map(move |p| (s, p)))
        .collect();
    let methods = Method::ALL;
    let slots = groups.len() * (methods.len() + 1);
    let root = SVGBackend::new(path, (160 + 60 * slots as u32, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Attack success rate", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0..slots.max(1) as f64, 0.0..1.0)
        .map_err(|e| plot_err(path, e))?;
    let labels: Vec<String> = groups
        .iter()
        .map(|(s, p)| format!("{} / {}", s.display_name(), p.name()))
        .collect();
    let stride = (methods.len() + 1) as f64;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(groups.len().max(1) * 2)
        .x_label_formatter(&|x| {
            let g = ((*x - 0.5 * (stride - 1.0)) / stride).round();
            let on_center = (x - (g * stride + 0.5 * (stride - 1.0))).abs() < 0.25;
            match (on_center, labels.get(g.max(0.0) as usize)) {
                (true, Some(l)) => l.clone(),
                _ => String::new(),
            }
        })
        .y_desc("success rate")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    for (mi, m) in methods.iter().enumerate() {
        let color = PALETTE[mi % PALETTE.len()];
        let bars: Vec<Rectangle<(f64, f64)>> = groups
            .iter()
            .enumerate()
            .filter_map(|(gi, (s, p))| {
                let r = report.cell(*s, *p, *m)?.success_rate?;
                let x0 = gi as f64 * stride + mi as f64;
                Some(Rectangle::new([(x0 + 0.1, 0.0), (x0 + 0.9, r)], color.filled()))
            })
            .collect();
        chart
            .draw_series(bars)
            .map_err(|e| plot_err(path, e))?
            .label(m.name())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}
