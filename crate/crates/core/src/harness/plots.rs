use std::path::Path;

use plotters::prelude::*;

use super::Engine;
use crate::bath_thermal::JxStatsTable;
use crate::error::{Error, Result};
use crate::observables::ObservableSeries;

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::InvalidInput(format!("plot: {e}"))
}

fn color(k: usize) -> RGBColor {
    [BLUE, RED, GREEN, MAGENTA, CYAN, BLACK][k % 6]
}

struct Curve<'a> {
    label: String,
    x: &'a [f64],
    y: &'a [f64],
}

fn line_plot(path: &Path, title: &str, x_label: &str, y_label: &str, curves: &[Curve]) -> Result<()> {
    let xs = curves.iter().flat_map(|c| c.x.iter());
    let ys = curves.iter().flat_map(|c| c.y.iter());
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (mut y0, mut y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(x1 > x0) || !y0.is_finite() {
        return Ok(());
    }
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    y0 -= pad;
    y1 += pad;

    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    for (k, c) in curves.iter().enumerate() {
        let col = color(k);
        chart
            .draw_series(LineSeries::new(c.x.iter().copied().zip(c.y.iter().copied()), col))
            .map_err(plot_err)?
            .label(c.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], col));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

type Channel = (&'static str, fn(&ObservableSeries) -> &[f64]);

const CHANNELS: [Channel; 3] = [
    ("pop0", |s| &s.pop0),
    ("purity", |s| &s.purity),
    ("fidelity", |s| &s.fidelity),
];

/// Engine overlays per `J_x`, a `J_x` sweep per engine and the statistics table.
pub(super) fn write_all(dir: &Path, overlays: &[(f64, &[(Engine, ObservableSeries)])], stats: &JxStatsTable) -> Result<()> {
    for &(name, get) in &CHANNELS {
        for (jx, runs) in overlays {
            let curves: Vec<Curve> = runs
                .iter()
                .map(|(e, s)| Curve {
                    label: e.name().to_string(),
                    x: &s.times,
                    y: get(s),
                })
                .collect();
            if curves.is_empty() {
                continue;
            }
            line_plot(
                &dir.join(format!("overlay_jx{jx}_{name}.svg")),
                &format!("{name}, J_x = {jx}"),
                "t",
                name,
                &curves,
            )?;
        }
        for engine in [Engine::Exact, Engine::Nmme, Engine::Markovian] {
            let curves: Vec<Curve> = overlays
                .iter()
                .filter_map(|(jx, runs)| {
                    runs.iter().find(|(e, _)| *e == engine).map(|(_, s)| Curve {
                        label: format!("J_x = {jx}"),
                        x: &s.times,
                        y: get(s),
                    })
                })
                .collect();
            if curves.is_empty() {
                continue;
            }
            line_plot(
                &dir.join(format!("sweep_{}_{name}.svg", engine.name())),
                &format!("{name}, {}", engine.name()),
                "t",
                name,
                &curves,
            )?;
        }
    }
    let jx: Vec<f64> = stats.rows.iter().map(|r| r.jx).collect();
    let b: Vec<f64> = stats.rows.iter().map(|r| r.mean_abs_bbar).collect();
    let c: Vec<f64> = stats.rows.iter().map(|r| r.mean_c).collect();
    if jx.len() > 1 {
        let curve = |label: &str, y| Curve {
            label: label.to_string(),
            x: &jx,
            y,
        };
        line_plot(&dir.join("stats_bbar.svg"), "mean |B|", "J_x", "|B|", &[curve("mean |B|", &b)])?;
        line_plot(&dir.join("stats_c.svg"), "mean C", "J_x", "C", &[curve("mean C", &c)])?;
    }
    Ok(())
}
