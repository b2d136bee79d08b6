//! Static SVG line charts of accuracy against the number of seen classes.

use std::fmt::Write;
use std::path::Path;

use crate::error::{LabError, Result};
use crate::runner::RunReport;

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 460.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 48.0;
const BOTTOM: f64 = 56.0;

const PALETTE: &[&str] = &[
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#393b79",
];

/// One line of the chart.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub seen_classes: Vec<usize>,
    /// Stage accuracies in `[0, 1]`.
    pub accuracies: Vec<f64>,
}

impl From<&RunReport> for Series {
    fn from(r: &RunReport) -> Self {
        Series {
            name: r.algorithm().to_string(),
            seen_classes: r.seen_classes().to_vec(),
            accuracies: r.result.stage_accuracies.clone(),
        }
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn check(series: &[Series]) -> Result<()> {
    let first = series.first().ok_or_else(|| LabError::Plot("no runs given".into()))?;
    for s in series {
        if s.accuracies.is_empty() || s.accuracies.len() != s.seen_classes.len() {
            return Err(LabError::Plot(format!("run `{}` has an inconsistent stage list", s.name)));
        }
        if s.accuracies.len() != first.accuracies.len() {
            return Err(LabError::Plot(format!(
                "run `{}` has {} stages but `{}` has {}",
                s.name,
                s.accuracies.len(),
                first.name,
                first.accuracies.len()
            )));
        }
        if s.seen_classes != first.seen_classes {
            return Err(LabError::Plot(format!(
                "runs `{}` and `{}` see different class counts per stage",
                s.name, first.name
            )));
        }
        if let Some(a) = s.accuracies.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(LabError::Plot(format!("run `{}` has accuracy {a} outside [0, 1]", s.name)));
        }
    }
    Ok(())
}

/// Renders the chart. All series must share the per-stage class counts.
pub fn render_svg(series: &[Series]) -> Result<String> {
    check(series)?;
    let xs = &series[0].seen_classes;
    let (xmin, xmax) = (xs[0] as f64, *xs.last().unwrap() as f64);
    let (xmin, xmax) = if xmax > xmin { (xmin, xmax) } else { (xmin - 1.0, xmax + 1.0) };
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - xmin) / (xmax - xmin) * plot_w;
    let py = |pct: f64| TOP + (100.0 - pct) / 100.0 * plot_h;

    let mut svg = String::new();
    let w = &mut svg;
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(w, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(
        w,
        r#"<text class="title" x="{:.2}" y="24" text-anchor="middle" font-size="15">Incremental accuracy</text>"#,
        LEFT + plot_w / 2.0
    )
    .unwrap();

    writeln!(w, r##"<g class="axes" stroke="#444" stroke-width="1">"##).unwrap();
    writeln!(
        w,
        r#"<line x1="{LEFT}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/>"#,
        TOP + plot_h,
        LEFT + plot_w,
        TOP + plot_h
    )
    .unwrap();
    writeln!(w, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.2}"/>"#, TOP + plot_h).unwrap();
    writeln!(w, "</g>").unwrap();

    writeln!(w, r##"<g class="grid" stroke="#ddd" stroke-width="1">"##).unwrap();
    for pct in (0..=100).step_by(20) {
        let y = py(pct as f64);
        writeln!(w, r#"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}"/>"#, LEFT + plot_w).unwrap();
    }
    writeln!(w, "</g>").unwrap();

    for pct in (0..=100).step_by(20) {
        writeln!(
            w,
            r#"<text class="tick y-tick" x="{:.2}" y="{:.2}" text-anchor="end">{pct}</text>"#,
            LEFT - 6.0,
            py(pct as f64) + 4.0
        )
        .unwrap();
    }
    for &x in xs {
        writeln!(
            w,
            r#"<text class="tick x-tick" x="{:.2}" y="{:.2}" text-anchor="middle">{x}</text>"#,
            px(x as f64),
            TOP + plot_h + 18.0
        )
        .unwrap();
    }
    writeln!(
        w,
        r#"<text class="axis-label" x="{:.2}" y="{:.2}" text-anchor="middle">Number of classes</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 14.0
    )
    .unwrap();
    writeln!(
        w,
        r#"<text class="axis-label" x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">Top-1 accuracy (%)</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    )
    .unwrap();

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let name = escape(&s.name);
        let points: Vec<String> = s
            .seen_classes
            .iter()
            .zip(&s.accuracies)
            .map(|(&x, &a)| format!("{:.2},{:.2}", px(x as f64), py(100.0 * a)))
            .collect();
        writeln!(w, r#"<g class="series" data-name="{name}">"#).unwrap();
        writeln!(
            w,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points.join(" ")
        )
        .unwrap();
        for (&x, &a) in s.seen_classes.iter().zip(&s.accuracies) {
            let (cx, cy) = (px(x as f64), py(100.0 * a));
            writeln!(w, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="3" fill="{color}"/>"#).unwrap();
            writeln!(
                w,
                r#"<text class="value" x="{cx:.2}" y="{:.2}" text-anchor="middle" font-size="10" fill="{color}">{:.2}</text>"#,
                cy - 7.0,
                100.0 * a
            )
            .unwrap();
        }
        writeln!(w, "</g>").unwrap();
    }

    writeln!(w, r#"<g class="legend">"#).unwrap();
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let y = TOP + 10.0 + 20.0 * i as f64;
        let x = LEFT + plot_w + 16.0;
        writeln!(
            w,
            r#"<line x1="{x:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-width="2"/>"#,
            x + 22.0
        )
        .unwrap();
        writeln!(
            w,
            r#"<text class="legend-label" x="{:.2}" y="{:.2}">{}</text>"#,
            x + 28.0,
            y + 4.0,
            escape(&s.name)
        )
        .unwrap();
    }
    writeln!(w, "</g>").unwrap();
    writeln!(w, "</svg>").unwrap();
    Ok(svg)
}

/// Loads `results.json` files and writes their chart to `out`.
pub fn plot_files(results: &[impl AsRef<Path>], out: &Path) -> Result<()> {
    let reports = results
        .iter()
        .map(|p| RunReport::load(p.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let series: Vec<Series> = reports.iter().map(Series::from).collect();
    let svg = render_svg(&series)?;
    std::fs::write(out, svg).map_err(|e| LabError::io(out, e))
}
