//! Self-contained SVG line charts of aggregate tables: one line per
//! condition (and split), SEM error bars, no external renderer.

use std::fmt::Write as _;

use anyhow::{bail, Result};
use teachsim::agents::{Channel, Split};
use teachsim::experiments::AggregateTable;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

fn color(channel: Channel) -> &'static str {
    match channel {
        Channel::Language => "#1f77b4",
        Channel::DemoPedagogical => "#d62728",
        Channel::DemoRandom => "#7f7f7f",
    }
}

fn axis_label(axis: &str) -> &str {
    match axis {
        "capacity" => "channel capacity (tokens K / demos k)",
        "n" => "values per feature (n)",
        "train_fraction" => "fraction of world states seen in training",
        other => other,
    }
}

/// Renders `table` as SVG. Fails on a table with no plottable point.
pub fn render(table: &AggregateTable) -> Result<String> {
    let points: Vec<(f64, f64, f64)> = table
        .rows
        .iter()
        .filter_map(|r| Some((r.axis_value, r.mean()?, r.sem()?)))
        .collect();
    if points.is_empty() {
        bail!("table has no rows with values to plot");
    }
    let (mut x0, mut x1) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    if x0 == x1 {
        x0 -= 1.0;
        x1 += 1.0;
    }
    let lowest = points.iter().map(|p| p.1 - p.2).fold(0.0, f64::min);
    let (y0, y1) = ((lowest * 5.0).floor() / 5.0, 1.0f64.max(points.iter().map(|p| p.1 + p.2).fold(0.0, f64::max)));
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">Final normalized reward</text>"#,
        LEFT + plot_w / 2.0
    );

    // Axes, ticks and grid.
    let _ = writeln!(
        svg,
        r#"<path d="M{LEFT:.2} {TOP:.2} V{:.2} H{:.2}" fill="none" stroke="black"/>"#,
        TOP + plot_h,
        LEFT + plot_w
    );
    let mut y = y0;
    while y <= y1 + 1e-9 {
        let py = sy(y);
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT:.2}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{y:.1}</text>"##,
            LEFT + plot_w,
            LEFT - 6.0,
            py + 4.0
        );
        y += 0.2;
    }
    let mut ticks: Vec<f64> = points.iter().map(|p| p.0).collect();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for t in &ticks {
        let px = sx(*t);
        let _ = writeln!(
            svg,
            r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{t}</text>"#,
            TOP + plot_h,
            TOP + plot_h + 5.0,
            TOP + plot_h + 18.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 18.0,
        axis_label(&table.axis)
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(18 {:.2}) rotate(-90)" text-anchor="middle">normalized reward (mean ± SEM)</text>"#,
        TOP + plot_h / 2.0
    );

    let splits = table.splits();
    let mut legend = 0;
    for condition in table.conditions() {
        for &split in &splits {
            let series: Vec<(f64, f64, f64)> = table
                .series(condition, split)
                .iter()
                .filter_map(|r| Some((r.axis_value, r.mean()?, r.sem()?)))
                .collect();
            if series.is_empty() {
                continue;
            }
            let stroke = color(condition);
            let dash = if split == Split::Train { r#" stroke-dasharray="5 4""# } else { "" };
            let path: Vec<String> = series.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1))).collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="2"{dash}/>"#,
                path.join(" ")
            );
            for (x, m, s) in &series {
                let (px, lo, hi) = (sx(*x), sy(m - s), sy(m + s));
                let _ = writeln!(
                    svg,
                    r#"<path d="M{:.2} {lo:.2} H{:.2} M{px:.2} {lo:.2} V{hi:.2} M{:.2} {hi:.2} H{:.2}" stroke="{stroke}"/><circle cx="{px:.2}" cy="{:.2}" r="3" fill="{stroke}"/>"#,
                    px - 4.0,
                    px + 4.0,
                    px - 4.0,
                    px + 4.0,
                    sy(*m)
                );
            }
            let ly = TOP + 10.0 + legend as f64 * 20.0;
            let lx = WIDTH - RIGHT + 15.0;
            let label = if splits.len() > 1 {
                format!("{} ({})", condition.name(), split.name())
            } else {
                condition.name().to_string()
            };
            let _ = writeln!(
                svg,
                r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{stroke}" stroke-width="2"{dash}/><text x="{:.2}" y="{:.2}">{label}</text>"#,
                lx + 24.0,
                lx + 30.0,
                ly + 4.0
            );
            legend += 1;
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
