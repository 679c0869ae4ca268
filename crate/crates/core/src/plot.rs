//! Self-contained SVG line charts of a sweep table.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::sweep::SweepRow;

const CHART_W: f64 = 560.0;
const CHART_H: f64 = 300.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 140.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

type Metric = (&'static str, fn(&SweepRow) -> f64);

const METRICS: [Metric; 4] = [
    ("success_rate", |r| r.success_rate),
    ("e_trans_mean [m]", |r| r.e_trans_mean),
    ("e_axe_mean [m]", |r| r.e_axe_mean),
    ("iou_mean", |r| r.iou_mean),
];

/// Number formatting for tick labels: at most 4 significant digits.
fn tick(x: f64) -> String {
    let s = format!("{:.4}", x);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn px(x: f64) -> String {
    fmt_f64((x * 100.0).round() / 100.0)
}

/// Stacks one chart per metric vertically; each method is one series over
/// the noise level.
pub fn plot_sweep(rows: &[SweepRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::EmptyTable);
    }
    let mut series: BTreeMap<&str, Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        series.entry(r.method.as_str()).or_default().push(r);
    }
    for s in series.values_mut() {
        s.sort_by(|a, b| a.level.total_cmp(&b.level));
    }
    let (lo, hi) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| {
            (a.min(r.level), b.max(r.level))
        });
    let (x0, x1) = if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    };

    let total_h = CHART_H * METRICS.len() as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#,
        w = px(CHART_W),
        h = px(total_h)
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (ci, (name, get)) in METRICS.iter().enumerate() {
        let top = ci as f64 * CHART_H;
        let (pl, pr) = (MARGIN_L, CHART_W - MARGIN_R);
        let (pt, pb) = (top + MARGIN_T, top + CHART_H - MARGIN_B);
        let vals: Vec<f64> = rows.iter().map(get).filter(|v| v.is_finite()).collect();
        let ymax = vals.iter().copied().fold(0.0f64, f64::max);
        let ymin = vals.iter().copied().fold(0.0f64, f64::min);
        let (y0, y1) = if ymax > ymin {
            (ymin, ymax * 1.05)
        } else {
            (ymin, ymin + 1.0)
        };
        let sx = |x: f64| pl + (x - x0) / (x1 - x0) * (pr - pl);
        let sy = |y: f64| pb - (y - y0) / (y1 - y0) * (pb - pt);

        let _ = writeln!(svg, r#"<g class="chart" data-metric="{name}">"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="14">{name}</text>"#,
            px(pl),
            px(top + 24.0)
        );
        let _ = writeln!(
            svg,
            r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#,
            l = px(pl),
            t = px(pt),
            b = px(pb),
            r = px(pr)
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                px(sx(xv)),
                px(pb + 18.0),
                tick(xv)
            );
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                px(pl - 6.0),
                px(sy(yv) + 4.0),
                tick(yv)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">noise level</text>"#,
            px(0.5 * (pl + pr)),
            px(pb + 38.0)
        );
        for (si, (method, pts)) in series.iter().enumerate() {
            let color = COLORS[si % COLORS.len()];
            let coords: Vec<(f64, f64)> = pts
                .iter()
                .filter(|r| get(r).is_finite())
                .map(|r| (sx(r.level), sy(get(r))))
                .collect();
            let d: Vec<String> = coords
                .iter()
                .enumerate()
                .map(|(i, (x, y))| {
                    format!("{}{} {}", if i == 0 { "M" } else { "L" }, px(*x), px(*y))
                })
                .collect();
            if !d.is_empty() {
                let _ = writeln!(
                    svg,
                    r#"<path class="series" data-method="{method}" d="{}" stroke="{color}" stroke-width="2" fill="none"/>"#,
                    d.join(" ")
                );
            }
            for (x, y) in &coords {
                let _ = writeln!(
                    svg,
                    r#"<circle cx="{}" cy="{}" r="3" fill="{color}"/>"#,
                    px(*x),
                    px(*y)
                );
            }
            let ly = pt + 10.0 + 18.0 * si as f64;
            let _ = writeln!(
                svg,
                r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/>"#,
                px(pr + 12.0),
                px(pr + 32.0),
                y = px(ly)
            );
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}">{method}</text>"#,
                px(pr + 38.0),
                px(ly + 4.0)
            );
        }
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
