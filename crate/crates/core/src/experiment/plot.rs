use std::fmt::Write as _;
use std::str::FromStr;

use super::metrics::Table;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    Return,
    Gamma,
    AdvantageMean,
}

impl Quantity {
    fn column(self) -> &'static str {
        match self {
            Quantity::Return => "mean_return",
            Quantity::Gamma => "gamma",
            Quantity::AdvantageMean => "advantage_mean",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Quantity::Return => "mean episode return",
            Quantity::Gamma => "discount",
            Quantity::AdvantageMean => "outer advantage mean",
        }
    }
}

impl FromStr for Quantity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "return" => Ok(Quantity::Return),
            "gamma" => Ok(Quantity::Gamma),
            "advantage_mean" | "advantage-mean" => Ok(Quantity::AdvantageMean),
            other => Err(Error::Config(format!("unknown plot quantity `{other}` (return, gamma, advantage_mean)"))),
        }
    }
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

struct Series {
    label: String,
    points: Vec<(f64, f64, f64)>,
}

fn series(label: &str, t: &Table, q: Quantity) -> Result<Series> {
    let x = t.column("meta_update")?;
    let m = t.column(&format!("{}_mean", q.column()))?;
    let s = t.column(&format!("{}_std", q.column()))?;
    let points = x
        .iter()
        .zip(&m)
        .zip(&s)
        .filter_map(|((x, m), s)| Some((((*x)?), (*m)?, s.unwrap_or(0.0))))
        .collect();
    Ok(Series {
        label: label.to_string(),
        points,
    })
}

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|k| k * mag).find(|s| span / s <= n as f64).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() * step;
    (0..=n + 1).map(|i| first + i as f64 * step).take_while(|v| *v <= hi + 1e-12 * span).collect()
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

/// Line chart of `quantity` against meta-update with a one-std band per
/// aggregate. Each entry is `(legend label, aggregate table)`.
pub fn emit_plot(aggregates: &[(String, Table)], quantity: Quantity) -> Result<String> {
    if aggregates.is_empty() {
        return Err(Error::Schema("no aggregate to plot".into()));
    }
    let all: Vec<Series> = aggregates.iter().map(|(l, t)| series(l, t, quantity)).collect::<Result<_>>()?;
    if all.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Schema(format!("aggregate has no `{}` values", quantity.column())));
    }
    let pts = all.iter().flat_map(|s| &s.points);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, m, s) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(m - s);
        y1 = y1.max(m + s);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-9 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for t in nice_ticks(x0, x1, 6) {
        let x = sx(t);
        let _ = writeln!(svg, r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/>"##, TOP, TOP + ph);
        let _ = writeln!(svg, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, TOP + ph + 16.0, fmt_tick(t));
    }
    for t in nice_ticks(y0, y1, 6) {
        let y = sy(t);
        let _ = writeln!(svg, r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, LEFT + pw);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, LEFT - 6.0, y + 4.0, fmt_tick(t));
    }
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">meta-update</text>"#, LEFT + pw / 2.0, H - 10.0);
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        quantity.label()
    );
    for (i, s) in all.iter().enumerate() {
        if s.points.is_empty() {
            continue;
        }
        let c = COLORS[i % COLORS.len()];
        let upper = s.points.iter().map(|&(x, m, d)| format!("{:.2},{:.2}", sx(x), sy(m + d)));
        let lower = s.points.iter().rev().map(|&(x, m, d)| format!("{:.2},{:.2}", sx(x), sy(m - d)));
        let band: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(svg, r#"<polygon points="{}" fill="{c}" fill-opacity="0.2" stroke="none"/>"#, band.join(" "));
        let line: Vec<String> = s.points.iter().map(|&(x, m, _)| format!("{:.2},{:.2}", sx(x), sy(m))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#, line.join(" "));
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(svg, r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{c}" stroke-width="3"/>"#, lx + 20.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 26.0, ly + 4.0, xml_escape(&s.label));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
