//! Loss-versus-step curves as a standalone SVG.

use std::fmt::Write as _;
use std::str::FromStr;

use super::{LogRow, RunLog, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Total,
    /// mlm + itm
    Matching,
    Mlm,
    Itm,
    Visual,
    ItmAcc,
}

impl Metric {
    pub fn of(self, r: &LogRow) -> f64 {
        match self {
            Metric::Total => r.total,
            Metric::Matching => r.matching_total(),
            Metric::Mlm => r.mlm,
            Metric::Itm => r.itm,
            Metric::Visual => r.visual,
            Metric::ItmAcc => r.itm_acc,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Metric::Total => "total loss",
            Metric::Matching => "mlm + itm loss",
            Metric::Mlm => "mlm loss",
            Metric::Itm => "itm loss",
            Metric::Visual => "visual loss",
            Metric::ItmAcc => "itm accuracy",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "total" => Metric::Total,
            "matching" => Metric::Matching,
            "mlm" => Metric::Mlm,
            "itm" => Metric::Itm,
            "visual" => Metric::Visual,
            "itm_acc" => Metric::ItmAcc,
            _ => return Err(Error::Input(format!("unknown metric {s:?}"))),
        })
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const W: f64 = 720.0;
const H: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One polyline per run, labelled in a legend on the right.
pub fn render_svg(runs: &[(String, RunLog)], split: Split, metric: Metric) -> Result<String> {
    let series: Vec<(&str, Vec<(f64, f64)>)> = runs
        .iter()
        .map(|(name, log)| {
            let pts = log
                .split(split)
                .map(|r| (r.step as f64, metric.of(r)))
                .filter(|p| p.1.is_finite())
                .collect();
            (name.as_str(), pts)
        })
        .collect();
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.1.iter().copied()).collect();
    if all.is_empty() {
        return Err(Error::Input(format!("no {split} rows to plot")));
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            svg,
            r##"<line x1="{px:.1}" y1="{TOP}" x2="{px:.1}" y2="{:.1}" stroke="#ddd"/><text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
            TOP + ph,
            TOP + ph + 16.0,
            xv.round()
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">step</text>"#,
        LEFT + pw / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{} ({split})</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        metric.label()
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#,
            coords.join(" "),
            escape(name)
        );
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(vals: &[f64]) -> RunLog {
        let mut l = RunLog::new();
        for (i, &v) in vals.iter().enumerate() {
            l.push(LogRow {
                step: (i + 1) * 10,
                split: Split::Val,
                mlm: v,
                itm: v,
                visual: 0.0,
                total: 2.0 * v,
                itm_acc: 0.5,
            })
            .unwrap();
        }
        l
    }

    #[test]
    fn one_polyline_per_run() {
        let runs = vec![("none".to_string(), log(&[3.0, 2.0])), ("a<b".to_string(), log(&[2.5, 1.0]))];
        let svg = render_svg(&runs, Split::Val, Metric::Matching).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a&lt;b"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn empty_split_is_an_error() {
        let runs = vec![("x".to_string(), log(&[1.0]))];
        assert!(render_svg(&runs, Split::Train, Metric::Total).is_err());
    }
}
