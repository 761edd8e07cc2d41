//! Minimal SVG charts for experiment outputs. Plotting is best-effort:
//! callers ignore write errors.

use std::fmt::Write as _;
use std::path::Path;

const W: f64 = 640.0;
const H: f64 = 400.0;
const ML: f64 = 64.0;
const MR: f64 = 16.0;
const MT: f64 = 32.0;
const MB: f64 = 48.0;

/// Blue (`f = 0`) to dark red (`f = 1`).
pub fn ramp(f: f64) -> String {
    let f = f.clamp(0.0, 1.0);
    let (r, g, b) = (
        30.0 + f * (160.0 - 30.0),
        90.0 * (1.0 - f),
        200.0 * (1.0 - f) + 20.0 * f,
    );
    format!("#{:02x}{:02x}{:02x}", r as u8, g as u8, b as u8)
}

/// Fixed palette for categorical series.
pub fn palette(i: usize) -> &'static str {
    const P: [&str; 6] = ["#1f5fbf", "#d9a400", "#2e9e4a", "#c62828", "#7b3fa0", "#555555"];
    P[i % P.len()]
}

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub color: String,
    pub dashed: bool,
    /// Optional `(lower, upper)` band drawn under the line.
    pub band: Option<(Vec<f64>, Vec<f64>)>,
}

impl Series {
    pub fn new(label: impl Into<String>, xs: Vec<f64>, ys: Vec<f64>, color: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            xs,
            ys,
            color: color.into(),
            dashed: false,
            band: None,
        }
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }

    pub fn with_band(mut self, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        self.band = Some((lo, hi));
        self
    }
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        ML + (x - self.x0) / (self.x1 - self.x0) * (W - ML - MR)
    }

    fn py(&self, y: f64) -> f64 {
        H - MB - (y - self.y0) / (self.y1 - self.y0) * (H - MT - MB)
    }
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>
"#,
        W / 2.0,
        escape(title)
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(out: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        out,
        r#"<line x1="{ML}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{ML}" y1="{MT}" x2="{ML}" y2="{b}" stroke="black"/>"#,
        b = H - MB,
        r = W - MR
    );
    for i in 0..=4 {
        let fx = f.x0 + (f.x1 - f.x0) * i as f64 / 4.0;
        let fy = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            f.px(fx),
            H - MB + 16.0,
            tick(fx),
            ML - 6.0,
            f.py(fy) + 4.0,
            tick(fy)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text><text transform="translate(14 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (ML + W - MR) / 2.0,
        H - 10.0,
        escape(xlabel),
        (MT + H - MB) / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v == 0.0 || (1e-2..1e4).contains(&v.abs()) {
        format!("{:.3}", v).trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.1e}")
    }
}

/// Line chart; the legend is omitted when there are more than 8 series.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.xs.iter().copied()));
    let (y0, y1) = bounds(series.iter().flat_map(|s| {
        let band = s.band.iter().flat_map(|(lo, hi)| lo.iter().chain(hi)).copied();
        s.ys.iter().copied().chain(band).collect::<Vec<_>>()
    }));
    let pad = 0.05 * (y1 - y0);
    let f = Frame {
        x0,
        x1,
        y0: y0 - pad,
        y1: y1 + pad,
    };
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &f, xlabel, ylabel);
    for s in series {
        if let Some((lo, hi)) = &s.band {
            let mut pts: Vec<String> = s.xs.iter().zip(hi).map(|(x, y)| format!("{:.2},{:.2}", f.px(*x), f.py(*y))).collect();
            pts.extend(s.xs.iter().zip(lo).rev().map(|(x, y)| format!("{:.2},{:.2}", f.px(*x), f.py(*y))));
            let _ = writeln!(out, r#"<polygon points="{}" fill="{}" fill-opacity="0.2" stroke="none"/>"#, pts.join(" "), s.color);
        }
        let pts: Vec<String> = s
            .xs
            .iter()
            .zip(&s.ys)
            .filter(|(_, y)| y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", f.px(*x), f.py(*y)))
            .collect();
        let dash = if s.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"{dash}/>"#,
            pts.join(" "),
            s.color
        );
    }
    if series.len() <= 8 {
        for (i, s) in series.iter().enumerate() {
            let y = MT + 8.0 + 16.0 * i as f64;
            let _ = writeln!(
                out,
                r#"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                W - MR - 150.0,
                W - MR - 130.0,
                s.color,
                W - MR - 124.0,
                y + 4.0,
                escape(&s.label)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Bar chart with optional error bars.
pub fn bar_chart(title: &str, ylabel: &str, labels: &[String], values: &[f64], errors: Option<&[f64]>) -> String {
    let top = values
        .iter()
        .zip(0..)
        .map(|(v, i)| v + errors.map_or(0.0, |e| e[i]))
        .fold(0.0, f64::max);
    let bottom = values.iter().copied().fold(0.0, f64::min);
    let f = Frame {
        x0: 0.0,
        x1: values.len().max(1) as f64,
        y0: bottom,
        y1: if top > bottom { top * 1.1 } else { bottom + 1.0 },
    };
    let mut out = String::new();
    header(&mut out, title);
    let _ = writeln!(
        out,
        r#"<line x1="{ML}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{ML}" y1="{MT}" x2="{ML}" y2="{b}" stroke="black"/>"#,
        b = H - MB,
        r = W - MR
    );
    for i in 0..=4 {
        let fy = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, ML - 6.0, f.py(fy) + 4.0, tick(fy));
    }
    let _ = writeln!(
        out,
        r#"<text transform="translate(14 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (MT + H - MB) / 2.0,
        escape(ylabel)
    );
    for (i, v) in values.iter().enumerate() {
        let (xa, xb) = (f.px(i as f64 + 0.15), f.px(i as f64 + 0.85));
        let (ya, yb) = (f.py(v.max(0.0)), f.py(v.min(0.0)));
        let _ = writeln!(
            out,
            r#"<rect x="{xa:.1}" y="{ya:.1}" width="{:.1}" height="{:.1}" fill="{}"/><text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            xb - xa,
            (yb - ya).max(0.5),
            palette(i),
            (xa + xb) / 2.0,
            H - MB + 16.0,
            escape(&labels[i])
        );
        if let Some(e) = errors {
            let xm = (xa + xb) / 2.0;
            let _ = writeln!(
                out,
                r#"<line x1="{xm:.1}" y1="{:.1}" x2="{xm:.1}" y2="{:.1}" stroke="black"/>"#,
                f.py(v - e[i]),
                f.py(v + e[i])
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Write an SVG document, ignoring failures.
pub fn save(path: impl AsRef<Path>, svg: &str) {
    let _ = std::fs::write(path, svg);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_ends() {
        assert_eq!(ramp(0.0), "#1e5ac8");
        assert_eq!(ramp(1.0), "#a00014");
        assert_eq!(ramp(7.0), ramp(1.0));
    }

    #[test]
    fn charts_are_well_formed() {
        let s = Series::new("a<b", vec![0.0, 1.0, 2.0], vec![1.0, f64::NAN, 3.0], "#000").with_band(vec![0.0; 3], vec![4.0; 3]);
        let svg = line_chart("t", "x", "y", &[s.dashed()]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a&lt;b"));
        let bars = bar_chart("b", "kl", &["x".into(), "y".into()], &[0.5, 0.2], Some(&[0.1, 0.1]));
        assert_eq!(bars.matches("<rect").count(), 3);
        let flat = line_chart("flat", "x", "y", &[Series::new("c", vec![1.0], vec![2.0], "#111")]);
        assert!(!flat.contains("NaN"));
    }
}
