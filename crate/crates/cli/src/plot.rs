//! Minimal SVG bar and line charts.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 360.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        let pad = |a: f64, b: f64| if (b - a).abs() < 1e-12 { (a - 0.5, b + 0.5) } else { (a, b) };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }
}

fn header(out: &mut String, title: &str, xlabel: &str, ylabel: &str, f: &Frame) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let (bx, by) = (f.px(f.x0), f.py(f.y0));
    let _ = writeln!(
        out,
        r#"<path d="M{LEFT} {TOP} V{by} H{}" fill="none" stroke="black"/>"#,
        W - RIGHT
    );
    for (v, anchor_y) in [(f.y0, by), (f.y1, f.py(f.y1))] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            LEFT - 4.0,
            anchor_y + 4.0,
            tick(v)
        );
    }
    for (v, anchor_x) in [(f.x0, bx), (f.x1, f.px(f.x1))] {
        let _ = writeln!(
            out,
            r#"<text x="{anchor_x}" y="{}" text-anchor="middle">{}</text>"#,
            by + 14.0,
            tick(v)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 10.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// One bar per value, positive bars in blue and negative in red.
pub fn bar_chart(title: &str, xlabel: &str, ylabel: &str, values: &[f64]) -> String {
    let lo = values.iter().copied().fold(0.0, f64::min);
    let hi = values.iter().copied().fold(0.0, f64::max);
    let f = Frame::new(0.0, values.len().max(1) as f64, lo, hi);
    let mut out = String::new();
    header(&mut out, title, xlabel, ylabel, &f);
    let width = (f.px(1.0) - f.px(0.0)).max(0.5);
    for (i, &v) in values.iter().enumerate() {
        let (a, b) = (f.py(v.max(0.0)), f.py(v.min(0.0)));
        let color = if v >= 0.0 { COLORS[0] } else { COLORS[1] };
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{a:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#,
            f.px(i as f64),
            width * 0.9,
            (b - a).max(0.0)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Polylines sharing an x axis, with a legend.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, xs: &[f64], series: &[(&str, &[f64])]) -> String {
    let finite = |v: &&f64| v.is_finite();
    let (x0, x1) = xs
        .iter()
        .filter(finite)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (y0, y1) = series
        .iter()
        .flat_map(|(_, ys)| ys.iter())
        .filter(finite)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let bounds = |a: f64, b: f64| if a.is_finite() { (a, b) } else { (0.0, 1.0) };
    let ((x0, x1), (y0, y1)) = (bounds(x0, x1), bounds(y0, y1));
    let f = Frame::new(x0, x1, y0, y1);
    let mut out = String::new();
    header(&mut out, title, xlabel, ylabel, &f);
    for (s, (name, ys)) in series.iter().enumerate() {
        let color = COLORS[s % COLORS.len()];
        let points: Vec<String> = xs
            .iter()
            .zip(ys.iter())
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(&x, &y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            points.join(" ")
        );
        let ly = TOP + 14.0 * s as f64;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{ly}" text-anchor="end" fill="{color}">{}</text>"#,
            W - RIGHT - 4.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}
