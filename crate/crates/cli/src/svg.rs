//! Minimal deterministic SVG line charts: one panel per quantity, fixed
//! geometry and number formatting, so equal inputs give equal bytes.

use std::fmt::Write as _;

const WIDTH: f64 = 800.0;
const PANEL_HEIGHT: f64 = 240.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 40.0;
const COLORS: [&str; 8] = [
    "#1f4e9c", "#c0392b", "#27864a", "#8e44ad", "#d68910", "#138d90", "#7f8c8d", "#2c3e50",
];

pub struct Line {
    pub label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub color: Option<&'static str>,
    pub width: f64,
}

/// Filled region between two curves sharing `xs`.
pub struct Band {
    pub xs: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

pub struct Panel {
    pub title: String,
    pub y_label: String,
    pub lines: Vec<Line>,
    pub bands: Vec<Band>,
}

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace("--", "- -")
}

/// Round step for about five ticks over `span`.
fn tick_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let r = raw / mag;
    let nice = if r < 1.5 {
        1.0
    } else if r < 3.0 {
        2.0
    } else if r < 7.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn tick_label(v: f64, step: f64) -> String {
    if v.abs() >= 1e5 || (v != 0.0 && v.abs() < 1e-3) {
        format!("{v:.2e}")
    } else {
        let decimals = (-step.log10().floor()).max(0.0) as usize;
        format!("{v:.decimals$}")
    }
}

fn finite_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return None;
    }
    if hi - lo <= 1e-12 * hi.abs().max(1.0) {
        let pad = 0.5 * hi.abs().max(1.0);
        return Some((lo - pad, hi + pad));
    }
    Some((lo, hi))
}

pub fn render(title: &str, x_label: &str, note: &str, panels: &[Panel]) -> String {
    let height = PANEL_HEIGHT * panels.len() as f64 + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" font-family="DejaVu Sans, sans-serif" font-size="11">"#,
        WIDTH,
        fmt(height),
        WIDTH,
        fmt(height)
    );
    let _ = writeln!(s, "<!-- {} -->", escape(note));
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="16" font-size="14" text-anchor="middle">{}</text>"#, WIDTH / 2.0, escape(title));
    for (p, panel) in panels.iter().enumerate() {
        panel_svg(&mut s, panel, 20.0 + p as f64 * PANEL_HEIGHT, x_label);
    }
    s.push_str("</svg>\n");
    s
}

fn panel_svg(s: &mut String, panel: &Panel, y0: f64, x_label: &str) {
    let xs = panel.lines.iter().flat_map(|l| l.xs.iter().copied()).chain(panel.bands.iter().flat_map(|b| b.xs.iter().copied()));
    let ys = panel
        .lines
        .iter()
        .flat_map(|l| l.ys.iter().copied())
        .chain(panel.bands.iter().flat_map(|b| b.lower.iter().chain(&b.upper).copied()));
    let (Some((x_lo, x_hi)), Some((y_lo, y_hi))) = (finite_range(xs), finite_range(ys)) else {
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}: no finite data</text>"#, LEFT, fmt(y0 + 40.0), escape(&panel.title));
        return;
    };
    let (px0, px1) = (LEFT, WIDTH - RIGHT);
    let (py0, py1) = (y0 + TOP, y0 + PANEL_HEIGHT - BOTTOM);
    let sx = |x: f64| px0 + (x - x_lo) / (x_hi - x_lo) * (px1 - px0);
    let sy = |y: f64| py1 - (y - y_lo) / (y_hi - y_lo) * (py1 - py0);

    let _ = writeln!(s, "<g>");
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12">{}</text>"#, fmt(px0), fmt(y0 + 18.0), escape(&panel.title));
    let _ = writeln!(
        s,
        r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        fmt(px0),
        fmt(py0),
        fmt(px1 - px0),
        fmt(py1 - py0)
    );
    let step = tick_step(x_hi - x_lo);
    let mut t = (x_lo / step).ceil() * step;
    while t <= x_hi + 1e-9 * step {
        let x = sx(t);
        let _ = writeln!(s, r##"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="#ddd"/>"##, fmt(x), fmt(py0), fmt(py1));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, fmt(x), fmt(py1 + 14.0), tick_label(t, step));
        t += step;
    }
    let step = tick_step(y_hi - y_lo);
    let mut t = (y_lo / step).ceil() * step;
    while t <= y_hi + 1e-9 * step {
        let y = sy(t);
        let _ = writeln!(s, r##"<line x1="{1}" y1="{0}" x2="{2}" y2="{0}" stroke="#ddd"/>"##, fmt(y), fmt(px0), fmt(px1));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, fmt(px0 - 4.0), fmt(y + 4.0), tick_label(t, step));
        t += step;
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, fmt((px0 + px1) / 2.0), fmt(py1 + 30.0), escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{0}" text-anchor="middle" transform="rotate(-90 14 {0})">{1}</text>"#,
        fmt((py0 + py1) / 2.0),
        escape(&panel.y_label)
    );

    for band in &panel.bands {
        let mut pts: Vec<String> = Vec::new();
        for (x, y) in band.xs.iter().zip(&band.upper) {
            if x.is_finite() && y.is_finite() {
                pts.push(format!("{},{}", fmt(sx(*x)), fmt(sy(*y))));
            }
        }
        for (x, y) in band.xs.iter().zip(&band.lower).rev() {
            if x.is_finite() && y.is_finite() {
                pts.push(format!("{},{}", fmt(sx(*x)), fmt(sy(*y))));
            }
        }
        let _ = writeln!(s, r##"<polygon points="{}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>"##, pts.join(" "));
    }
    for (k, line) in panel.lines.iter().enumerate() {
        let color = line.color.unwrap_or(COLORS[k % COLORS.len()]);
        // Non-finite samples split the curve into separate segments.
        let mut segment: Vec<String> = Vec::new();
        let flush = |seg: &mut Vec<String>, s: &mut String| {
            if seg.len() > 1 {
                let _ = writeln!(
                    s,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{}"/>"#,
                    seg.join(" "),
                    fmt(line.width)
                );
            }
            seg.clear();
        };
        for (x, y) in line.xs.iter().zip(&line.ys) {
            if x.is_finite() && y.is_finite() {
                segment.push(format!("{},{}", fmt(sx(*x)), fmt(sy(*y))));
            } else {
                flush(&mut segment, s);
            }
        }
        flush(&mut segment, s);
    }
    let labelled: Vec<(usize, &Line)> = panel.lines.iter().enumerate().filter(|(_, l)| !l.label.is_empty()).collect();
    for (row, (k, line)) in labelled.iter().enumerate() {
        let color = line.color.unwrap_or(COLORS[k % COLORS.len()]);
        let y = py0 + 14.0 + 14.0 * row as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="{color}" stroke-width="2"/>"#,
            fmt(px1 - 150.0),
            fmt(y - 4.0),
            fmt(px1 - 130.0)
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, fmt(px1 - 125.0), fmt(y), escape(&line.label));
    }
    let _ = writeln!(s, "</g>");
}
