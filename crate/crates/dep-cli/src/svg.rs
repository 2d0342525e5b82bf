//! Hand-rolled SVG line chart for sweep summaries. The CSV written next to
//! the image is the durable artifact; the chart only has to be readable,
//! so everything here is fixed-layout string assembly with no styling
//! dependencies.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 44.0;
const BOTTOM: f64 = 52.0;

/// One chart point: axis value, mean, and a symmetric deviation drawn as an
/// error bar.
pub type ChartPoint = (f64, f64, f64);

/// Renders mean F1 against the swept value, with an optional horizontal
/// reference line (the adaptive-schedule row of a fixed-p sweep).
pub fn line_chart(
    title: &str,
    x_label: &str,
    points: &[ChartPoint],
    reference: Option<(&str, f64)>,
) -> String {
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    let (x_lo, x_hi) = pad_range(
        xs.first().copied().unwrap_or(0.0),
        xs.last().copied().unwrap_or(1.0),
    );
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for (_, mean, sd) in points {
        y_lo = y_lo.min(mean - sd);
        y_hi = y_hi.max(mean + sd);
    }
    if let Some((_, y)) = reference {
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    if !y_lo.is_finite() || !y_hi.is_finite() {
        y_lo = 0.0;
        y_hi = 1.0;
    }
    let (y_lo, y_hi) = pad_range(y_lo, y_hi);

    let x_of = |x: f64| LEFT + (x - x_lo) / (x_hi - x_lo) * (WIDTH - LEFT - RIGHT);
    let y_of = |y: f64| HEIGHT - BOTTOM - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - TOP - BOTTOM);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );

    // Frame and horizontal grid with y tick labels.
    let _ = writeln!(
        out,
        r##"<rect x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        WIDTH - LEFT - RIGHT,
        HEIGHT - TOP - BOTTOM
    );
    for i in 0..=4 {
        let y = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let py = y_of(y);
        if i > 0 && i < 4 {
            let _ = writeln!(
                out,
                r##"<line x1="{LEFT}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#ddd"/>"##,
                WIDTH - RIGHT
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{y:.3}</text>"#,
            LEFT - 6.0,
            py + 4.0
        );
    }

    // X ticks at the swept values themselves.
    for (x, _, _) in points {
        let px = x_of(*x);
        let _ = writeln!(
            out,
            r##"<line x1="{px:.1}" y1="{:.1}" x2="{px:.1}" y2="{:.1}" stroke="#888"/>"##,
            HEIGHT - BOTTOM,
            HEIGHT - BOTTOM + 5.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{px:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{x}</text>"#,
            HEIGHT - BOTTOM + 18.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        HEIGHT - 14.0,
        escape(x_label)
    );

    if let Some((label, y)) = reference {
        let py = y_of(y);
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#b55" stroke-dasharray="6 4"/>"##,
            WIDTH - RIGHT
        );
        let _ = writeln!(
            out,
            r##"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" fill="#b55" text-anchor="end">{}</text>"##,
            WIDTH - RIGHT - 4.0,
            py - 5.0,
            escape(label)
        );
    }

    // Error bars first so the line sits on top of them.
    for (x, mean, sd) in points {
        if *sd > 0.0 {
            let px = x_of(*x);
            let _ = writeln!(
                out,
                r##"<line x1="{px:.1}" y1="{:.1}" x2="{px:.1}" y2="{:.1}" stroke="#59a" stroke-width="1.5"/>"##,
                y_of(mean + sd),
                y_of(mean - sd)
            );
        }
    }
    let path: Vec<String> = points
        .iter()
        .map(|(x, mean, _)| format!("{:.1},{:.1}", x_of(*x), y_of(*mean)))
        .collect();
    if path.len() > 1 {
        let _ = writeln!(
            out,
            r##"<polyline points="{}" fill="none" stroke="#36c" stroke-width="2"/>"##,
            path.join(" ")
        );
    }
    for (x, mean, _) in points {
        let _ = writeln!(
            out,
            r##"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="#36c"/>"##,
            x_of(*x),
            y_of(*mean)
        );
    }

    out.push_str("</svg>\n");
    out
}

fn pad_range(lo: f64, hi: f64) -> (f64, f64) {
    if lo == hi {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.06;
    (lo - pad, hi + pad)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
