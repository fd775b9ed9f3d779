//! Minimal SVG charts for reports.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 360.0;
const M: f64 = 48.0;
const PALETTE: [&str; 6] = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#b07aa1"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    s
}

fn axes(s: &mut String, lo: f64, hi: f64) {
    let _ = writeln!(
        s,
        r#"<path d="M{M} {M} V{} H{}" stroke="black" fill="none"/>"#,
        H - M,
        W - M / 2.0
    );
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = H - M - (H - 2.0 * M) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, M - 4.0, y + 4.0);
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let lo = lo.min(0.0);
    if hi <= lo {
        (lo, lo + 1.0)
    } else {
        (lo, hi)
    }
}

/// One bar per label.
pub fn bar_chart(title: &str, labels: &[String], values: &[f64]) -> String {
    let mut s = open(title);
    let (lo, hi) = range(values.iter().copied());
    axes(&mut s, lo, hi);
    let n = values.len().max(1) as f64;
    let slot = (W - 1.5 * M) / n;
    let y_of = |v: f64| H - M - (H - 2.0 * M) * (v - lo) / (hi - lo);
    for (i, (label, &v)) in labels.iter().zip(values).enumerate() {
        let x = M + slot * i as f64 + slot * 0.15;
        let (top, base) = (y_of(v.max(lo)), y_of(lo.max(0.0)));
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
            top.min(base),
            slot * 0.7,
            (base - top).abs(),
            PALETTE[0]
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x + slot * 0.35,
            H - M + 14.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Poly-lines sharing one pair of axes; `series` is `(name, points)`.
pub fn line_chart(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut s = open(title);
    let (ylo, yhi) = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let (xlo, xhi) = {
        let xs: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).collect();
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() && hi > lo {
            (lo, hi)
        } else {
            (0.0, 1.0)
        }
    };
    axes(&mut s, ylo, yhi);
    let px = |x: f64| M + (W - 1.5 * M) * (x - xlo) / (xhi - xlo);
    let py = |y: f64| H - M - (H - 2.0 * M) * (y - ylo) / (yhi - ylo);
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, d.join(" "));
        for &(x, y) in points {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - 1.5 * M - 60.0,
            M + 14.0 * i as f64,
            escape(name)
        );
    }
    let _ = writeln!(s, r#"<text x="{M}" y="{}">{xlo}</text>"#, H - M + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{xhi}</text>"#, W - M / 2.0, H - M + 14.0);
    s.push_str("</svg>\n");
    s
}
