//! Deterministic ROC plot. Coordinates are printed with fixed precision so
//! identical input gives identical bytes.

use std::fmt::Write as _;

use super::roc::RocCurve;

const SIZE: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn x(fpr: f64) -> f64 {
    MARGIN + fpr * SIZE
}

fn y(tpr: f64) -> f64 {
    MARGIN + (1.0 - tpr) * SIZE
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One polyline per curve over the unit square, with a legend giving each
/// curve's AUC.
pub fn emit_roc_svg(curves: &[(&str, &RocCurve)]) -> String {
    let total = SIZE + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{total}" height="{total}" fill="white"/>"#);
    // axes and chance diagonal
    let _ = writeln!(
        s,
        r#"<g stroke="black" stroke-width="1" fill="none"><rect x="{MARGIN}" y="{MARGIN}" width="{SIZE}" height="{SIZE}"/></g>"#
    );
    let _ = writeln!(
        s,
        r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#999999" stroke-dasharray="4 4"/>"##,
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{t:.2}</text>"#,
            x(t),
            y(0.0) + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{t:.2}</text>"#,
            x(0.0) - 6.0,
            y(t) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">False positive rate</text>"#,
        x(0.5),
        total - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.2})">True positive rate</text>"#,
        y(0.5),
        y(0.5)
    );
    for (i, (name, curve)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|&(f, t)| format!("{:.4},{:.4}", x(f), y(t)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = MARGIN + SIZE - 12.0 - 16.0 * (curves.len() - 1 - i) as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            x(0.55),
            x(0.62)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11">{} (AUC {:.3})</text>"#,
            x(0.64),
            ly + 4.0,
            escape(name),
            curve.auc
        );
    }
    s.push_str("</svg>\n");
    s
}
