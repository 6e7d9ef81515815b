//! Scatter plots of two-dimensional ensembles as standalone SVG.

use std::fmt::Write;

use crate::ensemble::ParticleEnsemble;

const SIZE: f64 = 480.0;
const MARGIN: f64 = 48.0;

fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !(lo.is_finite() && hi.is_finite()) {
        return (-1.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 1.0 };
    (lo - pad, hi + pad)
}

/// Renders the first two coordinates of every particle, with the axis
/// limits printed at the corners.
pub fn scatter_svg(ensemble: &ParticleEnsemble, title: &str) -> String {
    let x = ensemble.positions();
    let (x0, x1) = axis_range(x.row(0).iter().copied());
    let (y0, y1) = if x.nrows() > 1 {
        axis_range(x.row(1).iter().copied())
    } else {
        (-1.0, 1.0)
    };
    let span = SIZE - 2.0 * MARGIN;
    let px = |v: f64| MARGIN + (v - x0) / (x1 - x0) * span;
    let py = |v: f64| SIZE - MARGIN - (v - y0) / (y1 - y0) * span;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{span}" height="{span}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">{} (iteration {})</text>"#,
        SIZE / 2.0,
        MARGIN / 2.0,
        escape(title),
        ensemble.iteration()
    );
    let label = |s: &mut String, xp: f64, yp: f64, anchor: &str, v: f64| {
        let _ = writeln!(s, r#"<text x="{xp:.1}" y="{yp:.1}" text-anchor="{anchor}" font-size="11">{v:.3}</text>"#);
    };
    label(&mut s, MARGIN, SIZE - MARGIN + 16.0, "start", x0);
    label(&mut s, SIZE - MARGIN, SIZE - MARGIN + 16.0, "end", x1);
    label(&mut s, MARGIN - 4.0, SIZE - MARGIN, "end", y0);
    label(&mut s, MARGIN - 4.0, MARGIN + 10.0, "end", y1);
    for c in x.column_iter() {
        let yv = if c.len() > 1 { c[1] } else { 0.0 };
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="1.8" fill="steelblue" fill-opacity="0.6"/>"#,
            px(c[0]),
            py(yv)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
