//! 800x800 SVG scatter plot of a 2-D embedding, one color per class.

use std::fmt::Write as _;

use pointshield::embed::Embedding2D;

const SIZE: f64 = 800.0;
const MARGIN: f64 = 40.0;
const LEGEND_WIDTH: f64 = 120.0;

const PALETTE: [&str; 16] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#393b79", "#ad494a", "#8ca252", "#bd9e39", "#843c39", "#7b4173",
];

pub fn class_color(label: usize) -> &'static str {
    PALETTE[label % PALETTE.len()]
}

pub fn scatter(embedding: &Embedding2D, title: &str, class_names: &[String]) -> String {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &embedding.y {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let plot_w = SIZE - 2.0 * MARGIN - LEGEND_WIDTH;
    let plot_h = SIZE - 2.0 * MARGIN;
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let scale = plot_w.min(plot_h) / span;
    let x = |v: f64| MARGIN + (v - lo[0]) * scale;
    let y = |v: f64| SIZE - MARGIN - (v - lo[1]) * scale;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="800" height="800" viewBox="0 0 800 800">"#
    );
    let _ = writeln!(out, r#"<rect width="800" height="800" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN}" y="24" font-family="sans-serif" font-size="16">{}</text>"#,
        escape(title)
    );
    for (p, &label) in embedding.y.iter().zip(&embedding.labels) {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}" fill-opacity="0.8"/>"#,
            x(p[0]),
            y(p[1]),
            class_color(label)
        );
    }
    let mut classes: Vec<usize> = embedding.labels.clone();
    classes.sort_unstable();
    classes.dedup();
    let lx = SIZE - LEGEND_WIDTH;
    for (row, &c) in classes.iter().enumerate() {
        let ly = MARGIN + 20.0 * row as f64;
        let name = class_names.get(c).cloned().unwrap_or_else(|| format!("class {c}"));
        let _ = writeln!(
            out,
            r#"<circle cx="{lx}" cy="{ly}" r="5" fill="{}"/><text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#,
            class_color(c),
            lx + 10.0,
            ly + 4.0,
            escape(&name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_circle_per_point_plus_legend() {
        let e = Embedding2D {
            y: vec![[0.0, 0.0], [1.0, 2.0], [-1.0, 0.5]],
            kl_trace: vec![],
            labels: vec![0, 1, 1],
        };
        let svg = scatter(&e, "a < b", &[]);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<circle").count(), 3 + 2);
        assert!(svg.contains("a &lt; b"));
        assert!(svg.contains("class 1"));
    }
}
