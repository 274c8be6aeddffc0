//! Small output helpers: a dependency-free two-series SVG line chart used by
//! the uncertainty comparison, plus shared file-writing conveniences.

use std::path::Path;

use crate::error::Result;

fn polyline(points: &[(f64, f64)], color: &str) -> String {
    let pts: Vec<String> = points
        .iter()
        .map(|(x, y)| format!("{x:.1},{y:.1}"))
        .collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
        pts.join(" ")
    )
}

/// Render two aligned series (normalized independently to [0, 1]) over a
/// shared categorical x-axis. Returns the SVG document.
pub fn two_series_svg(
    title: &str,
    x_labels: &[String],
    series_a: (&str, &[f64]),
    series_b: (&str, &[f64]),
) -> String {
    let n = x_labels.len().max(1);
    let (w, h) = (900.0f64, 420.0f64);
    let (ml, mr, mt, mb) = (60.0, 20.0, 50.0, 110.0);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;
    let xpos = |i: usize| ml + plot_w * i as f64 / (n.max(2) - 1) as f64;

    let normalize = |vals: &[f64]| -> Vec<f64> {
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = (hi - lo).max(1e-12);
        vals.iter().map(|v| (v - lo) / range).collect()
    };
    let ya = normalize(series_a.1);
    let yb = normalize(series_b.1);
    let ypos = |v: f64| mt + plot_h * (1.0 - v);

    let pa: Vec<(f64, f64)> = ya.iter().enumerate().map(|(i, &v)| (xpos(i), ypos(v))).collect();
    let pb: Vec<(f64, f64)> = yb.iter().enumerate().map(|(i, &v)| (xpos(i), ypos(v))).collect();

    let mut ticks = String::new();
    for (i, label) in x_labels.iter().enumerate() {
        let x = xpos(i);
        ticks.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\" transform=\"rotate(-45 {x:.1} {:.1})\">{label}</text>\n",
            h - mb + 16.0,
            h - mb + 16.0,
        ));
    }

    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"28\" font-size=\"16\" text-anchor=\"middle\">{title}</text>\n\
         <line x1=\"{ml}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
         <text x=\"20\" y=\"{:.1}\" font-size=\"11\" transform=\"rotate(-90 20 {:.1})\" text-anchor=\"middle\">normalized value</text>\n\
         {}\n{}\n\
         <rect x=\"{:.1}\" y=\"{mt}\" width=\"12\" height=\"12\" fill=\"#1f77b4\"/>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">{}</text>\n\
         <rect x=\"{:.1}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"#d62728\"/>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">{}</text>\n\
         {ticks}</svg>\n",
        w / 2.0,
        h - mb,
        w - mr,
        h - mb,
        h - mb,
        (mt + plot_h / 2.0),
        (mt + plot_h / 2.0),
        polyline(&pa, "#1f77b4"),
        polyline(&pb, "#d62728"),
        w - 200.0,
        w - 182.0,
        mt + 10.0,
        series_a.0,
        w - 200.0,
        mt + 20.0,
        w - 182.0,
        mt + 30.0,
        series_b.0,
    )
}

/// Write text to a file, creating parent directories.
pub fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, content)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_contains_both_series_and_labels() {
        let labels: Vec<String> = (0..5).map(|i| format!("dom{i}")).collect();
        let a = [0.1, 0.5, 0.2, 0.9, 0.4];
        let b = [1.0, 2.0, 1.5, 3.0, 2.5];
        let svg = two_series_svg("demo", &labels, ("ours", &a), ("baseline", &b), );
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("ours") && svg.contains("baseline"));
        assert!(svg.contains("dom3"));
    }
}
