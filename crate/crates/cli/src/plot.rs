//! Static SVG line charts from metrics CSV files.

use std::fmt::Write as _;

use anyhow::{bail, Result};

use crate::UsageError;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// One polyline per requested column against the first column. Non-finite
/// cells are skipped.
pub fn render_svg(csv_text: &str, columns: &[String]) -> Result<String> {
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.len() < 2 {
        bail!(UsageError("plot input needs an x column and at least one y column".into()));
    }
    let wanted: Vec<String> = if columns.is_empty() { header[1..].to_vec() } else { columns.to_vec() };
    let idx: Vec<usize> = wanted
        .iter()
        .map(|c| header.iter().position(|h| h == c).ok_or_else(|| UsageError(format!("no column named '{c}'"))))
        .collect::<std::result::Result<_, _>>()?;

    let mut series: Vec<Vec<(f64, f64)>> = vec![Vec::new(); idx.len()];
    for rec in reader.records() {
        let rec = rec?;
        let Ok(x) = rec[0].parse::<f64>() else { continue };
        for (k, &i) in idx.iter().enumerate() {
            if let Ok(y) = rec[i].parse::<f64>() {
                if y.is_finite() {
                    series[k].push((x, y));
                }
            }
        }
    }
    let pts = series.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#)?;
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    writeln!(
        svg,
        r#"<path d="M{m} {m} V{b} H{r}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    )?;
    writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 12.0, header[0])?;
    writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{y1:.3}</text>"#, MARGIN - 4.0, MARGIN + 4.0)?;
    writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{y0:.3}</text>"#, MARGIN - 4.0, HEIGHT - MARGIN)?;
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = s.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, points.join(" "))?;
        writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            WIDTH - MARGIN - 150.0,
            MARGIN + 14.0 * k as f64,
            wanted[k]
        )?;
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_requested_columns() {
        let csv = "iteration,a,b\n0,0.1,NaN\n1,0.4,2\n2,0.3,3\n";
        let svg = render_svg(csv, &[]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        let only_a = render_svg(csv, &["a".into()]).unwrap();
        assert_eq!(only_a.matches("<polyline").count(), 1);
        assert!(render_svg(csv, &["zzz".into()]).is_err());
    }
}
