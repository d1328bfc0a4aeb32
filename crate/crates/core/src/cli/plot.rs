use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct LinePlot<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub log2_x: bool,
    /// Fixed y range; computed from the data when absent.
    pub y_range: Option<(f64, f64)>,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl LinePlot<'_> {
    pub fn render(&self) -> Result<String> {
        let tx = |x: f64| if self.log2_x { x.log2() } else { x };
        let pts: Vec<(f64, f64)> = self.series.iter().flat_map(|s| s.points.iter().copied()).collect();
        if pts.is_empty() {
            return Err(Error::EmptyInput("plot series"));
        }
        if pts
            .iter()
            .any(|p| !p.0.is_finite() || !p.1.is_finite() || (self.log2_x && p.0 <= 0.0))
        {
            return Err(Error::param("plot", "non-finite or non-positive coordinate"));
        }
        let (mut x0, mut x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| {
            (a.0.min(tx(p.0)), a.1.max(tx(p.0)))
        });
        let (mut y0, mut y1) = self.y_range.unwrap_or_else(|| {
            pts.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.1), a.1.max(p.1)))
        });
        if x1 - x0 < 1e-12 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let sx = |x: f64| PAD + (tx(x) - x0) / (x1 - x0) * (W - 2.0 * PAD);
        let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            escape(self.title)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
            b = H - PAD,
            r = W - PAD
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let yv = y0 + f * (y1 - y0);
            let xv = x0 + f * (x1 - x0);
            let xl = if self.log2_x { 2f64.powf(xv) } else { xv };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{:.3}</text>"#,
                PAD - 4.0,
                sy(yv) + 3.0,
                yv
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" font-size="10">{:.3}</text>"#,
                PAD + f * (W - 2.0 * PAD),
                H - PAD + 14.0,
                xl
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
            W / 2.0,
            H - 10.0,
            escape(self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(self.y_label)
        );
        for (k, series) in self.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let path: Vec<String> = series
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                path.join(" ")
            );
            for &(x, y) in &series.points {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                    sx(x),
                    sy(y)
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
                W - PAD - 110.0,
                PAD + 14.0 * k as f64,
                escape(&series.label)
            );
        }
        s.push_str("</svg>\n");
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let svg = self.render()?;
        std::fs::write(path, svg)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_series_and_rejects_empty() {
        let p = LinePlot {
            title: "a < b",
            x_label: "x",
            y_label: "y",
            log2_x: true,
            y_range: Some((0.0, 1.0)),
            series: vec![Series {
                label: "s".into(),
                points: vec![(0.125, 0.2), (1.0, 0.9)],
            }],
        };
        let svg = p.render().unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("polyline") && svg.contains("a &lt; b"));
        let empty = LinePlot { series: vec![], ..p };
        assert!(empty.render().is_err());
    }
}
