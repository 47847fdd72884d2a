//! Minimal standalone SVG 1.1 line plots.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

impl Plot {
    pub fn new(title: &str, x_label: &str, y_label: &str, log_y: bool) -> Plot {
        Plot { title: title.into(), x_label: x_label.into(), y_label: y_label.into(), log_y, series: Vec::new() }
    }

    pub fn with_series(mut self, label: &str, x: Vec<f64>, y: Vec<f64>) -> Plot {
        self.series.push(Series { label: label.into(), x, y });
        self
    }

    fn transform_y(&self, y: f64) -> Option<f64> {
        if !y.is_finite() {
            return None;
        }
        if self.log_y {
            (y > 0.0).then(|| y.log10())
        } else {
            Some(y)
        }
    }

    /// Data range over plottable points, padded when degenerate.
    fn bounds(&self) -> Option<(f64, f64, f64, f64)> {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for s in &self.series {
            for (&x, &y) in s.x.iter().zip(&s.y) {
                if let (true, Some(ty)) = (x.is_finite(), self.transform_y(y)) {
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                    y0 = y0.min(ty);
                    y1 = y1.max(ty);
                }
            }
        }
        if !x0.is_finite() {
            return None;
        }
        if x1 - x0 <= 0.0 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 - y0 <= 1e-300 {
            let pad = if self.log_y { 0.5 } else { 0.5 * y0.abs().max(1.0) };
            y0 -= pad;
            y1 += pad;
        }
        Some((x0, x1, y0, y1))
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8" standalone="no"?>"#);
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
        );
        let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
        let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
        let Some((x0, x1, y0, y1)) = self.bounds() else {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle">no data</text>"#,
                LEFT + pw / 2.0,
                TOP + ph / 2.0
            );
            s.push_str("</svg>\n");
            return s;
        };
        let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let py = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

        for i in 0..=5 {
            let fx = x0 + (x1 - x0) * i as f64 / 5.0;
            let fy = y0 + (y1 - y0) * i as f64 / 5.0;
            let ylab = if self.log_y { format!("{:.1e}", 10f64.powf(fy)) } else { tick_label(fy) };
            let _ = writeln!(
                s,
                r#"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="black"/><text x="{0:.2}" y="{3:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{4}</text>"#,
                px(fx),
                TOP + ph,
                TOP + ph + 5.0,
                TOP + ph + 18.0,
                tick_label(fx)
            );
            let _ = writeln!(
                s,
                r#"<line x1="{0:.2}" y1="{1:.2}" x2="{2:.2}" y2="{1:.2}" stroke="black"/><text x="{3:.2}" y="{4:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{5}</text>"#,
                LEFT - 5.0,
                py(fy),
                LEFT,
                LEFT - 8.0,
                py(fy) + 4.0,
                ylab
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 10.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{0}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );

        for (i, ser) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<String> = ser
                .x
                .iter()
                .zip(&ser.y)
                .filter_map(|(&x, &y)| self.transform_y(y).filter(|_| x.is_finite()).map(|ty| format!("{:.2},{:.2}", px(x), py(ty))))
                .collect();
            if !pts.is_empty() {
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    pts.join(" ")
                );
            }
            let ly = TOP + 16.0 + 16.0 * i as f64;
            let lx = LEFT + pw - 150.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11">{}</text>"#,
                lx + 20.0,
                lx + 26.0,
                ly + 4.0,
                escape(&ser.label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_polyline_and_escapes() {
        let svg = Plot::new("E <decay>", "t", "E", true).with_series("E0", vec![0.0, 1.0, 2.0], vec![1.0, 0.1, 0.01]).render();
        assert!(svg.starts_with("<?xml"));
        assert!(svg.contains("<polyline"));
        assert!(svg.contains("E &lt;decay&gt;"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn log_scale_drops_nonpositive_points() {
        let svg = Plot::new("r", "m", "ratio", true).with_series("ratio", vec![1.0, 2.0], vec![0.0, -1.0]).render();
        assert!(svg.contains("no data"));
        assert!(!svg.contains("NaN"));
    }
}
