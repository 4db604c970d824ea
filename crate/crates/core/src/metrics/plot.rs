//! Minimal SVG line charts for coverage curves and sweep panels.

use std::fmt::Write as _;

const W: f64 = 420.0;
const H: f64 = 320.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Symmetric error bars, one per point.
    pub errors: Option<Vec<f64>>,
    pub dashed: bool,
}

impl Series {
    pub fn line(label: &str, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            points,
            errors: None,
            dashed: false,
        }
    }

    pub fn dashed(label: &str, points: Vec<(f64, f64)>) -> Self {
        Self {
            dashed: true,
            ..Self::line(label, points)
        }
    }

    pub fn with_errors(mut self, errors: Vec<f64>) -> Self {
        self.errors = Some(errors);
        self
    }
}

#[derive(Clone, Debug)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub x_range: Option<(f64, f64)>,
    pub y_range: Option<(f64, f64)>,
    pub series: Vec<Series>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![lo];
    }
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step + 1e-9).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

impl LinePlot {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            log_x: false,
            x_range: None,
            y_range: None,
            series: Vec::new(),
        }
    }

    fn tx(&self, x: f64) -> f64 {
        if self.log_x {
            x.max(f64::MIN_POSITIVE).log10()
        } else {
            x
        }
    }

    fn bounds(&self) -> ((f64, f64), (f64, f64)) {
        let pts = || {
            self.series.iter().flat_map(|s| {
                s.points.iter().enumerate().map(move |(i, &(x, y))| {
                    let e = s.errors.as_ref().map_or(0.0, |e| e[i]);
                    (x, y - e, y + e)
                })
            })
        };
        let finite = |v: f64| v.is_finite();
        let xs = self.x_range.map(|(a, b)| (self.tx(a), self.tx(b))).unwrap_or_else(|| {
            pts()
                .map(|p| self.tx(p.0))
                .filter(|v| finite(*v))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
        });
        let ys = self.y_range.unwrap_or_else(|| {
            pts()
                .flat_map(|p| [p.1, p.2])
                .filter(|v| finite(*v))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
        });
        let pad = |(a, b): (f64, f64)| {
            if !a.is_finite() {
                (0.0, 1.0)
            } else if a == b {
                (a - 0.5, b + 0.5)
            } else {
                (a, b)
            }
        };
        let (x, mut y) = (pad(xs), pad(ys));
        if self.y_range.is_none() {
            let m = 0.05 * (y.1 - y.0);
            y = (y.0 - m, y.1 + m);
        }
        (x, y)
    }

    /// SVG fragment at the origin, `W×H` pixels.
    fn body(&self) -> String {
        let ((x0, x1), (y0, y1)) = self.bounds();
        let pw = W - LEFT - RIGHT;
        let ph = H - TOP - BOTTOM;
        let px = |x: f64| LEFT + (self.tx(x) - x0) / (x1 - x0) * pw;
        let py = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;
        let mut s = String::new();
        let _ = write!(
            s,
            r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
        );
        let _ = write!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            esc(&self.title)
        );
        let _ = write!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
            LEFT + pw / 2.0,
            H - 10.0,
            esc(&self.x_label)
        );
        let _ = write!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            esc(&self.y_label)
        );
        let xt = if self.log_x {
            (x0.ceil() as i64..=x1.floor() as i64).map(|e| 10f64.powi(e as i32)).collect()
        } else {
            ticks(x0, x1)
        };
        for t in xt {
            let x = px(t);
            let _ = write!(
                s,
                r##"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{}" stroke="#444"/><text x="{x:.1}" y="{}" text-anchor="middle" font-size="10">{}</text>"##,
                TOP + ph,
                TOP + ph + 4.0,
                TOP + ph + 16.0,
                t
            );
        }
        for t in ticks(y0, y1) {
            let y = py(t);
            let _ = write!(
                s,
                r##"<line x1="{}" y1="{y:.1}" x2="{LEFT}" y2="{y:.1}" stroke="#444"/><text x="{}" y="{:.1}" text-anchor="end" font-size="10">{}</text>"##,
                LEFT - 4.0,
                LEFT - 6.0,
                y + 3.0,
                (t * 1e6).round() / 1e6
            );
        }
        for (k, ser) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let dash = if ser.dashed { r#" stroke-dasharray="5,4""# } else { "" };
            let pts: Vec<String> = ser
                .points
                .iter()
                .filter(|(x, y)| self.tx(*x).is_finite() && y.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            let _ = write!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.6"{dash}/>"#,
                pts.join(" ")
            );
            if let Some(errs) = &ser.errors {
                for (&(x, y), e) in ser.points.iter().zip(errs) {
                    if y.is_finite() && e.is_finite() {
                        let _ = write!(
                            s,
                            r#"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="{color}"/>"#,
                            px(x),
                            py(y - e),
                            py(y + e)
                        );
                    }
                }
            }
            let ly = TOP + 14.0 + 14.0 * k as f64;
            let _ = write!(
                s,
                r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/><text x="{}" y="{}" font-size="10">{}</text>"#,
                LEFT + 8.0,
                LEFT + 26.0,
                LEFT + 30.0,
                ly + 3.0,
                esc(&ser.label)
            );
        }
        s
    }

    pub fn to_svg(&self) -> String {
        panels(std::slice::from_ref(self))
    }
}

/// Plots side by side in one SVG document.
pub fn panels(plots: &[LinePlot]) -> String {
    let total = W * plots.len().max(1) as f64;
    let mut s = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{H}" viewBox="0 0 {total} {H}" font-family="sans-serif">"#
    );
    s.push_str(r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, p) in plots.iter().enumerate() {
        let _ = write!(s, r#"<g transform="translate({} 0)">{}</g>"#, W * i as f64, p.body());
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_well_formed_document() {
        let mut p = LinePlot::new("a < b", "N_obs", "α");
        p.log_x = true;
        p.series.push(
            Series::line("NPE", vec![(1.0, -0.2), (10.0, -0.3), (1000.0, f64::NAN)])
                .with_errors(vec![0.01, 0.02, 0.0]),
        );
        let svg = panels(&[p.clone(), p]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a &lt; b"));
        assert!(!svg.contains("NaN"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn tick_steps_are_round() {
        let t = ticks(0.0, 1.0);
        assert_eq!(t.len(), 6);
        assert!((t[3] - 0.6).abs() < 1e-12);
    }
}
