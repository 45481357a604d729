//! Static SVG line plots. Output depends only on the input, so identical
//! data renders to identical bytes.

use std::collections::BTreeSet;
use std::fmt::Write;

use crate::aging::AgingCurve;
use crate::trainer::EpochLog;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 52.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Fixed y range; derived from the data when `None`.
    pub y_range: Option<(f64, f64)>,
    pub markers: bool,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick_step(span: f64, target: f64) -> f64 {
    let raw = span / target;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|&s| s >= raw).unwrap_or(10.0 * mag)
}

fn fmt_tick(v: f64, step: f64) -> String {
    let digits = (-step.log10().floor()).max(0.0) as usize;
    format!("{v:.digits$}")
}

impl LinePlot {
    /// Each series is drawn as polylines over the union of x values; a
    /// series missing an x present elsewhere gets a gap there.
    pub fn to_svg(&self) -> String {
        let xs: BTreeSet<u64> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.0.to_bits()))
            .collect();
        let mut xs: Vec<f64> = xs.into_iter().map(f64::from_bits).collect();
        xs.sort_by(f64::total_cmp);
        let ys = self.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).filter(|y| y.is_finite());
        let (mut y0, mut y1) = self.y_range.unwrap_or_else(|| {
            ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)))
        });
        if !(y0.is_finite() && y1.is_finite()) {
            (y0, y1) = (0.0, 1.0);
        }
        if y1 - y0 < 1e-12 {
            (y0, y1) = (y0 - 0.5, y1 + 0.5);
        }
        let (x0, x1) = match (xs.first(), xs.last()) {
            (Some(&a), Some(&b)) if b > a => (a, b),
            (Some(&a), _) => (a - 0.5, a + 0.5),
            _ => (0.0, 1.0),
        };
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            LEFT + pw / 2.0,
            esc(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );

        let ystep = tick_step(y1 - y0, 6.0);
        let mut t = (y0 / ystep).ceil() * ystep;
        while t <= y1 + 1e-9 * ystep {
            let y = sy(t);
            let _ = writeln!(
                s,
                "<line x1=\"{LEFT}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#ddd\"/>",
                LEFT + pw
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                LEFT - 6.0,
                y + 4.0,
                fmt_tick(t, ystep)
            );
            t += ystep;
        }
        let xstep = tick_step(x1 - x0, 8.0).max(if xs.iter().all(|x| x.fract() == 0.0) { 1.0 } else { 0.0 });
        let mut t = (x0 / xstep).ceil() * xstep;
        while t <= x1 + 1e-9 * xstep {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                sx(t),
                TOP + ph + 16.0,
                fmt_tick(t, xstep)
            );
            t += xstep;
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 12.0,
            esc(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            esc(&self.y_label)
        );

        for (i, series) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let mut pts: Vec<(f64, f64)> = series.points.clone();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let pos = |x: f64| xs.partition_point(|&v| v < x);
            let mut run: Vec<(f64, f64)> = Vec::new();
            let flush = |run: &mut Vec<(f64, f64)>, s: &mut String| {
                if run.len() > 1 {
                    let coords: Vec<String> = run.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                    let _ = writeln!(
                        s,
                        r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                        coords.join(" ")
                    );
                }
                run.clear();
            };
            for &(x, y) in &pts {
                let contiguous = run.last().is_some_and(|&(px, _)| pos(x) == pos(px) + 1);
                if !y.is_finite() || !contiguous {
                    flush(&mut run, &mut s);
                }
                if y.is_finite() {
                    run.push((x, y));
                }
            }
            flush(&mut run, &mut s);
            if self.markers || pts.len() == 1 {
                for &(x, y) in pts.iter().filter(|p| p.1.is_finite()) {
                    let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y));
                }
            }
            let ly = TOP + 10.0 + 18.0 * i as f64;
            let lx = LEFT + pw + 12.0;
            let _ = writeln!(
                s,
                r#"<g class="legend"><line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text></g>"#,
                lx + 20.0,
                lx + 26.0,
                ly + 4.0,
                esc(&series.label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Binary accuracy against threshold.
pub fn curve_plot(curve: &AgingCurve) -> LinePlot {
    LinePlot {
        title: if curve.is_partial() {
            format!("Aging curve (partial, failed k = {:?})", curve.failed)
        } else {
            "Aging curve".into()
        },
        x_label: "threshold group k".into(),
        y_label: "binary accuracy".into(),
        series: vec![Series {
            label: "accuracy".into(),
            points: curve.points.iter().map(|&(k, a)| (k as f64, a)).collect(),
        }],
        y_range: None,
        markers: true,
    }
}

/// Validation error (1 - exact accuracy) per epoch, one series per run.
pub fn error_plot(runs: &[(String, Vec<EpochLog>)]) -> LinePlot {
    LinePlot {
        title: "Validation error".into(),
        x_label: "epoch".into(),
        y_label: "error".into(),
        series: runs
            .iter()
            .map(|(label, log)| Series {
                label: label.clone(),
                points: log
                    .iter()
                    .filter_map(|r| r.val_exact.map(|a| (r.epoch as f64, 1.0 - a)))
                    .collect(),
            })
            .collect(),
        y_range: None,
        markers: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(label: &str, pts: &[(f64, f64)]) -> Series {
        Series {
            label: label.into(),
            points: pts.to_vec(),
        }
    }

    #[test]
    fn gaps_split_polylines() {
        let plot = LinePlot {
            series: vec![
                series("a", &[(1.0, 0.5), (2.0, 0.4), (3.0, 0.3), (4.0, 0.2)]),
                series("b", &[(1.0, 0.6), (2.0, 0.5), (4.0, 0.4)]),
            ],
            ..Default::default()
        };
        let svg = plot.to_svg();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches(r#"class="legend""#).count(), 2);
    }

    #[test]
    fn ticks() {
        assert_eq!(tick_step(1.0, 5.0), 0.2);
        assert_eq!(tick_step(40.0, 8.0), 5.0);
        assert_eq!(fmt_tick(0.2, 0.2), "0.2");
        assert_eq!(fmt_tick(10.0, 5.0), "10");
    }
}
