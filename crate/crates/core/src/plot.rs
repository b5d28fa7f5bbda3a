//! Self-contained SVG figures for a sweep.
//!
//! Every chart pads its axes by 5% of the data span on each side. The plot
//! area carries the resulting ranges as `data-x-min`, `data-x-max`,
//! `data-y-min` and `data-y-max` attributes. Series use the classes
//! `pooled`, `task` and `points` so they can be counted.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{relative_improvement, TaskReport};

/// Everything the figures need from a finished sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Successful sweep points, ascending.
    pub taus: Vec<f64>,
    pub lrs: Vec<f64>,
    pub pooled_perplexity: Vec<f64>,
    pub base_pooled_perplexity: f64,
    pub tasks: Vec<TaskReport>,
}

impl SweepResult {
    /// Index of the sweep point with the lowest pooled perplexity.
    pub fn best_index(&self) -> Option<usize> {
        (0..self.taus.len()).min_by(|&a, &b| self.pooled_perplexity[a].total_cmp(&self.pooled_perplexity[b]))
    }
}

pub const MARGIN_FRACTION: f64 = 0.05;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// `[lo, hi]` widened by 5% of the span on each side; a zero span is
/// widened by 5% of the magnitude (or by 0.05 around zero).
pub fn padded_range(values: impl IntoIterator<Item = f64>) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.into_iter().filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return None;
    }
    let span = hi - lo;
    let pad = if span > 0.0 {
        MARGIN_FRACTION * span
    } else if lo != 0.0 {
        MARGIN_FRACTION * lo.abs()
    } else {
        MARGIN_FRACTION
    };
    Some((lo - pad, hi + pad))
}

struct Series {
    class: &'static str,
    label: String,
    points: Vec<(f64, f64)>,
    width: f64,
    color: &'static str,
    line: bool,
}

struct Chart {
    title: String,
    x_label: String,
    y_label: String,
    /// Tick positions and labels in data coordinates.
    x_ticks: Option<Vec<(f64, String)>>,
    series: Vec<Series>,
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e5).contains(&a) {
        format!("{v:.1e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else if a >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

fn linear_ticks(lo: f64, hi: f64) -> Vec<(f64, String)> {
    (0..=4)
        .map(|i| {
            let v = lo + (hi - lo) * i as f64 / 4.0;
            (v, fmt_tick(v))
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Chart {
    fn render(&self) -> Result<String> {
        let xr = padded_range(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
        let yr = padded_range(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
        let ((x0, x1), (y0, y1)) = match (xr, yr) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(Error::Contract(format!("chart '{}' has no finite points", self.title))),
        };
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

        let mut s = String::new();
        writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        )
        .unwrap();
        writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        )
        .unwrap();
        writeln!(
            s,
            r#"<g class="plot-area" data-x-min="{x0}" data-x-max="{x1}" data-y-min="{y0}" data-y-max="{y1}">"#
        )
        .unwrap();
        writeln!(
            s,
            r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
        )
        .unwrap();

        let x_ticks = self.x_ticks.clone().unwrap_or_else(|| linear_ticks(x0, x1));
        for (v, label) in x_ticks.iter().filter(|(v, _)| *v >= x0 && *v <= x1) {
            let x = sx(*v);
            writeln!(
                s,
                r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#444"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                TOP + ph,
                TOP + ph + 5.0,
                TOP + ph + 18.0,
                escape(label)
            )
            .unwrap();
        }
        for (v, label) in linear_ticks(y0, y1) {
            let y = sy(v);
            writeln!(
                s,
                r##"<line x1="{:.2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="#444"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                LEFT - 5.0,
                LEFT - 8.0,
                y + 4.0,
                label
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        )
        .unwrap();

        for series in &self.series {
            let pts: Vec<(f64, f64)> = series.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).copied().collect();
            if series.line && pts.len() > 1 {
                let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                writeln!(
                    s,
                    r#"<polyline class="{}" fill="none" stroke="{}" stroke-width="{}" points="{}"><title>{}</title></polyline>"#,
                    series.class,
                    series.color,
                    series.width,
                    coords.join(" "),
                    escape(&series.label)
                )
                .unwrap();
            } else {
                writeln!(s, r#"<g class="{}"><title>{}</title>"#, series.class, escape(&series.label)).unwrap();
                for &(x, y) in &pts {
                    writeln!(
                        s,
                        r#"<circle cx="{:.2}" cy="{:.2}" r="{}" fill="{}"/>"#,
                        sx(x),
                        sy(y),
                        1.5 + series.width,
                        series.color
                    )
                    .unwrap();
                }
                writeln!(s, "</g>").unwrap();
            }
        }
        writeln!(s, "</g>").unwrap();

        let named: Vec<&Series> = self.series.iter().filter(|s| s.class != "task").collect();
        for (i, series) in named.iter().enumerate() {
            let y = TOP + 14.0 + 16.0 * i as f64;
            let x = WIDTH - RIGHT - 170.0;
            writeln!(
                s,
                r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="{}"/><text x="{}" y="{}">{}</text>"#,
                x + 18.0,
                series.color,
                series.width,
                x + 24.0,
                y + 4.0,
                escape(&series.label)
            )
            .unwrap();
        }
        s.push_str("</svg>\n");
        Ok(s)
    }
}

/// Horizontal coordinate for `tau` on the log axis. Zero sits one decade
/// below the smallest positive value.
fn log_position(tau: f64, smallest_positive: f64) -> f64 {
    if tau > 0.0 {
        tau.log10()
    } else {
        smallest_positive.log10() - 1.0
    }
}

/// Rendered figures and any notices about skipped ones.
#[derive(Clone, Debug, Default)]
pub struct Figures {
    /// `(file name, svg text)`.
    pub files: Vec<(String, String)>,
    pub notices: Vec<String>,
}

/// Renders (a) perplexity vs tau, (b) relative improvement vs training
/// documents, (c) adapter distance vs training documents and (d) final
/// perplexity vs training documents. (b) needs at least two sweep points.
pub fn emit_plots(result: &SweepResult) -> Result<Figures> {
    if result.tasks.is_empty() {
        return Err(Error::Contract("no tasks to plot".into()));
    }
    if result.taus.is_empty() {
        return Err(Error::Contract("sweep has no completed points".into()));
    }
    let best = result.best_index().expect("nonempty");
    let best_tau = result.taus[best];
    let smallest = result.taus.iter().copied().filter(|&t| t > 0.0).fold(f64::INFINITY, f64::min);
    let smallest = if smallest.is_finite() { smallest } else { 1.0 };
    let xs: Vec<f64> = result.taus.iter().map(|&t| log_position(t, smallest)).collect();
    let single = result.taus.len() == 1;
    let mut figures = Figures::default();

    let mut series: Vec<Series> = result
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| Series {
            class: "task",
            label: t.name.clone(),
            points: xs.iter().copied().zip(t.perplexity.iter().copied()).collect(),
            width: 1.0,
            color: PALETTE[i % PALETTE.len()],
            line: !single,
        })
        .collect();
    series.push(Series {
        class: "pooled",
        label: "pooled".into(),
        points: xs.iter().copied().zip(result.pooled_perplexity.iter().copied()).collect(),
        width: 3.5,
        color: "#000000",
        line: !single,
    });
    let ticks = result
        .taus
        .iter()
        .zip(&xs)
        .map(|(&t, &x)| (x, fmt_tick(t)))
        .collect();
    figures.files.push((
        "perplexity_vs_tau.svg".into(),
        Chart {
            title: "Test perplexity vs precision".into(),
            x_label: "tau (log scale)".into(),
            y_label: "test perplexity".into(),
            x_ticks: Some(ticks),
            series,
        }
        .render()?,
    ));

    let docs = |t: &TaskReport| t.n_train_docs as f64;
    if single {
        figures
            .notices
            .push("relative improvement figure skipped: sweep has a single tau".into());
    } else {
        let (lo, hi) = (0, result.taus.len() - 1);
        let improvement = |base: usize| -> Result<Vec<(f64, f64)>> {
            result
                .tasks
                .iter()
                .map(|t| Ok((docs(t), relative_improvement(t.perplexity[best], t.perplexity[base])?)))
                .collect()
        };
        let series = vec![
            Series {
                class: "points",
                label: format!("tau={} vs tau={}", fmt_tick(best_tau), fmt_tick(result.taus[lo])),
                points: improvement(lo)?,
                width: 1.5,
                color: PALETTE[0],
                line: false,
            },
            Series {
                class: "points",
                label: format!("tau={} vs tau={}", fmt_tick(best_tau), fmt_tick(result.taus[hi])),
                points: improvement(hi)?,
                width: 1.5,
                color: PALETTE[1],
                line: false,
            },
        ];
        figures.files.push((
            "relative_improvement_vs_docs.svg".into(),
            Chart {
                title: "Relative improvement vs training documents".into(),
                x_label: "training documents".into(),
                y_label: "relative improvement".into(),
                x_ticks: None,
                series,
            }
            .render()?,
        ));
    }

    let scatter = |title: &str, y_label: &str, ys: Vec<(f64, f64)>| Chart {
        title: title.into(),
        x_label: "training documents".into(),
        y_label: y_label.into(),
        x_ticks: None,
        series: vec![Series {
            class: "points",
            label: format!("tau={}", fmt_tick(best_tau)),
            points: ys,
            width: 1.5,
            color: PALETTE[0],
            line: false,
        }],
    };
    figures.files.push((
        "distance_vs_docs.svg".into(),
        scatter(
            "Adapter distance to the mean vs training documents",
            "||theta_d - Theta||_2",
            result.tasks.iter().map(|t| (docs(t), t.distance[best])).collect(),
        )
        .render()?,
    ));
    figures.files.push((
        "perplexity_vs_docs.svg".into(),
        scatter(
            "Test perplexity vs training documents",
            "test perplexity",
            result.tasks.iter().map(|t| (docs(t), t.perplexity[best])).collect(),
        )
        .render()?,
    ));
    Ok(figures)
}
