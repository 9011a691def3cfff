use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use memr::trainer::{read_metrics_csv, MetricsRow};

use crate::CliError;

/// Mean and population standard deviation across runs at one x position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandPoint {
    pub x: f64,
    pub mean: f64,
    pub std: f64,
}

/// Aggregates `y(row)` across runs row by row, over the rows every run has.
/// The x coordinate is the mean of `x(row)`.
pub fn band(
    runs: &[Vec<MetricsRow>],
    x: impl Fn(&MetricsRow) -> f64,
    y: impl Fn(&MetricsRow) -> f64,
) -> Vec<BandPoint> {
    let len = runs.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|i| {
            let n = runs.len() as f64;
            let xs = runs.iter().map(|r| x(&r[i])).sum::<f64>() / n;
            let ys: Vec<f64> = runs.iter().map(|r| y(&r[i])).collect();
            let mean = ys.iter().sum::<f64>() / n;
            let var = ys.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            BandPoint {
                x: xs,
                mean,
                std: var.sqrt(),
            }
        })
        .filter(|p| p.x.is_finite() && p.mean.is_finite())
        .collect()
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = lo.abs().max(1.0) * 0.05;
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else if v.fract().abs() < 1e-9 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Self-contained SVG with a shaded mean ± std band and the mean line.
pub fn render_svg(title: &str, x_label: &str, y_label: &str, points: &[BandPoint], runs: usize) -> String {
    let (x0, x1) = range(points.iter().map(|p| p.x));
    let (y0, y1) = range(points.iter().flat_map(|p| [p.mean - p.std, p.mean + p.std]));
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * (W - LEFT - RIGHT);
    let py = |y: f64| H - BOTTOM - (y - y0) / (y1 - y0) * (H - TOP - BOTTOM);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{title} ({runs} run{})</text>"#,
        W / 2.0,
        if runs == 1 { "" } else { "s" }
    );
    let _ = writeln!(
        s,
        r##"<g stroke="#333" fill="none"><line x1="{LEFT}" y1="{}" x2="{}" y2="{}"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}"/></g>"##,
        H - BOTTOM,
        W - RIGHT,
        H - BOTTOM,
        H - BOTTOM
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            px(xv),
            H - BOTTOM + 18.0,
            fmt_tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            py(yv) + 4.0,
            fmt_tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{y_label}</text>"#,
        (TOP + H - BOTTOM) / 2.0,
        (TOP + H - BOTTOM) / 2.0
    );

    let upper = points.iter().map(|p| format!("{:.2},{:.2}", px(p.x), py(p.mean + p.std)));
    let lower = points.iter().rev().map(|p| format!("{:.2},{:.2}", px(p.x), py(p.mean - p.std)));
    let band: Vec<String> = upper.chain(lower).collect();
    let _ = writeln!(
        s,
        r##"<polygon class="std-band" fill="#1f77b4" fill-opacity="0.25" stroke="none" points="{}"/>"##,
        band.join(" ")
    );
    let line: Vec<String> = points.iter().map(|p| format!("{:.2},{:.2}", px(p.x), py(p.mean))).collect();
    let _ = writeln!(
        s,
        r##"<polyline class="mean" fill="none" stroke="#1f77b4" stroke-width="2" points="{}"/>"##,
        line.join(" ")
    );
    s.push_str("</svg>\n");
    s
}

/// Loads every CSV up front so that a bad input produces no output at all.
pub fn load_runs(paths: &[PathBuf]) -> Result<Vec<Vec<MetricsRow>>, CliError> {
    let mut runs = Vec::with_capacity(paths.len());
    for p in paths {
        let rows = read_metrics_csv(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        if rows.is_empty() {
            return Err(CliError::Usage(format!("{}: no metrics rows", p.display())));
        }
        runs.push(rows);
    }
    Ok(runs)
}

pub const PLOT_FILES: [&str; 3] = ["return_vs_steps.svg", "return_vs_updates.svg", "rollouts_vs_steps.svg"];

/// Writes the three figures into `out` and returns their paths.
pub fn write_plots(runs: &[Vec<MetricsRow>], out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let step = |r: &MetricsRow| r.step as f64;
    let figures = [
        (
            "Evaluation return vs environment steps",
            "environment steps",
            "eval return",
            band(runs, step, |r| r.eval_return),
        ),
        (
            "Evaluation return vs policy updates",
            "policy updates",
            "eval return",
            band(runs, |r| r.policy_updates as f64, |r| r.eval_return),
        ),
        (
            "Model rollouts vs environment steps",
            "environment steps",
            "model rollouts",
            band(runs, step, |r| r.model_rollouts as f64),
        ),
    ];
    std::fs::create_dir_all(out).map_err(CliError::runtime)?;
    let mut written = Vec::new();
    for ((title, xl, yl, pts), file) in figures.into_iter().zip(PLOT_FILES) {
        let path = out.join(file);
        std::fs::write(&path, render_svg(title, xl, yl, &pts, runs.len())).map_err(CliError::runtime)?;
        written.push(path);
    }
    Ok(written)
}
