//! CSV, JSON and SVG writers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use eos_core::analysis::{RegimeReport, SeriesFit, TheoremCheck};
use eos_core::dynamics::{RegimeSpec, Trajectory};
use serde::Serialize;

use crate::config::{RegimeRequest, ResolvedConfig};
use crate::error::{LabError, LabResult};
use crate::experiment::Outcome;

pub const CSV_HEADER: &str = "t,loss,sharpness_par,dist_par,theta_perp,eta_lambda";

/// The trajectory as CSV text: one row per record, floats with 17
/// significant digits, LF line endings.
pub fn csv_string(traj: &Trajectory) -> String {
    let mut out = String::with_capacity(120 * (traj.records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in &traj.records {
        let _ = writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.t, r.loss, r.sharpness_par, r.dist_par, r.tube.theta_perp, r.eta_lambda
        );
    }
    out
}

fn write_file(path: &Path, contents: &[u8]) -> LabResult<()> {
    fs::write(path, contents).map_err(|e| LabError::io(path, e))
}

pub fn emit_csv(traj: &Trajectory, path: &Path) -> LabResult<()> {
    write_file(path, csv_string(traj).as_bytes())
}

/// One experiment's summary. Per-initialisation fields are arrays in the
/// order of `initial_points`.
#[derive(Debug, Serialize)]
pub struct Summary<'a> {
    pub config: &'a ResolvedConfig,
    pub regime: Vec<RegimeSpec>,
    pub tau: Vec<Option<usize>>,
    pub rates: Vec<Vec<SeriesFit>>,
    pub cycle_amplitude: Vec<Option<f64>>,
    pub suboptimality_gap: Vec<Option<f64>>,
    pub checks: Vec<Vec<TheoremCheck>>,
    pub divergence_flag: Vec<bool>,
    pub eta: f64,
    pub lambda_star: f64,
    pub c_star: f64,
    pub initial_points: Vec<Vec<f64>>,
    pub diagnostics: Vec<BTreeMap<String, f64>>,
    pub csv_files: Vec<String>,
}

impl<'a> Summary<'a> {
    pub fn new(outcome: &'a Outcome, csv_files: Vec<String>) -> Self {
        let reports: Vec<&RegimeReport> = outcome.runs.iter().map(|r| &r.report).collect();
        let plan = &outcome.plan;
        Summary {
            config: &plan.config,
            regime: reports.iter().map(|r| r.regime).collect(),
            tau: reports.iter().map(|r| r.tau).collect(),
            rates: reports.iter().map(|r| r.rates.clone()).collect(),
            cycle_amplitude: reports.iter().map(|r| r.cycle_amplitude).collect(),
            suboptimality_gap: reports.iter().map(|r| r.suboptimality_gap).collect(),
            checks: reports.iter().map(|r| r.checks.clone()).collect(),
            divergence_flag: reports.iter().map(|r| r.divergence_flag).collect(),
            eta: plan.eta,
            lambda_star: plan.constants.lambda_star,
            c_star: plan.constants.c_star,
            initial_points: plan
                .starts
                .iter()
                .map(|p| p.iter().copied().collect())
                .collect(),
            diagnostics: reports.iter().map(|r| r.diagnostics.clone()).collect(),
            csv_files,
        }
    }
}

pub fn emit_summary(summary: &Summary<'_>, path: &Path) -> LabResult<()> {
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// One panel of a chart: several series sharing axes.
pub struct Panel {
    pub title: String,
    pub series: Vec<Vec<(f64, f64)>>,
    pub log_x: bool,
}

const PANEL_W: f64 = 400.0;
const PANEL_H: f64 = 320.0;
const MARGIN_L: f64 = 62.0;
const MARGIN_R: f64 = 14.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 40.0;
const MAX_POINTS: usize = 1500;
/// Decades shown below the largest value on a log axis.
const MAX_DECADES: f64 = 30.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Keeps every k-th point and the last one so each polyline has at most
/// about `MAX_POINTS` vertices.
fn thin(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let stride = points.len().div_ceil(MAX_POINTS).max(1);
    let mut out: Vec<(f64, f64)> = points.iter().step_by(stride).copied().collect();
    if let (Some(last), Some(kept)) = (points.last(), out.last()) {
        if kept != last {
            out.push(*last);
        }
    }
    out
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Option<Axis> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() || !hi.is_finite() {
            return None;
        }
        if log {
            lo = lo.max(hi - MAX_DECADES).floor();
            hi = hi.ceil();
        }
        if hi - lo < 1e-12 {
            lo -= 1.0;
            hi += 1.0;
        }
        Some(Axis { lo, hi, log })
    }

    fn unit(&self, v: f64) -> f64 {
        let v = if self.log { v.log10() } else { v };
        ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let decades = (self.hi - self.lo).round() as i64;
            let step = (decades / 6).max(1);
            (0..=decades)
                .step_by(step as usize)
                .map(|k| {
                    let e = self.lo as i64 + k;
                    ((k as f64) / (self.hi - self.lo), format!("1e{e}"))
                })
                .collect()
        } else {
            (0..=4)
                .map(|k| {
                    let u = k as f64 / 4.0;
                    let v = self.lo + u * (self.hi - self.lo);
                    (u, format!("{v:.3e}"))
                })
                .collect()
        }
    }
}

fn panel_svg(out: &mut String, panel: &Panel, x0: f64) {
    let (left, top) = (x0 + MARGIN_L, MARGIN_T);
    let (w, h) = (PANEL_W - MARGIN_L - MARGIN_R, PANEL_H - MARGIN_T - MARGIN_B);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
        left + w / 2.0,
        escape(&panel.title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{left:.2}" y="{top:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="#444"/>"##
    );
    let usable: Vec<Vec<(f64, f64)>> = panel
        .series
        .iter()
        .map(|s| {
            s.iter()
                .copied()
                .filter(|(x, y)| {
                    x.is_finite() && y.is_finite() && *y > 0.0 && (!panel.log_x || *x > 0.0)
                })
                .collect()
        })
        .collect();
    let xs = Axis::fit(usable.iter().flatten().map(|p| p.0), panel.log_x);
    let ys = Axis::fit(usable.iter().flatten().map(|p| p.1), true);
    let (Some(xa), Some(ya)) = (xs, ys) else {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">no positive data</text>"#,
            left + w / 2.0,
            top + h / 2.0
        );
        return;
    };
    for (u, label) in ya.ticks() {
        let y = top + h * (1.0 - u);
        let _ = writeln!(
            out,
            r##"<line x1="{left:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{label}</text>"##,
            left + w,
            left - 4.0,
            y + 3.0
        );
    }
    for (u, label) in xa.ticks() {
        let x = left + w * u;
        let _ = writeln!(
            out,
            r##"<line x1="{x:.2}" y1="{top:.2}" x2="{x:.2}" y2="{:.2}" stroke="#eee"/><text x="{x:.2}" y="{:.2}" text-anchor="middle" font-size="10">{label}</text>"##,
            top + h,
            top + h + 14.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="11">t</text>"#,
        left + w / 2.0,
        top + h + 30.0
    );
    for (i, s) in usable.iter().enumerate() {
        if s.is_empty() {
            continue;
        }
        let mut pts = String::new();
        for (x, y) in thin(s) {
            let _ = write!(
                pts,
                "{:.2},{:.2} ",
                left + w * xa.unit(x),
                top + h * (1.0 - ya.unit(y))
            );
        }
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1" points="{}"/>"#,
            PALETTE[i % PALETTE.len()],
            pts.trim_end()
        );
    }
}

/// A self-contained SVG with the panels side by side, log-scale y axes.
pub fn svg_string(title: &str, panels: &[Panel]) -> String {
    let width = PANEL_W * panels.len().max(1) as f64;
    let height = PANEL_H + 24.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, "<title>{}</title>", escape(title));
    let _ = writeln!(out, r#"<g transform="translate(0,24)">"#);
    for (k, panel) in panels.iter().enumerate() {
        panel_svg(&mut out, panel, PANEL_W * k as f64);
    }
    let _ = writeln!(out, "</g>");
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="16" text-anchor="middle" font-size="14" font-weight="bold">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    out.push_str("</svg>\n");
    out
}

/// The three standard panels: distance to the balanced point, `|θ⊥|` and
/// the sharpness excess, one line per trajectory.
pub fn standard_panels(trajectories: &[&Trajectory], lambda_star: f64, log_x: bool) -> Vec<Panel> {
    let series = |f: &dyn Fn(&eos_core::dynamics::Record) -> f64| -> Vec<Vec<(f64, f64)>> {
        trajectories
            .iter()
            .map(|tr| tr.records.iter().map(|r| (r.t as f64, f(r))).collect())
            .collect()
    };
    vec![
        Panel {
            title: "distance to balanced point".into(),
            series: series(&|r| r.dist_par),
            log_x,
        },
        Panel {
            title: "|theta_perp|".into(),
            series: series(&|r| r.tube.theta_perp.abs()),
            log_x,
        },
        Panel {
            title: "sharpness - lambda*".into(),
            series: series(&|r| r.sharpness_par - lambda_star),
            log_x,
        },
    ]
}

pub fn emit_svg(title: &str, panels: &[Panel], path: &Path) -> LabResult<()> {
    write_file(path, svg_string(title, panels).as_bytes())
}

/// Writes every artefact of an experiment into `dir` and returns the paths
/// in write order.
pub fn write_outcome(outcome: &Outcome, dir: &Path) -> LabResult<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let label = outcome.plan.config.regime.label();
    let mut written = Vec::new();
    let mut names = Vec::new();
    for (i, run) in outcome.runs.iter().enumerate() {
        let name = format!("{label}_init{i}.csv");
        let path = dir.join(&name);
        emit_csv(&run.trajectory, &path)?;
        names.push(name);
        written.push(path);
    }
    let summary = Summary::new(outcome, names);
    let path = dir.join(format!("{label}_summary.json"));
    emit_summary(&summary, &path)?;
    written.push(path);
    if outcome.plan.config.plots {
        let trajs: Vec<&Trajectory> = outcome.runs.iter().map(|r| &r.trajectory).collect();
        let log_x = outcome.plan.config.regime == RegimeRequest::Critical;
        let panels = standard_panels(&trajs, outcome.plan.constants.lambda_star, log_x);
        let title = format!(
            "{label}: p = {}, y = {}, eta = {:.6}",
            outcome.plan.config.depth, outcome.plan.config.target, outcome.plan.eta
        );
        let path = dir.join(format!("{label}.svg"));
        emit_svg(&title, &panels, &path)?;
        written.push(path);
    }
    Ok(written)
}
