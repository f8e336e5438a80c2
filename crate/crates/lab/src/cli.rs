//! Flag parsing and the top-level driver behind the `eos-lab` binary.

use std::ffi::OsString;
use std::path::PathBuf;
use std::str::FromStr;

use clap::Parser;

use crate::checks::{
    check_constants, check_derivatives, check_normal_form, CheckKind, CheckOutcome,
};
use crate::config::{ExperimentConfig, RegimeRequest};
use crate::error::{LabError, LabResult};
use crate::experiment::{default_workers, execute, plan};
use crate::output::write_outcome;

/// A single depth or an inclusive range written `lo..hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DepthArg {
    pub lo: usize,
    pub hi: usize,
}

impl DepthArg {
    pub fn values(&self) -> Vec<usize> {
        (self.lo..=self.hi).collect()
    }

    fn single(&self) -> LabResult<usize> {
        if self.lo == self.hi {
            Ok(self.lo)
        } else {
            Err(LabError::Config(format!(
                "a depth range ({}..{}) is only accepted by --check",
                self.lo, self.hi
            )))
        }
    }
}

impl FromStr for DepthArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| format!("invalid depth '{t}': {e}"))
        };
        let (lo, hi) = match s.split_once("..") {
            Some((a, b)) => (parse(a)?, parse(b.trim_start_matches('='))?),
            None => {
                let d = parse(s)?;
                (d, d)
            }
        };
        if lo < 2 || hi < lo {
            return Err(format!(
                "depth must be at least 2 and ranges increasing, got '{s}'"
            ));
        }
        Ok(DepthArg { lo, hi })
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "eos-lab",
    version,
    about = "Gradient descent at the edge of stability on scalar factorisation",
    allow_negative_numbers = true
)]
pub struct Cli {
    /// Depth p, or an inclusive range `lo..hi` with --check constants.
    #[arg(long)]
    pub depth: Option<DepthArg>,
    /// Target y of the product.
    #[arg(long)]
    pub target: Option<f64>,
    #[arg(long, value_enum)]
    pub regime: Option<RegimeRequest>,
    /// Explicit step size (overrides the regime preset).
    #[arg(long)]
    pub eta: Option<f64>,
    /// Supercritical excess ηλ* − 2.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Initial orthogonal offset.
    #[arg(long)]
    pub perp0: Option<f64>,
    /// Initial distance from the balanced point, in units of y^(1/p).
    #[arg(long)]
    pub par_offset: Option<f64>,
    /// Number of random initialisations.
    #[arg(long)]
    pub inits: Option<usize>,
    /// Gradient descent steps per trajectory.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Keep every k-th iterate.
    #[arg(long)]
    pub record_every: Option<usize>,
    /// Seed of the initialisation sampler.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run a numerical self-check instead of an experiment.
    #[arg(long, value_enum)]
    pub check: Option<CheckKind>,
    /// Also write an SVG chart per experiment.
    #[arg(long)]
    pub plots: bool,
    /// Threads used for independent initialisations (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

impl Cli {
    /// The config file (or defaults) with every given flag applied on top.
    pub fn experiment_config(&self) -> LabResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(d) = self.depth {
            cfg.depth = d.single()?;
        }
        if let Some(v) = self.target {
            cfg.target = v;
        }
        if self.regime.is_some() {
            cfg.regime = self.regime;
        }
        if self.eta.is_some() {
            cfg.eta = self.eta;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if self.perp0.is_some() {
            cfg.perp0 = self.perp0;
        }
        if self.par_offset.is_some() {
            cfg.par_offset = self.par_offset;
        }
        if let Some(v) = self.inits {
            cfg.inits = v;
        }
        if self.steps.is_some() {
            cfg.steps = self.steps;
        }
        if let Some(v) = self.record_every {
            cfg.record_every = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if self.plots {
            cfg.plots = true;
        }
        Ok(cfg)
    }
}

fn run_checks(cli: &Cli, kind: CheckKind) -> LabResult<Vec<CheckOutcome>> {
    let depths = cli.depth.map(|d| d.values());
    let mut out = Vec::new();
    if matches!(kind, CheckKind::Constants | CheckKind::All) {
        let depths = depths.clone().unwrap_or_else(|| (2..=8).collect());
        let targets = cli
            .target
            .map(|t| vec![t])
            .unwrap_or_else(|| vec![0.5, 1.0, 2.0]);
        out.push(check_constants(&depths, &targets)?);
    }
    let target = cli.target.unwrap_or(1.0);
    let seed = cli.seed.unwrap_or(0);
    if matches!(kind, CheckKind::Derivatives | CheckKind::All) {
        let depths = depths.clone().unwrap_or_else(|| vec![2, 3, 5]);
        out.push(check_derivatives(&depths, target, 50, seed)?);
    }
    if matches!(kind, CheckKind::Normalform | CheckKind::All) {
        for depth in depths.clone().unwrap_or_else(|| vec![5]) {
            out.push(check_normal_form(depth, target, seed)?);
        }
    }
    Ok(out)
}

fn drive(cli: &Cli) -> LabResult<()> {
    if let Some(kind) = cli.check {
        let outcomes = run_checks(cli, kind)?;
        let mut failed = Vec::new();
        for o in &outcomes {
            println!(
                "[{}] {}",
                o.name,
                if o.passed { "passed" } else { "FAILED" }
            );
            print!("{}", o.text);
            if !o.passed {
                failed.push(o.name);
            }
        }
        return if failed.is_empty() {
            Ok(())
        } else {
            Err(LabError::CheckFailed(failed.join(", ")))
        };
    }

    let resolved = cli.experiment_config()?.resolve()?;
    let planned = plan(&resolved)?;
    let eta = planned.eta;
    let outcome = execute(planned, cli.workers.unwrap_or_else(default_workers))?;
    let written = write_outcome(&outcome, &resolved.out)?;

    println!(
        "{} experiment: p = {}, y = {}, eta = {eta:.17}, {} steps",
        resolved.regime, resolved.depth, resolved.target, resolved.steps
    );
    for (i, run) in outcome.runs.iter().enumerate() {
        let r = &run.report;
        let mut line = format!("  init {i}: {:?}", r.regime.tag);
        if let Some(tau) = r.tau {
            line += &format!(", tau = {tau}");
        }
        for s in &r.rates {
            line += &format!(
                ", {} {:?} {:.4} (r2 {:.4})",
                s.series, s.fit.model, s.fit.parameter, s.fit.r_squared
            );
        }
        if let Some(a) = r.cycle_amplitude {
            line += &format!(", cycle amplitude {a:.6e}");
        }
        if let Some(g) = r.suboptimality_gap {
            line += &format!(", gap {g:.6e}");
        }
        let failing: Vec<&str> = r
            .checks
            .iter()
            .filter(|c| !c.holds)
            .map(|c| c.name.as_str())
            .collect();
        if !failing.is_empty() {
            line += &format!(", failing checks: {}", failing.join(" "));
        }
        if r.divergence_flag {
            line += ", DIVERGED";
        }
        println!("{line}");
    }
    println!(
        "wrote {} files to {}",
        written.len(),
        resolved.out.display()
    );
    Ok(())
}

/// Parses `args` (including the program name) and runs. Returns the exit
/// code: 0 on success, 2 on a configuration error, 3 on a numerical, I/O or
/// check failure.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match drive(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("eos-lab: {e}");
            e.exit_code()
        }
    }
}
