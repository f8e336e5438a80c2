//! Turns a resolved configuration into initial points and a step size, runs
//! the trajectories and summarises each one.

use std::thread;

use eos_core::analysis::{summarize, RegimeReport};
use eos_core::dynamics::{initial_point, run, RunConfig, Trajectory};
use eos_core::manifold::{
    geometry_constants, point_at_distance, random_tangent_direction, GeometryConstants,
};
use eos_core::{FactorisationProblem, OnManifoldPoint, Point};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{EtaRule, RegimeRequest, ResolvedConfig};
use crate::error::{LabError, LabResult};

/// Draws allowed per initialisation when the subcritical preset rejects
/// starting points too close to the balanced point.
pub const MAX_REJECTIONS: usize = 1000;

/// A fully determined experiment: the step size and every starting point.
#[derive(Debug, Clone)]
pub struct Plan {
    pub config: ResolvedConfig,
    pub problem: FactorisationProblem,
    pub constants: GeometryConstants,
    pub eta: f64,
    pub starts: Vec<Point>,
}

pub struct InitRun {
    pub trajectory: Trajectory,
    pub report: RegimeReport,
}

pub struct Outcome {
    pub plan: Plan,
    pub runs: Vec<InitRun>,
}

/// Relative sharpness excess `λ(θ∥₀)/λ* − 1` the subcritical preset demands
/// at offset `δ·y^{1/p}`: half of the leading-order value `2δ²/p`.
pub fn subcritical_threshold(depth: usize, par_offset: f64) -> f64 {
    par_offset * par_offset / depth as f64
}

fn draw_par(
    prob: &FactorisationProblem,
    rng: &mut ChaCha8Rng,
    distance: f64,
    min_sharpness: Option<f64>,
) -> LabResult<OnManifoldPoint> {
    for _ in 0..MAX_REJECTIONS {
        let dir = random_tangent_direction(prob, rng);
        let par = point_at_distance(prob, &dir, distance)?;
        match min_sharpness {
            Some(bound) if prob.sharpness(&par)? < bound => continue,
            _ => return Ok(par),
        }
    }
    Err(LabError::Config(format!(
        "no starting point at distance {distance} passed the subcritical sharpness threshold in {MAX_REJECTIONS} draws"
    )))
}

pub fn plan(config: &ResolvedConfig) -> LabResult<Plan> {
    let problem = config.problem()?;
    let constants = geometry_constants(&problem);
    let distance = config.par_offset * problem.scale();
    let min_sharpness = (config.regime == RegimeRequest::Subcritical
        && config.eta_rule == EtaRule::BandMidpoint)
        .then(|| {
            constants.lambda_star * (1.0 + subcritical_threshold(config.depth, config.par_offset))
        });

    let mut starts = Vec::with_capacity(config.inits);
    let mut sharpness0 = Vec::with_capacity(config.inits);
    if let Some(theta0) = &config.theta0 {
        let theta = Point::from_column_slice(theta0);
        let par = eos_core::manifold::project(&problem, &theta)?;
        sharpness0.push(problem.sharpness(&par)?);
        starts.push(theta);
    } else {
        for i in 0..config.inits {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let par = draw_par(&problem, &mut rng, distance, min_sharpness)?;
            sharpness0.push(problem.sharpness(&par)?);
            starts.push(initial_point(&problem, &par, config.perp0)?);
        }
    }

    let max_l0 = sharpness0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_l0 = sharpness0.iter().copied().fold(f64::INFINITY, f64::min);
    let eta = match config.eta_rule {
        EtaRule::StableFraction => 0.9 * 2.0 / max_l0,
        EtaRule::BandMidpoint => 0.5 * (2.0 / min_l0 + 2.0 / constants.lambda_star),
        EtaRule::Edge => 2.0 / constants.lambda_star,
        EtaRule::EdgePlusAlpha => (2.0 + config.alpha.unwrap_or(0.0)) / constants.lambda_star,
        EtaRule::Explicit(eta) => eta,
    };
    Ok(Plan {
        config: config.clone(),
        problem,
        constants,
        eta,
        starts,
    })
}

fn run_one(plan: &Plan, start: &Point) -> LabResult<InitRun> {
    let run_config = RunConfig::new(
        plan.problem,
        plan.eta,
        start.clone(),
        plan.config.steps,
        plan.config.record_every,
    )?;
    let trajectory = run(&run_config)?;
    let report = summarize(&trajectory, &plan.constants)?;
    Ok(InitRun { trajectory, report })
}

/// Runs every initialisation, in parallel batches of at most `workers`
/// threads. Results keep the order of `plan.starts`.
pub fn execute(plan: Plan, workers: usize) -> LabResult<Outcome> {
    let workers = workers.max(1);
    let mut runs = Vec::with_capacity(plan.starts.len());
    for batch in plan.starts.chunks(workers) {
        let results: Vec<LabResult<InitRun>> = thread::scope(|s| {
            let handles: Vec<_> = batch
                .iter()
                .map(|start| s.spawn(|| run_one(&plan, start)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join().unwrap_or_else(|_| {
                        Err(LabError::CheckFailed("worker thread panicked".into()))
                    })
                })
                .collect()
        });
        for r in results {
            runs.push(r?);
        }
    }
    Ok(Outcome { plan, runs })
}

pub fn default_workers() -> usize {
    thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}
