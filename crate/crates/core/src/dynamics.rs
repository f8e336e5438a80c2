//! Gradient descent on `ℓ`, per-step tube diagnostics, the reference
//! normal-form maps and regime classification.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::manifold::{dist_to_balanced, project, project_kkt, riem_grad_lambda, TubeCoords};
use crate::problem::{FactorisationProblem, NormalJets, OnManifoldPoint, Point};

/// Iterates with a coordinate outside `(0, COORD_LIMIT)` abort the run.
pub const COORD_LIMIT: f64 = 1e6;
/// Iterates with loss above this abort the run.
pub const LOSS_LIMIT: f64 = 1e12;
/// Relative width of the band around `2/λ*` classified as critical.
pub const CRITICAL_RTOL: f64 = 1e-12;

/// `θ − η∇ℓ(θ)`.
pub fn gd_step(prob: &FactorisationProblem, eta: f64, theta: &Point) -> Result<Point> {
    let g = prob.grad_loss(theta)?;
    Ok(theta - g * eta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub problem: FactorisationProblem,
    pub eta: f64,
    pub theta0: Point,
    pub steps: usize,
    pub record_every: usize,
}

impl RunConfig {
    pub fn new(
        problem: FactorisationProblem,
        eta: f64,
        theta0: Point,
        steps: usize,
        record_every: usize,
    ) -> Result<Self> {
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {eta}"
            )));
        }
        if steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if record_every == 0 {
            return Err(Error::Config("record_every must be at least 1".into()));
        }
        problem.check_len(&theta0)?;
        if let Some((index, &value)) = theta0.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::NonPositiveCoordinate { index, value });
        }
        Ok(Self {
            problem,
            eta,
            theta0,
            steps,
            record_every,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub t: usize,
    pub theta: Point,
    pub loss: f64,
    pub tube: TubeCoords,
    pub sharpness_par: f64,
    pub dist_par: f64,
    pub eta_lambda: f64,
    /// Normal-form coordinate of the orthogonal component, when defined.
    pub phi: Option<f64>,
    /// The projection of this iterate sat next to the focal set.
    pub near_focal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub problem: FactorisationProblem,
    pub eta: f64,
    pub record_every: usize,
    pub records: Vec<Record>,
    pub diverged: bool,
}

impl Trajectory {
    pub fn last(&self) -> Option<&Record> {
        self.records.last()
    }
}

fn make_record(prob: &FactorisationProblem, eta: f64, t: usize, theta: &Point) -> Result<Record> {
    let proj = project_kkt(prob, theta)?;
    let n = prob.normal(&proj.point)?;
    let theta_perp = (theta - proj.point.coords()).dot(&n);
    let tube = TubeCoords {
        theta_par: proj.point,
        theta_perp,
    };
    let jets = prob.normal_jets(&tube.theta_par)?;
    let sharpness_par = jets.sharpness;
    let phi = phi_from_jets(&jets, eta, theta_perp).ok();
    Ok(Record {
        t,
        theta: theta.clone(),
        loss: prob.loss(theta)?,
        dist_par: dist_to_balanced(prob, &tube.theta_par),
        sharpness_par,
        eta_lambda: eta * sharpness_par,
        phi,
        near_focal: proj.near_focal,
        tube,
    })
}

fn out_of_bounds(prob: &FactorisationProblem, theta: &Point) -> bool {
    let coords_bad = theta.iter().any(|v| !(*v > 0.0 && *v < COORD_LIMIT));
    coords_bad || !(prob.loss(theta).is_ok_and(|l| l <= LOSS_LIMIT))
}

/// Runs constant-step gradient descent, recording every `record_every` steps
/// (including `t = 0`). Leaving the guard box truncates the trajectory and
/// sets `diverged`.
pub fn run(config: &RunConfig) -> Result<Trajectory> {
    let prob = &config.problem;
    let mut theta = config.theta0.clone();
    let mut records = Vec::with_capacity(config.steps / config.record_every + 1);
    let mut diverged = false;
    for t in 0..=config.steps {
        if out_of_bounds(prob, &theta) {
            diverged = true;
            break;
        }
        if t % config.record_every == 0 {
            records.push(make_record(prob, config.eta, t, &theta)?);
        }
        if t < config.steps {
            theta = gd_step(prob, config.eta, &theta)?;
        }
    }
    Ok(Trajectory {
        problem: *prob,
        eta: config.eta,
        record_every: config.record_every,
        records,
        diverged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeTag {
    Stable,
    Subcritical,
    Critical,
    Supercritical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegimeSpec {
    pub tag: RegimeTag,
    pub eta: f64,
    /// `(η − 2/λ*, η − 2/λ(θ∥₀))`.
    pub margins: (f64, f64),
}

pub fn classify(prob: &FactorisationProblem, eta: f64, theta0: &Point) -> Result<RegimeSpec> {
    let par0 = project(prob, theta0)?;
    let edge_star = 2.0 / prob.lambda_star();
    let edge0 = 2.0 / prob.sharpness(&par0)?;
    let margins = (eta - edge_star, eta - edge0);
    let tag = if (eta - edge_star).abs() <= CRITICAL_RTOL * edge_star {
        RegimeTag::Critical
    } else if eta > edge_star {
        RegimeTag::Supercritical
    } else if eta > edge0 {
        RegimeTag::Subcritical
    } else {
        RegimeTag::Stable
    };
    Ok(RegimeSpec { tag, eta, margins })
}

/// The flip map `x ↦ (1 − ηλ)x + x³`.
pub fn flip_step(x: f64, eta_lambda: f64) -> f64 {
    (1.0 - eta_lambda) * x + x * x * x
}

/// The clean parabolic system
/// `(x, y) ↦ ((1 − a·y²)x, (1 + b·x² − c·y²)y)` with `0 < a < c`, `b > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParabolicSystem {
    a: f64,
    b: f64,
    c: f64,
}

impl ParabolicSystem {
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self> {
        if !(a > 0.0 && a < c && b > 0.0 && c.is_finite() && b.is_finite()) {
            return Err(Error::Config(format!(
                "parabolic system needs 0 < a < c and b > 0, got a={a}, b={b}, c={c}"
            )));
        }
        Ok(Self { a, b, c })
    }

    pub fn step(&self, x: f64, y: f64) -> (f64, f64) {
        let (x2, y2) = (x * x, y * y);
        (
            (1.0 - self.a * y2) * x,
            (1.0 + self.b * x2 - self.c * y2) * y,
        )
    }

    /// Limit ratio `y/x = √(b/(c − a))` along the attracting direction.
    pub fn kappa(&self) -> f64 {
        (self.b / (self.c - self.a)).sqrt()
    }
}

pub fn parabolic_step(x: f64, y: f64, a: f64, b: f64, c: f64) -> Result<(f64, f64)> {
    Ok(ParabolicSystem::new(a, b, c)?.step(x, y))
}

/// Cubic-order prediction of the next orthogonal coordinate.
pub fn normal_form_perp_predict(
    prob: &FactorisationProblem,
    eta: f64,
    tube: &TubeCoords,
) -> Result<f64> {
    let x = tube.theta_perp;
    let lam = prob.sharpness(&tube.theta_par)?;
    let d3 = prob.dl3_n(&tube.theta_par)?;
    let d4 = prob.dl4_n(&tube.theta_par)?;
    Ok((1.0 - eta * lam) * x - 0.5 * eta * d3 * x * x - eta / 6.0 * d4 * x * x * x)
}

/// Prediction of the next parallel coordinate: one Riemannian gradient step
/// on `λ` with step `η(θ⊥)²/2`, retracted to `M` by projection.
pub fn normal_form_par_predict(
    prob: &FactorisationProblem,
    eta: f64,
    tube: &TubeCoords,
) -> Result<OnManifoldPoint> {
    let step = 0.5 * eta * tube.theta_perp * tube.theta_perp;
    let g = riem_grad_lambda(prob, &tube.theta_par)?;
    project(prob, &(tube.theta_par.coords() - g * step))
}

/// Normal-form orthogonal coordinate `√c·(θ⊥ + k·θ⊥²)` with
/// `k = (η/2)D³ℓ[n⊗3] / ((1 − ηλ)² − (1 − ηλ))`.
///
/// In this coordinate the orthogonal map reads `(1 − ηλ)φ + φ³ + O(φ⁴)`,
/// so period-two amplitudes and decay laws are stated in units of `φ`.
pub fn phi_coordinate(prob: &FactorisationProblem, eta: f64, tube: &TubeCoords) -> Result<f64> {
    phi_from_jets(&prob.normal_jets(&tube.theta_par)?, eta, tube.theta_perp)
}

fn phi_from_jets(jets: &NormalJets, eta: f64, theta_perp: f64) -> Result<f64> {
    let eta_lambda = eta * jets.sharpness;
    if eta_lambda.abs() < 1e-9 || (eta_lambda - 1.0).abs() < 1e-9 {
        return Err(Error::SingularDenominator { eta_lambda });
    }
    let m = 1.0 - eta_lambda;
    let k = 0.5 * eta * jets.dl3 / (m * m - m);
    let c = jets.c_coeff(eta);
    if !(c > 0.0) {
        return Err(Error::Domain(format!(
            "cubic coefficient c = {c} is not positive"
        )));
    }
    let x = theta_perp;
    Ok(c.sqrt() * (x + k * x * x))
}

/// `θ∥₀ + θ⊥₀·n(θ∥₀)`, checked to lie in the positive orthant.
pub fn initial_point(
    prob: &FactorisationProblem,
    theta_par0: &OnManifoldPoint,
    perp0: f64,
) -> Result<Point> {
    let n = prob.normal(theta_par0)?;
    let theta = theta_par0.coords() + n * perp0;
    if let Some((index, &value)) = theta.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::NonPositiveCoordinate { index, value });
    }
    Ok(theta)
}
