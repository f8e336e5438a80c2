//! Quick numerical self-checks exposed through `--check`.

use std::fmt::Write as _;

use eos_core::analysis::{fit_rate, RateModel};
use eos_core::dynamics::normal_form_par_predict;
use eos_core::dynamics::{gd_step, normal_form_perp_predict};
use eos_core::manifold::{
    geometry_constants, point_at_distance, project, random_tangent_direction, tube_coords,
    TubeCoords,
};
use eos_core::oracle::{self, Objective};
use eos_core::problem::c_star_closed_form;
use eos_core::{FactorisationProblem, Point};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::LabResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CheckKind {
    Constants,
    Derivatives,
    Normalform,
    All,
}

/// Printable outcome of one check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantsRow {
    pub depth: usize,
    pub target: f64,
    pub lambda_star: f64,
    pub nu: f64,
    pub c_numeric: f64,
    pub c_closed: f64,
    pub ratio: f64,
}

impl ConstantsRow {
    pub fn passes(&self) -> bool {
        (self.c_numeric - self.c_closed).abs() <= 1e-10 * self.c_closed.abs().max(1.0)
            && self.ratio <= 0.5 + 1e-12
    }
}

pub fn constants_table(depths: &[usize], targets: &[f64]) -> LabResult<Vec<ConstantsRow>> {
    let mut rows = Vec::new();
    for &depth in depths {
        for &target in targets {
            let prob = FactorisationProblem::new(depth, target)?;
            let k = geometry_constants(&prob);
            let c_numeric = prob.c_coeff(2.0 / k.lambda_star, &prob.balanced_point())?;
            rows.push(ConstantsRow {
                depth,
                target,
                lambda_star: k.lambda_star,
                nu: k.nu,
                c_numeric,
                c_closed: c_star_closed_form(depth, target),
                ratio: k.nu / (c_numeric * k.lambda_star),
            });
        }
    }
    Ok(rows)
}

pub fn check_constants(depths: &[usize], targets: &[f64]) -> LabResult<CheckOutcome> {
    let rows = constants_table(depths, targets)?;
    let mut text = String::from(
        "    p        y         lambda*              nu                c*      nu/(c* lambda*)\n",
    );
    for r in &rows {
        let _ = writeln!(
            text,
            "{:5} {:8.3} {:15.8e} {:15.8e} {:17.10e} {:18.12}  {}",
            r.depth,
            r.target,
            r.lambda_star,
            r.nu,
            r.c_numeric,
            r.ratio,
            if r.passes() { "ok" } else { "FAIL" }
        );
    }
    Ok(CheckOutcome {
        name: "constants",
        passed: rows.iter().all(ConstantsRow::passes),
        text,
    })
}

/// Largest relative error of each closed-form derivative against finite
/// differences: gradient, Hessian bilinear form, `D³ℓ[n⊗3]`, `D⁴ℓ[n⊗4]`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DerivativeErrors {
    pub gradient: f64,
    pub hessian: f64,
    pub third_normal: f64,
    pub fourth_normal: f64,
}

impl DerivativeErrors {
    pub fn passes(&self) -> bool {
        self.gradient < 1e-5
            && self.hessian < 1e-5
            && self.third_normal < 1e-5
            && self.fourth_normal < 1e-4
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

/// A random point with coordinates `y^{1/p}·exp(u)`, `u` uniform in
/// `[−0.3, 0.3]`.
pub fn random_positive_point(prob: &FactorisationProblem, rng: &mut ChaCha8Rng) -> Point {
    Point::from_fn(prob.depth(), |_, _| {
        prob.scale() * rng.random_range(-0.3f64..0.3).exp()
    })
}

pub fn derivative_errors(
    prob: &FactorisationProblem,
    points: usize,
    seed: u64,
) -> LabResult<DerivativeErrors> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = DerivativeErrors::default();
    let p = prob.depth();
    for _ in 0..points {
        let theta = random_positive_point(prob, &mut rng);
        let u = Point::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
        let v = Point::from_fn(p, |_, _| rng.random_range(-1.0..1.0));

        let g = prob.grad_f(&theta)?;
        let g_fd = oracle::gradient(prob, Objective::Product, &theta)?;
        worst.gradient = worst.gradient.max((g - &g_fd).norm() / g_fd.norm());

        let huv = prob.d2f(&theta, &u, &v)?;
        let huv_fd =
            oracle::directional(prob, Objective::Product, &theta, &[u.clone(), v.clone()])?;
        worst.hessian = worst.hessian.max(rel_err(huv, huv_fd));

        let par = project(prob, &theta)?;
        let n = prob.normal(&par)?;
        let x = par.coords();
        let d3_fd =
            oracle::directional(prob, Objective::Loss, x, &[n.clone(), n.clone(), n.clone()])?;
        worst.third_normal = worst.third_normal.max(rel_err(prob.dl3_n(&par)?, d3_fd));
        let d4_fd = oracle::directional(
            prob,
            Objective::Loss,
            x,
            &[n.clone(), n.clone(), n.clone(), n.clone()],
        )?;
        worst.fourth_normal = worst.fourth_normal.max(rel_err(prob.dl4_n(&par)?, d4_fd));
    }
    Ok(worst)
}

pub fn check_derivatives(
    depths: &[usize],
    target: f64,
    points: usize,
    seed: u64,
) -> LabResult<CheckOutcome> {
    let mut text = String::from(
        "    p    gradient     hessian    D3l[n^3]    D4l[n^4]   (max relative error)\n",
    );
    let mut passed = true;
    for &depth in depths {
        let prob = FactorisationProblem::new(depth, target)?;
        let e = derivative_errors(&prob, points, seed)?;
        passed &= e.passes();
        let _ = writeln!(
            text,
            "{:5} {:11.3e} {:11.3e} {:11.3e} {:11.3e}  {}",
            depth,
            e.gradient,
            e.hessian,
            e.third_normal,
            e.fourth_normal,
            if e.passes() { "ok" } else { "FAIL" }
        );
    }
    Ok(CheckOutcome {
        name: "derivatives",
        passed,
        text,
    })
}

/// Orthogonal offsets used for the residual scaling study.
pub const RESIDUAL_OFFSETS: [f64; 4] = [1e-2, 5e-3, 2.5e-3, 1.25e-3];

/// Residuals of the one-step normal-form predictions at each offset.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStudy {
    pub offsets: Vec<f64>,
    pub perp: Vec<f64>,
    pub par: Vec<f64>,
    pub perp_slope: f64,
    pub par_slope: f64,
}

impl ResidualStudy {
    pub fn passes(&self) -> bool {
        (self.perp_slope - 4.0).abs() <= 0.5 && (self.par_slope - 3.0).abs() <= 0.5
    }
}

/// One GD step from `θ∥ + θ⊥n` compared with the normal-form predictions,
/// at `θ∥` a distance `0.05·y^{1/p}` from the balanced point and
/// `η = 2/λ*`.
pub fn residual_study(prob: &FactorisationProblem, seed: u64) -> LabResult<ResidualStudy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = random_tangent_direction(prob, &mut rng);
    let par = point_at_distance(prob, &dir, 0.05 * prob.scale())?;
    let eta = 2.0 / prob.lambda_star();
    let mut perp = Vec::new();
    let mut par_res = Vec::new();
    for &x in &RESIDUAL_OFFSETS {
        let tube = TubeCoords {
            theta_par: par.clone(),
            theta_perp: x,
        };
        let next = tube_coords(prob, &gd_step(prob, eta, &tube.reconstruct(prob)?)?)?;
        perp.push((next.theta_perp - normal_form_perp_predict(prob, eta, &tube)?).abs());
        let predicted = normal_form_par_predict(prob, eta, &tube)?;
        par_res.push((next.theta_par.coords() - predicted.coords()).norm());
    }
    let slope = |res: &[f64]| -> LabResult<f64> {
        let pts: Vec<(f64, f64)> = RESIDUAL_OFFSETS
            .iter()
            .copied()
            .zip(res.iter().copied())
            .collect();
        Ok(fit_rate(&pts, RateModel::PowerLaw, (0.0, 1.0))?.parameter)
    };
    Ok(ResidualStudy {
        offsets: RESIDUAL_OFFSETS.to_vec(),
        perp_slope: slope(&perp)?,
        par_slope: slope(&par_res)?,
        perp,
        par: par_res,
    })
}

pub fn check_normal_form(depth: usize, target: f64, seed: u64) -> LabResult<CheckOutcome> {
    let prob = FactorisationProblem::new(depth, target)?;
    let s = residual_study(&prob, seed)?;
    let mut text = String::from("   theta_perp   perp residual    par residual\n");
    for i in 0..s.offsets.len() {
        let _ = writeln!(
            text,
            "{:13.4e} {:15.6e} {:15.6e}",
            s.offsets[i], s.perp[i], s.par[i]
        );
    }
    let _ = writeln!(
        text,
        "log-log slopes: perp {:.3} (expected 4), par {:.3} (expected 3)  {}",
        s.perp_slope,
        s.par_slope,
        if s.passes() { "ok" } else { "FAIL" }
    );
    Ok(CheckOutcome {
        name: "normalform",
        passed: s.passes(),
        text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_two_ratio_is_exactly_one_half() {
        let rows = constants_table(&[2], &[0.5, 1.0, 2.0]).unwrap();
        for r in rows {
            assert!((r.ratio - 0.5).abs() < 1e-12, "{r:?}");
            assert!(r.passes());
        }
    }

    #[test]
    fn derivative_and_residual_checks_pass_at_depth_three() {
        let prob = FactorisationProblem::new(3, 2.0).unwrap();
        assert!(derivative_errors(&prob, 5, 1).unwrap().passes());
        assert!(residual_study(&prob, 1).unwrap().passes());
    }
}
