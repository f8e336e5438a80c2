//! Projection onto `M`, tube coordinates and the Riemannian calculus of the
//! sharpness along `M`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::problem::{c_star_closed_form, FactorisationProblem, OnManifoldPoint, Point};

/// Threshold on the second-order KKT margin below which a projection is
/// flagged as sitting on (or next to) the focal set. The margin behaves like
/// the square root of the bisection error in `α`, so it cannot be resolved
/// much below `1e-7`.
pub const FOCAL_MARGIN: f64 = 1e-6;

const MAX_BISECTION_ITERS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum KktBranch {
    Plus,
    Minus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub point: OnManifoldPoint,
    /// Lagrange multiplier of the product constraint.
    pub multiplier: f64,
    pub branch: KktBranch,
    /// Smallest eigenvalue factor `1 − αy/θ∥_i²` of the constrained Hessian.
    pub kkt_margin: f64,
    pub near_focal: bool,
}

fn check_positive(prob: &FactorisationProblem, theta: &Point) -> Result<()> {
    prob.check_len(theta)?;
    match theta
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
    {
        Some((index, &value)) => Err(Error::NonPositiveCoordinate { index, value }),
        None => Ok(()),
    }
}

fn branch_point(theta: &Point, alpha: f64, y: f64, branch: KktBranch) -> Point {
    let sign = match branch {
        KktBranch::Plus => 1.0,
        KktBranch::Minus => -1.0,
    };
    theta.map(|t| 0.5 * (t + sign * (t * t - 4.0 * alpha * y).max(0.0).sqrt()))
}

/// Nearest point of `M` to `theta` with diagnostics.
///
/// Solves `θ∥ − θ + αy/θ∥ = 0` coordinate-wise for the root branch chosen
/// from `∏θ` and `y`, then finds the multiplier `α` with `∏θ∥(α) = y` by
/// bisection on the monotone product.
pub fn project_kkt(prob: &FactorisationProblem, theta: &Point) -> Result<Projection> {
    check_positive(prob, theta)?;
    let y = prob.target();
    let p = prob.depth();
    let prod: f64 = theta.iter().product();
    let branch = if prod < y || y >= prod * 2f64.powi(-(p as i32)) {
        KktBranch::Plus
    } else {
        KktBranch::Minus
    };
    let sign = match branch {
        KktBranch::Plus => 1.0,
        KktBranch::Minus => -1.0,
    };
    let phi = |alpha: f64| -> f64 {
        theta
            .iter()
            .map(|t| 0.5 * (t + sign * (t * t - 4.0 * alpha * y).max(0.0).sqrt()))
            .product()
    };
    let disc_edge = theta.iter().fold(f64::INFINITY, |m, t| m.min(t * t)) / (4.0 * y);

    // `increasing` records the monotonicity of φ on the bracket.
    let (mut lo, mut hi, increasing) = match branch {
        KktBranch::Plus if prod < y => {
            let mut lo = -theta.iter().fold(0.0f64, |m, t| m.max(t * t)) / (4.0 * y);
            let mut doublings = 0;
            while phi(lo) < y {
                lo *= 2.0;
                doublings += 1;
                if doublings > 1000 || !lo.is_finite() {
                    return Err(Error::Bracket(format!(
                        "could not reach the target product {y} from {prod} on the plus branch"
                    )));
                }
            }
            (lo, 0.0, false)
        }
        KktBranch::Plus => {
            if phi(disc_edge) > y {
                return Err(Error::Bracket(format!(
                    "plus branch at the discriminant edge still has product {} > {y}",
                    phi(disc_edge)
                )));
            }
            (0.0, disc_edge, false)
        }
        KktBranch::Minus => {
            if phi(disc_edge) < y {
                return Err(Error::Bracket(format!(
                    "minus branch at the discriminant edge has product {} < {y}",
                    phi(disc_edge)
                )));
            }
            (0.0, disc_edge, true)
        }
    };

    for _ in 0..MAX_BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if hi - lo < 1e-15 * (1.0 + mid.abs()) || mid <= lo || mid >= hi {
            break;
        }
        let above = phi(mid) > y;
        if above == increasing {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let alpha = 0.5 * (lo + hi);
    let mut point = branch_point(theta, alpha, y, branch);
    let kkt_margin = point
        .iter()
        .fold(f64::INFINITY, |m, t| m.min(1.0 - alpha * y / (t * t)));
    let near_focal = kkt_margin < FOCAL_MARGIN;
    if near_focal || prob.manifold_deviation(&point) > 1e-13 {
        // At a vanishing discriminant the root is only square-root accurate
        // in α; rescale onto the constraint instead.
        let prod: f64 = point.iter().product();
        point *= (y / prod).powf(1.0 / p as f64);
    }
    let deviation = prob.manifold_deviation(&point);
    if !(deviation <= 1e-12) || point.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::Bracket(format!(
            "bisection ended with relative product deviation {deviation:.3e}"
        )));
    }
    Ok(Projection {
        point: OnManifoldPoint::new_unchecked(point),
        multiplier: alpha,
        branch,
        kkt_margin,
        near_focal,
    })
}

/// Nearest point of `M` to a point of the positive orthant.
pub fn project(prob: &FactorisationProblem, theta: &Point) -> Result<OnManifoldPoint> {
    project_kkt(prob, theta).map(|pr| pr.point)
}

/// A point of the tubular neighbourhood as `(θ∥, θ⊥)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TubeCoords {
    pub theta_par: OnManifoldPoint,
    pub theta_perp: f64,
}

impl TubeCoords {
    /// `θ∥ + θ⊥·n(θ∥)`.
    pub fn reconstruct(&self, prob: &FactorisationProblem) -> Result<Point> {
        let n = prob.normal(&self.theta_par)?;
        Ok(self.theta_par.coords() + n * self.theta_perp)
    }
}

pub fn tube_coords(prob: &FactorisationProblem, theta: &Point) -> Result<TubeCoords> {
    let theta_par = project(prob, theta)?;
    let n = prob.normal(&theta_par)?;
    let theta_perp = (theta - theta_par.coords()).dot(&n);
    Ok(TubeCoords {
        theta_par,
        theta_perp,
    })
}

fn tangent_projector(n: &Point) -> DMatrix<f64> {
    DMatrix::identity(n.len(), n.len()) - n * n.transpose()
}

fn symmetrise(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Riemannian gradient `P(2∇²f∇f)` of `λ = ‖∇f‖²` on `M`.
pub fn riem_grad_lambda(prob: &FactorisationProblem, theta_par: &OnManifoldPoint) -> Result<Point> {
    let n = prob.normal(theta_par)?;
    let x = theta_par.coords();
    let euclid = prob.hessian_f(x)? * prob.grad_f(x)? * 2.0;
    let normal_part = n.dot(&euclid);
    Ok(euclid - n * normal_part)
}

/// Riemannian Hessian of `λ`, `2P(∇³f[∇f] + (∇²f)² − ⟨n,∇²f n⟩∇²f)P`, as a
/// `p×p` matrix annihilating the normal.
pub fn riem_hess_lambda(
    prob: &FactorisationProblem,
    theta_par: &OnManifoldPoint,
) -> Result<DMatrix<f64>> {
    let n = prob.normal(theta_par)?;
    let x = theta_par.coords();
    let g = prob.grad_f(x)?;
    let h = prob.hessian_f(x)?;
    let curvature = n.dot(&(&h * &n));
    let inner = prob.third_f_along(x, &g)? + &h * &h - &h * curvature;
    let proj = tangent_projector(&n);
    Ok(symmetrise(&proj * inner * &proj * 2.0))
}

/// The same Hessian from the closed form specific to the product map, with
/// `s₁ = Σθ⁻²`, `s₂ = Σθ⁻⁴`.
pub fn riem_hess_lambda_closed_form(
    prob: &FactorisationProblem,
    theta_par: &OnManifoldPoint,
) -> Result<DMatrix<f64>> {
    let n = prob.normal(theta_par)?;
    let y = prob.target();
    let inv = theta_par.coords().map(|t| 1.0 / t);
    let v1 = inv.map(|v| v * v);
    let v2 = inv.map(|v| v.powi(4));
    let s1 = v1.sum();
    let s2 = v2.sum();
    let diag = if prob.depth() > 2 {
        v2 * 3.0 - v1 * (s2 / s1)
    } else {
        v2 + v1 * (s1 - s2 / s1)
    };
    let proj = tangent_projector(&n);
    Ok(symmetrise(
        &proj * DMatrix::from_diagonal(&diag) * &proj * (2.0 * y * y),
    ))
}

/// Orthonormal basis of the orthogonal complement of the unit vector `n`,
/// as the columns of a `p×(p−1)` matrix.
pub fn tangent_basis(n: &Point) -> DMatrix<f64> {
    let p = n.len();
    let mut basis: Vec<Point> = Vec::with_capacity(p - 1);
    for i in 0..p {
        if basis.len() == p - 1 {
            break;
        }
        let mut e = Point::zeros(p);
        e[i] = 1.0;
        // Two Gram-Schmidt passes for stability.
        for _ in 0..2 {
            let c = n.dot(&e);
            e.axpy(-c, n, 1.0);
            for b in &basis {
                let c = b.dot(&e);
                e.axpy(-c, b, 1.0);
            }
        }
        let norm = e.norm();
        if norm > 1e-6 {
            basis.push(e / norm);
        }
    }
    DMatrix::from_columns(&basis)
}

/// Eigenvalues of `h` restricted to the tangent space `n⊥`, ascending.
pub fn tangent_eigenvalues(h: &DMatrix<f64>, n: &Point) -> Vec<f64> {
    let b = tangent_basis(n);
    let restricted = symmetrise(b.transpose() * h * &b);
    let mut ev: Vec<f64> = SymmetricEigen::new(restricted)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeometryConstants {
    /// Minimal sharpness `p·y^{2−2/p}`.
    pub lambda_star: f64,
    /// Tangent eigenvalue `4y^{2−4/p}` of the sharpness Hessian at `θ*`.
    pub nu: f64,
    /// Geodesic strong-convexity constant of `λ` on the ball.
    pub mu: f64,
    /// Radius of the convexity ball; `None` when `λ` is convex on all of `M`.
    pub ball_radius: Option<f64>,
    /// The sharper closed-form radius `y^{1/p}(4π+1−√(16π+1))/(16π−8)`.
    pub exact_radius: Option<f64>,
    /// `c(2/λ*, θ*)`.
    pub c_star: f64,
}

impl GeometryConstants {
    /// `ν/(c*·λ*)`, the parabolic coefficient ratio of the critical regime.
    pub fn nu_ratio(&self) -> f64 {
        self.nu / (self.c_star * self.lambda_star)
    }

    /// Whether `theta_par` lies in the ball where `mu` is valid.
    pub fn in_ball(&self, dist_par: f64) -> bool {
        self.ball_radius.is_none_or(|r| dist_par <= r)
    }
}

pub fn geometry_constants(prob: &FactorisationProblem) -> GeometryConstants {
    let p = prob.depth();
    let y = prob.target();
    let pf = p as f64;
    let nu = 4.0 * y.powf(2.0 - 4.0 / pf);
    let scale = prob.scale();
    let pi = std::f64::consts::PI;
    let (mu, ball_radius, exact_radius) = if p == 2 {
        (2.0, None, None)
    } else {
        let exact = scale * (4.0 * pi + 1.0 - (16.0 * pi + 1.0).sqrt()) / (16.0 * pi - 8.0);
        (
            1.33 * y.powf(2.0 - 4.0 / pf),
            Some(0.15 * scale),
            Some(exact),
        )
    };
    GeometryConstants {
        lambda_star: prob.lambda_star(),
        nu,
        mu,
        ball_radius,
        exact_radius,
        c_star: c_star_closed_form(p, y),
    }
}

/// Euclidean distance to the balanced point, the proxy for geodesic distance.
pub fn dist_to_balanced(prob: &FactorisationProblem, theta_par: &OnManifoldPoint) -> f64 {
    (theta_par.coords() - prob.balanced_point().coords()).norm()
}

/// Unit tangent direction at `θ*` drawn uniformly from the sphere.
pub fn random_tangent_direction(prob: &FactorisationProblem, rng: &mut ChaCha8Rng) -> Point {
    let p = prob.depth();
    loop {
        let mut g = Point::from_fn(p, |_, _| StandardNormal.sample(rng));
        let mean = g.mean();
        g.add_scalar_mut(-mean);
        let norm = g.norm();
        if norm > 1e-8 {
            return g / norm;
        }
    }
}

fn check_radius(prob: &FactorisationProblem, radius: f64) -> Result<()> {
    if !(radius >= 0.0 && radius < prob.scale()) {
        return Err(Error::Config(format!(
            "radius must lie in [0, {}), got {radius}",
            prob.scale()
        )));
    }
    Ok(())
}

/// `count` points of `M` within Euclidean distance `radius` of `θ*`, obtained
/// by projecting random tangent perturbations of `θ*`. Deterministic in `seed`.
pub fn sample_near(
    prob: &FactorisationProblem,
    radius: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<OnManifoldPoint>> {
    check_radius(prob, radius)?;
    let centre = prob.balanced_point();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new(0.0f64, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let dim = (prob.depth() - 1) as f64;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        if radius == 0.0 {
            out.push(centre.clone());
            continue;
        }
        let dir = random_tangent_direction(prob, &mut rng);
        let mut r = radius * unit.sample(&mut rng).powf(1.0 / dim);
        loop {
            let q = project(prob, &(centre.coords() + &dir * r))?;
            if dist_to_balanced(prob, &q) <= radius {
                out.push(q);
                break;
            }
            r *= 0.95;
        }
    }
    Ok(out)
}

/// The point `project(θ* + s·dir)` whose distance to `θ*` equals `distance`,
/// found by bisection on `s`.
pub fn point_at_distance(
    prob: &FactorisationProblem,
    dir: &Point,
    distance: f64,
) -> Result<OnManifoldPoint> {
    check_radius(prob, distance)?;
    prob.check_len(dir)?;
    let centre = prob.balanced_point();
    if distance == 0.0 {
        return Ok(centre);
    }
    let at = |s: f64| -> Result<OnManifoldPoint> { project(prob, &(centre.coords() + dir * s)) };
    let (mut lo, mut hi) = (0.0, distance / dir.norm());
    while dist_to_balanced(prob, &at(hi)?) < distance {
        lo = hi;
        hi *= 1.5;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if dist_to_balanced(prob, &at(mid)?) < distance {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(0.5 * (lo + hi))
}
