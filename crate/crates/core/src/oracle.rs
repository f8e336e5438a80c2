//! Central finite differences of `f` and `ℓ`, used to cross-check the
//! closed-form derivatives. Not used by the dynamics.
//!
//! A directional derivative of order `k` is taken with the nested central
//! stencil over all `2^k` sign patterns. For a repeated direction at order 4
//! this collapses to the standard 5-point stencil. Orders 3 and 4 add one
//! Richardson extrapolation step so that larger steps (less round-off) keep
//! the truncation error small.

use crate::error::{Error, Result};
use crate::problem::{FactorisationProblem, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Product,
    Loss,
}

/// Base step for each derivative order, before scaling by `max(1, ‖θ‖)`.
const BASE_STEP: [f64; 4] = [1e-4, 1e-4, 2e-3, 5e-3];

fn eval(prob: &FactorisationProblem, objective: Objective, theta: &Point) -> Result<f64> {
    match objective {
        Objective::Product => prob.f(theta),
        Objective::Loss => prob.loss(theta),
    }
}

fn nested_stencil(
    prob: &FactorisationProblem,
    objective: Objective,
    theta: &Point,
    dirs: &[Point],
    h: f64,
) -> Result<f64> {
    let k = dirs.len();
    let mut total = 0.0;
    for mask in 0u32..(1 << k) {
        let mut x = theta.clone();
        let mut sign = 1.0;
        for (slot, d) in dirs.iter().enumerate() {
            let s = if mask & (1 << slot) != 0 { -1.0 } else { 1.0 };
            sign *= s;
            x.axpy(s * h, d, 1.0);
        }
        total += sign * eval(prob, objective, &x)?;
    }
    Ok(total / (2.0 * h).powi(k as i32))
}

/// Finite-difference approximation of `D^k g(θ)[d₁,…,d_k]` with `k = dirs.len()`.
pub fn directional(
    prob: &FactorisationProblem,
    objective: Objective,
    theta: &Point,
    dirs: &[Point],
) -> Result<f64> {
    let k = dirs.len();
    if !(1..=4).contains(&k) {
        return Err(Error::UnsupportedOrder(k));
    }
    prob.check_len(theta)?;
    for d in dirs {
        prob.check_len(d)?;
    }
    let h = BASE_STEP[k - 1] * theta.norm().max(1.0);
    let coarse = nested_stencil(prob, objective, theta, dirs, h)?;
    if k <= 2 {
        return Ok(coarse);
    }
    let fine = nested_stencil(prob, objective, theta, dirs, 0.5 * h)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

/// Coordinate-wise central-difference gradient.
pub fn gradient(prob: &FactorisationProblem, objective: Objective, theta: &Point) -> Result<Point> {
    prob.check_len(theta)?;
    let p = prob.depth();
    let mut out = Point::zeros(p);
    for i in 0..p {
        let mut e = Point::zeros(p);
        e[i] = 1.0;
        out[i] = directional(prob, objective, theta, &[e])?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn recovers_polynomial_derivatives() {
        // f(θ) = θ₁θ₂θ₃ has D³f[e₁,e₂,e₃] = 1 exactly.
        let pr = FactorisationProblem::new(3, 1.0).unwrap();
        let theta = Point::from_column_slice(&[1.3, 0.7, 2.1]);
        let e = |i: usize| {
            let mut v = Point::zeros(3);
            v[i] = 1.0;
            v
        };
        let d3 = directional(&pr, Objective::Product, &theta, &[e(0), e(1), e(2)]).unwrap();
        assert_relative_eq!(d3, 1.0, max_relative = 1e-8);
        let g = gradient(&pr, Objective::Product, &theta).unwrap();
        assert_relative_eq!(g, pr.grad_f(&theta).unwrap(), max_relative = 1e-8);
    }

    #[test]
    fn rejects_orders_outside_range() {
        let pr = FactorisationProblem::new(2, 1.0).unwrap();
        let theta = Point::from_element(2, 1.0);
        assert_eq!(
            directional(&pr, Objective::Loss, &theta, &[]),
            Err(Error::UnsupportedOrder(0))
        );
        let d = vec![theta.clone(); 5];
        assert_eq!(
            directional(&pr, Objective::Loss, &theta, &d),
            Err(Error::UnsupportedOrder(5))
        );
    }
}
