//! The scalar factorisation instance `f(θ) = θ₁⋯θ_p`, `ℓ = ½(f − y)²`.
//!
//! Off the solution manifold every derivative of `f` is assembled from
//! distinct-index products (the general product rule). The on-manifold
//! shortcuts such as `∂_l f = y/θ_l` are only used as test assertions.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// A parameter vector in `ℝ^p`.
pub type Point = DVector<f64>;

/// Relative tolerance on `|∏θ − y| / y` accepted for on-manifold points.
pub const ON_MANIFOLD_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FactorisationProblem {
    depth: usize,
    target: f64,
}

/// A point of the positive component of `f⁻¹{y}`.
///
/// Construction validates positivity and the product constraint, so every
/// holder can rely on both.
#[derive(Debug, Clone, PartialEq)]
pub struct OnManifoldPoint(Point);

impl OnManifoldPoint {
    pub(crate) fn new_unchecked(coords: Point) -> Self {
        Self(coords)
    }

    pub fn coords(&self) -> &Point {
        &self.0
    }

    pub fn into_inner(self) -> Point {
        self.0
    }
}

impl AsRef<Point> for OnManifoldPoint {
    fn as_ref(&self) -> &Point {
        &self.0
    }
}

/// Product of the entries of `theta` whose indices are not in `skip`.
fn product_excluding(theta: &Point, skip: &[usize]) -> f64 {
    theta
        .iter()
        .enumerate()
        .filter(|(i, _)| !skip.contains(i))
        .map(|(_, v)| *v)
        .product()
}

impl FactorisationProblem {
    pub fn new(depth: usize, target: f64) -> Result<Self> {
        if depth < 2 {
            return Err(Error::InvalidProblem(format!(
                "depth must be at least 2, got {depth}"
            )));
        }
        if !(target.is_finite() && target > 0.0) {
            return Err(Error::InvalidProblem(format!(
                "target must be positive and finite, got {target}"
            )));
        }
        Ok(Self { depth, target })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn target(&self) -> f64 {
        self.target
    }

    /// `y^{1/p}`, the common coordinate of the balanced point.
    pub fn scale(&self) -> f64 {
        self.target.powf(1.0 / self.depth as f64)
    }

    /// The balanced point `y^{1/p}·1_p`, the sharpness minimiser on `M`.
    pub fn balanced_point(&self) -> OnManifoldPoint {
        OnManifoldPoint(Point::from_element(self.depth, self.scale()))
    }

    /// Minimal sharpness `λ* = p·y^{2−2/p}`.
    pub fn lambda_star(&self) -> f64 {
        let p = self.depth as f64;
        p * self.target.powf(2.0 - 2.0 / p)
    }

    pub fn check_len(&self, theta: &Point) -> Result<()> {
        if theta.len() != self.depth {
            return Err(Error::LengthMismatch {
                expected: self.depth,
                got: theta.len(),
            });
        }
        Ok(())
    }

    /// Relative deviation `|∏θ − y| / y`.
    pub fn manifold_deviation(&self, theta: &Point) -> f64 {
        let prod: f64 = theta.iter().product();
        (prod - self.target).abs() / self.target
    }

    /// Validates `coords` as a point of the positive component of `M`.
    pub fn on_manifold(&self, coords: Point) -> Result<OnManifoldPoint> {
        self.check_len(&coords)?;
        if let Some((index, &value)) = coords.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::NonPositiveCoordinate { index, value });
        }
        let deviation = self.manifold_deviation(&coords);
        if !(deviation <= ON_MANIFOLD_RTOL) {
            return Err(Error::OffManifold { deviation });
        }
        Ok(OnManifoldPoint(coords))
    }

    fn revalidate(&self, theta: &OnManifoldPoint) -> Result<()> {
        self.check_len(&theta.0)?;
        let deviation = self.manifold_deviation(&theta.0);
        if !(deviation <= ON_MANIFOLD_RTOL) {
            return Err(Error::OffManifold { deviation });
        }
        Ok(())
    }

    pub fn f(&self, theta: &Point) -> Result<f64> {
        self.check_len(theta)?;
        Ok(theta.iter().product())
    }

    /// `∂_l f = ∏_{i≠l} θ_i`.
    pub fn grad_f(&self, theta: &Point) -> Result<Point> {
        self.check_len(theta)?;
        Ok(Point::from_fn(self.depth, |l, _| {
            product_excluding(theta, &[l])
        }))
    }

    /// `∂_i∂_j f = ∏_{k∉{i,j}} θ_k` off the diagonal, zero on it.
    pub fn hessian_f(&self, theta: &Point) -> Result<DMatrix<f64>> {
        self.check_len(theta)?;
        let p = self.depth;
        Ok(DMatrix::from_fn(p, p, |i, j| {
            if i == j {
                0.0
            } else {
                product_excluding(theta, &[i, j])
            }
        }))
    }

    /// The matrix `∇³f[z]`, i.e. `Σ_k z_k ∂_i∂_j∂_k f`.
    pub fn third_f_along(&self, theta: &Point, z: &Point) -> Result<DMatrix<f64>> {
        self.check_len(theta)?;
        self.check_len(z)?;
        let p = self.depth;
        let mut out = DMatrix::zeros(p, p);
        for i in 0..p {
            for j in (i + 1)..p {
                let mut acc = 0.0;
                for k in 0..p {
                    if k != i && k != j {
                        acc += z[k] * product_excluding(theta, &[i, j, k]);
                    }
                }
                out[(i, j)] = acc;
                out[(j, i)] = acc;
            }
        }
        Ok(out)
    }

    /// `D²f[u,v]` at an arbitrary point.
    pub fn d2f(&self, theta: &Point, u: &Point, v: &Point) -> Result<f64> {
        self.check_len(u)?;
        self.check_len(v)?;
        Ok(u.dot(&(self.hessian_f(theta)? * v)))
    }

    /// `D³f[u,v,w]` at an arbitrary point.
    pub fn d3f(&self, theta: &Point, u: &Point, v: &Point, w: &Point) -> Result<f64> {
        self.check_len(u)?;
        self.check_len(v)?;
        Ok(u.dot(&(self.third_f_along(theta, w)? * v)))
    }

    /// Contracts the order-2 or order-3 derivative tensor of `f` at an
    /// on-manifold point. `dirs` holds one direction per slot, or a single
    /// direction used in every slot.
    pub fn deriv_tensor_contract(
        &self,
        theta: &OnManifoldPoint,
        order: usize,
        dirs: &[Point],
    ) -> Result<f64> {
        if !(order == 2 || order == 3) {
            return Err(Error::UnsupportedOrder(order));
        }
        let pick = |slot: usize| -> Result<&Point> {
            match dirs.len() {
                1 => Ok(&dirs[0]),
                n if n == order => Ok(&dirs[slot]),
                n => Err(Error::Config(format!(
                    "expected 1 or {order} directions, got {n}"
                ))),
            }
        };
        let x = theta.coords();
        match order {
            2 => self.d2f(x, pick(0)?, pick(1)?),
            _ => self.d3f(x, pick(0)?, pick(1)?, pick(2)?),
        }
    }

    pub fn loss(&self, theta: &Point) -> Result<f64> {
        let r = self.f(theta)? - self.target;
        Ok(0.5 * r * r)
    }

    pub fn grad_loss(&self, theta: &Point) -> Result<Point> {
        let r = self.f(theta)? - self.target;
        Ok(self.grad_f(theta)? * r)
    }

    /// `∇²ℓ = ∇f∇fᵀ + (f − y)∇²f`.
    pub fn hessian_loss(&self, theta: &Point) -> Result<DMatrix<f64>> {
        let g = self.grad_f(theta)?;
        let r = self.f(theta)? - self.target;
        Ok(&g * g.transpose() + self.hessian_f(theta)? * r)
    }

    /// Sharpness `λ = ‖∇f‖²` at an on-manifold point.
    pub fn sharpness(&self, theta_par: &OnManifoldPoint) -> Result<f64> {
        self.revalidate(theta_par)?;
        Ok(self.grad_f(theta_par.coords())?.norm_squared())
    }

    /// Unit normal `∇f/‖∇f‖` to `M`.
    pub fn normal(&self, theta_par: &OnManifoldPoint) -> Result<Point> {
        self.revalidate(theta_par)?;
        unit_normal(&self.grad_f(theta_par.coords())?)
    }

    /// `D³ℓ[n,n,n] = 3·D²f[n,n]·⟨∇f,n⟩` on `M`.
    pub fn dl3_n(&self, theta_par: &OnManifoldPoint) -> Result<f64> {
        let (g, n) = self.grad_and_normal(theta_par)?;
        let x = theta_par.coords();
        Ok(3.0 * self.d2f(x, &n, &n)? * g.dot(&n))
    }

    /// `D⁴ℓ[n,n,n,n] = 4·D³f[n,n,n]·⟨∇f,n⟩ + 3·D²f[n,n]²` on `M`.
    pub fn dl4_n(&self, theta_par: &OnManifoldPoint) -> Result<f64> {
        let (g, n) = self.grad_and_normal(theta_par)?;
        let x = theta_par.coords();
        let d2 = self.d2f(x, &n, &n)?;
        Ok(4.0 * self.d3f(x, &n, &n, &n)? * g.dot(&n) + 3.0 * d2 * d2)
    }

    /// Sharpness, `D³ℓ[n⊗3]` and `D⁴ℓ[n⊗4]` in one pass.
    pub fn normal_jets(&self, theta_par: &OnManifoldPoint) -> Result<NormalJets> {
        let (g, n) = self.grad_and_normal(theta_par)?;
        let x = theta_par.coords();
        let gn = g.dot(&n);
        let d2 = self.d2f(x, &n, &n)?;
        let d3 = self.d3f(x, &n, &n, &n)?;
        Ok(NormalJets {
            sharpness: g.norm_squared(),
            dl3: 3.0 * d2 * gn,
            dl4: 4.0 * d3 * gn + 3.0 * d2 * d2,
        })
    }

    /// The cubic normal-form coefficient
    /// `c(η,θ∥) = ((η/2)·D³ℓ[n⊗3])² − (η/6)·D⁴ℓ[n⊗4]`.
    pub fn c_coeff(&self, eta: f64, theta_par: &OnManifoldPoint) -> Result<f64> {
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {eta}"
            )));
        }
        Ok(self.normal_jets(theta_par)?.c_coeff(eta))
    }

    fn grad_and_normal(&self, theta_par: &OnManifoldPoint) -> Result<(Point, Point)> {
        self.revalidate(theta_par)?;
        let g = self.grad_f(theta_par.coords())?;
        let n = unit_normal(&g)?;
        Ok((g, n))
    }
}

/// Normal derivatives of `ℓ` along `M` at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalJets {
    pub sharpness: f64,
    pub dl3: f64,
    pub dl4: f64,
}

impl NormalJets {
    /// `c(η,θ∥)` from the stored jets.
    pub fn c_coeff(&self, eta: f64) -> f64 {
        let a = 0.5 * eta * self.dl3;
        a * a - eta / 6.0 * self.dl4
    }
}

fn unit_normal(g: &Point) -> Result<Point> {
    let norm = g.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Degenerate(format!("gradient norm is {norm}")));
    }
    Ok(g / norm)
}

/// Binomial coefficient, used by the closed-form constants.
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Closed form of `c(2/λ*, θ*) = (32/p³·C(p,2)² − 8/p²·C(p,3))·y^{−2/p}`.
pub fn c_star_closed_form(depth: usize, target: f64) -> f64 {
    let p = depth as f64;
    let b2 = binomial(depth, 2);
    let b3 = binomial(depth, 3);
    (32.0 / p.powi(3) * b2 * b2 - 8.0 / (p * p) * b3) * target.powf(-2.0 / p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Point {
        Point::from_column_slice(xs)
    }

    fn prob(p: usize, y: f64) -> FactorisationProblem {
        FactorisationProblem::new(p, y).unwrap()
    }

    /// Brute-force tensor of `f` by summing over every index tuple with
    /// distinct entries. Independent of the pairwise code paths above.
    fn brute_contract(theta: &Point, dirs: &[&Point]) -> f64 {
        let p = theta.len();
        let k = dirs.len();
        let mut idx = vec![0usize; k];
        let mut total = 0.0;
        loop {
            let distinct = (0..k).all(|a| (a + 1..k).all(|b| idx[a] != idx[b]));
            if distinct {
                let w: f64 = (0..k).map(|a| dirs[a][idx[a]]).product();
                total += w * product_excluding(theta, &idx);
            }
            let mut a = 0;
            loop {
                if a == k {
                    return total;
                }
                idx[a] += 1;
                if idx[a] < p {
                    break;
                }
                idx[a] = 0;
                a += 1;
            }
        }
    }

    #[test]
    fn rejects_bad_instances() {
        assert!(matches!(
            FactorisationProblem::new(1, 1.0),
            Err(Error::InvalidProblem(_))
        ));
        assert!(FactorisationProblem::new(3, 0.0).is_err());
        assert!(FactorisationProblem::new(3, -1.0).is_err());
        assert!(FactorisationProblem::new(3, f64::NAN).is_err());
    }

    #[test]
    fn product_examples() {
        assert_eq!(prob(3, 1.0).f(&v(&[1.0, 2.0, 3.0])).unwrap(), 6.0);
        assert_eq!(prob(2, 1.0).f(&v(&[2.0, 0.5])).unwrap(), 1.0);
        assert_eq!(prob(5, 1.0).f(&Point::from_element(5, 1.0)).unwrap(), 1.0);
        assert_eq!(
            prob(3, 1.0).f(&v(&[1.0, 2.0])),
            Err(Error::LengthMismatch {
                expected: 3,
                got: 2
            })
        );
    }

    #[test]
    fn gradient_examples() {
        assert_eq!(
            prob(3, 1.0).grad_f(&v(&[1.0, 2.0, 3.0])).unwrap(),
            v(&[6.0, 3.0, 2.0])
        );
        assert_eq!(
            prob(2, 1.0).grad_f(&v(&[2.0, 0.5])).unwrap(),
            v(&[0.5, 2.0])
        );
        assert_eq!(
            prob(2, 1.0).grad_f(&v(&[3.0, 0.0])).unwrap(),
            v(&[0.0, 3.0])
        );
    }

    #[test]
    fn tensor_examples() {
        let p2 = prob(2, 1.0);
        let x = p2.balanced_point();
        let n = v(&[1.0, 1.0]) / 2f64.sqrt();
        assert_relative_eq!(
            p2.deriv_tensor_contract(&x, 2, &[n.clone(), n.clone()])
                .unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert_eq!(
            p2.deriv_tensor_contract(&x, 3, std::slice::from_ref(&n))
                .unwrap(),
            0.0
        );
        let q = p2.on_manifold(v(&[2.0, 0.5])).unwrap();
        assert_eq!(
            p2.deriv_tensor_contract(&q, 3, &[v(&[0.3, -1.0])]).unwrap(),
            0.0
        );

        let p3 = prob(3, 1.0);
        let n3 = Point::from_element(3, 1.0 / 3f64.sqrt());
        let got = p3
            .deriv_tensor_contract(&p3.balanced_point(), 3, &[n3])
            .unwrap();
        assert_relative_eq!(got, 6.0 / 3f64.powf(1.5), epsilon = 1e-14);
        assert_eq!(
            p3.deriv_tensor_contract(&p3.balanced_point(), 4, &[Point::zeros(3)]),
            Err(Error::UnsupportedOrder(4))
        );
    }

    #[test]
    fn loss_examples() {
        let p2 = prob(2, 1.0);
        assert_eq!(p2.loss(&v(&[1.0, 1.0])).unwrap(), 0.0);
        assert_eq!(p2.grad_loss(&v(&[1.0, 1.0])).unwrap(), v(&[0.0, 0.0]));
        assert_eq!(p2.loss(&v(&[2.0, 1.0])).unwrap(), 0.5);
        assert_eq!(p2.grad_loss(&v(&[2.0, 1.0])).unwrap(), v(&[1.0, 2.0]));
        let p3 = prob(3, 1.0);
        assert_eq!(p3.loss(&v(&[1.0, 1.0, 2.0])).unwrap(), 0.5);
        assert_eq!(
            p3.grad_loss(&v(&[1.0, 1.0, 2.0])).unwrap(),
            v(&[2.0, 2.0, 1.0])
        );
    }

    #[test]
    fn sharpness_and_normal_examples() {
        let p5 = prob(5, 1.0);
        assert_relative_eq!(
            p5.sharpness(&p5.balanced_point()).unwrap(),
            5.0,
            epsilon = 1e-14
        );
        let p2 = prob(2, 1.0);
        let q = p2.on_manifold(v(&[2.0, 0.5])).unwrap();
        assert_relative_eq!(p2.sharpness(&q).unwrap(), 4.25, epsilon = 1e-14);
        let n = p2.normal(&q).unwrap();
        assert_relative_eq!(n, v(&[0.5, 2.0]) / 4.25f64.sqrt(), epsilon = 1e-15);
        let p24 = prob(2, 4.0);
        assert_relative_eq!(
            p24.sharpness(&p24.balanced_point()).unwrap(),
            8.0,
            epsilon = 1e-14
        );
        let n5 = p5.normal(&p5.balanced_point()).unwrap();
        assert_relative_eq!(
            n5,
            Point::from_element(5, 1.0 / 5f64.sqrt()),
            epsilon = 1e-15
        );
    }

    #[test]
    fn off_manifold_points_are_rejected() {
        let p2 = prob(2, 1.0);
        assert!(matches!(
            p2.on_manifold(v(&[2.0, 1.0])),
            Err(Error::OffManifold { .. })
        ));
        assert!(matches!(
            p2.on_manifold(v(&[-1.0, -1.0])),
            Err(Error::NonPositiveCoordinate { index: 0, .. })
        ));
        // A point valid for one target is off the manifold of another.
        let other = prob(2, 2.0);
        let q = p2.balanced_point();
        assert!(matches!(
            other.sharpness(&q),
            Err(Error::OffManifold { .. })
        ));
    }

    #[test]
    fn loss_derivative_examples_at_depth_two() {
        let p2 = prob(2, 1.0);
        let x = p2.balanced_point();
        assert_relative_eq!(p2.dl3_n(&x).unwrap(), 3.0 * 2f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(p2.dl4_n(&x).unwrap(), 3.0, epsilon = 1e-14);
    }

    #[test]
    fn c_coefficient_matches_closed_form() {
        for (p, y, want) in [(5usize, 1.0, 22.4), (2, 1.0, 4.0)] {
            let pr = prob(p, y);
            let eta = 2.0 / pr.lambda_star();
            let got = pr.c_coeff(eta, &pr.balanced_point()).unwrap();
            assert_relative_eq!(got, want, max_relative = 1e-12);
        }
        for p in 2..=8 {
            for y in [0.5, 1.0, 2.0, 7.0] {
                let pr = prob(p, y);
                let got = pr
                    .c_coeff(2.0 / pr.lambda_star(), &pr.balanced_point())
                    .unwrap();
                assert_relative_eq!(got, c_star_closed_form(p, y), max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn on_manifold_shortcuts_hold() {
        let pr = prob(4, 3.0);
        let raw = v(&[0.7, 1.3, 2.0, 1.0]);
        let s = (3.0 / raw.iter().product::<f64>()).powf(0.25);
        let x = pr.on_manifold(raw * s).unwrap();
        let g = pr.grad_f(x.coords()).unwrap();
        let h = pr.hessian_f(x.coords()).unwrap();
        for l in 0..4 {
            assert_relative_eq!(g[l], 3.0 / x.coords()[l], max_relative = 1e-12);
            for m in 0..4 {
                let want = if l == m {
                    0.0
                } else {
                    3.0 / (x.coords()[l] * x.coords()[m])
                };
                assert_relative_eq!(h[(l, m)], want, max_relative = 1e-12, epsilon = 1e-15);
            }
        }
    }

    fn positive_point(p: usize) -> impl Strategy<Value = Point> {
        prop::collection::vec(0.2f64..3.0, p).prop_map(Point::from_vec)
    }

    fn direction(p: usize) -> impl Strategy<Value = Point> {
        prop::collection::vec(-1.0f64..1.0, p).prop_map(Point::from_vec)
    }

    fn renormalise(pr: &FactorisationProblem, raw: Point) -> OnManifoldPoint {
        let prod: f64 = raw.iter().product();
        let s = (pr.target() / prod).powf(1.0 / pr.depth() as f64);
        pr.on_manifold(raw * s).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn tensors_match_brute_force(
            (x, u, w, z) in (2usize..7).prop_flat_map(|p| (positive_point(p), direction(p), direction(p), direction(p)))
        ) {
            let pr = prob(x.len(), 1.0);
            let g = pr.grad_f(&x).unwrap();
            prop_assert!((g.dot(&u) - brute_contract(&x, &[&u])).abs() <= 1e-12 * (1.0 + g.norm()));
            let d2 = pr.d2f(&x, &u, &w).unwrap();
            prop_assert!((d2 - brute_contract(&x, &[&u, &w])).abs() <= 1e-12 * (1.0 + d2.abs()));
            let d3 = pr.d3f(&x, &u, &w, &z).unwrap();
            prop_assert!((d3 - brute_contract(&x, &[&u, &w, &z])).abs() <= 1e-12 * (1.0 + d3.abs()));
        }

        #[test]
        fn loss_hessian_on_manifold_is_rank_one((raw, t) in (2usize..7).prop_flat_map(|p| (positive_point(p), direction(p)))) {
            let pr = prob(raw.len(), 1.5);
            let x = renormalise(&pr, raw);
            let n = pr.normal(&x).unwrap();
            let h = pr.hessian_loss(x.coords()).unwrap();
            let lam = pr.sharpness(&x).unwrap();
            prop_assert!(((&h * &n).dot(&n) - lam).abs() < 1e-8 * lam.max(1.0));
            let tangent = &t - &n * n.dot(&t);
            prop_assert!((&h * tangent).norm() < 1e-8 * lam.max(1.0));
            prop_assert!(pr.grad_loss(x.coords()).unwrap().norm() < 1e-10);
        }

        #[test]
        fn c_is_positive_at_the_edge(raw in prop::sample::select(vec![2usize, 3, 5, 8]).prop_flat_map(|p| prop::collection::vec(0.2f64..5.0, p))) {
            let pr = prob(raw.len(), 1.0);
            let x = renormalise(&pr, Point::from_vec(raw));
            let lam = pr.sharpness(&x).unwrap();
            prop_assert!(pr.c_coeff(2.0 / lam, &x).unwrap() > 0.0);
        }
    }
}
