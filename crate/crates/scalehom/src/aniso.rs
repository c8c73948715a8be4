//! Anisotropic effective-diffusivity flow `dâ/dτ = f(â) − â` with
//! `f(a) = n/(n−1) ∫ (k·ak)^{-1} (Id − k⊗k) dk` over the normalized sphere.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::quadrature::gauss_legendre;
use crate::rng::{self, normal};
use crate::stats::{slope_fit, SlopeFit, SlopeModel};

pub type Mat = DMatrix<f64>;

pub const MAX_CONDITION: f64 = 1e12;

/// Nodes on the unit sphere with weights summing to one.
#[derive(Clone, Debug)]
pub struct SphereQuadrature {
    pub n: usize,
    pub nodes: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    /// Stochastic tolerance for Monte Carlo rules, zero otherwise.
    pub stochastic_tolerance: f64,
}

impl SphereQuadrature {
    /// `m` equispaced angles on the circle.
    pub fn circle(m: usize) -> Result<Self> {
        if m < 4 {
            return Err(param("quad_order", "need at least 4 angles"));
        }
        let nodes = (0..m)
            .map(|j| {
                let t = 2.0 * std::f64::consts::PI * j as f64 / m as f64;
                DVector::from_vec(vec![t.cos(), t.sin()])
            })
            .collect();
        Ok(SphereQuadrature {
            n: 2,
            nodes,
            weights: vec![1.0 / m as f64; m],
            stochastic_tolerance: 0.0,
        })
    }

    /// Gauss–Legendre in `cos θ` times `2·order` equispaced azimuths; exact for
    /// polynomials of degree `2·order − 1`.
    pub fn sphere_product(order: usize) -> Result<Self> {
        if order < 2 {
            return Err(param("quad_order", "need order at least 2"));
        }
        let (z, wz) = gauss_legendre(order);
        let m = 2 * order;
        let mut nodes = Vec::with_capacity(order * m);
        let mut weights = Vec::with_capacity(order * m);
        for (zi, wi) in z.iter().zip(&wz) {
            let r = (1.0 - zi * zi).max(0.0).sqrt();
            for j in 0..m {
                let p = 2.0 * std::f64::consts::PI * (j as f64 + 0.5) / m as f64;
                nodes.push(DVector::from_vec(vec![r * p.cos(), r * p.sin(), *zi]));
                weights.push(0.5 * wi / m as f64);
            }
        }
        Ok(SphereQuadrature {
            n: 3,
            nodes,
            weights,
            stochastic_tolerance: 0.0,
        })
    }

    /// Antipodally paired random directions, equal weights.
    pub fn monte_carlo<R: Rng + ?Sized>(n: usize, pairs: usize, rng: &mut R) -> Result<Self> {
        if n < 2 || pairs == 0 {
            return Err(param("quad_order", "need n >= 2 and at least one pair"));
        }
        let mut nodes = Vec::with_capacity(2 * pairs);
        for _ in 0..pairs {
            let v = DVector::from_fn(n, |_, _| normal(rng));
            let v = &v / v.norm();
            nodes.push(-&v);
            nodes.push(v);
        }
        let m = nodes.len();
        Ok(SphereQuadrature {
            n,
            nodes,
            weights: vec![1.0 / m as f64; m],
            stochastic_tolerance: 3.0 / (pairs as f64).sqrt(),
        })
    }

    /// Default rule per dimension: circle (n = 2), product rule (n = 3),
    /// seeded Monte Carlo (n ≥ 4).
    pub fn for_dimension(n: usize, order: usize, seed: u64) -> Result<Self> {
        match n {
            0 | 1 => Err(param("n", "dimension must be at least 2")),
            2 => Self::circle(order),
            3 => Self::sphere_product(order),
            _ => Self::monte_carlo(n, order, &mut rng::stream(seed, rng::domain::ANISO, n as u64)),
        }
    }

    /// `Σ w k⊗k`, which should equal `Id/n`.
    pub fn second_moment(&self) -> Mat {
        let mut m = Mat::zeros(self.n, self.n);
        for (k, w) in self.nodes.iter().zip(&self.weights) {
            m += k * k.transpose() * *w;
        }
        m
    }
}

fn check_spd(a: &Mat, name: &str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(param(name, "must be square"));
    }
    let scale = a.abs().max();
    if (a - a.transpose()).abs().max() > 1e-12 * scale.max(1.0) {
        return Err(param(name, "must be symmetric"));
    }
    let ev = a.clone().symmetric_eigen().eigenvalues;
    let (lo, hi) = (ev.min(), ev.max());
    if !(lo > 0.0) {
        return Err(param(name, "must be positive definite"));
    }
    if hi / lo > MAX_CONDITION {
        return Err(param(name, format!("condition number {:.3e} exceeds 1e12", hi / lo)));
    }
    Ok(())
}

fn f_unchecked(a: &Mat, quad: &SphereQuadrature) -> Mat {
    let n = quad.n;
    let mut out = Mat::zeros(n, n);
    let mut kk = Mat::zeros(n, n);
    let mut wsum = 0.0;
    for (k, w) in quad.nodes.iter().zip(&quad.weights) {
        let q = (a * k).dot(k);
        let c = w / q;
        k.mul_to(&k.transpose(), &mut kk);
        out -= &kk * c;
        wsum += c;
    }
    for i in 0..n {
        out[(i, i)] += wsum;
    }
    out * (n as f64 / (n as f64 - 1.0))
}

pub fn f_of_a(a: &Mat, quad: &SphereQuadrature) -> Result<Mat> {
    if a.nrows() != quad.n {
        return Err(param("a", "dimension does not match the quadrature"));
    }
    check_spd(a, "a")?;
    Ok(f_unchecked(a, quad))
}

/// Closed form for n = 2 diagonal input.
pub fn f_diag2_closed_form(a1: f64, a2: f64) -> (f64, f64) {
    let (s1, s2) = (a1.sqrt(), a2.sqrt());
    (2.0 / (s2 * (s1 + s2)), 2.0 / (s1 * (s1 + s2)))
}

/// `Df(I)ȧ = 2/((n−1)(n+2)) ȧ − (n+1)/((n−1)(n+2)) (tr ȧ) Id`.
pub fn df_identity(adot: &Mat) -> Result<Mat> {
    let n = adot.nrows();
    if n < 2 || adot.ncols() != n {
        return Err(param("adot", "must be square with n >= 2"));
    }
    if (adot - adot.transpose()).abs().max() > 1e-12 * adot.abs().max().max(1.0) {
        return Err(param("adot", "must be symmetric"));
    }
    let d = ((n - 1) * (n + 2)) as f64;
    let mut out = adot * (2.0 / d);
    let t = adot.trace() * (n as f64 + 1.0) / d;
    for i in 0..n {
        out[(i, i)] -= t;
    }
    Ok(out)
}

/// Central difference `(f(I+hȧ) − f(I−hȧ))/(2h)`.
pub fn df_identity_fd(adot: &Mat, quad: &SphereQuadrature, h: f64) -> Result<Mat> {
    let id = Mat::identity(quad.n, quad.n);
    let p = f_of_a(&(&id + adot * h), quad)?;
    let m = f_of_a(&(&id - adot * h), quad)?;
    Ok((p - m) / (2.0 * h))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnisoTrajectory {
    pub taus: Vec<f64>,
    /// Eigenvalues of `â` sorted ascending at each recorded time.
    pub eigenvalues: Vec<Vec<f64>>,
    /// Frobenius distance `‖â − Id‖`.
    pub distance: Vec<f64>,
    #[serde(skip)]
    pub states: Vec<Mat>,
    pub halvings: usize,
}

fn rhs(a: &Mat, quad: &SphereQuadrature) -> Mat {
    f_unchecked(a, quad) - a
}

fn is_spd(a: &Mat) -> bool {
    a.clone().cholesky().is_some() && a.iter().all(|v| v.is_finite())
}

fn rk4(a: &Mat, h: f64, quad: &SphereQuadrature) -> Mat {
    let k1 = rhs(a, quad);
    let a2 = a + &k1 * (0.5 * h);
    let k2 = if is_spd(&a2) { rhs(&a2, quad) } else { return a2 };
    let a3 = a + &k2 * (0.5 * h);
    let k3 = if is_spd(&a3) { rhs(&a3, quad) } else { return a3 };
    let a4 = a + &k3 * h;
    let k4 = if is_spd(&a4) { rhs(&a4, quad) } else { return a4 };
    let next = a + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    (&next + next.transpose()) * 0.5
}

fn sorted_eigs(a: &Mat) -> Vec<f64> {
    let mut e: Vec<f64> = a.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    e.sort_by(|x, y| x.partial_cmp(y).unwrap());
    e
}

/// RK4 integration with symmetric projection; a step that leaves the SPD cone
/// is retried with halved size, at most 8 times.
pub fn flow_integrate(a0: &Mat, dtau: f64, tau_end: f64, quad: &SphereQuadrature) -> Result<AnisoTrajectory> {
    if a0.nrows() != quad.n {
        return Err(param("a0", "dimension does not match the quadrature"));
    }
    check_spd(a0, "a0")?;
    if !(dtau > 0.0 && dtau <= 0.05) {
        return Err(param("dtau", "must lie in (0, 0.05]"));
    }
    if !(tau_end > 0.0) || !tau_end.is_finite() {
        return Err(param("tau_end", "must be positive"));
    }
    let steps = ((tau_end / dtau) - 1e-9).ceil() as usize;
    let h = tau_end / steps as f64;
    let id = Mat::identity(quad.n, quad.n);
    let mut a = a0.clone();
    let mut out = AnisoTrajectory {
        taus: vec![0.0],
        eigenvalues: vec![sorted_eigs(&a)],
        distance: vec![(&a - &id).norm()],
        states: vec![a.clone()],
        halvings: 0,
    };
    for k in 1..=steps {
        let mut sub = 1usize;
        let next = loop {
            let hh = h / sub as f64;
            let mut b = a.clone();
            let mut ok = true;
            for _ in 0..sub {
                b = rk4(&b, hh, quad);
                if !is_spd(&b) {
                    ok = false;
                    break;
                }
            }
            if ok {
                break b;
            }
            if sub >= 256 {
                return Err(Error::Integration(format!(
                    "state left the SPD cone at tau = {} after 8 halvings",
                    (k - 1) as f64 * h
                )));
            }
            sub *= 2;
            out.halvings += 1;
        };
        a = next;
        out.taus.push(k as f64 * h);
        out.eigenvalues.push(sorted_eigs(&a));
        out.distance.push((&a - &id).norm());
        out.states.push(a.clone());
    }
    Ok(out)
}

impl AnisoTrajectory {
    /// Ratio `μ_max/μ_min` per recorded time.
    pub fn eigen_ratio(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|e| e[e.len() - 1] / e[0]).collect()
    }

    /// Whether `μ_max/μ_min` decreases strictly until it reaches 1 to within `tol`.
    pub fn ratio_monotone(&self, tol: f64) -> bool {
        let r = self.eigen_ratio();
        r.windows(2).all(|w| w[1] < w[0] || w[0] - 1.0 < tol)
    }

    /// Exponential decay rate of `‖â − Id‖` fitted over `[t0, t1]`.
    pub fn decay_rate(&self, t0: f64, t1: f64) -> Result<SlopeFit> {
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for (t, d) in self.taus.iter().zip(&self.distance) {
            if *t >= t0 && *t <= t1 && *d > 0.0 {
                x.push(*t);
                y.push(d.ln());
            }
        }
        let mut fit = slope_fit(&x, &y, SlopeModel::Linear)?;
        fit.slope = -fit.slope;
        Ok(fit)
    }

    /// Largest excursion of the extreme eigenvalues beyond the fences
    /// `μ_*² ≥ θ + (μ_*(0)² − θ)e^{−2τ}` and `μ*² ≤ 1/θ + (μ*(0)² − 1/θ)e^{−2τ}`.
    pub fn fence_violation(&self) -> f64 {
        let e0 = &self.eigenvalues[0];
        let (lo0, hi0) = (e0[0], e0[e0.len() - 1]);
        let theta = lo0 / hi0;
        let mut worst = 0.0_f64;
        for (t, e) in self.taus.iter().zip(&self.eigenvalues) {
            let decay = (-2.0 * t).exp();
            let lo = (theta + (lo0 * lo0 - theta) * decay).sqrt();
            let hi = (1.0 / theta + (hi0 * hi0 - 1.0 / theta) * decay).sqrt();
            worst = worst.max(lo - e[0]).max(e[e.len() - 1] - hi);
        }
        worst
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MonotonicityReport {
    /// Smallest eigenvalue of `f(a') − f(a)` per pair.
    pub min_eigenvalues: Vec<f64>,
    pub all_positive: bool,
}

/// Checks `f(a') − f(a) ≻ 0` for pairs with `a' ≤ a`, `a' ≠ a`.
pub fn monotonicity_check(pairs: &[(Mat, Mat)], quad: &SphereQuadrature) -> Result<MonotonicityReport> {
    let mut mins = Vec::with_capacity(pairs.len());
    for (a_small, a_big) in pairs {
        let d = a_big - a_small;
        let ev = d.clone().symmetric_eigen().eigenvalues;
        let scale = a_big.abs().max();
        if ev.min() < -1e-12 * scale || d.abs().max() <= 1e-14 * scale {
            return Err(param("pairs", "each pair must satisfy a' <= a with a' != a"));
        }
        let diff = f_of_a(a_small, quad)? - f_of_a(a_big, quad)?;
        mins.push(diff.symmetric_eigen().eigenvalues.min());
    }
    let all_positive = mins.iter().all(|&m| m > 0.0);
    Ok(MonotonicityReport {
        min_eigenvalues: mins,
        all_positive,
    })
}

/// Random rotation via QR of a Gaussian matrix, with determinant +1.
pub fn random_rotation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Mat {
    let g = Mat::from_fn(n, n, |_, _| normal(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    if q.determinant() < 0.0 {
        for i in 0..n {
            q[(i, 0)] = -q[(i, 0)];
        }
    }
    q
}

/// Random SPD matrix with condition number at most `cond`.
pub fn random_spd<R: Rng + ?Sized>(n: usize, cond: f64, rng: &mut R) -> Mat {
    let o = random_rotation(n, rng);
    let lc = cond.ln();
    let mut d: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * lc).exp()).collect();
    d[0] = 1.0;
    let s = Mat::from_diagonal(&DVector::from_vec(d));
    &o * s * o.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(v: &[f64]) -> Mat {
        Mat::from_diagonal(&DVector::from_vec(v.to_vec()))
    }

    #[test]
    fn identity_is_fixed() {
        let q = SphereQuadrature::circle(512).unwrap();
        let f = f_of_a(&Mat::identity(2, 2), &q).unwrap();
        assert!((f - Mat::identity(2, 2)).abs().max() < 1e-10);
        let q = SphereQuadrature::sphere_product(17).unwrap();
        let f = f_of_a(&Mat::identity(3, 3), &q).unwrap();
        assert!((f - Mat::identity(3, 3)).abs().max() < 1e-12);
        assert!((q.second_moment() - Mat::identity(3, 3) / 3.0).abs().max() < 1e-14);
    }

    #[test]
    fn diag_closed_form() {
        let q = SphereQuadrature::circle(512).unwrap();
        let f = f_of_a(&diag(&[4.0, 1.0]), &q).unwrap();
        assert!((f[(0, 0)] - 2.0 / 3.0).abs() < 1e-8);
        assert!((f[(1, 1)] - 1.0 / 3.0).abs() < 1e-8);
        assert!(f[(0, 1)].abs() < 1e-10);
        let (c1, c2) = f_diag2_closed_form(4.0, 1.0);
        assert!((c1 - 2.0 / 3.0).abs() < 1e-15 && (c2 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn homogeneity() {
        let q = SphereQuadrature::circle(512).unwrap();
        let a = Mat::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.7]);
        let fa = f_of_a(&a, &q).unwrap();
        for s in [0.5, 2.0, 10.0] {
            let fs = f_of_a(&(&a * s), &q).unwrap();
            assert!((fs - &fa / s).abs().max() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let q = SphereQuadrature::circle(64).unwrap();
        assert!(f_of_a(&diag(&[1.0, -1.0]), &q).is_err());
        assert!(f_of_a(&diag(&[1.0, 1e-13]), &q).is_err());
        assert!(f_of_a(&Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]), &q).is_err());
        assert!(df_identity(&Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])).is_err());
    }

    #[test]
    fn linearization() {
        let q = SphereQuadrature::circle(512).unwrap();
        let adot = Mat::from_row_slice(2, 2, &[1.0, 0.4, 0.4, -1.0]);
        let an = df_identity(&adot).unwrap();
        assert!((&an - &adot * 0.5).abs().max() < 1e-15);
        let fd = df_identity_fd(&adot, &q, 1e-4).unwrap();
        assert!((fd - an).abs().max() < 1e-6);
        for n in 2..6 {
            let id = Mat::identity(n, n);
            assert!((df_identity(&id).unwrap() + &id).abs().max() < 1e-14);
        }
        let q3 = SphereQuadrature::sphere_product(17).unwrap();
        let adot = Mat::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 0.5, -0.3, 0.0, -0.3, 2.0]);
        let fd = df_identity_fd(&adot, &q3, 1e-4).unwrap();
        assert!((fd - df_identity(&adot).unwrap()).abs().max() < 1e-6);
    }

    #[test]
    fn monotone_pairs() {
        let q = SphereQuadrature::circle(512).unwrap();
        let rep = monotonicity_check(&[(Mat::identity(2, 2), Mat::identity(2, 2) * 2.0)], &q).unwrap();
        assert!((rep.min_eigenvalues[0] - 0.5).abs() < 1e-10);
        let rep = monotonicity_check(&[(diag(&[2.0, 1.0]), diag(&[4.0, 1.0]))], &q).unwrap();
        let s2 = 2f64.sqrt();
        let want = (2.0 / (s2 + 1.0) - 2.0 / 3.0).min(2.0 / (s2 * (s2 + 1.0)) - 1.0 / 3.0);
        assert!((rep.min_eigenvalues[0] - want).abs() < 1e-10);
        assert!(monotonicity_check(&[(diag(&[4.0, 1.0]), diag(&[2.0, 1.0]))], &q).is_err());
        assert!(monotonicity_check(&[(diag(&[4.0, 1.0]), diag(&[4.0, 1.0]))], &q).is_err());
    }

    #[test]
    fn stationary_identity() {
        let q = SphereQuadrature::circle(512).unwrap();
        let t = flow_integrate(&Mat::identity(2, 2), 0.05, 5.0, &q).unwrap();
        assert!(t.distance.iter().all(|&d| d < 1e-10));
    }
}
