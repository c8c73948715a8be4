//! Brownian motion on sl(n) with the O(n)-invariant covariance.
//!
//! `X = σ_sym Σ g_a E_a + σ_skew Σ h_b A_b` over Frobenius-orthonormal bases of
//! trace-free symmetric and skew matrices, with `E[X_sym²] = ½Id` and
//! `−E[X_skew²] = ½Id`, so that `E[X²] = 0` and `E[X X*] = Id`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::rng::normal;
use crate::stats::{batch_means_ci, MomentEstimate};

pub type Mat = DMatrix<f64>;

#[derive(Clone, Debug)]
pub struct SlBasis {
    pub n: usize,
    pub sym0_basis: Vec<Mat>,
    pub skew_basis: Vec<Mat>,
    pub sigma_sym: f64,
    pub sigma_skew: f64,
}

/// Trace-free Helmert vector `d`: (1,…,1,−d,0,…)/√(d(d+1)), d = 1..n−1.
fn helmert(n: usize, d: usize) -> Vec<f64> {
    let s = 1.0 / ((d * (d + 1)) as f64).sqrt();
    let mut v = vec![0.0; n];
    for x in v.iter_mut().take(d) {
        *x = s;
    }
    v[d] = -(d as f64) * s;
    v
}

pub fn sigma_sym_sq(n: usize) -> f64 {
    n as f64 / ((n - 1) * (n + 2)) as f64
}

pub fn sigma_skew_sq(n: usize) -> f64 {
    1.0 / (n - 1) as f64
}

fn frob(a: &Mat, b: &Mat) -> f64 {
    a.component_mul(b).sum()
}

/// Builds the bases and checks the closed-form amplitudes against the
/// basis-square sums `Σ E_a²`.
pub fn make_basis(n: usize) -> Result<SlBasis> {
    if n < 2 {
        return Err(param("n", "dimension must be at least 2"));
    }
    let mut sym0 = Vec::new();
    let mut skew = Vec::new();
    let r = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = Mat::zeros(n, n);
            s[(i, j)] = r;
            s[(j, i)] = r;
            sym0.push(s);
            let mut a = Mat::zeros(n, n);
            a[(i, j)] = r;
            a[(j, i)] = -r;
            skew.push(a);
        }
    }
    for d in 1..n {
        sym0.push(Mat::from_diagonal(&nalgebra::DVector::from_vec(helmert(n, d))));
    }
    let sum_sq = |b: &[Mat]| b.iter().fold(Mat::zeros(n, n), |acc, e| acc + e * e);
    let ssym = sum_sq(&sym0);
    let sskew = -sum_sq(&skew);
    // Σ E_a² = c·Id for both families; solve σ²c = ½
    let csym = ssym.trace() / n as f64;
    let cskew = sskew.trace() / n as f64;
    let id = Mat::identity(n, n);
    let iso_err = (&ssym - &id * csym).abs().max() + (&sskew - &id * cskew).abs().max();
    let sig_sym2 = 0.5 / csym;
    let sig_skew2 = 0.5 / cskew;
    if iso_err > 1e-10
        || (sig_sym2 - sigma_sym_sq(n)).abs() > 1e-10
        || (sig_skew2 - sigma_skew_sq(n)).abs() > 1e-10
    {
        return Err(Error::Integration(format!(
            "sl({n}) basis oracle mismatch: sym {sig_sym2} vs {}, skew {sig_skew2} vs {}",
            sigma_sym_sq(n),
            sigma_skew_sq(n)
        )));
    }
    let all: Vec<&Mat> = sym0.iter().chain(skew.iter()).collect();
    for (a, x) in all.iter().enumerate() {
        if x.trace().abs() > 1e-12 {
            return Err(Error::Integration("basis element not trace-free".into()));
        }
        for (b, y) in all.iter().enumerate() {
            let want = if a == b { 1.0 } else { 0.0 };
            if (frob(x, y) - want).abs() > 1e-12 {
                return Err(Error::Integration("basis not Frobenius-orthonormal".into()));
            }
        }
    }
    Ok(SlBasis {
        n,
        sym0_basis: sym0,
        skew_basis: skew,
        sigma_sym: sigma_sym_sq(n).sqrt(),
        sigma_skew: sigma_skew_sq(n).sqrt(),
    })
}

impl SlBasis {
    /// Writes `scale·X` into `out`, drawing one normal per basis element.
    pub fn sample_into<R: Rng + ?Sized>(&self, scale: f64, rng: &mut R, out: &mut Mat) {
        let n = self.n;
        out.fill(0.0);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let a = scale * self.sigma_sym * r;
        let b = scale * self.sigma_skew * r;
        for i in 0..n {
            for j in (i + 1)..n {
                let g = normal(rng) * a;
                let h = normal(rng) * b;
                out[(i, j)] += g + h;
                out[(j, i)] += g - h;
            }
        }
        let s = scale * self.sigma_sym;
        for d in 1..n {
            let g = normal(rng) * s;
            let c = g / ((d * (d + 1)) as f64).sqrt();
            for k in 0..d {
                out[(k, k)] += c;
            }
            out[(d, d)] -= d as f64 * c;
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, scale: f64, rng: &mut R) -> Mat {
        let mut m = Mat::zeros(self.n, self.n);
        self.sample_into(scale, rng, &mut m);
        m
    }
}

#[derive(Clone, Debug)]
pub struct SlIncrement {
    pub matrix: Mat,
    pub dtau: f64,
}

pub fn sample_increment<R: Rng + ?Sized>(basis: &SlBasis, dtau: f64, rng: &mut R) -> Result<SlIncrement> {
    if !(dtau > 0.0) || !dtau.is_finite() {
        return Err(param("dtau", "must be positive"));
    }
    Ok(SlIncrement {
        matrix: basis.sample(dtau.sqrt(), rng),
        dtau,
    })
}

/// Frobenius pairing `G.X = Σ G_ij X_ij`.
pub fn pairing(g: &Mat, x: &Mat) -> f64 {
    frob(g, x)
}

/// `E(G.B_τ)² = ¼τ((tr G)² − 4 det G)` for symmetric 2×2 `G`.
pub fn symmetric_form_value(g: &Mat, tau: f64) -> Result<f64> {
    if g.nrows() != 2 || g.ncols() != 2 {
        return Err(param("G", "must be 2x2"));
    }
    if (g[(0, 1)] - g[(1, 0)]).abs() > 1e-14 * (1.0 + g.abs().max()) {
        return Err(param("G", "must be symmetric"));
    }
    let tr = g.trace();
    let det = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
    Ok(0.25 * tau * (tr * tr - 4.0 * det))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentEntry {
    pub name: String,
    pub target: f64,
    pub estimate: MomentEstimate,
    pub flagged: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub n: usize,
    pub tau: f64,
    pub n_samples: usize,
    pub entries: Vec<MomentEntry>,
    pub violations: usize,
}

impl CovarianceReport {
    pub fn max_abs_error(&self, prefix: &str) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| (e.estimate.value - e.target).abs())
            .fold(0.0, f64::max)
    }
}

const REPORT_BATCHES: usize = 20;

fn entry(name: String, target: f64, samples: &[f64]) -> Result<MomentEntry> {
    let est = batch_means_ci(samples, REPORT_BATCHES)?;
    let se = est.std_err();
    let dev = (est.value - target).abs();
    let flagged = if se == 0.0 { dev > 1e-12 } else { dev > 4.0 * se };
    Ok(MomentEntry {
        name,
        target,
        estimate: est,
        flagged,
    })
}

/// Empirical `E B²`, `E B B*`, and the sym/skew cross moment of `B_τ`.
pub fn covariance_report<R: Rng + ?Sized>(
    basis: &SlBasis,
    tau: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<CovarianceReport> {
    if n_samples < 1000 {
        return Err(param("n_samples", "need at least 1000 samples"));
    }
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(param("tau", "must be non-negative"));
    }
    let n = basis.n;
    let nn = n * n;
    let mut sq = vec![Vec::with_capacity(n_samples); nn];
    let mut gram = vec![Vec::with_capacity(n_samples); nn];
    let mut cross = Vec::with_capacity(n_samples);
    let mut g_sym = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            g_sym[(i, j)] = 1.0 / (1.0 + (i + 2 * j) as f64);
        }
    }
    g_sym = (&g_sym + g_sym.transpose()) * 0.5;
    let g_skew = &basis.skew_basis[0];
    let mut b = Mat::zeros(n, n);
    for _ in 0..n_samples {
        basis.sample_into(tau.sqrt(), rng, &mut b);
        let b2 = &b * &b;
        let bb = &b * b.transpose();
        for k in 0..nn {
            sq[k].push(b2[(k / n, k % n)]);
            gram[k].push(bb[(k / n, k % n)]);
        }
        cross.push(pairing(&g_sym, &b) * pairing(g_skew, &b));
    }
    let mut entries = Vec::new();
    for k in 0..nn {
        let (i, j) = (k / n, k % n);
        entries.push(entry(format!("B2[{i}{j}]"), 0.0, &sq[k])?);
    }
    for k in 0..nn {
        let (i, j) = (k / n, k % n);
        let t = if i == j { tau } else { 0.0 };
        entries.push(entry(format!("BBt[{i}{j}]"), t, &gram[k])?);
    }
    entries.push(entry("cross-sym-skew".into(), 0.0, &cross)?);
    let violations = entries.iter().filter(|e| e.flagged).count();
    Ok(CovarianceReport {
        n,
        tau,
        n_samples,
        entries,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn amplitudes_from_oracle() {
        let b = make_basis(2).unwrap();
        assert!((b.sigma_sym.powi(2) - 0.5).abs() < 1e-15);
        assert!((b.sigma_skew.powi(2) - 1.0).abs() < 1e-15);
        assert_eq!(b.sym0_basis.len(), 2);
        assert_eq!(b.skew_basis.len(), 1);
        let b = make_basis(3).unwrap();
        assert!((b.sigma_sym.powi(2) - 0.3).abs() < 1e-15);
        assert!((b.sigma_skew.powi(2) - 0.5).abs() < 1e-15);
        for n in 2..7 {
            let b = make_basis(n).unwrap();
            assert_eq!(b.sym0_basis.len(), n * (n + 1) / 2 - 1);
            assert_eq!(b.skew_basis.len(), n * (n - 1) / 2);
        }
        assert!(make_basis(1).is_err());
    }

    #[test]
    fn sampled_matches_basis_expansion() {
        // structural sampler equals σ Σ g_a E_a with the same draws
        let basis = make_basis(4).unwrap();
        let mut r1 = rng::stream(3, 0, 0);
        let x = basis.sample(1.0, &mut r1);
        let mut r2 = rng::stream(3, 0, 0);
        let mut y = Mat::zeros(4, 4);
        let mut coeff = Vec::new();
        for _ in 0..basis.skew_basis.len() {
            coeff.push((normal(&mut r2), normal(&mut r2)));
        }
        for (k, (g, h)) in coeff.iter().enumerate() {
            y += &basis.sym0_basis[k] * (g * basis.sigma_sym);
            y += &basis.skew_basis[k] * (h * basis.sigma_skew);
        }
        let off = basis.skew_basis.len();
        for d in 0..3 {
            y += &basis.sym0_basis[off + d] * (normal(&mut r2) * basis.sigma_sym);
        }
        assert!((x - y).abs().max() < 1e-14);
    }

    #[test]
    fn increments_trace_free() {
        let basis = make_basis(3).unwrap();
        let mut r = rng::stream(1, 0, 0);
        for _ in 0..1000 {
            let d = sample_increment(&basis, 0.01, &mut r).unwrap();
            assert!(d.matrix.trace().abs() <= 1e-12 * d.matrix.norm());
        }
        assert!(sample_increment(&basis, 0.0, &mut r).is_err());
        assert!(sample_increment(&basis, -1.0, &mut r).is_err());
    }

    #[test]
    fn symmetric_form_examples() {
        let id = Mat::identity(2, 2);
        assert_eq!(symmetric_form_value(&id, 3.0).unwrap(), 0.0);
        let g = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!((symmetric_form_value(&g, 1.0).unwrap() - 1.0).abs() < 1e-15);
        let g = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!((symmetric_form_value(&g, 2.0).unwrap() - 0.5).abs() < 1e-15);
        let bad = Mat::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        assert!(symmetric_form_value(&bad, 1.0).is_err());
    }

    #[test]
    fn zero_time_report_is_exact_zero() {
        let basis = make_basis(3).unwrap();
        let mut r = rng::stream(1, 0, 0);
        let rep = covariance_report(&basis, 0.0, 1000, &mut r).unwrap();
        for e in &rep.entries {
            assert_eq!(e.estimate.value, 0.0);
            assert!(!e.flagged);
        }
    }

    #[test]
    fn report_n2_moments() {
        let basis = make_basis(2).unwrap();
        let mut r = rng::stream(2, 0, 0);
        let rep = covariance_report(&basis, 1.0, 100_000, &mut r).unwrap();
        assert!(rep.max_abs_error("BBt") < 0.02);
        assert!(rep.max_abs_error("B2") < 0.02);
        let cross = rep.entries.iter().find(|e| e.name == "cross-sym-skew").unwrap();
        assert!(!cross.flagged);
    }
}
