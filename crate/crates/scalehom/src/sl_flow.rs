//! Geometric Brownian motion `dF = F dB` on SL(n).

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::rng::{self, Stream};
use crate::sl_brownian::{make_basis, SlBasis, SlIncrement};
use crate::stats::{batch_means_ci, mean_ci, MomentEstimate};

pub type Mat = DMatrix<f64>;

/// Upper bound on `n_paths · steps · n³` for one ensemble.
pub const WORK_LIMIT: f64 = 2e11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Exp,
    EulerRenorm,
}

#[derive(Clone, Debug)]
pub struct FlowState {
    pub f: Mat,
    pub tau: f64,
}

impl FlowState {
    pub fn identity(n: usize) -> Self {
        FlowState {
            f: Mat::identity(n, n),
            tau: 0.0,
        }
    }
}

/// Matrix exponential of a trace-free matrix; closed form for n = 2.
pub fn expm_traceless_into(x: &Mat, out: &mut Mat) {
    if x.nrows() == 2 {
        let delta = -(x[(0, 0)] * x[(1, 1)] - x[(0, 1)] * x[(1, 0)]);
        let (c, s) = if delta.abs() < 1e-8 {
            (1.0 + 0.5 * delta + delta * delta / 24.0, 1.0 + delta / 6.0 + delta * delta / 120.0)
        } else if delta > 0.0 {
            let r = delta.sqrt();
            (r.cosh(), r.sinh() / r)
        } else {
            let r = (-delta).sqrt();
            (r.cos(), r.sin() / r)
        };
        out[(0, 0)] = c + s * x[(0, 0)];
        out[(0, 1)] = s * x[(0, 1)];
        out[(1, 0)] = s * x[(1, 0)];
        out[(1, 1)] = c + s * x[(1, 1)];
    } else {
        out.copy_from(&x.clone().exp());
    }
}

pub fn expm_traceless(x: &Mat) -> Mat {
    let mut out = Mat::zeros(x.nrows(), x.ncols());
    expm_traceless_into(x, &mut out);
    out
}

fn det(m: &Mat) -> f64 {
    if m.nrows() == 2 {
        m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]
    } else {
        m.determinant()
    }
}

/// Inverse of a unimodular matrix.
pub fn sl_inverse(m: &Mat) -> Result<Mat> {
    if m.nrows() == 2 {
        let d = det(m);
        return Ok(Mat::from_row_slice(2, 2, &[m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]]) / d);
    }
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::Integration("singular flow matrix".into()))
}

struct Stepper {
    e: Mat,
    tmp: Mat,
}

impl Stepper {
    fn new(n: usize) -> Self {
        Stepper {
            e: Mat::zeros(n, n),
            tmp: Mat::zeros(n, n),
        }
    }

    fn advance(&mut self, f: &mut Mat, db: &Mat, scheme: Scheme) {
        let n = f.nrows();
        match scheme {
            Scheme::Exp => expm_traceless_into(db, &mut self.e),
            Scheme::EulerRenorm => {
                self.e.copy_from(db);
                for i in 0..n {
                    self.e[(i, i)] += 1.0;
                }
            }
        }
        f.mul_to(&self.e, &mut self.tmp);
        std::mem::swap(f, &mut self.tmp);
        if scheme == Scheme::EulerRenorm {
            let d = det(f);
            *f *= d.abs().powf(-1.0 / n as f64);
        }
    }
}

/// One step `F ← F·expm(ΔB)` or `F ← F(I + ΔB)·det^{−1/n}`.
pub fn step(state: &FlowState, db: &SlIncrement, scheme: Scheme) -> Result<FlowState> {
    if db.matrix.nrows() != state.f.nrows() {
        return Err(param("dB", "dimension mismatch"));
    }
    let mut f = state.f.clone();
    Stepper::new(f.nrows()).advance(&mut f, &db.matrix, scheme);
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration("non-finite flow state".into()));
    }
    Ok(FlowState {
        f,
        tau: state.tau + db.dtau,
    })
}

fn step_count(tau_end: f64, dtau: f64) -> Result<usize> {
    if !(tau_end > 0.0) || !tau_end.is_finite() {
        return Err(param("tau_end", "must be positive"));
    }
    if !(dtau > 0.0) || dtau > tau_end {
        return Err(param("dtau", "must lie in (0, tau_end]"));
    }
    Ok(((tau_end / dtau) - 1e-9).ceil() as usize)
}

fn check_work(n: usize, n_paths: usize, steps: usize) -> Result<()> {
    let w = n_paths as f64 * steps as f64 * (n * n * n) as f64;
    if w > WORK_LIMIT {
        return Err(Error::Resource(format!(
            "{n_paths} paths x {steps} steps exceeds the work limit; reduce n_paths or increase dtau"
        )));
    }
    Ok(())
}

/// Snapshot matrices `F_τ` of independent paths started at `F_0 = Id`.
#[derive(Clone, Debug)]
pub struct FlowEnsemble {
    pub n: usize,
    pub dtau: f64,
    pub scheme: Scheme,
    pub snapshot_taus: Vec<f64>,
    /// `paths[p][s]` is path `p` at `snapshot_taus[s]`.
    pub paths: Vec<Vec<Mat>>,
}

impl FlowEnsemble {
    pub fn snapshot_index(&self, tau: f64) -> Result<usize> {
        self.snapshot_taus
            .iter()
            .position(|&t| (t - tau).abs() < 1e-9 * (1.0 + tau))
            .ok_or_else(|| param("tau", format!("no snapshot at tau = {tau}")))
    }

    pub fn at(&self, tau: f64) -> Result<Vec<&Mat>> {
        let s = self.snapshot_index(tau)?;
        Ok(self.paths.iter().map(|p| &p[s]).collect())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub n: usize,
    pub tau_end: f64,
    pub dtau: f64,
    pub n_paths: usize,
    pub scheme: Scheme,
    pub snapshots: Vec<f64>,
}

fn run_path(basis: &SlBasis, steps: usize, dtau: f64, scheme: Scheme, marks: &[usize], rng: &mut Stream) -> Vec<Mat> {
    let n = basis.n;
    let mut f = Mat::identity(n, n);
    let mut db = Mat::zeros(n, n);
    let mut st = Stepper::new(n);
    let mut out = Vec::with_capacity(marks.len());
    let mut next = 0;
    let sq = dtau.sqrt();
    for k in 0..=steps {
        while next < marks.len() && marks[next] == k {
            out.push(f.clone());
            next += 1;
        }
        if k == steps {
            break;
        }
        basis.sample_into(sq, rng, &mut db);
        st.advance(&mut f, &db, scheme);
    }
    out
}

/// Simulates `n_paths` independent paths; path `p` uses stream `(seed, p)`.
pub fn simulate_ensemble(spec: &EnsembleSpec, seed: u64) -> Result<FlowEnsemble> {
    let basis = make_basis(spec.n)?;
    let steps = step_count(spec.tau_end, spec.dtau)?;
    if spec.n_paths == 0 {
        return Err(param("n_paths", "must be positive"));
    }
    check_work(spec.n, spec.n_paths, steps)?;
    let dtau = spec.tau_end / steps as f64;
    let mut taus = spec.snapshots.clone();
    taus.push(spec.tau_end);
    taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
    taus.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let mut marks = Vec::new();
    for &t in &taus {
        if !(0.0..=spec.tau_end * (1.0 + 1e-12)).contains(&t) {
            return Err(param("snapshots", format!("tau {t} outside [0, tau_end]")));
        }
        let k = (t / dtau).round() as usize;
        if (k as f64 * dtau - t).abs() > 1e-9 * (1.0 + t) {
            return Err(param("snapshots", format!("tau {t} is not on the step grid")));
        }
        marks.push(k);
    }
    let paths: Vec<Vec<Mat>> = (0..spec.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut r = rng::stream(seed, rng::domain::FLOW, p as u64);
            run_path(&basis, steps, dtau, spec.scheme, &marks, &mut r)
        })
        .collect();
    for p in &paths {
        if p.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::Integration("non-finite flow state".into()));
        }
    }
    Ok(FlowEnsemble {
        n: spec.n,
        dtau,
        scheme: spec.scheme,
        snapshot_taus: taus,
        paths,
    })
}

/// A single path stored every `stride` steps.
#[derive(Clone, Debug)]
pub struct FlowPath {
    pub taus: Vec<f64>,
    pub states: Vec<Mat>,
}

pub fn simulate_path<R: Rng + ?Sized>(
    n: usize,
    tau_end: f64,
    dtau: f64,
    stride: usize,
    scheme: Scheme,
    rng: &mut R,
) -> Result<FlowPath> {
    let basis = make_basis(n)?;
    let steps = step_count(tau_end, dtau)?;
    if stride == 0 {
        return Err(param("stride", "must be positive"));
    }
    let dtau = tau_end / steps as f64;
    let mut f = Mat::identity(n, n);
    let mut db = Mat::zeros(n, n);
    let mut st = Stepper::new(n);
    let mut taus = vec![0.0];
    let mut states = vec![f.clone()];
    for k in 1..=steps {
        basis.sample_into(dtau.sqrt(), rng, &mut db);
        st.advance(&mut f, &db, scheme);
        if k % stride == 0 || k == steps {
            taus.push(k as f64 * dtau);
            states.push(f.clone());
        }
    }
    Ok(FlowPath { taus, states })
}

impl FlowPath {
    fn index(&self, tau: f64) -> Result<usize> {
        let end = *self.taus.last().unwrap();
        if tau < -1e-12 || tau > end * (1.0 + 1e-12) {
            return Err(param("tau", format!("{tau} outside the path horizon [0, {end}]")));
        }
        self.taus
            .iter()
            .position(|&t| (t - tau).abs() < 1e-9 * (1.0 + tau))
            .ok_or_else(|| param("tau", format!("{tau} is not a stored time")))
    }
}

/// `F_{τ*,τ} = F_{τ*}^{-1} F_τ`, and `Id` for `τ ≤ τ*`.
pub fn two_parameter_increment(path: &FlowPath, tau_star: f64, tau: f64) -> Result<Mat> {
    let a = path.index(tau_star)?;
    let b = path.index(tau)?;
    let n = path.states[0].nrows();
    if tau <= tau_star {
        return Ok(Mat::identity(n, n));
    }
    Ok(sl_inverse(&path.states[a])? * &path.states[b])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrobeniusMoment {
    pub p: u32,
    pub tau: f64,
    pub estimate: MomentEstimate,
    /// Estimate divided by `e^{½p(p+1)τ}`.
    pub ratio: f64,
    pub heavy_tail_warning: bool,
}

/// `E|F_τ|^{2p}` for `p ∈ {1, 2, 3}`.
pub fn frobenius_moment(ens: &FlowEnsemble, p: u32, tau: f64) -> Result<FrobeniusMoment> {
    if !(1..=3).contains(&p) {
        return Err(param("p", "only p in {1, 2, 3} is supported"));
    }
    let mats = ens.at(tau)?;
    let xs: Vec<f64> = mats.iter().map(|m| m.norm_squared().powi(p as i32)).collect();
    let estimate = if xs.len() >= 16 {
        batch_means_ci(&xs, 16.max(xs.len().min(20)))?
    } else {
        mean_ci(&xs)?
    };
    let scale = (0.5 * (p * (p + 1)) as f64 * tau).exp();
    let warn = estimate.relative_half_width() > 0.2;
    Ok(FrobeniusMoment {
        p,
        tau,
        ratio: estimate.value / scale,
        estimate,
        heavy_tail_warning: warn,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LyapunovResult {
    pub n: usize,
    /// Exponents sorted descending, averaged over paths.
    pub exponents: Vec<MomentEstimate>,
    pub sum: f64,
    pub per_path: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LyapunovSpec {
    pub n: usize,
    pub tau_end: f64,
    pub dtau: f64,
    pub reorth_every: usize,
    pub burn_in: f64,
    pub n_paths: usize,
}

impl Default for LyapunovSpec {
    fn default() -> Self {
        LyapunovSpec {
            n: 2,
            tau_end: 200.0,
            dtau: 0.005,
            reorth_every: 10,
            burn_in: 5.0,
            n_paths: 32,
        }
    }
}

/// QR accumulator for the exponents of `F_τ`, propagated through `F^T`.
#[derive(Clone, Debug)]
pub struct LyapunovAccumulator {
    pub q: Mat,
    pub log_r: Vec<f64>,
    pub tau_elapsed: f64,
}

impl LyapunovAccumulator {
    pub fn new(n: usize) -> Self {
        LyapunovAccumulator {
            q: Mat::identity(n, n),
            log_r: vec![0.0; n],
            tau_elapsed: 0.0,
        }
    }

    /// Re-orthonormalizes `z = M q` and accumulates `ln|R_ii|` when `record`.
    pub fn absorb(&mut self, z: Mat, dtau: f64, record: bool) -> Result<()> {
        let qr = z.qr();
        let r = qr.r();
        let mut q = qr.q();
        let n = q.nrows();
        for i in 0..n {
            let d = r[(i, i)];
            if !(d.abs() > 1e-300) || !d.is_finite() {
                return Err(Error::Integration("degenerate Lyapunov frame".into()));
            }
            if record {
                self.log_r[i] += d.abs().ln();
            }
            if d < 0.0 {
                for k in 0..n {
                    q[(k, i)] = -q[(k, i)];
                }
            }
        }
        self.q = q;
        if record {
            self.tau_elapsed += dtau;
        }
        Ok(())
    }
}

fn lyapunov_path(spec: &LyapunovSpec, basis: &SlBasis, rng: &mut Stream) -> Result<Vec<f64>> {
    let n = spec.n;
    let steps = step_count(spec.tau_end, spec.dtau)?;
    let dtau = spec.tau_end / steps as f64;
    let burn = (spec.burn_in / dtau).round() as usize;
    let mut acc = LyapunovAccumulator::new(n);
    let mut db = Mat::zeros(n, n);
    let mut e = Mat::zeros(n, n);
    let mut block = Mat::identity(n, n);
    let mut tmp = Mat::zeros(n, n);
    let mut in_block = 0;
    let mut block_start = 0;
    for k in 0..steps {
        basis.sample_into(dtau.sqrt(), rng, &mut db);
        expm_traceless_into(&db, &mut e);
        // left-multiply by E^T
        e.tr_mul_to(&block, &mut tmp);
        std::mem::swap(&mut block, &mut tmp);
        in_block += 1;
        if in_block == spec.reorth_every || k + 1 == steps {
            let record = block_start >= burn;
            let z = &block * &acc.q;
            acc.absorb(z, in_block as f64 * dtau, record)?;
            block.fill_with_identity();
            in_block = 0;
            block_start = k + 1;
        }
    }
    if acc.tau_elapsed <= 0.0 {
        return Err(param("burn_in", "burn-in consumes the whole horizon"));
    }
    let mut ex: Vec<f64> = acc.log_r.iter().map(|l| l / acc.tau_elapsed).collect();
    ex.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(ex)
}

pub fn lyapunov_spectrum(spec: &LyapunovSpec, seed: u64) -> Result<LyapunovResult> {
    let basis = make_basis(spec.n)?;
    if spec.reorth_every == 0 {
        return Err(param("reorth_every", "must be positive"));
    }
    if spec.n_paths < 2 {
        return Err(param("n_paths", "need at least 2 paths for a CI"));
    }
    if !(spec.burn_in >= 0.0) || spec.burn_in >= spec.tau_end {
        return Err(param("burn_in", "must lie in [0, tau_end)"));
    }
    let steps = step_count(spec.tau_end, spec.dtau)?;
    check_work(spec.n, spec.n_paths, steps)?;
    let per_path: Vec<Vec<f64>> = (0..spec.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut r = rng::stream(seed, rng::domain::LYAPUNOV, p as u64);
            lyapunov_path(spec, &basis, &mut r)
        })
        .collect::<Result<_>>()?;
    let mut exponents = Vec::new();
    for i in 0..spec.n {
        let xs: Vec<f64> = per_path.iter().map(|e| e[i]).collect();
        exponents.push(mean_ci(&xs)?);
    }
    let sum = exponents.iter().map(|e| e.value).sum();
    Ok(LyapunovResult {
        n: spec.n,
        exponents,
        sum,
        per_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sl_brownian::sample_increment;

    #[test]
    fn zero_increment_keeps_state() {
        let s = FlowState {
            f: Mat::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]),
            tau: 0.3,
        };
        let db = SlIncrement {
            matrix: Mat::zeros(2, 2),
            dtau: 0.01,
        };
        for scheme in [Scheme::Exp, Scheme::EulerRenorm] {
            let t = step(&s, &db, scheme).unwrap();
            assert!((&t.f - &s.f).abs().max() < 1e-15);
        }
    }

    #[test]
    fn closed_form_matches_pade() {
        let basis = make_basis(2).unwrap();
        let mut r = rng::stream(9, 0, 0);
        for scale in [1e-6, 0.1, 1.0, 3.0] {
            for _ in 0..20 {
                let x = basis.sample(scale, &mut r);
                let a = expm_traceless(&x);
                let b = x.clone().exp();
                assert!((a - &b).abs().max() < 1e-12 * (1.0 + b.abs().max()));
            }
        }
    }

    #[test]
    fn determinant_preserved() {
        let basis = make_basis(2).unwrap();
        let mut r = rng::stream(4, 0, 0);
        let mut s = FlowState::identity(2);
        for _ in 0..10_000 {
            let db = sample_increment(&basis, 1e-4, &mut r).unwrap();
            s = step(&s, &db, Scheme::Exp).unwrap();
        }
        assert!((det(&s.f) - 1.0).abs() < 1e-9);
        let basis = make_basis(3).unwrap();
        let mut s = FlowState::identity(3);
        for _ in 0..2000 {
            let db = sample_increment(&basis, 5e-4, &mut r).unwrap();
            s = step(&s, &db, Scheme::EulerRenorm).unwrap();
        }
        assert!((s.f.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn initial_moment_exact() {
        let spec = EnsembleSpec {
            n: 3,
            tau_end: 0.1,
            dtau: 0.01,
            n_paths: 20,
            scheme: Scheme::Exp,
            snapshots: vec![0.0],
        };
        let ens = simulate_ensemble(&spec, 1).unwrap();
        for p in 1..=3 {
            let m = frobenius_moment(&ens, p, 0.0).unwrap();
            assert!((m.estimate.value - 3f64.powi(p as i32)).abs() < 1e-12);
        }
        assert!(frobenius_moment(&ens, 4, 0.0).is_err());
    }

    #[test]
    fn cocycle_identity() {
        let mut r = rng::stream(2, 0, 0);
        let path = simulate_path(2, 2.0, 0.01, 10, Scheme::Exp, &mut r).unwrap();
        assert!((two_parameter_increment(&path, 1.0, 1.0).unwrap() - Mat::identity(2, 2)).abs().max() == 0.0);
        let a = two_parameter_increment(&path, 0.5, 1.2).unwrap();
        let b = two_parameter_increment(&path, 1.2, 2.0).unwrap();
        let c = two_parameter_increment(&path, 0.5, 2.0).unwrap();
        assert!((a * b - c).abs().max() < 1e-10);
        assert!(two_parameter_increment(&path, 0.5, 2.5).is_err());
    }

    #[test]
    fn resource_guard() {
        let spec = EnsembleSpec {
            n: 2,
            tau_end: 1e6,
            dtau: 1e-3,
            n_paths: 1_000_000,
            scheme: Scheme::Exp,
            snapshots: vec![],
        };
        assert!(matches!(simulate_ensemble(&spec, 0), Err(Error::Resource(_))));
    }
}
