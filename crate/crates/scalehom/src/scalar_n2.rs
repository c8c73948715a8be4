//! Scalar reductions of the n = 2 flow: `R = ½|F|²`, the top eigenvalue `S`
//! of `F*F`, and the comparison geometric Brownian motion `Q`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::rng::{self, normal};
use crate::sl_flow::FlowEnsemble;
use crate::stats::{ratio_ci, MomentEstimate};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalarKind {
    R,
    S,
    Q,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalarPath {
    pub kind: ScalarKind,
    pub taus: Vec<f64>,
    pub values: Vec<f64>,
    /// Steps at which the `R ≥ 1` floor was applied.
    pub floor_hits: usize,
    pub steps: usize,
}

fn grid(tau_end: f64, dtau: f64) -> Result<(usize, f64)> {
    if !(tau_end >= 0.0) || !tau_end.is_finite() {
        return Err(param("tau_end", "must be non-negative"));
    }
    if !(dtau > 0.0) {
        return Err(param("dtau", "must be positive"));
    }
    if tau_end == 0.0 {
        return Ok((0, dtau));
    }
    let steps = ((tau_end / dtau) - 1e-9).ceil().max(1.0) as usize;
    Ok((steps, tau_end / steps as f64))
}

/// Euler–Maruyama with the Milstein term `½R(Δw² − Δτ)` for
/// `dR = R dτ + √(R²−1) dw` from `R_0 = 1`, floored at 1. In exact arithmetic
/// one step from `R = 1 + x` cannot go below `1 + x²/(2(1+x)) + (1+x)Δτ/2`.
/// Values are recorded every `record_every` steps and at the end.
pub fn simulate_r<G: Rng + ?Sized>(tau_end: f64, dtau: f64, record_every: usize, rng: &mut G) -> Result<ScalarPath> {
    let (steps, h) = grid(tau_end, dtau)?;
    let every = record_every.max(1);
    let sh = h.sqrt();
    let mut r = 1.0_f64;
    let mut hits = 0;
    let mut taus = vec![0.0];
    let mut values = vec![1.0];
    for k in 1..=steps {
        let dw = sh * normal(rng);
        r += r * h + (r * r - 1.0).max(0.0).sqrt() * dw + 0.5 * r * (dw * dw - h);
        if r < 1.0 {
            r = 1.0;
            hits += 1;
        }
        if k % every == 0 || k == steps {
            taus.push(k as f64 * h);
            values.push(r);
        }
    }
    Ok(ScalarPath {
        kind: ScalarKind::R,
        taus,
        values,
        floor_hits: hits,
        steps,
    })
}

/// Solves `x − a·coth(x) = c` for the unique positive root (`a > 0`).
fn implicit_coth_root(a: f64, c: f64) -> f64 {
    let g = |x: f64| x - a / x.tanh() - c;
    let mut hi = c.max(0.0) + a + 1.0;
    while g(hi) <= 0.0 {
        hi *= 2.0;
    }
    // lower bracket: g → −∞ as x → 0+
    let mut lo = (a / (1.0 + c.abs() + a)).min(hi * 0.5);
    while g(lo) >= 0.0 {
        lo *= 0.5;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let gx = g(x);
        if gx > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let sh = x.sinh();
        let dg = 1.0 + a / (sh * sh);
        let mut nx = x - gx / dg;
        if !(nx > lo && nx < hi) {
            nx = 0.5 * (lo + hi);
        }
        if (nx - x).abs() <= 1e-15 * x.max(1e-300) {
            return nx;
        }
        x = nx;
    }
    x
}

/// Coupled `(R, S, Q)` driven by one Brownian path `w`.
///
/// `X = ln S` solves `dX = ½coth(X) dτ + dw` (stepped drift-implicitly) and
/// `Y = ln Q = τ/2 + w` is exact; the scheme keeps `X > Y` for every step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoupledTriple {
    pub taus: Vec<f64>,
    pub r: Vec<f64>,
    pub s: Vec<f64>,
    pub q: Vec<f64>,
}

impl CoupledTriple {
    /// Number of grid times where `2R ≥ S ≥ Q` fails.
    pub fn violations(&self) -> usize {
        self.r
            .iter()
            .zip(&self.s)
            .zip(&self.q)
            .filter(|((r, s), q)| !(2.0 * **r >= **s && **s >= **q))
            .count()
    }
}

pub fn simulate_coupled<G: Rng + ?Sized>(tau_end: f64, dtau: f64, rng: &mut G) -> Result<CoupledTriple> {
    let (steps, h) = grid(tau_end, dtau)?;
    let sh = h.sqrt();
    let (mut x, mut w) = (0.0_f64, 0.0_f64);
    let mut out = CoupledTriple {
        taus: vec![0.0],
        r: vec![1.0],
        s: vec![1.0],
        q: vec![1.0],
    };
    for k in 1..=steps {
        let dw = sh * normal(rng);
        w += dw;
        x = implicit_coth_root(0.5 * h, x + dw);
        let tau = k as f64 * h;
        let s = x.exp();
        out.taus.push(tau);
        out.s.push(s);
        out.r.push(0.5 * (s + 1.0 / s));
        out.q.push((0.5 * tau + w).exp());
    }
    Ok(out)
}

/// Direct simulation of `S` (the top eigenvalue of `F*F`).
pub fn simulate_s<G: Rng + ?Sized>(tau_end: f64, dtau: f64, rng: &mut G) -> Result<ScalarPath> {
    let t = simulate_coupled(tau_end, dtau, rng)?;
    let steps = t.taus.len() - 1;
    Ok(ScalarPath {
        kind: ScalarKind::S,
        taus: t.taus,
        values: t.s,
        floor_hits: 0,
        steps,
    })
}

/// Exact `Q_τ = exp(τ/2 + w_τ)` on an increasing grid starting at 0.
pub fn simulate_q<G: Rng + ?Sized>(tau_grid: &[f64], rng: &mut G) -> Result<ScalarPath> {
    let mut prev = 0.0;
    let mut w = 0.0;
    let mut values = Vec::with_capacity(tau_grid.len());
    for &t in tau_grid {
        if !(t >= prev) {
            return Err(param("tau_grid", "must be non-negative and nondecreasing"));
        }
        w += (t - prev).sqrt() * normal(rng);
        prev = t;
        values.push((0.5 * t + w).exp());
    }
    Ok(ScalarPath {
        kind: ScalarKind::Q,
        taus: tau_grid.to_vec(),
        values,
        floor_hits: 0,
        steps: tau_grid.len(),
    })
}

/// `S = exp(arccosh R)`.
pub fn s_from_r(r: f64) -> Result<f64> {
    if !(r >= 1.0) {
        return Err(param("R", format!("{r} < 1")));
    }
    Ok(r + (r * r - 1.0).sqrt())
}

/// `R = ½(S + 1/S)`.
pub fn r_from_s(s: f64) -> Result<f64> {
    if !(s >= 1.0) {
        return Err(param("S", format!("{s} < 1")));
    }
    Ok(0.5 * (s + 1.0 / s))
}

/// Values of many scalar paths on a common time grid: `values[p][t]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalarEnsemble {
    pub kind: ScalarKind,
    pub taus: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub floor_hits: usize,
    pub steps: usize,
}

impl ScalarEnsemble {
    pub fn column(&self, tau: f64) -> Result<Vec<f64>> {
        let i = self
            .taus
            .iter()
            .position(|&t| (t - tau).abs() < 1e-9 * (1.0 + tau))
            .ok_or_else(|| param("tau", format!("no recorded time {tau}")))?;
        Ok(self.values.iter().map(|v| v[i]).collect())
    }

    pub fn floor_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.floor_hits as f64 / self.steps as f64
        }
    }
}

/// `n_paths` independent R paths, path `p` on stream `(seed, p)`.
pub fn simulate_r_ensemble(tau_end: f64, dtau: f64, record_every: usize, n_paths: usize, seed: u64) -> Result<ScalarEnsemble> {
    let paths: Vec<ScalarPath> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut g = rng::stream(seed, rng::domain::SCALAR_R, p as u64);
            simulate_r(tau_end, dtau, record_every, &mut g)
        })
        .collect::<Result<_>>()?;
    collect(ScalarKind::R, paths)
}

pub fn simulate_s_ensemble(tau_end: f64, dtau: f64, n_paths: usize, seed: u64) -> Result<ScalarEnsemble> {
    let paths: Vec<ScalarPath> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut g = rng::stream(seed, rng::domain::SCALAR_S, p as u64);
            simulate_s(tau_end, dtau, &mut g)
        })
        .collect::<Result<_>>()?;
    collect(ScalarKind::S, paths)
}

pub fn simulate_q_ensemble(tau_grid: &[f64], n_paths: usize, seed: u64) -> Result<ScalarEnsemble> {
    let paths: Vec<ScalarPath> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut g = rng::stream(seed, rng::domain::SCALAR_Q, p as u64);
            simulate_q(tau_grid, &mut g)
        })
        .collect::<Result<_>>()?;
    collect(ScalarKind::Q, paths)
}

pub fn simulate_coupled_ensemble(tau_end: f64, dtau: f64, n_paths: usize, seed: u64) -> Result<Vec<CoupledTriple>> {
    (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut g = rng::stream(seed, rng::domain::COUPLED, p as u64);
            simulate_coupled(tau_end, dtau, &mut g)
        })
        .collect()
}

fn collect(kind: ScalarKind, paths: Vec<ScalarPath>) -> Result<ScalarEnsemble> {
    if paths.is_empty() {
        return Err(param("n_paths", "must be positive"));
    }
    let taus = paths[0].taus.clone();
    let floor_hits = paths.iter().map(|p| p.floor_hits).sum();
    let steps = paths.iter().map(|p| p.steps).sum();
    Ok(ScalarEnsemble {
        kind,
        taus,
        values: paths.into_iter().map(|p| p.values).collect(),
        floor_hits,
        steps,
    })
}

/// `R = ½|F|²` per path and snapshot of an n = 2 flow ensemble.
pub fn r_from_flow(ens: &FlowEnsemble) -> Result<ScalarEnsemble> {
    if ens.n != 2 {
        return Err(param("n", "R reduction needs n = 2"));
    }
    Ok(ScalarEnsemble {
        kind: ScalarKind::R,
        taus: ens.snapshot_taus.clone(),
        values: ens
            .paths
            .iter()
            .map(|p| p.iter().map(|f| 0.5 * f.norm_squared()).collect())
            .collect(),
        floor_hits: 0,
        steps: 0,
    })
}

/// Largest eigenvalue of `F*F` for a 2×2 matrix.
pub fn top_eigenvalue_ftf(f: &nalgebra::DMatrix<f64>) -> f64 {
    let g = f.transpose() * f;
    let tr = g.trace();
    let det = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    0.5 * tr + disc
}

/// `E[Z·I(Z ≥ c·(EZ)^exponent)] / E[Z]` with a delta-method CI.
pub fn tail_mass_ratio(z: &[f64], c: f64, exponent: f64) -> Result<MomentEstimate> {
    if z.is_empty() {
        return Err(param("ensemble", "must be nonempty"));
    }
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let thr = c * mean.powf(exponent);
    let num: Vec<f64> = z.iter().map(|&v| if v >= thr { v } else { 0.0 }).collect();
    if z.len() == 1 {
        return Ok(MomentEstimate::exact(num[0] / z[0], 1));
    }
    ratio_ci(&num, z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transforms_round_trip() {
        assert_eq!(s_from_r(1.0).unwrap(), 1.0);
        for s in [1.5, 3.0, 10.0] {
            let r = r_from_s(s).unwrap();
            assert!((s_from_r(r).unwrap() - s).abs() < 1e-12);
        }
        assert!(s_from_r(0.99).is_err());
        assert!(r_from_s(0.5).is_err());
    }

    #[test]
    fn implicit_root_solves_equation() {
        for &(a, c) in &[(0.0025, 0.0), (0.0025, -1.0), (0.0025, 3.0), (0.1, -5.0), (1e-4, 1e-3)] {
            let x = implicit_coth_root(a, c);
            assert!(x > 0.0);
            assert!((x - a / x.tanh() - c).abs() < 1e-12 * (1.0 + c.abs()), "a={a} c={c} x={x}");
        }
    }

    #[test]
    fn r_path_stays_above_one() {
        let mut g = rng::stream(1, 0, 0);
        let p = simulate_r(5.0, 0.005, 1, &mut g).unwrap();
        assert!(p.values.iter().all(|&v| v >= 1.0));
        assert_eq!(p.values[0], 1.0);
    }

    #[test]
    fn coupled_domination() {
        let mut g = rng::stream(3, 0, 0);
        for _ in 0..50 {
            let t = simulate_coupled(2.0, 0.005, &mut g).unwrap();
            assert_eq!(t.violations(), 0);
        }
    }

    #[test]
    fn degenerate_tail_ratio() {
        let z = vec![2.0; 100];
        let r = tail_mass_ratio(&z, 0.5, 1.5).unwrap();
        assert_eq!(r.value, 1.0);
        assert!(tail_mass_ratio(&[], 1.0, 1.5).is_err());
    }

    #[test]
    fn top_eigenvalue_of_sl2() {
        let f = nalgebra::DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 3.0, 2.0]);
        let s = top_eigenvalue_ftf(&f);
        let ev = (f.transpose() * &f).symmetric_eigen().eigenvalues.max();
        assert!((s - ev).abs() < 1e-12);
        let r = 0.5 * f.norm_squared();
        assert!((s_from_r(r).unwrap() - s).abs() < 1e-9 * s);
    }
}
