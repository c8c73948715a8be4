//! Scale-by-scale ladder for the proxies `φ̃`, `σ̃`, the stream tensor `Ψ`
//! and the residuum `f̃`, plus point-sampled quadratic variations and the
//! coupling between the drift and the SL(n) Brownian driver.
//!
//! Conventions: `∂_j Ψ^{ij} = b^i`, the diffusion matrix is `a_{jl} = δ_{jl} + Ψ^{lj}`
//! so that `∇·(a∇u) = Δu + b·∇u`, and `(∇·σ^i)_l = ∂_m σ^{i,lm}`.

use std::ops::Range;

use num_complex::Complex64 as C64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{ensure, param, Error, Result};
use crate::fft::{signed_freq, wrap_index, FftNd};
use crate::rng::{self, domain};
use crate::scale_ladder::{lambda_of_time, ScaleLadder};
use crate::spectral_field::{sample_band, LambdaWeight, ModeTable, Spectrum, TorusGrid};
use crate::stats::{mean, mean_ci, ratio_ci, MomentEstimate};

const I: C64 = C64 { re: 0.0, im: 1.0 };
const OVERFLOW: f64 = 1e12;

/// How `λ̃` enters the corrector increment of a shell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightRule {
    /// `λ̃(1/|k|)` per mode.
    #[default]
    PerMode,
    /// `λ̃` at the lower end `L_j` of the shell.
    Level,
}

impl WeightRule {
    pub fn for_shell(&self, ladder: &ScaleLadder, j: usize) -> LambdaWeight {
        match self {
            WeightRule::PerMode => LambdaWeight::PerMode { epsilon: ladder.epsilon },
            WeightRule::Level => LambdaWeight::Level(ladder.lambdas[j]),
        }
    }
}

/// Index pairs `(l, m)` with `l < m`, the independent entries of a skew tensor.
pub fn skew_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for l in 0..n {
        for m in (l + 1)..n {
            v.push((l, m));
        }
    }
    v
}

fn pair_index(n: usize, l: usize, m: usize) -> Option<(usize, f64)> {
    if l == m {
        return None;
    }
    let (a, b, s) = if l < m { (l, m, 1.0) } else { (m, l, -1.0) };
    Some((a * n - a * (a + 1) / 2 + (b - a - 1), s))
}

/// Deterministic per-shell moments of the increments.
#[derive(Clone, Debug)]
pub struct ShellMoments {
    /// `E[ΔΨ^{lj} ∂_l Δφ^i] = dλ δ_ij`.
    pub dlambda: f64,
    /// Accumulated `E tr ∇Δφ(∇Δφ)* / n`.
    pub dqv: f64,
    /// `E[(∂_j Δφ^i) ΔΨ^{lm}]` at `(j·n + i)·p + q` for pair `q = (l, m)`.
    pub t: Vec<f64>,
}

pub fn shell_moments(spec: &Spectrum, epsilon: f64, range: Range<usize>, weight: LambdaWeight) -> ShellMoments {
    let n = spec.grid.n;
    let pairs = skew_pairs(n);
    let p = pairs.len();
    let mut t = vec![0.0; n * n * p];
    let (mut dl, mut dq) = (0.0, 0.0);
    for idx in range {
        let a2 = 2.0 * spec.amplitude(idx, epsilon).powi(2);
        let ka = spec.modes.kabs[idx];
        let k = spec.modes.k[idx];
        let w = weight.at(ka);
        let k2 = ka * ka;
        dl += a2 * (n as f64 - 1.0) / (w * k2);
        dq += a2 * (n as f64 - 1.0) / (w * w * k2);
        let f = a2 / (w * k2 * k2);
        for j in 0..n {
            for i in 0..n {
                for (q, &(l, m)) in pairs.iter().enumerate() {
                    let d_im = if i == m { 1.0 } else { 0.0 };
                    let d_il = if i == l { 1.0 } else { 0.0 };
                    t[(j * n + i) * p + q] += f * k[j] * (k[l] * d_im - k[m] * d_il);
                }
            }
        }
    }
    ShellMoments {
        dlambda: dl / n as f64,
        dqv: dq / n as f64,
        t,
    }
}

/// Real-space state of one realization at ladder level `level`.
#[derive(Clone, Debug)]
pub struct LadderState {
    pub grid: TorusGrid,
    pub level: usize,
    pub l: f64,
    pub lambda_tilde: f64,
    /// `1 + Σ E[ΔΨ^{l1}∂_lΔφ^1]` over the shells so far; tends to `λ̃` as `M → ∞`.
    pub lambda_lattice: f64,
    pub tau: f64,
    /// `φ̃^i`, `n` components.
    pub phi: Vec<Vec<f64>>,
    /// `σ̃^{i,lm}` for `l < m` at `i·p + q`.
    pub sigma: Vec<Vec<f64>>,
    /// `Ψ^{lm}` for `l < m`.
    pub psi: Vec<Vec<f64>>,
}

impl LadderState {
    pub fn initial(grid: TorusGrid, ladder: &ScaleLadder) -> Self {
        let n = grid.n;
        let p = n * (n - 1) / 2;
        let np = grid.total_points();
        LadderState {
            grid,
            level: 0,
            l: ladder.levels[0],
            lambda_tilde: ladder.lambdas[0],
            lambda_lattice: 1.0,
            tau: ladder.taus[0],
            phi: vec![vec![0.0; np]; n],
            sigma: vec![vec![0.0; np]; n * p],
            psi: vec![vec![0.0; np]; p],
        }
    }

    /// `σ̃^{i,lm}` at grid point `x`.
    pub fn sigma_at(&self, i: usize, l: usize, m: usize, x: usize) -> f64 {
        let p = self.psi.len();
        match pair_index(self.grid.n, l, m) {
            None => 0.0,
            Some((q, s)) => s * self.sigma[i * p + q][x],
        }
    }

    /// `Ψ^{lm}` at grid point `x`.
    pub fn psi_at(&self, l: usize, m: usize, x: usize) -> f64 {
        match pair_index(self.grid.n, l, m) {
            None => 0.0,
            Some((q, s)) => s * self.psi[q][x],
        }
    }
}

/// Per-level spatial averages of one realization.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: usize,
    pub l: f64,
    pub lambda_tilde: f64,
    pub lambda_lattice: f64,
    pub tau: f64,
    pub phi2: f64,
    pub phi4: f64,
    pub sigma2: f64,
    /// Band-projected `|f̃|²`; `None` when the residuum was skipped at this level.
    pub f2: Option<f64>,
    pub f2_raw: Option<f64>,
    /// Spatial mean of `f̃^i_j` at `i·n + j`.
    pub f_mean: Option<Vec<f64>>,
    /// Accumulated `Σ tr ∇Δφ(∇Δφ)*/n`, spatially averaged.
    pub qv: f64,
    pub grad_phi_mean: f64,
}

struct Workspace {
    fft: FftNd,
    n: usize,
    len: usize,
    m: usize,
    buf: Vec<C64>,
    /// Differentiate the whole grid spectrum instead of the band.
    full: bool,
}

impl Workspace {
    fn new(grid: TorusGrid) -> Self {
        let fft = FftNd::new(grid.n, grid.real_points);
        let total = fft.total();
        Workspace {
            fft,
            n: grid.n,
            len: grid.real_points,
            m: grid.m,
            buf: vec![C64::default(); total],
            full: false,
        }
    }

    fn coords(&self, idx: usize) -> [i64; 3] {
        let mut c = [0i64; 3];
        let mut r = idx;
        for a in (0..self.n).rev() {
            c[a] = signed_freq(r % self.len, self.len);
            r /= self.len;
        }
        c
    }

    fn in_band(&self, c: &[i64; 3]) -> bool {
        c[0] * c[0] + c[1] * c[1] + c[2] * c[2] <= (self.m * self.m) as i64
    }

    /// Synthesizes real fields from half-space coefficients on `range`.
    fn synth(&mut self, table: &ModeTable, range: Range<usize>, coeffs: &[Vec<C64>]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(coeffs.len());
        for pair in coeffs.chunks(2) {
            self.buf.iter_mut().for_each(|v| *v = C64::default());
            for (j, idx) in range.clone().enumerate() {
                let m = &table.ints[idx][..self.n];
                let neg = [-m[0], -m[1], if self.n == 3 { -m[2] } else { 0 }];
                let a = pair[0][j];
                let b = pair.get(1).map_or(C64::default(), |v| v[j]);
                self.buf[wrap_index(m, self.len)] += a + I * b;
                self.buf[wrap_index(&neg[..self.n], self.len)] += a.conj() + I * b.conj();
            }
            self.fft.process(&mut self.buf, true);
            out.push(self.buf.iter().map(|c| c.re).collect());
            if pair.len() == 2 {
                out.push(self.buf.iter().map(|c| c.im).collect());
            }
        }
        out
    }

    /// Forward transform of `a + i b`, normalized, with modes `|m| > M` removed.
    fn band_spectrum(&mut self, a: &[f64], b: Option<&[f64]>) -> Vec<C64> {
        self.spectrum(a, b, true)
    }

    fn spectrum(&mut self, a: &[f64], b: Option<&[f64]>, mask: bool) -> Vec<C64> {
        for (x, v) in self.buf.iter_mut().enumerate() {
            *v = C64::new(a[x], b.map_or(0.0, |b| b[x]));
        }
        self.fft.process(&mut self.buf, false);
        let scale = 1.0 / self.buf.len() as f64;
        let mut z = std::mem::take(&mut self.buf);
        for (idx, v) in z.iter_mut().enumerate() {
            let c = self.coords(idx);
            *v = if !mask || self.in_band(&c) { *v * scale } else { C64::default() };
        }
        self.buf = vec![C64::default(); z.len()];
        z
    }

    /// Inverse transform of `z · (i k_l)^{order}`, split into real and imaginary parts.
    fn from_spectrum(&mut self, z: &[C64], deriv: Option<usize>) -> (Vec<f64>, Vec<f64>) {
        let m = self.m as f64;
        for (idx, v) in self.buf.iter_mut().enumerate() {
            *v = match deriv {
                None => z[idx],
                Some(l) => {
                    let mut r = idx;
                    let mut c = 0i64;
                    for a in (0..self.n).rev() {
                        if a == l {
                            c = signed_freq(r % self.len, self.len);
                        }
                        r /= self.len;
                    }
                    z[idx] * I * (c as f64 / m)
                }
            };
        }
        self.fft.process(&mut self.buf, true);
        (self.buf.iter().map(|c| c.re).collect(), self.buf.iter().map(|c| c.im).collect())
    }

    /// Replaces each field by its band projection.
    fn project(&mut self, fields: &mut [Vec<f64>]) {
        let mut k = 0;
        while k < fields.len() {
            let two = k + 1 < fields.len();
            let z = if two {
                self.band_spectrum(&fields[k], Some(&fields[k + 1]))
            } else {
                self.band_spectrum(&fields[k], None)
            };
            let (re, im) = self.from_spectrum(&z, None);
            fields[k] = re;
            if two {
                fields[k + 1] = im;
            }
            k += 2;
        }
    }

    /// `∂_l` of every field for every `l`, at `[field][l]`.
    fn gradients(&mut self, fields: &[Vec<f64>]) -> Vec<Vec<Vec<f64>>> {
        let n = self.n;
        let mut out: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(n); fields.len()];
        let mut k = 0;
        while k < fields.len() {
            let two = k + 1 < fields.len();
            let z = self.spectrum(&fields[k], if two { Some(&fields[k + 1]) } else { None }, !self.full);
            for l in 0..n {
                let (re, im) = self.from_spectrum(&z, Some(l));
                out[k].push(re);
                if two {
                    out[k + 1].push(im);
                }
            }
            k += 2;
        }
        out
    }
}

/// Residuum `f̃^i_j = a_{jl}(δ_il + ∂_lφ̃^i) − λ δ_ij − ∂_mσ̃^{i,jm}` on the grid.
#[derive(Clone, Debug)]
pub struct Residuum {
    /// `f̃^i_j` at `i·n + j`.
    pub f: Vec<Vec<f64>>,
    pub lambda: f64,
    /// Spatial mean of `|f̃|²` after band projection.
    pub f2: f64,
    /// Spatial mean of `|f̃|²` of the pointwise field.
    pub f2_raw: f64,
    pub mean: Vec<f64>,
}

/// Evaluates the residuum with `λ = state.lambda_lattice`.
pub fn residuum_from_definition(state: &LadderState) -> Residuum {
    let mut ws = Workspace::new(state.grid);
    residuum_with(&mut ws, state, state.lambda_lattice)
}

/// As [`residuum_from_definition`] with an explicit `λ`.
pub fn residuum_with_lambda(state: &LadderState, lambda: f64) -> Residuum {
    let mut ws = Workspace::new(state.grid);
    residuum_with(&mut ws, state, lambda)
}

fn residuum_with(ws: &mut Workspace, state: &LadderState, lambda: f64) -> Residuum {
    let n = state.grid.n;
    let np = state.grid.total_points();
    let dphi = ws.gradients(&state.phi);
    let dsig = ws.gradients(&state.sigma);
    let p = state.psi.len();
    let mut f = vec![vec![0.0; np]; n * n];
    for x in 0..np {
        for i in 0..n {
            for j in 0..n {
                let mut v = if i == j { 1.0 - lambda } else { 0.0 };
                v += dphi[i][j][x] + state.psi_at(i, j, x);
                for l in 0..n {
                    v += state.psi_at(l, j, x) * dphi[i][l][x];
                }
                for m in 0..n {
                    if let Some((q, s)) = pair_index(n, j, m) {
                        v -= s * dsig[i * p + q][m][x];
                    }
                }
                f[i * n + j][x] = v;
            }
        }
    }
    let f2_raw = (0..np).map(|x| f.iter().map(|c| c[x] * c[x]).sum::<f64>()).sum::<f64>() / np as f64;
    let mut f2 = 0.0;
    let mut means = Vec::with_capacity(n * n);
    let mut k = 0;
    while k < f.len() {
        let two = k + 1 < f.len();
        let z = ws.band_spectrum(&f[k], if two { Some(&f[k + 1]) } else { None });
        f2 += z.iter().map(|c| c.norm_sqr()).sum::<f64>();
        means.push(z[0].re);
        if two {
            means.push(z[0].im);
        }
        k += 2;
    }
    Residuum {
        f,
        lambda,
        f2,
        f2_raw,
        mean: means,
    }
}

/// Options for [`run_ladder`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderOptions {
    pub weight: WeightRule,
    /// Levels at which the residuum is evaluated; `None` means every level.
    pub residuum_levels: Option<Vec<usize>>,
    /// Skip the band projection of `φ̃` and `σ̃` after each level (products
    /// then alias unless the real grid is oversampled).
    #[serde(default)]
    pub no_projection: bool,
}

fn level_stats(state: &LadderState, qv: f64) -> LevelStats {
    let np = state.grid.total_points() as f64;
    let mut phi2 = 0.0;
    let mut phi4 = 0.0;
    for x in 0..state.phi[0].len() {
        let s: f64 = state.phi.iter().map(|c| c[x] * c[x]).sum();
        phi2 += s;
        phi4 += s * s;
    }
    let sigma2 = 2.0 * state.sigma.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>()).sum::<f64>();
    LevelStats {
        level: state.level,
        l: state.l,
        lambda_tilde: state.lambda_tilde,
        lambda_lattice: state.lambda_lattice,
        tau: state.tau,
        phi2: phi2 / np,
        phi4: phi4 / np,
        sigma2: sigma2 / np,
        f2: None,
        f2_raw: None,
        f_mean: None,
        qv,
        grad_phi_mean: 0.0,
    }
}

/// Drift coefficients of one shell.
pub struct ShellDraw {
    pub shell: usize,
    pub range: Range<usize>,
    pub weight: LambdaWeight,
    /// `n` coefficients per mode.
    pub db: Vec<C64>,
}

pub fn draw_shell<R: Rng + ?Sized>(
    spec: &Spectrum,
    ladder: &ScaleLadder,
    opts: &LadderOptions,
    j: usize,
    rng: &mut R,
) -> ShellDraw {
    let (lo, hi) = ladder.shell(j);
    let range = spec.band(lo, hi);
    ShellDraw {
        shell: j,
        weight: opts.weight.for_shell(ladder, j),
        db: sample_band(spec, ladder.epsilon, range.clone(), rng),
        range,
    }
}

/// Coefficients of `Δφ` (n), `∇Δφ` (n², `∂_lΔφ^i` at `i·n + l`), `ΔΨ` (p),
/// and `Δσ` (n·p), in that order.
fn shell_coefficients(spec: &Spectrum, draw: &ShellDraw) -> Vec<Vec<C64>> {
    let n = spec.grid.n;
    let pairs = skew_pairs(n);
    let p = pairs.len();
    let nm = draw.range.len();
    let nf = n + n * n + p + n * p;
    let mut coeffs = vec![vec![C64::default(); nm]; nf];
    let mut h = [C64::default(); 3];
    let mut psi_full = [C64::default(); 9];
    for (jj, idx) in draw.range.clone().enumerate() {
        let k = spec.modes.k[idx];
        let ka = spec.modes.kabs[idx];
        let k2 = ka * ka;
        let w = draw.weight.at(ka);
        let b = &draw.db[jj * n..(jj + 1) * n];
        for i in 0..n {
            let dphi = b[i] / (w * k2);
            coeffs[i][jj] = dphi;
            for l in 0..n {
                coeffs[n + i * n + l][jj] = I * k[l] * dphi;
            }
        }
        for a in 0..n {
            for bb in 0..n {
                psi_full[a * n + bb] = I / k2 * (b[bb] * k[a] - b[a] * k[bb]);
            }
        }
        for (q, &(l, m)) in pairs.iter().enumerate() {
            coeffs[n + n * n + q][jj] = psi_full[l * n + m];
        }
        for i in 0..n {
            let dphi = coeffs[i][jj];
            for m in 0..n {
                h[m] = psi_full[i * n + m] + I * k[m] * dphi * w;
            }
            for (q, &(l, m)) in pairs.iter().enumerate() {
                coeffs[n + n * n + p + i * p + q][jj] = I / k2 * (h[m] * k[l] - h[l] * k[m]);
            }
        }
    }
    coeffs
}

/// Applies one shell to `state`; returns the spatial sum of `|∇Δφ|²`.
fn advance(
    ws: &mut Workspace,
    spec: &Spectrum,
    ladder: &ScaleLadder,
    opts: &LadderOptions,
    state: &mut LadderState,
    draw: &ShellDraw,
) -> Result<f64> {
    let n = spec.grid.n;
    let p = n * (n - 1) / 2;
    let np = spec.grid.total_points();
    let j = draw.shell;
    let coeffs = shell_coefficients(spec, draw);
    let real = ws.synth(&spec.modes, draw.range.clone(), &coeffs);
    let mom = shell_moments(spec, ladder.epsilon, draw.range.clone(), draw.weight);
    let (dphi, rest) = real.split_at(n);
    let (grad, rest) = rest.split_at(n * n);
    let (dpsi, dsig) = rest.split_at(p);
    let mut new_phi = vec![vec![0.0; np]; n];
    let mut new_sig = vec![vec![0.0; np]; n * p];
    let mut qv_sum = 0.0;
    for x in 0..np {
        let mut ph = [0.0; 3];
        for i in 0..n {
            ph[i] = state.phi[i][x];
        }
        for i in 0..n {
            let mut v = ph[i] + dphi[i][x];
            for jx in 0..n {
                v += ph[jx] * grad[i * n + jx][x];
                qv_sum += grad[i * n + jx][x] * grad[i * n + jx][x];
            }
            new_phi[i][x] = v;
            for q in 0..p {
                let mut s = state.sigma[i * p + q][x] + dsig[i * p + q][x] - ph[i] * dpsi[q][x];
                for jx in 0..n {
                    s += grad[i * n + jx][x] * state.sigma[jx * p + q][x];
                    s -= ph[jx] * mom.t[(jx * n + i) * p + q];
                }
                new_sig[i * p + q][x] = s;
            }
        }
    }
    if !opts.no_projection {
        ws.project(&mut new_phi);
        ws.project(&mut new_sig);
    }
    for q in 0..p {
        for x in 0..np {
            state.psi[q][x] += dpsi[q][x];
        }
    }
    let worst = new_phi
        .iter()
        .chain(new_sig.iter())
        .flat_map(|c| c.iter())
        .fold(0.0_f64, |a, v| if v.is_finite() { a.max(v.abs()) } else { f64::INFINITY });
    if worst > OVERFLOW {
        return Err(Error::Integration(format!(
            "field norm {worst:.3e} exceeds {OVERFLOW:.0e} at level {}",
            j + 1
        )));
    }
    state.phi = new_phi;
    state.sigma = new_sig;
    state.level = j + 1;
    state.l = ladder.levels[j + 1];
    state.lambda_tilde = ladder.lambdas[j + 1];
    state.tau = ladder.taus[j + 1];
    state.lambda_lattice += mom.dlambda;
    Ok(qv_sum)
}

/// Runs one realization through every shell of `ladder`, calling `observe`
/// after each level (including level 0) and returning the per-level stats.
pub fn run_ladder<R: Rng + ?Sized>(
    spec: &Spectrum,
    ladder: &ScaleLadder,
    opts: &LadderOptions,
    rng: &mut R,
    mut observe: impl FnMut(&LadderState, &LevelStats),
) -> Result<Vec<LevelStats>> {
    let grid = spec.grid;
    let n = grid.n;
    for j in 0..ladder.num_shells() {
        let (lo, hi) = ladder.shell(j);
        if spec.band(lo, hi).is_empty() {
            return Err(Error::EmptyShell { lo, hi });
        }
    }
    let mut ws = Workspace::new(grid);
    ws.full = opts.no_projection;
    let mut state = LadderState::initial(grid, ladder);
    let wants = |lv: usize| opts.residuum_levels.as_ref().is_none_or(|v| v.contains(&lv));
    let mut qv = 0.0;
    let mut out = Vec::with_capacity(ladder.levels.len());
    let mut s0 = level_stats(&state, 0.0);
    if wants(0) {
        s0.f2 = Some(0.0);
        s0.f2_raw = Some(0.0);
        s0.f_mean = Some(vec![0.0; n * n]);
    }
    observe(&state, &s0);
    out.push(s0);
    let np = grid.total_points();
    for j in 0..ladder.num_shells() {
        let draw = draw_shell(spec, ladder, opts, j, rng);
        let qv_sum = advance(&mut ws, spec, ladder, opts, &mut state, &draw)?;
        qv += qv_sum / (np as f64 * n as f64);
        let mut st = level_stats(&state, qv);
        if wants(j + 1) {
            let r = residuum_with(&mut ws, &state, state.lambda_lattice);
            st.f2 = Some(r.f2);
            st.f2_raw = Some(r.f2_raw);
            st.f_mean = Some(r.mean);
        }
        let g: Vec<Vec<Vec<f64>>> = ws.gradients(&state.phi);
        st.grad_phi_mean = g
            .iter()
            .flat_map(|d| d.iter())
            .map(|c| mean(c).abs())
            .fold(0.0, f64::max);
        observe(&state, &st);
        out.push(st);
    }
    Ok(out)
}

/// Spatial means of the band-projected `|Δf̃|²` from the definition, of the SDE increment
/// `f̃∇Δφ^i + (φ̃^j a + σ̃^j)∇∂_jΔφ^i + φ̃^i Δb`, and of their difference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub level: usize,
    pub def2: f64,
    pub sde2: f64,
    pub err2: f64,
}

pub fn residuum_consistency<R: Rng + ?Sized>(
    spec: &Spectrum,
    ladder: &ScaleLadder,
    opts: &LadderOptions,
    rng: &mut R,
) -> Result<Vec<ConsistencyRow>> {
    let grid = spec.grid;
    let n = grid.n;
    let np = grid.total_points();
    let mut ws = Workspace::new(grid);
    ws.full = opts.no_projection;
    let mut state = LadderState::initial(grid, ladder);
    let mut rows = Vec::new();
    for j in 0..ladder.num_shells() {
        let f_old = residuum_with(&mut ws, &state, state.lambda_lattice).f;
        let draw = draw_shell(spec, ladder, opts, j, rng);
        // Δb (n), ∇Δφ (n²), ∂_l∂_jΔφ^i at n + n² + (i·n + j)·n + l
        let nm = draw.range.len();
        let mut coeffs = vec![vec![C64::default(); nm]; n + n * n + n * n * n];
        for (jj, idx) in draw.range.clone().enumerate() {
            let k = spec.modes.k[idx];
            let ka = spec.modes.kabs[idx];
            for i in 0..n {
                let b = draw.db[jj * n + i];
                coeffs[i][jj] = b;
                let dphi = b / (draw.weight.at(ka) * ka * ka);
                for a in 0..n {
                    coeffs[n + i * n + a][jj] = I * k[a] * dphi;
                    for l in 0..n {
                        coeffs[n + n * n + (i * n + a) * n + l][jj] = -dphi * k[a] * k[l];
                    }
                }
            }
        }
        let real = ws.synth(&spec.modes, draw.range.clone(), &coeffs);
        let mut sde = vec![vec![0.0; np]; n * n];
        for x in 0..np {
            for i in 0..n {
                for m in 0..n {
                    let mut v = state.phi[i][x] * real[m][x];
                    for l in 0..n {
                        v += f_old[l * n + m][x] * real[n + i * n + l][x];
                    }
                    for jx in 0..n {
                        for l in 0..n {
                            let a_ml = if m == l { 1.0 } else { 0.0 } + state.psi_at(l, m, x);
                            let c = state.phi[jx][x] * a_ml + state.sigma_at(jx, l, m, x);
                            v += c * real[n + n * n + (i * n + jx) * n + l][x];
                        }
                    }
                    sde[i * n + m][x] = v;
                }
            }
        }
        advance(&mut ws, spec, ladder, opts, &mut state, &draw)?;
        let f_new = residuum_with(&mut ws, &state, state.lambda_lattice).f;
        let mut def: Vec<Vec<f64>> = f_new
            .iter()
            .zip(&f_old)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u - v).collect())
            .collect();
        ws.project(&mut def);
        ws.project(&mut sde);
        let (mut d2, mut s2, mut e2) = (0.0, 0.0, 0.0);
        for c in 0..n * n {
            for x in 0..np {
                let d = def[c][x];
                d2 += d * d;
                s2 += sde[c][x] * sde[c][x];
                e2 += (d - sde[c][x]).powi(2);
            }
        }
        let s = 1.0 / np as f64;
        rows.push(ConsistencyRow {
            level: j + 1,
            def2: d2 * s,
            sde2: s2 * s,
            err2: e2 * s,
        });
    }
    Ok(rows)
}

/// Ensemble summary at one ladder level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: usize,
    pub l: f64,
    pub lambda_tilde: f64,
    pub lambda_lattice: f64,
    pub tau: f64,
    pub phi2: MomentEstimate,
    pub phi4: MomentEstimate,
    pub sigma2: MomentEstimate,
    pub f2: Option<MomentEstimate>,
    pub f2_raw: Option<MomentEstimate>,
    pub f_mean: Option<Vec<MomentEstimate>>,
    pub qv: MomentEstimate,
}

impl LevelSummary {
    /// `λ̃ (E|φ̃|⁴)^{1/4} / (εL)`.
    pub fn c_phi(&self, epsilon: f64) -> f64 {
        self.lambda_tilde * self.phi4.value.powf(0.25) / (epsilon * self.l)
    }

    /// `(E|σ̃|²)^{1/2} / (εL)`.
    pub fn c_sigma(&self, epsilon: f64) -> f64 {
        self.sigma2.value.sqrt() / (epsilon * self.l)
    }

    /// `E|f̃|² / (ε² λ̃)`.
    pub fn c_f(&self, epsilon: f64) -> Option<f64> {
        self.f2.as_ref().map(|f| f.value / (epsilon * epsilon * self.lambda_tilde))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderEnsemble {
    pub epsilon: f64,
    pub n_real: usize,
    pub levels: Vec<LevelSummary>,
}

/// Runs `n_real ≥ 2` independent realizations (stream `r` of the ladder domain).
pub fn ladder_ensemble(
    spec: &Spectrum,
    ladder: &ScaleLadder,
    opts: &LadderOptions,
    n_real: usize,
    seed: u64,
) -> Result<LadderEnsemble> {
    ensure(n_real >= 2, "n_real", "need at least 2 realizations")?;
    let runs: Vec<Vec<LevelStats>> = (0..n_real)
        .into_par_iter()
        .map(|r| {
            let mut g = rng::stream(seed, domain::LADDER, r as u64);
            run_ladder(spec, ladder, opts, &mut g, |_, _| {})
        })
        .collect::<Result<_>>()?;
    let n = spec.grid.n;
    let mut levels = Vec::new();
    for lv in 0..ladder.levels.len() {
        let col = |f: &dyn Fn(&LevelStats) -> f64| -> Vec<f64> { runs.iter().map(|r| f(&r[lv])).collect() };
        let s0 = &runs[0][lv];
        let f2 = if s0.f2.is_some() {
            Some(mean_ci(&col(&|s| s.f2.unwrap()))?)
        } else {
            None
        };
        let f2_raw = if s0.f2_raw.is_some() {
            Some(mean_ci(&col(&|s| s.f2_raw.unwrap()))?)
        } else {
            None
        };
        let f_mean = if s0.f_mean.is_some() {
            Some(
                (0..n * n)
                    .map(|c| mean_ci(&col(&|s| s.f_mean.as_ref().unwrap()[c])))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        levels.push(LevelSummary {
            level: lv,
            l: s0.l,
            lambda_tilde: s0.lambda_tilde,
            lambda_lattice: s0.lambda_lattice,
            tau: s0.tau,
            phi2: mean_ci(&col(&|s| s.phi2))?,
            phi4: mean_ci(&col(&|s| s.phi4))?,
            sigma2: mean_ci(&col(&|s| s.sigma2))?,
            f2,
            f2_raw,
            f_mean,
            qv: mean_ci(&col(&|s| s.qv))?,
        });
    }
    Ok(LadderEnsemble {
        epsilon: ladder.epsilon,
        n_real,
        levels,
    })
}

/// `e^{i k·x}` for every mode of `spec` at each point.
pub struct PointPhases {
    pub points: Vec<[f64; 3]>,
    phases: Vec<Vec<C64>>,
}

impl PointPhases {
    pub fn new(spec: &Spectrum, points: &[[f64; 3]]) -> Self {
        let n = spec.grid.n;
        let phases = points
            .iter()
            .map(|x| {
                spec.modes
                    .k
                    .iter()
                    .map(|k| C64::from_polar(1.0, (0..n).map(|d| k[d] * x[d]).sum()))
                    .collect()
            })
            .collect();
        PointPhases {
            points: points.to_vec(),
            phases,
        }
    }
}

/// `∇Δφ` of every shell at every point, `[point][shell]`, each `n×n` row-major
/// (`∂_l Δφ^i` at `i·n + l`).
pub fn point_gradient_increments<R: Rng + ?Sized>(
    spec: &Spectrum,
    ladder: &ScaleLadder,
    rule: WeightRule,
    phases: &PointPhases,
    rng: &mut R,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let n = spec.grid.n;
    let np = phases.points.len();
    let mut out = vec![Vec::with_capacity(ladder.num_shells()); np];
    for j in 0..ladder.num_shells() {
        let (lo, hi) = ladder.shell(j);
        let range = spec.band(lo, hi);
        if range.is_empty() {
            return Err(Error::EmptyShell { lo, hi });
        }
        let weight = rule.for_shell(ladder, j);
        let c = sample_band(spec, ladder.epsilon, range.clone(), rng);
        for (pt, ph) in phases.phases.iter().enumerate() {
            let mut g = vec![0.0; n * n];
            for (jj, idx) in range.clone().enumerate() {
                let k = spec.modes.k[idx];
                let ka = spec.modes.kabs[idx];
                let e = ph[idx] * (2.0 / (weight.at(ka) * ka * ka));
                for i in 0..n {
                    let ce = c[jj * n + i] * e;
                    for l in 0..n {
                        // Re(i k_l c e) = −k_l Im(c e)
                        g[i * n + l] -= k[l] * ce.im;
                    }
                }
            }
            out[pt].push(g);
        }
    }
    Ok(out)
}

fn random_points(spec: &Spectrum, count: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut g = rng::stream(seed, domain::QV, u64::MAX);
    let per = spec.grid.period();
    (0..count)
        .map(|_| {
            let mut x = [0.0; 3];
            for v in x.iter_mut().take(spec.grid.n) {
                *v = g.random::<f64>() * per;
            }
            x
        })
        .collect()
}

/// Accumulated quadratic variations over the full ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QvReport {
    pub n: usize,
    pub tau: f64,
    /// Expected accumulated `tr QV / n` for the lattice ensemble.
    pub tau_lattice: f64,
    pub n_real: usize,
    pub n_points: usize,
    /// `Σ∇Δφ(∇Δφ)*`, row-major `n×n`.
    pub qv: Vec<MomentEstimate>,
    /// `Σ∇Δφ∇Δφ`, row-major `n×n`.
    pub anti: Vec<MomentEstimate>,
    pub trace_over_n: MomentEstimate,
}

impl QvReport {
    /// Largest `|QV_ij − τδ_ij| / τ`.
    pub fn max_rel_error(&self) -> f64 {
        let n = self.n;
        (0..n * n)
            .map(|c| {
                let t = if c / n == c % n { self.tau } else { 0.0 };
                (self.qv[c].value - t).abs() / self.tau
            })
            .fold(0.0, f64::max)
    }

    /// Largest `|Σ∇Δφ∇Δφ|_ij / τ`.
    pub fn max_anti(&self) -> f64 {
        self.anti.iter().map(|e| e.value.abs() / self.tau).fold(0.0, f64::max)
    }
}

/// Point-sampled quadratic variations, averaged over `n_points` uniform
/// points and `n_real ≥ 100` realizations.
pub fn qv_accumulator(
    spec: &Spectrum,
    ladder: &ScaleLadder,
    rule: WeightRule,
    n_real: usize,
    n_points: usize,
    seed: u64,
) -> Result<QvReport> {
    ensure(n_real >= 100, "n_real", "need at least 100 realizations")?;
    ensure(n_points >= 1, "n_points", "need at least one point")?;
    let n = spec.grid.n;
    let phases = PointPhases::new(spec, &random_points(spec, n_points, seed));
    let per_real: Vec<(Vec<f64>, Vec<f64>)> = (0..n_real)
        .into_par_iter()
        .map(|r| {
            let mut g = rng::stream(seed, domain::QV, r as u64);
            let incs = point_gradient_increments(spec, ladder, rule, &phases, &mut g)?;
            let mut qv = vec![0.0; n * n];
            let mut anti = vec![0.0; n * n];
            for shells in &incs {
                for gm in shells {
                    for i in 0..n {
                        for j in 0..n {
                            for l in 0..n {
                                qv[i * n + j] += gm[i * n + l] * gm[j * n + l];
                                anti[i * n + j] += gm[i * n + l] * gm[l * n + j];
                            }
                        }
                    }
                }
            }
            let s = 1.0 / n_points as f64;
            qv.iter_mut().chain(anti.iter_mut()).for_each(|v| *v *= s);
            Ok((qv, anti))
        })
        .collect::<Result<_>>()?;
    let entry = |f: &dyn Fn(&(Vec<f64>, Vec<f64>)) -> f64| mean_ci(&per_real.iter().map(f).collect::<Vec<_>>());
    let qv = (0..n * n).map(|c| entry(&|r| r.0[c])).collect::<Result<Vec<_>>>()?;
    let anti = (0..n * n).map(|c| entry(&|r| r.1[c])).collect::<Result<Vec<_>>>()?;
    let trace_over_n = entry(&|r| (0..n).map(|i| r.0[i * n + i]).sum::<f64>() / n as f64)?;
    let mut tau_lattice = 0.0;
    for j in 0..ladder.num_shells() {
        let (lo, hi) = ladder.shell(j);
        tau_lattice += shell_moments(spec, ladder.epsilon, spec.band(lo, hi), rule.for_shell(ladder, j)).dqv;
    }
    Ok(QvReport {
        n,
        tau: ladder.tau_max(),
        tau_lattice,
        n_real,
        n_points,
        qv,
        anti,
        trace_over_n,
    })
}

/// `B(x)` paths built from the gradient increments at each point.
#[derive(Clone, Debug)]
pub struct CoupledB {
    pub n: usize,
    pub points: Vec<[f64; 3]>,
    pub taus: Vec<f64>,
    /// `[realization][point][level]`, each `n×n` row-major; level 0 is zero.
    pub paths: Vec<Vec<Vec<Vec<f64>>>>,
}

impl CoupledB {
    /// `B(x_point)` at the last level for every realization.
    pub fn terminal(&self, point: usize) -> Vec<Vec<f64>> {
        self.paths.iter().map(|r| r[point].last().unwrap().clone()).collect()
    }
}

/// `B(x)_τ = Σ_shells ∇Δφ(x)` at the given points for `n_real` realizations.
pub fn coupled_b_at_points(
    spec: &Spectrum,
    ladder: &ScaleLadder,
    rule: WeightRule,
    points: &[[f64; 3]],
    n_real: usize,
    seed: u64,
) -> Result<CoupledB> {
    ensure(!points.is_empty(), "points", "need at least one point")?;
    ensure(n_real >= 2, "n_real", "need at least 2 realizations")?;
    if ladder.max_dtau() > 0.02 {
        return Err(param("ladder", "tau step must not exceed 0.02"));
    }
    let n = spec.grid.n;
    let phases = PointPhases::new(spec, points);
    let paths = (0..n_real)
        .into_par_iter()
        .map(|r| {
            let mut g = rng::stream(seed, domain::COUPLED, r as u64);
            let incs = point_gradient_increments(spec, ladder, rule, &phases, &mut g)?;
            Ok(incs
                .into_iter()
                .map(|shells| {
                    let mut acc = vec![0.0; n * n];
                    let mut path = vec![acc.clone()];
                    for gm in shells {
                        acc.iter_mut().zip(&gm).for_each(|(a, v)| *a += v);
                        path.push(acc.clone());
                    }
                    path
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CoupledB {
        n,
        points: points.to_vec(),
        taus: ladder.taus.clone(),
        paths,
    })
}

/// One entry `E[B_a B_b]` of the second-moment tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeEntry {
    pub a: usize,
    pub b: usize,
    pub field: MomentEstimate,
    pub sampler: MomentEstimate,
    /// Joint (Bonferroni) half-width for the difference.
    pub joint_half_width: f64,
    pub agrees: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeReport {
    pub alpha: f64,
    pub z: f64,
    pub entries: Vec<BridgeEntry>,
}

impl BridgeReport {
    pub fn all_agree(&self) -> bool {
        self.entries.iter().all(|e| e.agrees)
    }
}

/// Compares `E[X_a X_b]` (`a ≤ b`) between two sample sets with family-wise
/// level `alpha`.
pub fn bridge_comparison(field: &[Vec<f64>], sampler: &[Vec<f64>], alpha: f64) -> Result<BridgeReport> {
    ensure(!field.is_empty() && !sampler.is_empty(), "samples", "empty sample set")?;
    ensure(alpha > 0.0 && alpha < 1.0, "alpha", "must lie in (0, 1)")?;
    let d = field[0].len();
    let count = d * (d + 1) / 2;
    let z = Normal::new(0.0, 1.0)
        .map_err(|e| param("alpha", e.to_string()))?
        .inverse_cdf(1.0 - alpha / (2.0 * count as f64));
    let mut entries = Vec::with_capacity(count);
    for a in 0..d {
        for b in a..d {
            let fx: Vec<f64> = field.iter().map(|v| v[a] * v[b]).collect();
            let sx: Vec<f64> = sampler.iter().map(|v| v[a] * v[b]).collect();
            let fe = mean_ci(&fx)?;
            let se = mean_ci(&sx)?;
            let hw = z * (fe.std_err().powi(2) + se.std_err().powi(2)).sqrt();
            entries.push(BridgeEntry {
                a,
                b,
                agrees: (fe.value - se.value).abs() <= hw,
                field: fe,
                sampler: se,
                joint_half_width: hw,
            });
        }
    }
    Ok(BridgeReport { alpha, z, entries })
}

/// `E tr B(x)B(y)* / E tr B(x)B(x)*` at the last level.
pub fn cross_correlation(b: &CoupledB, x: usize, y: usize) -> Result<MomentEstimate> {
    let bx = b.terminal(x);
    let by = b.terminal(y);
    let num: Vec<f64> = bx.iter().zip(&by).map(|(u, v)| u.iter().zip(v).map(|(p, q)| p * q).sum()).collect();
    let den: Vec<f64> = bx.iter().map(|u| u.iter().map(|p| p * p).sum()).collect();
    ratio_ci(&num, &den)
}

/// Ensemble value of `E[B(0):B(y)] / E[B(0):B(0)]` on the lattice, summed
/// mode by mode over the ladder's shells.
pub fn lattice_cross_correlation(spec: &Spectrum, ladder: &ScaleLadder, rule: WeightRule, y: &[f64]) -> Result<f64> {
    let n = spec.grid.n;
    ensure(y.len() >= n, "y", "needs one coordinate per dimension")?;
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..ladder.num_shells() {
        let (lo, hi) = ladder.shell(j);
        let weight = rule.for_shell(ladder, j);
        for idx in spec.band(lo, hi) {
            let ka = spec.modes.kabs[idx];
            let a = spec.amplitude(idx, ladder.epsilon) / (weight.at(ka) * ka);
            let k = spec.modes.k[idx];
            let phase: f64 = (0..n).map(|d| k[d] * y[d]).sum();
            num += a * a * phase.cos();
            den += a * a;
        }
    }
    ensure(den > 0.0, "ladder", "no modes in any shell")?;
    Ok(num / den)
}

/// `max(τ − ln r, 0)/τ` with `r = λ(d²)`.
pub fn predicted_cross_fraction(epsilon: f64, tau: f64, distance: f64) -> Result<f64> {
    let r = lambda_of_time(distance * distance, epsilon)?;
    Ok(if tau > 0.0 { ((tau - r.ln()) / tau).max(0.0) } else { 0.0 })
}

/// Predicted mean-square displacement `2nλ(T)T`.
pub fn msd_prediction(t: f64, epsilon: f64, n: usize) -> Result<f64> {
    Ok(2.0 * n as f64 * lambda_of_time(t, epsilon)? * t)
}
