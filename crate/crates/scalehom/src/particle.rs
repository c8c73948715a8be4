//! Tracer paths `dX = b(X)dt + √2 dW` in frozen drift realizations.

use std::fmt::Write as _;

use num_complex::Complex64 as C64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, param, Error, Result};
use crate::fft::{signed_freq, FftNd};
use crate::homogenize::msd_prediction;
use crate::rng::{self, domain};
use crate::scale_ladder::lambda_of_time;
use crate::spectral_field::{sample_band_field, synthesize_realspace, Rank, SpectralShellField, Spectrum, TorusGrid};
use crate::stats::{batch_means_ci, MomentEstimate};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterpOrder {
    TrigExact,
    Bicubic,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldMeta {
    pub epsilon: f64,
    pub l: f64,
    pub seed: u64,
}

/// Off-grid evaluation of a periodic vector field.
#[derive(Clone, Debug)]
pub struct FieldInterpolant {
    pub grid: TorusGrid,
    pub order: InterpOrder,
    pub meta: FieldMeta,
    /// Largest sample magnitude `|b|`.
    pub sup_norm: f64,
    /// Tensor-product cubic B-spline coefficients, point-major with `n` components.
    coef: Vec<f64>,
    /// Nonzero Fourier coefficients `(k, ĉ)` over the full lattice.
    modes: Vec<([f64; 3], Vec<C64>)>,
    inv_h: f64,
}

fn bspline_weights(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    let t2 = t * t;
    let t3 = t2 * t;
    [
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

impl FieldInterpolant {
    /// Builds from real samples `comps[c][x]` on the `real_points^n` grid.
    pub fn from_samples(grid: TorusGrid, comps: &[Vec<f64>], order: InterpOrder, meta: FieldMeta) -> Result<Self> {
        let n = grid.n;
        let len = grid.real_points;
        let np = grid.total_points();
        ensure(comps.len() == n, "comps", "need one sample array per coordinate")?;
        ensure(comps.iter().all(|c| c.len() == np), "comps", "sample count does not match the grid")?;
        if order == InterpOrder::Bicubic && len < 4 * grid.m {
            return Err(param(
                "real_points",
                format!("bicubic interpolation needs at least 2x oversampling (real_points >= {})", 4 * grid.m),
            ));
        }
        let mut fft = FftNd::new(n, len);
        let symbol: Vec<f64> = (0..len)
            .map(|i| (4.0 + 2.0 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos()) / 6.0)
            .collect();
        let mut coef = vec![0.0; if order == InterpOrder::Bicubic { np * n } else { 0 }];
        let mut spectra = Vec::with_capacity(n);
        let mut buf = vec![C64::default(); np];
        for (c, samples) in comps.iter().enumerate() {
            for (b, &v) in buf.iter_mut().zip(samples) {
                *b = C64::new(v, 0.0);
            }
            fft.process(&mut buf, false);
            let scale = 1.0 / np as f64;
            buf.iter_mut().for_each(|v| *v *= scale);
            spectra.push(buf.clone());
            if order == InterpOrder::Bicubic {
                for (idx, v) in buf.iter_mut().enumerate() {
                    let mut s = 1.0;
                    let mut r = idx;
                    for _ in 0..n {
                        s *= symbol[r % len];
                        r /= len;
                    }
                    *v /= s;
                }
                fft.process(&mut buf, true);
                for (x, v) in buf.iter().enumerate() {
                    coef[x * n + c] = v.re;
                }
            }
        }
        let peak = spectra.iter().flat_map(|s| s.iter()).map(|v| v.norm()).fold(0.0, f64::max);
        let mut modes = Vec::new();
        if peak > 0.0 {
            for idx in 0..np {
                if spectra.iter().any(|s| s[idx].norm() > 1e-13 * peak) {
                    let mut k = [0.0; 3];
                    let mut r = idx;
                    for d in (0..n).rev() {
                        k[d] = signed_freq(r % len, len) as f64 / grid.m as f64;
                        r /= len;
                    }
                    modes.push((k, spectra.iter().map(|s| s[idx]).collect()));
                }
            }
        }
        let sup_norm = (0..np)
            .map(|x| comps.iter().map(|c| c[x] * c[x]).sum::<f64>())
            .fold(0.0, f64::max)
            .sqrt();
        Ok(FieldInterpolant {
            grid,
            order,
            meta,
            sup_norm,
            coef,
            modes,
            inv_h: 1.0 / grid.spacing(),
        })
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    /// `b(x)` written into `out[..n]`.
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self.order {
            InterpOrder::TrigExact => self.eval_trig(x, out),
            InterpOrder::Bicubic => self.eval_spline(x, out),
        }
    }

    pub fn eval_trig(&self, x: &[f64], out: &mut [f64]) {
        let n = self.grid.n;
        out[..n].iter_mut().for_each(|v| *v = 0.0);
        for (k, c) in &self.modes {
            let ph: f64 = (0..n).map(|d| k[d] * x[d]).sum();
            let e = C64::from_polar(1.0, ph);
            for d in 0..n {
                out[d] += (c[d] * e).re;
            }
        }
    }

    fn eval_spline(&self, x: &[f64], out: &mut [f64]) {
        let n = self.grid.n;
        let len = self.grid.real_points as i64;
        let mut base = [0i64; 3];
        let mut w = [[0.0; 4]; 3];
        for d in 0..n {
            let u = x[d] * self.inv_h;
            let f = u.floor();
            base[d] = f as i64 - 1;
            w[d] = bspline_weights(u - f);
        }
        let idx = |d: usize, a: usize| (base[d] + a as i64).rem_euclid(len) as usize;
        let len = len as usize;
        out[..n].iter_mut().for_each(|v| *v = 0.0);
        if n == 2 {
            for a in 0..4 {
                let row = idx(0, a) * len;
                for b in 0..4 {
                    let wt = w[0][a] * w[1][b];
                    let p = (row + idx(1, b)) * 2;
                    out[0] += wt * self.coef[p];
                    out[1] += wt * self.coef[p + 1];
                }
            }
        } else {
            for a in 0..4 {
                let ra = idx(0, a) * len;
                for b in 0..4 {
                    let rb = (ra + idx(1, b)) * len;
                    let wab = w[0][a] * w[1][b];
                    for c in 0..4 {
                        let wt = wab * w[2][c];
                        let p = (rb + idx(2, c)) * 3;
                        out[0] += wt * self.coef[p];
                        out[1] += wt * self.coef[p + 1];
                        out[2] += wt * self.coef[p + 2];
                    }
                }
            }
        }
    }

    /// Largest `|b_interp − b_trig|` relative to the sup norm over random points.
    pub fn probe_error<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> f64 {
        let n = self.grid.n;
        let period = self.grid.period();
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        let mut worst = 0.0_f64;
        for _ in 0..count {
            let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * period).collect();
            self.eval(&x, &mut a);
            self.eval_trig(&x, &mut b);
            for d in 0..n {
                worst = worst.max((a[d] - b[d]).abs());
            }
        }
        if self.sup_norm > 0.0 { worst / self.sup_norm } else { worst }
    }

    /// `RMS|b_interp − b_trig| / RMS|b_trig|` over random points.
    pub fn probe_rms_error<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> f64 {
        let n = self.grid.n;
        let period = self.grid.period();
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        let (mut e2, mut b2) = (0.0, 0.0);
        for _ in 0..count {
            let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * period).collect();
            self.eval(&x, &mut a);
            self.eval_trig(&x, &mut b);
            for d in 0..n {
                e2 += (a[d] - b[d]).powi(2);
                b2 += b[d] * b[d];
            }
        }
        if b2 > 0.0 { (e2 / b2).sqrt() } else { e2.sqrt() }
    }

    /// `RMS(∇·b) / RMS(|∇b|)` by central differences of [`Self::eval`].
    pub fn divergence_probe<R: Rng + ?Sized>(&self, count: usize, h: f64, rng: &mut R) -> f64 {
        let n = self.grid.n;
        let period = self.grid.period();
        let (mut div2, mut grad2) = (0.0, 0.0);
        let mut p = [0.0; 3];
        let mut m = [0.0; 3];
        for _ in 0..count {
            let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * period).collect();
            let mut div = 0.0;
            for l in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[l] += h;
                xm[l] -= h;
                self.eval(&xp, &mut p);
                self.eval(&xm, &mut m);
                for i in 0..n {
                    let g = (p[i] - m[i]) / (2.0 * h);
                    grad2 += g * g;
                    if i == l {
                        div += g;
                    }
                }
            }
            div2 += div * div;
        }
        if grad2 > 0.0 { (div2 / grad2).sqrt() } else { 0.0 }
    }
}

/// Synthesizes `field` (a vector field) and wraps it.
pub fn build_interpolant(field: &SpectralShellField, order: InterpOrder, meta: FieldMeta) -> Result<FieldInterpolant> {
    ensure(field.rank == Rank::Vector, "field", "interpolation needs a vector field")?;
    let real = synthesize_realspace(field, false)?;
    FieldInterpolant::from_samples(field.grid, &real.comps, order, meta)
}

/// Annealed displacement statistics at time `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathStats {
    pub t: f64,
    pub dt: f64,
    pub n_fields: usize,
    pub n_paths: usize,
    /// `E|X_t − X_0|²`.
    pub msd: MomentEstimate,
    /// `E (X_t − X_0)^i (X_t − X_0)^j` at `i·n + j`.
    pub second_moment: Vec<MomentEstimate>,
}

impl PathStats {
    /// Largest `|E X^iX^j − δ_ij E|X|²/n|` in units of the joint half-width.
    pub fn isotropy_z(&self) -> f64 {
        let n = (self.second_moment.len() as f64).sqrt() as usize;
        let iso = self.msd.value / n as f64;
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in 0..n {
                let e = &self.second_moment[i * n + j];
                let target = if i == j { iso } else { 0.0 };
                let hw = e.half_width + if i == j { self.msd.half_width / n as f64 } else { 0.0 };
                if hw > 0.0 {
                    worst = worst.max((e.value - target).abs() / hw);
                }
            }
        }
        worst
    }
}

pub const MIN_BATCHES: usize = 16;

fn check_field(f: &FieldInterpolant, t: f64, dt: f64) -> Result<()> {
    let bound = 0.1 / (1.0 + f.sup_norm);
    if dt > bound {
        return Err(param("dt", format!("dt {dt} exceeds 0.1/(1+|b|_inf) = {bound:.4e}")));
    }
    let need = escape_period(t, f.meta.epsilon)?;
    if f.grid.period() < need {
        let m = (need / (2.0 * std::f64::consts::PI)).ceil();
        return Err(Error::Resource(format!(
            "torus period {:.1} below escape guard {need:.1}; increase M to at least {m}",
            f.grid.period()
        )));
    }
    Ok(())
}

/// Smallest admissible torus period `8√(λ(t)t)`.
pub fn escape_period(t: f64, epsilon: f64) -> Result<f64> {
    Ok(8.0 * (lambda_of_time(t, epsilon)? * t).sqrt())
}

/// Unwrapped displacements of paths `first..first + n_paths` in one field.
fn displacements(f: &FieldInterpolant, t: f64, dt: f64, n_paths: usize, first: usize, seed: u64) -> (f64, Vec<[f64; 3]>) {
    let n = f.grid.n;
    let steps = (t / dt).ceil() as usize;
    let h = t / steps as f64;
    let amp = (2.0 * h).sqrt();
    let period = f.grid.period();
    let out = (0..n_paths)
        .map(|p| {
            let mut g = rng::stream(seed, domain::PARTICLE_PATH, (first + p) as u64);
            let mut x = [0.0; 3];
            for v in x.iter_mut().take(n) {
                *v = g.random::<f64>() * period;
            }
            let mut disp = [0.0; 3];
            let mut b = [0.0; 3];
            for _ in 0..steps {
                f.eval(&x, &mut b);
                for d in 0..n {
                    let dx = b[d] * h + amp * rng::normal(&mut g);
                    disp[d] += dx;
                    x[d] = (x[d] + dx).rem_euclid(period);
                }
            }
            disp
        })
        .collect();
    (h, out)
}

fn path_stats(all: &[[f64; 3]], n: usize, t: f64, dt: f64, n_fields: usize, n_paths: usize) -> Result<PathStats> {
    let sq: Vec<f64> = all.iter().map(|d| d[..n].iter().map(|v| v * v).sum()).collect();
    let msd = batch_means_ci(&sq, MIN_BATCHES)?;
    let mut second = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let v: Vec<f64> = all.iter().map(|d| d[i] * d[j]).collect();
            second.push(batch_means_ci(&v, MIN_BATCHES)?);
        }
    }
    Ok(PathStats {
        t,
        dt,
        n_fields,
        n_paths,
        msd,
        second_moment: second,
    })
}

/// Euler–Maruyama over `n_paths` paths in each interpolant; uniform random starts.
///
/// Requires `dt ≤ 0.1/(1 + ‖b‖_∞)` and a period of at least `8√(λ(t)t)`.
pub fn simulate_paths(fields: &[FieldInterpolant], t: f64, dt: f64, n_paths: usize, seed: u64) -> Result<PathStats> {
    ensure(!fields.is_empty(), "fields", "need at least one field")?;
    ensure(t > 0.0 && t.is_finite(), "T", "must be positive")?;
    ensure(dt > 0.0, "dt", "must be positive")?;
    ensure(n_paths >= 1, "paths", "need at least one path")?;
    ensure(fields.len() * n_paths >= MIN_BATCHES, "paths", "need at least 16 samples in total")?;
    for f in fields {
        check_field(f, t, dt)?;
    }
    let per_field: Vec<(f64, Vec<[f64; 3]>)> = fields
        .par_iter()
        .enumerate()
        .map(|(fi, f)| displacements(f, t, dt, n_paths, fi * n_paths, seed))
        .collect();
    let h = per_field[0].0;
    let all: Vec<[f64; 3]> = per_field.into_iter().flat_map(|p| p.1).collect();
    path_stats(&all, fields[0].grid.n, t, h, fields.len(), n_paths)
}

/// Shear flow `b = (U cos(k x_1), 0, ..)` sampled on `grid`, with `k = m0/M`.
pub fn shear_field(grid: TorusGrid, amplitude: f64, m0: i32) -> Result<FieldInterpolant> {
    let n = grid.n;
    let len = grid.real_points;
    let k = m0 as f64 / grid.m as f64;
    let h = grid.spacing();
    let np = grid.total_points();
    let mut comps = vec![vec![0.0; np]; n];
    let stride = len.pow((n - 2) as u32);
    for (x, v) in comps[0].iter_mut().enumerate() {
        let i1 = (x / stride) % len;
        *v = amplitude * (k * h * i1 as f64).cos();
    }
    FieldInterpolant::from_samples(grid, &comps, InterpOrder::Bicubic, FieldMeta::default())
}

/// `E|X_t|²` for the shear flow of [`shear_field`] with a uniform start:
/// `2nt + U² ∫_0^t (t − s) e^{−k²s} ds`.
pub fn shear_msd(n: usize, t: f64, amplitude: f64, k: f64) -> Result<f64> {
    let k2 = k * k;
    let tail = crate::quadrature::integrate(|s| (t - s) * (-k2 * s).exp(), 0.0, t, 1e-12, 1e-12)?;
    Ok(2.0 * n as f64 * t + amplitude * amplitude * tail)
}

/// Configuration of the mean-square-displacement sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsdConfig {
    pub n: usize,
    pub epsilon: f64,
    pub t_list: Vec<f64>,
    /// Step size; `None` picks `0.1/(1 + ‖b‖_∞)` per field ensemble.
    pub dt: Option<f64>,
    pub paths: usize,
    pub fields: usize,
    /// Minimum Fourier cutoff; raised per `T` to meet the escape guard.
    pub grid_m: usize,
    /// Per-axis oversampling relative to `2M`.
    pub oversampling: usize,
    pub order: InterpOrder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsdRow {
    pub t: f64,
    pub l: f64,
    /// Fourier cutoff actually used.
    pub m: usize,
    /// Largest step over the field ensemble.
    pub dt: f64,
    pub msd: MomentEstimate,
    pub prediction: f64,
    pub ratio: f64,
    pub ratio_half_width: f64,
    /// `E|X_t|²/(2nt)`.
    pub diffusivity: f64,
    pub diffusivity_half_width: f64,
    pub lambda: f64,
    pub isotropy_z: f64,
}

/// Fourier cutoff used at time `t`: `grid_m`, raised to satisfy the escape guard.
pub fn grid_m_for(cfg: &MsdConfig, t: f64) -> Result<usize> {
    let need = escape_period(t, cfg.epsilon)? / (2.0 * std::f64::consts::PI);
    Ok(cfg.grid_m.max(need.ceil() as usize))
}

/// Runs one field ensemble per `T` with IR cutoff `L = √(1+T)`. Fields are
/// built one at a time, each with its own step `0.1/(1 + ‖b‖_∞)` unless `dt`
/// is fixed.
pub fn particle_msd(cfg: &MsdConfig, seed: u64) -> Result<Vec<MsdRow>> {
    ensure(!cfg.t_list.is_empty(), "t_list", "need at least one time")?;
    ensure(cfg.t_list.iter().all(|t| *t > 0.0 && t.is_finite()), "t_list", "times must be positive")?;
    ensure(cfg.fields >= 1, "fields", "need at least one field")?;
    ensure(cfg.paths >= 1, "paths", "need at least one path")?;
    ensure(cfg.fields * cfg.paths >= MIN_BATCHES, "paths", "need at least 16 paths in total")?;
    ensure(cfg.oversampling >= 1, "oversampling", "must be at least 1")?;
    let mut rows = Vec::new();
    for (ti, &t) in cfg.t_list.iter().enumerate() {
        let m = grid_m_for(cfg, t)?;
        let grid = TorusGrid::new(cfg.n, m, Some(2 * m * cfg.oversampling))?;
        let spec = Spectrum::new(grid);
        let l = (1.0 + t).sqrt();
        let path_seed: u64 = rng::stream(seed, domain::PARTICLE_PATH, u64::MAX - ti as u64).random();
        let per_field: Vec<(f64, Vec<[f64; 3]>)> = (0..cfg.fields)
            .into_par_iter()
            .map(|f| {
                let idx = (ti * cfg.fields + f) as u64;
                let mut g = rng::stream(seed, domain::PARTICLE_FIELD, idx);
                let b = sample_band_field(&spec, cfg.epsilon, 1.0, l, &mut g)?;
                let meta = FieldMeta {
                    epsilon: cfg.epsilon,
                    l,
                    seed,
                };
                let field = build_interpolant(&b, cfg.order, meta)?;
                let dt = cfg.dt.unwrap_or(0.1 / (1.0 + field.sup_norm));
                check_field(&field, t, dt)?;
                Ok(displacements(&field, t, dt, cfg.paths, f * cfg.paths, path_seed))
            })
            .collect::<Result<_>>()?;
        let dt = per_field.iter().map(|p| p.0).fold(0.0, f64::max);
        let all: Vec<[f64; 3]> = per_field.into_iter().flat_map(|p| p.1).collect();
        let st = path_stats(&all, cfg.n, t, dt, cfg.fields, cfg.paths)?;
        let prediction = msd_prediction(t, cfg.epsilon, cfg.n)?;
        let scale = 2.0 * cfg.n as f64 * t;
        rows.push(MsdRow {
            t,
            l,
            m,
            dt: st.dt,
            ratio: st.msd.value / prediction,
            ratio_half_width: st.msd.half_width / prediction,
            diffusivity: st.msd.value / scale,
            diffusivity_half_width: st.msd.half_width / scale,
            lambda: lambda_of_time(t, cfg.epsilon)?,
            isotropy_z: st.isotropy_z(),
            msd: st.msd,
            prediction,
        });
    }
    Ok(rows)
}

/// True when the diffusivity ratios are nondecreasing in `T` within the joint half-widths.
pub fn monotone_within_ci(rows: &[MsdRow]) -> bool {
    rows.windows(2).all(|w| {
        w[1].diffusivity + w[0].diffusivity_half_width + w[1].diffusivity_half_width >= w[0].diffusivity
    })
}

/// CSV body of the sweep (no header block).
pub fn msd_report(rows: &[MsdRow]) -> String {
    let mut s = String::from("T,L,M,dt,msd,msd_ci,prediction,ratio,ratio_ci,diffusivity,diffusivity_ci,lambda,isotropy_z\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{:e},{:e},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.t,
            r.l,
            r.m,
            r.dt,
            r.msd.value,
            r.msd.half_width,
            r.prediction,
            r.ratio,
            r.ratio_half_width,
            r.diffusivity,
            r.diffusivity_half_width,
            r.lambda,
            r.isotropy_z
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_mode(m: usize, os: usize, mode: [i32; 2]) -> (FieldInterpolant, f64) {
        let grid = TorusGrid::new(2, m, Some(2 * m * os)).unwrap();
        let len = grid.real_points;
        let h = grid.spacing();
        let k = [mode[0] as f64 / m as f64, mode[1] as f64 / m as f64];
        // divergence-free: b ∥ k⊥
        let kn = (k[0] * k[0] + k[1] * k[1]).sqrt();
        let dir = [-k[1] / kn, k[0] / kn];
        let mut comps = vec![vec![0.0; len * len]; 2];
        for i in 0..len {
            for j in 0..len {
                let c = (k[0] * h * i as f64 + k[1] * h * j as f64 + 0.3).cos();
                comps[0][i * len + j] = dir[0] * c;
                comps[1][i * len + j] = dir[1] * c;
            }
        }
        (
            FieldInterpolant::from_samples(grid, &comps, InterpOrder::Bicubic, FieldMeta::default()).unwrap(),
            kn,
        )
    }

    #[test]
    fn spline_reproduces_grid_values() {
        let (f, _) = single_mode(4, 2, [3, -2]);
        let h = f.grid.spacing();
        let mut out = [0.0; 3];
        let mut tr = [0.0; 3];
        for (i, j) in [(0, 0), (3, 5), (15, 1), (7, 7)] {
            let x = [i as f64 * h, j as f64 * h];
            f.eval(&x, &mut out);
            f.eval_trig(&x, &mut tr);
            assert!((out[0] - tr[0]).abs() < 1e-12 && (out[1] - tr[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_mode_bicubic_error() {
        let mut g = rng::stream(1, 0, 0);
        for mode in [[16, 0], [11, -11]] {
            let (f, kn) = single_mode(16, 4, mode);
            assert!((kn - 1.0).abs() < 0.03);
            assert_eq!(f.mode_count(), 2);
            let e = f.probe_rms_error(2000, &mut g);
            assert!(e < 1e-3, "{e}");
        }
        for m in [8, 12, 14] {
            let (f, _) = single_mode(16, 4, [m, 0]);
            let e = f.probe_error(2000, &mut g);
            assert!(e < 1e-3, "{e}");
        }
    }

    #[test]
    fn undersampled_bicubic_rejected() {
        let grid = TorusGrid::new(2, 8, Some(24)).unwrap();
        let comps = vec![vec![0.0; 24 * 24]; 2];
        assert!(FieldInterpolant::from_samples(grid, &comps, InterpOrder::Bicubic, FieldMeta::default()).is_err());
        assert!(FieldInterpolant::from_samples(grid, &comps, InterpOrder::TrigExact, FieldMeta::default()).is_ok());
    }

    #[test]
    fn trig_exact_matches_spectral_sum() {
        let spec = Spectrum::new(TorusGrid::new(2, 8, None).unwrap());
        let mut g = rng::stream(2, 0, 0);
        let b = sample_band_field(&spec, 0.5, 1.0, 4.0, &mut g).unwrap();
        let f = build_interpolant(&b, InterpOrder::TrigExact, FieldMeta::default()).unwrap();
        let mut out = [0.0; 3];
        for _ in 0..50 {
            let x = [g.random::<f64>() * 60.0, g.random::<f64>() * 60.0];
            f.eval(&x, &mut out);
            let e = crate::spectral_field::evaluate_at(&b, &x);
            assert!((out[0] - e[0]).abs() < 1e-10 && (out[1] - e[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn random_field_divergence_small() {
        let spec = Spectrum::new(TorusGrid::new(2, 16, Some(128)).unwrap());
        let mut g = rng::stream(3, 0, 0);
        let b = sample_band_field(&spec, 0.5, 1.0, 8.0, &mut g).unwrap();
        let f = build_interpolant(&b, InterpOrder::Bicubic, FieldMeta::default()).unwrap();
        let d = f.divergence_probe(500, 1e-4, &mut g);
        assert!(d < 1e-2, "{d}");
        let t = build_interpolant(&b, InterpOrder::TrigExact, FieldMeta::default()).unwrap();
        assert!(t.divergence_probe(50, 1e-4, &mut g) < 1e-6);
    }

    #[test]
    fn three_dimensional_spline() {
        let spec = Spectrum::new(TorusGrid::new(3, 4, Some(32)).unwrap());
        let mut g = rng::stream(4, 0, 0);
        let b = sample_band_field(&spec, 0.5, 1.0, 2.0, &mut g).unwrap();
        let f = build_interpolant(&b, InterpOrder::Bicubic, FieldMeta::default()).unwrap();
        assert!(f.probe_error(200, &mut g) < 2e-3);
    }

    #[test]
    fn pure_diffusion_msd() {
        let spec = Spectrum::new(TorusGrid::new(2, 16, Some(64)).unwrap());
        let mut g = rng::stream(5, 0, 0);
        let b = sample_band_field(&spec, 0.0, 1.0, 2.0, &mut g).unwrap();
        let f = build_interpolant(&b, InterpOrder::Bicubic, FieldMeta::default()).unwrap();
        let st = simulate_paths(&[f], 10.0, 0.1, 20_000, 7).unwrap();
        assert!(st.msd.covers(40.0) || (st.msd.value - 40.0).abs() < 0.02 * 40.0, "{:?}", st.msd);
        assert!(st.isotropy_z() < 4.0);
    }

    #[test]
    fn shear_dispersion_oracle() {
        let grid = TorusGrid::new(2, 8, Some(64)).unwrap();
        let f = shear_field(grid, 1.0, 2).unwrap();
        let t = 10.0;
        let st = simulate_paths(&[f], t, 0.02, 40_000, 11).unwrap();
        let k = 0.25;
        let exact = shear_msd(2, t, 1.0, k).unwrap();
        let closed = 4.0 * t + t / (k * k) - (1.0 - (-k * k * t).exp()) / k.powi(4);
        assert!((exact - closed).abs() < 1e-9 * closed);
        assert!((st.msd.value - exact).abs() < 0.03 * exact, "{} vs {exact}", st.msd.value);
    }

    #[test]
    fn guards() {
        let grid = TorusGrid::new(2, 4, Some(32)).unwrap();
        let comps = vec![vec![0.0; 32 * 32]; 2];
        let meta = FieldMeta {
            epsilon: 0.5,
            l: 2.0,
            seed: 0,
        };
        let f = FieldInterpolant::from_samples(grid, &comps, InterpOrder::Bicubic, meta).unwrap();
        assert!(matches!(simulate_paths(&[f.clone()], 1.0, 0.2, 16, 0), Err(Error::Parameter { .. })));
        assert!(matches!(simulate_paths(&[f], 100.0, 0.05, 16, 0), Err(Error::Resource(_))));
    }

    #[test]
    fn msd_sweep_small() {
        let cfg = MsdConfig {
            n: 2,
            epsilon: 0.0,
            t_list: vec![4.0],
            dt: None,
            paths: 64,
            fields: 2,
            grid_m: 2,
            oversampling: 4,
            order: InterpOrder::Bicubic,
        };
        assert_eq!(grid_m_for(&cfg, 4.0).unwrap(), 3);
        let rows = particle_msd(&cfg, 3).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].m, 3);
        assert!((rows[0].diffusivity - 1.0).abs() < 3.0 * rows[0].diffusivity_half_width + 0.05);
        assert_eq!(rows, particle_msd(&cfg, 3).unwrap());
    }

    #[test]
    fn report_and_monotonicity() {
        let row = |t: f64, d: f64, hw: f64| MsdRow {
            t,
            l: (1.0 + t).sqrt(),
            m: 16,
            dt: 0.01,
            msd: MomentEstimate::exact(4.0 * t * d, 100),
            prediction: msd_prediction(t, 0.5, 2).unwrap(),
            ratio: 1.0,
            ratio_half_width: 0.0,
            diffusivity: d,
            diffusivity_half_width: hw,
            lambda: 1.0,
            isotropy_z: 0.0,
        };
        assert!(monotone_within_ci(&[row(1.0, 1.1, 0.01), row(10.0, 1.2, 0.01)]));
        assert!(monotone_within_ci(&[row(1.0, 1.2, 0.03), row(10.0, 1.15, 0.03)]));
        assert!(!monotone_within_ci(&[row(1.0, 1.3, 0.01), row(10.0, 1.1, 0.01)]));
        let csv = msd_report(&[row(1.0, 1.0, 0.0)]);
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("T,L,M,dt,msd"));
    }
}
