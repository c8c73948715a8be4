//! Spectral synthesis of the divergence-free Gaussian drift on a periodic
//! torus, its shell increments, and the per-mode gauge operations that build
//! the stream tensor, corrector and flux-corrector increments.
//!
//! Fields are stored on a half space of integer wavevectors `m` (first
//! nonzero coordinate positive); the coefficient at `−m` is the complex
//! conjugate, so every stored field is real by construction.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64 as C64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::fft::{wrap_index, FftNd};
use crate::rng::normal;
use crate::scale_ladder::{lambda_tilde, ScaleLadder};

const I: C64 = C64 { re: 0.0, im: 1.0 };

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TorusGrid {
    pub n: usize,
    pub m: usize,
    pub real_points: usize,
}

impl TorusGrid {
    /// `real_points` defaults to `4M`.
    pub fn new(n: usize, m: usize, real_points: Option<usize>) -> Result<Self> {
        if !(n == 2 || n == 3) {
            return Err(param("n", "dimension must be 2 or 3"));
        }
        if m == 0 {
            return Err(param("M", "must be positive"));
        }
        let rp = real_points.unwrap_or(4 * m);
        if rp < 2 * m + 1 {
            return Err(param("real_points", "must be at least 2M+1"));
        }
        Ok(TorusGrid { n, m, real_points: rp })
    }

    pub fn period(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.m as f64
    }

    /// Mode-space volume element `M^{-n}`.
    pub fn dk(&self) -> f64 {
        (self.m as f64).powi(-(self.n as i32))
    }

    pub fn spacing(&self) -> f64 {
        self.period() / self.real_points as f64
    }

    pub fn total_points(&self) -> usize {
        self.real_points.pow(self.n as u32)
    }
}

/// Half-space wavevectors with `0 < |m| ≤ M`, sorted by `|m|`.
#[derive(Debug)]
pub struct ModeTable {
    pub n: usize,
    pub m: usize,
    pub ints: Vec<[i32; 3]>,
    pub m2: Vec<i64>,
    pub k: Vec<[f64; 3]>,
    pub kabs: Vec<f64>,
}

fn half_space(m: &[i32; 3]) -> bool {
    for &c in m {
        if c != 0 {
            return c > 0;
        }
    }
    false
}

impl ModeTable {
    fn build(n: usize, mm: usize) -> Self {
        let r = mm as i32;
        let r2 = (mm * mm) as i64;
        let mut v: Vec<(i64, [i32; 3])> = Vec::new();
        let third = if n == 3 { -r..=r } else { 0..=0 };
        for a in -r..=r {
            for b in -r..=r {
                for c in third.clone() {
                    let m = [a, b, c];
                    let q = (a as i64).pow(2) + (b as i64).pow(2) + (c as i64).pow(2);
                    if q > 0 && q <= r2 && half_space(&m) {
                        v.push((q, m));
                    }
                }
            }
        }
        v.sort();
        let inv = 1.0 / mm as f64;
        ModeTable {
            n,
            m: mm,
            k: v.iter()
                .map(|(_, m)| [m[0] as f64 * inv, m[1] as f64 * inv, m[2] as f64 * inv])
                .collect(),
            kabs: v.iter().map(|(q, _)| (*q as f64).sqrt() * inv).collect(),
            m2: v.iter().map(|(q, _)| *q).collect(),
            ints: v.into_iter().map(|(_, m)| m).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ints.is_empty()
    }
}

/// Grid, mode table, and the covariance normalization constant.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub grid: TorusGrid,
    pub modes: Arc<ModeTable>,
    /// `const(n)` in the per-mode covariance `const·ε²(Id − k̂⊗k̂)|k|^{2−n}Δk`.
    pub norm_const: f64,
}

/// Continuum value of the normalization constant, `n / (2(n−1)|S^{n−1}|)`.
pub fn continuum_norm_const(n: usize) -> f64 {
    let area = match n {
        2 => 2.0 * std::f64::consts::PI,
        3 => 4.0 * std::f64::consts::PI,
        _ => f64::NAN,
    };
    n as f64 / (2.0 * (n as f64 - 1.0) * area)
}

impl Spectrum {
    pub fn new(grid: TorusGrid) -> Self {
        let modes = Arc::new(ModeTable::build(grid.n, grid.m));
        let n = grid.n as i32;
        let s: f64 = modes.kabs.iter().map(|k| k.powi(2 - n)).sum::<f64>() * 2.0;
        let norm_const = (grid.n as f64 / 4.0) / ((grid.n as f64 - 1.0) * grid.dk() * s);
        Spectrum { grid, modes, norm_const }
    }

    /// Modes with `1/l_hi < |k| ≤ 1/l_lo`; `l_hi` may be infinite.
    pub fn band(&self, l_lo: f64, l_hi: f64) -> Range<usize> {
        let mm = self.grid.m as f64;
        let hi = (mm / l_lo).powi(2) * (1.0 + 1e-12);
        let lo = if l_hi.is_finite() { (mm / l_hi).powi(2) * (1.0 + 1e-12) } else { 0.0 };
        let m2 = &self.modes.m2;
        let a = m2.partition_point(|&q| (q as f64) <= lo);
        let b = m2.partition_point(|&q| (q as f64) <= hi);
        a..b.max(a)
    }

    /// Scalar amplitude `√(const ε² |k|^{2−n} Δk)` of mode `idx`.
    pub fn amplitude(&self, idx: usize, epsilon: f64) -> f64 {
        let k = self.modes.kabs[idx];
        (self.norm_const * epsilon * epsilon * k.powi(2 - self.grid.n as i32) * self.grid.dk()).sqrt()
    }

    /// `Σ` over all modes (both halves) of `tr C(k)` in the band.
    pub fn band_variance(&self, range: Range<usize>, epsilon: f64) -> f64 {
        let n = self.grid.n as f64;
        range.map(|i| 2.0 * (n - 1.0) * self.amplitude(i, epsilon).powi(2)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rank {
    /// `n` components.
    Vector,
    /// `n×n` components, row-major.
    SkewTensor,
    /// `n` skew tensors `σ^i`, `n³` components, `i`-major.
    SkewTensorPerCoordinate,
    /// `∂_l v^i` at component `i·n + l`.
    VectorGradient,
}

impl Rank {
    pub fn components(&self, n: usize) -> usize {
        match self {
            Rank::Vector => n,
            Rank::SkewTensor | Rank::VectorGradient => n * n,
            Rank::SkewTensorPerCoordinate => n * n * n,
        }
    }
}

/// Fourier coefficients on the half-space modes `range` of `table`.
#[derive(Clone, Debug)]
pub struct SpectralShellField {
    pub grid: TorusGrid,
    /// Scale interval `(L_lo, L_hi]`, i.e. `1/L_hi < |k| ≤ 1/L_lo`.
    pub shell: (f64, f64),
    pub rank: Rank,
    pub modes: Arc<ModeTable>,
    pub range: Range<usize>,
    pub coeffs: Vec<C64>,
    pub hermitian: bool,
}

impl SpectralShellField {
    pub fn ncomp(&self) -> usize {
        self.rank.components(self.grid.n)
    }

    pub fn mode_count(&self) -> usize {
        self.range.len()
    }

    /// Coefficients of local mode `j` (global index `range.start + j`).
    pub fn at(&self, j: usize) -> &[C64] {
        let c = self.ncomp();
        &self.coeffs[j * c..(j + 1) * c]
    }

    pub fn k(&self, j: usize) -> [f64; 3] {
        self.modes.k[self.range.start + j]
    }

    pub fn kabs(&self, j: usize) -> f64 {
        self.modes.kabs[self.range.start + j]
    }

    /// Coefficients at integer wavevector `m` (conjugated if `−m` is stored).
    pub fn coeff(&self, m: [i32; 3]) -> Option<Vec<C64>> {
        let neg = [-m[0], -m[1], -m[2]];
        for j in 0..self.mode_count() {
            let s = self.modes.ints[self.range.start + j];
            if s == m {
                return Some(self.at(j).to_vec());
            }
            if s == neg {
                return Some(self.at(j).iter().map(|c| c.conj()).collect());
            }
        }
        if self.range.is_empty() || m == [0, 0, 0] {
            return None;
        }
        let q = (m[0] as i64).pow(2) + (m[1] as i64).pow(2) + (m[2] as i64).pow(2);
        if q as usize <= self.grid.m * self.grid.m {
            Some(vec![C64::default(); self.ncomp()])
        } else {
            None
        }
    }

    /// `max |k·coeff|` over modes (vector rank).
    pub fn max_divergence(&self) -> f64 {
        let n = self.grid.n;
        (0..self.mode_count())
            .map(|j| {
                let k = self.k(j);
                let c = self.at(j);
                (0..n).map(|i| c[i] * k[i]).sum::<C64>().norm()
            })
            .fold(0.0, f64::max)
    }

    /// `max |c + cᵀ|` over modes and tensor blocks.
    pub fn max_skew_violation(&self) -> f64 {
        let n = self.grid.n;
        let blocks = self.ncomp() / (n * n);
        let mut worst = 0.0_f64;
        for j in 0..self.mode_count() {
            let c = self.at(j);
            for b in 0..blocks {
                let t = &c[b * n * n..(b + 1) * n * n];
                for p in 0..n {
                    for q in 0..n {
                        worst = worst.max((t[p * n + q] + t[q * n + p]).norm());
                    }
                }
            }
        }
        worst
    }

    fn derived(&self, rank: Rank, coeffs: Vec<C64>) -> SpectralShellField {
        SpectralShellField {
            grid: self.grid,
            shell: self.shell,
            rank,
            modes: self.modes.clone(),
            range: self.range.clone(),
            coeffs,
            hermitian: self.hermitian,
        }
    }
}

/// Draws `amp·P(k)z` for modes in `range`, `z` complex standard normal.
pub fn sample_band<R: Rng + ?Sized>(spec: &Spectrum, epsilon: f64, range: Range<usize>, rng: &mut R) -> Vec<C64> {
    let n = spec.grid.n;
    let mut out = Vec::with_capacity(range.len() * n);
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let mut z = [C64::default(); 3];
    for idx in range {
        let amp = spec.amplitude(idx, epsilon);
        let k = spec.modes.k[idx];
        let ka = spec.modes.kabs[idx];
        let mut kz = C64::default();
        for i in 0..n {
            z[i] = C64::new(normal(rng) * r, normal(rng) * r);
            kz += z[i] * k[i];
        }
        for i in 0..n {
            out.push((z[i] - kz * (k[i] / (ka * ka))) * amp);
        }
    }
    out
}

/// Increment `db` on shell `(L_j, L_{j+1}]` of the ladder.
pub fn sample_shell_increment<R: Rng + ?Sized>(
    spec: &Spectrum,
    ladder: &ScaleLadder,
    j: usize,
    rng: &mut R,
) -> Result<SpectralShellField> {
    if j >= ladder.num_shells() {
        return Err(param("j", "level index beyond the ladder"));
    }
    let (lo, hi) = ladder.shell(j);
    sample_band_field(spec, ladder.epsilon, lo, hi, rng)
}

/// Drift restricted to `1/l_hi < |k| ≤ 1/l_lo`.
pub fn sample_band_field<R: Rng + ?Sized>(
    spec: &Spectrum,
    epsilon: f64,
    l_lo: f64,
    l_hi: f64,
    rng: &mut R,
) -> Result<SpectralShellField> {
    let range = spec.band(l_lo, l_hi);
    if range.is_empty() {
        return Err(Error::EmptyShell { lo: l_lo, hi: l_hi });
    }
    let coeffs = sample_band(spec, epsilon, range.clone(), rng);
    Ok(SpectralShellField {
        grid: spec.grid,
        shell: (l_lo, l_hi),
        rank: Rank::Vector,
        modes: spec.modes.clone(),
        range,
        coeffs,
        hermitian: true,
    })
}

fn require(field: &SpectralShellField, rank: Rank, name: &str) -> Result<()> {
    if field.rank != rank {
        return Err(param(name, format!("expected rank {rank:?}, found {:?}", field.rank)));
    }
    if field.modes.kabs[field.range.clone()].iter().any(|&k| k == 0.0) {
        return Err(Error::Gauge("mode at k = 0".into()));
    }
    Ok(())
}

/// `ΔΨ(k) = (i/|k|²)(k⊗db − db⊗k)`, so that `i k_j ΔΨ^{ij} = db^i`.
pub fn stream_increment(db: &SpectralShellField) -> Result<SpectralShellField> {
    require(db, Rank::Vector, "db")?;
    let n = db.grid.n;
    let mut out = Vec::with_capacity(db.mode_count() * n * n);
    for j in 0..db.mode_count() {
        let k = db.k(j);
        let f = I / (db.kabs(j) * db.kabs(j));
        let c = db.at(j);
        for p in 0..n {
            for q in 0..n {
                out.push(f * (c[q] * k[p] - c[p] * k[q]));
            }
        }
    }
    Ok(db.derived(Rank::SkewTensor, out))
}

/// Weight `λ̃` in `Δφ = λ̃^{-1}|k|^{-2} db`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaWeight {
    /// One value for the whole shell.
    Level(f64),
    /// `λ̃` evaluated at `L = 1/|k|` per mode.
    PerMode { epsilon: f64 },
}

impl LambdaWeight {
    #[inline]
    pub fn at(&self, kabs: f64) -> f64 {
        match *self {
            LambdaWeight::Level(l) => l,
            LambdaWeight::PerMode { epsilon } => lambda_tilde(epsilon, 1.0 / kabs),
        }
    }
}

/// `Δφ(k) = λ̃^{-1}|k|^{-2} db(k)`.
pub fn corrector_increment(db: &SpectralShellField, weight: LambdaWeight) -> Result<SpectralShellField> {
    require(db, Rank::Vector, "db")?;
    let mut out = Vec::with_capacity(db.coeffs.len());
    for j in 0..db.mode_count() {
        let ka = db.kabs(j);
        let f = 1.0 / (weight.at(ka) * ka * ka);
        out.extend(db.at(j).iter().map(|c| c * f));
    }
    Ok(db.derived(Rank::Vector, out))
}

/// `∂_l v^i` at component `i·n + l`.
pub fn gradient(v: &SpectralShellField) -> Result<SpectralShellField> {
    require(v, Rank::Vector, "v")?;
    let n = v.grid.n;
    let mut out = Vec::with_capacity(v.mode_count() * n * n);
    for j in 0..v.mode_count() {
        let k = v.k(j);
        let c = v.at(j);
        for i in 0..n {
            for l in 0..n {
                out.push(I * k[l] * c[i]);
            }
        }
    }
    Ok(v.derived(Rank::VectorGradient, out))
}

/// `Δσ^i = (i/|k|²)(k⊗h^i − h^i⊗k)` with `h^i_m = ΔΨ^{im} + λ̃ i k_m Δφ^i`, so
/// that `i k_m Δσ^{i,lm} = ΔΨ^{il} + λ̃ i k_l Δφ^i`.
pub fn sigma_increment(
    dpsi: &SpectralShellField,
    dphi: &SpectralShellField,
    weight: LambdaWeight,
) -> Result<SpectralShellField> {
    require(dpsi, Rank::SkewTensor, "dpsi")?;
    require(dphi, Rank::Vector, "dphi")?;
    if dpsi.range != dphi.range || !Arc::ptr_eq(&dpsi.modes, &dphi.modes) {
        return Err(param("dphi", "inputs must live on the same shell"));
    }
    let n = dpsi.grid.n;
    let mut out = Vec::with_capacity(dpsi.mode_count() * n * n * n);
    let mut h = [C64::default(); 3];
    for j in 0..dpsi.mode_count() {
        let k = dpsi.k(j);
        let ka = dpsi.kabs(j);
        let lam = weight.at(ka);
        let f = I / (ka * ka);
        let psi = dpsi.at(j);
        let phi = dphi.at(j);
        for i in 0..n {
            for m in 0..n {
                h[m] = psi[i * n + m] + I * k[m] * phi[i] * lam;
            }
            for l in 0..n {
                for m in 0..n {
                    out.push(f * (h[m] * k[l] - h[l] * k[m]));
                }
            }
        }
    }
    Ok(dpsi.derived(Rank::SkewTensorPerCoordinate, out))
}

/// Real-space samples on the `real_points^n` grid, component-major.
#[derive(Clone, Debug)]
pub struct RealField {
    pub grid: TorusGrid,
    pub names: Vec<String>,
    pub comps: Vec<Vec<f64>>,
    /// `max |Im| / RMS` over components before the imaginary part was dropped.
    pub imag_residue: f64,
}

impl RealField {
    pub fn rms(&self, c: usize) -> f64 {
        let v = &self.comps[c];
        (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
    }

    pub fn mean(&self, c: usize) -> f64 {
        let v = &self.comps[c];
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Fills `buf` with the Hermitian extension of `coef(j)` on `range`.
pub fn scatter_hermitian(
    buf: &mut [C64],
    table: &ModeTable,
    range: Range<usize>,
    len: usize,
    mut coef: impl FnMut(usize) -> C64,
) {
    buf.iter_mut().for_each(|v| *v = C64::default());
    let n = table.n;
    for (j, idx) in range.enumerate() {
        let m = &table.ints[idx][..n];
        let neg: Vec<i32> = m.iter().map(|c| -c).collect();
        let c = coef(j);
        buf[wrap_index(m, len)] += c;
        buf[wrap_index(&neg, len)] += c.conj();
    }
}

fn component_names(rank: Rank, n: usize) -> Vec<String> {
    match rank {
        Rank::Vector => (0..n).map(|i| format!("v{i}")).collect(),
        Rank::SkewTensor => (0..n * n).map(|c| format!("t{}{}", c / n, c % n)).collect(),
        Rank::VectorGradient => (0..n * n).map(|c| format!("d{}v{}", c % n, c / n)).collect(),
        Rank::SkewTensorPerCoordinate => (0..n * n * n)
            .map(|c| format!("s{}_{}{}", c / (n * n), (c / n) % n, c % n))
            .collect(),
    }
}

/// Inverse FFT of every component, plus `∂_l v^i` channels for vectors when
/// `with_gradient` is set.
pub fn synthesize_realspace(field: &SpectralShellField, with_gradient: bool) -> Result<RealField> {
    if !field.hermitian {
        return Err(Error::Synthesis("field is not flagged Hermitian".into()));
    }
    let grid = field.grid;
    let len = grid.real_points;
    let mut fft = FftNd::new(grid.n, len);
    let mut buf = vec![C64::default(); grid.total_points()];
    let nc = field.ncomp();
    let mut names = component_names(field.rank, grid.n);
    let mut comps = Vec::new();
    let mut worst = 0.0_f64;
    let mut run = |coef: &dyn Fn(usize) -> C64, comps: &mut Vec<Vec<f64>>| {
        scatter_hermitian(&mut buf, &field.modes, field.range.clone(), len, coef);
        fft.process(&mut buf, true);
        let re: Vec<f64> = buf.iter().map(|c| c.re).collect();
        let rms = (re.iter().map(|x| x * x).sum::<f64>() / re.len() as f64).sqrt();
        let im = buf.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
        if rms > 0.0 {
            worst = worst.max(im / rms);
        }
        comps.push(re);
    };
    for c in 0..nc {
        run(&|j| field.at(j)[c], &mut comps);
    }
    if with_gradient && field.rank == Rank::Vector {
        let n = grid.n;
        for i in 0..n {
            for l in 0..n {
                run(&|j| I * field.k(j)[l] * field.at(j)[i], &mut comps);
                names.push(format!("d{l}v{i}"));
            }
        }
    }
    if worst > 1e-10 {
        return Err(Error::Synthesis(format!("imaginary residue {worst:.3e} of field RMS")));
    }
    Ok(RealField {
        grid,
        names,
        comps,
        imag_residue: worst,
    })
}

/// Exact trigonometric evaluation at a physical point `x`.
pub fn evaluate_at(field: &SpectralShellField, x: &[f64]) -> Vec<f64> {
    let nc = field.ncomp();
    let n = field.grid.n;
    let mut out = vec![0.0; nc];
    for j in 0..field.mode_count() {
        let k = field.k(j);
        let ph: f64 = (0..n).map(|d| k[d] * x[d]).sum();
        let e = C64::from_polar(1.0, ph);
        for (o, c) in out.iter_mut().zip(field.at(j)) {
            *o += 2.0 * (c * e).re;
        }
    }
    out
}

/// Sum of `|coeff|²` over both halves: the spatial mean of `|field|²`.
pub fn parseval_energy(field: &SpectralShellField) -> f64 {
    2.0 * field.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>()
}

/// Header written next to a binary field snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotManifest {
    pub format: String,
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub real_points: usize,
    pub period: f64,
    pub components: Vec<String>,
    pub shells: Vec<(f64, f64)>,
    pub seed: u64,
    pub dtype: String,
    pub layout: String,
}

pub const SNAPSHOT_FORMAT: &str = "scalehom-field-v1";

/// Writes `<stem>.bin` (little-endian f64, component-major, last axis
/// fastest) and `<stem>.json`; returns both paths.
pub fn write_snapshot(dir: &Path, stem: &str, field: &RealField, shells: &[(f64, f64)], seed: u64) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let bin = dir.join(format!("{stem}.bin"));
    let json = dir.join(format!("{stem}.json"));
    let mut bytes = Vec::with_capacity(field.comps.len() * field.grid.total_points() * 8);
    for c in &field.comps {
        for v in c {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(&bin, bytes)?;
    let manifest = SnapshotManifest {
        format: SNAPSHOT_FORMAT.into(),
        n: field.grid.n,
        m: field.grid.m,
        real_points: field.grid.real_points,
        period: field.grid.period(),
        components: field.names.clone(),
        shells: shells.to_vec(),
        seed,
        dtype: "f64-le".into(),
        layout: "component-major; row-major grid, last axis fastest".into(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&json, text + "\n")?;
    Ok((bin, json))
}

/// Reads a snapshot written by [`write_snapshot`].
pub fn read_snapshot(json: &Path) -> Result<(SnapshotManifest, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(json)?;
    let man: SnapshotManifest = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let bytes = fs::read(json.with_extension("bin"))?;
    let per = man.real_points.pow(man.n as u32);
    if bytes.len() != per * man.components.len() * 8 {
        return Err(Error::Config("snapshot size does not match manifest".into()));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((man, vals.chunks(per).map(|c| c.to_vec()).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::scale_ladder::{make_ladder, Spacing};

    fn spec2(m: usize) -> Spectrum {
        Spectrum::new(TorusGrid::new(2, m, None).unwrap())
    }

    #[test]
    fn grid_validation() {
        assert!(TorusGrid::new(4, 8, None).is_err());
        assert!(TorusGrid::new(2, 0, None).is_err());
        assert!(TorusGrid::new(2, 8, Some(16)).is_err());
        assert!(TorusGrid::new(2, 8, Some(17)).is_ok());
    }

    #[test]
    fn half_space_partition() {
        let s = spec2(6);
        let full = s.band(1.0, f64::INFINITY);
        assert_eq!(full.len(), s.modes.len());
        let a = s.band(1.0, 2.0);
        let b = s.band(2.0, f64::INFINITY);
        assert_eq!(a.start, b.end);
        // (M/2)² = 9 sits in the outer shell (1/2 < |k| is false at |k| = 1/2)
        assert!(s.modes.m2[a.start] > 9 && s.modes.m2[b.end - 1] <= 9);
    }

    #[test]
    fn normalization_constant_near_continuum() {
        let s = spec2(128);
        let c = continuum_norm_const(2);
        assert!((s.norm_const - c).abs() / c < 0.02);
        let full = s.band(1.0, f64::INFINITY);
        assert!((s.band_variance(full, 0.4) - 0.08).abs() < 1e-12);
        let trunc = s.band(1.0, 2.0);
        assert!((s.band_variance(trunc, 0.4) - 0.06).abs() / 0.06 < 0.05);
    }

    #[test]
    fn sampled_field_invariants() {
        let s = spec2(16);
        let mut r = rng::stream(1, 0, 0);
        let db = sample_band_field(&s, 0.5, 1.0, 4.0, &mut r).unwrap();
        assert!(db.max_divergence() < 1e-12);
        let psi = stream_increment(&db).unwrap();
        assert!(psi.max_skew_violation() < 1e-15);
        let weight = LambdaWeight::PerMode { epsilon: 0.5 };
        let phi = corrector_increment(&db, weight).unwrap();
        assert!(phi.max_divergence() < 1e-12);
        let sig = sigma_increment(&psi, &phi, weight).unwrap();
        assert!(sig.max_skew_violation() < 1e-12);
        let n = 2;
        for j in 0..db.mode_count() {
            let k = db.k(j);
            let lam = weight.at(db.kabs(j));
            let (b, p, f, s) = (db.at(j), psi.at(j), phi.at(j), sig.at(j));
            for i in 0..n {
                // i k_j ΔΨ^{ij} = db^i
                let div: C64 = (0..n).map(|q| I * k[q] * p[i * n + q]).sum();
                assert!((div - b[i]).norm() < 1e-12);
                for l in 0..n {
                    let lhs: C64 = (0..n).map(|m| I * k[m] * s[i * n * n + l * n + m]).sum();
                    let rhs = p[i * n + l] + I * k[l] * f[i] * lam;
                    assert!((lhs - rhs).norm() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn empty_shell_error() {
        let s = spec2(4);
        let mut r = rng::stream(1, 0, 0);
        // |m|² = 7 is not a sum of two squares
        assert!(matches!(
            sample_band_field(&s, 0.5, 1.5, 1.6, &mut r),
            Err(Error::EmptyShell { .. })
        ));
        let ladder = make_ladder(0.5, 4.0, 2, Spacing::GeometricInL).unwrap();
        assert!(sample_shell_increment(&s, &ladder, 1, &mut r).is_ok());
        assert!(sample_shell_increment(&s, &ladder, 2, &mut r).is_err());
    }

    #[test]
    fn single_mode_cosine() {
        let s = spec2(4);
        let range = s.band(1.0, f64::INFINITY);
        let idx = s.modes.ints[range.clone()].iter().position(|m| *m == [1, 2, 0]).unwrap();
        let mut coeffs = vec![C64::default(); range.len() * 2];
        let c = C64::from_polar(0.3, 0.7);
        coeffs[idx * 2] = c;
        let f = SpectralShellField {
            grid: s.grid,
            shell: (1.0, f64::INFINITY),
            rank: Rank::Vector,
            modes: s.modes.clone(),
            range,
            coeffs,
            hermitian: true,
        };
        let real = synthesize_realspace(&f, false).unwrap();
        let len = s.grid.real_points;
        let h = s.grid.spacing();
        for p0 in 0..len {
            for p1 in 0..len {
                let x = [p0 as f64 * h, p1 as f64 * h];
                let want = 0.6 * ((x[0] + 2.0 * x[1]) / 4.0 + 0.7).cos();
                assert!((real.comps[0][p0 * len + p1] - want).abs() < 1e-13);
            }
        }
        assert!(real.comps[1].iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn parseval_and_real_divergence() {
        let s = spec2(16);
        let mut r = rng::stream(2, 0, 0);
        let db = sample_band_field(&s, 0.5, 1.0, f64::INFINITY, &mut r).unwrap();
        let real = synthesize_realspace(&db, true).unwrap();
        let energy: f64 = (0..2).map(|c| real.rms(c).powi(2)).sum();
        assert!((energy - parseval_energy(&db)).abs() / energy < 1e-10);
        let np = real.comps[0].len();
        let (mut div2, mut grad2) = (0.0, 0.0);
        for p in 0..np {
            let d = real.comps[2][p] + real.comps[5][p];
            div2 += d * d;
            grad2 += (2..6).map(|c| real.comps[c][p].powi(2)).sum::<f64>();
        }
        assert!((div2 / grad2).sqrt() < 1e-8);
        let x = [3.7, -12.1];
        let direct = evaluate_at(&db, &x);
        let len = s.grid.real_points;
        let h = s.grid.spacing();
        let y = [5.0 * h, 7.0 * h];
        let on_grid = evaluate_at(&db, &y);
        assert!((on_grid[0] - real.comps[0][5 * len + 7]).abs() < 1e-12);
        assert!(direct.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn stream_function_reduction_n2() {
        let s = spec2(12);
        let mut r = rng::stream(3, 0, 0);
        let db = sample_band_field(&s, 0.5, 1.0, 3.0, &mut r).unwrap();
        let psi = stream_increment(&db).unwrap();
        let real_b = synthesize_realspace(&db, false).unwrap();
        // ψ = Ψ^{12}; b = (∂₂ψ, −∂₁ψ)
        let mut b_from_psi = Vec::new();
        for l in [1usize, 0] {
            let coeffs: Vec<C64> = (0..psi.mode_count())
                .map(|j| I * psi.k(j)[l] * psi.at(j)[1])
                .collect();
            let f = SpectralShellField {
                rank: Rank::Vector,
                coeffs: coeffs.iter().flat_map(|c| [*c, C64::default()]).collect(),
                ..db.clone()
            };
            b_from_psi.push(synthesize_realspace(&f, false).unwrap().comps[0].clone());
        }
        for p in 0..real_b.comps[0].len() {
            assert!((real_b.comps[0][p] - b_from_psi[0][p]).abs() < 1e-10);
            assert!((real_b.comps[1][p] + b_from_psi[1][p]).abs() < 1e-10);
        }
        for j in 0..psi.mode_count() {
            let t = psi.at(j);
            assert!(t[0].norm() == 0.0 && t[3].norm() == 0.0);
            assert!((t[1] + t[2]).norm() < 1e-15);
        }
    }

    #[test]
    fn non_hermitian_rejected() {
        let s = spec2(4);
        let mut r = rng::stream(3, 0, 0);
        let mut db = sample_band_field(&s, 0.5, 1.0, 2.0, &mut r).unwrap();
        db.hermitian = false;
        assert!(matches!(synthesize_realspace(&db, false), Err(Error::Synthesis(_))));
    }

    #[test]
    fn snapshot_round_trip() {
        let s = spec2(4);
        let mut r = rng::stream(3, 0, 0);
        let db = sample_band_field(&s, 0.5, 1.0, 2.0, &mut r).unwrap();
        let real = synthesize_realspace(&db, false).unwrap();
        let dir = std::env::temp_dir().join(format!("scalehom-snap-{}", std::process::id()));
        let (_, json) = write_snapshot(&dir, "b", &real, &[(1.0, 2.0)], 3).unwrap();
        let (man, comps) = read_snapshot(&json).unwrap();
        assert_eq!(man.m, 4);
        assert_eq!(comps, real.comps);
        std::fs::remove_dir_all(dir).ok();
    }
}
