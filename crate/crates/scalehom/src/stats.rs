//! Monte Carlo summary statistics: confidence intervals and slope fits.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{ensure, param, Result};

pub const MIN_BATCHES: usize = 16;
pub const HEAVY_TAIL_KURTOSIS: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Mean,
    BatchMeans,
}

/// Point estimate with a 95% confidence half-width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub value: f64,
    pub half_width: f64,
    pub n_samples: usize,
    pub estimator: Estimator,
    pub heavy_tail: bool,
}

impl MomentEstimate {
    pub fn exact(value: f64, n_samples: usize) -> Self {
        MomentEstimate {
            value,
            half_width: 0.0,
            n_samples,
            estimator: Estimator::Mean,
            heavy_tail: false,
        }
    }

    /// Standard error implied by the half-width under a normal approximation.
    pub fn std_err(&self) -> f64 {
        self.half_width / 1.96
    }

    pub fn lo(&self) -> f64 {
        self.value - self.half_width
    }

    pub fn hi(&self) -> f64 {
        self.value + self.half_width
    }

    pub fn covers(&self, target: f64) -> bool {
        (self.value - target).abs() <= self.half_width
    }

    pub fn relative_half_width(&self) -> f64 {
        if self.value == 0.0 {
            if self.half_width == 0.0 { 0.0 } else { f64::INFINITY }
        } else {
            self.half_width / self.value.abs()
        }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Excess kurtosis (zero for a Gaussian); zero for constant input.
pub fn excess_kurtosis(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = mean(xs);
    let (mut m2, mut m4) = (0.0, 0.0);
    for x in xs {
        let d = (x - m) * (x - m);
        m2 += d;
        m4 += d * d;
    }
    m2 /= n;
    m4 /= n;
    if m2 == 0.0 {
        0.0
    } else {
        m4 / (m2 * m2) - 3.0
    }
}

pub fn t_quantile_975(dof: usize) -> f64 {
    if dof == 0 {
        return f64::INFINITY;
    }
    StudentsT::new(0.0, 1.0, dof as f64)
        .map(|t| t.inverse_cdf(0.975))
        .unwrap_or(1.96)
}

/// Normal-theory CI for the mean of i.i.d. samples.
pub fn mean_ci(xs: &[f64]) -> Result<MomentEstimate> {
    ensure(xs.len() >= 2, "samples", "need at least 2 samples")?;
    let n = xs.len();
    let hw = t_quantile_975(n - 1) * (variance(xs) / n as f64).sqrt();
    Ok(MomentEstimate {
        value: mean(xs),
        half_width: hw,
        n_samples: n,
        estimator: Estimator::Mean,
        heavy_tail: false,
    })
}

fn batch_slices(len: usize, batches: usize) -> Vec<(usize, usize)> {
    (0..batches)
        .map(|b| (b * len / batches, (b + 1) * len / batches))
        .collect()
}

/// Batch-means CI. Inputs with excess kurtosis above 100 are flagged and the
/// interval is widened to the spread of lognormal-fitted batch means when all
/// samples are positive.
pub fn batch_means_ci(xs: &[f64], batches: usize) -> Result<MomentEstimate> {
    ensure(batches >= MIN_BATCHES, "batches", "batch count must be at least 16")?;
    if xs.len() < batches {
        return Err(param(
            "samples",
            format!("{} samples cannot fill {} batches", xs.len(), batches),
        ));
    }
    let slices = batch_slices(xs.len(), batches);
    let means: Vec<f64> = slices.iter().map(|&(a, b)| mean(&xs[a..b])).collect();
    let t = t_quantile_975(batches - 1);
    let mut hw = t * (variance(&means) / batches as f64).sqrt();
    let heavy = excess_kurtosis(xs) > HEAVY_TAIL_KURTOSIS;
    if heavy && xs.iter().all(|&x| x > 0.0) {
        let log_means: Vec<f64> = slices
            .iter()
            .map(|&(a, b)| {
                let logs: Vec<f64> = xs[a..b].iter().map(|x| x.ln()).collect();
                (mean(&logs) + 0.5 * variance(&logs)).exp()
            })
            .collect();
        let hw_log = t * (variance(&log_means) / batches as f64).sqrt();
        hw = hw.max(hw_log);
    }
    Ok(MomentEstimate {
        value: mean(xs),
        half_width: hw,
        n_samples: xs.len(),
        estimator: Estimator::BatchMeans,
        heavy_tail: heavy,
    })
}

/// CI for a ratio of means `mean(num)/mean(den)` by the delta method.
pub fn ratio_ci(num: &[f64], den: &[f64]) -> Result<MomentEstimate> {
    ensure(num.len() == den.len(), "samples", "numerator and denominator lengths differ")?;
    ensure(num.len() >= 2, "samples", "need at least 2 samples")?;
    let md = mean(den);
    ensure(md != 0.0, "samples", "denominator mean is zero")?;
    let r = mean(num) / md;
    let resid: Vec<f64> = num.iter().zip(den).map(|(a, b)| (a - r * b) / md).collect();
    let n = num.len();
    let hw = t_quantile_975(n - 1) * (variance(&resid) / n as f64).sqrt();
    Ok(MomentEstimate {
        value: r,
        half_width: hw,
        n_samples: n,
        estimator: Estimator::Mean,
        heavy_tail: false,
    })
}

/// Sample correlation coefficient.
pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let mx = mean(x);
    let my = mean(y);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlopeModel {
    /// y = a + b x
    Linear,
    /// y = a + b ln x
    AffineInLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub n_points: usize,
}

/// Ordinary least squares slope.
pub fn slope_fit(x: &[f64], y: &[f64], model: SlopeModel) -> Result<SlopeFit> {
    ensure(x.len() == y.len(), "x", "abscissa and ordinate lengths differ")?;
    ensure(x.len() >= 4, "x", "need at least 4 points")?;
    let xs: Vec<f64> = match model {
        SlopeModel::Linear => x.to_vec(),
        SlopeModel::AffineInLog => {
            if x.iter().any(|&v| v <= 0.0) {
                return Err(param("x", "affine-in-log fit needs positive abscissae"));
            }
            x.iter().map(|v| v.ln()).collect()
        }
    };
    let n = xs.len() as f64;
    let mx = mean(&xs);
    let my = mean(y);
    let sxx: f64 = xs.iter().map(|v| (v - mx) * (v - mx)).sum();
    if !(sxx > 1e-300) || !sxx.is_finite() {
        return Err(param("x", "degenerate abscissae"));
    }
    let sxy: f64 = xs.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let r = b - intercept - slope * a;
            r * r
        })
        .sum();
    let slope_stderr = (rss / (n - 2.0) / sxx).sqrt();
    Ok(SlopeFit {
        slope,
        intercept,
        slope_stderr,
        n_points: xs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand_distr::{Distribution, LogNormal};

    #[test]
    fn constant_input_zero_width() {
        let xs = vec![3.5; 1000];
        let e = batch_means_ci(&xs, 20).unwrap();
        assert_eq!(e.value, 3.5);
        assert_eq!(e.half_width, 0.0);
        assert!(!e.heavy_tail);
    }

    #[test]
    fn too_few_batches_rejected() {
        assert!(batch_means_ci(&[1.0; 100], 8).is_err());
        assert!(batch_means_ci(&[1.0; 10], 16).is_err());
    }

    #[test]
    fn normal_coverage() {
        let mut covered = 0;
        for rep in 0..100 {
            let mut r = rng::stream(11, 99, rep);
            let xs: Vec<f64> = (0..10_000).map(|_| rng::normal(&mut r)).collect();
            let e = batch_means_ci(&xs, 20).unwrap();
            if e.covers(0.0) {
                covered += 1;
            }
        }
        assert!(covered >= 93, "coverage {covered}/100");
    }

    #[test]
    fn lognormal_flags_heavy_tail() {
        let d = LogNormal::new(0.0, 3f64.sqrt()).unwrap();
        let mut r = rng::stream(5, 99, 0);
        let xs: Vec<f64> = (0..100_000).map(|_| d.sample(&mut r)).collect();
        let e = batch_means_ci(&xs, 20).unwrap();
        assert!(e.heavy_tail);
        let plain = {
            let slices = batch_slices(xs.len(), 20);
            let m: Vec<f64> = slices.iter().map(|&(a, b)| mean(&xs[a..b])).collect();
            t_quantile_975(19) * (variance(&m) / 20.0).sqrt()
        };
        assert!(e.half_width >= plain);
    }

    #[test]
    fn exact_line() {
        let x: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let f = slope_fit(&x, &y, SlopeModel::Linear).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-14);
        assert!((f.intercept - 1.0).abs() < 1e-14);
        assert!(f.slope_stderr < 1e-12);
    }

    #[test]
    fn log_line() {
        let x = [2.0, 4.0, 8.0, 16.0, 32.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 0.5 * v.ln() - 1.0).collect();
        let f = slope_fit(&x, &y, SlopeModel::AffineInLog).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-13);
    }

    #[test]
    fn degenerate_abscissae() {
        assert!(slope_fit(&[1.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0], SlopeModel::Linear).is_err());
        assert!(slope_fit(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], SlopeModel::Linear).is_err());
    }

    #[test]
    fn ratio_of_constant_multiples() {
        let den: Vec<f64> = (1..100).map(|i| i as f64).collect();
        let num: Vec<f64> = den.iter().map(|v| 0.25 * v).collect();
        let r = ratio_ci(&num, &den).unwrap();
        assert!((r.value - 0.25).abs() < 1e-15);
        assert!(r.half_width < 1e-14);
    }
}
