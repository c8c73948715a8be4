//! Scale discretization and the effective diffusivity functions λ̃(L), λ(s), τ.

use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::quadrature;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spacing {
    GeometricInL,
    UniformInTau,
}

/// Levels `1 = L_0 < L_1 < ... < L_J` with `λ̃_j` and `τ_j = ln λ̃_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleLadder {
    pub epsilon: f64,
    pub levels: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub taus: Vec<f64>,
}

/// λ̃_L = √(1 + ε² ln L).
pub fn lambda_tilde(epsilon: f64, l: f64) -> f64 {
    (1.0 + epsilon * epsilon * l.ln()).sqrt()
}

pub fn tau_of_l(epsilon: f64, l: f64) -> f64 {
    lambda_tilde(epsilon, l).ln()
}

/// Inverse of `lambda_tilde`: L = exp((λ̃² − 1)/ε²).
pub fn l_of_lambda(epsilon: f64, lambda: f64) -> f64 {
    ((lambda * lambda - 1.0) / (epsilon * epsilon)).exp()
}

pub fn l_of_tau(epsilon: f64, tau: f64) -> f64 {
    l_of_lambda(epsilon, tau.exp())
}

/// λ(s) = √(1 + (ε²/2) ln(1+s)).
pub fn lambda_of_time(s: f64, epsilon: f64) -> Result<f64> {
    if !(s >= 0.0) || !s.is_finite() {
        return Err(param("s", "time must be finite and non-negative"));
    }
    Ok((1.0 + 0.5 * epsilon * epsilon * s.ln_1p()).sqrt())
}

pub fn tau_of_time(s: f64, epsilon: f64) -> Result<f64> {
    Ok(lambda_of_time(s, epsilon)?.ln())
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !epsilon.is_finite() || !(0.0..=1.0).contains(&epsilon) {
        return Err(param("epsilon", "must lie in [0, 1]"));
    }
    Ok(())
}

impl ScaleLadder {
    fn from_levels(epsilon: f64, levels: Vec<f64>) -> Self {
        let lambdas: Vec<f64> = levels.iter().map(|&l| lambda_tilde(epsilon, l)).collect();
        let taus = lambdas.iter().map(|l| l.ln()).collect();
        ScaleLadder {
            epsilon,
            levels,
            lambdas,
            taus,
        }
    }

    /// Number of shells `(L_j, L_{j+1}]`.
    pub fn num_shells(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn shell(&self, j: usize) -> (f64, f64) {
        (self.levels[j], self.levels[j + 1])
    }

    pub fn l_max(&self) -> f64 {
        *self.levels.last().unwrap()
    }

    pub fn tau_max(&self) -> f64 {
        *self.taus.last().unwrap()
    }

    pub fn max_dtau(&self) -> f64 {
        self.taus.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

/// Builds a ladder ending at `l_max`.
///
/// `epsilon = 0` is accepted for geometric spacing only; all taus are then 0.
pub fn make_ladder(epsilon: f64, l_max: f64, j: usize, spacing: Spacing) -> Result<ScaleLadder> {
    check_epsilon(epsilon)?;
    if !l_max.is_finite() || l_max < 1.0 {
        return Err(param("L_max", "must be finite and at least 1"));
    }
    if j == 0 {
        return Err(param("J", "must be at least 1"));
    }
    if l_max == 1.0 {
        return Ok(ScaleLadder::from_levels(epsilon, vec![1.0; j + 1]));
    }
    let mut levels = Vec::with_capacity(j + 1);
    match spacing {
        Spacing::GeometricInL => {
            let ln_max = l_max.ln();
            for i in 0..=j {
                levels.push((ln_max * i as f64 / j as f64).exp());
            }
        }
        Spacing::UniformInTau => {
            if epsilon == 0.0 {
                return Err(param("epsilon", "uniform-in-tau spacing needs epsilon > 0"));
            }
            let tau_max = tau_of_l(epsilon, l_max);
            for i in 0..=j {
                levels.push(l_of_tau(epsilon, tau_max * i as f64 / j as f64));
            }
        }
    }
    levels[0] = 1.0;
    levels[j] = l_max;
    Ok(ScaleLadder::from_levels(epsilon, levels))
}

/// Heun integration of dλ̃ = ε² d ln L / (2λ̃) from λ̃(1) = 1.
pub fn integrate_lambda_ode(epsilon: f64, l_max: f64, step_count: usize) -> Result<f64> {
    check_epsilon(epsilon)?;
    if !l_max.is_finite() || l_max < 1.0 {
        return Err(param("L_max", "must be finite and at least 1"));
    }
    if step_count == 0 {
        return Err(param("step_count", "must be at least 1"));
    }
    let e2 = epsilon * epsilon;
    let h = l_max.ln() / step_count as f64;
    let rhs = |y: f64| e2 / (2.0 * y);
    let mut y = 1.0;
    for _ in 0..step_count {
        let k1 = rhs(y);
        let k2 = rhs(y + h * k1);
        y += 0.5 * h * (k1 + k2);
    }
    Ok(y)
}

/// Tail-envelope integrals and their ratios to the envelope scales
/// `ε²(L*/λ̃*)²`, `ε² L*^{-p}`, `λ̃*^{-p}`.
///
/// The raw integrals overflow or underflow for large `tau_star`; the ratios
/// are computed in rescaled form and stay finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeIntegrals {
    pub tau_star: f64,
    pub p: f64,
    pub epsilon: f64,
    pub i1: f64,
    pub i2: f64,
    pub i3: f64,
    pub ratio1: f64,
    pub ratio2: f64,
    pub ratio3: f64,
}

const ENV_ABS: f64 = 1e-13;
const ENV_REL: f64 = 1e-12;

pub fn envelope_integrals(epsilon: f64, tau_star: f64, p: f64) -> Result<EnvelopeIntegrals> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(param("epsilon", "must lie in (0, 1]"));
    }
    if !(p > 0.0) || !p.is_finite() {
        return Err(param("p", "must be positive"));
    }
    if !(tau_star >= 0.0) || !tau_star.is_finite() {
        return Err(param("tau_star", "must be finite and non-negative"));
    }
    let e2 = epsilon * epsilon;
    // u = λ̃² = e^{2τ}, dτ = du / (2u), ln L = (u − 1)/ε²
    let us = (2.0 * tau_star).exp();
    let ratio1 = if tau_star == 0.0 {
        0.0
    } else {
        // v = u − u*
        let lo = (1.0 - us).max(-60.0 * e2);
        let g = |v: f64| (2.0 * v / e2).exp() * (us / (us + v)).powf(0.5 * p + 1.0) * 0.5;
        quadrature::integrate(g, lo, 0.0, ENV_ABS, ENV_REL)? / e2
    };
    let ratio2 = {
        let g = |v: f64| 0.5 * (-p * v / e2).exp();
        quadrature::integrate_to_infinity(g, 0.0, ENV_ABS, ENV_REL)? / e2
    };
    let i3 = quadrature::integrate_to_infinity(|t| (-p * t).exp(), tau_star, ENV_ABS * 1e-3, ENV_REL)?;
    let ratio3 = quadrature::integrate_to_infinity(|s| (-p * s).exp(), 0.0, ENV_ABS, ENV_REL)?;
    let ln_l = (us - 1.0) / e2;
    let i1 = ratio1 * e2 * (2.0 * ln_l).exp() / us;
    let i2 = ratio2 * e2 * (-p * ln_l).exp();
    Ok(EnvelopeIntegrals {
        tau_star,
        p,
        epsilon,
        i1,
        i2,
        i3,
        ratio1,
        ratio2,
        ratio3,
    })
}
