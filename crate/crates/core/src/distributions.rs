//! Central and non-central chi-square distributions used as outlier cutoffs.
//!
//! The non-central CDF is the Poisson mixture
//! `F(x; k, λ) = Σ_j Pois(j; λ/2) F(x; k + 2j)`, summed outward from the
//! Poisson mode until the accumulated weight exceeds `1 - 1e-12`.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{Error, Result};

const MIXTURE_MASS: f64 = 1.0 - 1e-12;
const MAX_MIXTURE_TERMS: usize = 100_000;

/// A distribution quantile used as an outlyingness threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cutoff {
    pub dof: usize,
    pub level: f64,
    pub lambda: f64,
    pub value: f64,
}

impl Cutoff {
    /// Quantile of `χ²_dof(λ)` at `level`; central when `lambda == 0`.
    pub fn new(dof: usize, lambda: f64, level: f64) -> Result<Self> {
        let value = noncentral_chi2_quantile(dof, lambda, level)?;
        Ok(Self {
            dof,
            level,
            lambda,
            value,
        })
    }
}

fn check_dof(dof: usize) -> Result<()> {
    if dof == 0 {
        Err(Error::InvalidDof)
    } else {
        Ok(())
    }
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidLevel(level))
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !lambda.is_finite() {
        return Err(Error::InvalidParameter {
            name: "lambda",
            value: lambda,
        });
    }
    if lambda < 0.0 {
        return Err(Error::NegativeLambda(lambda));
    }
    Ok(())
}

/// CDF of the central chi-square distribution with real-valued degrees of freedom.
fn central_cdf(x: f64, dof: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x.is_infinite() {
        1.0
    } else {
        gamma_lr(0.5 * dof, 0.5 * x)
    }
}

fn central_pdf(x: f64, dof: f64) -> f64 {
    if x < 0.0 {
        return 0.0;
    }
    if x == 0.0 {
        return match dof {
            d if d < 2.0 => f64::INFINITY,
            2.0 => 0.5,
            _ => 0.0,
        };
    }
    let half = 0.5 * dof;
    ((half - 1.0) * x.ln() - 0.5 * x - half * std::f64::consts::LN_2 - ln_gamma(half)).exp()
}

/// CDF of the central chi-square distribution.
pub fn chi2_cdf(x: f64, dof: usize) -> f64 {
    central_cdf(x, dof as f64)
}

/// Poisson mixture `Σ_j w_j g(k + 2j)` over the terms carrying almost all the mass.
fn poisson_mixture(dof: f64, lambda: f64, g: impl Fn(f64) -> f64) -> f64 {
    if lambda == 0.0 {
        return g(dof);
    }
    let mean = 0.5 * lambda;
    let log_weight = |j: usize| -> f64 {
        let jf = j as f64;
        jf * mean.ln() - mean - ln_gamma(jf + 1.0)
    };
    let mode = mean.floor() as usize;
    let term = |j: usize| -> (f64, f64) {
        let w = log_weight(j).exp();
        (w, w * g(dof + 2.0 * j as f64))
    };

    let (w0, t0) = term(mode);
    let mut mass = w0;
    let mut total = t0;
    let mut left = mode;
    let mut right = mode;
    let mut left_weight = if mode > 0 {
        log_weight(mode - 1).exp()
    } else {
        0.0
    };
    let mut right_weight = log_weight(mode + 1).exp();
    let mut steps = 0;
    while mass < MIXTURE_MASS && steps < MAX_MIXTURE_TERMS {
        steps += 1;
        if left > 0 && left_weight >= right_weight {
            left -= 1;
            let (w, t) = term(left);
            mass += w;
            total += t;
            left_weight = if left > 0 {
                log_weight(left - 1).exp()
            } else {
                0.0
            };
        } else {
            right += 1;
            let (w, t) = term(right);
            mass += w;
            total += t;
            right_weight = log_weight(right + 1).exp();
        }
        if left == 0 && right_weight == 0.0 {
            break;
        }
    }
    total
}

/// CDF of the non-central chi-square distribution `χ²_dof(λ)`.
pub fn noncentral_chi2_cdf(x: f64, dof: usize, lambda: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    poisson_mixture(dof as f64, lambda, |k| central_cdf(x, k)).clamp(0.0, 1.0)
}

/// Density of the non-central chi-square distribution `χ²_dof(λ)`.
pub fn noncentral_chi2_pdf(x: f64, dof: usize, lambda: f64) -> f64 {
    poisson_mixture(dof as f64, lambda, |k| central_pdf(x, k))
}

/// Quantile of the central chi-square distribution.
pub fn chi2_quantile(dof: usize, level: f64) -> Result<f64> {
    noncentral_chi2_quantile(dof, 0.0, level)
}

/// Quantile of `χ²_dof(λ)`: bracketed bisection followed by safeguarded Newton steps.
pub fn noncentral_chi2_quantile(dof: usize, lambda: f64, level: f64) -> Result<f64> {
    check_dof(dof)?;
    check_level(level)?;
    check_lambda(lambda)?;
    let cdf = |x: f64| noncentral_chi2_cdf(x, dof, lambda);

    let mut lo = 0.0_f64;
    let mut hi = (dof as f64 + lambda).max(1.0);
    while cdf(hi) < level {
        lo = hi;
        hi *= 2.0;
    }

    while hi - lo > 1e-6 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < level {
            lo = mid;
        } else {
            hi = mid;
        }
    }

    let mut x = 0.5 * (lo + hi);
    for _ in 0..100 {
        let f = cdf(x) - level;
        if f == 0.0 {
            break;
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let density = noncentral_chi2_pdf(x, dof, lambda);
        let mut next = if density.is_finite() && density > 0.0 {
            x - f / density
        } else {
            f64::NAN
        };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let step = (next - x).abs();
        x = next;
        if step <= 1e-13 * x.max(1.0) {
            break;
        }
    }
    Ok(x)
}
