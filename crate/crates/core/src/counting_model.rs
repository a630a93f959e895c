//! Crater counting model `N_D = N_T P_T + N_F P_F` and its simulator.
//!
//! `N_T` and `N_F` are Poisson counts of genuine craters and of crater-like
//! false features in a region; `P_T` and `P_F` are the (random) fractions of
//! each that a counter marks up, drawn per region from Beta distributions.
//! The detected count is assembled by Binomial thinning of the two Poisson
//! draws. The variability of the efficiencies pushes the spread of `N_D`
//! above the `sqrt(N)` Poisson level, which [`excess_error_ratio`] measures.
//!
//! `P_T` and `P_F` are drawn independently within a region.

use rand_distr::{Beta, Binomial, Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountingModelParams {
    /// Expected number of genuine craters per region.
    pub lambda_true: f64,
    /// Expected number of false features per region.
    pub lambda_false: f64,
    pub alpha_t: f64,
    pub beta_t: f64,
    pub alpha_f: f64,
    pub beta_f: f64,
}

impl Default for CountingModelParams {
    fn default() -> Self {
        CountingModelParams {
            lambda_true: 100.0,
            lambda_false: 33.0,
            alpha_t: 2.0,
            beta_t: 2.0,
            alpha_f: 2.0,
            beta_f: 2.0,
        }
    }
}

impl CountingModelParams {
    /// Rates may be zero (an empty process); shapes must be strictly positive.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_true", self.lambda_true), ("lambda_false", self.lambda_false)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in
            [("alpha_t", self.alpha_t), ("beta_t", self.beta_t), ("alpha_f", self.alpha_f), ("beta_f", self.beta_f)]
        {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// `lambda_true E[P_T] + lambda_false E[P_F]`.
    pub fn expected_detected(&self) -> f64 {
        self.lambda_true * self.alpha_t / (self.alpha_t + self.beta_t)
            + self.lambda_false * self.alpha_f / (self.alpha_f + self.beta_f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionDraw {
    pub n_true: u64,
    pub n_false: u64,
    pub p_true: f64,
    pub p_false: f64,
    pub n_detected: u64,
}

/// Beta density `p^(a-1) (1-p)^(b-1) / B(a, b)` on the open interval (0, 1).
pub fn beta_pdf(p: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("p = {p} outside (0, 1)")));
    }
    if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(Error::Domain(format!("shape parameters must be > 0, got ({alpha}, {beta})")));
    }
    let log_density = (alpha - 1.0) * p.ln() + (beta - 1.0) * (-p).ln_1p() - ln_beta(alpha, beta);
    Ok(log_density.exp())
}

pub(crate) fn poisson_draw<R: rand::Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    // Inversion below lambda = 12, transformed rejection above; both exact.
    let d = Poisson::new(lambda).expect("validated rate");
    d.sample(rng) as u64
}

fn binomial_draw<R: rand::Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("p in (0,1)").sample(rng)
}

fn draw_region(params: &CountingModelParams, seed: u64) -> RegionDraw {
    let mut r = rng::seeded(seed);
    let beta_t = Beta::new(params.alpha_t, params.beta_t).expect("validated shapes");
    let beta_f = Beta::new(params.alpha_f, params.beta_f).expect("validated shapes");
    let n_true = poisson_draw(params.lambda_true, &mut r);
    let n_false = poisson_draw(params.lambda_false, &mut r);
    let p_true: f64 = beta_t.sample(&mut r);
    let p_false: f64 = beta_f.sample(&mut r);
    let n_detected = binomial_draw(n_true, p_true, &mut r) + binomial_draw(n_false, p_false, &mut r);
    RegionDraw { n_true, n_false, p_true, p_false, n_detected }
}

/// Draws `n_regions` independent regions. Region `i` uses its own stream
/// seeded with `rng::sub_seed(seed, i)`, so the output is identical whether
/// the regions are generated serially or in parallel.
pub fn simulate_regions(params: &CountingModelParams, n_regions: usize, seed: u64) -> Result<Vec<RegionDraw>> {
    params.validate()?;
    if n_regions == 0 {
        return Err(Error::InvalidParameter("n_regions must be >= 1".into()));
    }
    Ok((0..n_regions).into_par_iter().map(|i| draw_region(params, rng::sub_seed(seed, i as u64))).collect())
}

/// Sample standard deviation of `n_detected` over the square root of its
/// sample mean. A Poisson process gives 1.
pub fn excess_error_ratio(draws: &[RegionDraw]) -> Result<f64> {
    if draws.len() < 2 {
        return Err(Error::Insufficient("need at least 2 draws".into()));
    }
    let n = draws.len() as f64;
    let mean = draws.iter().map(|d| d.n_detected as f64).sum::<f64>() / n;
    if mean <= 0.0 {
        return Err(Error::Degenerate("mean detected count is zero".into()));
    }
    let var = draws
        .iter()
        .map(|d| {
            let e = d.n_detected as f64 - mean;
            e * e
        })
        .sum::<f64>()
        / (n - 1.0);
    Ok(var.sqrt() / mean.sqrt())
}
