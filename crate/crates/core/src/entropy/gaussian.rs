//! Mean-scale Gaussian conditional model for hyperprior-coded latents.
//!
//! A latent `y` with predicted `(mu, sigma)` is coded as the integer
//! `round(y - mu)` and reconstructed as that integer plus `mu`. Coding uses
//! one of a fixed ladder of scale tables; the first scale at or above the
//! predicted sigma is chosen.

use candle_core::Tensor;

use crate::entropy::cdf::CdfTable;
use crate::entropy::lower_bound;
use crate::error::Result;
use crate::tensor_ops::round_half_away;

pub const SCALE_MIN: f64 = 0.11;
pub const SCALE_MAX: f64 = 256.0;
pub const SCALE_LEVELS: usize = 64;
/// Table support is `ceil(sigma * TAIL)` on each side of zero.
pub const TAIL: f64 = 6.11;

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone)]
pub struct GaussianConditional {
    pub scales: Vec<f64>,
    pub tables: Vec<CdfTable>,
}

impl Default for GaussianConditional {
    fn default() -> Self {
        Self::new()
    }
}

impl GaussianConditional {
    pub fn new() -> Self {
        let ratio = (SCALE_MAX / SCALE_MIN).ln() / (SCALE_LEVELS - 1) as f64;
        let scales: Vec<f64> = (0..SCALE_LEVELS).map(|i| SCALE_MIN * (ratio * i as f64).exp()).collect();
        let tables = scales.iter().map(|&s| Self::table_for(s)).collect();
        Self { scales, tables }
    }

    fn table_for(sigma: f64) -> CdfTable {
        let support = (sigma * TAIL).ceil() as i32;
        let pmf: Vec<f64> = (-support..=support)
            .map(|k| std_normal_cdf((k as f64 + 0.5) / sigma) - std_normal_cdf((k as f64 - 0.5) / sigma))
            .collect();
        CdfTable::from_pmf(&pmf, -support)
    }

    pub fn table_index(&self, sigma: f32) -> usize {
        let s = (sigma as f64).max(SCALE_MIN);
        self.scales.partition_point(|&t| t < s).min(SCALE_LEVELS - 1)
    }

    pub fn table_indices(&self, sigma: &[f32]) -> Vec<usize> {
        sigma.iter().map(|&s| self.table_index(s)).collect()
    }

    /// Integer symbols `round(y - mu)`, ties away from zero.
    pub fn symbols(y: &[f32], mu: &[f32]) -> Vec<i32> {
        y.iter()
            .zip(mu)
            .map(|(&a, &m)| round_half_away((a - m) as f64).clamp(i32::MIN as f64, i32::MAX as f64) as i32)
            .collect()
    }

    /// Reconstruction `symbol + mu`, computed identically on both sides.
    pub fn dequantize(symbols: &[i32], mu: &[f32]) -> Vec<f32> {
        symbols.iter().zip(mu).map(|(&s, &m)| s as f32 + m).collect()
    }

    /// Probability mass of the unit bin around `y_hat` under `N(mu, sigma)`.
    ///
    /// `sigma` is lower-bounded at [`SCALE_MIN`] with a pass-through gradient.
    pub fn likelihood(y_hat: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
        let sigma = lower_bound(sigma, SCALE_MIN)?;
        let v = (y_hat - mu)?.abs()?;
        let k = std::f64::consts::FRAC_1_SQRT_2;
        let upper = ((v.neg()? + 0.5)?.div(&sigma)? * k)?.erf()?;
        let lower = ((v.neg()? - 0.5)?.div(&sigma)? * k)?.erf()?;
        Ok(((upper - lower)? * 0.5)?)
    }
}
