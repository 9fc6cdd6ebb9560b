//! Entropy models and the range coder that turns them into bytes.

pub mod cdf;
pub mod factorized;
pub mod gaussian;
pub mod range_coder;

use candle_core::Tensor;

use crate::error::Result;
pub use cdf::CdfTable;
pub use factorized::FactorizedPrior;
pub use gaussian::GaussianConditional;
pub use range_coder::{range_decode, range_encode};

/// Smallest probability any coded symbol is charged.
pub const PROB_FLOOR: f64 = 1.0 / 32768.0;

/// `sum(-log2 p)` with each `p` floored at [`PROB_FLOOR`].
pub fn bits_from_probs(probs: &[f64]) -> f64 {
    probs.iter().map(|p| -p.max(PROB_FLOOR).min(1.0).log2()).sum()
}

/// Exact cost in bits of `symbols` under quantized tables, which is what
/// the range coder spends up to its constant flush overhead.
pub fn estimate_rate(symbols: &[i32], table_index: &[usize], tables: &[CdfTable]) -> f64 {
    symbols
        .iter()
        .zip(table_index)
        .map(|(&s, &t)| tables[t].bits(s))
        .sum()
}

/// `max(x, bound)` in the forward pass with an identity gradient.
pub fn lower_bound(x: &Tensor, bound: f64) -> Result<Tensor> {
    let clipped = x.maximum(bound)?;
    Ok((x + (clipped - x)?.detach())?)
}

/// Differentiable total bits `sum(-log2 lik)` with the probability floor.
pub fn likelihood_bits(lik: &Tensor) -> Result<Tensor> {
    let l = lower_bound(lik, PROB_FLOOR)?;
    Ok((l.log()?.sum_all()? * (-1.0 / std::f64::consts::LN_2))?)
}
