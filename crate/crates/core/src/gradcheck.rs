//! Central finite-difference gradient checking in double precision.
//!
//! Used by the unit tests, the acceptance suite, and `selftest`.

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

/// Outcome of one gradient comparison.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub input: usize,
    /// `||analytic - numeric|| / max(||numeric||, 1e-12)`.
    pub rel_error: f64,
    pub numeric_norm: f64,
}

/// Random `f64` tensor with standard deviation `std`.
pub fn randn(shape: &[usize], std: f64, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let v: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

/// Compare autodiff gradients of the scalar `f(inputs)` against central
/// differences with step `h`. All inputs must be `f64`.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<Vec<GradReport>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| Var::from_tensor(&t.to_dtype(DType::F64)?))
        .collect::<candle_core::Result<_>>()?;
    let ts: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let loss = f(&ts)?;
    let grads = loss.backward()?;

    let mut reports = Vec::new();
    for (i, var) in vars.iter().enumerate() {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; var.elem_count()],
        };
        let base = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let shape = var.shape().clone();
        let mut numeric = vec![0.0; base.len()];
        for j in 0..base.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[j] += delta;
                let mut args: Vec<Tensor> = inputs.iter().map(|t| t.to_dtype(DType::F64)).collect::<candle_core::Result<_>>()?;
                args[i] = Tensor::from_vec(v, shape.clone(), &Device::Cpu)?;
                Ok(f(&args)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
            };
            numeric[j] = (eval(h)? - eval(-h)?) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        reports.push(GradReport { input: i, rel_error: diff / norm.max(1e-12), numeric_norm: norm });
    }
    Ok(reports)
}

/// Weighted sum with fixed pseudo-random weights, a scalar loss whose
/// gradient exercises every output element.
pub fn probe_loss(out: &Tensor, seed: u64) -> Result<Tensor> {
    let w = randn(out.dims(), 1.0, seed)?.to_dtype(out.dtype())?;
    Ok((out * w)?.sum_all()?)
}
