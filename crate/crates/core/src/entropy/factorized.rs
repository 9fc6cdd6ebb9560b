//! Fully factorized learned prior: one monotone cumulative density per
//! channel, parameterised by a tiny elementwise network.

use candle_core::{DType, Tensor};

use crate::entropy::cdf::CdfTable;
use crate::error::{contract, Result};
use crate::nn::{Init, Scope};

/// Widths of the hidden layers of each per-channel density network.
const FILTERS: [usize; 3] = [3, 3, 3];
const INIT_SCALE: f64 = 10.0;

#[derive(Clone)]
pub struct FactorizedPrior {
    channels: usize,
    /// Symbols in `-support..=support` are coded directly, others escape.
    pub support: i32,
    matrices: Vec<Tensor>,
    biases: Vec<Tensor>,
    factors: Vec<Tensor>,
}

fn softplus(x: &Tensor) -> Result<Tensor> {
    // log(1 + e^x) = max(x, 0) + log(1 + e^-|x|)
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_f64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl FactorizedPrior {
    pub fn new(s: &Scope, channels: usize, support: i32) -> Result<Self> {
        let dims: Vec<usize> = std::iter::once(1).chain(FILTERS).chain(std::iter::once(1)).collect();
        let scale = INIT_SCALE.powf(1.0 / (dims.len() - 1) as f64);
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for i in 0..dims.len() - 1 {
            let init = (1.0 / scale / dims[i + 1] as f64).exp_m1().ln();
            matrices.push(s.param(&format!("matrix{i}"), &[channels, dims[i + 1], dims[i]], Init::Const(init))?);
            biases.push(s.param(&format!("bias{i}"), &[channels, dims[i + 1], 1], Init::Uniform(0.5))?);
            if i < dims.len() - 2 {
                factors.push(s.param(&format!("factor{i}"), &[channels, dims[i + 1], 1], Init::Const(0.0))?);
            }
        }
        Ok(Self { channels, support, matrices, biases, factors })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Cumulative logits for `x` of shape `(channels, 1, n)`.
    fn logits_cumulative(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for i in 0..self.matrices.len() {
            x = softplus(&self.matrices[i])?.matmul(&x)?.broadcast_add(&self.biases[i])?;
            if i < self.factors.len() {
                x = (&x + self.factors[i].tanh()?.broadcast_mul(&x.tanh()?)?)?;
            }
        }
        Ok(x)
    }

    /// Probability of the unit bin around each element of `y_hat`
    /// (`(b, channels, h, w)`).
    pub fn likelihood(&self, y_hat: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = y_hat.dims4()?;
        if c != self.channels {
            return contract(format!("factorized prior has {} channels, latent has {c}", self.channels));
        }
        let x = y_hat.transpose(0, 1)?.reshape((c, 1, b * h * w))?;
        let lower = self.logits_cumulative(&(&x - 0.5)?)?;
        let upper = self.logits_cumulative(&(&x + 0.5)?)?;
        // evaluate in the tail where the sigmoid is not saturated
        let sign = ((lower.add(&upper)?.ge(0.0)?.to_dtype(x.dtype())? * -2.0)? + 1.0)?.detach();
        let sig = |t: &Tensor| -> Result<Tensor> { Ok(candle_nn::ops::sigmoid(&(t * &sign)?)?) };
        let lik = (sig(&upper)? - sig(&lower)?)?.abs()?;
        Ok(lik.reshape((c, b, h, w))?.transpose(0, 1)?.contiguous()?)
    }

    fn host_params(&self) -> Result<Vec<[Vec<f64>; 3]>> {
        let v = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?) };
        let mut out = Vec::new();
        for i in 0..self.matrices.len() {
            let f = if i < self.factors.len() { v(&self.factors[i])? } else { Vec::new() };
            out.push([v(&self.matrices[i])?, v(&self.biases[i])?, f]);
        }
        Ok(out)
    }

    /// One quantized table per channel, covering `-support..=support`.
    pub fn tables(&self) -> Result<Vec<CdfTable>> {
        let params = self.host_params()?;
        let dims: Vec<usize> = std::iter::once(1).chain(FILTERS).chain(std::iter::once(1)).collect();
        let logits = |c: usize, x: f64| -> f64 {
            let mut a = vec![x];
            for (i, [m, b, f]) in params.iter().enumerate() {
                let (o, n) = (dims[i + 1], dims[i]);
                let mut next = vec![0.0; o];
                for r in 0..o {
                    let mut acc = b[c * o + r];
                    for k in 0..n {
                        acc += softplus_f64(m[(c * o + r) * n + k]) * a[k];
                    }
                    if !f.is_empty() {
                        acc += f[c * o + r].tanh() * acc.tanh();
                    }
                    next[r] = acc;
                }
                a = next;
            }
            a[0]
        };
        let tables = (0..self.channels)
            .map(|c| {
                let pmf: Vec<f64> = (-self.support..=self.support)
                    .map(|k| {
                        let lo = logits(c, k as f64 - 0.5);
                        let hi = logits(c, k as f64 + 0.5);
                        let s = if lo + hi >= 0.0 { -1.0 } else { 1.0 };
                        (sigmoid_f64(s * hi) - sigmoid_f64(s * lo)).abs()
                    })
                    .collect();
                CdfTable::from_pmf(&pmf, -self.support)
            })
            .collect();
        Ok(tables)
    }

    /// Table index (the channel) of every element of a `(b, c, h, w)` latent
    /// flattened in row-major order.
    pub fn table_indices(&self, dims: &[usize]) -> Vec<usize> {
        let (b, c, hw) = (dims[0], dims[1], dims[2] * dims[3]);
        (0..b).flat_map(|_| (0..c).flat_map(move |ch| std::iter::repeat_n(ch, hw))).collect()
    }
}
