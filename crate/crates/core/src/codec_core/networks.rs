//! Contextual autoencoder, hyperprior and intra codec networks.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::entropy::{likelihood_bits, FactorizedPrior, GaussianConditional};
use crate::error::{contract, Result};
use crate::motion::{symbols_to_tensor, tensor_to_symbols};
use crate::nn::{lrelu, Conv, ResBlock, Scope, SubpixelUp};
use crate::tensor_ops::{quantize_ste, QuantMode};

const WIDTH: usize = 64;

/// Four stride-2 stages; the final contexts join at the inputs of stages
/// one to three.
#[derive(Clone)]
pub struct ContextualEncoder {
    s1: Conv,
    s2: Conv,
    res: ResBlock,
    s3: Conv,
    s4: Conv,
}

impl ContextualEncoder {
    pub fn new(s: &Scope, m: &ModelConfig) -> Result<Self> {
        Ok(Self {
            s1: Conv::new(&s.sub("s1"), 3 + m.c0, WIDTH, 3, 2)?,
            s2: Conv::new(&s.sub("s2"), WIDTH + m.c1, WIDTH, 3, 2)?,
            res: ResBlock::new(&s.sub("res"), WIDTH)?,
            s3: Conv::new(&s.sub("s3"), WIDTH + m.c2, WIDTH, 3, 2)?,
            s4: Conv::new(&s.sub("s4"), WIDTH, m.latent, 3, 2)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &[Tensor; 3]) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h % 64 != 0 || w % 64 != 0 {
            return contract(format!("contextual encoder needs dims padded to 64, got {h}x{w}"));
        }
        let a = lrelu(&self.s1.forward(&Tensor::cat(&[x, &ctx[0]], 1)?)?)?;
        let a = lrelu(&self.s2.forward(&Tensor::cat(&[&a, &ctx[1]], 1)?)?)?;
        let a = self.res.forward(&a)?;
        let a = lrelu(&self.s3.forward(&Tensor::cat(&[&a, &ctx[2]], 1)?)?)?;
        self.s4.forward(&a)
    }
}

/// Mirror of [`ContextualEncoder`] producing the frame and the feature that
/// is propagated to the next frame.
#[derive(Clone)]
pub struct ContextualDecoder {
    up4: SubpixelUp,
    up3: SubpixelUp,
    f2: Conv,
    res: ResBlock,
    up2: SubpixelUp,
    f1: Conv,
    up1: SubpixelUp,
    f0: Conv,
    feat: Conv,
    recon: Conv,
}

impl ContextualDecoder {
    pub fn new(s: &Scope, m: &ModelConfig) -> Result<Self> {
        Ok(Self {
            up4: SubpixelUp::new(&s.sub("up4"), m.latent, WIDTH)?,
            up3: SubpixelUp::new(&s.sub("up3"), WIDTH, WIDTH)?,
            f2: Conv::new(&s.sub("f2"), WIDTH + m.c2, WIDTH, 3, 1)?,
            res: ResBlock::new(&s.sub("res"), WIDTH)?,
            up2: SubpixelUp::new(&s.sub("up2"), WIDTH, WIDTH)?,
            f1: Conv::new(&s.sub("f1"), WIDTH + m.c1, WIDTH, 3, 1)?,
            up1: SubpixelUp::new(&s.sub("up1"), WIDTH, m.c0)?,
            f0: Conv::new(&s.sub("f0"), 2 * m.c0, m.c0, 1, 1)?,
            feat: Conv::new(&s.sub("feat"), m.c0, m.c0, 3, 1)?,
            recon: Conv::new(&s.sub("recon"), m.c0, 3, 3, 1)?,
        })
    }

    /// Returns `(x_hat, F_hat)`; `x_hat` is clamped to `[0, 1]`.
    pub fn forward(&self, y_hat: &Tensor, ctx: &[Tensor; 3]) -> Result<(Tensor, Tensor)> {
        let (_, _, yh, yw) = y_hat.dims4()?;
        let (_, _, h2, w2) = ctx[2].dims4()?;
        if yh * 4 != h2 || yw * 4 != w2 {
            return contract(format!("latent {:?} does not match contexts {:?}", y_hat.dims(), ctx[2].dims()));
        }
        let a = lrelu(&self.up4.forward(y_hat)?)?;
        let a = lrelu(&self.up3.forward(&a)?)?;
        let a = lrelu(&self.f2.forward(&Tensor::cat(&[&a, &ctx[2]], 1)?)?)?;
        let a = self.res.forward(&a)?;
        let a = lrelu(&self.up2.forward(&a)?)?;
        let a = lrelu(&self.f1.forward(&Tensor::cat(&[&a, &ctx[1]], 1)?)?)?;
        let a = lrelu(&self.up1.forward(&a)?)?;
        let a = lrelu(&self.f0.forward(&Tensor::cat(&[&a, &ctx[0]], 1)?)?)?;
        let feature = self.feat.forward(&a)?;
        let x_hat = self.recon.forward(&lrelu(&feature)?)?.clamp(0.0, 1.0)?;
        Ok((x_hat, feature))
    }
}

/// Differentiable hyperprior pass.
pub struct HyperOutput {
    pub y_hat: Tensor,
    pub bits_y: Tensor,
    pub bits_z: Tensor,
}

/// Symbols of a hyperprior-coded latent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HyperCode {
    pub z: Vec<i32>,
    pub z_dims: [usize; 4],
    pub y: Vec<i32>,
    pub y_dims: [usize; 4],
    /// Gaussian table index of every `y` symbol.
    pub y_tables: Vec<usize>,
}

/// Mean-scale hyperprior, optionally conditioned on the quarter-scale
/// temporal context.
#[derive(Clone)]
pub struct Hyperprior {
    enc: [Conv; 3],
    dec: [SubpixelUp; 2],
    temporal: Option<[Conv; 2]>,
    params: Conv,
    pub prior: FactorizedPrior,
    latent: usize,
}

impl Hyperprior {
    pub fn new(s: &Scope, m: &ModelConfig, temporal: bool) -> Result<Self> {
        let (l, h) = (m.latent, m.hyper);
        let temporal = if temporal {
            Some([Conv::new(&s.sub("tp0"), m.c2, h, 3, 2)?, Conv::new(&s.sub("tp1"), h, h, 3, 2)?])
        } else {
            None
        };
        let pin = if temporal.is_some() { 2 * h } else { h };
        Ok(Self {
            enc: [
                Conv::new(&s.sub("enc0"), l, h, 3, 1)?,
                Conv::new(&s.sub("enc1"), h, h, 3, 2)?,
                Conv::new(&s.sub("enc2"), h, h, 3, 2)?,
            ],
            dec: [SubpixelUp::new(&s.sub("dec0"), h, h)?, SubpixelUp::new(&s.sub("dec1"), h, h)?],
            temporal,
            params: Conv::new(&s.sub("params"), pin, 2 * l, 1, 1)?,
            prior: FactorizedPrior::new(&s.sub("prior"), h, m.factorized_support)?,
            latent: l,
        })
    }

    fn analyze(&self, y: &Tensor) -> Result<Tensor> {
        let a = lrelu(&self.enc[0].forward(y)?)?;
        let a = lrelu(&self.enc[1].forward(&a)?)?;
        self.enc[2].forward(&a)
    }

    /// Gaussian `(mu, sigma)` for the latent from the decoded side latent.
    pub fn entropy_params(&self, z_hat: &Tensor, c2: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let mut a = lrelu(&self.dec[0].forward(z_hat)?)?;
        a = lrelu(&self.dec[1].forward(&a)?)?;
        if let Some(tp) = &self.temporal {
            let Some(c2) = c2 else {
                return contract("temporal hyperprior needs the quarter-scale context");
            };
            let t = tp[1].forward(&lrelu(&tp[0].forward(c2)?)?)?;
            a = Tensor::cat(&[&a, &t], 1)?;
        }
        let p = self.params.forward(&a)?;
        Ok((p.narrow(1, 0, self.latent)?, p.narrow(1, self.latent, self.latent)?))
    }

    pub fn forward_train(
        &self,
        y: &Tensor,
        c2: Option<&Tensor>,
        rate_quant: QuantMode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<HyperOutput> {
        let z = self.analyze(y)?;
        let z_hat = quantize_ste(&z, QuantMode::Round, None)?;
        let z_rate = match rate_quant {
            QuantMode::Round => z_hat.clone(),
            QuantMode::Noise => quantize_ste(&z, QuantMode::Noise, rng.as_deref_mut())?,
        };
        let bits_z = likelihood_bits(&self.prior.likelihood(&z_rate)?)?;
        let (mu, sigma) = self.entropy_params(&z_hat, c2)?;
        let y_hat = (quantize_ste(&(y - &mu)?, QuantMode::Round, None)? + &mu)?;
        let y_rate = match rate_quant {
            QuantMode::Round => y_hat.clone(),
            QuantMode::Noise => quantize_ste(y, QuantMode::Noise, rng)?,
        };
        let bits_y = likelihood_bits(&GaussianConditional::likelihood(&y_rate, &mu, &sigma)?)?;
        Ok(HyperOutput { y_hat, bits_y, bits_z })
    }

    /// Quantize `y` and its side latent; returns the codes and the latent
    /// reconstruction computed exactly as the decoder will.
    pub fn encode(&self, y: &Tensor, c2: Option<&Tensor>, g: &GaussianConditional) -> Result<(HyperCode, Tensor)> {
        let z = self.analyze(y)?;
        let z_dims = dims4(&z)?;
        let z_sym = tensor_to_symbols(&z)?;
        let z_hat = symbols_to_tensor(&z_sym, z_dims, y.dtype())?;
        let (mu, sigma) = self.entropy_params(&z_hat, c2)?;
        let mu_v = host(&mu)?;
        let y_sym = GaussianConditional::symbols(&host(y)?, &mu_v);
        let code = HyperCode {
            z: z_sym,
            z_dims,
            y_tables: g.table_indices(&host(&sigma)?),
            y: y_sym,
            y_dims: dims4(y)?,
        };
        let y_hat = self.reconstruct(&code.y, code.y_dims, &mu_v, y.dtype())?;
        Ok((code, y_hat))
    }

    /// Gaussian table index of each latent element, given decoded `z`.
    pub fn decode_tables(
        &self,
        z: &[i32],
        z_dims: [usize; 4],
        c2: Option<&Tensor>,
        g: &GaussianConditional,
        dtype: candle_core::DType,
    ) -> Result<(Vec<usize>, Vec<f32>, [usize; 4])> {
        let z_hat = symbols_to_tensor(z, z_dims, dtype)?;
        let (mu, sigma) = self.entropy_params(&z_hat, c2)?;
        Ok((g.table_indices(&host(&sigma)?), host(&mu)?, dims4(&mu)?))
    }

    pub fn reconstruct(&self, y: &[i32], dims: [usize; 4], mu: &[f32], dtype: candle_core::DType) -> Result<Tensor> {
        let v = GaussianConditional::dequantize(y, mu);
        Ok(Tensor::from_vec(v, dims.to_vec(), &crate::tensor_ops::cpu())?.to_dtype(dtype)?)
    }

    /// Side-latent shape for a latent of spatial size `h x w`.
    pub fn z_dims(&self, batch: usize, h: usize, w: usize) -> [usize; 4] {
        [batch, self.prior.channels(), h.div_ceil(4), w.div_ceil(4)]
    }
}

fn host(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?)
}

fn dims4(t: &Tensor) -> Result<[usize; 4]> {
    let (a, b, c, d) = t.dims4()?;
    Ok([a, b, c, d])
}

/// Hyperprior image codec for intra frames; also emits the initial
/// propagated feature.
#[derive(Clone)]
pub struct IntraCodec {
    enc: [Conv; 4],
    enc_res: ResBlock,
    dec: [SubpixelUp; 4],
    dec_res: ResBlock,
    feat: Conv,
    recon: Conv,
    pub hyper: Hyperprior,
}

/// Differentiable intra pass.
pub struct IntraOutput {
    pub x_hat: Tensor,
    pub feature: Tensor,
    pub bits_y: Tensor,
    pub bits_z: Tensor,
}

impl IntraCodec {
    pub fn new(s: &Scope, m: &ModelConfig) -> Result<Self> {
        Ok(Self {
            enc: [
                Conv::new(&s.sub("enc0"), 3, WIDTH, 3, 2)?,
                Conv::new(&s.sub("enc1"), WIDTH, WIDTH, 3, 2)?,
                Conv::new(&s.sub("enc2"), WIDTH, WIDTH, 3, 2)?,
                Conv::new(&s.sub("enc3"), WIDTH, m.latent, 3, 2)?,
            ],
            enc_res: ResBlock::new(&s.sub("enc_res"), WIDTH)?,
            dec: [
                SubpixelUp::new(&s.sub("dec0"), m.latent, WIDTH)?,
                SubpixelUp::new(&s.sub("dec1"), WIDTH, WIDTH)?,
                SubpixelUp::new(&s.sub("dec2"), WIDTH, WIDTH)?,
                SubpixelUp::new(&s.sub("dec3"), WIDTH, m.c0)?,
            ],
            dec_res: ResBlock::new(&s.sub("dec_res"), WIDTH)?,
            feat: Conv::new(&s.sub("feat"), m.c0, m.c0, 3, 1)?,
            recon: Conv::new(&s.sub("recon"), m.c0, 3, 3, 1)?,
            hyper: Hyperprior::new(&s.sub("hyper"), m, false)?,
        })
    }

    pub fn analyze(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h % 64 != 0 || w % 64 != 0 {
            return contract(format!("intra codec needs dims padded to 64, got {h}x{w}"));
        }
        let a = lrelu(&self.enc[0].forward(x)?)?;
        let a = lrelu(&self.enc[1].forward(&a)?)?;
        let a = self.enc_res.forward(&a)?;
        let a = lrelu(&self.enc[2].forward(&a)?)?;
        self.enc[3].forward(&a)
    }

    pub fn synthesize(&self, y_hat: &Tensor) -> Result<(Tensor, Tensor)> {
        let a = lrelu(&self.dec[0].forward(y_hat)?)?;
        let a = lrelu(&self.dec[1].forward(&a)?)?;
        let a = self.dec_res.forward(&a)?;
        let a = lrelu(&self.dec[2].forward(&a)?)?;
        let a = lrelu(&self.dec[3].forward(&a)?)?;
        let feature = self.feat.forward(&a)?;
        let x_hat = self.recon.forward(&lrelu(&feature)?)?.clamp(0.0, 1.0)?;
        Ok((x_hat, feature))
    }

    pub fn forward_train(&self, x: &Tensor, rate_quant: QuantMode, rng: Option<&mut ChaCha8Rng>) -> Result<IntraOutput> {
        let y = self.analyze(x)?;
        let h = self.hyper.forward_train(&y, None, rate_quant, rng)?;
        let (x_hat, feature) = self.synthesize(&h.y_hat)?;
        Ok(IntraOutput { x_hat, feature, bits_y: h.bits_y, bits_z: h.bits_z })
    }
}
