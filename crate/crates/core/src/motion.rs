//! Optical flow estimation, flow coding and flow pyramids.

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::entropy::{estimate_rate, likelihood_bits, CdfTable, FactorizedPrior};
use crate::error::{contract, Result};
use crate::nn::{lrelu, Conv, Scope};
use crate::tensor_ops::{self, bilinear_warp, flow_downsample, quantize_ste, round_half_away, upsample_bilinear2x, QuantMode};

/// Dense `(b, 2, h, w)` displacement in pixels of its own grid; channel 0 is
/// horizontal, channel 1 vertical.
pub type MotionField = Tensor;

/// Which bitstream substream a latent belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubstreamId {
    Flow,
    Offset,
    Hyper,
    Frame,
}

impl SubstreamId {
    pub fn name(self) -> &'static str {
        match self {
            SubstreamId::Flow => "flow",
            SubstreamId::Offset => "offset",
            SubstreamId::Hyper => "hyper",
            SubstreamId::Frame => "frame",
        }
    }
}

/// Quantized latent symbols with their shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentCode {
    pub symbols: Vec<i32>,
    pub dims: [usize; 4],
    /// Hyper-latent symbols, when the latent is coded with a hyperprior.
    pub side_symbols: Vec<i32>,
    pub side_dims: [usize; 4],
    pub substream: SubstreamId,
}

impl LatentCode {
    pub fn new(symbols: Vec<i32>, dims: [usize; 4], substream: SubstreamId) -> Self {
        Self { symbols, dims, side_symbols: Vec::new(), side_dims: [0; 4], substream }
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        symbols_to_tensor(&self.symbols, self.dims, dtype)
    }
}

pub(crate) fn symbols_to_tensor(symbols: &[i32], dims: [usize; 4], dtype: DType) -> Result<Tensor> {
    if symbols.len() != dims.iter().product::<usize>() {
        return contract(format!("{} symbols for latent shape {dims:?}", symbols.len()));
    }
    let v: Vec<f32> = symbols.iter().map(|&s| s as f32).collect();
    Ok(Tensor::from_vec(v, dims.to_vec(), &tensor_ops::cpu())?.to_dtype(dtype)?)
}

pub(crate) fn tensor_to_symbols(y: &Tensor) -> Result<Vec<i32>> {
    let v = y.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    Ok(v.iter()
        .map(|&a| round_half_away(a as f64).clamp(i32::MIN as f64, i32::MAX as f64) as i32)
        .collect())
}

fn dims4(t: &Tensor) -> Result<[usize; 4]> {
    let (a, b, c, d) = t.dims4()?;
    Ok([a, b, c, d])
}

/// Result of a differentiable pass through a latent codec.
pub struct CodecOutput {
    pub recon: Tensor,
    /// Estimated bits, differentiable.
    pub bits: Tensor,
    pub latent: Tensor,
}

/// Convolutional autoencoder with 4x spatial reduction and a factorized
/// prior on its latent. Used for both flow and offset fields.
#[derive(Clone)]
pub struct LatentCodec {
    enc: [Conv; 2],
    dec: [Conv; 2],
    out: Conv,
    pub prior: FactorizedPrior,
    substream: SubstreamId,
}

impl LatentCodec {
    /// `out_kernel` is the size of the final synthesis conv; `zero_out`
    /// starts that conv at zero so the codec initially emits zeros.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        s: &Scope,
        in_ch: usize,
        hidden: usize,
        latent: usize,
        out_kernel: usize,
        zero_out: bool,
        support: i32,
        substream: SubstreamId,
    ) -> Result<Self> {
        let out = if zero_out {
            Conv::zeroed(&s.sub("out"), hidden / 2, in_ch, out_kernel, 1)?
        } else {
            Conv::new(&s.sub("out"), hidden / 2, in_ch, out_kernel, 1)?
        };
        Ok(Self {
            enc: [Conv::new(&s.sub("enc0"), in_ch, hidden, 3, 2)?, Conv::new(&s.sub("enc1"), hidden, latent, 3, 2)?],
            dec: [Conv::new(&s.sub("dec0"), latent, hidden, 3, 1)?, Conv::new(&s.sub("dec1"), hidden, hidden / 2, 3, 1)?],
            out,
            prior: FactorizedPrior::new(&s.sub("prior"), latent, support)?,
            substream,
        })
    }

    pub fn analyze(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h % 4 != 0 || w % 4 != 0 {
            return contract(format!("latent codec input {h}x{w} must be divisible by 4"));
        }
        self.enc[1].forward(&lrelu(&self.enc[0].forward(x)?)?)
    }

    /// Upsampling is bilinear, so a constant latent decodes to a constant field.
    pub fn synthesize(&self, y_hat: &Tensor) -> Result<Tensor> {
        let h = upsample_bilinear2x(&lrelu(&self.dec[0].forward(y_hat)?)?)?;
        let h = upsample_bilinear2x(&lrelu(&self.dec[1].forward(&h)?)?)?;
        self.out.forward(&h)
    }

    pub fn forward_train(&self, x: &Tensor, rate_quant: QuantMode, rng: Option<&mut ChaCha8Rng>) -> Result<CodecOutput> {
        let y = self.analyze(x)?;
        let y_hat = quantize_ste(&y, QuantMode::Round, None)?;
        let y_rate = match rate_quant {
            QuantMode::Round => y_hat.clone(),
            QuantMode::Noise => quantize_ste(&y, QuantMode::Noise, rng)?,
        };
        let bits = likelihood_bits(&self.prior.likelihood(&y_rate)?)?;
        Ok(CodecOutput { recon: self.synthesize(&y_hat)?, bits, latent: y })
    }

    /// Quantize, reconstruct from the quantized symbols exactly as the
    /// decoder will, and measure the rate under the coding tables.
    pub fn encode(&self, x: &Tensor) -> Result<(LatentCode, Tensor, f64)> {
        let y = self.analyze(x)?;
        let code = LatentCode::new(tensor_to_symbols(&y)?, dims4(&y)?, self.substream);
        let recon = self.decode(&code)?;
        let bits = estimate_rate(&code.symbols, &self.table_indices(code.dims), &self.tables()?);
        Ok((code, recon, bits))
    }

    pub fn decode(&self, code: &LatentCode) -> Result<Tensor> {
        self.synthesize(&code.to_tensor(self.enc[0].weight.dtype())?)
    }

    pub fn tables(&self) -> Result<Vec<CdfTable>> {
        self.prior.tables()
    }

    pub fn table_indices(&self, dims: [usize; 4]) -> Vec<usize> {
        self.prior.table_indices(&dims)
    }

    /// Latent shape for an input of the given spatial size.
    pub fn latent_dims(&self, batch: usize, h: usize, w: usize) -> [usize; 4] {
        [batch, self.prior.channels(), h / 4, w / 4]
    }
}

/// Flow at the original, half and quarter scales.
#[derive(Clone)]
pub struct FlowPyramid {
    pub levels: [MotionField; 3],
}

/// `{v, down(v, 2), down(down(v, 2), 2)}`.
pub fn build_flow_pyramid(v_hat: &MotionField) -> Result<FlowPyramid> {
    let l1 = flow_downsample(v_hat, 2)?;
    let l2 = flow_downsample(&l1, 2)?;
    Ok(FlowPyramid { levels: [v_hat.clone(), l1, l2] })
}

/// Coarse-to-fine residual flow estimator over a 3-level image pyramid.
#[derive(Clone)]
pub struct FlowNet {
    levels: Vec<Vec<Conv>>,
}

impl FlowNet {
    pub fn new(s: &Scope, hidden: usize) -> Result<Self> {
        let mut levels = Vec::new();
        for l in 0..3 {
            let s = s.sub(&format!("level{l}"));
            let mut convs = vec![Conv::new(&s.sub("c0"), 8, hidden, 3, 1)?];
            for i in 1..4 {
                convs.push(Conv::new(&s.sub(&format!("c{i}")), hidden, hidden, 3, 1)?);
            }
            convs.push(Conv::zeroed(&s.sub("c4"), hidden, 2, 3, 1)?);
            levels.push(convs);
        }
        Ok(Self { levels })
    }

    /// Flow `v` such that `warp(x_ref, v) ~ x_t`.
    pub fn estimate(&self, x_t: &Tensor, x_ref: &Tensor) -> Result<MotionField> {
        if x_t.dims() != x_ref.dims() {
            return contract(format!("frame dims {:?} vs {:?}", x_t.dims(), x_ref.dims()));
        }
        let (b, _, h, w) = x_t.dims4()?;
        if h % 4 != 0 || w % 4 != 0 {
            return contract(format!("flow estimation needs dims divisible by 4, got {h}x{w}"));
        }
        let cur = [x_t.clone(), x_t.avg_pool2d(2)?, x_t.avg_pool2d(4)?];
        let refs = [x_ref.clone(), x_ref.avg_pool2d(2)?, x_ref.avg_pool2d(4)?];
        let mut flow = Tensor::zeros((b, 2, h / 4, w / 4), x_t.dtype(), x_t.device())?;
        for l in (0..3).rev() {
            if l < 2 {
                flow = (upsample_bilinear2x(&flow)? * 2.0)?;
            }
            let warped = bilinear_warp(&refs[l], &flow)?;
            let mut a = Tensor::cat(&[&cur[l], &warped, &flow], 1)?;
            let convs = &self.levels[l];
            for (i, c) in convs.iter().enumerate() {
                a = c.forward(&a)?;
                if i + 1 < convs.len() {
                    a = lrelu(&a)?;
                }
            }
            flow = (flow + a)?;
        }
        Ok(flow)
    }
}

/// Flow estimation and coding.
#[derive(Clone)]
pub struct MotionModule {
    pub net: FlowNet,
    pub codec: LatentCodec,
}

impl MotionModule {
    pub fn new(s: &Scope, cfg: &crate::config::ModelConfig) -> Result<Self> {
        Ok(Self {
            net: FlowNet::new(&s.sub("flownet"), cfg.flow_hidden)?,
            codec: LatentCodec::new(
                &s.sub("flowcodec"),
                2,
                cfg.motion_latent,
                cfg.motion_latent,
                3,
                false,
                cfg.factorized_support,
                SubstreamId::Flow,
            )?,
        })
    }

    pub fn estimate_flow(&self, x_t: &Tensor, x_ref: &Tensor) -> Result<MotionField> {
        self.net.estimate(x_t, x_ref)
    }

    /// Returns the code, the decoded flow and its rate in bits.
    pub fn encode_flow(&self, v: &MotionField) -> Result<(LatentCode, MotionField, f64)> {
        self.codec.encode(v)
    }

    pub fn decode_flow(&self, code: &LatentCode) -> Result<MotionField> {
        if code.substream != SubstreamId::Flow {
            return contract("decode_flow given a non-flow latent");
        }
        self.codec.decode(code)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::nn::ParamStore;

    fn flat(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    }

    fn module() -> MotionModule {
        let ps = ParamStore::new(0, DType::F32);
        MotionModule::new(&ps.root(), &ModelConfig::default()).unwrap()
    }

    #[test]
    fn flow_has_frame_shape_and_starts_at_zero() {
        let m = module();
        let x = crate::gradcheck::randn(&[1, 3, 16, 24], 0.2, 1).unwrap().to_dtype(DType::F32).unwrap();
        let y = crate::gradcheck::randn(&[1, 3, 16, 24], 0.2, 2).unwrap().to_dtype(DType::F32).unwrap();
        let v = m.estimate_flow(&x, &y).unwrap();
        assert_eq!(v.dims(), &[1, 2, 16, 24]);
        assert!(flat(&v).iter().all(|&a| a == 0.0));
        assert!(m.estimate_flow(&x, &y.narrow(3, 0, 20).unwrap()).is_err());
    }

    #[test]
    fn flow_roundtrip_is_exact() {
        let m = module();
        let v = (crate::gradcheck::randn(&[1, 2, 16, 16], 3.0, 4).unwrap().to_dtype(DType::F32).unwrap()).clone();
        let (code, v_hat, bits) = m.encode_flow(&v).unwrap();
        assert!(bits >= 0.0);
        assert_eq!(code.dims, [1, 64, 4, 4]);
        assert_eq!(flat(&m.decode_flow(&code).unwrap()), flat(&v_hat));
    }

    #[test]
    fn zero_latent_decodes_to_constant_field() {
        let m = module();
        let code = LatentCode::new(vec![0; 64 * 16], [1, 64, 4, 4], SubstreamId::Flow);
        let v = m.decode_flow(&code).unwrap();
        assert_eq!(v.dims(), &[1, 2, 16, 16]);
        let f = flat(&v);
        for c in 0..2 {
            let ch = &f[c * 256..(c + 1) * 256];
            assert!(ch.iter().all(|&a| (a - ch[0]).abs() < 1e-5));
        }
        let code = LatentCode::new((0..64 * 16).map(|i| (i % 7) - 3).collect(), [1, 64, 4, 4], SubstreamId::Flow);
        assert_eq!(m.decode_flow(&code).unwrap().dims(), &[1, 2, 16, 16]);
    }

    #[test]
    fn pyramid_levels() {
        let c = Tensor::full(8f32, (1, 2, 8, 8), &tensor_ops::cpu()).unwrap();
        let p = build_flow_pyramid(&c).unwrap();
        assert!(flat(&p.levels[1]).iter().all(|&a| a == 4.0));
        assert!(flat(&p.levels[2]).iter().all(|&a| a == 2.0));
        assert_eq!(p.levels[2].dims(), &[1, 2, 2, 2]);
        let r = crate::gradcheck::randn(&[1, 2, 8, 8], 1.0, 3).unwrap();
        let p = build_flow_pyramid(&r).unwrap();
        let again = flow_downsample(&p.levels[1], 2).unwrap();
        assert_eq!(
            p.levels[2].flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            again.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        let z = build_flow_pyramid(&Tensor::zeros((1, 2, 8, 8), DType::F32, &tensor_ops::cpu()).unwrap()).unwrap();
        assert!(z.levels.iter().all(|l| flat(l).iter().all(|&a| a == 0.0)));
    }
}
