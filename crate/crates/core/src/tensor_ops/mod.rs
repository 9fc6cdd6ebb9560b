//! Differentiable primitives shared by every network in the codec.
//!
//! Conventions, fixed crate-wide:
//! - tensors are `(batch, channels, height, width)`;
//! - flow channel 0 is the horizontal displacement, channel 1 the vertical,
//!   both in pixels at the tensor's own resolution;
//! - all sampling replicates the frame border;
//! - bilinear resizing uses the half-pixel (align-corners = false) grid.

mod kernels;

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
pub use kernels::{Col2Im, Im2Col, Padding, SampleTaps};

/// Deformable sampling configuration.
///
/// Taps enumerate the `kernel_size x kernel_size` grid centred at zero in
/// row-major order; that order is also the channel order of coded offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DeformKernelSpec {
    pub kernel_size: usize,
    pub groups: usize,
    pub modulated: bool,
}

impl Default for DeformKernelSpec {
    fn default() -> Self {
        Self { kernel_size: 3, groups: 8, modulated: true }
    }
}

impl DeformKernelSpec {
    pub fn taps(&self) -> usize {
        self.kernel_size * self.kernel_size
    }

    /// Grid position `(dx, dy)` of tap `t`.
    pub fn tap_position(&self, t: usize) -> (i64, i64) {
        let half = (self.kernel_size / 2) as i64;
        ((t % self.kernel_size) as i64 - half, (t / self.kernel_size) as i64 - half)
    }

    pub fn displacement_channels(&self) -> usize {
        2 * self.groups * self.taps()
    }

    pub fn mask_channels(&self) -> usize {
        if self.modulated {
            self.groups * self.taps()
        } else {
            0
        }
    }

    /// Channels of a full offset field: displacements then masks.
    pub fn offset_channels(&self) -> usize {
        self.displacement_channels() + self.mask_channels()
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return contract(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        if self.groups == 0 || channels % self.groups != 0 {
            return contract(format!("{channels} channels not divisible into {} groups", self.groups));
        }
        Ok(())
    }
}

/// 2D convolution with replicate ("same") padding, lowered to im2col + matmul.
///
/// `weight` is `(c_out, c_in, k, k)`; output spatial size is `ceil(in / stride)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    conv2d_padded(x, weight, bias, stride, Padding::Replicate)
}

pub fn conv2d_padded(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let (b, c_in, h, w) = x.dims4()?;
    let (c_out, wc_in, kh, kw) = weight.dims4()?;
    if wc_in != c_in {
        return contract(format!("conv2d: input has {c_in} channels, kernel expects {wc_in}"));
    }
    let (out, ho, wo) = if kh == 1 && kw == 1 && stride == 1 {
        let cols = x.reshape((b, c_in, h * w))?;
        (matmul_weight(&weight.reshape((c_out, c_in))?, &cols)?, h, w)
    } else {
        let op = Im2Col { kh, kw, stride, padding };
        let (ho, wo) = op.output_hw(h, w);
        let cols = x.contiguous()?.apply_op1(op)?;
        (matmul_weight(&weight.reshape((c_out, c_in * kh * kw))?, &cols)?, ho, wo)
    };
    let out = out.reshape((b, c_out, ho, wo))?;
    Ok(match bias {
        Some(bias) => out.broadcast_add(&bias.reshape((1, c_out, 1, 1))?)?,
        None => out,
    })
}

/// `(o, k) x (b, k, l) -> (b, o, l)`.
fn matmul_weight(w: &Tensor, cols: &Tensor) -> Result<Tensor> {
    let (b, k, l) = cols.dims3()?;
    if b == 1 {
        Ok(w.matmul(&cols.reshape((k, l))?)?.unsqueeze(0)?)
    } else {
        Ok(w.broadcast_matmul(cols)?)
    }
}

/// Depthwise `k x k` convolution; `weight` is `(c, 1, k, k)`.
pub fn depthwise_conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (wc, _, kh, kw) = weight.dims4()?;
    if wc != c {
        return contract(format!("depthwise conv: {c} channels, kernel has {wc}"));
    }
    let op = Im2Col { kh, kw, stride: 1, padding: Padding::Replicate };
    let cols = x.contiguous()?.apply_op1(op)?.reshape((b, c, kh * kw, h * w))?;
    let out = cols
        .broadcast_mul(&weight.reshape((1, c, kh * kw, 1))?)?
        .sum(2)?
        .reshape((b, c, h, w))?;
    Ok(match bias {
        Some(bias) => out.broadcast_add(&bias.reshape((1, c, 1, 1))?)?,
        None => out,
    })
}

fn check_flow(x: &Tensor, flow: &Tensor) -> Result<()> {
    let (b, _, h, w) = x.dims4()?;
    let (fb, fc, fh, fw) = flow.dims4()?;
    if fc != 2 || fb != b || fh != h || fw != w {
        return contract(format!(
            "flow shape {:?} does not match features {:?}",
            flow.dims(),
            x.dims()
        ));
    }
    Ok(())
}

/// Backward bilinear warp: `out(p) = x(p + flow(p))`.
pub fn bilinear_warp(x: &Tensor, flow: &Tensor) -> Result<Tensor> {
    check_flow(x, flow)?;
    Ok(x.contiguous()?.apply_op2(&flow.contiguous()?, SampleTaps { groups: 1, kernel: 1 })?)
}

/// Sigmoid scaled by two, so a zero pre-activation gives a unit mask.
pub fn mask_activation(m: &Tensor) -> Result<Tensor> {
    Ok((candle_nn::ops::sigmoid(m)? * 2.0)?)
}

/// Flow-guided modulated deformable convolution.
///
/// For output position `p`, group `g` and tap `k`, samples `x` at
/// `p + p_k + base_flow(p) + offsets_disp[g,k](p)`, scales by the activated
/// mask when `spec.modulated`, and mixes taps with `weight`
/// (`(c_out, c_in, K, K)`). `offsets` holds `2*G*K^2` displacement channels
/// followed by `G*K^2` pre-activation mask channels.
pub fn deform_sample(
    x: &Tensor,
    base_flow: &Tensor,
    offsets: &Tensor,
    spec: &DeformKernelSpec,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    spec.validate(c)?;
    check_flow(x, base_flow)?;
    let (ob, oc, oh, ow) = offsets.dims4()?;
    if oc != spec.offset_channels() || ob != b || oh != h || ow != w {
        return contract(format!(
            "offset field {:?} inconsistent with kernel spec (expected {} channels at {h}x{w})",
            offsets.dims(),
            spec.offset_channels()
        ));
    }
    let taps = spec.taps();
    let g = spec.groups;
    let disp = offsets
        .narrow(1, 0, spec.displacement_channels())?
        .reshape((b, g * taps, 2, h, w))?
        .broadcast_add(&base_flow.unsqueeze(1)?)?
        .reshape((b, g * taps * 2, h, w))?;
    let cols = x
        .contiguous()?
        .apply_op2(&disp.contiguous()?, SampleTaps { groups: g, kernel: spec.kernel_size })?;
    let cols = if spec.modulated {
        let m = mask_activation(&offsets.narrow(1, spec.displacement_channels(), spec.mask_channels())?)?;
        cols.reshape((b, g, c / g, taps, h * w))?
            .broadcast_mul(&m.reshape((b, g, 1, taps, h * w))?)?
    } else {
        cols
    };
    let cols = cols.reshape((b, c * taps, h * w))?;
    let (c_out, wc, kh, kw) = weight.dims4()?;
    if wc != c || kh * kw != taps {
        return contract(format!("deform weight {:?} incompatible with {c} channels", weight.dims()));
    }
    let out = matmul_weight(&weight.reshape((c_out, c * taps))?, &cols)?.reshape((b, c_out, h, w))?;
    Ok(match bias {
        Some(bias) => out.broadcast_add(&bias.reshape((1, c_out, 1, 1))?)?,
        None => out,
    })
}

/// Average-pool a flow by `factor` and rescale it to the coarser pixel grid.
pub fn flow_downsample(flow: &Tensor, factor: usize) -> Result<Tensor> {
    let (_, c, h, w) = flow.dims4()?;
    if c != 2 {
        return contract(format!("flow must have 2 channels, got {c}"));
    }
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return contract(format!("flow {h}x{w} not divisible by factor {factor}"));
    }
    if factor == 1 {
        return Ok(flow.clone());
    }
    Ok((flow.avg_pool2d(factor)? / factor as f64)?)
}

/// Bilinear 2x upsampling on the half-pixel grid with border replication.
pub fn upsample_bilinear2x(x: &Tensor) -> Result<Tensor> {
    let x = upsample_axis(x, 3)?;
    upsample_axis(&x, 2)
}

fn upsample_axis(x: &Tensor, dim: usize) -> Result<Tensor> {
    let n = x.dim(dim)?;
    let (prev, next) = if n == 1 {
        (x.clone(), x.clone())
    } else {
        (
            Tensor::cat(&[x.narrow(dim, 0, 1)?, x.narrow(dim, 0, n - 1)?], dim)?,
            Tensor::cat(&[x.narrow(dim, 1, n - 1)?, x.narrow(dim, n - 1, 1)?], dim)?,
        )
    };
    let even = ((x * 0.75)? + (prev * 0.25)?)?;
    let odd = ((x * 0.75)? + (next * 0.25)?)?;
    let mut dims = x.dims().to_vec();
    dims[dim] *= 2;
    Ok(Tensor::stack(&[even, odd], dim + 1)?.reshape(dims)?)
}

/// Bilinear upsampling of an offset field by a power of two.
///
/// The first `displacement_channels` channels are pixel displacements and are
/// multiplied by `factor`; the remaining (mask) channels are only resampled.
pub fn offset_upsample(offsets: &Tensor, factor: usize, displacement_channels: usize) -> Result<Tensor> {
    if factor == 0 || !factor.is_power_of_two() {
        return contract(format!("offset upsample factor must be a power of two, got {factor}"));
    }
    let c = offsets.dim(1)?;
    if displacement_channels > c {
        return contract("more displacement channels than offset channels");
    }
    let mut up = offsets.clone();
    let mut f = factor;
    while f > 1 {
        up = upsample_bilinear2x(&up)?;
        f /= 2;
    }
    if factor == 1 || displacement_channels == 0 {
        return Ok(up);
    }
    let disp = (up.narrow(1, 0, displacement_channels)? * factor as f64)?;
    if displacement_channels == c {
        return Ok(disp);
    }
    Ok(Tensor::cat(&[disp, up.narrow(1, displacement_channels, c - displacement_channels)?], 1)?)
}

/// Sub-pixel rearrangement `(b, c*r*r, h, w) -> (b, c, h*r, w*r)`.
///
/// Preceded by a 1x1 conv this is exactly a stride-`r`, kernel-`r`
/// transposed convolution.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c % (r * r) != 0 {
        return contract(format!("pixel shuffle: {c} channels not divisible by {}", r * r));
    }
    let oc = c / (r * r);
    Ok(x.reshape((b, oc, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .contiguous()?
        .reshape((b, oc, h * r, w * r))?)
}

/// Quantization surrogate used for latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    /// Additive uniform noise in `[-0.5, 0.5)`.
    Noise,
    /// Rounding (ties away from zero) with a pass-through gradient.
    Round,
}

/// Nearest-integer rounding, ties away from zero.
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

pub fn quantize_ste(y: &Tensor, mode: QuantMode, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
    match mode {
        QuantMode::Round => {
            let r = y.round()?;
            Ok((y + (r - y)?.detach())?)
        }
        QuantMode::Noise => {
            let Some(rng) = rng else {
                return contract("noise quantization needs an rng");
            };
            let n = y.elem_count();
            let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
            let u = Tensor::from_vec(u, y.shape(), y.device())?.to_dtype(y.dtype())?;
            Ok((y + u)?)
        }
    }
}

/// Element-wise finiteness check.
pub fn all_finite(t: &Tensor) -> Result<bool> {
    let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

/// Channel concatenation shorthand.
pub fn cat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    Ok(Tensor::cat(parts, 1)?)
}

/// Global average over spatial dims, keeping `(b, c, 1, 1)`.
pub fn spatial_mean(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?)
}

pub fn zeros_like_flow(x: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = x.dims4()?;
    Ok(Tensor::zeros((b, 2, h, w), x.dtype(), x.device())?)
}

pub fn cpu() -> Device {
    Device::Cpu
}
