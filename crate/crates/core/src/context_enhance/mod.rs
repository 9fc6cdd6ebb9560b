//! Local-global context enhancement: progressive deformable alignment at
//! every scale, channel cross-attention at the quarter scale, channel-spatial
//! fusion and hierarchical multi-scale fusion.
//!
//! Nothing here reads the current frame or produces bits, so encoder and
//! decoder compute identical outputs from identical decoded inputs.

use std::cell::RefCell;
use std::rc::Rc;

use candle_core::{Tensor, D};

use crate::config::{AblationConfig, ModelConfig};
use crate::error::{contract, Result};
use crate::hybrid_context::{ContextSet, ContextStage, DeformConv, FeaturePyramid, OffsetField};
use crate::motion::FlowPyramid;
use crate::nn::{lrelu, ChannelNorm, Conv, Init, Scope, SubpixelUp};
use crate::tensor_ops::{depthwise_conv2d, offset_upsample, DeformKernelSpec};

/// Outputs of every enhancement step.
#[derive(Clone)]
pub struct EnhancedContexts {
    /// `C~^l`.
    pub local: [Tensor; 3],
    /// `C^2` after cross-attention (equal to `local[2]` when disabled).
    pub global: Tensor,
    /// Fused quarter-scale context.
    pub fused_small: Tensor,
    /// `C-bar^l`, the contexts handed to the contextual codec.
    pub fin: [Tensor; 3],
    /// Derived enhancement offsets per scale (full resolution of the scale).
    pub offsets: [Option<Tensor>; 3],
}

/// Mean displacement over all groups and taps, `(b, 2, h, w)`.
pub fn mean_tap_displacement(o: &Tensor, spec: &DeformKernelSpec) -> Result<Tensor> {
    let (b, _, h, w) = o.dims4()?;
    let n = spec.groups * spec.taps();
    Ok(o.narrow(1, 0, spec.displacement_channels())?.reshape((b, n, 2, h, w))?.mean(1)?)
}

/// Offset predictor and deformable alignment for one scale.
#[derive(Clone)]
struct LocalStage {
    squeeze: Option<Conv>,
    hidden: Conv,
    head: Conv,
    deform: DeformConv,
    guide_channels: usize,
}

impl LocalStage {
    fn new(s: &Scope, c: usize, m: &ModelConfig, guided: bool, stride: usize) -> Result<Self> {
        let oc = m.deform.offset_channels();
        let g = if guided { m.guide_channels } else { 0 };
        Ok(Self {
            squeeze: if guided { Some(Conv::zeroed(&s.sub("squeeze"), oc, m.guide_channels, 1, 1)?) } else { None },
            hidden: Conv::new(&s.sub("hidden"), 2 * c + 2 + g, m.enhance_hidden, 3, stride)?,
            head: Conv::zeroed(&s.sub("head"), m.enhance_hidden, oc, 1, 1)?,
            deform: DeformConv::new(&s.sub("deform"), c, m.deform)?,
            guide_channels: m.guide_channels,
        })
    }

    /// Predict `o~` from the context, reference, base flow and (optionally)
    /// the upsampled offsets of the coarser scale.
    fn offsets(&self, ctx: &Tensor, f: &Tensor, base: &Tensor, coarser: Option<&Tensor>) -> Result<Tensor> {
        let mut parts = vec![ctx.clone(), f.clone(), base.clone()];
        if let Some(sq) = &self.squeeze {
            let (b, _, h, w) = ctx.dims4()?;
            parts.push(match coarser {
                Some(o) => sq.forward(o)?,
                None => Tensor::zeros((b, self.guide_channels, h, w), ctx.dtype(), ctx.device())?,
            });
        }
        let a = lrelu(&self.hidden.forward(&Tensor::cat(&parts, 1)?)?)?;
        self.head.forward(&a)
    }
}

/// Restormer-style block with channel cross-attention (queries from the
/// context, keys and values from the reference) and a gated feed-forward.
#[derive(Clone)]
pub struct CrossAttentionBlock {
    heads: usize,
    norm_q: ChannelNorm,
    norm_kv: ChannelNorm,
    q: Conv,
    q_dw: Tensor,
    kv: Conv,
    kv_dw: Tensor,
    temperature: Tensor,
    proj: Conv,
    ffn: GatedFeedForward,
}

impl CrossAttentionBlock {
    pub fn new(s: &Scope, d: usize, heads: usize, expansion: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return contract(format!("{heads} heads do not divide {d} channels"));
        }
        Ok(Self {
            heads,
            norm_q: ChannelNorm::new(&s.sub("norm_q"), d)?,
            norm_kv: ChannelNorm::new(&s.sub("norm_kv"), d)?,
            q: Conv::new(&s.sub("q"), d, d, 1, 1)?,
            q_dw: s.param("q_dw", &[d, 1, 3, 3], Init::Kaiming { fan_in: 9 })?,
            kv: Conv::new(&s.sub("kv"), d, 2 * d, 1, 1)?,
            kv_dw: s.param("kv_dw", &[2 * d, 1, 3, 3], Init::Kaiming { fan_in: 9 })?,
            temperature: s.param("temperature", &[heads, 1, 1], Init::Const(1.0))?,
            proj: Conv::new(&s.sub("proj"), d, d, 1, 1)?,
            ffn: GatedFeedForward::new(&s.sub("ffn"), d, expansion)?,
        })
    }

    fn project(&self, ctx: &Tensor, reference: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let d = ctx.dim(1)?;
        let q = depthwise_conv2d(&self.q.forward(&self.norm_q.forward(ctx)?)?, &self.q_dw, None)?;
        let kv = depthwise_conv2d(&self.kv.forward(&self.norm_kv.forward(reference)?)?, &self.kv_dw, None)?;
        Ok((q, kv.narrow(1, 0, d)?, kv.narrow(1, d, d)?))
    }

    fn heads_view(&self, t: &Tensor) -> Result<Tensor> {
        let (b, d, h, w) = t.dims4()?;
        Ok(t.reshape((b, self.heads, d / self.heads, h * w))?)
    }

    fn l2_normalize(t: &Tensor) -> Result<Tensor> {
        let n = t.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.maximum(1e-12)?;
        Ok(t.broadcast_div(&n)?)
    }

    /// Attention over channels, `(b, heads, d/heads, d/heads)`; rows sum to one.
    pub fn attention_map(&self, q: &Tensor, k: &Tensor) -> Result<Tensor> {
        let q = Self::l2_normalize(&self.heads_view(q)?)?;
        let k = Self::l2_normalize(&self.heads_view(k)?)?;
        let logits = q.matmul(&k.transpose(2, 3)?.contiguous()?)?.broadcast_mul(&self.temperature.unsqueeze(0)?)?;
        Ok(candle_nn::ops::softmax(&logits, D::Minus1)?)
    }

    /// `A V` before the output projection, together with the projected `V`.
    pub fn attend(&self, ctx: &Tensor, reference: &Tensor) -> Result<(Tensor, Tensor)> {
        let (q, k, v) = self.project(ctx, reference)?;
        let a = self.attention_map(&q, &k)?;
        let out = a.matmul(&self.heads_view(&v)?.contiguous()?)?.reshape(ctx.dims())?;
        Ok((out, v))
    }

    pub fn forward(&self, ctx: &Tensor, reference: &Tensor) -> Result<Tensor> {
        if ctx.dims() != reference.dims() {
            return contract(format!("attention inputs {:?} vs {:?}", ctx.dims(), reference.dims()));
        }
        let (att, _) = self.attend(ctx, reference)?;
        let x = (ctx + self.proj.forward(&att)?)?;
        Ok((&x + self.ffn.forward(&x)?)?)
    }
}

/// Gated-Dconv feed-forward: `W3 (gelu(dw(W1 x)) * dw(W2 x))` on a
/// channel-normalised input.
#[derive(Clone)]
pub struct GatedFeedForward {
    norm: ChannelNorm,
    inp: Conv,
    dw: Tensor,
    out: Conv,
    hidden: usize,
}

impl GatedFeedForward {
    pub fn new(s: &Scope, d: usize, expansion: usize) -> Result<Self> {
        let hidden = d * expansion;
        Ok(Self {
            norm: ChannelNorm::new(&s.sub("norm"), d)?,
            inp: Conv::new(&s.sub("in"), d, 2 * hidden, 1, 1)?,
            dw: s.param("dw", &[2 * hidden, 1, 3, 3], Init::Kaiming { fan_in: 9 })?,
            out: Conv::new(&s.sub("out"), hidden, d, 1, 1)?,
            hidden,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = depthwise_conv2d(&self.inp.forward(&self.norm.forward(x)?)?, &self.dw, None)?;
        let gate = h.narrow(1, 0, self.hidden)?.gelu_erf()?;
        let val = h.narrow(1, self.hidden, self.hidden)?;
        self.out.forward(&(gate * val)?)
    }
}

/// Channel gate then spatial gate over the concatenated local and global
/// contexts, followed by a projection back to `c2` channels.
#[derive(Clone)]
pub struct ChannelSpatialFusion {
    fc1: Conv,
    fc2: Conv,
    spatial: Conv,
    out: Conv,
    /// Added to both gate pre-activations; a large value forces gates open.
    gate_bias: Rc<RefCell<f64>>,
}

impl ChannelSpatialFusion {
    pub fn new(s: &Scope, c2: usize) -> Result<Self> {
        let c = 2 * c2;
        let r = (c / 8).max(1);
        Ok(Self {
            fc1: Conv::new(&s.sub("fc1"), c, r, 1, 1)?,
            fc2: Conv::new(&s.sub("fc2"), r, c, 1, 1)?,
            spatial: Conv::new(&s.sub("spatial"), 2, 1, 7, 1)?,
            out: Conv::new(&s.sub("out"), c, c2, 1, 1)?,
            gate_bias: Rc::new(RefCell::new(0.0)),
        })
    }

    /// Test hook: shift both gate pre-activations by `bias`.
    pub fn set_gate_bias(&self, bias: f64) {
        *self.gate_bias.borrow_mut() = bias;
    }

    pub fn channel_gate(&self, x: &Tensor) -> Result<Tensor> {
        let avg = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
        let max = x.max_keepdim(D::Minus1)?.max_keepdim(D::Minus2)?;
        let mlp = |t: &Tensor| -> Result<Tensor> { self.fc2.forward(&self.fc1.forward(t)?.relu()?) };
        let pre = ((mlp(&avg)? + mlp(&max)?)? + *self.gate_bias.borrow())?;
        Ok(candle_nn::ops::sigmoid(&pre)?)
    }

    pub fn spatial_gate(&self, x: &Tensor) -> Result<Tensor> {
        let avg = x.mean_keepdim(1)?;
        let max = x.max_keepdim(1)?;
        let pre = (self.spatial.forward(&Tensor::cat(&[avg, max], 1)?)? + *self.gate_bias.borrow())?;
        Ok(candle_nn::ops::sigmoid(&pre)?)
    }

    pub fn forward(&self, local: &Tensor, global: &Tensor) -> Result<Tensor> {
        if local.dims() != global.dims() {
            return contract(format!("fusion inputs {:?} vs {:?}", local.dims(), global.dims()));
        }
        let x = Tensor::cat(&[local, global], 1)?;
        let x = x.broadcast_mul(&self.channel_gate(&x)?)?;
        let x = x.broadcast_mul(&self.spatial_gate(&x)?)?;
        self.out.forward(&x)
    }

    /// The final projection alone, applied to the raw concatenation.
    pub fn project(&self, local: &Tensor, global: &Tensor) -> Result<Tensor> {
        self.out.forward(&Tensor::cat(&[local, global], 1)?)
    }
}

/// Coarse-to-fine fusion of the per-scale contexts.
#[derive(Clone)]
pub struct HierarchicalFuse {
    up2: SubpixelUp,
    fuse1: Conv,
    up1: SubpixelUp,
    fuse0: Conv,
}

impl HierarchicalFuse {
    pub fn new(s: &Scope, m: &ModelConfig) -> Result<Self> {
        Ok(Self {
            up2: SubpixelUp::new(&s.sub("up2"), m.c2, m.c1)?,
            fuse1: Conv::new(&s.sub("fuse1"), 2 * m.c1, m.c1, 3, 1)?,
            up1: SubpixelUp::new(&s.sub("up1"), m.c1, m.c0)?,
            fuse0: Conv::new(&s.sub("fuse0"), 2 * m.c0, m.c0, 1, 1)?,
        })
    }

    pub fn forward(&self, c0: &Tensor, c1: &Tensor, c2: &Tensor) -> Result<[Tensor; 3]> {
        let f1 = self.fuse1.forward(&Tensor::cat(&[c1, &self.up2.forward(c2)?], 1)?)?;
        let f0 = self.fuse0.forward(&Tensor::cat(&[c0, &self.up1.forward(&f1)?], 1)?)?;
        Ok([f0, f1, c2.clone()])
    }
}

/// The full enhancement pipeline under a given ablation configuration.
#[derive(Clone)]
pub struct ContextEnhancer {
    pub ablation: AblationConfig,
    spec: DeformKernelSpec,
    local: [Option<LocalStage>; 3],
    pub attention: Vec<CrossAttentionBlock>,
    pub fusion: Option<ChannelSpatialFusion>,
    pub hier: HierarchicalFuse,
    order: Rc<RefCell<Vec<usize>>>,
}

impl ContextEnhancer {
    pub fn new(s: &Scope, m: &ModelConfig, ablation: &AblationConfig) -> Result<Self> {
        let cs = [m.c0, m.c1, m.c2];
        let mut local: [Option<LocalStage>; 3] = [None, None, None];
        for (l, slot) in local.iter_mut().enumerate() {
            if ablation.local_fgdc[l] {
                // scale 0 predicts at half resolution and upsamples
                let stride = if l == 0 { 2 } else { 1 };
                *slot = Some(LocalStage::new(&s.sub(&format!("local{l}")), cs[l], m, l < 2, stride)?);
            }
        }
        let (attention, fusion) = if ablation.cross_attention {
            let a = &m.attention;
            let blocks = (0..a.blocks)
                .map(|i| CrossAttentionBlock::new(&s.sub(&format!("attn{i}")), m.c2, a.heads, a.ffn_expansion))
                .collect::<Result<Vec<_>>>()?;
            (blocks, Some(ChannelSpatialFusion::new(&s.sub("fusion"), m.c2)?))
        } else {
            (Vec::new(), None)
        };
        Ok(Self {
            ablation: ablation.clone(),
            spec: m.deform,
            local,
            attention,
            fusion,
            hier: HierarchicalFuse::new(&s.sub("hier"), m)?,
            order: Rc::new(RefCell::new(Vec::new())),
        })
    }

    /// Scales in the order their enhancement offsets were computed since the
    /// last call to [`Self::take_order`].
    pub fn take_order(&self) -> Vec<usize> {
        std::mem::take(&mut *self.order.borrow_mut())
    }

    /// Progressive deformable alignment, coarsest scale first.
    ///
    /// Returns `C~^l` and the derived offsets `o~^l`.
    pub fn local_enhance(
        &self,
        ctx: &ContextSet,
        refp: &FeaturePyramid,
        flows: &FlowPyramid,
        o_bar: Option<&OffsetField>,
    ) -> Result<([Tensor; 3], [Option<Tensor>; 3])> {
        if ctx.stage != ContextStage::Generated {
            return contract("local enhancement expects generated contexts");
        }
        let dc = self.spec.displacement_channels();
        let mut out = ctx.c.clone();
        let mut offs: [Option<Tensor>; 3] = [None, None, None];
        for l in (0..3).rev() {
            let Some(stage) = &self.local[l] else { continue };
            self.order.borrow_mut().push(l);
            let coarser = match &offs.get(l + 1) {
                Some(Some(o)) => Some(offset_upsample(o, 2, dc)?),
                _ => None,
            };
            let base = if l == 0 {
                match o_bar {
                    Some(o) => (&flows.levels[0] + mean_tap_displacement(&o.data, &self.spec)?)?,
                    None => flows.levels[0].clone(),
                }
            } else {
                flows.levels[l].clone()
            };
            let o = stage.offsets(&ctx.c[l], &refp.f[l], &base, coarser.as_ref())?;
            // scale 0 predicts at half resolution
            let o = if l == 0 { offset_upsample(&o, 2, dc)? } else { o };
            out[l] = stage.deform.forward(&refp.f[l], &base, &o)?;
            offs[l] = Some(o);
        }
        Ok((out, offs))
    }

    pub fn global_enhance(&self, c2: &Tensor, f2: &Tensor) -> Result<Tensor> {
        let mut x = c2.clone();
        for b in &self.attention {
            x = b.forward(&x, f2)?;
        }
        Ok(x)
    }

    pub fn fuse_local_global(&self, local: &Tensor, global: &Tensor) -> Result<Tensor> {
        match &self.fusion {
            Some(f) => f.forward(local, global),
            None => Ok(local.clone()),
        }
    }

    pub fn hierarchical_fuse(&self, c0: &Tensor, c1: &Tensor, c2: &Tensor) -> Result<[Tensor; 3]> {
        self.hier.forward(c0, c1, c2)
    }

    /// Run every enabled step and produce the final contexts.
    pub fn enhance(
        &self,
        ctx: &ContextSet,
        refp: &FeaturePyramid,
        flows: &FlowPyramid,
        o_bar: Option<&OffsetField>,
    ) -> Result<EnhancedContexts> {
        let (local, offsets) = self.local_enhance(ctx, refp, flows, o_bar)?;
        let global = if self.ablation.cross_attention {
            self.global_enhance(&local[2], &refp.f[2])?
        } else {
            local[2].clone()
        };
        let fused_small = if self.ablation.cross_attention {
            self.fuse_local_global(&local[2], &global)?
        } else {
            local[2].clone()
        };
        let fin = self.hierarchical_fuse(&local[0], &local[1], &fused_small)?;
        Ok(EnhancedContexts { local, global, fused_small, fin, offsets })
    }
}

#[cfg(test)]
mod tests;
