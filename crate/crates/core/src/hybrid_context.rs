//! Multi-scale reference features, residual offset estimation and coding,
//! and per-scale temporal context generation.

use std::cell::RefCell;

use candle_core::Tensor;

use crate::config::{AblationConfig, ModelConfig, Strategy};
use crate::error::{contract, Error, Result};
use crate::motion::{FlowPyramid, LatentCodec, SubstreamId};
use crate::nn::{lrelu, Conv, Init, Scope};
use crate::tensor_ops::{bilinear_warp, deform_sample, offset_upsample, DeformKernelSpec};

/// Features at the original, half and quarter scales.
#[derive(Clone)]
pub struct FeaturePyramid {
    pub f: [Tensor; 3],
}

/// Where a [`ContextSet`] is in the enhancement pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextStage {
    Generated,
    LocallyEnhanced,
    Fused,
}

#[derive(Clone)]
pub struct ContextSet {
    pub c: [Tensor; 3],
    pub stage: ContextStage,
}

/// Deformable offsets: `2*G*K^2` displacement channels followed by `G*K^2`
/// pre-activation mask channels.
#[derive(Clone)]
pub struct OffsetField {
    pub data: Tensor,
    pub scale_level: usize,
    /// True when stored at half the resolution of its scale level.
    pub half_res: bool,
}

/// Deformable compensation weights, initialised to pass the centre tap
/// through unchanged.
#[derive(Clone)]
pub struct DeformConv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub spec: DeformKernelSpec,
}

impl DeformConv {
    pub fn new(s: &Scope, c: usize, spec: DeformKernelSpec) -> Result<Self> {
        let k = spec.kernel_size;
        let mut w = vec![0.0; c * c * k * k];
        let centre = (k / 2) * k + k / 2;
        for i in 0..c {
            w[(i * c + i) * k * k + centre] = 1.0;
        }
        Ok(Self {
            weight: s.param("weight", &[c, c, k, k], Init::Values(w))?,
            bias: s.param("bias", &[c], Init::Const(0.0))?,
            spec,
        })
    }

    pub fn forward(&self, x: &Tensor, base_flow: &Tensor, offsets: &Tensor) -> Result<Tensor> {
        deform_sample(x, base_flow, offsets, &self.spec, &self.weight, Some(&self.bias))
    }
}

/// Reference pyramid from the propagated decoded feature.
#[derive(Clone)]
pub struct ReferencePyramid {
    refine: Conv,
    down1: Conv,
    down2: Conv,
}

impl ReferencePyramid {
    pub fn new(s: &Scope, m: &ModelConfig) -> Result<Self> {
        Ok(Self {
            refine: Conv::new(&s.sub("refine"), m.c0, m.c0, 1, 1)?,
            down1: Conv::new(&s.sub("down1"), m.c0, m.c1, 3, 2)?,
            down2: Conv::new(&s.sub("down2"), m.c1, m.c2, 3, 2)?,
        })
    }

    pub fn forward(&self, f_prev: &Tensor) -> Result<FeaturePyramid> {
        let f0 = self.refine.forward(f_prev)?;
        let f1 = self.down1.forward(&lrelu(&f0)?)?;
        let f2 = self.down2.forward(&lrelu(&f1)?)?;
        Ok(FeaturePyramid { f: [f0, f1, f2] })
    }
}

/// Encoder-only feature of the current frame, plus coarser versions when
/// offsets are coded below the original scale.
#[derive(Clone)]
pub struct CurrentFeature {
    a: Conv,
    b: Conv,
    down1: Option<Conv>,
    down2: Option<Conv>,
}

impl CurrentFeature {
    pub fn new(s: &Scope, m: &ModelConfig, deepest: usize) -> Result<Self> {
        Ok(Self {
            a: Conv::new(&s.sub("a"), 3, m.c0, 3, 1)?,
            b: Conv::new(&s.sub("b"), m.c0, m.c0, 1, 1)?,
            down1: if deepest >= 1 { Some(Conv::new(&s.sub("down1"), m.c0, m.c1, 3, 2)?) } else { None },
            down2: if deepest >= 2 { Some(Conv::new(&s.sub("down2"), m.c1, m.c2, 3, 2)?) } else { None },
        })
    }

    pub fn forward(&self, x_t: &Tensor) -> Result<Tensor> {
        self.b.forward(&lrelu(&self.a.forward(x_t)?)?)
    }

    /// Current features at levels `0..=deepest`.
    pub fn levels(&self, f0: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = vec![f0.clone()];
        if let Some(d) = &self.down1 {
            out.push(d.forward(&lrelu(f0)?)?);
            if let Some(d) = &self.down2 {
                let f1 = out[1].clone();
                out.push(d.forward(&lrelu(&f1)?)?);
            }
        }
        Ok(out)
    }
}

/// Offset estimation, coding and deformable compensation for one scale.
#[derive(Clone)]
pub struct OffsetBranch {
    pub level: usize,
    pub strategy: Strategy,
    est: [Conv; 3],
    pub codec: LatentCodec,
    pub deform: DeformConv,
}

impl OffsetBranch {
    pub fn new(s: &Scope, m: &ModelConfig, level: usize, strategy: Strategy) -> Result<Self> {
        let c = [m.c0, m.c1, m.c2][level];
        let oc = m.deform.offset_channels();
        Ok(Self {
            level,
            strategy,
            est: [
                Conv::new(&s.sub("est0"), 2 * c + 2, m.offset_hidden, 3, 2)?,
                Conv::new(&s.sub("est1"), m.offset_hidden, m.offset_hidden, 3, 1)?,
                Conv::zeroed(&s.sub("est2"), m.offset_hidden, oc, 1, 1)?,
            ],
            codec: LatentCodec::new(
                &s.sub("codec"),
                oc,
                m.motion_latent,
                m.motion_latent,
                1,
                true,
                m.factorized_support,
                SubstreamId::Offset,
            )?,
            deform: DeformConv::new(&s.sub("deform"), c, m.deform)?,
        })
    }

    fn guide_flow(&self, flow: &Tensor) -> Result<Tensor> {
        Ok(match self.strategy {
            Strategy::Dc => flow.zeros_like()?,
            _ => flow.clone(),
        })
    }

    /// Residual offsets at half the resolution of this level.
    ///
    /// The reference is first warped by the guiding flow (zero for DC).
    pub fn estimate(&self, f_t: &Tensor, f_ref: &Tensor, flow: &Tensor) -> Result<OffsetField> {
        let v = self.guide_flow(flow)?;
        let warped = bilinear_warp(f_ref, &v)?;
        let a = lrelu(&self.est[0].forward(&Tensor::cat(&[f_t, &warped, &v], 1)?)?)?;
        let a = lrelu(&self.est[1].forward(&a)?)?;
        Ok(OffsetField { data: self.est[2].forward(&a)?, scale_level: self.level, half_res: true })
    }

    /// Bring decoded half-resolution offsets to full resolution.
    pub fn restore(&self, decoded: &Tensor) -> Result<OffsetField> {
        Ok(OffsetField {
            data: offset_upsample(decoded, 2, self.deform.spec.displacement_channels())?,
            scale_level: self.level,
            half_res: false,
        })
    }

    pub fn compensate(&self, f_ref: &Tensor, flow: &Tensor, o_bar: &OffsetField) -> Result<Tensor> {
        if o_bar.half_res {
            return contract("deformable compensation needs full-resolution offsets");
        }
        self.deform.forward(f_ref, &self.guide_flow(flow)?, &o_bar.data)
    }
}

/// Per-scale counts of which generation operator ran.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StrategyCounters {
    pub flow: [usize; 3],
    pub fgdc: [usize; 3],
    pub dc: [usize; 3],
}

/// Hybrid temporal context generation for all scales.
#[derive(Clone)]
pub struct HybridContext {
    pub ablation: AblationConfig,
    pub reference: ReferencePyramid,
    pub current: CurrentFeature,
    /// Indexed by level; present exactly for levels that code offsets.
    pub branches: [Option<OffsetBranch>; 3],
    counters: std::rc::Rc<RefCell<StrategyCounters>>,
}

impl HybridContext {
    pub fn new(s: &Scope, m: &ModelConfig, ablation: &AblationConfig) -> Result<Self> {
        let mut branches: [Option<OffsetBranch>; 3] = [None, None, None];
        for (l, b) in branches.iter_mut().enumerate() {
            let st = ablation.strategy[l];
            if st.codes_offsets() {
                *b = Some(OffsetBranch::new(&s.sub(&format!("offset{l}")), m, l, st)?);
            }
        }
        let deepest = (0..3).filter(|&l| ablation.strategy[l].codes_offsets()).max().unwrap_or(0);
        Ok(Self {
            ablation: ablation.clone(),
            reference: ReferencePyramid::new(&s.sub("refpyr"), m)?,
            current: CurrentFeature::new(&s.sub("curfeat"), m, deepest)?,
            branches,
            counters: Default::default(),
        })
    }

    pub fn extract_reference_pyramid(&self, f_prev: &Tensor) -> Result<FeaturePyramid> {
        self.reference.forward(f_prev)
    }

    pub fn extract_current_feature(&self, x_t: &Tensor) -> Result<Tensor> {
        self.current.forward(x_t)
    }

    /// Residual offsets for every coding level, from current-frame features.
    pub fn estimate_residual_offsets(
        &self,
        f0_t: &Tensor,
        refp: &FeaturePyramid,
        flows: &FlowPyramid,
    ) -> Result<[Option<OffsetField>; 3]> {
        let cur = self.current.levels(f0_t)?;
        let mut out: [Option<OffsetField>; 3] = [None, None, None];
        for (l, b) in self.branches.iter().enumerate() {
            if let Some(b) = b {
                out[l] = Some(b.estimate(&cur[l], &refp.f[l], &flows.levels[l])?);
            }
        }
        Ok(out)
    }

    pub fn counters(&self) -> StrategyCounters {
        self.counters.borrow().clone()
    }

    pub fn reset_counters(&self) {
        *self.counters.borrow_mut() = StrategyCounters::default();
    }

    /// Contexts `C^l` from the reference pyramid, decoded flows and decoded
    /// full-resolution offsets.
    pub fn generate_hybrid_contexts(
        &self,
        refp: &FeaturePyramid,
        flows: &FlowPyramid,
        o_bar: &[Option<OffsetField>; 3],
    ) -> Result<ContextSet> {
        let mut c = Vec::with_capacity(3);
        for l in 0..3 {
            let st = self.ablation.strategy[l];
            let ctx = match st {
                Strategy::Flow => {
                    self.counters.borrow_mut().flow[l] += 1;
                    bilinear_warp(&refp.f[l], &flows.levels[l])?
                }
                Strategy::Fgdc | Strategy::Dc => {
                    let (Some(branch), Some(o)) = (&self.branches[l], &o_bar[l]) else {
                        return Err(Error::Config {
                            path: format!("ablation.strategy[{l}]"),
                            msg: format!("{st:?} at scale {l} requires a decoded offset stream"),
                        });
                    };
                    if st == Strategy::Fgdc {
                        self.counters.borrow_mut().fgdc[l] += 1;
                    } else {
                        self.counters.borrow_mut().dc[l] += 1;
                    }
                    branch.compensate(&refp.f[l], &flows.levels[l], o)?
                }
            };
            c.push(ctx);
        }
        let [c0, c1, c2]: [Tensor; 3] = c.try_into().map_err(|_| Error::Contract("three scales".into()))?;
        Ok(ContextSet { c: [c0, c1, c2], stage: ContextStage::Generated })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::build_flow_pyramid;
    use crate::nn::ParamStore;
    use candle_core::DType;

    fn small_model() -> ModelConfig {
        ModelConfig {
            c0: 8,
            c1: 8,
            c2: 8,
            motion_latent: 8,
            offset_hidden: 8,
            deform: DeformKernelSpec { kernel_size: 3, groups: 2, modulated: true },
            ..ModelConfig::default()
        }
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        crate::gradcheck::randn(shape, 1.0, seed).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn pyramid_shapes() {
        let ps = ParamStore::new(0, DType::F32);
        let h = HybridContext::new(&ps.root(), &ModelConfig::default(), &AblationConfig::default()).unwrap();
        let f = rand(&[1, 48, 64, 64], 1).to_dtype(DType::F32).unwrap();
        let p = h.extract_reference_pyramid(&f).unwrap();
        assert_eq!(p.f[0].dims(), &[1, 48, 64, 64]);
        assert_eq!(p.f[1].dims(), &[1, 64, 32, 32]);
        assert_eq!(p.f[2].dims(), &[1, 96, 16, 16]);
        let q = h.extract_reference_pyramid(&f).unwrap();
        assert_eq!(max_diff(&p.f[2].to_dtype(DType::F64).unwrap(), &q.f[2].to_dtype(DType::F64).unwrap()), 0.0);
        let x = rand(&[1, 3, 64, 64], 2).to_dtype(DType::F32).unwrap();
        assert_eq!(h.extract_current_feature(&x).unwrap().dims(), &[1, 48, 64, 64]);
    }

    #[test]
    fn neutral_offsets_reduce_to_flow_warping() {
        let m = small_model();
        let ps = ParamStore::new(0, DType::F64);
        let d = HybridContext::new(&ps.root(), &m, &AblationConfig::preset("D").unwrap()).unwrap();
        let a = HybridContext::new(&ps.root().sub("a"), &m, &AblationConfig::preset("A").unwrap()).unwrap();
        let refp = FeaturePyramid { f: [rand(&[1, 8, 8, 8], 1), rand(&[1, 8, 4, 4], 2), rand(&[1, 8, 2, 2], 3)] };
        let flows = build_flow_pyramid(&(rand(&[1, 2, 8, 8], 4) * 1.5).unwrap()).unwrap();
        let f0_t = rand(&[1, 8, 8, 8], 5);
        let est = d.estimate_residual_offsets(&f0_t, &refp, &flows).unwrap();
        let o = est[0].as_ref().unwrap();
        assert_eq!(o.data.dims(), &[1, 54, 4, 4]);
        assert_eq!(o.data.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let o_bar = [Some(d.branches[0].as_ref().unwrap().restore(&o.data).unwrap()), None, None];
        let cd = d.generate_hybrid_contexts(&refp, &flows, &o_bar).unwrap();
        let ca = a.generate_hybrid_contexts(&refp, &flows, &[None, None, None]).unwrap();
        for l in 0..3 {
            assert_eq!(cd.c[l].dims(), refp.f[l].dims());
            assert!(max_diff(&cd.c[l], &ca.c[l]) < 1e-5, "scale {l}");
            let warped = bilinear_warp(&refp.f[l], &flows.levels[l]).unwrap();
            assert_eq!(max_diff(&ca.c[l], &warped), 0.0);
        }
        assert_eq!(a.counters(), StrategyCounters { flow: [1, 1, 1], ..Default::default() });
        assert_eq!(d.counters(), StrategyCounters { flow: [0, 1, 1], fgdc: [1, 0, 0], dc: [0; 3] });
        let zero = build_flow_pyramid(&Tensor::zeros((1, 2, 8, 8), DType::F64, &crate::tensor_ops::cpu()).unwrap()).unwrap();
        let id = a.generate_hybrid_contexts(&refp, &zero, &[None, None, None]).unwrap();
        for l in 0..3 {
            assert!(max_diff(&id.c[l], &refp.f[l]) < 1e-5);
        }
    }

    #[test]
    fn missing_offsets_is_a_config_error() {
        let m = small_model();
        let ps = ParamStore::new(0, DType::F64);
        let f = HybridContext::new(&ps.root(), &m, &AblationConfig::preset("F").unwrap()).unwrap();
        assert!(f.branches.iter().all(Option::is_some));
        let refp = FeaturePyramid { f: [rand(&[1, 8, 8, 8], 1), rand(&[1, 8, 4, 4], 2), rand(&[1, 8, 2, 2], 3)] };
        let flows = build_flow_pyramid(&rand(&[1, 2, 8, 8], 4)).unwrap();
        assert!(matches!(f.generate_hybrid_contexts(&refp, &flows, &[None, None, None]), Err(Error::Config { .. })));
    }

    #[test]
    fn offset_gradients_reach_all_inputs() {
        let mut m = small_model();
        m.offset_hidden = 4;
        let ps = ParamStore::new(3, DType::F64);
        let d = HybridContext::new(&ps.root(), &m, &AblationConfig::preset("D").unwrap()).unwrap();
        // give the zero-initialised head some weight so gradients are visible
        let b = d.branches[0].as_ref().unwrap();
        let w = ps.get("offset0.est2.weight").unwrap();
        w.set(&(rand(w.dims(), 9) * 0.1).unwrap()).unwrap();
        let inputs = vec![rand(&[1, 8, 4, 4], 1), rand(&[1, 8, 4, 4], 2), (rand(&[1, 2, 4, 4], 3) * 0.7).unwrap()];
        let reports = crate::gradcheck::check(&inputs, 1e-5, |t| {
            let o = b.estimate(&t[0], &t[1], &t[2])?;
            crate::gradcheck::probe_loss(&o.data, 11)
        })
        .unwrap();
        for r in reports {
            assert!(r.numeric_norm > 0.0, "input {} has no gradient", r.input);
            assert!(r.rel_error < 1e-3, "input {}: {}", r.input, r.rel_error);
        }
    }
}
