use candle_core::{DType, Tensor};

use super::*;
use crate::gradcheck::{check, probe_loss, randn};
use crate::hybrid_context::{ContextSet, ContextStage, FeaturePyramid};
use crate::motion::build_flow_pyramid;
use crate::nn::ParamStore;
use crate::tensor_ops::bilinear_warp;

fn small() -> ModelConfig {
    ModelConfig {
        c0: 8,
        c1: 8,
        c2: 8,
        enhance_hidden: 4,
        guide_channels: 2,
        deform: DeformKernelSpec { kernel_size: 3, groups: 2, modulated: true },
        attention: crate::config::AttentionConfig { heads: 2, blocks: 2, ffn_expansion: 2 },
        ..ModelConfig::default()
    }
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
}

fn inputs() -> (ContextSet, FeaturePyramid, crate::motion::FlowPyramid) {
    let f = [randn(&[1, 8, 8, 8], 1.0, 1).unwrap(), randn(&[1, 8, 4, 4], 1.0, 2).unwrap(), randn(&[1, 8, 2, 2], 1.0, 3).unwrap()];
    let c = [randn(&[1, 8, 8, 8], 1.0, 4).unwrap(), randn(&[1, 8, 4, 4], 1.0, 5).unwrap(), randn(&[1, 8, 2, 2], 1.0, 6).unwrap()];
    let flows = build_flow_pyramid(&randn(&[1, 2, 8, 8], 1.0, 7).unwrap()).unwrap();
    (ContextSet { c, stage: ContextStage::Generated }, FeaturePyramid { f }, flows)
}

#[test]
fn zero_init_local_enhancement_is_flow_warping() {
    let ps = ParamStore::new(0, DType::F64);
    let e = ContextEnhancer::new(&ps.root(), &small(), &AblationConfig::preset("J").unwrap()).unwrap();
    let (ctx, refp, flows) = inputs();
    let (local, offs) = e.local_enhance(&ctx, &refp, &flows, None).unwrap();
    assert_eq!(e.take_order(), vec![2, 1, 0]);
    for l in 0..3 {
        assert_eq!(local[l].dims(), refp.f[l].dims());
        let want = bilinear_warp(&refp.f[l], &flows.levels[l]).unwrap();
        assert!(max_diff(&local[l], &want) < 1e-5, "scale {l}");
        assert_eq!(offs[l].as_ref().unwrap().dims()[2], refp.f[l].dims()[2]);
    }
}

#[test]
fn disabled_scales_pass_contexts_through() {
    let ps = ParamStore::new(0, DType::F64);
    let e = ContextEnhancer::new(&ps.root(), &small(), &AblationConfig::preset("G").unwrap()).unwrap();
    let (ctx, refp, flows) = inputs();
    let out = e.enhance(&ctx, &refp, &flows, None).unwrap();
    assert_eq!(e.take_order(), vec![2]);
    assert_eq!(max_diff(&out.local[0], &ctx.c[0]), 0.0);
    assert_eq!(max_diff(&out.local[1], &ctx.c[1]), 0.0);
    assert_eq!(max_diff(&out.fused_small, &out.local[2]), 0.0);
    let wrong = ContextSet { stage: ContextStage::Fused, ..ctx };
    assert!(e.local_enhance(&wrong, &refp, &flows, None).is_err());
}

#[test]
fn enhancement_is_a_pure_function_of_decoded_inputs() {
    let ps = ParamStore::new(4, DType::F32);
    let m = ModelConfig::default();
    let e = ContextEnhancer::new(&ps.root(), &m, &AblationConfig::default()).unwrap();
    let r = |s: &[usize], seed| randn(s, 1.0, seed).unwrap().to_dtype(DType::F32).unwrap();
    let ctx = ContextSet { c: [r(&[1, 48, 16, 16], 1), r(&[1, 64, 8, 8], 2), r(&[1, 96, 4, 4], 3)], stage: ContextStage::Generated };
    let refp = FeaturePyramid { f: [r(&[1, 48, 16, 16], 4), r(&[1, 64, 8, 8], 5), r(&[1, 96, 4, 4], 6)] };
    let flows = build_flow_pyramid(&r(&[1, 2, 16, 16], 7)).unwrap();
    let a = e.enhance(&ctx, &refp, &flows, None).unwrap();
    let b = e.clone().enhance(&ctx, &refp, &flows, None).unwrap();
    for l in 0..3 {
        let x = a.fin[l].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let y = b.fin[l].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let ps = ParamStore::new(1, DType::F64);
    let b = CrossAttentionBlock::new(&ps.root(), 8, 2, 2).unwrap();
    let q = randn(&[1, 8, 4, 4], 1.0, 1).unwrap();
    let k = randn(&[1, 8, 4, 4], 1.0, 2).unwrap();
    let a = b.attention_map(&q, &k).unwrap();
    assert_eq!(a.dims(), &[1, 2, 4, 4]);
    let sums = a.sum(3).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
}

#[test]
fn single_position_attention_returns_values() {
    // one channel per head: each attention map is 1x1 and softmax gives 1
    let ps = ParamStore::new(2, DType::F64);
    let b = CrossAttentionBlock::new(&ps.root(), 6, 6, 2).unwrap();
    let c = randn(&[1, 6, 1, 1], 1.0, 3).unwrap();
    let f = randn(&[1, 6, 1, 1], 1.0, 4).unwrap();
    let (out, v) = b.attend(&c, &f).unwrap();
    assert_eq!(max_diff(&out, &v), 0.0);
}

#[test]
fn attention_block_gradients() {
    let ps = ParamStore::new(3, DType::F64);
    let b = CrossAttentionBlock::new(&ps.root(), 8, 2, 2).unwrap();
    let x = vec![randn(&[1, 8, 4, 4], 1.0, 5).unwrap(), randn(&[1, 8, 4, 4], 1.0, 6).unwrap()];
    for r in check(&x, 1e-5, |t| probe_loss(&b.forward(&t[0], &t[1])?, 1)).unwrap() {
        assert!(r.rel_error < 1e-3, "input {}: {}", r.input, r.rel_error);
    }
}

#[test]
fn gated_feed_forward_gradients() {
    let ps = ParamStore::new(4, DType::F64);
    let g = GatedFeedForward::new(&ps.root(), 8, 2).unwrap();
    let x = vec![randn(&[1, 8, 4, 4], 1.0, 7).unwrap()];
    for r in check(&x, 1e-5, |t| probe_loss(&g.forward(&t[0])?, 2)).unwrap() {
        assert!(r.rel_error < 1e-3, "{}", r.rel_error);
    }
}

#[test]
fn fusion_gates() {
    let ps = ParamStore::new(5, DType::F64);
    let f = ChannelSpatialFusion::new(&ps.root(), 8).unwrap();
    let a = randn(&[1, 8, 4, 4], 1.0, 8).unwrap();
    let b = randn(&[1, 8, 4, 4], 1.0, 9).unwrap();
    let out = f.forward(&a, &b).unwrap();
    assert_eq!(out.dims(), a.dims());
    let x = Tensor::cat(&[&a, &b], 1).unwrap();
    for g in [f.channel_gate(&x).unwrap(), f.spatial_gate(&x).unwrap()] {
        let v = g.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|&p| p > 0.0 && p < 1.0));
    }
    for r in check(&[a.clone(), b.clone()], 1e-5, |t| probe_loss(&f.forward(&t[0], &t[1])?, 3)).unwrap() {
        assert!(r.rel_error < 1e-3, "input {}: {}", r.input, r.rel_error);
    }
    f.set_gate_bias(1e4);
    assert_eq!(max_diff(&f.forward(&a, &b).unwrap(), &f.project(&a, &b).unwrap()), 0.0);
}

#[test]
fn hierarchical_fusion_shapes_and_reachability() {
    let ps = ParamStore::new(6, DType::F64);
    let h = HierarchicalFuse::new(&ps.root(), &small()).unwrap();
    let (ctx, _, _) = inputs();
    let c2 = candle_core::Var::from_tensor(&ctx.c[2]).unwrap();
    let out = h.forward(&ctx.c[0], &ctx.c[1], c2.as_tensor()).unwrap();
    for l in 0..3 {
        assert_eq!(out[l].dims(), ctx.c[l].dims());
    }
    let g = probe_loss(&out[0], 4).unwrap().backward().unwrap();
    let n = g.get(c2.as_tensor()).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
    assert!(n > 0.0);
}

#[test]
fn mean_tap_displacement_averages_groups_and_taps() {
    let spec = DeformKernelSpec { kernel_size: 1, groups: 2, modulated: true };
    // two (dx, dy) pairs followed by two mask channels
    let o = Tensor::new(&[1.0f64, 10.0, 3.0, 20.0, 0.0, 0.0], &crate::tensor_ops::cpu())
        .unwrap()
        .reshape((1, 6, 1, 1))
        .unwrap();
    let m = mean_tap_displacement(&o, &spec).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    assert_eq!(m, vec![2.0, 15.0]);
}
