use candle_core::{DType, Tensor};

use super::*;
use crate::config::{CodecConfig, ModelConfig};
use crate::tensor_ops::cpu;

fn t(v: f64) -> Tensor {
    Tensor::new(v as f32, &cpu()).unwrap()
}

fn frames_pair(d: f32) -> (Tensor, Tensor) {
    let x = Tensor::full(0.5f32, (1, 3, 10, 10), &cpu()).unwrap();
    (x.clone(), (x + d as f64).unwrap())
}

fn rate(lambda: f64) -> RateConfig {
    RateConfig { lambdas: vec![lambda], lambda_index: 0, ..RateConfig::default() }
}

#[test]
fn rd_loss_of_perfect_free_coding_is_zero() {
    let (x, _) = frames_pair(0.0);
    let terms = RateTerms { flow: Some(t(0.0)), offset: Some(t(0.0)), frame: Some(t(0.0)) };
    assert_eq!(rd_loss(&terms, &x, &x, &rate(256.0)).unwrap().value().unwrap(), 0.0);
}

#[test]
fn rd_loss_arithmetic_and_linearity() {
    // 100 pixels: 10 bits total is 0.1 bpp; a uniform error of sqrt(0.001) gives D = 0.001
    let (x, y) = frames_pair(0.001f32.sqrt());
    let terms = RateTerms { flow: Some(t(2.0)), offset: Some(t(3.0)), frame: Some(t(5.0)) };
    let l = rd_loss(&terms, &x, &y, &rate(256.0)).unwrap();
    assert!((l.value().unwrap() - 0.356).abs() < 1e-5);
    assert!((l.bpp() - 0.1).abs() < 1e-9);
    assert!((l.bpp() + l.lambda * l.distortion - l.value().unwrap()).abs() < 1e-6);
    let l2 = rd_loss(&terms, &x, &y, &rate(512.0)).unwrap();
    let d1 = l.value().unwrap() - l.bpp();
    let d2 = l2.value().unwrap() - l2.bpp();
    assert!((d2 - 2.0 * d1).abs() < 1e-5);
    let missing = RateTerms { flow: Some(t(0.0)), offset: None, frame: Some(t(0.0)) };
    assert!(matches!(rd_loss(&missing, &x, &y, &rate(256.0)), Err(Error::Contract(_))));
}

fn tiny_codec(seed: u64) -> VideoCodec {
    let mut cfg = CodecConfig::default();
    cfg.model = ModelConfig::tiny();
    cfg.seed = seed;
    cfg.train.batch_size = 1;
    cfg.train.patch_size = 64;
    cfg.train.log_every = 0;
    VideoCodec::new(&cfg).unwrap()
}

fn clip() -> Vec<TrainClip> {
    let p = SynthParams { frames: 4, ..SynthParams::default() };
    vec![generate_synthetic_clip(MotionFamily::Translate, &p, 1).unwrap().into()]
}

#[test]
fn stage_two_leaves_motion_and_intra_untouched() {
    let c = tiny_codec(0);
    let motion = c.store.hash(&[GROUP_MOTION, GROUP_INTRA]).unwrap();
    let ctx = c.store.hash(&CONTEXT_GROUPS).unwrap();
    train_stage(&c, &clip(), 2, 2, &TrainOptions::default()).unwrap();
    assert_eq!(c.store.hash(&[GROUP_MOTION, GROUP_INTRA]).unwrap(), motion);
    assert_ne!(c.store.hash(&CONTEXT_GROUPS).unwrap(), ctx);
}

#[test]
fn seeded_training_is_reproducible() {
    let run = || {
        let c = tiny_codec(3);
        train_stage(&c, &clip(), 3, 10, &TrainOptions::default()).unwrap().losses
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), 10);
    assert_eq!(a[9].to_bits(), b[9].to_bits());
}

#[test]
fn non_finite_loss_aborts_with_snapshot() {
    let c = tiny_codec(0);
    let mut bad = clip();
    bad[0].frames[0].data[5] = f32::NAN;
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions { checkpoint_dir: Some(dir.path().to_path_buf()), ..TrainOptions::default() };
    match train_stage(&c, &bad[..1], 0, 50, &opts) {
        Err(Error::Diverged { stage: 0, .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|r| r.losses.len())),
    }
    assert!(std::fs::read_dir(dir.path()).unwrap().next().is_some());
}

#[test]
fn every_stage_runs_and_cascade_needs_three_frames() {
    let c = tiny_codec(1);
    let opts = TrainOptions { stages: vec![0, 1, 2, 3, 4], steps: Some([1, 1, 1, 1, 1]), ..TrainOptions::default() };
    let r = train_multistage(&c, &clip(), &opts).unwrap();
    assert_eq!(r.stages.len(), 5);
    assert!(joint_loss(&c, &clip()).unwrap().is_finite());
    let short = vec![TrainClip { frames: clip()[0].frames[..2].to_vec(), flows: None }];
    assert!(matches!(train_stage(&c, &short, 4, 1, &TrainOptions::default()), Err(Error::Data(_))));
    assert!(trainable_groups(7).is_err());
    let _ = DType::F32;
}
