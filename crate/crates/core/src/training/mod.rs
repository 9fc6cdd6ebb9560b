//! Rate-distortion loss, the staged training schedule and training data.

pub mod data;
pub mod synth;

use std::io::Write;
use std::path::PathBuf;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::codec_core::{VideoCodec, CONTEXT_GROUPS, GROUP_INTRA, GROUP_MOTION};
use crate::config::{Distortion, RateConfig};
use crate::error::{contract, Error, Result};
use crate::evaluation::metrics::{ms_ssim_tensor, mse_tensor, psnr_from_mse};
use crate::frame::{Frame, PAD_MULTIPLE};
use crate::tensor_ops::QuantMode;
pub use synth::{generate_synthetic_clip, GroundTruthFlow, MotionFamily, SynthParams, SyntheticClip};

/// Rate terms in bits, summed over the batch. `frame` includes the side
/// information of the hyperprior.
pub struct RateTerms {
    pub flow: Option<Tensor>,
    pub offset: Option<Tensor>,
    pub frame: Option<Tensor>,
}

/// Loss and its logged decomposition.
pub struct RdLoss {
    pub loss: Tensor,
    pub flow_bpp: f64,
    pub offset_bpp: f64,
    pub frame_bpp: f64,
    pub distortion: f64,
    pub lambda: f64,
}

impl RdLoss {
    pub fn bpp(&self) -> f64 {
        self.flow_bpp + self.offset_bpp + self.frame_bpp
    }

    pub fn value(&self) -> Result<f64> {
        Ok(self.loss.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Distortion between batches: MSE, or `1 - MS-SSIM`.
pub fn distortion(x: &Tensor, x_hat: &Tensor, d: Distortion) -> Result<Tensor> {
    match d {
        Distortion::Mse => mse_tensor(x, x_hat),
        Distortion::MsSsim => Ok(ms_ssim_tensor(x, x_hat)?.affine(-1.0, 1.0)?),
    }
}

/// `(R_flow + R_offset + R_frame) / pixels + lambda * D(x, x_hat)`.
pub fn rd_loss(rates: &RateTerms, x: &Tensor, x_hat: &Tensor, rate: &RateConfig) -> Result<RdLoss> {
    let (Some(flow), Some(offset), Some(frame)) = (&rates.flow, &rates.offset, &rates.frame) else {
        return contract("rd_loss needs the flow, offset and frame rate terms");
    };
    let (b, _, h, w) = x.dims4()?;
    let pixels = (b * h * w) as f64;
    let lambda = rate.lambda();
    let d = distortion(x, x_hat, rate.distortion)?;
    let bits = ((flow + offset)? + frame)?;
    let loss = ((bits / pixels)? + (&d * lambda)?)?;
    Ok(RdLoss {
        loss,
        flow_bpp: scalar(flow)? / pixels,
        offset_bpp: scalar(offset)? / pixels,
        frame_bpp: scalar(frame)? / pixels,
        distortion: scalar(&d)?,
        lambda,
    })
}

/// A training sequence, optionally with ground-truth motion.
#[derive(Debug, Clone)]
pub struct TrainClip {
    pub frames: Vec<Frame>,
    pub flows: Option<Vec<GroundTruthFlow>>,
}

impl From<SyntheticClip> for TrainClip {
    fn from(c: SyntheticClip) -> Self {
        Self { frames: c.frames, flows: Some(c.flows) }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: u32,
    pub step: usize,
    pub loss: f64,
    pub bpp: f64,
    pub distortion: f64,
    pub psnr: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u32,
    /// Loss of every step.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub stages: Vec<StageReport>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stages to run in order; empty runs 0 to 3, plus 4 when cascade
    /// fine-tuning is enabled.
    pub stages: Vec<u32>,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    /// Overrides the configured step counts.
    pub steps: Option<[usize; 5]>,
}

/// Parameter prefixes updated by each stage.
pub fn trainable_groups(stage: u32) -> Result<Vec<&'static str>> {
    Ok(match stage {
        0 => vec![GROUP_INTRA],
        1 => vec![GROUP_MOTION],
        2 => CONTEXT_GROUPS.to_vec(),
        3 | 4 => std::iter::once(GROUP_MOTION).chain(CONTEXT_GROUPS).collect(),
        s => return Err(Error::Config { path: "train.stage".into(), msg: format!("stage {s} does not exist (0 to 4)") }),
    })
}

fn frozen_groups(stage: u32) -> Result<Vec<&'static str>> {
    let t = trainable_groups(stage)?;
    Ok(std::iter::once(GROUP_INTRA).chain([GROUP_MOTION]).chain(CONTEXT_GROUPS).filter(|g| !t.contains(g)).collect())
}

/// Crop windows of consecutive frames stacked into batches.
struct Sample {
    frames: Vec<Tensor>,
    flow: Option<(Tensor, Tensor)>,
}

fn crop_tensor(f: &Frame, x0: usize, y0: usize, p: usize, dtype: DType) -> Result<Tensor> {
    let t = f.to_tensor(dtype)?;
    Ok(t.narrow(2, y0, p)?.narrow(3, x0, p)?)
}

fn sample_batch(codec: &VideoCodec, data: &[TrainClip], span: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let cfg = &codec.cfg.train;
    let dtype = codec.dtype();
    let mut per_frame: Vec<Vec<Tensor>> = vec![Vec::new(); span];
    let mut flows = Vec::new();
    let mut valids = Vec::new();
    for _ in 0..cfg.batch_size {
        let clip = &data[rng.random_range(0..data.len())];
        if clip.frames.len() < span {
            return Err(Error::Data(format!("training clip has {} frames, stage needs {span}", clip.frames.len())));
        }
        let t0 = rng.random_range(0..=clip.frames.len() - span);
        let (w, h) = (clip.frames[0].width, clip.frames[0].height);
        let (frames, p, x0, y0): (Vec<Frame>, usize, usize, usize) = if w >= cfg.patch_size && h >= cfg.patch_size {
            let p = cfg.patch_size;
            (clip.frames[t0..t0 + span].to_vec(), p, rng.random_range(0..=w - p), rng.random_range(0..=h - p))
        } else {
            let padded: Vec<Frame> = clip.frames[t0..t0 + span].iter().map(|f| f.pad_to(PAD_MULTIPLE)).collect();
            let p = padded[0].width.min(padded[0].height);
            (padded, p, 0, 0)
        };
        for (k, f) in frames.iter().enumerate() {
            per_frame[k].push(crop_tensor(f, x0, y0, p, dtype)?);
        }
        if let Some(gt) = clip.flows.as_ref().filter(|_| span >= 2 && w >= p && h >= p) {
            let g = &gt[t0];
            let n = w * h;
            let ft = Tensor::from_vec(g.data.clone(), (1, 2, h, w), &crate::tensor_ops::cpu())?.to_dtype(dtype)?;
            let vt = Tensor::from_vec(g.valid.iter().map(|&v| v as f32).collect::<Vec<_>>(), (1, 1, h, w), &crate::tensor_ops::cpu())?
                .to_dtype(dtype)?;
            debug_assert_eq!(g.valid.len(), n);
            flows.push(ft.narrow(2, y0, p)?.narrow(3, x0, p)?);
            valids.push(vt.narrow(2, y0, p)?.narrow(3, x0, p)?);
        }
    }
    let frames = per_frame.iter().map(|v| Tensor::cat(v, 0)).collect::<candle_core::Result<Vec<_>>>()?;
    let flow = if flows.len() == cfg.batch_size { Some((Tensor::cat(&flows, 0)?, Tensor::cat(&valids, 0)?)) } else { None };
    Ok(Sample { frames, flow })
}

/// Intra reconstruction and feature used as the reference of the first
/// inter frame; no gradient flows into the intra codec.
fn intra_reference(codec: &VideoCodec, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = codec.intra.forward_train(x, QuantMode::Round, Some(&mut rng))?;
    Ok((out.x_hat.detach(), out.feature.detach()))
}


fn stage_loss(codec: &VideoCodec, stage: u32, s: &Sample, quant: QuantMode, rng: &mut ChaCha8Rng) -> Result<RdLoss> {
    let rate = &codec.cfg.rate;
    let dt = codec.dtype();
    let z = || -> Result<Tensor> { Ok(Tensor::zeros((), dt, &crate::tensor_ops::cpu())?) };
    match stage {
        0 => {
            let x = &s.frames[0];
            let out = codec.intra_forward(x, quant, rng)?;
            let terms = RateTerms { flow: Some(z()?), offset: Some(z()?), frame: Some((out.bits_y + out.bits_z)?) };
            rd_loss(&terms, x, &out.x_hat, rate)
        }
        1 => {
            let (x_ref, _) = intra_reference(codec, &s.frames[0])?;
            let x = &s.frames[1];
            let m = codec.motion_forward(x, &x_ref, quant, rng)?;
            let terms = RateTerms { flow: Some(m.bits.clone()), offset: Some(z()?), frame: Some(z()?) };
            let mut l = rd_loss(&terms, x, &m.warped, rate)?;
            let wsup = codec.cfg.train.flow_supervision;
            if let (Some((gt, valid)), true) = (&s.flow, wsup > 0.0) {
                let diff = ((&m.v - gt)?.sqr()?.broadcast_mul(valid))?.sum_all()?;
                let denom = (valid.sum_all()? * 2.0)?.affine(1.0, 1.0)?;
                l.loss = (l.loss + (diff.div(&denom)? * wsup)?)?;
            }
            Ok(l)
        }
        2 | 3 => {
            let (x_ref, f_ref) = intra_reference(codec, &s.frames[0])?;
            let x = &s.frames[1];
            let out = codec.inter_forward(x, &x_ref, &f_ref, quant, rng, stage == 2)?;
            let terms = RateTerms {
                flow: Some(out.motion.bits.clone()),
                offset: Some(out.bits_offset.clone()),
                frame: Some((&out.bits_hyper + &out.bits_frame)?),
            };
            rd_loss(&terms, x, &out.x_hat, rate)
        }
        4 => {
            let (mut x_ref, mut f_ref) = intra_reference(codec, &s.frames[0])?;
            let depth = rng.random_range(0..=s.frames.len() - 3);
            for x in &s.frames[1..=depth] {
                let out = codec.inter_forward(x, &x_ref, &f_ref, quant, rng, true)?;
                x_ref = out.x_hat.detach();
                f_ref = out.feature.detach();
            }
            let mut parts = Vec::new();
            for x in &s.frames[depth + 1..depth + 3] {
                let out = codec.inter_forward(x, &x_ref, &f_ref, quant, rng, false)?;
                let terms = RateTerms {
                    flow: Some(out.motion.bits.clone()),
                    offset: Some(out.bits_offset.clone()),
                    frame: Some((&out.bits_hyper + &out.bits_frame)?),
                };
                parts.push(rd_loss(&terms, x, &out.x_hat, rate)?);
                x_ref = out.x_hat;
                f_ref = out.feature;
            }
            let k = parts.len() as f64;
            let mut loss = parts[0].loss.clone();
            for p in &parts[1..] {
                loss = (loss + &p.loss)?;
            }
            let mean = |f: fn(&RdLoss) -> f64| parts.iter().map(f).sum::<f64>() / k;
            Ok(RdLoss {
                loss: (loss / k)?,
                flow_bpp: mean(|p| p.flow_bpp),
                offset_bpp: mean(|p| p.offset_bpp),
                frame_bpp: mean(|p| p.frame_bpp),
                distortion: mean(|p| p.distortion),
                lambda: parts[0].lambda,
            })
        }
        s => contract(format!("no stage {s}")),
    }
}

fn stage_span(stage: u32, warmup: usize, data: &[TrainClip]) -> usize {
    match stage {
        0 => 1,
        4 => {
            let shortest = data.iter().map(|c| c.frames.len()).min().unwrap_or(0);
            (3 + warmup).min(shortest).max(3)
        }
        _ => 2,
    }
}

struct LogSink {
    file: Option<std::fs::File>,
}

impl LogSink {
    fn write(&mut self, r: &LogRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        log::info!(
            "stage {} step {:>5} loss {:.5} bpp {:.4} psnr {:.2}",
            r.stage,
            r.step,
            r.loss,
            r.bpp,
            r.psnr
        );
        Ok(())
    }
}

/// Run one stage for `steps` optimizer steps.
pub fn train_stage(codec: &VideoCodec, data: &[TrainClip], stage: u32, steps: usize, opts: &TrainOptions) -> Result<StageReport> {
    let mut sink = LogSink {
        file: match &opts.log_path {
            Some(p) => Some(std::fs::OpenOptions::new().create(true).append(true).open(p)?),
            None => None,
        },
    };
    run_stage(codec, data, stage, steps, opts, &mut sink)
}

fn run_stage(
    codec: &VideoCodec,
    data: &[TrainClip],
    stage: u32,
    steps: usize,
    opts: &TrainOptions,
    sink: &mut LogSink,
) -> Result<StageReport> {
    if data.is_empty() {
        return Err(Error::Data("no training clips".into()));
    }
    let tc = &codec.cfg.train;
    let groups = trainable_groups(stage)?;
    let frozen = frozen_groups(stage)?;
    let frozen_before = codec.store.hash(&frozen)?;
    let (priors, vars): (Vec<_>, Vec<_>) =
        codec.store.vars_with_prefixes(&groups).into_iter().partition(|(name, _)| name.contains(".prior."));
    let lr = if stage == 4 { tc.lr_finetune } else { tc.lr };
    let params = ParamsAdamW { lr, weight_decay: tc.weight_decay, ..Default::default() };
    let mut opt = AdamW::new(vars.into_iter().map(|(_, v)| v).collect(), params.clone())?;
    let mut opt_prior = AdamW::new(priors.into_iter().map(|(_, v)| v).collect(), params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(codec.cfg.seed ^ (0x5eed_0000 + stage as u64));
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let lr = tc.lr_at(lr, step, steps);
        opt.set_learning_rate(lr);
        opt_prior.set_learning_rate(lr * tc.prior_lr_scale);
        let sample = sample_batch(codec, data, stage_span(stage, tc.cascade_warmup, data), &mut rng)?;
        let l = stage_loss(codec, stage, &sample, tc.rate_quant, &mut rng)?;
        let v = l.value()?;
        if !v.is_finite() {
            let detail = format!("loss {v} (bpp {:.4}, distortion {:.6})", l.bpp(), l.distortion);
            if let Some(dir) = &opts.checkpoint_dir {
                let path = dir.join(format!("diverged_stage{stage}_step{step}.ckpt"));
                checkpoint::save(codec, &path, &detail)?;
            }
            return Err(Error::Diverged { stage, step, detail });
        }
        let grads = l.loss.backward()?;
        opt.step(&grads)?;
        opt_prior.step(&grads)?;
        losses.push(v);
        if tc.log_every > 0 && (step % tc.log_every == 0 || step + 1 == steps) {
            sink.write(&LogRecord {
                stage,
                step,
                loss: v,
                bpp: l.bpp(),
                distortion: l.distortion,
                psnr: psnr_from_mse(l.distortion),
                lr,
            })?;
        }
    }
    if codec.store.hash(&frozen)? != frozen_before {
        return contract(format!("stage {stage} modified frozen parameters"));
    }
    if let Some(dir) = &opts.checkpoint_dir {
        checkpoint::save(codec, &dir.join(format!("stage{stage}.ckpt")), &format!("stage {stage}"))?;
    }
    Ok(StageReport { stage, losses })
}

/// Run the staged schedule in place on `codec`.
pub fn train_multistage(codec: &VideoCodec, data: &[TrainClip], opts: &TrainOptions) -> Result<TrainReport> {
    let tc = &codec.cfg.train;
    let stages = if opts.stages.is_empty() {
        let mut s = vec![0, 1, 2, 3];
        if tc.cascade {
            s.push(4);
        }
        s
    } else {
        opts.stages.clone()
    };
    let steps = opts.steps.unwrap_or(tc.steps);
    let mut sink = LogSink {
        file: match &opts.log_path {
            Some(p) => Some(std::fs::OpenOptions::new().create(true).append(true).open(p)?),
            None => None,
        },
    };
    let mut report = TrainReport::default();
    for s in stages {
        trainable_groups(s)?;
        report.stages.push(run_stage(codec, data, s, steps[s as usize], opts, &mut sink)?);
    }
    Ok(report)
}

/// Deterministic single-frame inter RD loss averaged over every frame pair
/// of the clips, with rounding quantization and intra references.
pub fn joint_loss(codec: &VideoCodec, data: &[TrainClip]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for clip in data {
        for t in 1..clip.frames.len() {
            let prev = clip.frames[t - 1].pad_to(PAD_MULTIPLE).to_tensor(codec.dtype())?;
            let cur = clip.frames[t].pad_to(PAD_MULTIPLE).to_tensor(codec.dtype())?;
            let s = Sample { frames: vec![prev, cur], flow: None };
            total += stage_loss(codec, 3, &s, QuantMode::Round, &mut rng)?.value()?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data("joint loss needs clips with at least two frames".into()));
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests;
