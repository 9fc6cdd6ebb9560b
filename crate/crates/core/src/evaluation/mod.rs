//! Metrics, BD-rate, GOP evaluation runs and the ablation harness.

pub mod bd;
pub mod metrics;
pub mod report;

use serde::{Deserialize, Serialize};

use crate::codec_core::{FrameType, RDPoint, VideoCodec};
use crate::config::{AblationConfig, CodecConfig};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::training::{train_multistage, TrainClip, TrainOptions};
pub use bd::{bd_rate, matched_quality_wins, RDCurve};
pub use metrics::{ms_ssim, psnr, MS_SSIM_MIN_SIDE};

/// Frame types for `n` frames with an intra frame every `intra_period`.
pub fn gop_schedule(n: usize, intra_period: usize) -> Vec<FrameType> {
    (0..n)
        .map(|i| if intra_period == 0 || i % intra_period == 0 { FrameType::Intra } else { FrameType::Inter })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub intra: bool,
    /// Substream bits in the order flow, offset, hyper, frame.
    pub bits: [u64; 4],
    pub rd: RDPoint,
}

/// Per-frame records plus the aggregate over all coded frames.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceResult {
    pub frames: Vec<FrameRecord>,
    pub aggregate: RDPoint,
    /// Mean over inter frames only; `None` when there are none.
    pub inter: Option<RDPoint>,
    #[serde(skip)]
    pub bitstream: Vec<u8>,
    #[serde(skip)]
    pub recon: Vec<Frame>,
}

/// Averages of a set of per-frame points; rates are means of per-frame bpp,
/// which equals total bits over total pixels for equally sized frames.
pub fn mean_point(points: &[RDPoint]) -> Option<RDPoint> {
    if points.is_empty() {
        return None;
    }
    let k = points.len() as f64;
    let mut breakdown = [0.0; 4];
    for p in points {
        for (b, v) in breakdown.iter_mut().zip(p.breakdown) {
            *b += v / k;
        }
    }
    let ms = points.iter().map(|p| p.ms_ssim).collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / k);
    Some(RDPoint {
        bpp: breakdown.iter().sum(),
        psnr: points.iter().map(|p| p.psnr).sum::<f64>() / k,
        ms_ssim: ms,
        breakdown,
        header_bpp: points.iter().map(|p| p.header_bpp).sum::<f64>() / k,
    })
}

/// Code `frames` under the GOP schedule, decode the produced stream, and
/// check that the decoder reproduces every encoder-side reconstruction.
pub fn evaluate_sequence(codec: &VideoCodec, frames: &[Frame], intra_period: usize, with_ms_ssim: bool) -> Result<SequenceResult> {
    if frames.is_empty() {
        return Err(Error::Data("empty sequence".into()));
    }
    let schedule = gop_schedule(frames.len(), intra_period);
    let mut state = None;
    let mut records = Vec::with_capacity(frames.len());
    let mut bitstream = Vec::new();
    let mut recon = Vec::with_capacity(frames.len());
    let mut dec_state = None;
    for (i, (x, ft)) in frames.iter().zip(&schedule).enumerate() {
        let coded = match (ft, &state) {
            (FrameType::Inter, Some(s)) => codec.encode_frame(x, s)?,
            _ => codec.encode_iframe(x)?,
        };
        let (dec, ds) = codec.decode(&coded.bitstream, dec_state.as_ref())?;
        if dec.data.len() != coded.recon.data.len() || dec.data.iter().zip(&coded.recon.data).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(Error::Contract(format!("closed-loop mismatch at frame {i}")));
        }
        dec_state = Some(ds);
        let q = psnr(x, &coded.recon)?;
        let ms = if with_ms_ssim { Some(ms_ssim(x, &coded.recon)?) } else { None };
        records.push(FrameRecord {
            index: i,
            intra: coded.bitstream.header.frame_type == FrameType::Intra,
            bits: crate::codec_core::bitstream::SUBSTREAMS.map(|id| coded.bitstream.substream_bits(id)),
            rd: RDPoint::from_bitstream(&coded.bitstream, x.pixels(), q, ms),
        });
        bitstream.extend(coded.bitstream.to_bytes());
        recon.push(coded.recon);
        state = Some(coded.state);
    }
    let all: Vec<RDPoint> = records.iter().map(|r| r.rd).collect();
    let inter: Vec<RDPoint> = records.iter().filter(|r| !r.intra).map(|r| r.rd).collect();
    Ok(SequenceResult {
        aggregate: mean_point(&all).expect("non-empty"),
        inter: mean_point(&inter),
        frames: records,
        bitstream,
        recon,
    })
}

/// Aggregate of one trained model on one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationPoint {
    pub preset: String,
    pub lambda_index: u8,
    pub lambda: f64,
    pub aggregate: RDPoint,
    pub offset_bits: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub preset: String,
    pub points: Vec<AblationPoint>,
    /// BD-rate on the total rate against the anchor preset, in percent.
    pub bd_rate_vs_anchor: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub anchor: String,
    pub dataset: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn curve(&self, preset: &str) -> Result<RDCurve> {
        let row = self
            .rows
            .iter()
            .find(|r| r.preset == preset)
            .ok_or_else(|| Error::Data(format!("preset {preset} not in table")))?;
        RDCurve::new(preset, &self.dataset, row.points.iter().map(|p| (p.aggregate.bpp, p.aggregate.psnr)).collect())
    }

    /// `(wins, total)` of `test` against `anchor` at matched quality.
    pub fn dominance(&self, anchor: &str, test: &str) -> Result<(usize, usize)> {
        matched_quality_wins(&self.curve(anchor)?, &self.curve(test)?)
    }

    /// Fill `bd_rate_vs_anchor` for every row with at least four points.
    pub fn compute_bd_rates(&mut self) {
        let anchor = self.curve(&self.anchor.clone()).ok();
        let curves: Vec<Option<RDCurve>> = self.rows.iter().map(|r| self.curve(&r.preset).ok()).collect();
        for (row, c) in self.rows.iter_mut().zip(curves) {
            row.bd_rate_vs_anchor = match (&anchor, c) {
                (Some(a), Some(c)) => bd_rate(a, &c).ok(),
                _ => None,
            };
        }
    }
}

/// Evaluate already trained codecs, one per (preset, lambda) pair, and
/// tabulate them against `anchor`.
pub fn run_ablation(
    models: &[(String, VideoCodec)],
    anchor: &str,
    dataset: &str,
    sequences: &[Vec<Frame>],
    intra_period: usize,
) -> Result<AblationTable> {
    let mut rows: Vec<AblationRow> = Vec::new();
    for (preset, codec) in models {
        let mut pts = Vec::new();
        let mut offset_bits = 0u64;
        for seq in sequences {
            let r = evaluate_sequence(codec, seq, intra_period, false)?;
            offset_bits += r.frames.iter().map(|f| f.bits[1]).sum::<u64>();
            pts.push(r.aggregate);
        }
        let point = AblationPoint {
            preset: preset.clone(),
            lambda_index: codec.cfg.rate.lambda_index,
            lambda: codec.lambda(),
            aggregate: mean_point(&pts).expect("at least one sequence"),
            offset_bits,
        };
        match rows.iter_mut().find(|r| &r.preset == preset) {
            Some(r) => r.points.push(point),
            None => rows.push(AblationRow { preset: preset.clone(), points: vec![point], bd_rate_vs_anchor: None }),
        }
    }
    for r in &mut rows {
        r.points.sort_by(|a, b| a.aggregate.bpp.total_cmp(&b.aggregate.bpp));
    }
    let mut t = AblationTable { anchor: anchor.into(), dataset: dataset.into(), rows };
    t.compute_bd_rates();
    Ok(t)
}

/// Train one codec per preset and lambda from the same seed, data and step
/// budget. With `save_dir`, each is written as `{preset}_l{index}.ckpt`.
pub fn train_ablation_models(
    base: &CodecConfig,
    presets: &[String],
    data: &[TrainClip],
    opts: &TrainOptions,
    save_dir: Option<&std::path::Path>,
) -> Result<Vec<(String, VideoCodec)>> {
    let mut out = Vec::new();
    for p in presets {
        for l in 0..base.rate.lambdas.len() {
            let mut cfg = CodecConfig { ablation: AblationConfig::preset(p)?, ..base.clone() };
            cfg.rate.lambda_index = l as u8;
            let codec = VideoCodec::new(&cfg)?;
            log::info!("training preset {p} at lambda {}", cfg.rate.lambda());
            train_multistage(&codec, data, opts)?;
            if let Some(dir) = save_dir {
                crate::checkpoint::save(&codec, &dir.join(format!("{p}_l{l}.ckpt")), &format!("preset {p}"))?;
            }
            out.push((p.to_ascii_uppercase(), codec));
        }
    }
    Ok(out)
}

/// Checkpoint file names expected for an ablation run, with the ones that
/// do not exist listed in one error.
pub fn expected_checkpoints(dir: &std::path::Path, presets: &[String], lambdas: usize) -> Result<Vec<(String, u8, std::path::PathBuf)>> {
    let mut out = Vec::new();
    let mut missing = Vec::new();
    for p in presets {
        for l in 0..lambdas {
            let path = dir.join(format!("{p}_l{l}.ckpt"));
            if !path.is_file() {
                missing.push(path.display().to_string());
            }
            out.push((p.clone(), l as u8, path));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!("missing checkpoints: {}", missing.join(", "))));
    }
    Ok(out)
}
