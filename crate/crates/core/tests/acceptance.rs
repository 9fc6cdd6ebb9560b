//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero when a hard criterion fails.
//!
//! `ACCEPTANCE_ONLY=1,3` runs a subset. `CTXCODEC_BLESS=1` rewrites the
//! golden bitstreams under `tests/golden/`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use candle_core::{DType, Tensor};
use ctxcodec::checkpoint;
use ctxcodec::codec_core::bitstream::{split_frames, HEADER_LEN};
use ctxcodec::codec_core::VideoCodec;
use ctxcodec::config::{AblationConfig, CodecConfig, ModelConfig, Strategy};
use ctxcodec::context_enhance::{ChannelSpatialFusion, CrossAttentionBlock, GatedFeedForward};
use ctxcodec::entropy::{estimate_rate, range_decode, range_encode, CdfTable};
use ctxcodec::evaluation::{bd_rate, evaluate_sequence, metrics, run_ablation, train_ablation_models, RDCurve};
use ctxcodec::frame::{Frame, PAD_MULTIPLE};
use ctxcodec::gradcheck::{self, probe_loss, randn};
use ctxcodec::hybrid_context::{FeaturePyramid, HybridContext, OffsetField};
use ctxcodec::motion::{build_flow_pyramid, SubstreamId};
use ctxcodec::nn::ParamStore;
use ctxcodec::tensor_ops::{bilinear_warp, deform_sample, DeformKernelSpec};
use ctxcodec::training::synth::{generate_synthetic_clip, MotionFamily, SynthParams};
use ctxcodec::training::{joint_loss, train_multistage, TrainClip, TrainOptions};
use ctxcodec::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Res<T> = std::result::Result<T, Box<dyn std::error::Error>>;

struct Criterion {
    id: u8,
    name: &'static str,
    /// Soft criteria are reported but do not fail the run.
    hard: bool,
    run: fn() -> Res<String>,
}

fn ensure(ok: bool, msg: impl Into<String>) -> Res<()> {
    if ok {
        Ok(())
    } else {
        Err(msg.into().into())
    }
}

fn host(t: &Tensor) -> Res<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

fn max_diff(a: &Tensor, b: &Tensor) -> Res<f64> {
    let (a, b) = (host(a)?, host(b)?);
    ensure(a.len() == b.len(), "size mismatch")?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

fn bit_identical(a: &Tensor, b: &Tensor) -> Res<bool> {
    let (a, b) = (a.flatten_all()?.to_vec1::<f32>()?, b.flatten_all()?.to_vec1::<f32>()?);
    Ok(a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()))
}

fn frames_identical(a: &Frame, b: &Frame) -> bool {
    a.width == b.width && a.height == b.height && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn frame_sha(f: &Frame) -> String {
    let mut h = Sha256::new();
    for v in &f.data {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn clip(family: MotionFamily, w: usize, h: usize, frames: usize, seed: u64) -> Res<Vec<Frame>> {
    let p = SynthParams { width: w, height: h, frames, ..SynthParams::default() };
    Ok(generate_synthetic_clip(family, &p, seed)?.frames)
}

fn tiny_config(preset: &str, seed: u64) -> Res<CodecConfig> {
    Ok(CodecConfig { model: ModelConfig::tiny(), ablation: AblationConfig::preset(preset)?, seed, ..CodecConfig::default() })
}

/// A tiny codec given a short pass through every stage, so that offsets,
/// latents and priors are no longer at their initial values.
fn briefly_trained(preset: &str, seed: u64) -> Res<VideoCodec> {
    let codec = VideoCodec::new(&tiny_config(preset, seed)?)?;
    let p = SynthParams::default();
    let data = vec![TrainClip::from(generate_synthetic_clip(MotionFamily::Elastic, &p, seed)?)];
    let opts = TrainOptions { steps: Some([40, 20, 20, 20, 0]), stages: vec![0, 1, 2, 3], ..TrainOptions::default() };
    train_multistage(&codec, &data, &opts)?;
    Ok(codec)
}

// ---- 1: operator oracles ----

fn sample_replicate(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = (x - x0 as f64, y - y0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - ax) + plane[y0 * w + x1] * ax;
    let bot = plane[y1 * w + x0] * (1.0 - ax) + plane[y1 * w + x1] * ax;
    top * (1.0 - ay) + bot * ay
}

fn warp_oracle(x: &[f64], flow: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                let (dx, dy) = (flow[yy * w + xx], flow[h * w + yy * w + xx]);
                out[(ch * h + yy) * w + xx] =
                    sample_replicate(&x[ch * h * w..(ch + 1) * h * w], h, w, yy as f64 + dy, xx as f64 + dx);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn deform_oracle(
    x: &[f64],
    flow: &[f64],
    off: &[f64],
    weight: &[f64],
    bias: &[f64],
    spec: &DeformKernelSpec,
    (c, h, w): (usize, usize, usize),
    c_out: usize,
) -> Vec<f64> {
    let k = spec.kernel_size;
    let taps = k * k;
    let half = (k / 2) as f64;
    let g_count = spec.groups;
    let per_group = c / g_count;
    let disp_ch = 2 * g_count * taps;
    let at = |ch: usize, yy: usize, xx: usize| off[(ch * h + yy) * w + xx];
    let mut out = vec![0.0; c_out * h * w];
    for co in 0..c_out {
        for yy in 0..h {
            for xx in 0..w {
                let mut acc = bias[co];
                for ci in 0..c {
                    let g = ci / per_group;
                    for t in 0..taps {
                        let (ty, tx) = ((t / k) as f64 - half, (t % k) as f64 - half);
                        let j = g * taps + t;
                        let px = xx as f64 + tx + flow[yy * w + xx] + at(2 * j, yy, xx);
                        let py = yy as f64 + ty + flow[h * w + yy * w + xx] + at(2 * j + 1, yy, xx);
                        let mut v = sample_replicate(&x[ci * h * w..(ci + 1) * h * w], h, w, py, px);
                        if spec.modulated {
                            v *= 2.0 / (1.0 + (-at(disp_ch + j, yy, xx)).exp());
                        }
                        acc += weight[(co * c + ci) * taps + t] * v;
                    }
                }
                out[(co * h + yy) * w + xx] = acc;
            }
        }
    }
    out
}

fn constant_flow(dx: f64, dy: f64, h: usize, w: usize) -> Res<Tensor> {
    let mut v = vec![dx; h * w];
    v.extend(std::iter::repeat_n(dy, h * w));
    Ok(Tensor::from_vec(v, (1, 2, h, w), &candle_core::Device::Cpu)?)
}

fn operator_oracles() -> Res<String> {
    let (h, w) = (6, 7);
    let x = randn(&[1, 3, h, w], 1.0, 1)?;
    let xv = host(&x)?;
    let id = max_diff(&bilinear_warp(&x, &constant_flow(0.0, 0.0, h, w)?)?, &x)?;
    ensure(id <= 1e-12, format!("zero flow changed the input by {id:e}"))?;

    let shifted = host(&bilinear_warp(&x, &constant_flow(2.0, -1.0, h, w)?)?)?;
    for ch in 0..3 {
        for yy in 1..h {
            for xx in 0..w - 2 {
                let (a, b) = (shifted[(ch * h + yy) * w + xx], xv[(ch * h + yy - 1) * w + xx + 2]);
                ensure(a == b, format!("integer shift mismatch at ({ch},{yy},{xx})"))?;
            }
        }
    }

    let flow = randn(&[1, 2, h, w], 1.7, 2)?;
    let got = host(&bilinear_warp(&x, &flow)?)?;
    let want = warp_oracle(&xv, &host(&flow)?, 3, h, w);
    let frac = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(frac < 1e-5, format!("fractional warp off by {frac:e}"))?;

    let mut deform_err: f64 = 0.0;
    let cases = [
        (DeformKernelSpec { kernel_size: 3, groups: 2, modulated: true }, (4, 4, 4), 3, 10),
        (DeformKernelSpec { kernel_size: 3, groups: 1, modulated: false }, (2, 3, 4), 2, 20),
        (DeformKernelSpec { kernel_size: 1, groups: 2, modulated: true }, (2, 4, 2), 1, 30),
    ];
    for (spec, (c, h, w), c_out, seed) in cases {
        let x = randn(&[1, c, h, w], 1.0, seed)?;
        let flow = randn(&[1, 2, h, w], 0.8, seed + 1)?;
        let off = randn(&[1, spec.offset_channels(), h, w], 0.6, seed + 2)?;
        let wt = randn(&[c_out, c, spec.kernel_size, spec.kernel_size], 0.5, seed + 3)?;
        let b = randn(&[c_out], 0.5, seed + 4)?;
        let got = host(&deform_sample(&x, &flow, &off, &spec, &wt, Some(&b))?)?;
        let want = deform_oracle(&host(&x)?, &host(&flow)?, &host(&off)?, &host(&wt)?, &host(&b)?, &spec, (c, h, w), c_out);
        let e = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        deform_err = deform_err.max(e);
    }
    ensure(deform_err < 1e-5, format!("deform_sample differs from brute force by {deform_err:e}"))?;

    // centre-tap identity weights and neutral offsets reduce to warping
    let spec = DeformKernelSpec { kernel_size: 3, groups: 2, modulated: true };
    let (c, h, w) = (4, 4, 4);
    let x = randn(&[1, c, h, w], 1.0, 40)?;
    let flow = randn(&[1, 2, h, w], 1.1, 41)?;
    let zero = Tensor::zeros((1, spec.offset_channels(), h, w), DType::F64, x.device())?;
    let mut wv = vec![0.0f64; c * c * 9];
    for i in 0..c {
        wv[(i * c + i) * 9 + 4] = 1.0;
    }
    let wt = Tensor::from_vec(wv, (c, c, 3, 3), x.device())?;
    let op_degen = max_diff(&deform_sample(&x, &flow, &zero, &spec, &wt, None)?, &bilinear_warp(&x, &flow)?)?;
    ensure(op_degen < 1e-5, format!("operator-level FGDC degeneracy off by {op_degen:e}"))?;

    let m = ModelConfig { c0: 8, c1: 8, c2: 8, motion_latent: 8, offset_hidden: 8, deform: spec, ..ModelConfig::default() };
    let ps = ParamStore::new(0, DType::F64);
    let all_fgdc = AblationConfig { strategy: [Strategy::Fgdc; 3], ..AblationConfig::preset("A")? };
    let hyb = HybridContext::new(&ps.root(), &m, &all_fgdc)?;
    let refp = FeaturePyramid { f: [randn(&[1, 8, 8, 8], 1.0, 50)?, randn(&[1, 8, 4, 4], 1.0, 51)?, randn(&[1, 8, 2, 2], 1.0, 52)?] };
    let flows = build_flow_pyramid(&randn(&[1, 2, 8, 8], 1.5, 53)?)?;
    let neutral: [Option<OffsetField>; 3] = std::array::from_fn(|l| {
        let oc = m.deform.offset_channels();
        let s = 8 >> l;
        Some(OffsetField { data: Tensor::zeros((1, oc, s, s), DType::F64, &candle_core::Device::Cpu).unwrap(), scale_level: l, half_res: false })
    });
    let ctx = hyb.generate_hybrid_contexts(&refp, &flows, &neutral)?;
    let mut mod_degen: f64 = 0.0;
    for l in 0..3 {
        mod_degen = mod_degen.max(max_diff(&ctx.c[l], &bilinear_warp(&refp.f[l], &flows.levels[l])?)?);
    }
    ensure(mod_degen < 1e-5, format!("module-level FGDC degeneracy off by {mod_degen:e}"))?;
    Ok(format!("warp exact, fractional {frac:.1e}, deform {deform_err:.1e}, degeneracy {:.1e}", op_degen.max(mod_degen)))
}

// ---- 2: gradients ----

fn gradients() -> Res<String> {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, reports: Vec<gradcheck::GradReport>| -> Res<()> {
        let mut e: f64 = 0.0;
        for r in &reports {
            ensure(r.numeric_norm > 0.0, format!("{name}: input {} has zero gradient", r.input))?;
            e = e.max(r.rel_error);
        }
        ensure(e < 1e-3, format!("{name}: relative error {e:.2e}"))?;
        worst.push((name, e));
        Ok(())
    };

    let x = randn(&[1, 2, 5, 5], 1.0, 30)?;
    let flow = randn(&[1, 2, 5, 5], 0.7, 31)?;
    record("warp", gradcheck::check(&[x, flow], 1e-4, |a| probe_loss(&bilinear_warp(&a[0], &a[1])?, 99))?)?;

    let spec = DeformKernelSpec { kernel_size: 3, groups: 2, modulated: true };
    let x = randn(&[1, 2, 5, 5], 1.0, 40)?;
    let flow = randn(&[1, 2, 5, 5], 0.6, 41)?;
    let off = randn(&[1, spec.offset_channels(), 5, 5], 0.4, 42)?;
    let w = randn(&[2, 2, 3, 3], 0.5, 43)?;
    record(
        "deform_sample",
        gradcheck::check(&[x, flow, off, w], 1e-4, |a| probe_loss(&deform_sample(&a[0], &a[1], &a[2], &spec, &a[3], None)?, 98))?,
    )?;

    let ps = ParamStore::new(3, DType::F64);
    let attn = CrossAttentionBlock::new(&ps.root().sub("attn"), 8, 2, 2)?;
    let ffn = GatedFeedForward::new(&ps.root().sub("ffn"), 8, 2)?;
    let fusion = ChannelSpatialFusion::new(&ps.root().sub("fusion"), 8)?;
    let a = randn(&[1, 8, 4, 4], 1.0, 5)?;
    let b = randn(&[1, 8, 4, 4], 1.0, 6)?;
    record("cross_attention", gradcheck::check(&[a.clone(), b.clone()], 1e-5, |t| probe_loss(&attn.forward(&t[0], &t[1])?, 1))?)?;
    record("gated_feed_forward", gradcheck::check(&[a.clone()], 1e-5, |t| probe_loss(&ffn.forward(&t[0])?, 2))?)?;
    record("fusion_gates", gradcheck::check(&[a, b], 1e-5, |t| probe_loss(&fusion.forward(&t[0], &t[1])?, 3))?)?;
    Ok(worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", "))
}

// ---- 3: entropy coding and bitstream ----

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

const GOLDEN_PRESETS: [&str; 2] = ["J", "A"];

fn golden_setup(preset: &str) -> Res<(VideoCodec, Vec<Frame>)> {
    let codec = VideoCodec::new(&tiny_config(preset, 7)?)?;
    Ok((codec, clip(MotionFamily::Elastic, 64, 64, 4, 3)?))
}

fn bless_golden() -> Res<()> {
    let dir = golden_dir();
    std::fs::create_dir_all(&dir)?;
    let mut expected = BTreeMap::new();
    for p in GOLDEN_PRESETS {
        let (codec, frames) = golden_setup(p)?;
        let (bytes, recon) = codec.encode_sequence(&frames, 8)?;
        std::fs::write(dir.join(format!("{p}.bin")), &bytes)?;
        expected.insert(p.to_string(), recon.iter().map(frame_sha).collect::<Vec<_>>());
    }
    std::fs::write(dir.join("expected.json"), serde_json::to_string_pretty(&expected)?)?;
    Ok(())
}

fn entropy_and_bitstream() -> Res<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tables: Vec<CdfTable> = (0..6)
        .map(|i| {
            let n = 3 + 4 * i;
            let pmf: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            CdfTable::from_pmf(&pmf, -(n as i32) / 2)
        })
        .collect();
    let idx: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..tables.len())).collect();
    let symbols: Vec<i32> = idx.iter().map(|&t| rng.random_range(-(tables[t].support() as i32)..=tables[t].support() as i32)).collect();
    let bytes = range_encode(&symbols, &idx, &tables)?;
    ensure(range_decode(&bytes, &idx, &tables)? == symbols, "range coder round trip changed symbols")?;

    // rate estimate on latents of a briefly trained intra codec
    let codec = VideoCodec::new(&tiny_config("J", 5)?)?;
    let data = vec![TrainClip::from(generate_synthetic_clip(MotionFamily::Translate, &SynthParams::default(), 5)?)];
    train_multistage(&codec, &data, &TrainOptions { stages: vec![0], steps: Some([150, 0, 0, 0, 0]), ..TrainOptions::default() })?;
    let big = clip(MotionFamily::Translate, 256, 256, 2, 6)?;
    let x = big[0].pad_to(PAD_MULTIPLE).to_tensor(codec.dtype())?;
    let y = codec.intra.analyze(&x)?;
    let (code, _) = codec.intra.hyper.encode(&y, None, &codec.gaussian)?;
    ensure(code.y.len() >= 4096, format!("only {} latent symbols", code.y.len()))?;
    let est_bytes = estimate_rate(&code.y, &code.y_tables, &codec.gaussian.tables) / 8.0;
    let real = range_encode(&code.y, &code.y_tables, &codec.gaussian.tables)?.len() as f64;
    ensure(
        (real - est_bytes).abs() <= 0.02 * est_bytes + 32.0,
        format!("{real} coded bytes vs {est_bytes:.1} estimated over {} symbols", code.y.len()),
    )?;

    // golden streams
    if std::env::var_os("CTXCODEC_BLESS").is_some() {
        bless_golden()?;
    }
    let expected: BTreeMap<String, Vec<String>> = serde_json::from_str(&std::fs::read_to_string(golden_dir().join("expected.json"))?)?;
    let mut golden_frames = 0;
    for p in GOLDEN_PRESETS {
        let (codec, _) = golden_setup(p)?;
        let bytes = std::fs::read(golden_dir().join(format!("{p}.bin")))?;
        let dec = codec.decode_stream(&bytes)?;
        let want = &expected[p];
        ensure(dec.len() == want.len(), format!("golden {p}: {} frames decoded, {} expected", dec.len(), want.len()))?;
        for (i, (f, h)) in dec.iter().zip(want).enumerate() {
            ensure(&frame_sha(f) == h, format!("golden {p} frame {i} decodes differently"))?;
        }
        golden_frames += dec.len();
    }

    // corruption inside any substream payload is a checksum failure
    let (codec, frames) = golden_setup("J")?;
    let bytes = std::fs::read(golden_dir().join("J.bin"))?;
    let mut positions = Vec::new();
    let mut at = 0;
    for f in split_frames(&bytes)? {
        let mut s = at + HEADER_LEN;
        for id in [SubstreamId::Flow, SubstreamId::Offset, SubstreamId::Hyper, SubstreamId::Frame] {
            let n = f.get(id).len();
            if n > 0 {
                positions.extend([s, s + n / 2, s + n - 1]);
            }
            s += n;
        }
        at += f.len();
    }
    let mut checksum_errors = 0;
    for &pos in &positions {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x5a;
        match codec.decode_stream(&bad) {
            Err(Error::Checksum { .. }) => checksum_errors += 1,
            Err(e) => return Err(format!("corruption at byte {pos} gave `{e}`").into()),
            Ok(_) => return Err(format!("corruption at byte {pos} decoded").into()),
        }
    }
    ensure(!frames.is_empty(), "empty golden clip")?;
    Ok(format!(
        "10k-symbol round trip ok, {real} B vs {est_bytes:.1} B estimated ({} symbols), {golden_frames} golden frames exact, {checksum_errors}/{} corruptions caught",
        code.y.len(),
        positions.len()
    ))
}

// ---- 4: closed loop ----

fn closed_loop() -> Res<String> {
    let frames = clip(MotionFamily::Elastic, 64, 64, 32, 21)?;
    let mut notes = Vec::new();
    for preset in ["J", "A"] {
        let codec = briefly_trained(preset, 21)?;
        let (bytes, recon) = codec.encode_sequence(&frames, 32)?;
        let dec = codec.decode_stream(&bytes)?;
        ensure(dec.len() == 32 && recon.len() == 32, format!("{preset}: {} frames decoded", dec.len()))?;
        if let Some(i) = (0..32).find(|&i| !frames_identical(&dec[i], &recon[i])) {
            return Err(format!("{preset}: frame {i} differs between encoder and decoder").into());
        }
        let offset_bytes: usize = split_frames(&bytes)?.iter().map(|f| f.get(SubstreamId::Offset).len()).sum();
        if preset == "A" {
            ensure(offset_bytes == 0, format!("preset A wrote {offset_bytes} offset bytes"))?;
        } else {
            ensure(offset_bytes > 0, "preset J wrote no offset bytes")?;
        }
        notes.push(format!("{preset}: 32/32 frames identical, {offset_bytes} offset bytes"));
    }
    Ok(notes.join("; "))
}

// ---- 5: enhancement parity ----

fn enhancement_parity() -> Res<String> {
    let enc = briefly_trained("J", 31)?;
    let dec = VideoCodec::new(&enc.cfg)?;
    checkpoint::load_into(&dec, &checkpoint::to_bytes(&enc, "parity")?)?;

    let frames = clip(MotionFamily::Elastic, 64, 64, 2, 32)?;
    let coded = enc.encode_iframe(&frames[0])?;
    let (_, dec_state) = dec.decode_iframe(&coded.bitstream)?;
    ensure(bit_identical(&coded.state.feature, &dec_state.feature)?, "decoded reference features differ")?;

    // decoded inputs: quantized flow and offsets, exactly as transmitted
    let x1 = frames[1].pad_to(PAD_MULTIPLE).to_tensor(enc.dtype())?;
    let v = enc.motion.estimate_flow(&x1, &coded.state.x_hat)?;
    let (vcode, v_hat, _) = enc.motion.encode_flow(&v)?;
    let v_dec = dec.motion.decode_flow(&vcode)?;
    ensure(bit_identical(&v_hat, &v_dec)?, "decoded flows differ")?;
    let flows = build_flow_pyramid(&v_hat)?;
    let refp_enc = enc.hybrid.extract_reference_pyramid(&coded.state.feature)?;
    let refp_dec = dec.hybrid.extract_reference_pyramid(&dec_state.feature)?;
    let f0 = enc.hybrid.extract_current_feature(&x1)?;
    let est = enc.hybrid.estimate_residual_offsets(&f0, &refp_enc, &flows)?;
    let mut o_bar: [Option<OffsetField>; 3] = [None, None, None];
    for (l, e) in est.iter().enumerate() {
        if let (Some(e), Some(b)) = (e, &enc.hybrid.branches[l]) {
            o_bar[l] = Some(b.restore(&b.codec.encode(&e.data)?.1)?);
        }
    }
    ensure(o_bar.iter().any(Option::is_some), "preset J decoded no offsets")?;

    let ctx_enc = enc.hybrid.generate_hybrid_contexts(&refp_enc, &flows, &o_bar)?;
    let ctx_dec = dec.hybrid.generate_hybrid_contexts(&refp_dec, &flows, &o_bar)?;
    let a = enc.enhance.enhance(&ctx_enc, &refp_enc, &flows, o_bar[0].as_ref())?;
    let b = dec.enhance.enhance(&ctx_dec, &refp_dec, &flows, o_bar[0].as_ref())?;
    let again = enc.enhance.enhance(&ctx_enc, &refp_enc, &flows, o_bar[0].as_ref())?;
    let mut compared = 0;
    for (x, y) in a.local.iter().zip(&b.local).chain(a.fin.iter().zip(&b.fin)).chain([(&a.global, &b.global), (&a.fused_small, &b.fused_small)]) {
        ensure(bit_identical(x, y)?, "encoder and decoder enhancement outputs differ")?;
        compared += x.elem_count();
    }
    for (x, y) in a.fin.iter().zip(&again.fin) {
        ensure(bit_identical(x, y)?, "enhancement is not repeatable")?;
    }
    let fin_dec = dec.final_contexts(&refp_dec, &flows, &o_bar)?;
    for (x, y) in a.fin.iter().zip(&fin_dec) {
        ensure(bit_identical(x, y)?, "decoder final contexts differ from the enhancer output")?;
    }
    Ok(format!("{compared} values bit-identical across local, global, fused and final contexts"))
}

// ---- 6: overfit smoke training ----

/// Configuration of the smoke run; the step counts are the whole budget.
fn smoke_config() -> Res<CodecConfig> {
    let mut cfg = CodecConfig { ablation: AblationConfig::preset("J")?, model: ModelConfig::tiny(), ..CodecConfig::default() };
    cfg.train.log_every = 50;
    ensure(cfg.train.steps.iter().sum::<usize>() == 2000, "smoke run uses the default 2k-step schedule")?;
    Ok(cfg)
}

fn overfit_smoke() -> Res<String> {
    let cfg = smoke_config()?;
    ensure(cfg.rate.lambda() == 2048.0, "smoke run must use lambda 2048")?;
    let codec = VideoCodec::new(&cfg)?;
    let synth = generate_synthetic_clip(MotionFamily::Translate, &SynthParams { width: 64, height: 64, frames: 8, ..SynthParams::default() }, 1)?;
    let frames = synth.frames.clone();
    let data = vec![TrainClip::from(synth)];
    let before = joint_loss(&codec, &data)?;
    train_multistage(&codec, &data, &TrainOptions::default())?;
    let after = joint_loss(&codec, &data)?;
    let r = evaluate_sequence(&codec, &frames, cfg.gop.intra_period, false)?;
    let inter = r.inter.ok_or("no inter frames")?;
    let steps: usize = cfg.train.steps.iter().sum();
    let detail = format!(
        "{steps} steps: inter PSNR {:.2} dB, total {:.3} bpp, joint loss {before:.3} -> {after:.3} ({:.1}%)",
        inter.psnr,
        r.aggregate.bpp,
        100.0 * after / before
    );
    ensure(inter.psnr > 30.0 && r.aggregate.bpp < 1.0 && after < 0.5 * before, detail.clone())?;
    Ok(detail)
}

// ---- 7: directional ablation ----

fn ablation_direction() -> Res<String> {
    let mut base = tiny_config("A", 2)?;
    base.train.cascade = false;
    let train: Vec<TrainClip> = (0..2)
        .map(|s| Ok(TrainClip::from(generate_synthetic_clip(MotionFamily::Elastic, &SynthParams::default(), 100 + s)?)))
        .collect::<Res<_>>()?;
    let opts = TrainOptions { steps: Some([150, 100, 150, 150, 0]), ..TrainOptions::default() };
    let presets = vec!["A".to_string(), "D".to_string()];
    let models = train_ablation_models(&base, &presets, &train, &opts, None)?;
    let test = vec![clip(MotionFamily::Elastic, 64, 64, 8, 200)?];
    let table = run_ablation(&models, "A", "synthetic-elastic", &test, 8)?;
    println!("{}", ctxcodec::evaluation::report::ablation_csv(&table).trim_end());
    let (wins, total) = table.dominance("A", "D")?;
    let bd = table.rows.iter().find(|r| r.preset == "D").and_then(|r| r.bd_rate_vs_anchor);
    let held = total > 0 && 2 * wins > total;
    let detail = format!(
        "D beats A at {wins}/{total} matched-quality points, BD-rate {}; ordering {}",
        bd.map(|b| format!("{b:+.2}%")).unwrap_or_else(|| "n/a".into()),
        if held { "held" } else { "did not hold" }
    );
    ensure(held, detail.clone())?;
    Ok(detail)
}

// ---- 8: metrics ----

/// Fritsch-Carlson monotone cubic with the three-point end slopes.
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = (0..n - 1).map(|i| x[i + 1] - x[i]).collect();
    let m: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    let mut d = vec![0.0; n];
    for i in 1..n - 1 {
        if m[i - 1] * m[i] > 0.0 {
            let (w1, w2) = (2.0 * h[i] + h[i - 1], h[i] + 2.0 * h[i - 1]);
            d[i] = (w1 + w2) / (w1 / m[i - 1] + w2 / m[i]);
        }
    }
    let end = |h0: f64, h1: f64, m0: f64, m1: f64| {
        let e = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
        if e * m0 <= 0.0 {
            0.0
        } else if m0 * m1 < 0.0 && e.abs() > 3.0 * m0.abs() {
            3.0 * m0
        } else {
            e
        }
    };
    d[0] = end(h[0], h[1], m[0], m[1]);
    d[n - 1] = end(h[n - 2], h[n - 3], m[n - 2], m[n - 3]);
    d
}

fn pchip_eval(x: &[f64], y: &[f64], d: &[f64], t: f64) -> f64 {
    let i = (0..x.len() - 1).rev().find(|&i| t >= x[i]).unwrap_or(0);
    let h = x[i + 1] - x[i];
    let s = (t - x[i]) / h;
    let a = y[i];
    let b = d[i] * h;
    let c = 3.0 * (y[i + 1] - y[i]) - 2.0 * d[i] * h - d[i + 1] * h;
    let e = 2.0 * (y[i] - y[i + 1]) + d[i] * h + d[i + 1] * h;
    a + s * (b + s * (c + s * e))
}

fn bd_oracle(anchor: &[(f64, f64)], test: &[(f64, f64)]) -> f64 {
    let prep = |c: &[(f64, f64)]| {
        let mut p: Vec<(f64, f64)> = c.iter().map(|&(r, q)| (q, r.ln())).collect();
        p.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (q, l): (Vec<f64>, Vec<f64>) = p.into_iter().unzip();
        let d = pchip_slopes(&q, &l);
        (q, l, d)
    };
    let (qa, la, da) = prep(anchor);
    let (qt, lt, dt) = prep(test);
    let lo = qa[0].max(qt[0]);
    let hi = qa[qa.len() - 1].min(qt[qt.len() - 1]);
    let n = 200_000;
    let step = (hi - lo) / n as f64;
    let diff = |q: f64| pchip_eval(&qt, &lt, &dt, q) - pchip_eval(&qa, &la, &da, q);
    let integral: f64 = (0..n).map(|i| 0.5 * step * (diff(lo + i as f64 * step) + diff(lo + (i + 1) as f64 * step))).sum();
    ((integral / (hi - lo)).exp() - 1.0) * 100.0
}

fn metric_correctness() -> Res<String> {
    let a = Frame::filled(32, 24, 0.25);
    let b = Frame::filled(32, 24, 0.375);
    let analytic = 10.0 * (1.0f64 / (0.125 * 0.125)).log10();
    let p = metrics::psnr(&a, &b)?;
    ensure((p - analytic).abs() < 1e-9, format!("uniform PSNR {p} vs {analytic}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noisy: Vec<f32> = (0..3 * 24 * 32).map(|_| rng.random_range(0.0..1.0)).collect();
    let c = Frame::new(32, 24, noisy)?;
    let mse = a.data.iter().zip(&c.data).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.data.len() as f64;
    let direct = 10.0 * (1.0 / mse).log10();
    ensure((metrics::psnr(&a, &c)? - direct).abs() < 1e-9, "PSNR differs from the direct MSE formula")?;

    let tex: Vec<f32> = (0..3 * 192 * 176).map(|_| rng.random_range(0.0..1.0)).collect();
    let t = Frame::new(176, 192, tex)?;
    let self_sim = metrics::ms_ssim(&t, &t)?;
    ensure((self_sim - 1.0).abs() < 1e-12, format!("MS-SSIM of a frame with itself is {self_sim}"))?;

    let anchor = vec![(0.05, 30.1), (0.11, 32.4), (0.23, 34.2), (0.47, 36.3)];
    let ac = RDCurve::new("anchor", "synthetic", anchor.clone())?;
    let identity = bd_rate(&ac, &ac)?;
    ensure(identity.abs() < 1e-12, format!("identity BD-rate {identity}"))?;
    let doubled = RDCurve::new("double", "synthetic", anchor.iter().map(|&(r, q)| (2.0 * r, q)).collect())?;
    let dbl = bd_rate(&ac, &doubled)?;
    ensure((dbl - 100.0).abs() <= 0.1, format!("doubling gives {dbl}%"))?;
    let test = vec![(0.04, 29.8), (0.09, 32.0), (0.2, 34.5), (0.41, 36.0), (0.8, 37.9)];
    let got = bd_rate(&ac, &RDCurve::new("test", "synthetic", test.clone())?)?;
    let oracle = bd_oracle(&anchor, &test);
    ensure((got - oracle).abs() <= 0.05, format!("BD-rate {got:.4}% vs fine-grid oracle {oracle:.4}%"))?;
    Ok(format!("PSNR exact, MS-SSIM self {self_sim}, BD identity {identity}, doubling {dbl:.4}%, oracle {got:.4}% vs {oracle:.4}%"))
}

fn main() {
    let only: Option<Vec<u8>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria = [
        Criterion { id: 1, name: "operator oracles", hard: true, run: operator_oracles },
        Criterion { id: 2, name: "gradient checks", hard: true, run: gradients },
        Criterion { id: 3, name: "entropy coding and bitstream", hard: true, run: entropy_and_bitstream },
        Criterion { id: 4, name: "closed-loop determinism", hard: true, run: closed_loop },
        Criterion { id: 5, name: "enhancement parity", hard: true, run: enhancement_parity },
        Criterion { id: 6, name: "overfit smoke training", hard: true, run: overfit_smoke },
        Criterion { id: 7, name: "directional ablation D vs A (soft)", hard: false, run: ablation_direction },
        Criterion { id: 8, name: "metric correctness", hard: true, run: metric_correctness },
    ];
    let mut failed_hard = 0;
    for c in criteria.iter().filter(|c| only.as_ref().is_none_or(|o| o.contains(&c.id))) {
        let t = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(c.run)) {
            Ok(r) => r.map_err(|e| e.to_string()),
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into())),
        };
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{}] {} ({secs:.1}s): {detail}", c.id, c.name),
            Err(e) => {
                println!("FAIL [{}] {} ({secs:.1}s): {e}", c.id, c.name);
                if c.hard {
                    failed_hard += 1;
                }
            }
        }
    }
    if failed_hard > 0 {
        std::process::exit(1);
    }
}
