//! Quick invariant checks runnable from an installed binary.

use candle_core::{DType, Tensor};
use ctxcodec::codec_core::VideoCodec;
use ctxcodec::config::{AblationConfig, CodecConfig, ModelConfig};
use ctxcodec::entropy::{range_decode, range_encode, CdfTable};
use ctxcodec::evaluation::{bd_rate, metrics, RDCurve};
use ctxcodec::frame::Frame;
use ctxcodec::gradcheck::randn;
use ctxcodec::tensor_ops::{bilinear_warp, deform_sample, DeformKernelSpec};
use ctxcodec::training::synth::{generate_synthetic_clip, MotionFamily, SynthParams};
use ctxcodec::{Error, Result};

type Check = (&'static str, fn() -> Result<()>);

fn ensure(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Contract(msg.into()))
    }
}

fn max_abs(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok((a - b)?.abs()?.flatten_all()?.max(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn warp_identity() -> Result<()> {
    let x = randn(&[1, 3, 6, 5], 1.0, 1)?;
    let zero = Tensor::zeros((1, 2, 6, 5), DType::F64, x.device())?;
    ensure(max_abs(&bilinear_warp(&x, &zero)?, &x)? == 0.0, "zero flow changed the input")
}

fn deform_degeneracy() -> Result<()> {
    let spec = DeformKernelSpec { kernel_size: 3, groups: 1, modulated: true };
    let x = randn(&[1, 2, 5, 5], 1.0, 2)?;
    let flow = randn(&[1, 2, 5, 5], 0.7, 3)?;
    let offsets = Tensor::zeros((1, spec.offset_channels(), 5, 5), DType::F64, x.device())?;
    let mut w = vec![0.0f64; 2 * 2 * 9];
    w[4] = 1.0;
    w[2 * 9 + 9 + 4] = 1.0;
    let weight = Tensor::from_vec(w, (2, 2, 3, 3), x.device())?;
    let out = deform_sample(&x, &flow, &offsets, &spec, &weight, None)?;
    ensure(max_abs(&out, &bilinear_warp(&x, &flow)?)? < 1e-5, "centre-tap deformable sampling differs from warping")
}

fn range_coder_round_trip() -> Result<()> {
    let table = CdfTable::from_pmf(&[0.05, 0.1, 0.2, 0.3, 0.2, 0.1, 0.05], -3);
    let symbols: Vec<i32> = (0..2000).map(|i| ((i * 7919) % 11) as i32 - 5).collect();
    let idx = vec![0usize; symbols.len()];
    let bytes = range_encode(&symbols, &idx, std::slice::from_ref(&table))?;
    ensure(range_decode(&bytes, &idx, &[table])? == symbols, "range coder round trip changed symbols")
}

fn tiny(preset: &str) -> Result<VideoCodec> {
    VideoCodec::new(&CodecConfig { model: ModelConfig::tiny(), ablation: AblationConfig::preset(preset)?, ..CodecConfig::default() })
}

fn closed_loop() -> Result<()> {
    let p = SynthParams { frames: 3, ..SynthParams::default() };
    let frames = generate_synthetic_clip(MotionFamily::Elastic, &p, 1)?.frames;
    for preset in ["A", "J"] {
        let c = tiny(preset)?;
        let (bytes, recon) = c.encode_sequence(&frames, 8)?;
        let dec = c.decode_stream(&bytes)?;
        let same = dec.iter().zip(&recon).all(|(a, b)| a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        ensure(dec.len() == 3 && same, "decoder output differs from encoder reconstruction")?;
    }
    Ok(())
}

fn corrupt_stream_rejected() -> Result<()> {
    let c = tiny("J")?;
    let (mut bytes, _) = c.encode_sequence(&[Frame::filled(64, 64, 0.4)], 8)?;
    let n = bytes.len();
    bytes[n - 1] ^= 0x01;
    ensure(matches!(c.decode_stream(&bytes), Err(Error::Checksum { .. } | Error::Bitstream(_))), "corrupted stream decoded")
}

fn metrics_sanity() -> Result<()> {
    let a = Frame::filled(16, 16, 0.5);
    let b = Frame::filled(16, 16, 0.6);
    ensure((metrics::psnr(&a, &b)? - 20.0).abs() < 1e-4, "PSNR of a 0.1 offset is not 20 dB")?;
    let t = Frame::filled(160, 160, 0.3);
    ensure((metrics::ms_ssim(&t, &t)? - 1.0).abs() < 1e-12, "MS-SSIM of identical frames is not 1")?;
    let c = RDCurve::new("a", "x", vec![(0.1, 30.0), (0.2, 32.0), (0.4, 34.0), (0.8, 36.0)])?;
    let d = RDCurve::new("b", "x", c.points.iter().map(|&(r, q)| (2.0 * r, q)).collect())?;
    ensure(bd_rate(&c, &c)? == 0.0 && (bd_rate(&c, &d)? - 100.0).abs() < 1e-9, "BD-rate identity or doubling failed")
}

fn config_hash_gate() -> Result<()> {
    let a = CodecConfig::default();
    let again = CodecConfig::from_toml_str(&a.to_toml())?;
    let mut b = a.clone();
    b.model.c0 += 8;
    ensure(a.hash() == again.hash() && a.hash() != b.hash(), "config hash is not a stable fingerprint")
}

pub fn run() -> Vec<(&'static str, Result<()>)> {
    let checks: [Check; 7] = [
        ("warp_zero_flow_identity", warp_identity),
        ("deform_degenerates_to_warp", deform_degeneracy),
        ("range_coder_round_trip", range_coder_round_trip),
        ("closed_loop_decoding", closed_loop),
        ("corrupt_stream_rejected", corrupt_stream_rejected),
        ("metrics_sanity", metrics_sanity),
        ("config_hash_gate", config_hash_gate),
    ];
    checks.iter().map(|(n, f)| (*n, f())).collect()
}
