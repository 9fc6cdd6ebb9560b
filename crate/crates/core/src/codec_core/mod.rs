//! The learned video codec: intra and inter frame coding, closed-loop state
//! and the bitstream they share.

pub mod bitstream;
pub mod networks;

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::config::CodecConfig;
use crate::context_enhance::ContextEnhancer;
use crate::entropy::{CdfTable, GaussianConditional};
use crate::error::{contract, Error, Result};
use crate::frame::{Frame, PAD_MULTIPLE};
use crate::hybrid_context::{FeaturePyramid, HybridContext, OffsetField};
use crate::motion::{build_flow_pyramid, FlowPyramid, LatentCode, MotionField, MotionModule, SubstreamId};
use crate::nn::ParamStore;
use crate::tensor_ops::{bilinear_warp, cpu, QuantMode};

pub use bitstream::{Bitstream, FrameType, Header};
pub use networks::{ContextualDecoder, ContextualEncoder, HyperCode, Hyperprior, IntraCodec};

/// Parameter-name prefixes of each trainable group.
pub const GROUP_INTRA: &str = "intra.";
pub const GROUP_MOTION: &str = "motion.";
pub const CONTEXT_GROUPS: [&str; 5] = ["hybrid.", "enhance.", "ctxenc.", "ctxdec.", "hyper."];

/// Decoder-side memory carried from one frame to the next.
#[derive(Clone)]
pub struct CodecState {
    /// Padded reconstruction `x^_{t-1}`, `(1, 3, H, W)`.
    pub x_hat: Tensor,
    /// Propagated feature `F^_{t-1}`, `(1, c0, H, W)`.
    pub feature: Tensor,
    pub width: usize,
    pub height: usize,
    /// Frames decoded since the last intra frame.
    pub since_intra: usize,
}

/// One coded frame and its reconstruction.
pub struct Coded {
    pub bitstream: Bitstream,
    pub recon: Frame,
    pub state: CodecState,
}

/// Rate and distortion of one frame. Rates exclude the fixed header.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RDPoint {
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: Option<f64>,
    /// Flow, offset, hyper and frame substreams in bits per pixel.
    pub breakdown: [f64; 4],
    pub header_bpp: f64,
}

impl RDPoint {
    pub fn from_bitstream(bs: &Bitstream, pixels: usize, psnr: f64, ms_ssim: Option<f64>) -> Self {
        let p = pixels as f64;
        let breakdown = bitstream::SUBSTREAMS.map(|s| bs.substream_bits(s) as f64 / p);
        Self {
            bpp: bs.payload_bits() as f64 / p,
            psnr,
            ms_ssim,
            breakdown,
            header_bpp: (8 * bitstream::HEADER_LEN) as f64 / p,
        }
    }
}

/// Differentiable flow pass.
pub struct MotionOutput {
    pub v: MotionField,
    pub v_hat: MotionField,
    pub bits: Tensor,
    /// Reference warped by the decoded flow.
    pub warped: Tensor,
}

/// Differentiable inter pass. Bit counts are totals over the batch.
pub struct InterOutput {
    pub x_hat: Tensor,
    pub feature: Tensor,
    pub motion: MotionOutput,
    pub bits_offset: Tensor,
    pub bits_hyper: Tensor,
    pub bits_frame: Tensor,
}

impl InterOutput {
    pub fn total_bits(&self) -> Result<Tensor> {
        Ok((((&self.motion.bits + &self.bits_offset)? + &self.bits_hyper)? + &self.bits_frame)?)
    }
}

/// Every network of the codec over one parameter store.
#[derive(Clone)]
pub struct VideoCodec {
    pub cfg: CodecConfig,
    pub store: ParamStore,
    pub intra: IntraCodec,
    pub motion: MotionModule,
    pub hybrid: HybridContext,
    pub enhance: ContextEnhancer,
    pub ctx_enc: ContextualEncoder,
    pub ctx_dec: ContextualDecoder,
    pub hyper: Hyperprior,
    pub gaussian: GaussianConditional,
    hash: u64,
}

fn scalar_zero(dtype: DType) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, &cpu())?)
}

fn padded_dims(w: usize, h: usize) -> (usize, usize) {
    (w.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE, h.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE)
}

/// Concatenate per-part symbol streams coded under concatenated tables.
struct Packing {
    symbols: Vec<i32>,
    index: Vec<usize>,
    tables: Vec<CdfTable>,
}

impl Packing {
    fn new() -> Self {
        Self { symbols: Vec::new(), index: Vec::new(), tables: Vec::new() }
    }

    fn push(&mut self, symbols: &[i32], index: &[usize], tables: Vec<CdfTable>) {
        let base = self.tables.len();
        self.symbols.extend_from_slice(symbols);
        self.index.extend(index.iter().map(|i| i + base));
        self.tables.extend(tables);
    }

    fn pack(&self) -> Result<Vec<u8>> {
        bitstream::pack_substream(&self.symbols, &self.index, &self.tables)
    }

    fn unpack(&self, id: SubstreamId, bytes: &[u8]) -> Result<Vec<i32>> {
        bitstream::unpack_substream(id, bytes, &self.index, &self.tables)
    }
}

impl VideoCodec {
    pub fn new(cfg: &CodecConfig) -> Result<Self> {
        Self::with_dtype(cfg, DType::F32)
    }

    pub fn with_dtype(cfg: &CodecConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(cfg.seed, dtype);
        let root = store.root();
        let m = &cfg.model;
        Ok(Self {
            intra: IntraCodec::new(&root.sub("intra"), m)?,
            motion: MotionModule::new(&root.sub("motion"), m)?,
            hybrid: HybridContext::new(&root.sub("hybrid"), m, &cfg.ablation)?,
            enhance: ContextEnhancer::new(&root.sub("enhance"), m, &cfg.ablation)?,
            ctx_enc: ContextualEncoder::new(&root.sub("ctxenc"), m)?,
            ctx_dec: ContextualDecoder::new(&root.sub("ctxdec"), m)?,
            hyper: Hyperprior::new(&root.sub("hyper"), m, true)?,
            gaussian: GaussianConditional::new(),
            hash: cfg.hash(),
            cfg: cfg.clone(),
            store,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn config_hash(&self) -> u64 {
        self.hash
    }

    pub fn lambda(&self) -> f64 {
        self.cfg.rate.lambda()
    }

    // ---- differentiable passes ----

    pub fn intra_forward(&self, x: &Tensor, quant: QuantMode, rng: &mut ChaCha8Rng) -> Result<networks::IntraOutput> {
        self.intra.forward_train(x, quant, Some(rng))
    }

    pub fn motion_forward(&self, x_t: &Tensor, x_ref: &Tensor, quant: QuantMode, rng: &mut ChaCha8Rng) -> Result<MotionOutput> {
        let v = self.motion.estimate_flow(x_t, x_ref)?;
        let out = self.motion.codec.forward_train(&v, quant, Some(rng))?;
        let warped = bilinear_warp(x_ref, &out.recon)?;
        Ok(MotionOutput { v, v_hat: out.recon, bits: out.bits, warped })
    }

    /// Full inter pass. With `detach_motion` no gradient reaches the flow
    /// networks.
    pub fn inter_forward(
        &self,
        x_t: &Tensor,
        x_ref: &Tensor,
        f_ref: &Tensor,
        quant: QuantMode,
        rng: &mut ChaCha8Rng,
        detach_motion: bool,
    ) -> Result<InterOutput> {
        let mut motion = self.motion_forward(x_t, x_ref, quant, rng)?;
        if detach_motion {
            motion.v_hat = motion.v_hat.detach();
            motion.bits = motion.bits.detach();
        }
        let flows = build_flow_pyramid(&motion.v_hat)?;
        let refp = self.hybrid.extract_reference_pyramid(f_ref)?;
        let mut o_bar: [Option<OffsetField>; 3] = [None, None, None];
        let mut bits_offset = scalar_zero(self.dtype())?;
        if self.cfg.ablation.any_offsets() {
            let f0 = self.hybrid.extract_current_feature(x_t)?;
            let est = self.hybrid.estimate_residual_offsets(&f0, &refp, &flows)?;
            for (l, e) in est.iter().enumerate() {
                let (Some(e), Some(b)) = (e, &self.hybrid.branches[l]) else { continue };
                let out = b.codec.forward_train(&e.data, quant, Some(rng))?;
                bits_offset = (bits_offset + out.bits)?;
                o_bar[l] = Some(b.restore(&out.recon)?);
            }
        }
        let ctx = self.final_contexts(&refp, &flows, &o_bar)?;
        let y = self.ctx_enc.forward(x_t, &ctx)?;
        let h = self.hyper.forward_train(&y, Some(&ctx[2]), quant, Some(rng))?;
        let (x_hat, feature) = self.ctx_dec.forward(&h.y_hat, &ctx)?;
        Ok(InterOutput { x_hat, feature, motion, bits_offset, bits_hyper: h.bits_z, bits_frame: h.bits_y })
    }

    /// `C-bar^l` from decoded quantities only.
    pub fn final_contexts(&self, refp: &FeaturePyramid, flows: &FlowPyramid, o_bar: &[Option<OffsetField>; 3]) -> Result<[Tensor; 3]> {
        let ctx = self.hybrid.generate_hybrid_contexts(refp, flows, o_bar)?;
        Ok(self.enhance.enhance(&ctx, refp, flows, o_bar[0].as_ref())?.fin)
    }

    // ---- coding ----

    fn check_hash(&self, h: &Header) -> Result<()> {
        if h.config_hash != self.hash {
            return Err(Error::HashMismatch { expected: self.hash, found: h.config_hash });
        }
        Ok(())
    }

    fn state_from(&self, x_hat: Tensor, feature: Tensor, w: usize, h: usize, since_intra: usize) -> Result<(Frame, CodecState)> {
        let recon = Frame::from_tensor(&x_hat)?.crop(w, h)?;
        Ok((recon, CodecState { x_hat, feature, width: w, height: h, since_intra }))
    }

    fn hyper_packings(&self, hyper: &Hyperprior, code_z_dims: [usize; 4], y_tables: &[usize]) -> Result<(Packing, Packing)> {
        let mut hp = Packing::new();
        let zn: usize = code_z_dims.iter().product();
        hp.push(&vec![0; zn], &hyper.prior.table_indices(&code_z_dims), hyper.prior.tables()?);
        let mut fp = Packing::new();
        fp.push(&vec![0; y_tables.len()], y_tables, self.gaussian.tables.clone());
        Ok((hp, fp))
    }

    fn write_hyper(&self, bs: &mut Bitstream, hyper: &Hyperprior, code: &HyperCode) -> Result<()> {
        let (mut hp, mut fp) = self.hyper_packings(hyper, code.z_dims, &code.y_tables)?;
        hp.symbols = code.z.clone();
        fp.symbols = code.y.clone();
        bs.set(SubstreamId::Hyper, hp.pack()?);
        bs.set(SubstreamId::Frame, fp.pack()?);
        Ok(())
    }

    /// Decode the hyper and frame substreams into `y^`.
    fn read_hyper(&self, bs: &Bitstream, hyper: &Hyperprior, y_dims: [usize; 4], c2: Option<&Tensor>) -> Result<Tensor> {
        let z_dims = hyper.z_dims(y_dims[0], y_dims[2], y_dims[3]);
        let mut hp = Packing::new();
        let zn: usize = z_dims.iter().product();
        hp.push(&[], &hyper.prior.table_indices(&z_dims), hyper.prior.tables()?);
        debug_assert_eq!(hp.index.len(), zn);
        let z = hp.unpack(SubstreamId::Hyper, bs.get(SubstreamId::Hyper))?;
        let (y_tables, mu, mu_dims) = hyper.decode_tables(&z, z_dims, c2, &self.gaussian, self.dtype())?;
        if mu_dims != y_dims {
            return contract(format!("entropy parameters {mu_dims:?} for latent {y_dims:?}"));
        }
        let mut fp = Packing::new();
        fp.push(&[], &y_tables, self.gaussian.tables.clone());
        let y = fp.unpack(SubstreamId::Frame, bs.get(SubstreamId::Frame))?;
        hyper.reconstruct(&y, y_dims, &mu, self.dtype())
    }

    pub fn encode_iframe(&self, x: &Frame) -> Result<Coded> {
        let xt = x.pad_to(PAD_MULTIPLE).to_tensor(self.dtype())?;
        let y = self.intra.analyze(&xt)?;
        let (code, y_hat) = self.intra.hyper.encode(&y, None, &self.gaussian)?;
        let mut bs = Bitstream::new(FrameType::Intra, x.width, x.height, self.cfg.rate.lambda_index as usize, self.hash)?;
        self.write_hyper(&mut bs, &self.intra.hyper, &code)?;
        let (x_hat, feature) = self.intra.synthesize(&y_hat)?;
        let (recon, state) = self.state_from(x_hat, feature, x.width, x.height, 0)?;
        Ok(Coded { bitstream: bs, recon, state })
    }

    pub fn decode_iframe(&self, bs: &Bitstream) -> Result<(Frame, CodecState)> {
        self.check_hash(&bs.header)?;
        if bs.header.frame_type != FrameType::Intra {
            return Err(Error::Bitstream("expected an intra frame".into()));
        }
        for id in [SubstreamId::Flow, SubstreamId::Offset] {
            if !bs.get(id).is_empty() {
                return Err(Error::Bitstream(format!("intra frame carries a {} substream", id.name())));
            }
        }
        let (w, h) = (bs.header.width as usize, bs.header.height as usize);
        let (pw, ph) = padded_dims(w, h);
        let y_dims = [1, self.cfg.model.latent, ph / 16, pw / 16];
        let y_hat = self.read_hyper(bs, &self.intra.hyper, y_dims, None)?;
        let (x_hat, feature) = self.intra.synthesize(&y_hat)?;
        self.state_from(x_hat, feature, w, h, 0)
    }

    fn offset_dims(&self, pw: usize, ph: usize) -> Vec<(usize, [usize; 4])> {
        self.hybrid
            .branches
            .iter()
            .enumerate()
            .filter_map(|(l, b)| b.as_ref().map(|b| (l, b.codec.latent_dims(1, ph >> (l + 1), pw >> (l + 1)))))
            .collect()
    }

    fn offset_packing(&self, pw: usize, ph: usize) -> Result<Packing> {
        let mut p = Packing::new();
        for (l, dims) in self.offset_dims(pw, ph) {
            let b = self.hybrid.branches[l].as_ref().expect("branch exists");
            p.push(&[], &b.codec.table_indices(dims), b.codec.tables()?);
        }
        Ok(p)
    }

    pub fn encode_frame(&self, x: &Frame, state: &CodecState) -> Result<Coded> {
        if (x.width, x.height) != (state.width, state.height) {
            return contract(format!("frame {}x{} does not match state {}x{}", x.width, x.height, state.width, state.height));
        }
        let xt = x.pad_to(PAD_MULTIPLE).to_tensor(self.dtype())?;
        let (pw, ph) = (xt.dims()[3], xt.dims()[2]);
        let mut bs = Bitstream::new(FrameType::Inter, x.width, x.height, self.cfg.rate.lambda_index as usize, self.hash)?;

        let v = self.motion.estimate_flow(&xt, &state.x_hat)?;
        let (vcode, v_hat, _) = self.motion.encode_flow(&v)?;
        let mut fpk = Packing::new();
        fpk.push(&vcode.symbols, &self.motion.codec.table_indices(vcode.dims), self.motion.codec.tables()?);
        bs.set(SubstreamId::Flow, fpk.pack()?);

        let flows = build_flow_pyramid(&v_hat)?;
        let refp = self.hybrid.extract_reference_pyramid(&state.feature)?;
        let mut o_bar: [Option<OffsetField>; 3] = [None, None, None];
        if self.cfg.ablation.any_offsets() {
            let f0 = self.hybrid.extract_current_feature(&xt)?;
            let est = self.hybrid.estimate_residual_offsets(&f0, &refp, &flows)?;
            let mut opk = self.offset_packing(pw, ph)?;
            for (l, e) in est.iter().enumerate() {
                let (Some(e), Some(b)) = (e, &self.hybrid.branches[l]) else { continue };
                let (code, recon, _) = b.codec.encode(&e.data)?;
                opk.symbols.extend_from_slice(&code.symbols);
                o_bar[l] = Some(b.restore(&recon)?);
            }
            bs.set(SubstreamId::Offset, opk.pack()?);
        }

        let ctx = self.final_contexts(&refp, &flows, &o_bar)?;
        let y = self.ctx_enc.forward(&xt, &ctx)?;
        let (code, y_hat) = self.hyper.encode(&y, Some(&ctx[2]), &self.gaussian)?;
        self.write_hyper(&mut bs, &self.hyper, &code)?;
        let (x_hat, feature) = self.ctx_dec.forward(&y_hat, &ctx)?;
        let (recon, state) = self.state_from(x_hat, feature, x.width, x.height, state.since_intra + 1)?;
        Ok(Coded { bitstream: bs, recon, state })
    }

    pub fn decode_frame(&self, bs: &Bitstream, state: &CodecState) -> Result<(Frame, CodecState)> {
        self.check_hash(&bs.header)?;
        if bs.header.frame_type != FrameType::Inter {
            return Err(Error::Bitstream("expected an inter frame".into()));
        }
        let (w, h) = (bs.header.width as usize, bs.header.height as usize);
        if (w, h) != (state.width, state.height) {
            return Err(Error::Bitstream(format!("inter frame {w}x{h} after a {}x{} frame", state.width, state.height)));
        }
        let (pw, ph) = padded_dims(w, h);
        let vdims = self.motion.codec.latent_dims(1, ph, pw);
        let mut fpk = Packing::new();
        fpk.push(&[], &self.motion.codec.table_indices(vdims), self.motion.codec.tables()?);
        let vsym = fpk.unpack(SubstreamId::Flow, bs.get(SubstreamId::Flow))?;
        let v_hat = self.motion.decode_flow(&LatentCode::new(vsym, vdims, SubstreamId::Flow))?;

        let flows = build_flow_pyramid(&v_hat)?;
        let refp = self.hybrid.extract_reference_pyramid(&state.feature)?;
        let mut o_bar: [Option<OffsetField>; 3] = [None, None, None];
        let opk = self.offset_packing(pw, ph)?;
        let osym = opk.unpack(SubstreamId::Offset, bs.get(SubstreamId::Offset))?;
        let mut at = 0;
        for (l, dims) in self.offset_dims(pw, ph) {
            let b = self.hybrid.branches[l].as_ref().expect("branch exists");
            let n: usize = dims.iter().product();
            let code = LatentCode::new(osym[at..at + n].to_vec(), dims, SubstreamId::Offset);
            at += n;
            o_bar[l] = Some(b.restore(&b.codec.decode(&code)?)?);
        }

        let ctx = self.final_contexts(&refp, &flows, &o_bar)?;
        let y_dims = [1, self.cfg.model.latent, ph / 16, pw / 16];
        let y_hat = self.read_hyper(bs, &self.hyper, y_dims, Some(&ctx[2]))?;
        let (x_hat, feature) = self.ctx_dec.forward(&y_hat, &ctx)?;
        self.state_from(x_hat, feature, w, h, state.since_intra + 1)
    }

    /// Decode either frame type; inter frames need the previous state.
    pub fn decode(&self, bs: &Bitstream, state: Option<&CodecState>) -> Result<(Frame, CodecState)> {
        match (bs.header.frame_type, state) {
            (FrameType::Intra, _) => self.decode_iframe(bs),
            (FrameType::Inter, Some(s)) => self.decode_frame(bs, s),
            (FrameType::Inter, None) => Err(Error::Bitstream("stream starts with an inter frame".into())),
        }
    }

    /// Code a sequence with an intra frame every `intra_period` frames.
    /// Returns the concatenated stream and the encoder-side reconstructions.
    pub fn encode_sequence(&self, frames: &[Frame], intra_period: usize) -> Result<(Vec<u8>, Vec<Frame>)> {
        let mut bytes = Vec::new();
        let mut recon = Vec::with_capacity(frames.len());
        let mut state: Option<CodecState> = None;
        for (i, x) in frames.iter().enumerate() {
            let coded = match &state {
                Some(s) if intra_period > 0 && i % intra_period != 0 => self.encode_frame(x, s)?,
                _ => self.encode_iframe(x)?,
            };
            bytes.extend(coded.bitstream.to_bytes());
            recon.push(coded.recon);
            state = Some(coded.state);
        }
        Ok((bytes, recon))
    }

    /// Decode a file of concatenated frames.
    pub fn decode_stream(&self, bytes: &[u8]) -> Result<Vec<Frame>> {
        let mut state: Option<CodecState> = None;
        let mut out = Vec::new();
        for bs in bitstream::split_frames(bytes)? {
            let (f, s) = self.decode(&bs, state.as_ref())?;
            out.push(f);
            state = Some(s);
        }
        Ok(out)
    }
}
