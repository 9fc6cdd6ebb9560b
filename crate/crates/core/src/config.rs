//! Codec configuration, ablation presets and the canonical config hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor_ops::{DeformKernelSpec, QuantMode};

/// Per-scale temporal context generation operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Bilinear warp of the reference feature by the decoded flow.
    Flow,
    /// Deformable sampling around the decoded flow with coded residual offsets.
    Fgdc,
    /// Deformable sampling with coded offsets and no flow guidance.
    Dc,
}

impl Strategy {
    pub fn codes_offsets(self) -> bool {
        !matches!(self, Strategy::Flow)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub heads: usize,
    pub blocks: usize,
    pub ffn_expansion: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub c0: usize,
    pub c1: usize,
    pub c2: usize,
    pub latent: usize,
    pub hyper: usize,
    pub motion_latent: usize,
    pub flow_hidden: usize,
    pub offset_hidden: usize,
    pub enhance_hidden: usize,
    /// Channels the previous scale's offsets are squeezed to before guiding
    /// the next scale's offset estimate.
    pub guide_channels: usize,
    pub factorized_support: i32,
    pub deform: DeformKernelSpec,
    pub attention: AttentionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c0: 48,
            c1: 64,
            c2: 96,
            latent: 96,
            hyper: 64,
            motion_latent: 64,
            flow_hidden: 24,
            offset_hidden: 64,
            enhance_hidden: 32,
            guide_channels: 16,
            factorized_support: 48,
            deform: DeformKernelSpec::default(),
            attention: AttentionConfig { heads: 4, blocks: 4, ffn_expansion: 2 },
        }
    }
}

impl ModelConfig {
    /// A very small network for tests and smoke runs.
    pub fn tiny() -> Self {
        Self {
            c0: 8,
            c1: 8,
            c2: 8,
            latent: 16,
            hyper: 8,
            motion_latent: 8,
            flow_hidden: 8,
            offset_hidden: 8,
            enhance_hidden: 4,
            guide_channels: 2,
            factorized_support: 48,
            deform: DeformKernelSpec { kernel_size: 3, groups: 2, modulated: true },
            attention: AttentionConfig { heads: 2, blocks: 1, ffn_expansion: 2 },
        }
    }
}

/// Context generation and enhancement switches. Arrays are indexed by scale
/// level: 0 = original resolution, 1 = half, 2 = quarter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub strategy: [Strategy; 3],
    pub local_fgdc: [bool; 3],
    pub cross_attention: bool,
}

pub const PRESETS: [&str; 10] = ["A", "B", "C", "D", "E", "F", "G", "H", "I", "J"];

impl AblationConfig {
    pub fn preset(id: &str) -> Result<Self> {
        use Strategy::*;
        let gen = |s0, s1, s2| Self { strategy: [s0, s1, s2], local_fgdc: [false; 3], cross_attention: false };
        let enh = |local: [bool; 3], ca| Self { strategy: [Fgdc, Flow, Flow], local_fgdc: local, cross_attention: ca };
        Ok(match id.to_ascii_uppercase().as_str() {
            "A" => gen(Flow, Flow, Flow),
            "B" => gen(Flow, Flow, Fgdc),
            "C" => gen(Flow, Fgdc, Flow),
            "D" => gen(Fgdc, Flow, Flow),
            "E" => gen(Fgdc, Fgdc, Flow),
            "F" => gen(Dc, Dc, Dc),
            "G" => enh([false, false, true], false),
            "H" => enh([false, false, true], true),
            "I" => enh([false, true, true], true),
            "J" => enh([true, true, true], true),
            other => {
                return Err(Error::Config {
                    path: "ablation.preset".into(),
                    msg: format!("unknown preset `{other}` (expected one of A-J)"),
                })
            }
        })
    }

    pub fn any_offsets(&self) -> bool {
        self.strategy.iter().any(|s| s.codes_offsets())
    }

    pub fn enhancement_enabled(&self) -> bool {
        self.local_fgdc.iter().any(|&b| b) || self.cross_attention
    }
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self::preset("J").expect("built-in preset")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distortion {
    Mse,
    MsSsim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateConfig {
    pub lambda_index: u8,
    pub lambdas: Vec<f64>,
    pub distortion: Distortion,
}

impl Default for RateConfig {
    fn default() -> Self {
        Self { lambda_index: 3, lambdas: vec![256.0, 512.0, 1024.0, 2048.0], distortion: Distortion::Mse }
    }
}

impl RateConfig {
    pub fn lambda(&self) -> f64 {
        self.lambdas[self.lambda_index as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GopConfig {
    pub intra_period: usize,
    pub frames: usize,
}

impl Default for GopConfig {
    fn default() -> Self {
        Self { intra_period: 8, frames: 32 }
    }
}

/// Learning-rate shape within each stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrDecay {
    Constant,
    /// Half cosine from the stage rate down to `lr_min_ratio` times it.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Steps for stages 0 (intra) through 4 (cascaded fine-tune).
    pub steps: [usize; 5],
    pub lr: f64,
    pub lr_finetune: f64,
    pub lr_decay: LrDecay,
    pub lr_min_ratio: f64,
    /// Learning-rate multiplier for the factorized density parameters.
    pub prior_lr_scale: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub clip_frames: usize,
    pub rate_quant: QuantMode,
    /// Weight of the ground-truth flow term in stage 1 on synthetic data.
    pub flow_supervision: f64,
    pub cascade: bool,
    /// Stage 4 windows start after up to this many frames decoded closed
    /// loop without gradient, so the cascaded loss sees deep references.
    pub cascade_warmup: usize,
    pub log_every: usize,
}

impl TrainConfig {
    /// Learning rate at `step` of a stage with `steps` steps and base rate `lr`.
    pub fn lr_at(&self, lr: f64, step: usize, steps: usize) -> f64 {
        match self.lr_decay {
            LrDecay::Constant => lr,
            LrDecay::Cosine => {
                let t = if steps > 1 { step as f64 / (steps - 1) as f64 } else { 0.0 };
                let floor = lr * self.lr_min_ratio;
                floor + 0.5 * (lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: [300, 300, 400, 700, 300],
            lr: 1e-3,
            lr_finetune: 1e-4,
            lr_decay: LrDecay::Constant,
            lr_min_ratio: 0.1,
            prior_lr_scale: 10.0,
            weight_decay: 1e-4,
            batch_size: 1,
            patch_size: 64,
            clip_frames: 8,
            rate_quant: QuantMode::Round,
            flow_supervision: 0.05,
            cascade: true,
            cascade_warmup: 5,
            log_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub seed: u64,
    pub paper_parity: bool,
    pub model: ModelConfig,
    pub ablation: AblationConfig,
    pub rate: RateConfig,
    pub gop: GopConfig,
    pub train: TrainConfig,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paper_parity: false,
            model: ModelConfig::default(),
            ablation: AblationConfig::default(),
            rate: RateConfig::default(),
            gop: GopConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// The part of the configuration that determines decoded output.
#[derive(Serialize)]
struct HashedView<'a> {
    model: &'a ModelConfig,
    ablation: &'a AblationConfig,
    lambda_index: u8,
    lambdas: &'a [f64],
    distortion: Distortion,
}

fn config_err(path: &str, msg: impl Into<String>) -> Error {
    Error::Config { path: path.into(), msg: msg.into() }
}

impl CodecConfig {
    /// Defaults with one of the ablation presets.
    pub fn with_preset(id: &str) -> Result<Self> {
        Ok(Self { ablation: AblationConfig::preset(id)?, ..Self::default() })
    }

    /// Paper-scale training and evaluation settings.
    pub fn paper_parity(mut self) -> Self {
        self.paper_parity = true;
        self.train.lr = 1e-4;
        self.train.lr_finetune = 1e-5;
        self.train.batch_size = 4;
        self.train.patch_size = 256;
        self.train.cascade_warmup = 0;
        self.train.prior_lr_scale = 1.0;
        self.gop = GopConfig { intra_period: 32, frames: 96 };
        self.rate.lambdas = match self.rate.distortion {
            Distortion::Mse => vec![256.0, 512.0, 1024.0, 2048.0],
            Distortion::MsSsim => vec![8.0, 16.0, 32.0, 64.0],
        };
        self
    }

    /// Parse TOML. A `preset` key inside `[ablation]` seeds that table from
    /// the named preset; any other keys in the table override it.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut value: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err("<root>", e.message()))?;
        if let Some(toml::Value::Table(abl)) = value.get_mut("ablation") {
            if let Some(p) = abl.remove("preset") {
                let id = p.as_str().ok_or_else(|| config_err("ablation.preset", "must be a string"))?;
                let base = toml::Table::try_from(AblationConfig::preset(id)?)
                    .map_err(|e| config_err("ablation", e.to_string()))?;
                for (k, v) in base {
                    abl.entry(k).or_insert(v);
                }
            }
        }
        let cfg: CodecConfig = value.try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            config_err(&guess_path(&msg), msg)
        })?;
        let cfg = if cfg.paper_parity && !text.contains("lambdas") { cfg.paper_parity() } else { cfg };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(&path.display().to_string(), format!("cannot read: {e}")))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        for (name, v) in [
            ("model.c0", m.c0),
            ("model.c1", m.c1),
            ("model.c2", m.c2),
            ("model.latent", m.latent),
            ("model.hyper", m.hyper),
            ("model.motion_latent", m.motion_latent),
            ("model.flow_hidden", m.flow_hidden),
            ("model.offset_hidden", m.offset_hidden),
            ("model.enhance_hidden", m.enhance_hidden),
            ("model.guide_channels", m.guide_channels),
        ] {
            if v == 0 {
                return Err(config_err(name, "must be positive"));
            }
        }
        let d = &m.deform;
        if d.kernel_size == 0 || d.kernel_size % 2 == 0 {
            return Err(config_err("model.deform.kernel_size", "must be odd and positive"));
        }
        for (name, c) in [("c0", m.c0), ("c1", m.c1), ("c2", m.c2)] {
            if d.groups == 0 || c % d.groups != 0 {
                return Err(config_err("model.deform.groups", format!("{} must divide model.{name} = {c}", d.groups)));
            }
        }
        let a = &m.attention;
        if a.heads == 0 || m.c2 % a.heads != 0 {
            return Err(config_err("model.attention.heads", format!("must divide model.c2 = {}", m.c2)));
        }
        if a.blocks == 0 || a.ffn_expansion == 0 {
            return Err(config_err("model.attention", "blocks and ffn_expansion must be positive"));
        }
        if m.factorized_support < 1 {
            return Err(config_err("model.factorized_support", "must be at least 1"));
        }
        let r = &self.rate;
        if r.lambdas.is_empty() || r.lambdas.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(config_err("rate.lambdas", "must be a non-empty list of positive numbers"));
        }
        if r.lambda_index as usize >= r.lambdas.len() {
            return Err(config_err("rate.lambda_index", format!("out of range for {} lambdas", r.lambdas.len())));
        }
        if self.paper_parity {
            let allowed: &[f64] = match r.distortion {
                Distortion::Mse => &[256.0, 512.0, 1024.0, 2048.0],
                Distortion::MsSsim => &[8.0, 16.0, 32.0, 64.0],
            };
            if r.lambdas.iter().any(|l| !allowed.contains(l)) {
                return Err(config_err("rate.lambdas", format!("paper-parity mode requires values from {allowed:?}")));
            }
        }
        if self.gop.intra_period == 0 {
            return Err(config_err("gop.intra_period", "must be positive"));
        }
        let t = &self.train;
        if !(t.lr > 0.0) || !(t.lr_finetune > 0.0) {
            return Err(config_err("train.lr", "learning rates must be positive"));
        }
        if !(0.0..=1.0).contains(&t.lr_min_ratio) {
            return Err(config_err("train.lr_min_ratio", "must lie in [0, 1]"));
        }
        if !(t.prior_lr_scale > 0.0) {
            return Err(config_err("train.prior_lr_scale", "must be positive"));
        }
        if t.batch_size == 0 {
            return Err(config_err("train.batch_size", "must be positive"));
        }
        if t.patch_size == 0 || t.patch_size % 64 != 0 {
            return Err(config_err("train.patch_size", "must be a positive multiple of 64"));
        }
        if t.clip_frames < 2 {
            return Err(config_err("train.clip_frames", "need at least 2 frames"));
        }
        Ok(())
    }

    /// Canonical TOML of every setting that influences decoding.
    pub fn canonical_text(&self) -> String {
        let view = HashedView {
            model: &self.model,
            ablation: &self.ablation,
            lambda_index: self.rate.lambda_index,
            lambdas: &self.rate.lambdas,
            distortion: self.rate.distortion,
        };
        toml::to_string(&view).expect("config serializes")
    }

    /// First 8 bytes (big-endian) of SHA-256 over [`Self::canonical_text`].
    pub fn hash(&self) -> u64 {
        let d = Sha256::digest(self.canonical_text().as_bytes());
        u64::from_be_bytes(d[..8].try_into().expect("8 bytes"))
    }
}

fn guess_path(msg: &str) -> String {
    // toml reports e.g. "unknown field `foo`" or "invalid type ... for key `model.c0`"
    msg.split('`').nth(1).map(str::to_string).unwrap_or_else(|| "<root>".into())
}
