//! Procedural clips with known motion.
//!
//! Every frame samples one continuous texture through a coordinate map
//! `phi_t`, built so that `phi_t(p) = phi_{t-1}(p + f_t(p))`. Frame `t`
//! therefore equals frame `t-1` warped by `f_t` up to interpolation error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionFamily {
    Translate,
    Rotate,
    Elastic,
    Occlude,
}

impl MotionFamily {
    pub const ALL: [MotionFamily; 4] = [Self::Translate, Self::Rotate, Self::Elastic, Self::Occlude];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "translate" => Ok(Self::Translate),
            "rotate" => Ok(Self::Rotate),
            "elastic" => Ok(Self::Elastic),
            "occlude" => Ok(Self::Occlude),
            _ => Err(Error::Config { path: "family".into(), msg: format!("unknown motion family `{s}`") }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Translate => "translate",
            Self::Rotate => "rotate",
            Self::Elastic => "elastic",
            Self::Occlude => "occlude",
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthParams {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Translation in pixels per frame; `None` draws one from the seed.
    pub shift: Option<(f64, f64)>,
    /// Typical displacement magnitude in pixels for the other families.
    pub magnitude: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { width: 64, height: 64, frames: 8, shift: None, magnitude: 2.0 }
    }
}

/// Ground-truth flow from frame `t-1` to frame `t`: `frame_t(p) = frame_{t-1}(p + flow(p))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFlow {
    /// `(2, h, w)` planar: horizontal then vertical.
    pub data: Vec<f32>,
    /// 1 where the flow is valid, 0 where occluded or leaving the frame.
    pub valid: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClip {
    pub family: MotionFamily,
    pub frames: Vec<Frame>,
    /// `flows[t - 1]` maps frame `t-1` to frame `t`.
    pub flows: Vec<GroundTruthFlow>,
}

/// Multi-octave value noise on an integer lattice with quintic blending.
struct ValueNoise {
    size: usize,
    lattice: Vec<f64>,
    octaves: Vec<(f64, f64)>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let size = 64;
        let lattice = (0..size * size).map(|_| rng.random::<f64>()).collect();
        // (period in pixels, amplitude)
        let octaves = vec![(32.0, 0.5), (16.0, 0.3), (8.0, 0.2)];
        Self { size, lattice, octaves }
    }

    fn lattice(&self, i: i64, j: i64) -> f64 {
        let n = self.size as i64;
        self.lattice[(i.rem_euclid(n) * n + j.rem_euclid(n)) as usize]
    }

    fn single(&self, x: f64, y: f64) -> f64 {
        let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
        let (x0, y0) = (x.floor(), y.floor());
        let (tx, ty) = (fade(x - x0), fade(y - y0));
        let (i, j) = (y0 as i64, x0 as i64);
        let a = self.lattice(i, j) * (1.0 - tx) + self.lattice(i, j + 1) * tx;
        let b = self.lattice(i + 1, j) * (1.0 - tx) + self.lattice(i + 1, j + 1) * tx;
        a * (1.0 - ty) + b * ty
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        self.octaves
            .iter()
            .enumerate()
            .map(|(k, &(period, amp))| amp * self.single(x / period + 17.0 * k as f64, y / period + 31.0 * k as f64))
            .sum()
    }
}

struct Texture {
    channels: [ValueNoise; 3],
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        Self { channels: [ValueNoise::new(rng), ValueNoise::new(rng), ValueNoise::new(rng)] }
    }

    fn rgb(&self, x: f64, y: f64) -> [f64; 3] {
        let l = self.channels[0].sample(x, y);
        let u = self.channels[1].sample(x, y) - 0.5;
        let v = self.channels[2].sample(x, y) - 0.5;
        [l + 0.5 * v, l - 0.25 * u - 0.25 * v, l + 0.5 * u].map(|c| c.clamp(0.0, 1.0))
    }
}

/// Smooth displacement field, `f(p)`, possibly different per frame.
enum Field {
    Constant(f64, f64),
    Rotation { cx: f64, cy: f64, cos: f64, sin: f64 },
    Waves(Vec<[f64; 4]>),
}

impl Field {
    fn at(&self, x: f64, y: f64) -> (f64, f64) {
        match self {
            Field::Constant(dx, dy) => (*dx, *dy),
            Field::Rotation { cx, cy, cos, sin } => {
                let (u, v) = (x - cx, y - cy);
                (cos * u - sin * v + cx - x, sin * u + cos * v + cy - y)
            }
            Field::Waves(w) => {
                let mut d = (0.0, 0.0);
                for &[ax, ay, freq, phase] in w {
                    d.0 += ax * (freq * y + phase).sin();
                    d.1 += ay * (freq * x + 0.7 * phase).cos();
                }
                d
            }
        }
    }
}

struct Disc {
    x: f64,
    y: f64,
    r: f64,
    vx: f64,
    vy: f64,
    color: [f64; 3],
}

impl Disc {
    fn center(&self, t: usize) -> (f64, f64) {
        (self.x + self.vx * t as f64, self.y + self.vy * t as f64)
    }

    fn covers(&self, t: usize, x: f64, y: f64) -> bool {
        let (cx, cy) = self.center(t);
        (x - cx).powi(2) + (y - cy).powi(2) <= self.r * self.r
    }
}

pub fn generate_synthetic_clip(family: MotionFamily, params: &SynthParams, seed: u64) -> Result<SyntheticClip> {
    let (w, h) = (params.width, params.height);
    if w < 2 || h < 2 || params.frames == 0 {
        return Err(Error::Data(format!("synthetic clip needs at least 2x2 pixels and one frame, got {w}x{h}x{}", params.frames)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex = Texture::new(&mut rng);
    let m = params.magnitude;
    let fields: Vec<Field> = match family {
        MotionFamily::Translate | MotionFamily::Occlude => {
            let (dx, dy) = params.shift.unwrap_or_else(|| (rng.random_range(-m..=m), rng.random_range(-m..=m)));
            (1..params.frames).map(|_| Field::Constant(dx, dy)).collect()
        }
        MotionFamily::Rotate => {
            // angle chosen so the frame corners move about `m` pixels
            let theta = m / (0.5 * ((w * w + h * h) as f64).sqrt()) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
            (1..params.frames).map(|_| Field::Rotation { cx, cy, cos: theta.cos(), sin: theta.sin() }).collect()
        }
        MotionFamily::Elastic => (1..params.frames)
            .map(|_| {
                let waves = (0..3)
                    .map(|_| {
                        [
                            rng.random_range(-m..=m) / 2.0,
                            rng.random_range(-m..=m) / 2.0,
                            rng.random_range(0.03..0.12),
                            rng.random_range(0.0..std::f64::consts::TAU),
                        ]
                    })
                    .collect();
                Field::Waves(waves)
            })
            .collect(),
    };
    let disc = (family == MotionFamily::Occlude).then(|| {
        let r = 0.15 * w.min(h) as f64;
        Disc {
            x: rng.random_range(r..w as f64 - r),
            y: rng.random_range(r..h as f64 - r),
            r,
            vx: rng.random_range(-2.0 * m..=2.0 * m),
            vy: rng.random_range(-2.0 * m..=2.0 * m),
            color: [rng.random(), rng.random(), rng.random()],
        }
    });

    // texture coordinate of every pixel, updated as phi_t(p) = phi_{t-1}(p + f_t(p))
    let n = w * h;
    let grid: Vec<(f64, f64)> = (0..n).map(|i| ((i % w) as f64, (i / w) as f64)).collect();
    let mut frames = Vec::with_capacity(params.frames);
    let mut flows = Vec::with_capacity(params.frames.saturating_sub(1));
    for t in 0..params.frames {
        let coords: Vec<(f64, f64)> = grid
            .iter()
            .map(|&(x, y)| {
                let (mut u, mut v) = (x, y);
                for s in (0..t).rev() {
                    let (dx, dy) = fields[s].at(u, v);
                    u += dx;
                    v += dy;
                }
                (u, v)
            })
            .collect();
        let mut data = vec![0f32; 3 * n];
        for (i, &(u, v)) in coords.iter().enumerate() {
            let (x, y) = grid[i];
            let rgb = match &disc {
                Some(d) if d.covers(t, x, y) => d.color,
                _ => tex.rgb(u, v),
            };
            for c in 0..3 {
                data[c * n + i] = rgb[c] as f32;
            }
        }
        frames.push(Frame::new(w, h, data)?);
        if t > 0 {
            let mut data = vec![0f32; 2 * n];
            let mut valid = vec![1u8; n];
            for (i, &(x, y)) in grid.iter().enumerate() {
                let (dx, dy) = fields[t - 1].at(x, y);
                data[i] = dx as f32;
                data[n + i] = dy as f32;
                let (sx, sy) = (x + dx, y + dy);
                let outside = sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64;
                let occluded = disc.as_ref().is_some_and(|d| {
                    // include the one-pixel interpolation footprint around the source
                    d.covers(t, x, y) || ((sx - d.center(t - 1).0).powi(2) + (sy - d.center(t - 1).1).powi(2)).sqrt() <= d.r + 1.5
                });
                if outside || occluded {
                    valid[i] = 0;
                }
            }
            flows.push(GroundTruthFlow { data, valid });
        }
    }
    Ok(SyntheticClip { family, frames, flows })
}

impl GroundTruthFlow {
    /// `(1, 2, h, w)` tensor.
    pub fn to_tensor(&self, w: usize, h: usize, dtype: candle_core::DType) -> Result<candle_core::Tensor> {
        Ok(candle_core::Tensor::from_vec(self.data.clone(), (1, 2, h, w), &crate::tensor_ops::cpu())?.to_dtype(dtype)?)
    }
}

/// Write the frames as numbered PNGs, each ground-truth flow as
/// `flow_{t:05}.bin` (planar little-endian `f32` followed by the validity
/// bytes) and a `clip.json` description.
pub fn save_clip(dir: &std::path::Path, clip: &SyntheticClip, seed: u64) -> Result<()> {
    crate::training::data::save_sequence(dir, &clip.frames)?;
    for (k, f) in clip.flows.iter().enumerate() {
        let mut bytes = Vec::with_capacity(4 * f.data.len() + f.valid.len());
        for v in &f.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&f.valid);
        std::fs::write(dir.join(format!("flow_{:05}.bin", k + 1)), bytes)?;
    }
    let (w, h) = clip.frames.first().map(|f| (f.width, f.height)).unwrap_or((0, 0));
    let meta = serde_json::json!({ "family": clip.family.name(), "seed": seed, "width": w, "height": h, "frames": clip.frames.len() });
    std::fs::write(dir.join("clip.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// Flows written by [`save_clip`], or `None` when any is absent.
pub fn load_flows(dir: &std::path::Path, width: usize, height: usize, frames: usize) -> Result<Option<Vec<GroundTruthFlow>>> {
    let n = width * height;
    let mut out = Vec::new();
    for t in 1..frames {
        let path = dir.join(format!("flow_{t:05}.bin"));
        if !path.is_file() {
            return Ok(None);
        }
        let bytes = std::fs::read(&path)?;
        if bytes.len() != 9 * n {
            return Err(Error::Data(format!("{}: expected {} bytes, found {}", path.display(), 9 * n, bytes.len())));
        }
        let data = bytes[..8 * n].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push(GroundTruthFlow { data, valid: bytes[8 * n..].to_vec() });
    }
    Ok(Some(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_ops::bilinear_warp;
    use candle_core::DType;

    fn valid_psnr(clip: &SyntheticClip, t: usize) -> f64 {
        let f = &clip.frames[t];
        let (w, h) = (f.width, f.height);
        let prev = clip.frames[t - 1].to_tensor(DType::F64).unwrap();
        let flow = clip.flows[t - 1].to_tensor(w, h, DType::F64).unwrap();
        let warped = Frame::from_tensor(&bilinear_warp(&prev, &flow).unwrap()).unwrap();
        let (mut se, mut cnt) = (0.0f64, 0usize);
        for i in 0..w * h {
            if clip.flows[t - 1].valid[i] == 1 {
                for c in 0..3 {
                    se += ((warped.data[c * w * h + i] - f.data[c * w * h + i]) as f64).powi(2);
                    cnt += 1;
                }
            }
        }
        10.0 * (1.0 / (se / cnt as f64)).log10()
    }

    #[test]
    fn translation_flow_is_the_shift() {
        let p = SynthParams { shift: Some((3.0, 0.0)), ..SynthParams::default() };
        let clip = generate_synthetic_clip(MotionFamily::Translate, &p, 7).unwrap();
        assert_eq!(clip.frames.len(), 8);
        for f in &clip.flows {
            let n = 64 * 64;
            assert!(f.data[..n].iter().all(|&v| v == 3.0));
            assert!(f.data[n..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn warping_previous_frame_reproduces_current() {
        for fam in MotionFamily::ALL {
            let clip = generate_synthetic_clip(fam, &SynthParams::default(), 11).unwrap();
            for t in 1..clip.frames.len() {
                let p = valid_psnr(&clip, t);
                assert!(p > 40.0, "{fam:?} frame {t}: {p:.2} dB");
            }
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let a = generate_synthetic_clip(MotionFamily::Elastic, &SynthParams::default(), 3).unwrap();
        let b = generate_synthetic_clip(MotionFamily::Elastic, &SynthParams::default(), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_clip(MotionFamily::Elastic, &SynthParams::default(), 4).unwrap();
        assert_ne!(a.frames[0], c.frames[0]);
    }

    #[test]
    fn occluder_invalidates_flow() {
        let clip = generate_synthetic_clip(MotionFamily::Occlude, &SynthParams::default(), 5).unwrap();
        let invalid = clip.flows[0].valid.iter().filter(|&&v| v == 0).count();
        assert!(invalid > 0 && invalid < 64 * 64 / 2);
    }
}
