//! Sequence ingestion: numbered image files or raw YUV420 with a sidecar.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::frame::Frame;

const IMAGE_EXTS: [&str; 1] = ["png"];

/// Dimensions of a raw YUV420 file, read from `<name>.json` or
/// `<name>.yuv.json` next to it.
#[derive(Debug, Clone, Copy, serde::Deserialize)]
pub struct YuvDescriptor {
    pub width: usize,
    pub height: usize,
}

fn trailing_index(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem.chars().rev().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() {
        return None;
    }
    digits.chars().rev().collect::<String>().parse().ok()
}

/// Load a sequence from a directory of numbered images or a `.yuv` file.
pub fn load_sequence(path: &Path) -> Result<Vec<Frame>> {
    if path.is_dir() {
        load_image_dir(path)
    } else if path.extension().is_some_and(|e| e == "yuv") {
        load_yuv420(path)
    } else {
        Err(Error::Data(format!("{}: expected a directory of numbered images or a .yuv file", path.display())))
    }
}

fn load_image_dir(dir: &Path) -> Result<Vec<Frame>> {
    let mut files: Vec<(usize, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTS.contains(&e.as_str())) {
            continue;
        }
        if let Some(i) = trailing_index(&p) {
            files.push((i, p));
        }
    }
    if files.is_empty() {
        return Err(Error::Data(format!("{}: no numbered image files", dir.display())));
    }
    files.sort();
    if let Some(w) = files.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Data(format!("duplicate frame index {} in {}", w[0].0, dir.display())));
    }
    let first = files[0].0;
    for (k, (i, _)) in files.iter().enumerate() {
        if *i != first + k {
            return Err(Error::MissingFrame { dir: dir.to_path_buf(), index: first + k });
        }
    }
    let mut frames = Vec::with_capacity(files.len());
    for (i, p) in &files {
        let img = image::open(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?.to_rgb8();
        let f = Frame::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())?;
        if let Some(f0) = frames.first() {
            let f0: &Frame = f0;
            if (f.width, f.height) != (f0.width, f0.height) {
                return Err(Error::Data(format!(
                    "frame {i} is {}x{}, sequence started at {}x{}",
                    f.width, f.height, f0.width, f0.height
                )));
            }
        }
        frames.push(f);
    }
    Ok(frames)
}

fn sidecar(path: &Path) -> Result<YuvDescriptor> {
    let candidates = [path.with_extension("json"), PathBuf::from(format!("{}.json", path.display()))];
    for c in &candidates {
        if c.is_file() {
            let text = std::fs::read_to_string(c)?;
            return serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", c.display())));
        }
    }
    Err(Error::Data(format!("{}: missing dimension sidecar {}", path.display(), candidates[0].display())))
}

/// Limited-range BT.601 to RGB in `[0, 1]`.
pub fn bt601_to_rgb(y: u8, u: u8, v: u8) -> [f32; 3] {
    let c = 1.164_383_6 * (y as f32 - 16.0);
    let d = u as f32 - 128.0;
    let e = v as f32 - 128.0;
    [c + 1.596_026_8 * e, c - 0.391_762_3 * d - 0.812_968_3 * e, c + 2.017_232_2 * d].map(|x| (x / 255.0).clamp(0.0, 1.0))
}

/// Planar 8-bit YUV 4:2:0; width and height must be even.
pub fn load_yuv420(path: &Path) -> Result<Vec<Frame>> {
    let d = sidecar(path)?;
    let bytes = std::fs::read(path)?;
    decode_yuv420(&bytes, d.width, d.height)
}

pub fn decode_yuv420(bytes: &[u8], w: usize, h: usize) -> Result<Vec<Frame>> {
    if w == 0 || h == 0 || w % 2 == 1 || h % 2 == 1 {
        return Err(Error::Data(format!("YUV420 needs even positive dimensions, got {w}x{h}")));
    }
    let frame_bytes = w * h * 3 / 2;
    if bytes.is_empty() || bytes.len() % frame_bytes != 0 {
        return Err(Error::Data(format!(
            "YUV420 {w}x{h} needs a multiple of {frame_bytes} bytes per frame, file has {}",
            bytes.len()
        )));
    }
    let n = w * h;
    let (cw, ch) = (w / 2, h / 2);
    bytes
        .chunks_exact(frame_bytes)
        .map(|f| {
            let (yp, rest) = f.split_at(n);
            let (up, vp) = rest.split_at(cw * ch);
            let mut data = vec![0f32; 3 * n];
            for y in 0..h {
                for x in 0..w {
                    let ci = (y / 2) * cw + x / 2;
                    let rgb = bt601_to_rgb(yp[y * w + x], up[ci], vp[ci]);
                    for c in 0..3 {
                        data[c * n + y * w + x] = rgb[c];
                    }
                }
            }
            Frame::new(w, h, data)
        })
        .collect()
}

/// Write frames as `frame_00000.png`, ...
pub fn save_sequence(dir: &Path, frames: &[Frame]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        let img = image::RgbImage::from_raw(f.width as u32, f.height as u32, f.to_rgb8())
            .ok_or_else(|| Error::Contract("frame buffer size".into()))?;
        img.save(dir.join(format!("frame_{i:05}.png")))?;
    }
    Ok(())
}
