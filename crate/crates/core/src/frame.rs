//! RGB frames and their conversion to tensors.

use candle_core::{DType, Tensor};

use crate::error::{contract, Error, Result};
use crate::tensor_ops::cpu;

/// Planar RGB frame with samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// Spatial size the codec pads every frame to a multiple of.
pub const PAD_MULTIPLE: usize = 64;

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Data(format!("empty frame {width}x{height}")));
        }
        if data.len() != 3 * width * height {
            return Err(Error::Data(format!("{} samples for a {width}x{height} RGB frame", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite sample".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, data: vec![value; 3 * width * height] }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Interleaved 8-bit RGB.
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * width * height {
            return Err(Error::Data(format!("{} bytes for a {width}x{height} RGB image", rgb.len())));
        }
        let n = width * height;
        let mut data = vec![0f32; 3 * n];
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * n + i] = px[c] as f32 / 255.0;
            }
        }
        Frame::new(width, height, data)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.pixels();
        let mut out = vec![0u8; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                out[3 * i + c] = (self.data[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        out
    }

    /// Reflect-pad on the right and bottom so both sides are multiples of `m`.
    pub fn pad_to(&self, m: usize) -> Frame {
        let w = self.width.div_ceil(m) * m;
        let h = self.height.div_ceil(m) * m;
        if w == self.width && h == self.height {
            return self.clone();
        }
        let mut data = vec![0f32; 3 * w * h];
        for c in 0..3 {
            for y in 0..h {
                let sy = reflect(y as isize, self.height);
                for x in 0..w {
                    data[(c * h + y) * w + x] = self.at(c, sy, reflect(x as isize, self.width));
                }
            }
        }
        Frame { width: w, height: h, data }
    }

    /// Top-left `width x height` window.
    pub fn crop(&self, width: usize, height: usize) -> Result<Frame> {
        if width > self.width || height > self.height {
            return contract(format!("crop {width}x{height} exceeds {}x{}", self.width, self.height));
        }
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for y in 0..height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row..row + width]);
            }
        }
        Ok(Frame { width, height, data })
    }

    /// `(1, 3, h, w)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (1, 3, self.height, self.width), &cpu())?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Frame> {
        let (b, c, h, w) = t.dims4()?;
        if b != 1 || c != 3 {
            return contract(format!("frame tensor must be (1, 3, h, w), got {:?}", t.dims()));
        }
        let data = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        Ok(Frame { width: w, height: h, data })
    }

    /// Stack frames of equal size into a `(n, 3, h, w)` batch.
    pub fn batch(frames: &[&Frame], dtype: DType) -> Result<Tensor> {
        let ts = frames.iter().map(|f| f.to_tensor(dtype)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&ts, 0)?)
    }
}
