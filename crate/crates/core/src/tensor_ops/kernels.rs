//! Hand-written CPU kernels with explicit backward passes.
//!
//! candle has no border-replicating convolution and no differentiable
//! bilinear sampler, and its generic conv backward is slow on CPU. The three
//! ops here cover both: `Im2Col`/`Col2Im` turn every convolution into a
//! matmul, and `SampleTaps` is the shared bilinear sampler behind flow
//! warping and deformable sampling.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};

fn slice<'a, T: WithDType>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("kernel input must be contiguous"),
    }
}

#[inline]
fn clamp_index(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

/// Padding rule for `Im2Col`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Pad by `k/2` on each side, replicating the border sample.
    Replicate,
    /// No padding.
    Valid,
}

#[derive(Debug, Clone, Copy)]
pub struct Im2Col {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl Im2Col {
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (ph, pw) = self.pads();
        let ho = (h + 2 * ph - self.kh) / self.stride + 1;
        let wo = (w + 2 * pw - self.kw) / self.stride + 1;
        (ho, wo)
    }

    fn pads(&self) -> (usize, usize) {
        match self.padding {
            Padding::Replicate => (self.kh / 2, self.kw / 2),
            Padding::Valid => (0, 0),
        }
    }

    fn fwd<T: WithDType>(&self, x: &[T], (b, c, h, w): (usize, usize, usize, usize)) -> Vec<T> {
        let (ho, wo) = self.output_hw(h, w);
        let (ph, pw) = self.pads();
        let l = ho * wo;
        let rows = c * self.kh * self.kw;
        let mut out = vec![T::zero(); b * rows * l];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let row = (ci * self.kh + ky) * self.kw + kx;
                        let dst = &mut out[(bi * rows + row) * l..(bi * rows + row + 1) * l];
                        for oy in 0..ho {
                            let iy = clamp_index((oy * self.stride + ky) as i64 - ph as i64, h);
                            let src = &plane[iy * w..(iy + 1) * w];
                            let drow = &mut dst[oy * wo..(oy + 1) * wo];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = clamp_index((ox * self.stride + kx) as i64 - pw as i64, w);
                                *d = src[ix];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col-replicate"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l.shape().dims4()?;
        let (b, c, h, w) = dims;
        if self.padding == Padding::Valid && (h < self.kh || w < self.kw) {
            candle_core::bail!("im2col: input {h}x{w} smaller than kernel");
        }
        let (ho, wo) = self.output_hw(h, w);
        let shape = Shape::from((b, c * self.kh * self.kw, ho * wo));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(self.fwd(slice(v, l)?, dims)),
            CpuStorage::F64(v) => CpuStorage::F64(self.fwd(slice(v, l)?, dims)),
            _ => candle_core::bail!("im2col: unsupported dtype"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, _, h, w) = arg.dims4()?;
        let g = grad.contiguous()?.apply_op1_no_bwd(&Col2Im { im2col: *self, h, w })?;
        Ok(Some(g))
    }
}

/// Adjoint of [`Im2Col`]: scatters columns back onto the image grid.
#[derive(Debug, Clone, Copy)]
pub struct Col2Im {
    pub im2col: Im2Col,
    pub h: usize,
    pub w: usize,
}

impl Col2Im {
    fn fwd<T: WithDType>(&self, cols: &[T], b: usize, rows: usize) -> Vec<T> {
        let p = self.im2col;
        let (h, w) = (self.h, self.w);
        let c = rows / (p.kh * p.kw);
        let (ho, wo) = p.output_hw(h, w);
        let (ph, pw) = p.pads();
        let l = ho * wo;
        let mut out = vec![T::zero(); b * c * h * w];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &mut out[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                for ky in 0..p.kh {
                    for kx in 0..p.kw {
                        let row = (ci * p.kh + ky) * p.kw + kx;
                        let src = &cols[(bi * rows + row) * l..(bi * rows + row + 1) * l];
                        for oy in 0..ho {
                            let iy = clamp_index((oy * p.stride + ky) as i64 - ph as i64, h);
                            for ox in 0..wo {
                                let ix = clamp_index((ox * p.stride + kx) as i64 - pw as i64, w);
                                plane[iy * w + ix] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im-replicate"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, rows, _) = l.shape().dims3()?;
        let c = rows / (self.im2col.kh * self.im2col.kw);
        let shape = Shape::from((b, c, self.h, self.w));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(self.fwd(slice(v, l)?, b, rows)),
            CpuStorage::F64(v) => CpuStorage::F64(self.fwd(slice(v, l)?, b, rows)),
            _ => candle_core::bail!("col2im: unsupported dtype"),
        };
        Ok((out, shape))
    }
}

/// Bilinear sampler over a `k x k` tap grid with per-(group, tap) displacements.
///
/// Inputs: `x` of shape `(B, C, H, W)` and `disp` of shape `(B, G*k*k*2, H, W)`
/// where channel `(g*k*k + t)*2` is the horizontal and `+1` the vertical
/// displacement of tap `t` in group `g`. Tap `t = ky*k + kx` sits at grid
/// position `(kx - k/2, ky - k/2)`. Output has shape `(B, C*k*k, H, W)` with
/// channel `c*k*k + t`. Out-of-frame reads replicate the border.
#[derive(Debug, Clone, Copy)]
pub struct SampleTaps {
    pub groups: usize,
    pub kernel: usize,
}

struct Corner {
    idx: [usize; 4],
    wts: [f64; 4],
    fx: f64,
    fy: f64,
}

#[inline]
fn corner(h: usize, w: usize, y: f64, x: f64) -> Corner {
    let x = x.clamp(-1.0, w as f64);
    let y = y.clamp(-1.0, h as f64);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let xa = clamp_index(x0, w);
    let xb = clamp_index(x0 + 1, w);
    let ya = clamp_index(y0, h);
    let yb = clamp_index(y0 + 1, h);
    Corner {
        idx: [ya * w + xa, ya * w + xb, yb * w + xa, yb * w + xb],
        wts: [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx],
        fx,
        fy,
    }
}

impl SampleTaps {
    fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    fn tap_offset(&self, t: usize) -> (f64, f64) {
        let half = (self.kernel / 2) as f64;
        ((t % self.kernel) as f64 - half, (t / self.kernel) as f64 - half)
    }

    fn fwd<T: WithDType>(&self, x: &[T], disp: &[T], (b, c, h, w): (usize, usize, usize, usize)) -> Vec<T> {
        let taps = self.taps();
        let hw = h * w;
        let cg = c / self.groups;
        let mut out = vec![T::zero(); b * c * taps * hw];
        for bi in 0..b {
            for g in 0..self.groups {
                for t in 0..taps {
                    let (ox, oy) = self.tap_offset(t);
                    let dch = (bi * self.groups * taps + g * taps + t) * 2;
                    let dxs = &disp[dch * hw..(dch + 1) * hw];
                    let dys = &disp[(dch + 1) * hw..(dch + 2) * hw];
                    for p in 0..hw {
                        let px = (p % w) as f64 + ox + dxs[p].to_f64();
                        let py = (p / w) as f64 + oy + dys[p].to_f64();
                        let cr = corner(h, w, py, px);
                        for ci in g * cg..(g + 1) * cg {
                            let plane = &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                            let mut v = 0.0;
                            for k in 0..4 {
                                v += cr.wts[k] * plane[cr.idx[k]].to_f64();
                            }
                            out[((bi * c + ci) * taps + t) * hw + p] = T::from_f64(v);
                        }
                    }
                }
            }
        }
        out
    }

    fn bwd_impl<T: WithDType>(
        &self,
        x: &[T],
        disp: &[T],
        grad: &[T],
        (b, c, h, w): (usize, usize, usize, usize),
    ) -> (Vec<T>, Vec<T>) {
        let taps = self.taps();
        let hw = h * w;
        let cg = c / self.groups;
        let mut gx = vec![0f64; b * c * hw];
        let mut gd = vec![T::zero(); disp.len()];
        for bi in 0..b {
            for g in 0..self.groups {
                for t in 0..taps {
                    let (ox, oy) = self.tap_offset(t);
                    let dch = (bi * self.groups * taps + g * taps + t) * 2;
                    for p in 0..hw {
                        let px = (p % w) as f64 + ox + disp[dch * hw + p].to_f64();
                        let py = (p / w) as f64 + oy + disp[(dch + 1) * hw + p].to_f64();
                        let cr = corner(h, w, py, px);
                        let (mut gdx, mut gdy) = (0.0, 0.0);
                        for ci in g * cg..(g + 1) * cg {
                            let go = grad[((bi * c + ci) * taps + t) * hw + p].to_f64();
                            if go == 0.0 {
                                continue;
                            }
                            let base = (bi * c + ci) * hw;
                            let v: [f64; 4] = std::array::from_fn(|k| x[base + cr.idx[k]].to_f64());
                            for k in 0..4 {
                                gx[base + cr.idx[k]] += go * cr.wts[k];
                            }
                            // Clamped corners coincide, so these differences vanish outside the frame.
                            gdx += go * ((1.0 - cr.fy) * (v[1] - v[0]) + cr.fy * (v[3] - v[2]));
                            gdy += go * ((1.0 - cr.fx) * (v[2] - v[0]) + cr.fx * (v[3] - v[1]));
                        }
                        gd[dch * hw + p] = T::from_f64(gdx);
                        gd[(dch + 1) * hw + p] = T::from_f64(gdy);
                    }
                }
            }
        }
        (gx.into_iter().map(T::from_f64).collect(), gd)
    }

    fn check(&self, xs: (usize, usize, usize, usize), ds: (usize, usize, usize, usize)) -> candle_core::Result<()> {
        let (b, c, h, w) = xs;
        if self.groups == 0 || c % self.groups != 0 {
            candle_core::bail!("sample: {c} channels not divisible into {} groups", self.groups);
        }
        if self.kernel % 2 == 0 {
            candle_core::bail!("sample: kernel size must be odd, got {}", self.kernel);
        }
        let want = (b, self.groups * self.taps() * 2, h, w);
        if ds != want {
            candle_core::bail!("sample: displacement shape {ds:?}, expected {want:?}");
        }
        Ok(())
    }
}

impl CustomOp2 for SampleTaps {
    fn name(&self) -> &'static str {
        "sample-taps"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let xs = l1.shape().dims4()?;
        self.check(xs, l2.shape().dims4()?)?;
        let (b, c, h, w) = xs;
        let shape = Shape::from((b, c * self.taps(), h, w));
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(d)) => CpuStorage::F32(self.fwd(slice(x, l1)?, slice(d, l2)?, xs)),
            (CpuStorage::F64(x), CpuStorage::F64(d)) => CpuStorage::F64(self.fwd(slice(x, l1)?, slice(d, l2)?, xs)),
            _ => candle_core::bail!("sample: unsupported or mismatched dtypes"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        disp: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let xs = x.dims4()?;
        let x = x.contiguous()?;
        let disp = disp.contiguous()?;
        let grad = grad.contiguous()?;
        let (gx, gd) = match x.dtype() {
            candle_core::DType::F32 => {
                let (a, b) = self.bwd_impl(
                    &x.flatten_all()?.to_vec1::<f32>()?,
                    &disp.flatten_all()?.to_vec1::<f32>()?,
                    &grad.flatten_all()?.to_vec1::<f32>()?,
                    xs,
                );
                (Tensor::from_vec(a, x.shape(), x.device())?, Tensor::from_vec(b, disp.shape(), x.device())?)
            }
            candle_core::DType::F64 => {
                let (a, b) = self.bwd_impl(
                    &x.flatten_all()?.to_vec1::<f64>()?,
                    &disp.flatten_all()?.to_vec1::<f64>()?,
                    &grad.flatten_all()?.to_vec1::<f64>()?,
                    xs,
                );
                (Tensor::from_vec(a, x.shape(), x.device())?, Tensor::from_vec(b, disp.shape(), x.device())?)
            }
            dt => candle_core::bail!("sample: unsupported dtype {dt:?}"),
        };
        Ok((Some(gx), Some(gd)))
    }
}
