//! PSNR and MS-SSIM, on host frames and as differentiable tensors.

use candle_core::{Tensor, D};

use crate::error::{contract, Error, Result};
use crate::frame::Frame;

/// Returned by [`psnr`] for identical frames.
pub const PSNR_INF: f64 = f64::INFINITY;

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const MS_SSIM_MIN_SIDE: usize = 160;
const WIN: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_dims(a: &Frame, b: &Frame) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Data(format!("frame sizes differ: {}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    Ok(())
}

pub fn mse(a: &Frame, b: &Frame) -> Result<f64> {
    same_dims(a, b)?;
    let s: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.data.len() as f64)
}

/// `10 log10(1 / MSE)`; identical frames give [`PSNR_INF`].
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { PSNR_INF } else { 10.0 * (1.0 / m).log10() })
}

fn gaussian_window() -> Vec<f64> {
    let c = (WIN / 2) as f64;
    let g: Vec<f64> = (0..WIN).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Plane of `h` rows by `w` columns.
#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    /// Separable valid filtering; a dimension shorter than the window is left
    /// unfiltered.
    fn blur(&self, g: &[f64]) -> Plane {
        let k = g.len();
        let mut cur = self.clone();
        if cur.w >= k {
            let ow = cur.w - k + 1;
            let mut v = vec![0.0; ow * cur.h];
            for y in 0..cur.h {
                for x in 0..ow {
                    v[y * ow + x] = (0..k).map(|i| g[i] * cur.v[y * cur.w + x + i]).sum();
                }
            }
            cur = Plane { w: ow, h: cur.h, v };
        }
        if cur.h >= k {
            let oh = cur.h - k + 1;
            let mut v = vec![0.0; cur.w * oh];
            for y in 0..oh {
                for x in 0..cur.w {
                    v[y * cur.w + x] = (0..k).map(|i| g[i] * cur.v[(y + i) * cur.w + x]).sum();
                }
            }
            cur = Plane { w: cur.w, h: oh, v };
        }
        cur
    }

    fn mul(&self, o: &Plane) -> Plane {
        Plane { w: self.w, h: self.h, v: self.v.iter().zip(&o.v).map(|(a, b)| a * b).collect() }
    }

    /// 2x2 average pooling; an odd last row or column is dropped.
    fn down(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut v = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * self.w + 2 * x;
                v[y * w + x] = 0.25 * (self.v[i] + self.v[i + 1] + self.v[i + self.w] + self.v[i + self.w + 1]);
            }
        }
        Plane { w, h, v }
    }
}

/// Mean SSIM and mean contrast-structure term of one scale.
fn ssim_cs(a: &Plane, b: &Plane, g: &[f64]) -> (f64, f64) {
    let mu_a = a.blur(g);
    let mu_b = b.blur(g);
    let saa = a.mul(a).blur(g);
    let sbb = b.mul(b).blur(g);
    let sab = a.mul(b).blur(g);
    let n = mu_a.v.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.v.len() {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let va = saa.v[i] - ma * ma;
        let vb = sbb.v[i] - mb * mb;
        let cov = sab.v[i] - ma * mb;
        let c = (2.0 * cov + C2) / (va + vb + C2);
        cs += c;
        ssim += c * (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
    }
    (ssim / n, cs / n)
}

/// Five-scale MS-SSIM averaged over the three channels. Negative per-scale
/// terms are clamped to zero before exponentiation.
pub fn ms_ssim(a: &Frame, b: &Frame) -> Result<f64> {
    same_dims(a, b)?;
    if a.width.min(a.height) < MS_SSIM_MIN_SIDE {
        return Err(Error::Data(format!(
            "MS-SSIM needs at least {MS_SSIM_MIN_SIDE} pixels per side, got {}x{}",
            a.width, a.height
        )));
    }
    let g = gaussian_window();
    let n = a.pixels();
    let mut total = 0.0;
    for c in 0..3 {
        let plane = |f: &Frame| Plane { w: f.width, h: f.height, v: f.data[c * n..(c + 1) * n].iter().map(|&x| x as f64).collect() };
        let (mut pa, mut pb) = (plane(a), plane(b));
        let mut val = 1.0;
        for (j, w) in MS_SSIM_WEIGHTS.iter().enumerate() {
            let (ssim, cs) = ssim_cs(&pa, &pb, &g);
            let term = if j + 1 == MS_SSIM_WEIGHTS.len() { ssim } else { cs };
            val *= term.max(0.0).powf(*w);
            pa = pa.down();
            pb = pb.down();
        }
        total += val;
    }
    Ok(total / 3.0)
}

/// Number of dyadic scales whose coarsest level still fits the window.
pub fn ms_ssim_scales(side: usize) -> usize {
    (1..=MS_SSIM_WEIGHTS.len()).rev().find(|&s| side >> (s - 1) >= WIN).unwrap_or(0)
}

/// Differentiable MS-SSIM of `(b, c, h, w)` batches, averaged over batch and
/// channels. Uses as many of the five scales as fit the input, with their
/// weights renormalized to sum to one.
pub fn ms_ssim_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = a.dims4()?;
    if b.dims() != a.dims() {
        return contract(format!("ms_ssim_tensor shapes {:?} vs {:?}", a.dims(), b.dims()));
    }
    let scales = ms_ssim_scales(h.min(w));
    if scales == 0 {
        return Err(Error::Data(format!("MS-SSIM needs at least {WIN} pixels per side, got {w}x{h}")));
    }
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let g = gaussian_window();
    let gx = Tensor::from_vec(g.clone(), (1, 1, 1, WIN), a.device())?.to_dtype(a.dtype())?;
    let gy = Tensor::from_vec(g, (1, 1, WIN, 1), a.device())?.to_dtype(a.dtype())?;
    let blur = |t: &Tensor| -> Result<Tensor> { Ok(t.conv2d(&gx, 0, 1, 1, 1)?.conv2d(&gy, 0, 1, 1, 1)?) };
    let mut pa = a.reshape((n * c, 1, h, w))?;
    let mut pb = b.reshape((n * c, 1, h, w))?;
    let mut log_val: Option<Tensor> = None;
    for j in 0..scales {
        let ma = blur(&pa)?;
        let mb = blur(&pb)?;
        let va = (blur(&pa.sqr()?)? - ma.sqr()?)?;
        let vb = (blur(&pb.sqr()?)? - mb.sqr()?)?;
        let cov = (blur(&(&pa * &pb)?)? - (&ma * &mb)?)?;
        let cs = ((cov * 2.0)? + C2)?.div(&((va + vb)? + C2)?)?;
        let term = if j + 1 == scales {
            let l = (((&ma * &mb)? * 2.0)? + C1)?.div(&((ma.sqr()? + mb.sqr()?)? + C1)?)?;
            (cs * l)?
        } else {
            cs
        };
        let m = term.flatten_from(1)?.mean(D::Minus1)?.relu()?;
        let lv = ((m + 1e-8)?.log()? * (MS_SSIM_WEIGHTS[j] / wsum))?;
        log_val = Some(match log_val {
            Some(acc) => (acc + lv)?,
            None => lv,
        });
        if j + 1 < scales {
            pa = pa.avg_pool2d(2)?;
            pb = pb.avg_pool2d(2)?;
        }
    }
    let lv = log_val.expect("at least one scale");
    Ok(lv.exp()?.mean_all()?)
}

/// Mean squared error of two batches as a scalar tensor.
pub fn mse_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m == 0.0 {
        PSNR_INF
    } else {
        10.0 * (1.0 / m).log10()
    }
}
