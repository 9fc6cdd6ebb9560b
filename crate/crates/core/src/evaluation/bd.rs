//! Bjøntegaard delta rate with a monotone cubic interpolant.

use crate::error::{Error, Result};

/// Monotone piecewise-cubic Hermite interpolant (Fritsch-Carlson slopes).
#[derive(Debug, Clone)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    /// `x` must be strictly increasing.
    pub fn new(x: &[f64], y: &[f64]) -> Result<Self> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(Error::Data(format!("interpolation needs at least 2 matching points, got {n}")));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) || x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::Data("interpolation abscissae must be finite and strictly increasing".into()));
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d = vec![delta[0]; 2];
        } else {
            for i in 1..n - 1 {
                if delta[i - 1] * delta[i] > 0.0 {
                    let w1 = 2.0 * h[i] + h[i - 1];
                    let w2 = h[i] + 2.0 * h[i - 1];
                    d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
                }
            }
            d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
            d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Ok(Self { x: x.to_vec(), y: y.to_vec(), d })
    }

    fn segment(&self, t: f64) -> usize {
        match self.x.partition_point(|&v| v <= t) {
            0 => 0,
            k => (k - 1).min(self.x.len() - 2),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let h = self.x[i + 1] - self.x[i];
        let s = (t - self.x[i]) / h;
        let (h00, h10, h01, h11) =
            (2.0 * s.powi(3) - 3.0 * s * s + 1.0, s.powi(3) - 2.0 * s * s + s, -2.0 * s.powi(3) + 3.0 * s * s, s.powi(3) - s * s);
        h00 * self.y[i] + h10 * h * self.d[i] + h01 * self.y[i + 1] + h11 * h * self.d[i + 1]
    }

    /// Exact integral of the interpolant over `[a, b]` inside its domain.
    pub fn integrate(&self, a: f64, b: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..self.x.len() - 1 {
            let lo = a.max(self.x[i]);
            let hi = b.min(self.x[i + 1]);
            if hi <= lo {
                continue;
            }
            let h = self.x[i + 1] - self.x[i];
            // antiderivative in the local coordinate s, scaled by h
            let prim = |s: f64| {
                let (s2, s3, s4) = (s * s, s.powi(3), s.powi(4));
                let i00 = s4 / 2.0 - s3 + s;
                let i10 = s4 / 4.0 - 2.0 * s3 / 3.0 + s2 / 2.0;
                let i01 = -s4 / 2.0 + s3;
                let i11 = s4 / 4.0 - s3 / 3.0;
                h * (i00 * self.y[i] + i10 * h * self.d[i] + i01 * self.y[i + 1] + i11 * h * self.d[i + 1])
            };
            total += prim((hi - self.x[i]) / h) - prim((lo - self.x[i]) / h);
        }
        total
    }
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d.signum() != d0.signum() {
        0.0
    } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

/// Rate-quality pairs of one codec.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RDCurve {
    pub label: String,
    pub dataset: String,
    /// `(bpp, quality)`.
    pub points: Vec<(f64, f64)>,
}

impl RDCurve {
    pub fn new(label: &str, dataset: &str, mut points: Vec<(f64, f64)>) -> Result<Self> {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let c = Self { label: label.into(), dataset: dataset.into(), points };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 4 {
            return Err(Error::Data(format!("curve `{}` has {} points, need at least 4", self.label, self.points.len())));
        }
        if self.points.iter().any(|p| !(p.0 > 0.0 && p.0.is_finite() && p.1.is_finite())) {
            return Err(Error::Data(format!("curve `{}` has a non-positive or non-finite point", self.label)));
        }
        if self.points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::Data(format!("curve `{}` bpp is not strictly increasing", self.label)));
        }
        Ok(())
    }

    /// True when quality never drops as the rate grows.
    pub fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| w[1].1 >= w[0].1)
    }
}

fn log_rate_of_quality(c: &RDCurve) -> Result<Pchip> {
    let mut pts: Vec<(f64, f64)> = c.points.iter().map(|&(r, q)| (q, r.ln())).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (q, lr): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    Pchip::new(&q, &lr).map_err(|_| Error::Data(format!("curve `{}` has repeated quality values", c.label)))
}

/// Average rate difference of `test` against `anchor` at equal quality, in
/// percent. Negative values mean `test` needs fewer bits.
pub fn bd_rate(anchor: &RDCurve, test: &RDCurve) -> Result<f64> {
    anchor.validate()?;
    test.validate()?;
    for c in [anchor, test] {
        if !c.is_monotone() {
            log::warn!("curve `{}` quality is not monotone in rate", c.label);
        }
    }
    let pa = log_rate_of_quality(anchor)?;
    let pt = log_rate_of_quality(test)?;
    let range = |c: &RDCurve| {
        let q = c.points.iter().map(|p| p.1);
        (q.clone().fold(f64::INFINITY, f64::min), q.fold(f64::NEG_INFINITY, f64::max))
    };
    let (a0, a1) = range(anchor);
    let (t0, t1) = range(test);
    let (lo, hi) = (a0.max(t0), a1.min(t1));
    if !(hi > lo) {
        return Err(Error::Data(format!(
            "no quality overlap between `{}` [{a0:.3}, {a1:.3}] and `{}` [{t0:.3}, {t1:.3}]",
            anchor.label, test.label
        )));
    }
    let avg = (pt.integrate(lo, hi) - pa.integrate(lo, hi)) / (hi - lo);
    Ok((avg.exp() - 1.0) * 100.0)
}

/// Count the matched-quality points, taken from both curves inside their
/// common quality range, at which `test` needs fewer bits than `anchor`.
/// Returns `(wins, total)`.
pub fn matched_quality_wins(anchor: &RDCurve, test: &RDCurve) -> Result<(usize, usize)> {
    let pa = log_rate_of_quality(anchor)?;
    let pt = log_rate_of_quality(test)?;
    let qa: Vec<f64> = anchor.points.iter().map(|p| p.1).collect();
    let qt: Vec<f64> = test.points.iter().map(|p| p.1).collect();
    let lo = qa.iter().cloned().fold(f64::INFINITY, f64::min).max(qt.iter().cloned().fold(f64::INFINITY, f64::min));
    let hi = qa.iter().cloned().fold(f64::NEG_INFINITY, f64::max).min(qt.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let qs: Vec<f64> = qa.iter().chain(&qt).cloned().filter(|&q| q >= lo && q <= hi).collect();
    let wins = qs.iter().filter(|&&q| pt.eval(q) < pa.eval(q)).count();
    Ok((wins, qs.len()))
}
