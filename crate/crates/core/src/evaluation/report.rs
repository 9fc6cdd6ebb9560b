//! JSONL, CSV and SVG output for evaluation runs.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::{AblationTable, SequenceResult};
use crate::error::Result;

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = create(path)?;
    for it in items {
        serde_json::to_writer(&mut f, it)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn frames_csv(r: &SequenceResult) -> String {
    let mut s = String::from("index,type,bpp,flow_bpp,offset_bpp,hyper_bpp,frame_bpp,header_bpp,psnr,ms_ssim\n");
    for f in &r.frames {
        let b = f.rd.breakdown;
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4},{}",
            f.index,
            if f.intra { "I" } else { "P" },
            f.rd.bpp,
            b[0],
            b[1],
            b[2],
            b[3],
            f.rd.header_bpp,
            f.rd.psnr,
            fmt_opt(f.rd.ms_ssim)
        );
    }
    s
}

pub fn ablation_csv(t: &AblationTable) -> String {
    let mut s = String::from("preset,lambda_index,lambda,bpp,flow_bpp,offset_bpp,hyper_bpp,frame_bpp,psnr,offset_bits,bd_rate_vs_anchor\n");
    for row in &t.rows {
        for p in &row.points {
            let b = p.aggregate.breakdown;
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4},{},{}",
                p.preset,
                p.lambda_index,
                p.lambda,
                p.aggregate.bpp,
                b[0],
                b[1],
                b[2],
                b[3],
                p.aggregate.psnr,
                p.offset_bits,
                fmt_opt(row.bd_rate_vs_anchor)
            );
        }
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes())?;
    f.flush()?;
    Ok(())
}

const PALETTE: [&str; 10] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];
const W: f64 = 640.0;
const H: f64 = 420.0;
const M: f64 = 50.0;

fn span(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-9 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn svg_open(title: &str, xlabel: &str, ylabel: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\">{title}</text>\n\
         <line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{xlabel}</text>\n\
         <text x=\"15\" y=\"{}\" transform=\"rotate(-90 15 {})\" text-anchor=\"middle\">{ylabel}</text>\n",
        W / 2.0,
        H - M,
        W - M,
        H - M,
        H - M,
        W / 2.0,
        H - 12.0,
        H / 2.0,
        H / 2.0
    )
}

/// Quality against bpp, one polyline per preset.
pub fn rd_curves_svg(t: &AblationTable) -> String {
    let pts = t.rows.iter().flat_map(|r| r.points.iter().map(|p| (p.aggregate.bpp, p.aggregate.psnr)));
    let (x0, x1) = span(pts.clone().map(|p| p.0));
    let (y0, y1) = span(pts.map(|p| p.1));
    let sx = |v: f64| M + (v - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |v: f64| H - M - (v - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = svg_open(&format!("RD curves ({})", t.dataset), "bpp", "PSNR (dB)");
    let _ = writeln!(s, "<text x=\"{M}\" y=\"{}\">{x0:.3}</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{x1:.3}</text>", H - M + 15.0, W - M, H - M + 15.0);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y1:.2}</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y0:.2}</text>", M - 4.0, M + 4.0, M - 4.0, H - M);
    for (i, row) in t.rows.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = row.points.iter().map(|p| format!("{:.1},{:.1}", sx(p.aggregate.bpp), sy(p.aggregate.psnr))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"2\" points=\"{}\"/>", path.join(" "));
        for p in &row.points {
            let _ = writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{c}\"/>", sx(p.aggregate.bpp), sy(p.aggregate.psnr));
        }
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{c}\">{}</text>", W - M + 5.0, M + 15.0 * i as f64, row.preset);
    }
    s.push_str("</svg>\n");
    s
}

/// Stacked bars of the mean rate split for each preset at each lambda.
pub fn breakdown_svg(t: &AblationTable) -> String {
    let bars: Vec<(String, [f64; 4])> =
        t.rows.iter().flat_map(|r| r.points.iter().map(|p| (format!("{}/{}", p.preset, p.lambda_index), p.aggregate.breakdown))).collect();
    let top = bars.iter().map(|b| b.1.iter().sum::<f64>()).fold(0.0, f64::max).max(1e-9);
    let n = bars.len().max(1) as f64;
    let bw = (W - 2.0 * M) / n;
    let mut s = svg_open(&format!("Rate breakdown ({})", t.dataset), "preset/lambda", "bpp");
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{top:.3}</text>", M - 4.0, M + 4.0);
    let names = ["flow", "offset", "hyper", "frame"];
    for (i, (label, b)) in bars.iter().enumerate() {
        let mut y = H - M;
        for (k, v) in b.iter().enumerate() {
            let h = v / top * (H - 2.0 * M);
            y -= h;
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{}\"><title>{label} {}: {v:.4}</title></rect>",
                M + bw * i as f64 + 0.1 * bw,
                0.8 * bw,
                PALETTE[k],
                names[k]
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{}\" font-size=\"9\" text-anchor=\"middle\">{label}</text>",
            M + bw * (i as f64 + 0.5),
            H - M + 12.0
        );
    }
    for (k, name) in names.iter().enumerate() {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{}\">{name}</text>", W - M + 5.0, M + 15.0 * k as f64, PALETTE[k]);
    }
    s.push_str("</svg>\n");
    s
}

/// Write `frames.jsonl`, `frames.csv` and `summary.json` for one sequence.
pub fn write_sequence(dir: &Path, r: &SequenceResult) -> Result<()> {
    write_jsonl(&dir.join("frames.jsonl"), &r.frames)?;
    write_text(&dir.join("frames.csv"), &frames_csv(r))?;
    write_text(&dir.join("summary.json"), &serde_json::to_string_pretty(r)?)?;
    Ok(())
}

/// Write `ablation.json`, `ablation.csv`, `rd.svg` and `breakdown.svg`.
pub fn write_ablation(dir: &Path, t: &AblationTable) -> Result<()> {
    write_text(&dir.join("ablation.json"), &serde_json::to_string_pretty(t)?)?;
    write_text(&dir.join("ablation.csv"), &ablation_csv(t))?;
    write_text(&dir.join("rd.svg"), &rd_curves_svg(t))?;
    write_text(&dir.join("breakdown.svg"), &breakdown_svg(t))?;
    Ok(())
}
