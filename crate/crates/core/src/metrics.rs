//! Fusion quality and segmentation metrics.
//!
//! EN, SD, SF and the histogram terms of MI work on the 8-bit scale the
//! images are stored in. SSIM works on [0, 1].

use std::f64::consts::FRAC_PI_2;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::{GrayImage, LabelMask};
use crate::losses::{SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
use crate::tensor::kernels;

fn same_dims(op: &'static str, a: &GrayImage, b: &GrayImage) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, &[a.height, a.width], &[b.height, b.width]));
    }
    Ok(())
}

fn histogram(q: &[u8]) -> [f64; 256] {
    let mut h = [0.0; 256];
    for &v in q {
        h[v as usize] += 1.0;
    }
    h
}

fn entropy_of_counts(counts: &[f64]) -> f64 {
    let n: f64 = counts.iter().sum();
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / n;
            -p * p.log2()
        })
        .sum()
}

/// Shannon entropy (bits) of the 256-bin histogram.
pub fn en(img: &GrayImage) -> f64 {
    entropy_of_counts(&histogram(&img.quantized()))
}

/// Population standard deviation on the 0–255 scale.
pub fn sd(img: &GrayImage) -> f64 {
    let n = img.data.len() as f64;
    let mean = img.data.iter().sum::<f64>() / n;
    let var = img.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    255.0 * var.sqrt()
}

/// Spatial frequency `√(RF² + CF²)` with RMS first differences on the 0–255 scale.
pub fn sf(img: &GrayImage) -> f64 {
    let (h, w) = img.dims();
    let mut rf = 0.0;
    for r in 0..h {
        for c in 1..w {
            rf += (img.at(r, c) - img.at(r, c - 1)).powi(2);
        }
    }
    let mut cf = 0.0;
    for r in 1..h {
        for c in 0..w {
            cf += (img.at(r, c) - img.at(r - 1, c)).powi(2);
        }
    }
    let rf = if w > 1 { rf / (h * (w - 1)) as f64 } else { 0.0 };
    let cf = if h > 1 { cf / ((h - 1) * w) as f64 } else { 0.0 };
    255.0 * (rf + cf).sqrt()
}

fn mutual_information(a: &[u8], b: &[u8]) -> f64 {
    let mut joint = vec![0.0; 256 * 256];
    for (&x, &y) in a.iter().zip(b) {
        joint[x as usize * 256 + y as usize] += 1.0;
    }
    entropy_of_counts(&histogram(a)) + entropy_of_counts(&histogram(b)) - entropy_of_counts(&joint)
}

/// `I(F; A) + I(F; B)` in bits.
pub fn mi(fused: &GrayImage, a: &GrayImage, b: &GrayImage) -> Result<f64> {
    same_dims("mi", fused, a)?;
    same_dims("mi", fused, b)?;
    let f = fused.quantized();
    Ok(mutual_information(&f, &a.quantized()) + mutual_information(&f, &b.quantized()))
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 1e-20 || sbb <= 1e-20 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Sum of correlations of differences `r(F − B, A) + r(F − A, B)`.
pub fn scd(fused: &GrayImage, a: &GrayImage, b: &GrayImage) -> Result<f64> {
    same_dims("scd", fused, a)?;
    same_dims("scd", fused, b)?;
    let d_fb: Vec<f64> = fused.data.iter().zip(&b.data).map(|(f, y)| f - y).collect();
    let d_fa: Vec<f64> = fused.data.iter().zip(&a.data).map(|(f, x)| f - x).collect();
    Ok(pearson(&d_fb, &a.data) + pearson(&d_fa, &b.data))
}

fn blur_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    kernels::separable_blur(x, 1, h, w, taps, true)
}

/// Pixel-domain VIF of `dist` against `reference` over four scales.
/// Scales whose valid region is empty are skipped.
pub fn vif_single(reference: &GrayImage, dist: &GrayImage) -> Result<f64> {
    same_dims("vif", reference, dist)?;
    const SIGMA_NSQ: f64 = 2.0;
    const TINY: f64 = 1e-10;
    let mut r: Vec<f64> = reference.data.iter().map(|v| v * 255.0).collect();
    let mut d: Vec<f64> = dist.data.iter().map(|v| v * 255.0).collect();
    let (mut h, mut w) = reference.dims();
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=4u32 {
        let n = (1usize << (4 - scale + 1)) + 1;
        let taps = kernels::gaussian_taps(n, n as f64 / 5.0);
        if scale > 1 {
            if h < n || w < n {
                break;
            }
            let (rf, ho, wo) = blur_valid(&r, h, w, &taps);
            let (df, _, _) = blur_valid(&d, h, w, &taps);
            let keep = |v: &[f64]| -> Vec<f64> {
                (0..ho).step_by(2).flat_map(|y| (0..wo).step_by(2).map(move |x| v[y * wo + x])).collect()
            };
            r = keep(&rf);
            d = keep(&df);
            h = ho.div_ceil(2);
            w = wo.div_ceil(2);
        }
        if h < n || w < n {
            break;
        }
        let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
        let prod: Vec<f64> = r.iter().zip(&d).map(|(a, b)| a * b).collect();
        let (mu1, _, _) = blur_valid(&r, h, w, &taps);
        let (mu2, _, _) = blur_valid(&d, h, w, &taps);
        let (e11, _, _) = blur_valid(&sq(&r), h, w, &taps);
        let (e22, _, _) = blur_valid(&sq(&d), h, w, &taps);
        let (e12, _, _) = blur_valid(&prod, h, w, &taps);
        for i in 0..mu1.len() {
            let mut s1 = (e11[i] - mu1[i] * mu1[i]).max(0.0);
            let s2 = (e22[i] - mu2[i] * mu2[i]).max(0.0);
            let s12 = e12[i] - mu1[i] * mu2[i];
            let mut g = s12 / (s1 + TINY);
            let mut sv = s2 - g * s12;
            if s1 < TINY {
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            }
            if s2 < TINY {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            let sv = sv.max(TINY);
            num += (1.0 + g * g * s1 / (sv + SIGMA_NSQ)).log10();
            den += (1.0 + s1 / SIGMA_NSQ).log10();
        }
    }
    // A reference without texture carries no information to preserve.
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Mean of VIF(F; A) and VIF(F; B).
pub fn vif(fused: &GrayImage, a: &GrayImage, b: &GrayImage) -> Result<f64> {
    Ok(0.5 * (vif_single(a, fused)? + vif_single(b, fused)?))
}

struct EdgeMap {
    strength: Vec<f64>,
    orientation: Vec<f64>,
}

fn edges(img: &GrayImage) -> EdgeMap {
    let (h, w) = img.dims();
    let gx = kernels::correlate3_same(&img.data, 1, h, w, &kernels::SOBEL_X);
    let gy = kernels::correlate3_same(&img.data, 1, h, w, &kernels::SOBEL_Y);
    let strength = gx.iter().zip(&gy).map(|(x, y)| x.hypot(*y)).collect();
    let orientation = gx
        .iter()
        .zip(&gy)
        .map(|(&x, &y)| {
            if x == 0.0 {
                if y == 0.0 {
                    0.0
                } else {
                    FRAC_PI_2
                }
            } else {
                (y / x).atan()
            }
        })
        .collect();
    EdgeMap { strength, orientation }
}

pub const QABF_STRENGTH: (f64, f64, f64) = (0.9994, -15.0, 0.5);
pub const QABF_ORIENTATION: (f64, f64, f64) = (0.9879, -22.0, 0.8);

/// Sigmoid preservation score normalized so a perfect match scores 1.
fn preservation(v: f64, (gamma, kappa, sigma): (f64, f64, f64)) -> f64 {
    (1.0 / (gamma * (1.0 + (kappa * (v - sigma)).exp()))).clamp(0.0, 1.0)
}

fn transfer(src: &EdgeMap, fused: &EdgeMap, i: usize) -> f64 {
    let (gs, gf) = (src.strength[i], fused.strength[i]);
    let g = if gs == gf {
        1.0
    } else if gs > gf {
        gf / gs
    } else {
        gs / gf
    };
    let a = 1.0 - (src.orientation[i] - fused.orientation[i]).abs() / FRAC_PI_2;
    preservation(g, QABF_STRENGTH) * preservation(a, QABF_ORIENTATION)
}

/// Edge-transfer score Q^{AB/F}, weighted by source edge strength.
pub fn qabf(fused: &GrayImage, a: &GrayImage, b: &GrayImage) -> Result<f64> {
    same_dims("qabf", fused, a)?;
    same_dims("qabf", fused, b)?;
    let (ef, ea, eb) = (edges(fused), edges(a), edges(b));
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..fused.data.len() {
        let (wa, wb) = (ea.strength[i], eb.strength[i]);
        num += transfer(&ea, &ef, i) * wa + transfer(&eb, &ef, i) * wb;
        den += wa + wb;
    }
    Ok(if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { 0.0 })
}

/// Single-scale SSIM, mean over valid 11×11 windows.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    same_dims("ssim", a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid("ssim", format!("{h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let taps = kernels::gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (ma, _, _) = blur_valid(&a.data, h, w, &taps);
    let (mb, _, _) = blur_valid(&b.data, h, w, &taps);
    let (eaa, _, _) = blur_valid(&prod(&a.data, &a.data), h, w, &taps);
    let (ebb, _, _) = blur_valid(&prod(&b.data, &b.data), h, w, &taps);
    let (eab, _, _) = blur_valid(&prod(&a.data, &b.data), h, w, &taps);
    let n = ma.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (ma[i], mb[i]);
            let vx = eaa[i] - mx * mx;
            let vy = ebb[i] - my * my;
            let cxy = eab[i] - mx * my;
            ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Column order of fusion reports.
pub const FUSION_COLUMNS: [&str; 8] = ["EN", "SD", "SF", "MI", "SCD", "VIF", "Qabf", "SSIM"];

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FusionMetricsReport {
    pub en: f64,
    pub sd: f64,
    pub sf: f64,
    pub mi: f64,
    pub scd: f64,
    pub vif: f64,
    pub qabf: f64,
    /// Mean of SSIM against each source.
    pub ssim: f64,
}

impl FusionMetricsReport {
    pub fn compute(fused: &GrayImage, a: &GrayImage, b: &GrayImage) -> Result<Self> {
        Ok(FusionMetricsReport {
            en: en(fused),
            sd: sd(fused),
            sf: sf(fused),
            mi: mi(fused, a, b)?,
            scd: scd(fused, a, b)?,
            vif: vif(fused, a, b)?,
            qabf: qabf(fused, a, b)?,
            ssim: 0.5 * (ssim(fused, a)? + ssim(fused, b)?),
        })
    }

    pub fn values(&self) -> [f64; 8] {
        [self.en, self.sd, self.sf, self.mi, self.scd, self.vif, self.qabf, self.ssim]
    }

    pub fn mean(rows: &[FusionMetricsReport]) -> FusionMetricsReport {
        let n = rows.len().max(1) as f64;
        let mut acc = [0.0; 8];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v / n;
            }
        }
        let [en, sd, sf, mi, scd, vif, qabf, ssim] = acc;
        FusionMetricsReport { en, sd, sf, mi, scd, vif, qabf, ssim }
    }
}

fn check_masks(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape("segmentation metric", &[pred.height, pred.width], &[gt.height, gt.width]));
    }
    if class as usize >= crate::models::NUM_CLASSES {
        return Err(Error::invalid("segmentation metric", format!("class {class} out of range")));
    }
    if let Some(bad) = pred.data.iter().chain(&gt.data).find(|&&l| l as usize >= crate::models::NUM_CLASSES) {
        return Err(Error::invalid("segmentation metric", format!("label {bad} out of range")));
    }
    Ok(())
}

fn overlap(pred: &LabelMask, gt: &LabelMask, class: u8) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut p = 0;
    let mut g = 0;
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (ia, ib) = (a == class, b == class);
        inter += usize::from(ia && ib);
        p += usize::from(ia);
        g += usize::from(ib);
    }
    (inter, p, g)
}

/// Hard Dice for one class; 1 when both masks lack it.
pub fn dice(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<f64> {
    check_masks(pred, gt, class)?;
    let (i, p, g) = overlap(pred, gt, class);
    Ok(if p + g == 0 { 1.0 } else { 2.0 * i as f64 / (p + g) as f64 })
}

/// IoU for one class; 1 when both masks lack it.
pub fn iou(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<f64> {
    check_masks(pred, gt, class)?;
    let (i, p, g) = overlap(pred, gt, class);
    let union = p + g - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

/// Mean IoU over all classes.
pub fn miou(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    let k = crate::models::NUM_CLASSES;
    let mut s = 0.0;
    for c in 0..k {
        s += iou(pred, gt, c as u8)?;
    }
    Ok(s / k as f64)
}

/// Foreground pixels with at least one background 4-neighbour; outside the
/// image counts as background.
fn boundary(mask: &LabelMask, class: u8) -> Vec<(f64, f64)> {
    let (h, w) = mask.dims();
    let inside = |r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && mask.data[r as usize * w + c as usize] == class
    };
    let mut out = Vec::new();
    for r in 0..h as isize {
        for c in 0..w as isize {
            if inside(r, c) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| !inside(r + dr, c + dc)) {
                out.push((r as f64, c as f64));
            }
        }
    }
    out
}

/// Linear-interpolation percentile of unsorted values, `q` in [0, 100].
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// 95th percentile of symmetric boundary-to-boundary nearest distances.
/// Infinite when either mask lacks the class.
pub fn hd95(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<f64> {
    check_masks(pred, gt, class)?;
    let (bp, bg) = (boundary(pred, class), boundary(gt, class));
    if bp.is_empty() || bg.is_empty() {
        return Ok(f64::INFINITY);
    }
    let nearest = |p: &(f64, f64), set: &[(f64, f64)]| {
        set.iter().map(|q| (p.0 - q.0).hypot(p.1 - q.1)).fold(f64::INFINITY, f64::min)
    };
    let mut d: Vec<f64> = bp.iter().map(|p| nearest(p, &bg)).chain(bg.iter().map(|p| nearest(p, &bp))).collect();
    Ok(percentile(&mut d, 95.0))
}

/// Lesion class label in phantom masks.
pub const LESION: u8 = 2;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SegMetricsReport {
    /// Lesion-class Dice.
    pub dice: f64,
    pub miou: f64,
    /// Lesion-class HD95 in pixels; infinite when either side lacks a lesion.
    pub hd95: f64,
}

impl SegMetricsReport {
    pub fn compute(pred: &LabelMask, gt: &LabelMask) -> Result<Self> {
        Ok(SegMetricsReport { dice: dice(pred, gt, LESION)?, miou: miou(pred, gt)?, hd95: hd95(pred, gt, LESION)? })
    }

    /// Per-column means; HD95 averages the finite entries only.
    pub fn mean(rows: &[SegMetricsReport]) -> SegMetricsReport {
        let n = rows.len().max(1) as f64;
        let finite: Vec<f64> = rows.iter().map(|r| r.hd95).filter(|v| v.is_finite()).collect();
        SegMetricsReport {
            dice: rows.iter().map(|r| r.dice).sum::<f64>() / n,
            miou: rows.iter().map(|r| r.miou).sum::<f64>() / n,
            hd95: if finite.is_empty() { f64::INFINITY } else { finite.iter().sum::<f64>() / finite.len() as f64 },
        }
    }
}

/// Writes `id,EN,SD,...` rows.
pub fn write_fusion_csv(out: &mut impl Write, rows: &[(String, FusionMetricsReport)]) -> std::io::Result<()> {
    writeln!(out, "id,{}", FUSION_COLUMNS.join(","))?;
    for (id, r) in rows {
        let vals: Vec<String> = r.values().iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "{id},{}", vals.join(","))?;
    }
    Ok(())
}

pub fn write_seg_csv(out: &mut impl Write, rows: &[(String, SegMetricsReport)]) -> std::io::Result<()> {
    writeln!(out, "id,Dice,mIoU,HD95")?;
    for (id, r) in rows {
        writeln!(out, "{id},{:.6},{:.6},{}", r.dice, r.miou, fmt_hd(r.hd95))?;
    }
    Ok(())
}

fn fmt_hd(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "inf".to_string()
    }
}

/// JSON summary with per-column means; infinite HD95 is emitted as `null`.
pub fn summary_json<T: Serialize>(count: usize, mean: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(&serde_json::json!({ "count": count, "mean": mean }))?)
}
