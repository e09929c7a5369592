//! Direct-summation reference implementations shared by the test targets.
//! They are written from the metric definitions, not from the library code.
#![allow(dead_code)]

use std::collections::BTreeMap;

use fusionseg::image::GrayImage;
use fusionseg::rng::Rng;
use rand::Rng as _;

pub fn random_u8_image(h: usize, w: usize, rng: &mut Rng) -> GrayImage {
    let px: Vec<u8> = (0..h * w).map(|_| rng.gen()).collect();
    GrayImage::from_u8(h, w, &px).unwrap()
}

fn levels(img: &GrayImage) -> Vec<u8> {
    img.data.iter().map(|v| (v * 255.0).round() as u8).collect()
}

fn counts<K: Ord + Copy>(keys: impl Iterator<Item = K>) -> BTreeMap<K, f64> {
    let mut m = BTreeMap::new();
    for k in keys {
        *m.entry(k).or_insert(0.0) += 1.0;
    }
    m
}

pub fn en(img: &GrayImage) -> f64 {
    let n = img.data.len() as f64;
    counts(levels(img).into_iter()).values().map(|c| -(c / n) * (c / n).log2()).sum()
}

pub fn sd(img: &GrayImage) -> f64 {
    let v: Vec<f64> = img.data.iter().map(|x| x * 255.0).collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

pub fn sf(img: &GrayImage) -> f64 {
    let (h, w) = img.dims();
    let p = |r: usize, c: usize| img.data[r * w + c] * 255.0;
    let (mut rf, mut cf) = (0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            if c > 0 {
                rf += (p(r, c) - p(r, c - 1)).powi(2) / (h * (w - 1)) as f64;
            }
            if r > 0 {
                cf += (p(r, c) - p(r - 1, c)).powi(2) / ((h - 1) * w) as f64;
            }
        }
    }
    (rf + cf).sqrt()
}

/// `Σ p(a,b) log₂(p(a,b) / (p(a) p(b)))`.
fn mutual_information(a: &GrayImage, b: &GrayImage) -> f64 {
    let (la, lb) = (levels(a), levels(b));
    let n = la.len() as f64;
    let pa = counts(la.iter().copied());
    let pb = counts(lb.iter().copied());
    let joint = counts(la.iter().copied().zip(lb.iter().copied()));
    joint
        .iter()
        .map(|(&(x, y), &c)| {
            let p = c / n;
            p * (p / (pa[&x] / n * pb[&y] / n)).log2()
        })
        .sum()
}

pub fn mi(f: &GrayImage, a: &GrayImage, b: &GrayImage) -> f64 {
    mutual_information(f, a) + mutual_information(f, b)
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va.sqrt() * vb.sqrt())
}

pub fn scd(f: &GrayImage, a: &GrayImage, b: &GrayImage) -> f64 {
    let diff = |p: &GrayImage, q: &GrayImage| p.data.iter().zip(&q.data).map(|(x, y)| x - y).collect::<Vec<_>>();
    corr(&diff(f, b), &a.data) + corr(&diff(f, a), &b.data)
}

/// Mean SSIM over all valid 11×11 windows with a 2-D Gaussian (σ = 1.5)
/// weighting, moments taken around the window mean.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> f64 {
    const K: usize = 11;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let g: Vec<f64> = (0..K).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let total: f64 = g.iter().flat_map(|x| g.iter().map(move |y| x * y)).sum();
    let (h, w) = a.dims();
    let mut acc = 0.0;
    let mut windows = 0;
    for r0 in 0..=h - K {
        for c0 in 0..=w - K {
            let px = |img: &GrayImage, u: usize, v: usize| img.data[(r0 + u) * w + c0 + v];
            let wt = |u: usize, v: usize| g[u] * g[v] / total;
            let (mut mx, mut my) = (0.0, 0.0);
            for u in 0..K {
                for v in 0..K {
                    mx += wt(u, v) * px(a, u, v);
                    my += wt(u, v) * px(b, u, v);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for u in 0..K {
                for v in 0..K {
                    let (dx, dy) = (px(a, u, v) - mx, px(b, u, v) - my);
                    vx += wt(u, v) * dx * dx;
                    vy += wt(u, v) * dy * dy;
                    cxy += wt(u, v) * dx * dy;
                }
            }
            acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            windows += 1;
        }
    }
    acc / windows as f64
}
