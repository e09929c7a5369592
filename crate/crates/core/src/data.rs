//! Synthetic two-modality phantoms, on-disk datasets and patch sampling.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, LabelMask};
use crate::rng::{self, Rng};

pub const MANIFEST_VERSION: u32 = 1;
pub const GENERATOR_VERSION: &str = "phantom-1";
/// Modality names of generated phantoms: anatomy-weighted, lesion-weighted.
pub const PHANTOM_MODALITIES: [&str; 2] = ["t1", "t2"];

pub const BACKGROUND: u8 = 0;
pub const TISSUE: u8 = 1;
pub const LESION: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Generated,
    Ingested,
}

/// One aligned sample: modalities in manifest order plus the label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub images: Vec<(String, GrayImage)>,
    pub mask: LabelMask,
    pub provenance: Provenance,
    /// Otsu foreground of the first modality; filled on ingestion.
    pub foreground: Option<Vec<bool>>,
}

impl CaseRecord {
    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }

    pub fn modality(&self, name: &str) -> Option<&GrayImage> {
        self.images.iter().find(|(n, _)| n == name).map(|(_, i)| i)
    }

    fn validate(&self) -> Result<()> {
        if self.images.len() < 2 {
            return Err(Error::Dataset(format!("{}: fewer than two modalities", self.case_id)));
        }
        for (name, img) in &self.images {
            if img.dims() != self.mask.dims() {
                return Err(Error::Dataset(format!(
                    "{}: modality {name} is {:?}, mask is {:?}",
                    self.case_id,
                    img.dims(),
                    self.mask.dims()
                )));
            }
        }
        if let Some(l) = self.mask.data.iter().find(|&&l| l > LESION) {
            return Err(Error::Dataset(format!("{}: label {l} outside {{0, 1, 2}}", self.case_id)));
        }
        Ok(())
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }

    fn rasterize(&self, size: usize) -> Vec<bool> {
        (0..size * size).map(|i| self.contains((i / size) as f64 + 0.5, (i % size) as f64 + 0.5)).collect()
    }
}

fn random_ellipse(rng: &mut Rng, cy: f64, cx: f64, r_lo: f64, r_hi: f64) -> Ellipse {
    Ellipse { cy, cx, ry: rng.gen_range(r_lo..r_hi), rx: rng.gen_range(r_lo..r_hi), angle: rng.gen_range(0.0..PI) }
}

const NOISE_SIGMA: f64 = 0.02;
const A_TISSUE: f64 = 0.55;
const B_TISSUE: f64 = 0.35;
const B_LESION_CONTRAST: f64 = 0.45;

/// Generates one phantom case deterministically from `seed`.
///
/// Modality `t1` shows anatomy (internal structures at ±0.2–0.35) and no
/// lesion; `t2` shows the lesion at +0.45 and anatomy at ≤ 0.03.
pub fn gen_phantom_case(seed: u64, size: usize) -> Result<CaseRecord> {
    gen_phantom_with(&mut rng::stream(seed, "phantom"), format!("case{seed:05}"), size)
}

fn gen_phantom_with(rng: &mut Rng, case_id: String, size: usize) -> Result<CaseRecord> {
    if size < 32 || !size.is_multiple_of(8) {
        return Err(Error::invalid("phantom", format!("size {size} must be a multiple of 8 and at least 32")));
    }
    let s = size as f64;
    // Rejection sampling keeps every case inside the contrast and area bounds.
    loop {
        let head = Ellipse {
            cy: s / 2.0 + rng.gen_range(-0.04..0.04) * s,
            cx: s / 2.0 + rng.gen_range(-0.04..0.04) * s,
            ry: rng.gen_range(0.36..0.44) * s,
            rx: rng.gen_range(0.32..0.40) * s,
            angle: rng.gen_range(-0.3..0.3),
        };
        let head_px = head.rasterize(size);
        let head_area = head_px.iter().filter(|&&b| b).count() as f64;

        let n_struct = rng.gen_range(2..=4);
        let mut a_img: Vec<f64> = head_px.iter().map(|&h| if h { A_TISSUE } else { 0.0 }).collect();
        let mut b_img: Vec<f64> = head_px.iter().map(|&h| if h { B_TISSUE } else { 0.0 }).collect();
        let mut structures = vec![false; size * size];
        for k in 0..n_struct {
            let cy = head.cy + rng.gen_range(-0.5..0.5) * head.ry;
            let cx = head.cx + rng.gen_range(-0.5..0.5) * head.rx;
            let e = random_ellipse(rng, cy, cx, 0.06 * s, 0.13 * s);
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            let da = sign * rng.gen_range(0.2..0.35);
            let db = rng.gen_range(-0.03..0.03);
            for (i, inside) in e.rasterize(size).into_iter().enumerate() {
                if inside && head_px[i] {
                    a_img[i] = A_TISSUE + da;
                    b_img[i] = B_TISSUE + db;
                    structures[i] = true;
                }
            }
        }

        let frac = rng.gen_range(0.03..0.07);
        let r_eff = (frac * head_area / PI).sqrt();
        let elong = rng.gen_range(1.0..1.4);
        let lesion = Ellipse {
            cy: head.cy + rng.gen_range(-0.55..0.55) * head.ry,
            cx: head.cx + rng.gen_range(-0.55..0.55) * head.rx,
            ry: r_eff * elong,
            rx: r_eff / elong,
            angle: rng.gen_range(0.0..PI),
        };
        let lesion_px = lesion.rasterize(size);
        // The lesion sits in plain parenchyma: fully inside the head, off the structures,
        // with a one-pixel margin to the head boundary.
        let margin_ok = (0..size * size).all(|i| {
            if !lesion_px[i] {
                return true;
            }
            let (r, c) = ((i / size) as isize, (i % size) as isize);
            [(-1, 0), (1, 0), (0, -1), (0, 1), (0, 0)].iter().all(|(dr, dc)| {
                let (rr, cc) = (r + dr, c + dc);
                rr >= 0
                    && cc >= 0
                    && (rr as usize) < size
                    && (cc as usize) < size
                    && head_px[rr as usize * size + cc as usize]
            }) && !structures[i]
        });
        let lesion_area = lesion_px.iter().filter(|&&b| b).count() as f64;
        if !margin_ok || lesion_area < 0.01 * head_area || lesion_area > 0.08 * head_area {
            continue;
        }
        for (i, &l) in lesion_px.iter().enumerate() {
            if l {
                b_img[i] += B_LESION_CONTRAST;
            }
        }
        let mask: Vec<u8> = (0..size * size)
            .map(|i| {
                if lesion_px[i] {
                    LESION
                } else if head_px[i] {
                    TISSUE
                } else {
                    BACKGROUND
                }
            })
            .collect();

        let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
        let mut finish =
            |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| (x + noise.sample(rng)).clamp(0.0, 1.0)).collect() };
        let a_img = finish(a_img);
        let b_img = finish(b_img);

        let mean_where = |img: &[f64], label: u8| {
            let v: Vec<f64> = img.iter().zip(&mask).filter(|(_, &m)| m == label).map(|(x, _)| *x).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        };
        let a_gap = (mean_where(&a_img, LESION) - mean_where(&a_img, TISSUE)).abs();
        let b_gap = (mean_where(&b_img, LESION) - mean_where(&b_img, TISSUE)).abs();
        if a_gap >= 0.04 || b_gap <= 0.35 {
            continue;
        }
        let record = CaseRecord {
            case_id,
            images: vec![
                (PHANTOM_MODALITIES[0].to_string(), GrayImage::new(size, size, a_img)?),
                (PHANTOM_MODALITIES[1].to_string(), GrayImage::new(size, size, b_img)?),
            ],
            mask: LabelMask::new(size, size, mask)?,
            provenance: Provenance::Generated,
            foreground: None,
        };
        return Ok(record);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCase {
    pub case_id: String,
    /// Modality name → path relative to the manifest directory.
    pub images: BTreeMap<String, String>,
    pub mask: String,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub generator_version: String,
    pub size: usize,
    /// Modality order; the first two are the fusion inputs.
    pub modalities: Vec<String>,
    pub cases: Vec<ManifestCase>,
    pub splits: Splits,
}

impl Manifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Dataset(format!("unsupported manifest version {}", self.version)));
        }
        if self.modalities.len() < 2 {
            return Err(Error::Dataset("manifest lists fewer than two modalities".into()));
        }
        let mut seen = HashSet::new();
        for c in &self.cases {
            if !seen.insert(c.case_id.as_str()) {
                return Err(Error::Dataset(format!("duplicate case_id {}", c.case_id)));
            }
        }
        for id in self.splits.train.iter().chain(&self.splits.val).chain(&self.splits.test) {
            if !seen.contains(id.as_str()) {
                return Err(Error::Dataset(format!("split references unknown case {id}")));
            }
        }
        Ok(())
    }

    /// Serializes and writes atomically (temp file + rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        write_atomic(path, text.as_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Deterministic 80/10/10 split ordered by a hash of the case id.
pub fn split_ids(ids: &[String]) -> Splits {
    let mut keyed: Vec<(u32, &String)> = ids.iter().map(|id| (crc32fast::hash(id.as_bytes()), id)).collect();
    keyed.sort();
    let n = ids.len();
    let n_train = (n as f64 * 0.8).round() as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    let mut splits = Splits::default();
    for (i, (_, id)) in keyed.into_iter().enumerate() {
        let bucket = if i < n_train {
            &mut splits.train
        } else if i < n_train + n_val {
            &mut splits.val
        } else {
            &mut splits.test
        };
        bucket.push(id.clone());
    }
    splits
}

/// Writes `n_cases` phantoms under `out_dir` and returns the manifest.
pub fn build_dataset(n_cases: usize, seed: u64, size: usize, out_dir: &Path) -> Result<Manifest> {
    if n_cases == 0 {
        return Err(Error::invalid("gen-data", "need at least one case"));
    }
    fs::create_dir_all(out_dir.join("images")).map_err(|e| Error::io(out_dir, e))?;
    fs::create_dir_all(out_dir.join("masks")).map_err(|e| Error::io(out_dir, e))?;
    let mut cases = Vec::with_capacity(n_cases);
    for i in 0..n_cases {
        let id = format!("case{i:04}");
        let rec = gen_phantom_with(&mut rng::indexed(seed, "phantom", i as u64), id.clone(), size)?;
        let mut images = BTreeMap::new();
        for (name, img) in &rec.images {
            let rel = format!("images/{id}_{name}.pgm");
            img.write_pgm(&out_dir.join(&rel))?;
            images.insert(name.clone(), rel);
        }
        let mask = format!("masks/{id}_mask.pgm");
        rec.mask.write_pgm(&out_dir.join(&mask))?;
        cases.push(ManifestCase { case_id: id, images, mask, provenance: Provenance::Generated });
    }
    let ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        generator_version: GENERATOR_VERSION.to_string(),
        size,
        modalities: PHANTOM_MODALITIES.iter().map(|s| s.to_string()).collect(),
        cases,
        splits: split_ids(&ids),
    };
    manifest.save(&out_dir.join(Manifest::FILE_NAME))?;
    Ok(manifest)
}

/// Loaded cases plus the per-case failures that were skipped.
#[derive(Debug, Default)]
pub struct Dataset {
    pub manifest: Option<Manifest>,
    pub cases: Vec<CaseRecord>,
    pub errors: Vec<(String, Error)>,
}

impl Dataset {
    pub fn get(&self, id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.case_id == id)
    }

    /// Cases of one split, in split order; missing ones are skipped.
    pub fn split(&self, which: Split) -> Vec<&CaseRecord> {
        let Some(m) = &self.manifest else { return self.cases.iter().collect() };
        let ids = match which {
            Split::Train => &m.splits.train,
            Split::Val => &m.splits.val,
            Split::Test => &m.splits.test,
        };
        ids.iter().filter_map(|id| self.get(id)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Loads every case a manifest lists. Cases with missing files or
/// mismatched dimensions are reported in `errors` and skipped.
pub fn ingest_slices(dir: &Path, manifest: &Manifest) -> Dataset {
    let mut out = Dataset { manifest: Some(manifest.clone()), ..Default::default() };
    for mc in &manifest.cases {
        match load_case(dir, manifest, mc) {
            Ok(c) => out.cases.push(c),
            Err(e) => out.errors.push((mc.case_id.clone(), e)),
        }
    }
    out
}

/// Reads `manifest.json` from `dir` and ingests it.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = Manifest::load(&dir.join(Manifest::FILE_NAME))?;
    Ok(ingest_slices(dir, &manifest))
}

fn load_case(dir: &Path, manifest: &Manifest, mc: &ManifestCase) -> Result<CaseRecord> {
    let resolve = |rel: &str| -> PathBuf { dir.join(rel) };
    let mut images = Vec::with_capacity(manifest.modalities.len());
    for name in &manifest.modalities {
        let rel = mc
            .images
            .get(name)
            .ok_or_else(|| Error::Dataset(format!("{}: no entry for modality {name}", mc.case_id)))?;
        images.push((name.clone(), GrayImage::read_pgm(&resolve(rel))?));
    }
    let mask = LabelMask::read_pgm(&resolve(&mc.mask))?;
    let foreground = Some(otsu_foreground(&images[0].1));
    let rec = CaseRecord { case_id: mc.case_id.clone(), images, mask, provenance: mc.provenance, foreground };
    rec.validate()?;
    Ok(rec)
}

/// Otsu threshold on the 256-bin histogram; returns the level `t` such that
/// pixels with quantized value > t are foreground.
pub fn otsu_threshold(img: &GrayImage) -> u8 {
    let q = img.quantized();
    let mut hist = [0.0f64; 256];
    for &v in &q {
        hist[v as usize] += 1.0;
    }
    let total = q.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, h)| i as f64 * h).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best_t, mut best) = (0u8, -1.0);
    for t in 0..256 {
        w0 += hist[t];
        sum0 += t as f64 * hist[t];
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            best_t = t as u8;
        }
    }
    best_t
}

pub fn otsu_foreground(img: &GrayImage) -> Vec<bool> {
    let t = otsu_threshold(img);
    img.quantized().into_iter().map(|v| v > t).collect()
}

/// One training crop: all modalities and the mask cut from the same window.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub case_id: String,
    pub images: Vec<GrayImage>,
    pub mask: LabelMask,
    pub origin: (usize, usize),
    pub flipped: bool,
}

/// Random `patch×patch` crop with a horizontal flip of probability 0.5 when `flip`.
pub fn sample_patch(case: &CaseRecord, patch: usize, flip: bool, rng: &mut Rng) -> Result<Sample> {
    let (h, w) = case.dims();
    if patch == 0 || patch > h || patch > w {
        return Err(Error::invalid("sample_patch", format!("patch {patch} does not fit {h}x{w}")));
    }
    let r0 = rng.gen_range(0..=h - patch);
    let c0 = rng.gen_range(0..=w - patch);
    let flipped = flip && rng.gen_bool(0.5);
    let idx = |r: usize, c: usize| {
        let cc = if flipped { patch - 1 - c } else { c };
        (r0 + r) * w + c0 + cc
    };
    let crop_f = |img: &GrayImage| -> Result<GrayImage> {
        GrayImage::new(patch, patch, (0..patch * patch).map(|i| img.data[idx(i / patch, i % patch)]).collect())
    };
    Ok(Sample {
        case_id: case.case_id.clone(),
        images: case.images.iter().map(|(_, img)| crop_f(img)).collect::<Result<_>>()?,
        mask: LabelMask::new(
            patch,
            patch,
            (0..patch * patch).map(|i| case.mask.data[idx(i / patch, i % patch)]).collect(),
        )?,
        origin: (r0, c0),
        flipped,
    })
}

/// Whole-image sample without augmentation.
pub fn full_sample(case: &CaseRecord) -> Sample {
    Sample {
        case_id: case.case_id.clone(),
        images: case.images.iter().map(|(_, i)| i.clone()).collect(),
        mask: case.mask.clone(),
        origin: (0, 0),
        flipped: false,
    }
}
