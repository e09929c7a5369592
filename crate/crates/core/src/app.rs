//! Run-directory workflows behind the command-line tool.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, SegInput};
use crate::data::{load_dataset, write_atomic, Dataset, Split};
use crate::error::{Error, Result};
use crate::image::{GrayImage, LabelMask};
use crate::metrics::{self, FusionMetricsReport, SegMetricsReport};
use crate::models::SegConfig;
use crate::tensor::Tensor;
use crate::train::{self, EpochRecord, FusionState, SegState};

pub const CHECKPOINT_FILE: &str = "checkpoint.f4sg";
pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "epochs.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// Files of a finished run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub history: Vec<EpochRecord>,
}

/// Creates `out`, writes the resolved config and returns an epoch logger
/// that appends one JSON line per record.
fn open_run(cfg: &RunConfig, out: &Path) -> Result<impl FnMut(&EpochRecord) -> Result<()>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    let log_path = out.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    Ok(move |rec: &EpochRecord| log.write_all(rec.to_json_line().as_bytes()).map_err(|e| Error::io(&log_path, e)))
}

fn dataset(dir: &Path) -> Result<Dataset> {
    let data = load_dataset(dir)?;
    if let Some((id, e)) = data.errors.first() {
        eprintln!("warning: skipped {} case(s); first: {id}: {e}", data.errors.len());
    }
    Ok(data)
}

#[derive(Serialize)]
struct PretrainSummary {
    split: &'static str,
    count: usize,
    recon_ssim: f64,
}

/// Pre-training stage: fresh networks, reconstruction objective.
pub fn run_pretrain(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let data = dataset(data_dir)?;
    let mut log = open_run(cfg, out)?;
    let mut state = FusionState::new(cfg.fusion_config(), cfg.seed)?;
    let history = train::pretrain(&mut state, &data, cfg, &mut log)?;
    let ck = Checkpoint::from_states(&state, None);
    let checkpoint = out.join(CHECKPOINT_FILE);
    ck.save(&checkpoint)?;
    // Summary from the stored (f32) parameters, as a reader of the checkpoint sees them.
    let (state, _) = ck.restore()?;
    let val = data.split(Split::Val);
    let mut ssim = 0.0;
    for c in &val {
        for (_, img) in c.images.iter().take(2) {
            ssim += metrics::ssim(img, &state.reconstruct(img)?)? / (2 * val.len()) as f64;
        }
    }
    let summary = PretrainSummary { split: "val", count: val.len(), recon_ssim: ssim };
    write_atomic(&out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(RunOutput { dir: out.to_path_buf(), checkpoint, history })
}

/// Fusion state for the cooperative stage: every parameter of `init` whose
/// name and shape match the configured architecture is copied over.
pub fn fusion_from_init(cfg: &RunConfig, init: Option<&Checkpoint>) -> Result<FusionState> {
    let mut state = FusionState::new(cfg.fusion_config(), cfg.seed)?;
    let Some(ck) = init else { return Ok(state) };
    let mut copied = 0;
    for (name, t) in &ck.entries {
        for ps in [&mut state.params, &mut state.disc_params] {
            if ps.id(name).is_some_and(|id| ps.value(id).shape() == t.shape()) {
                ps.assign(name, t.clone())?;
                copied += 1;
            }
        }
    }
    if copied == 0 {
        return Err(Error::Checkpoint("init checkpoint shares no parameters with the configured model".into()));
    }
    Ok(state)
}

#[derive(Serialize)]
struct TrainSummary {
    split: &'static str,
    count: usize,
    seg: SegMetricsReport,
    fusion: FusionMetricsReport,
}

/// Cooperative stage. `init` is the pre-trained checkpoint; it may be
/// omitted only when the segmenter does not read the fused image.
pub fn run_train(cfg: &RunConfig, data_dir: &Path, init: Option<&Path>, out: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    if init.is_none() && cfg.seg_input == SegInput::Fused {
        return Err(Error::Config("train needs --init from a pretrain run".into()));
    }
    let init = init.map(Checkpoint::load).transpose()?;
    let data = dataset(data_dir)?;
    let mut fusion = fusion_from_init(cfg, init.as_ref())?;
    let mut seg = SegState::new(SegConfig::default(), cfg.seed)?;
    let mut log = open_run(cfg, out)?;
    let history = train::cooperative(&mut fusion, &mut seg, &data, cfg, &mut log)?;
    let ck = Checkpoint::from_states(&fusion, Some(&seg));
    let checkpoint = out.join(CHECKPOINT_FILE);
    ck.save(&checkpoint)?;
    let (fusion, seg) = ck.restore()?;
    let seg = seg.expect("segmenter was saved");
    let val = data.split(Split::Val);
    let seg_rows = train::evaluate_seg(&fusion, &seg, &val, cfg.seg_input)?;
    let fusion_rows = train::evaluate_fusion(&fusion, &val)?;
    let summary = TrainSummary {
        split: "val",
        count: val.len(),
        seg: SegMetricsReport::mean(&seg_rows.into_iter().map(|r| r.1).collect::<Vec<_>>()),
        fusion: FusionMetricsReport::mean(&fusion_rows.into_iter().map(|r| r.1).collect::<Vec<_>>()),
    };
    write_atomic(&out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(RunOutput { dir: out.to_path_buf(), checkpoint, history })
}

fn same_dims(a: &GrayImage, b: &GrayImage) -> Result<()> {
    if a.dims() != b.dims() {
        let (ad, bd) = (a.dims(), b.dims());
        return Err(Error::shape("inputs", &[ad.0, ad.1], &[bd.0, bd.1]));
    }
    Ok(())
}

/// Fuses two registered images. Returns the fused image and, when the model
/// has cross-attention, a heat map of how much attention each low-band
/// token receives, upsampled to the image size and scaled to [0, 1].
pub fn fuse_images(ck: &Checkpoint, x: &GrayImage, y: &GrayImage) -> Result<(GrayImage, Option<GrayImage>)> {
    same_dims(x, y)?;
    let (fusion, _) = ck.restore()?;
    let out = fusion.fuse(x, y)?;
    let fused = GrayImage::from_tensor(&out.image)?;
    let heat = out.attention.map(|(a, _)| attention_heat(&a, x.height, x.width)).transpose()?;
    Ok((fused, heat))
}

/// Column means of a row-stochastic `[N, N]` map laid out on the low-band grid.
fn attention_heat(a: &Tensor, h: usize, w: usize) -> Result<GrayImage> {
    let n = a.shape()[0];
    let (lh, lw) = (h / 4, w / 4);
    if lh * lw != n {
        return Err(Error::shape("attention map", a.shape(), &[lh * lw, lh * lw]));
    }
    let mut col = vec![0.0; n];
    for (i, v) in a.data().iter().enumerate() {
        col[i % n] += v / n as f64;
    }
    let max = col.iter().cloned().fold(0.0, f64::max).max(1e-12);
    GrayImage::new(h, w, (0..h * w).map(|i| col[(i / w / 4) * lw + (i % w) / 4] / max).collect())
}

/// What `segment` reads.
pub enum SegSource<'a> {
    Pair(&'a GrayImage, &'a GrayImage),
    Fused(&'a GrayImage),
}

pub fn segment_image(ck: &Checkpoint, src: SegSource<'_>) -> Result<LabelMask> {
    let (fusion, seg) = ck.restore()?;
    let seg = seg.ok_or_else(|| Error::Checkpoint("checkpoint has no segmentation network".into()))?;
    let img = match src {
        SegSource::Pair(x, y) => {
            same_dims(x, y)?;
            GrayImage::from_tensor(&fusion.fuse(x, y)?.image)?
        }
        SegSource::Fused(f) => f.clone(),
    };
    seg.segment(&img)
}

fn file_id(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Fusion metrics for aligned lists of fused images and sources; writes
/// `fusion_metrics.csv` and `fusion_summary.json` to `out`.
pub fn eval_fusion(fused: &[PathBuf], m1: &[PathBuf], m2: &[PathBuf], out: &Path) -> Result<FusionMetricsReport> {
    if fused.is_empty() || fused.len() != m1.len() || fused.len() != m2.len() {
        return Err(Error::invalid("eval-fusion", "need equally many --fused, --m1 and --m2 files"));
    }
    let mut rows = Vec::with_capacity(fused.len());
    for ((f, a), b) in fused.iter().zip(m1).zip(m2) {
        let (fi, ai, bi) = (GrayImage::read_pgm(f)?, GrayImage::read_pgm(a)?, GrayImage::read_pgm(b)?);
        rows.push((file_id(f), FusionMetricsReport::compute(&fi, &ai, &bi)?));
    }
    let mean = FusionMetricsReport::mean(&rows.iter().map(|r| r.1.clone()).collect::<Vec<_>>());
    write_report(
        out,
        "fusion",
        |buf| metrics::write_fusion_csv(buf, &rows),
        &metrics::summary_json(rows.len(), &mean)?,
    )?;
    Ok(mean)
}

/// Segmentation metrics for aligned prediction and reference masks; writes
/// `seg_metrics.csv` and `seg_summary.json` to `out`.
pub fn eval_seg(pred: &[PathBuf], gt: &[PathBuf], out: &Path) -> Result<SegMetricsReport> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::invalid("eval-seg", "need equally many --pred and --ref files"));
    }
    let mut rows = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        rows.push((file_id(p), SegMetricsReport::compute(&LabelMask::read_pgm(p)?, &LabelMask::read_pgm(g)?)?));
    }
    let mean = SegMetricsReport::mean(&rows.iter().map(|r| r.1.clone()).collect::<Vec<_>>());
    write_report(out, "seg", |buf| metrics::write_seg_csv(buf, &rows), &metrics::summary_json(rows.len(), &mean)?)?;
    Ok(mean)
}

fn write_report(
    out: &Path,
    stem: &str,
    csv: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    summary: &str,
) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut buf = Vec::new();
    let csv_path = out.join(format!("{stem}_metrics.csv"));
    csv(&mut buf).map_err(|e| Error::io(&csv_path, e))?;
    write_atomic(&csv_path, &buf)?;
    write_atomic(&out.join(format!("{stem}_summary.json")), summary.as_bytes())
}
