//! C ABI over `fusionseg`.
//!
//! Every entry point returns an [`FsStatus`]. On failure the message is kept
//! per thread and read back with [`fs_last_error`]. Images cross the boundary
//! as row-major `double` buffers in [0, 1]; label masks as `uint8_t` buffers.
//! A model handle is immutable after loading and may be shared between
//! threads for read-only calls.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fusionseg::checkpoint::Checkpoint;
use fusionseg::image::{GrayImage, LabelMask};
use fusionseg::metrics::{FusionMetricsReport, SegMetricsReport};
use fusionseg::train::bilevel::verify_hypergrad;
use fusionseg::train::{FusionState, SegState};
use fusionseg::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Checkpoint = 5,
    NonFinite = 6,
    Panic = 7,
    Other = 8,
}

/// A restored checkpoint: the fusion network and, if present, the segmenter.
pub struct FsModel {
    fusion: FusionState,
    seg: Option<SegState>,
}

/// Fusion quality of one fused image against its two sources.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FsFusionMetrics {
    pub en: f64,
    pub sd: f64,
    pub sf: f64,
    pub mi: f64,
    pub scd: f64,
    pub vif: f64,
    pub qabf: f64,
    pub ssim: f64,
}

/// Lesion-class segmentation quality; `hd95` is infinite when either mask
/// has no lesion.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FsSegMetrics {
    pub dice: f64,
    pub miou: f64,
    pub hd95: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(FsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } => FsStatus::Shape,
            Error::InvalidArgument { .. } | Error::Config(_) => FsStatus::InvalidArgument,
            Error::Io { .. } | Error::Image { .. } | Error::Dataset(_) => FsStatus::Io,
            Error::Checkpoint(_) => FsStatus::Checkpoint,
            Error::NonFinite(_) => FsStatus::NonFinite,
            _ => FsStatus::Other,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(FsStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(FsStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            FsStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FsStatus::Panic
        }
    }
}

fn pixel_count(height: usize, width: usize) -> Result<usize, Failure> {
    if height == 0 || width == 0 {
        return Err(invalid(format!("image size {height}x{width} is empty")));
    }
    height.checked_mul(width).ok_or_else(|| invalid("image size overflows"))
}

/// # Safety
/// `data` must be null or point to `height * width` readable doubles.
unsafe fn read_image(what: &str, data: *const f64, height: usize, width: usize) -> Result<GrayImage, Failure> {
    let n = pixel_count(height, width)?;
    if data.is_null() {
        return Err(null(what));
    }
    let px = std::slice::from_raw_parts(data, n);
    if let Some(v) = px.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(invalid(format!("{what}: intensity {v} outside [0, 1]")));
    }
    Ok(GrayImage::new(height, width, px.to_vec())?)
}

/// # Safety
/// `data` must be null or point to `height * width` readable bytes.
unsafe fn read_mask(what: &str, data: *const u8, height: usize, width: usize) -> Result<LabelMask, Failure> {
    let n = pixel_count(height, width)?;
    if data.is_null() {
        return Err(null(what));
    }
    Ok(LabelMask::new(height, width, std::slice::from_raw_parts(data, n).to_vec())?)
}

/// # Safety
/// `model` must be null or a live handle from `fs_model_load*`.
unsafe fn model_ref<'a>(model: *const FsModel) -> Result<&'a FsModel, Failure> {
    model.as_ref().ok_or_else(|| null("model"))
}

fn store_model(ck: &Checkpoint, out: *mut *mut FsModel) -> Result<(), Failure> {
    let (fusion, seg) = ck.restore()?;
    let handle = Box::into_raw(Box::new(FsModel { fusion, seg }));
    // SAFETY: the caller checked `out` for null.
    unsafe { *out = handle };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated and
/// always NUL-terminated when `len > 0`). Returns the buffer size needed to
/// hold the whole message, including the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fs_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Loads a checkpoint file and writes a new handle to `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn fs_model_load(path: *const c_char, out: *mut *mut FsModel) -> FsStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        store_model(&Checkpoint::load(Path::new(path))?, out)
    })
}

/// Loads a checkpoint from an in-memory byte buffer.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_model_load_bytes(data: *const u8, len: usize, out: *mut *mut FsModel) -> FsStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        store_model(&Checkpoint::from_bytes(std::slice::from_raw_parts(data, len))?, out)
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fs_model_free(model: *mut FsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Whether the checkpoint carried a segmentation network.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fs_model_has_segmenter(model: *const FsModel) -> bool {
    model.as_ref().is_some_and(|m| m.seg.is_some())
}

/// Fuses two registered images of `height * width` pixels into `out`.
///
/// # Safety
/// `m1`, `m2` and `out` must each hold `height * width` doubles.
#[no_mangle]
pub unsafe extern "C" fn fs_fuse(
    model: *const FsModel,
    height: usize,
    width: usize,
    m1: *const f64,
    m2: *const f64,
    out: *mut f64,
) -> FsStatus {
    guard(|| {
        let model = model_ref(model)?;
        let x = read_image("m1", m1, height, width)?;
        let y = read_image("m2", m2, height, width)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let fused = model.fusion.fuse(&x, &y)?.image;
        ptr::copy_nonoverlapping(fused.data().as_ptr(), out, x.data.len());
        Ok(())
    })
}

fn write_labels(mask: &LabelMask, out: *mut u8) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    // SAFETY: the caller guarantees `out` holds one byte per pixel.
    unsafe { ptr::copy_nonoverlapping(mask.data.as_ptr(), out, mask.data.len()) };
    Ok(())
}

fn segmenter(model: &FsModel) -> Result<&SegState, Failure> {
    model.seg.as_ref().ok_or_else(|| Failure(FsStatus::Checkpoint, "checkpoint has no segmentation network".into()))
}

/// Fuses two images and writes per-pixel labels (0 background, 1 tissue,
/// 2 lesion) to `out`.
///
/// # Safety
/// `m1` and `m2` must hold `height * width` doubles, `out` as many bytes.
#[no_mangle]
pub unsafe extern "C" fn fs_segment(
    model: *const FsModel,
    height: usize,
    width: usize,
    m1: *const f64,
    m2: *const f64,
    out: *mut u8,
) -> FsStatus {
    guard(|| {
        let model = model_ref(model)?;
        let seg = segmenter(model)?;
        let x = read_image("m1", m1, height, width)?;
        let y = read_image("m2", m2, height, width)?;
        let fused = GrayImage::from_tensor(&model.fusion.fuse(&x, &y)?.image)?;
        write_labels(&seg.segment(&fused)?, out)
    })
}

/// Segments an already fused image.
///
/// # Safety
/// `fused` must hold `height * width` doubles, `out` as many bytes.
#[no_mangle]
pub unsafe extern "C" fn fs_segment_fused(
    model: *const FsModel,
    height: usize,
    width: usize,
    fused: *const f64,
    out: *mut u8,
) -> FsStatus {
    guard(|| {
        let model = model_ref(model)?;
        let seg = segmenter(model)?;
        let img = read_image("fused", fused, height, width)?;
        write_labels(&seg.segment(&img)?, out)
    })
}

/// Reference-free and source-referenced fusion metrics.
///
/// # Safety
/// The three images must hold `height * width` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_fusion_metrics(
    height: usize,
    width: usize,
    fused: *const f64,
    m1: *const f64,
    m2: *const f64,
    out: *mut FsFusionMetrics,
) -> FsStatus {
    guard(|| {
        let f = read_image("fused", fused, height, width)?;
        let a = read_image("m1", m1, height, width)?;
        let b = read_image("m2", m2, height, width)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let r = FusionMetricsReport::compute(&f, &a, &b)?;
        *out = FsFusionMetrics {
            en: r.en,
            sd: r.sd,
            sf: r.sf,
            mi: r.mi,
            scd: r.scd,
            vif: r.vif,
            qabf: r.qabf,
            ssim: r.ssim,
        };
        Ok(())
    })
}

/// Dice, mIoU and HD95 of a predicted mask against the reference.
///
/// # Safety
/// Both masks must hold `height * width` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_seg_metrics(
    height: usize,
    width: usize,
    pred: *const u8,
    reference: *const u8,
    out: *mut FsSegMetrics,
) -> FsStatus {
    guard(|| {
        let p = read_mask("pred", pred, height, width)?;
        let g = read_mask("reference", reference, height, width)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let r = SegMetricsReport::compute(&p, &g)?;
        *out = FsSegMetrics { dice: r.dice, miou: r.miou, hd95: r.hd95 };
        Ok(())
    })
}

/// Runs the hypergradient self-check on a seeded toy problem. Writes whether
/// it passed and the relative error of the implicit gradient against the
/// closed form; either output pointer may be null.
///
/// # Safety
/// Non-null output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_verify_hypergrad(
    seed: u64,
    damping: f64,
    pass: *mut bool,
    rel_error: *mut f64,
) -> FsStatus {
    guard(|| {
        if !(damping.is_finite() && damping >= 0.0) {
            return Err(invalid(format!("damping {damping} must be finite and non-negative")));
        }
        let r = verify_hypergrad(seed, damping)?;
        if let Some(p) = pass.as_mut() {
            *p = r.pass;
        }
        if let Some(e) = rel_error.as_mut() {
            *e = r.implicit_vs_analytic.rel_error;
        }
        Ok(())
    })
}
