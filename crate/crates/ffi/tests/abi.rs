use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use fusionseg::checkpoint::Checkpoint;
use fusionseg::data::gen_phantom_case;
use fusionseg::image::GrayImage;
use fusionseg::models::{FusionConfig, SegConfig};
use fusionseg::train::{FusionState, SegState};
use fusionseg_ffi::*;

fn last_error() -> String {
    let need = unsafe { fs_last_error(ptr::null_mut(), 0) };
    let mut buf = vec![0u8; need];
    unsafe { fs_last_error(buf.as_mut_ptr().cast(), buf.len()) };
    CStr::from_bytes_until_nul(&buf).unwrap().to_str().unwrap().to_owned()
}

fn states(with_seg: bool) -> (FusionState, Option<SegState>) {
    let f = FusionState::new(FusionConfig::default(), 4).unwrap();
    let s = with_seg.then(|| SegState::new(SegConfig::default(), 4).unwrap());
    (f, s)
}

/// Loads through the byte entry point; the returned states are the same
/// f32-rounded values the handle holds.
fn load(with_seg: bool) -> (*mut FsModel, FusionState, Option<SegState>) {
    let (f, s) = states(with_seg);
    let bytes = Checkpoint::from_states(&f, s.as_ref()).to_bytes();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { fs_model_load_bytes(bytes.as_ptr(), bytes.len(), &mut model) }, FsStatus::Ok);
    assert!(!model.is_null());
    let (f, s) = Checkpoint::from_bytes(&bytes).unwrap().restore().unwrap();
    (model, f, s)
}

fn pair() -> (GrayImage, GrayImage) {
    let case = gen_phantom_case(21, 32).unwrap();
    (case.images[0].1.clone(), case.images[1].1.clone())
}

#[test]
fn version_matches_the_package() {
    let v = unsafe { CStr::from_ptr(fs_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn fuse_and_segment_match_the_library() {
    let (model, f, s) = load(true);
    let (x, y) = pair();
    assert!(unsafe { fs_model_has_segmenter(model) });

    let mut fused = vec![0.0; 32 * 32];
    let st = unsafe { fs_fuse(model, 32, 32, x.data.as_ptr(), y.data.as_ptr(), fused.as_mut_ptr()) };
    assert_eq!(st, FsStatus::Ok, "{}", last_error());
    let want = f.fuse(&x, &y).unwrap().image;
    assert_eq!(fused.as_slice(), want.data());
    assert!(fused.iter().all(|v| (0.0..=1.0).contains(v)));

    let mut labels = vec![9u8; 32 * 32];
    assert_eq!(
        unsafe { fs_segment(model, 32, 32, x.data.as_ptr(), y.data.as_ptr(), labels.as_mut_ptr()) },
        FsStatus::Ok
    );
    let seg = s.unwrap();
    let fused_img = GrayImage::from_tensor(&want).unwrap();
    assert_eq!(labels, seg.segment(&fused_img).unwrap().data);

    let mut from_fused = vec![9u8; 32 * 32];
    assert_eq!(unsafe { fs_segment_fused(model, 32, 32, fused.as_ptr(), from_fused.as_mut_ptr()) }, FsStatus::Ok);
    assert_eq!(from_fused, labels);
    unsafe { fs_model_free(model) };
}

#[test]
fn fusion_only_checkpoint_cannot_segment() {
    let (model, _, _) = load(false);
    let (x, y) = pair();
    assert!(!unsafe { fs_model_has_segmenter(model) });
    let mut labels = vec![0u8; 32 * 32];
    let st = unsafe { fs_segment(model, 32, 32, x.data.as_ptr(), y.data.as_ptr(), labels.as_mut_ptr()) };
    assert_eq!(st, FsStatus::Checkpoint);
    assert!(last_error().contains("segmentation"));
    unsafe { fs_model_free(model) };
}

#[test]
fn bad_arguments_map_to_status_codes() {
    let (model, _, _) = load(true);
    let (x, y) = pair();
    let mut out = vec![0.0; 32 * 32];
    unsafe {
        assert_eq!(
            fs_fuse(ptr::null(), 32, 32, x.data.as_ptr(), y.data.as_ptr(), out.as_mut_ptr()),
            FsStatus::NullPointer
        );
        assert_eq!(last_error(), "model is null");
        assert_eq!(fs_fuse(model, 32, 32, x.data.as_ptr(), ptr::null(), out.as_mut_ptr()), FsStatus::NullPointer);
        assert_eq!(fs_fuse(model, 32, 32, x.data.as_ptr(), y.data.as_ptr(), ptr::null_mut()), FsStatus::NullPointer);
        assert_eq!(
            fs_fuse(model, 0, 32, x.data.as_ptr(), y.data.as_ptr(), out.as_mut_ptr()),
            FsStatus::InvalidArgument
        );

        let mut bright = x.data.clone();
        bright[5] = 1.5;
        assert_eq!(
            fs_fuse(model, 32, 32, bright.as_ptr(), y.data.as_ptr(), out.as_mut_ptr()),
            FsStatus::InvalidArgument
        );
        assert!(last_error().contains("outside [0, 1]"));

        // 30 is not a multiple of the encoder stride.
        let st = fs_fuse(model, 30, 30, x.data.as_ptr(), y.data.as_ptr(), out.as_mut_ptr());
        assert!(matches!(st, FsStatus::Shape | FsStatus::InvalidArgument), "{st:?}");

        // A successful call clears the message.
        assert_eq!(fs_fuse(model, 32, 32, x.data.as_ptr(), y.data.as_ptr(), out.as_mut_ptr()), FsStatus::Ok);
        assert_eq!(last_error(), "");
        fs_model_free(model);
        fs_model_free(ptr::null_mut());
    }
}

#[test]
fn loading_reports_io_and_checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = ptr::null_mut();
    let missing = CString::new(dir.path().join("none.f4sg").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { fs_model_load(missing.as_ptr(), &mut model) }, FsStatus::Io);
    assert!(model.is_null());

    let junk = b"F4SG not a checkpoint";
    assert_eq!(unsafe { fs_model_load_bytes(junk.as_ptr(), junk.len(), &mut model) }, FsStatus::Checkpoint);
    assert_eq!(unsafe { fs_model_load(ptr::null(), &mut model) }, FsStatus::NullPointer);

    let (f, s) = states(true);
    let path = dir.path().join("ok.f4sg");
    Checkpoint::from_states(&f, s.as_ref()).save(&path).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { fs_model_load(c.as_ptr(), &mut model) }, FsStatus::Ok);
    unsafe { fs_model_free(model) };
}

#[test]
fn error_message_is_truncated_to_the_buffer() {
    let mut model = ptr::null_mut();
    unsafe { fs_model_load(ptr::null(), &mut model) };
    let full = last_error();
    let mut small = [b'x' as std::ffi::c_char; 5];
    let need = unsafe { fs_last_error(small.as_mut_ptr(), small.len()) };
    assert_eq!(need, full.len() + 1);
    let got = unsafe { CStr::from_ptr(small.as_ptr()) }.to_str().unwrap();
    assert_eq!(got, &full[..4]);
}

#[test]
fn metrics_of_identical_inputs() {
    let (x, _) = pair();
    let mut m = FsFusionMetrics::default();
    assert_eq!(
        unsafe { fs_fusion_metrics(32, 32, x.data.as_ptr(), x.data.as_ptr(), x.data.as_ptr(), &mut m) },
        FsStatus::Ok
    );
    assert!((m.ssim - 1.0).abs() < 1e-12);
    assert!(m.qabf >= 0.99);

    let mask = gen_phantom_case(21, 32).unwrap().mask.data;
    let mut s = FsSegMetrics::default();
    assert_eq!(unsafe { fs_seg_metrics(32, 32, mask.as_ptr(), mask.as_ptr(), &mut s) }, FsStatus::Ok);
    assert_eq!((s.dice, s.miou, s.hd95), (1.0, 1.0, 0.0));

    let bad = vec![7u8; 32 * 32];
    assert_eq!(unsafe { fs_seg_metrics(32, 32, bad.as_ptr(), mask.as_ptr(), &mut s) }, FsStatus::InvalidArgument);
}

#[test]
fn hypergradient_check_through_the_abi() {
    let (mut pass, mut err) = (false, f64::NAN);
    assert_eq!(unsafe { fs_verify_hypergrad(42, 1e-3, &mut pass, &mut err) }, FsStatus::Ok);
    assert!(pass && err < 1e-4);
    assert_eq!(unsafe { fs_verify_hypergrad(42, -1.0, &mut pass, ptr::null_mut()) }, FsStatus::InvalidArgument);
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/fusionseg.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["fs_model_load", "fs_fuse", "fs_segment_fused", "fs_last_error", "FS_STATUS_PANIC"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"fusionseg.h\"\n\
         int main(void) {\n\
           FsModel *m = NULL;\n\
           FsStatus st = fs_model_load(\"x.f4sg\", &m);\n\
           FsSegMetrics s;\n\
           double px[1] = {0};\n\
           uint8_t lab[1] = {0};\n\
           st = fs_seg_metrics(1, 1, lab, lab, &s);\n\
           st = fs_fuse(m, 1, 1, px, px, px);\n\
           fs_model_free(m);\n\
           return st == FS_STATUS_OK ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let Ok(out) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler; skipping the syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
