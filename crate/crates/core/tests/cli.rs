use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use fusionseg::image::{GrayImage, LabelMask};
use fusionseg::metrics;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fusionseg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Small dataset plus a one-epoch pretrain and joint run, shared by the tests.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    pre: PathBuf,
    run: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        assert_eq!(code(&run(&["gen-data", "--out", s(&data), "--cases", "10", "--seed", "3"])), 0);
        let cfg = root.join("tiny.cfg");
        fs::write(&cfg, "patch = 32\nbatch = 4\nepochs_pretrain = 1\nepochs_fusion = 1\nlambda_adv = 0.01\n").unwrap();
        let pre = root.join("pre");
        let o = run(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&pre)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let out = root.join("run");
        let init = pre.join("checkpoint.f4sg");
        let o = run(&["train", "--config", s(&cfg), "--data", s(&data), "--init", s(&init), "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        Fixture { _dir: dir, data, pre, run: out }
    })
}

fn case_file(data: &Path, case: usize, suffix: &str) -> PathBuf {
    data.join(if suffix == "mask" { "masks" } else { "images" }).join(format!("case{case:04}_{suffix}.pgm"))
}

#[test]
fn gen_data_prints_the_manifest_path_and_repeats_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = run(&["gen-data", "--out", s(&a), "--cases", "3", "--seed", "9"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).trim(), s(&a.join("manifest.json")));
    run(&["gen-data", "--out", s(&b), "--cases", "3", "--seed", "9"]);
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    assert_eq!(fs::read(case_file(&a, 2, "t1")).unwrap(), fs::read(case_file(&b, 2, "t1")).unwrap());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["gen-data", "--out", s(dir.path()), "--size", "30"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["fuse", "--ckpt", "x"])), 2);
    assert_eq!(code(&run(&["verify", "--seed", "abc"])), 2);
}

#[test]
fn io_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let none = dir.path().join("missing.f4sg");
    let img = dir.path().join("img.pgm");
    GrayImage::filled(32, 32, 0.5).write_pgm(&img).unwrap();
    assert_eq!(code(&run(&["fuse", "--ckpt", s(&none), "--m1", s(&img), "--m2", s(&img), "--out", s(&img)])), 3);
    let bad = dir.path().join("bad.f4sg");
    fs::write(&bad, b"F4SG not really a checkpoint").unwrap();
    assert_eq!(code(&run(&["segment", "--ckpt", s(&bad), "--fused", s(&img), "--out", s(&img)])), 3);
    assert_eq!(code(&run(&["pretrain", "--data", s(dir.path()), "--out", s(&dir.path().join("o"))])), 3);
}

#[test]
fn verify_passes_by_default_and_fails_with_heavy_damping() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let o = run(&["verify", "--seed", "42", "--out", s(&report)]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["pass"], true);
    assert_eq!(fs::read_to_string(&report).unwrap().trim(), stdout(&o).trim());
    assert_eq!(code(&run(&["verify", "--damping", "1e6"])), 1);
}

#[test]
fn runs_leave_config_log_summary_and_checkpoint() {
    let f = fixture();
    for dir in [&f.pre, &f.run] {
        for name in ["config.txt", "epochs.jsonl", "summary.json", "checkpoint.f4sg"] {
            assert!(dir.join(name).is_file(), "{} missing in {}", name, dir.display());
        }
    }
    let echo = fs::read_to_string(f.run.join("config.txt")).unwrap();
    assert!(echo.contains("epochs_fusion = 1") && echo.contains("lambda_fuse = 0.5"));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.run.join("summary.json")).unwrap()).unwrap();
    assert!(summary["seg"]["dice"].is_number() && summary["fusion"]["qabf"].is_number());
    let log = fs::read_to_string(f.run.join("epochs.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn train_needs_an_init_checkpoint_and_valid_overrides() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    assert_eq!(code(&run(&["train", "--data", s(&f.data), "--out", out])), 2);
    assert_eq!(code(&run(&["pretrain", "--data", s(&f.data), "--out", out, "--set", "bogus=1"])), 2);
    assert_eq!(code(&run(&["pretrain", "--data", s(&f.data), "--out", out, "--set", "epochs_pretrain"])), 2);
}

#[test]
fn fuse_keeps_dimensions_and_exports_attention() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (out, heat) = (dir.path().join("f.pgm"), dir.path().join("a.pgm"));
    let (m1, m2) = (case_file(&f.data, 0, "t1"), case_file(&f.data, 0, "t2"));
    let ck = f.run.join("checkpoint.f4sg");
    let o = run(&["fuse", "--ckpt", s(&ck), "--m1", s(&m1), "--m2", s(&m2), "--out", s(&out), "--attn-out", s(&heat)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(GrayImage::read_pgm(&out).unwrap().dims(), (32, 32));
    let h = GrayImage::read_pgm(&heat).unwrap();
    assert_eq!(h.dims(), (32, 32));
    assert!(h.data.contains(&1.0));

    let small = dir.path().join("small.pgm");
    GrayImage::filled(16, 16, 0.2).write_pgm(&small).unwrap();
    assert_eq!(code(&run(&["fuse", "--ckpt", s(&ck), "--m1", s(&m1), "--m2", s(&small), "--out", s(&out)])), 2);
}

#[test]
fn segment_outputs_valid_labels_deterministically() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ck = f.run.join("checkpoint.f4sg");
    let (m1, m2) = (case_file(&f.data, 1, "t1"), case_file(&f.data, 1, "t2"));
    let (a, b, fused, c) =
        (dir.path().join("a.pgm"), dir.path().join("b.pgm"), dir.path().join("f.pgm"), dir.path().join("c.pgm"));
    for out in [&a, &b] {
        assert_eq!(code(&run(&["segment", "--ckpt", s(&ck), "--m1", s(&m1), "--m2", s(&m2), "--out", s(out)])), 0);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(LabelMask::read_pgm(&a).unwrap().data.iter().all(|&l| l <= 2));

    // The fused route matches the pair route up to 8-bit quantization of the fused file.
    run(&["fuse", "--ckpt", s(&ck), "--m1", s(&m1), "--m2", s(&m2), "--out", s(&fused)]);
    assert_eq!(code(&run(&["segment", "--ckpt", s(&ck), "--fused", s(&fused), "--out", s(&c)])), 0);
    let (pa, pc) = (LabelMask::read_pgm(&a).unwrap(), LabelMask::read_pgm(&c).unwrap());
    let differ = pa.data.iter().zip(&pc.data).filter(|(x, y)| x != y).count();
    assert!(differ * 100 <= pa.data.len(), "{differ} labels differ");

    // A pretrain checkpoint has no segmenter.
    let pre = f.pre.join("checkpoint.f4sg");
    assert_eq!(code(&run(&["segment", "--ckpt", s(&pre), "--fused", s(&fused), "--out", s(&c)])), 3);
}

#[test]
fn eval_seg_of_identical_masks_is_perfect() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mask = case_file(&f.data, 0, "mask");
    let o = run(&["eval-seg", "--pred", s(&mask), "--ref", s(&mask), "--out", s(dir.path())]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(dir.path().join("seg_metrics.csv")).unwrap();
    assert_eq!(csv, "id,Dice,mIoU,HD95\ncase0000_mask,1.000000,1.000000,0.000000\n");
    assert!(dir.path().join("seg_summary.json").is_file());
    assert_eq!(code(&run(&["eval-seg", "--pred", s(&mask), s(&mask), "--ref", s(&mask), "--out", s(dir.path())])), 2);
}

#[test]
fn eval_fusion_of_a_source_against_itself() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let img = case_file(&f.data, 0, "t1");
    let o = run(&["eval-fusion", "--fused", s(&img), "--m1", s(&img), "--m2", s(&img), "--out", s(dir.path())]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(dir.path().join("fusion_metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "id,EN,SD,SF,MI,SCD,VIF,Qabf,SSIM");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[8], "1.000000");
    let mean: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((mean["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn shipped_pretrained_fusion_preserves_a_self_fused_image() {
    let ck = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/demo_pretrain.f4sg");
    let dir = tempfile::tempdir().unwrap();
    let case = fusionseg::data::gen_phantom_case(77, 32).unwrap();
    let x = &case.images[1].1;
    let (src, out) = (dir.path().join("x.pgm"), dir.path().join("f.pgm"));
    x.write_pgm(&src).unwrap();
    assert_eq!(code(&run(&["fuse", "--ckpt", s(&ck), "--m1", s(&src), "--m2", s(&src), "--out", s(&out)])), 0);
    let x = GrayImage::read_pgm(&src).unwrap();
    let ssim = metrics::ssim(&GrayImage::read_pgm(&out).unwrap(), &x).unwrap();
    assert!(ssim > 0.85, "SSIM {ssim}");
}

#[test]
fn shipped_joint_checkpoint_segments_a_fresh_case() {
    let ck = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/demo.f4sg");
    let dir = tempfile::tempdir().unwrap();
    let case = fusionseg::data::gen_phantom_case(78, 32).unwrap();
    let (m1, m2, out) = (dir.path().join("m1.pgm"), dir.path().join("m2.pgm"), dir.path().join("s.pgm"));
    case.images[0].1.write_pgm(&m1).unwrap();
    case.images[1].1.write_pgm(&m2).unwrap();
    assert_eq!(code(&run(&["segment", "--ckpt", s(&ck), "--m1", s(&m1), "--m2", s(&m2), "--out", s(&out)])), 0);
    let pred = LabelMask::read_pgm(&out).unwrap();
    let dice = metrics::dice(&pred, &case.mask, metrics::LESION).unwrap();
    assert!(dice > 0.8, "Dice {dice}");
}
