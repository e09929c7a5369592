use fusionseg::config::{RunConfig, SegInput};
use fusionseg::data::{build_dataset, gen_phantom_case, load_dataset, Dataset, Split};
use fusionseg::metrics;
use fusionseg::models::{FusionConfig, SegConfig};
use fusionseg::nn::ParamSet;
use fusionseg::train::chain::two_chain_check;
use fusionseg::train::{self, Adam, EpochRecord, FusionState, SegState, Sgd};
use fusionseg::{Error, Tensor};

fn quadratic_params(values: &[f64]) -> ParamSet {
    let mut ps = ParamSet::new();
    ps.add("p", Tensor::new(vec![values.len()], values.to_vec()).unwrap()).unwrap();
    ps
}

/// Gradient of `Σ p²`.
fn set_quadratic_grad(ps: &mut ParamSet) {
    let id = ps.id("p").unwrap();
    let g: Vec<f64> = ps.value(id).data().iter().map(|p| 2.0 * p).collect();
    ps.zero_grads();
    let mut tape = fusionseg::Tape::new();
    let b = ps.bind(&mut tape, true);
    let sq = tape.square(b.get(id));
    let loss = tape.sum(sq);
    let grads = tape.backward(loss).unwrap();
    ps.accumulate(&b, &grads, 1.0);
    assert_eq!(ps.grad(id).data(), g.as_slice());
}

#[test]
fn adam_first_step_moves_each_coordinate_by_the_rate() {
    let mut ps = quadratic_params(&[1.0, -2.0, 0.5]);
    let mut opt = Adam::new(&ps);
    set_quadratic_grad(&mut ps);
    opt.step(&mut ps, 0.1).unwrap();
    let got = ps.value(ps.id("p").unwrap()).data().to_vec();
    for (g, want) in got.iter().zip([0.9, -1.9, 0.4]) {
        assert!((g - want).abs() < 1e-7);
    }
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut ps = quadratic_params(&[1.0, -2.0, 0.5]);
    let mut opt = Adam::new(&ps);
    for _ in 0..500 {
        set_quadratic_grad(&mut ps);
        opt.step(&mut ps, 0.05).unwrap();
    }
    assert!(ps.value(ps.id("p").unwrap()).data().iter().all(|p| p.abs() < 1e-2));
}

#[test]
fn sgd_applies_momentum_and_weight_decay() {
    let mut ps = quadratic_params(&[1.0]);
    let mut opt = Sgd::new(&ps, 0.9, 0.1);
    set_quadratic_grad(&mut ps);
    opt.step(&mut ps, 0.1).unwrap();
    // d = 2 + 0.1 = 2.1, v = 2.1, p = 1 − 0.21
    let p1 = ps.value(ps.id("p").unwrap()).data()[0];
    assert!((p1 - 0.79).abs() < 1e-12);
    set_quadratic_grad(&mut ps);
    opt.step(&mut ps, 0.1).unwrap();
    // d = 1.58 + 0.079, v = 0.9·2.1 + d
    let v = 0.9 * 2.1 + 2.0 * 0.79 + 0.1 * 0.79;
    let p2 = ps.value(ps.id("p").unwrap()).data()[0];
    assert!((p2 - (0.79 - 0.1 * v)).abs() < 1e-12);
}

#[test]
fn optimizers_reject_a_different_parameter_set() {
    let mut small = quadratic_params(&[1.0]);
    let mut big = quadratic_params(&[1.0]);
    big.add("q", Tensor::scalar(0.0)).unwrap();
    assert!(Adam::new(&big).step(&mut small, 0.1).is_err());
    assert!(Sgd::new(&big, 0.9, 0.0).step(&mut small, 0.1).is_err());
}

fn states(seed: u64) -> (FusionState, SegState) {
    (FusionState::new(FusionConfig::default(), seed).unwrap(), SegState::new(SegConfig::default(), seed).unwrap())
}

#[test]
fn joint_gradient_equals_two_chain_assembly() {
    let w = RunConfig::default().loss_weights();
    for seed in 0..5 {
        let case = gen_phantom_case(100 + seed, 32).unwrap();
        let (f, s) = states(seed);
        let (x, y) = (&case.images[0].1, &case.images[1].1);
        for use_adv in [true, false] {
            let c = two_chain_check(&f, &s, x, y, &case.mask, &w, use_adv).unwrap();
            assert!(c.rel_error < 1e-6, "seed {seed}: {}", c.rel_error);
            assert!(c.seg_chain.iter().any(|g| *g != 0.0));
            assert!(c.fusion_chain.iter().any(|g| *g != 0.0));
        }
    }
}

#[test]
fn zero_fusion_weight_leaves_only_the_segmentation_chain() {
    let mut w = RunConfig::default().loss_weights();
    w.lambda_fuse = 0.0;
    let case = gen_phantom_case(7, 32).unwrap();
    let (f, s) = states(7);
    let c = two_chain_check(&f, &s, &case.images[0].1, &case.images[1].1, &case.mask, &w, true).unwrap();
    assert!(c.rel_error < 1e-6);
    assert!(fusionseg::tensor::gradcheck::rel_error(&c.tape_grad, &c.seg_chain) < 1e-12);
}

fn small_dataset(n: usize) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(n, 5, 32, dir.path()).unwrap();
    let data = load_dataset(dir.path()).unwrap();
    (dir, data)
}

fn small_config() -> RunConfig {
    let mut c = RunConfig::parse("patch = 32\nbatch = 4\nlr_fusion = 1e-3\nlambda_adv = 0.01").unwrap();
    c.epochs_pretrain = 2;
    c.epochs_fusion = 1;
    c
}

fn no_log() -> impl FnMut(&EpochRecord) -> fusionseg::Result<()> {
    |_| Ok(())
}

#[test]
fn pretraining_is_deterministic_and_improves_reconstruction() {
    let (_dir, data) = small_dataset(20);
    let mut cfg = small_config();
    cfg.epochs_pretrain = 4;
    let val = data.split(Split::Val);
    let recon_ssim = |s: &FusionState| {
        let mut total = 0.0;
        for c in &val {
            let img = &c.images[0].1;
            total += metrics::ssim(img, &s.reconstruct(img).unwrap()).unwrap() / val.len() as f64;
        }
        total
    };
    let run = || {
        let mut s = FusionState::new(cfg.fusion_config(), cfg.seed).unwrap();
        let before = recon_ssim(&s);
        let hist = train::pretrain(&mut s, &data, &cfg, &mut no_log()).unwrap();
        (s, before, hist)
    };
    let (a, before, hist) = run();
    let (b, _, _) = run();
    assert_eq!(a.params.flat_values(), b.params.flat_values());
    assert_eq!(a.disc_params.flat_values(), b.disc_params.flat_values());
    assert_eq!(hist.len(), 4);
    assert!(hist.iter().all(|r| r.stage == "pretrain" && r.term("total").is_some_and(f64::is_finite)));
    assert!(recon_ssim(&a) - before >= 0.2, "{before} -> {}", recon_ssim(&a));
}

#[test]
fn pretraining_without_adversary_skips_the_discriminators() {
    let (_dir, data) = small_dataset(10);
    let mut cfg = small_config();
    cfg.epochs_pretrain = 1;
    cfg.no_adv_pretrain = true;
    let mut s = FusionState::new(cfg.fusion_config(), cfg.seed).unwrap();
    let before = s.disc_params.flat_values();
    let hist = train::pretrain(&mut s, &data, &cfg, &mut no_log()).unwrap();
    assert_eq!(s.disc_params.flat_values(), before);
    assert_eq!(hist[0].term("adv"), Some(0.0));
    assert!(hist[0].term("disc_bce").is_none());
}

#[test]
fn frozen_fusion_trains_only_the_segmenter() {
    let (_dir, data) = small_dataset(10);
    let mut cfg = small_config();
    cfg.freeze_fusion = true;
    let (mut f, mut s) = states(cfg.seed);
    let (f0, s0) = (f.params.flat_values(), s.params.flat_values());
    let hist = train::cooperative(&mut f, &mut s, &data, &cfg, &mut no_log()).unwrap();
    assert_eq!(f.params.flat_values(), f0);
    assert_ne!(s.params.flat_values(), s0);
    assert!(hist[0].term("fusion").is_none());
    assert!(hist[0].term("val_dice").is_some());
}

#[test]
fn cooperative_epoch_updates_both_networks_and_logs_terms() {
    let (_dir, data) = small_dataset(10);
    let cfg = small_config();
    let (mut f, mut s) = states(cfg.seed);
    let (f0, s0) = (f.params.flat_values(), s.params.flat_values());
    let mut seen = Vec::new();
    let hist = train::cooperative(&mut f, &mut s, &data, &cfg, &mut |r: &EpochRecord| {
        seen.push(r.epoch);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, [0]);
    assert_ne!(f.params.flat_values(), f0);
    assert_ne!(s.params.flat_values(), s0);
    for term in ["seg", "adv", "corr", "texture", "fusion", "total", "disc_bce"] {
        assert!(hist[0].term(term).is_some_and(f64::is_finite), "missing {term}");
    }
    let line: serde_json::Value = serde_json::from_str(&hist[0].to_json_line()).unwrap();
    assert_eq!(line["stage"], "coop");
}

#[test]
fn single_modality_baseline_leaves_fusion_untouched() {
    let (_dir, data) = small_dataset(10);
    let mut cfg = small_config();
    cfg.seg_input = SegInput::M1;
    let (mut f, mut s) = states(cfg.seed);
    let f0 = f.params.flat_values();
    train::cooperative(&mut f, &mut s, &data, &cfg, &mut no_log()).unwrap();
    assert_eq!(f.params.flat_values(), f0);
}

#[test]
fn non_finite_parameters_abort_training() {
    let (_dir, data) = small_dataset(10);
    let cfg = small_config();
    let (mut f, mut s) = states(cfg.seed);
    let id = s.params.ids().next().unwrap();
    s.params.value_mut(id).data_mut()[0] = f64::NAN;
    let err = train::cooperative(&mut f, &mut s, &data, &cfg, &mut no_log()).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
}

#[test]
fn empty_training_split_is_rejected() {
    let cfg = small_config();
    let (mut f, mut s) = states(cfg.seed);
    let empty = Dataset::default();
    assert!(train::cooperative(&mut f, &mut s, &empty, &cfg, &mut no_log()).is_err());
    assert!(train::pretrain(&mut f, &empty, &cfg, &mut no_log()).is_err());
}
