use std::path::Path;

use fusionseg::config::{step_lr, RunConfig, SegInput};
use fusionseg::Error;

const KEYS: [&str; 23] = [
    "seed",
    "patch",
    "batch",
    "epochs_pretrain",
    "epochs_fusion",
    "lr_fusion",
    "lr_step",
    "lr_seg",
    "momentum",
    "weight_decay",
    "lambda_adv",
    "sigma",
    "lambda_fuse",
    "alpha_ce",
    "beta_dice",
    "channels_low",
    "channels_high",
    "no_decoder",
    "no_adv_pretrain",
    "no_adv_coop",
    "no_cross_attention",
    "freeze_fusion",
    "seg_input",
];

#[test]
fn empty_text_gives_defaults() {
    assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    assert_eq!(RunConfig::parse("# only a comment\n\n").unwrap(), RunConfig::default());
}

#[test]
fn default_values() {
    let c = RunConfig::default();
    assert_eq!((c.patch, c.batch, c.epochs_pretrain, c.epochs_fusion), (224, 16, 80, 140));
    assert_eq!((c.lr_fusion, c.lr_seg, c.momentum), (1e-4, 0.01, 0.9));
    assert_eq!((c.lambda_adv, c.sigma, c.lambda_fuse, c.alpha_ce, c.beta_dice), (0.1, 0.5, 0.5, 0.5, 0.5));
    assert_eq!(c.seg_input, SegInput::Fused);
}

#[test]
fn echo_lists_every_key_once() {
    let text = RunConfig::default().to_text();
    let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
    assert_eq!(keys, KEYS);
}

#[test]
fn echo_parses_back_to_the_same_config() {
    let mut c = RunConfig::default();
    for (k, v) in
        [("lr_seg", "0.003"), ("weight_decay", "0"), ("freeze_fusion", "true"), ("seg_input", "m2"), ("seed", "7")]
    {
        c.set(k, v).unwrap();
    }
    assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
}

#[test]
fn unknown_keys_and_bad_values_are_rejected() {
    assert!(matches!(RunConfig::parse("learning_rate = 1"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::parse("batch = four"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::parse("no_decoder = yes"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::parse("seg_input = m3"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::parse("just words"), Err(Error::Config(_))));
}

#[test]
fn validation_rules() {
    for bad in [
        "patch = 30",
        "batch = 0",
        "channels_high = 15",
        "lr_fusion = 0",
        "lr_seg = -1",
        "momentum = 1",
        "weight_decay = -0.1",
        "sigma = 1.5",
        "lambda_adv = -1",
        "lambda_fuse = nan",
    ] {
        assert!(RunConfig::parse(bad).is_err(), "{bad} should fail");
    }
}

#[test]
fn ablation_flags_reach_the_architecture() {
    let c = RunConfig::parse("no_cross_attention = true\nno_decoder = true\nchannels_low = 8").unwrap();
    let f = c.fusion_config();
    assert!(!f.cross_attention && !f.decoder);
    assert_eq!(f.channels_low, 8);
}

#[test]
fn learning_rate_halves_every_step() {
    assert_eq!(step_lr(1e-3, 0, 20), 1e-3);
    assert_eq!(step_lr(1e-3, 19, 20), 1e-3);
    assert_eq!(step_lr(1e-3, 20, 20), 5e-4);
    assert_eq!(step_lr(1e-3, 45, 20), 2.5e-4);
}

#[test]
fn shipped_desk_config_loads() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg");
    let c = RunConfig::load(&path).unwrap();
    assert_eq!((c.seed, c.patch, c.epochs_pretrain, c.epochs_fusion), (42, 32, 10, 20));
}
