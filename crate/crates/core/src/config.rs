//! `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::FusionConfig;

/// What the segmentation network sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegInput {
    Fused,
    /// First modality only (baseline without fusion).
    M1,
    M2,
}

impl FromStr for SegInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(SegInput::Fused),
            "m1" => Ok(SegInput::M1),
            "m2" => Ok(SegInput::M2),
            _ => Err(Error::Config(format!("seg_input must be fused, m1 or m2, got `{s}`"))),
        }
    }
}

impl SegInput {
    fn as_str(self) -> &'static str {
        match self {
            SegInput::Fused => "fused",
            SegInput::M1 => "m1",
            SegInput::M2 => "m2",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub patch: usize,
    pub batch: usize,
    pub epochs_pretrain: usize,
    pub epochs_fusion: usize,
    /// Adam rate for fusion and discriminators, halved every `lr_step` epochs.
    pub lr_fusion: f64,
    pub lr_step: usize,
    pub lr_seg: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_adv: f64,
    pub sigma: f64,
    pub lambda_fuse: f64,
    pub alpha_ce: f64,
    pub beta_dice: f64,
    pub channels_low: usize,
    pub channels_high: usize,
    pub no_decoder: bool,
    pub no_adv_pretrain: bool,
    pub no_adv_coop: bool,
    pub no_cross_attention: bool,
    pub freeze_fusion: bool,
    pub seg_input: SegInput,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        RunConfig {
            seed: 42,
            patch: 224,
            batch: 16,
            epochs_pretrain: 80,
            epochs_fusion: 140,
            lr_fusion: 1e-4,
            lr_step: 20,
            lr_seg: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda_adv: w.lambda_adv,
            sigma: w.sigma,
            lambda_fuse: w.lambda_fuse,
            alpha_ce: w.alpha_ce,
            beta_dice: w.beta_dice,
            channels_low: 16,
            channels_high: 16,
            no_decoder: false,
            no_adv_pretrain: false,
            no_adv_coop: false,
            no_cross_attention: false,
            freeze_fusion: false,
            seg_input: SegInput::Fused,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "patch" => self.patch = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "epochs_pretrain" => self.epochs_pretrain = parse(key, v)?,
            "epochs_fusion" => self.epochs_fusion = parse(key, v)?,
            "lr_fusion" => self.lr_fusion = parse(key, v)?,
            "lr_step" => self.lr_step = parse(key, v)?,
            "lr_seg" => self.lr_seg = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "lambda_adv" => self.lambda_adv = parse(key, v)?,
            "sigma" => self.sigma = parse(key, v)?,
            "lambda_fuse" => self.lambda_fuse = parse(key, v)?,
            "alpha_ce" => self.alpha_ce = parse(key, v)?,
            "beta_dice" => self.beta_dice = parse(key, v)?,
            "channels_low" => self.channels_low = parse(key, v)?,
            "channels_high" => self.channels_high = parse(key, v)?,
            "no_decoder" => self.no_decoder = parse(key, v)?,
            "no_adv_pretrain" => self.no_adv_pretrain = parse(key, v)?,
            "no_adv_coop" => self.no_adv_coop = parse(key, v)?,
            "no_cross_attention" => self.no_cross_attention = parse(key, v)?,
            "freeze_fusion" => self.freeze_fusion = parse(key, v)?,
            "seg_input" => self.seg_input = v.parse()?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch", self.patch),
            ("batch", self.batch),
            ("lr_step", self.lr_step),
            ("channels_low", self.channels_low),
            ("channels_high", self.channels_high),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        if !self.patch.is_multiple_of(8) {
            return Err(Error::Config(format!("patch {} is not a multiple of 8", self.patch)));
        }
        if !self.channels_high.is_multiple_of(2) {
            return Err(Error::Config("channels_high must be even".into()));
        }
        for (k, v) in [("lr_fusion", self.lr_fusion), ("lr_seg", self.lr_seg)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay >= 0".into()));
        }
        self.loss_weights().validate()
    }

    /// Fully resolved configuration, one key per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("patch", self.patch.to_string());
        kv("batch", self.batch.to_string());
        kv("epochs_pretrain", self.epochs_pretrain.to_string());
        kv("epochs_fusion", self.epochs_fusion.to_string());
        kv("lr_fusion", format!("{:e}", self.lr_fusion));
        kv("lr_step", self.lr_step.to_string());
        kv("lr_seg", format!("{:e}", self.lr_seg));
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", format!("{:e}", self.weight_decay));
        kv("lambda_adv", self.lambda_adv.to_string());
        kv("sigma", self.sigma.to_string());
        kv("lambda_fuse", self.lambda_fuse.to_string());
        kv("alpha_ce", self.alpha_ce.to_string());
        kv("beta_dice", self.beta_dice.to_string());
        kv("channels_low", self.channels_low.to_string());
        kv("channels_high", self.channels_high.to_string());
        kv("no_decoder", self.no_decoder.to_string());
        kv("no_adv_pretrain", self.no_adv_pretrain.to_string());
        kv("no_adv_coop", self.no_adv_coop.to_string());
        kv("no_cross_attention", self.no_cross_attention.to_string());
        kv("freeze_fusion", self.freeze_fusion.to_string());
        kv("seg_input", self.seg_input.as_str().to_string());
        s
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_adv: self.lambda_adv,
            sigma: self.sigma,
            lambda_fuse: self.lambda_fuse,
            alpha_ce: self.alpha_ce,
            beta_dice: self.beta_dice,
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            channels_low: self.channels_low,
            channels_high: self.channels_high,
            cross_attention: !self.no_cross_attention,
            decoder: !self.no_decoder,
            ..FusionConfig::default()
        }
    }

    /// Fusion learning rate at `epoch` (0-based): base · 0.5^⌊epoch / lr_step⌋.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_lr(self.lr_fusion, epoch, self.lr_step)
    }
}

pub fn step_lr(base: f64, epoch: usize, every: usize) -> f64 {
    base * 0.5f64.powi((epoch / every) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.set("lr_fusion", "3e-3").unwrap();
        c.set("no_cross_attention", "true").unwrap();
        c.set("seg_input", "m1").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_patch() {
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("patch = 30").is_err());
        assert!(RunConfig::parse("sigma = 1.5").is_err());
    }

    #[test]
    fn schedule_halves_every_step() {
        for e in 0..100 {
            assert_eq!(step_lr(1e-4, e, 20), 1e-4 * 0.5f64.powi((e / 20) as i32));
        }
        assert_eq!(step_lr(1e-4, 19, 20), 1e-4);
        assert_eq!(step_lr(1e-4, 20, 20), 5e-5);
    }
}
