//! Pre-training, cooperative training and hypergradient machinery.

pub mod bilevel;
pub mod chain;
mod coop;
pub mod optim;
mod pretrain;

use std::collections::BTreeMap;

use serde::Serialize;

pub use coop::{cooperative, evaluate_fusion, evaluate_seg, seg_input_image};
pub use optim::{Adam, Sgd};
pub use pretrain::pretrain;

use crate::error::{Error, Result};
use crate::image::{GrayImage, LabelMask};
use crate::models::{predict_mask, Discriminators, FusedImage, FusionConfig, FusionModel, SegConfig, SegModel};
use crate::nn::{Bound, ParamSet};
use crate::rng;
use crate::tensor::{Gradients, Tape};

/// Fusion network, its parameters ω_f, and the discriminators with ω_d.
#[derive(Clone, Debug)]
pub struct FusionState {
    pub model: FusionModel,
    pub params: ParamSet,
    pub discs: Discriminators,
    pub disc_params: ParamSet,
}

impl FusionState {
    pub fn new(config: FusionConfig, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let model = FusionModel::new(config, &mut params, &mut rng::stream(seed, "init.fusion"))?;
        let mut disc_params = ParamSet::new();
        let discs = Discriminators::new(&mut disc_params, &mut rng::stream(seed, "init.disc"))?;
        Ok(FusionState { model, params, discs, disc_params })
    }

    pub fn fuse(&self, x: &GrayImage, y: &GrayImage) -> Result<FusedImage> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.to_tensor());
        let yv = tape.constant(y.to_tensor());
        let out = self.model.fuse(&mut tape, &p, xv, yv)?;
        Ok(FusedImage {
            image: tape.value(out.image).map(|v| v.clamp(0.0, 1.0)),
            attention: out.attention.map(|(a, b)| (tape.value(a).clone(), tape.value(b).clone())),
        })
    }

    /// decode(encode(x)).
    pub fn reconstruct(&self, x: &GrayImage) -> Result<GrayImage> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.to_tensor());
        let f = self.model.encode(&mut tape, &p, xv)?;
        let r = self.model.decode(&mut tape, &p, &f)?;
        GrayImage::from_tensor(tape.value(r))
    }

    /// P(real) from the discriminator of modality `which` (0 or 1).
    pub fn discriminate(&self, img: &GrayImage, which: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.disc_params.bind(&mut tape, false);
        let x = tape.constant(img.to_tensor());
        let d = match which {
            0 => &self.discs.m1,
            1 => &self.discs.m2,
            _ => return Err(Error::invalid("discriminate", format!("modality index {which}"))),
        };
        let v = d.forward(&mut tape, &p, x)?;
        Ok(tape.value(v).item())
    }
}

/// Segmentation network and its parameters ω_s.
#[derive(Clone, Debug)]
pub struct SegState {
    pub model: SegModel,
    pub params: ParamSet,
}

impl SegState {
    pub fn new(config: SegConfig, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let model = SegModel::new(config, &mut params, &mut rng::stream(seed, "init.seg"))?;
        Ok(SegState { model, params })
    }

    pub fn segment(&self, img: &GrayImage) -> Result<LabelMask> {
        let out = self.model.segment(&self.params, &img.to_tensor())?;
        LabelMask::new(img.height, img.width, predict_mask(&out.probs)?)
    }
}

/// One line of the epoch log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss terms over the epoch plus validation measurements.
    pub terms: BTreeMap<String, f64>,
    pub wall_time_s: f64,
}

impl EpochRecord {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain record") + "\n"
    }
}

/// Running means of named loss terms.
#[derive(Default)]
pub(crate) struct TermMeans {
    sums: BTreeMap<String, (f64, usize)>,
}

impl TermMeans {
    pub(crate) fn add(&mut self, name: &str, v: f64) {
        let e = self.sums.entry(name.to_string()).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }

    pub(crate) fn finish(self) -> BTreeMap<String, f64> {
        self.sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }
}

pub(crate) fn check_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("loss term `{name}` is {v}")))
    }
}

/// Gradient of every parameter of `bound`, flattened in registration order.
pub fn flat_gradient(params: &ParamSet, bound: &Bound, grads: &Gradients) -> Vec<f64> {
    params
        .ids()
        .flat_map(|id| {
            let v = bound.get(id);
            match grads.get(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; params.value(id).len()],
            }
        })
        .collect()
}
