//! U-shaped CNN with an attention bottleneck; every stage ends in a 1×1
//! adapter whose output is added back before the skip is taken.

use crate::error::{Error, Result};
use crate::nn::{self, Bound, Conv, Init, LayerNorm, Linear, ParamSet, UpConv};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct SegConfig {
    /// Encoder widths per stage; decoder mirrors them at half width.
    pub widths: [usize; 3],
    pub classes: usize,
    pub d_k: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig { widths: [16, 32, 64], classes: NUM_CLASSES, d_k: 16 }
    }
}

#[derive(Clone, Debug)]
struct Stage {
    conv: Conv,
    adapter: Conv,
}

impl Stage {
    fn new(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Stage {
            conv: Conv::new(ps, &format!("{name}.conv"), cin, cout, 3, 1, Init::He(1.0), rng)?,
            adapter: Conv::new(ps, &format!("{name}.adapter"), cout, cout, 1, 1, Init::He(0.5), rng)?,
        })
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv.forward(tape, p, x)?;
        let h = tape.relu(h);
        let a = self.adapter.forward(tape, p, h)?;
        tape.add(h, a)
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
}

#[derive(Clone, Debug)]
pub struct SegModel {
    config: SegConfig,
    down: Vec<Stage>,
    bottleneck: Bottleneck,
    ups: Vec<UpConv>,
    up_stages: Vec<Stage>,
    head: Conv,
}

/// Tape handles of a segmentation forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SegVars {
    pub logits: Var,
    pub probs: Var,
}

/// Value-level segmentation output.
#[derive(Clone, Debug)]
pub struct SegOutput {
    pub logits: Tensor,
    pub probs: Tensor,
}

impl SegModel {
    /// Registers all parameters (prefix `seg.`) into `ps`.
    pub fn new(config: SegConfig, ps: &mut ParamSet, rng: &mut Rng) -> Result<Self> {
        let [w1, w2, w3] = config.widths;
        if config.classes < 2 || w1 < 2 {
            return Err(Error::invalid("segment", "need at least two classes and two channels"));
        }
        let down = vec![
            Stage::new(ps, "seg.down0", 1, w1, rng)?,
            Stage::new(ps, "seg.down1", w1, w2, rng)?,
            Stage::new(ps, "seg.down2", w2, w3, rng)?,
        ];
        let bottleneck = Bottleneck {
            norm: LayerNorm::new(ps, "seg.mid.norm", w3)?,
            q: Linear::new(ps, "seg.mid.q", w3, config.d_k, false, Init::Lecun, rng)?,
            k: Linear::new(ps, "seg.mid.k", w3, config.d_k, false, Init::Lecun, rng)?,
            v: Linear::new(ps, "seg.mid.v", w3, w3, false, Init::Lecun, rng)?,
        };
        // Decoder stage i upsamples to the resolution of encoder stage i and
        // concatenates its skip.
        let (o2, o1, o0) = (w2, w1, w1 / 2);
        let ups = vec![
            UpConv::new(ps, "seg.up2.upsample", w3, o2, rng)?,
            UpConv::new(ps, "seg.up1.upsample", o2, o1, rng)?,
            UpConv::new(ps, "seg.up0.upsample", o1, o0, rng)?,
        ];
        let up_stages = vec![
            Stage::new(ps, "seg.up2", o2 + w3, o2, rng)?,
            Stage::new(ps, "seg.up1", o1 + w2, o1, rng)?,
            Stage::new(ps, "seg.up0", o0 + w1, o0, rng)?,
        ];
        let head = Conv::new(ps, "seg.head", o0, config.classes, 1, 1, Init::Lecun, rng)?;
        Ok(SegModel { config, down, bottleneck, ups, up_stages, head })
    }

    pub fn config(&self) -> &SegConfig {
        &self.config
    }

    /// `img` is `[1, H, W]` with H, W multiples of 8.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, img: Var) -> Result<SegVars> {
        let (c, h, w) = tape.value(img).chw()?;
        if c != 1 || h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::invalid(
                "segment",
                format!("expected [1, H, W] with H, W multiples of 8, got {:?}", tape.shape(img)),
            ));
        }
        let mut skips = Vec::with_capacity(3);
        let mut x = img;
        for stage in &self.down {
            let s = stage.forward(tape, p, x)?;
            skips.push(s);
            x = tape.max_pool2(s)?;
        }

        let (_, bh, bw) = tape.value(x).chw()?;
        let t = nn::to_tokens(tape, x)?;
        let b = &self.bottleneck;
        let n = b.norm.forward(tape, p, t)?;
        let q = b.q.forward(tape, p, n)?;
        let k = b.k.forward(tape, p, n)?;
        let v = b.v.forward(tape, p, n)?;
        let (att, _) = nn::attention(tape, q, k, v)?;
        let t = tape.add(t, att)?;
        x = nn::from_tokens(tape, t, bh, bw)?;

        for ((up, stage), skip) in self.ups.iter().zip(&self.up_stages).zip(skips.iter().rev()) {
            let u = up.forward(tape, p, x)?;
            let u = tape.relu(u);
            let cat = tape.concat(&[u, *skip], 0)?;
            x = stage.forward(tape, p, cat)?;
        }
        let logits = self.head.forward(tape, p, x)?;
        let probs = tape.softmax(logits, 0)?;
        Ok(SegVars { logits, probs })
    }

    /// Evaluates the network without recording gradients.
    pub fn segment(&self, params: &ParamSet, img: &Tensor) -> Result<SegOutput> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(img.clone());
        let out = self.forward(&mut tape, &p, x)?;
        Ok(SegOutput { logits: tape.value(out.logits).clone(), probs: tape.value(out.probs).clone() })
    }
}

/// Per-pixel argmax over the class axis of `[K, H, W]` probabilities;
/// ties go to the lower class index.
pub fn predict_mask(probs: &Tensor) -> Result<Vec<u8>> {
    let (k, h, w) = probs.chw()?;
    let plane = h * w;
    let d = probs.data();
    Ok((0..plane)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if d[c * plane + i] > d[best * plane + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect())
}
