//! Dual-stream decomposition encoder, band-wise cross-attention fusion,
//! reconstruction decoder and the two modality discriminators.

use crate::error::{Error, Result};
use crate::nn::{self, Bound, Conv, Init, LayerNorm, Linear, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Architecture of the fusion network. Flags select the ablation variants.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub channels_low: usize,
    pub channels_high: usize,
    pub inn_blocks: usize,
    pub attn_blocks: usize,
    pub d_k: usize,
    /// Patch edge for high-band cross-attention tokens.
    pub high_patch: usize,
    pub cross_attention: bool,
    pub decoder: bool,
    /// Zero-initialize the last conv of every coupling net (identity blocks).
    pub zero_init_coupling: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            channels_low: 16,
            channels_high: 16,
            inn_blocks: 2,
            attn_blocks: 2,
            d_k: 16,
            high_patch: 4,
            cross_attention: true,
            decoder: true,
            zero_init_coupling: false,
        }
    }
}

/// Encoder output for one image: low band at quarter resolution, high band at full.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePair {
    pub low: Var,
    pub high: Var,
}

/// Affine coupling block. Even blocks update the second channel half from
/// the first, odd blocks the reverse.
#[derive(Clone, Debug)]
struct Coupling {
    hidden: Conv,
    out: Conv,
    half: usize,
    update_second: bool,
}

impl Coupling {
    fn scale_shift(&self, tape: &mut Tape, p: &Bound, cond: Var) -> Result<(Var, Var)> {
        let h = self.hidden.forward(tape, p, cond)?;
        let h = tape.relu(h);
        let st = self.out.forward(tape, p, h)?;
        let raw = tape.slice(st, 0, 0, self.half)?;
        let t = tape.slice(st, 0, self.half, self.half)?;
        // Log-scale bounded to [-2, 2].
        let th = tape.tanh(raw);
        let s = tape.mul_scalar(th, 2.0);
        Ok((s, t))
    }

    fn split(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let a = tape.slice(x, 0, 0, self.half)?;
        let b = tape.slice(x, 0, self.half, self.half)?;
        Ok(if self.update_second { (a, b) } else { (b, a) })
    }

    fn join(&self, tape: &mut Tape, cond: Var, moved: Var) -> Result<Var> {
        if self.update_second {
            tape.concat(&[cond, moved], 0)
        } else {
            tape.concat(&[moved, cond], 0)
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (cond, moved) = self.split(tape, x)?;
        let (s, t) = self.scale_shift(tape, p, cond)?;
        let es = tape.exp(s);
        let scaled = tape.mul(moved, es)?;
        let moved = tape.add(scaled, t)?;
        self.join(tape, cond, moved)
    }

    fn inverse(&self, tape: &mut Tape, p: &Bound, y: Var) -> Result<Var> {
        let (cond, moved) = self.split(tape, y)?;
        let (s, t) = self.scale_shift(tape, p, cond)?;
        let shifted = tape.sub(moved, t)?;
        let ns = tape.neg(s);
        let es = tape.exp(ns);
        let moved = tape.mul(shifted, es)?;
        self.join(tape, cond, moved)
    }
}

/// Depthwise-conv token mixer followed by a pre-norm attention/MLP pair.
#[derive(Clone, Debug)]
struct LiteAttention {
    mixer_w: ParamId,
    mixer_b: ParamId,
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    norm2: LayerNorm,
    mlp_in: Linear,
    mlp_out: Linear,
}

impl LiteAttention {
    fn new(ps: &mut ParamSet, name: &str, c: usize, d_k: usize, rng: &mut Rng) -> Result<Self> {
        Ok(LiteAttention {
            mixer_w: ps.add(format!("{name}.mixer.weight"), nn::init_tensor(&[c, 1, 3, 3], 9, Init::He(0.5), rng))?,
            mixer_b: ps.add(format!("{name}.mixer.bias"), Tensor::zeros(&[c]))?,
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), c)?,
            q: Linear::new(ps, &format!("{name}.q"), c, d_k, false, Init::Lecun, rng)?,
            k: Linear::new(ps, &format!("{name}.k"), c, d_k, false, Init::Lecun, rng)?,
            v: Linear::new(ps, &format!("{name}.v"), c, c, false, Init::Lecun, rng)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), c)?,
            mlp_in: Linear::new(ps, &format!("{name}.mlp_in"), c, 2 * c, true, Init::He(1.0), rng)?,
            mlp_out: Linear::new(ps, &format!("{name}.mlp_out"), 2 * c, c, true, Init::Lecun, rng)?,
        })
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (_, h, w) = tape.value(x).chw()?;
        let mixed = tape.depthwise_conv2d(x, p.get(self.mixer_w), Some(p.get(self.mixer_b)))?;
        let x = tape.add(x, mixed)?;
        let t = nn::to_tokens(tape, x)?;
        let n = self.norm1.forward(tape, p, t)?;
        let q = self.q.forward(tape, p, n)?;
        let k = self.k.forward(tape, p, n)?;
        let v = self.v.forward(tape, p, n)?;
        let (att, _) = nn::attention(tape, q, k, v)?;
        let t = tape.add(t, att)?;
        let n = self.norm2.forward(tape, p, t)?;
        let m = self.mlp_in.forward(tape, p, n)?;
        let m = tape.relu(m);
        let m = self.mlp_out.forward(tape, p, m)?;
        let t = tape.add(t, m)?;
        nn::from_tokens(tape, t, h, w)
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    high_stem: Conv,
    couplings: Vec<Coupling>,
    low_stem: Conv,
    attn: Vec<LiteAttention>,
}

impl Encoder {
    fn new(ps: &mut ParamSet, cfg: &FusionConfig, rng: &mut Rng) -> Result<Self> {
        if !cfg.channels_high.is_multiple_of(2) {
            return Err(Error::invalid("encoder", "channels_high must be even"));
        }
        let ch = cfg.channels_high;
        let half = ch / 2;
        let last_init = if cfg.zero_init_coupling { Init::Zeros } else { Init::He(0.1) };
        let mut couplings = Vec::with_capacity(cfg.inn_blocks);
        for i in 0..cfg.inn_blocks {
            let name = format!("fusion.enc.high.inn{i}");
            couplings.push(Coupling {
                hidden: Conv::new(ps, &format!("{name}.hidden"), half, half, 3, 1, Init::He(1.0), rng)?,
                out: Conv::new(ps, &format!("{name}.out"), half, ch, 3, 1, last_init, rng)?,
                half,
                update_second: i % 2 == 0,
            });
        }
        let cl = cfg.channels_low;
        let attn = (0..cfg.attn_blocks)
            .map(|i| LiteAttention::new(ps, &format!("fusion.enc.low.attn{i}"), cl, cfg.d_k, rng))
            .collect::<Result<_>>()?;
        Ok(Encoder {
            high_stem: Conv::new(ps, "fusion.enc.high.stem", 1, ch, 3, 1, Init::He(1.0), rng)?,
            couplings,
            low_stem: Conv::new(ps, "fusion.enc.low.stem", 1, cl, 3, 1, Init::He(1.0), rng)?,
            attn,
        })
    }

    fn high(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = self.high_stem.forward(tape, p, x)?;
        for c in &self.couplings {
            h = c.forward(tape, p, h)?;
        }
        Ok(h)
    }

    fn low(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let l = self.low_stem.forward(tape, p, x)?;
        let l = tape.relu(l);
        let l = tape.avg_pool2(l)?;
        let mut l = tape.avg_pool2(l)?;
        for a in &self.attn {
            l = a.forward(tape, p, l)?;
        }
        Ok(l)
    }
}

/// Scaled dot-product cross-attention between patch tokens of two feature maps.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    channels: usize,
    patch: usize,
}

impl CrossAttention {
    /// Registers `{name}.wq`, `{name}.wk` (`[p²C, d_k]`) and `{name}.wv` (`[C, C]`).
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        channels: usize,
        patch: usize,
        d_k: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let d = channels * patch * patch;
        Ok(CrossAttention {
            wq: ps.add(format!("{name}.wq"), nn::init_tensor(&[d, d_k], d, Init::Lecun, rng))?,
            wk: ps.add(format!("{name}.wk"), nn::init_tensor(&[d, d_k], d, Init::Lecun, rng))?,
            // Per-pixel channel mix, near zero so an untrained head adds little.
            wv: ps.add(format!("{name}.wv"), nn::init_tensor(&[channels, channels], channels, Init::He(0.05), rng))?,
            channels,
            patch,
        })
    }

    /// Token form: `q_tokens`, `kv_tokens` are `[N, D]` with `D = p·p·C`,
    /// features ordered `(dy, dx, c)`. Returns `(attended [Nq, D], A [Nq, Nk])`.
    pub fn attend(&self, tape: &mut Tape, p: &Bound, q_tokens: Var, kv_tokens: Var) -> Result<(Var, Var)> {
        let (sq, skv) = (tape.shape(q_tokens).to_vec(), tape.shape(kv_tokens).to_vec());
        let d = self.channels * self.patch * self.patch;
        if sq.len() != 2 || skv.len() != 2 || sq[1] != d || skv[1] != d {
            return Err(Error::shape("cross_attention", &sq, &skv));
        }
        let q = tape.matmul(q_tokens, p.get(self.wq))?;
        let k = tape.matmul(kv_tokens, p.get(self.wk))?;
        let pix = tape.reshape(kv_tokens, &[skv[0] * self.patch * self.patch, self.channels])?;
        let v = tape.matmul(pix, p.get(self.wv))?;
        let v = tape.reshape(v, &[skv[0], d])?;
        nn::attention(tape, q, k, v)
    }

    /// `½(a + b) + ½(CA(a→b) + CA(b→a))` and both attention maps.
    fn fuse(&self, tape: &mut Tape, p: &Bound, a: Var, b: Var) -> Result<(Var, (Var, Var))> {
        let (c, h, w) = tape.value(a).chw()?;
        let ta = tape.patchify(a, self.patch)?;
        let tb = tape.patchify(b, self.patch)?;
        let (ab, att_ab) = self.attend(tape, p, ta, tb)?;
        let (ba, att_ba) = self.attend(tape, p, tb, ta)?;
        let ab = tape.unpatchify(ab, c, h, w, self.patch)?;
        let ba = tape.unpatchify(ba, c, h, w, self.patch)?;
        let s1 = tape.add(a, b)?;
        let s2 = tape.add(ab, ba)?;
        let s = tape.add(s1, s2)?;
        Ok((tape.mul_scalar(s, 0.5), (att_ab, att_ba)))
    }
}

/// How the two same-band feature maps are merged.
#[derive(Clone, Debug)]
enum BandFusion {
    Cross(CrossAttention),
    /// 1×1 conv over the channel concatenation, initialized to the average.
    Concat(Conv),
}

impl BandFusion {
    fn new(
        ps: &mut ParamSet,
        name: &str,
        cfg: &FusionConfig,
        channels: usize,
        patch: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if cfg.cross_attention {
            return Ok(BandFusion::Cross(CrossAttention::new(ps, name, channels, patch, cfg.d_k, rng)?));
        }
        let conv = Conv::new(ps, name, 2 * channels, channels, 1, 1, Init::Zeros, rng)?;
        let w = ps.value_mut(conv.w);
        for o in 0..channels {
            w.data_mut()[o * 2 * channels + o] = 0.5;
            w.data_mut()[o * 2 * channels + channels + o] = 0.5;
        }
        Ok(BandFusion::Concat(conv))
    }

    fn fuse(&self, tape: &mut Tape, p: &Bound, a: Var, b: Var) -> Result<(Var, Option<(Var, Var)>)> {
        match self {
            BandFusion::Cross(ca) => ca.fuse(tape, p, a, b).map(|(f, att)| (f, Some(att))),
            BandFusion::Concat(conv) => {
                let cat = tape.concat(&[a, b], 0)?;
                Ok((conv.forward(tape, p, cat)?, None))
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Decoder {
    Conv {
        hidden: Conv,
        out: Conv,
    },
    /// Ablation: single 1×1 projection in place of the conv stack.
    Projection(Conv),
}

/// Fusion network Φ(x, y; ω_f). Parameters live in a separate [`ParamSet`].
#[derive(Clone, Debug)]
pub struct FusionModel {
    config: FusionConfig,
    encoder: Encoder,
    fuse_low: BandFusion,
    fuse_high: BandFusion,
    decoder: Decoder,
}

/// Tape handles produced by [`FusionModel::fuse`].
#[derive(Clone, Copy, Debug)]
pub struct FusedVars {
    pub image: Var,
    pub features_x: FeaturePair,
    pub features_y: FeaturePair,
    /// Low-band attention maps (x→y, y→x) when cross-attention is enabled.
    pub attention: Option<(Var, Var)>,
}

impl FusionModel {
    /// Registers all fusion parameters (prefix `fusion.`) into `ps`.
    pub fn new(config: FusionConfig, ps: &mut ParamSet, rng: &mut Rng) -> Result<Self> {
        if config.channels_low == 0 || config.channels_high == 0 || config.high_patch == 0 {
            return Err(Error::invalid("fusion", "zero-sized configuration"));
        }
        let encoder = Encoder::new(ps, &config, rng)?;
        let fuse_low = BandFusion::new(ps, "fusion.fuse.low", &config, config.channels_low, 1, rng)?;
        let fuse_high = BandFusion::new(ps, "fusion.fuse.high", &config, config.channels_high, config.high_patch, rng)?;
        let cin = config.channels_low + config.channels_high;
        let decoder = if config.decoder {
            Decoder::Conv {
                hidden: Conv::new(ps, "fusion.dec.hidden", cin, 8, 3, 1, Init::He(1.0), rng)?,
                out: Conv::new(ps, "fusion.dec.out", 8, 1, 3, 1, Init::Lecun, rng)?,
            }
        } else {
            Decoder::Projection(Conv::new(ps, "fusion.dec.proj", cin, 1, 1, 1, Init::Lecun, rng)?)
        };
        Ok(FusionModel { config, encoder, fuse_low, fuse_high, decoder })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<(usize, usize)> {
        let (c, h, w) = tape.value(x).chw()?;
        let m = 4 * self.config.high_patch / gcd(4, self.config.high_patch);
        if c != 1 || h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::invalid(
                "encode",
                format!("expected [1, H, W] with H, W multiples of {m}, got {:?}", tape.shape(x)),
            ));
        }
        Ok((h, w))
    }

    pub fn encode(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<FeaturePair> {
        self.check_input(tape, x)?;
        Ok(FeaturePair { low: self.encoder.low(tape, p, x)?, high: self.encoder.high(tape, p, x)? })
    }

    /// Applies the invertible high-band blocks to a `[C_H, H, W]` map.
    pub fn inn_forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        self.check_inn_input(tape, x)?;
        let mut h = x;
        for c in &self.encoder.couplings {
            h = c.forward(tape, p, h)?;
        }
        Ok(h)
    }

    pub fn inn_inverse(&self, tape: &mut Tape, p: &Bound, y: Var) -> Result<Var> {
        self.check_inn_input(tape, y)?;
        let mut h = y;
        for c in self.encoder.couplings.iter().rev() {
            h = c.inverse(tape, p, h)?;
        }
        Ok(h)
    }

    fn check_inn_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let (c, _, _) = tape.value(x).chw()?;
        if c != self.config.channels_high || c % 2 != 0 {
            return Err(Error::invalid(
                "inn",
                format!("expected {} (even) channels, got {c}", self.config.channels_high),
            ));
        }
        Ok(())
    }

    pub fn decode(&self, tape: &mut Tape, p: &Bound, f: &FeaturePair) -> Result<Var> {
        let (_, hl, wl) = tape.value(f.low).chw()?;
        let (_, hh, wh) = tape.value(f.high).chw()?;
        if hl * 4 != hh || wl * 4 != wh {
            return Err(Error::shape("decode", tape.shape(f.low), tape.shape(f.high)));
        }
        let up = tape.upsample2(f.low)?;
        let up = tape.upsample2(up)?;
        let cat = tape.concat(&[up, f.high], 0)?;
        let raw = match &self.decoder {
            Decoder::Conv { hidden, out } => {
                let h = hidden.forward(tape, p, cat)?;
                let h = tape.relu(h);
                out.forward(tape, p, h)?
            }
            Decoder::Projection(proj) => proj.forward(tape, p, cat)?,
        };
        Ok(tape.sigmoid(raw))
    }

    /// Merges the two modalities band by band.
    pub fn fuse_features(
        &self,
        tape: &mut Tape,
        p: &Bound,
        fx: &FeaturePair,
        fy: &FeaturePair,
    ) -> Result<(FeaturePair, Option<(Var, Var)>)> {
        let (low, attention) = self.fuse_low.fuse(tape, p, fx.low, fy.low)?;
        let (high, _) = self.fuse_high.fuse(tape, p, fx.high, fy.high)?;
        Ok((FeaturePair { low, high }, attention))
    }

    pub fn fuse(&self, tape: &mut Tape, p: &Bound, x: Var, y: Var) -> Result<FusedVars> {
        if tape.shape(x) != tape.shape(y) {
            return Err(Error::shape("fuse", tape.shape(x), tape.shape(y)));
        }
        let fx = self.encode(tape, p, x)?;
        let fy = self.encode(tape, p, y)?;
        let (f, attention) = self.fuse_features(tape, p, &fx, &fy)?;
        let image = self.decode(tape, p, &f)?;
        Ok(FusedVars { image, features_x: fx, features_y: fy, attention })
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Fused image with optional row-stochastic attention maps.
#[derive(Clone, Debug)]
pub struct FusedImage {
    pub image: Tensor,
    pub attention: Option<(Tensor, Tensor)>,
}

/// Four-layer strided conv classifier emitting P(real).
#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: [Conv; 3],
    head: Conv,
}

impl Discriminator {
    /// `name` is a full prefix such as `disc.m1`.
    pub fn new(ps: &mut ParamSet, name: &str, rng: &mut Rng) -> Result<Self> {
        Ok(Discriminator {
            convs: [
                Conv::new(ps, &format!("{name}.conv0"), 1, 8, 3, 2, Init::He(1.0), rng)?,
                Conv::new(ps, &format!("{name}.conv1"), 8, 16, 3, 2, Init::He(1.0), rng)?,
                Conv::new(ps, &format!("{name}.conv2"), 16, 16, 3, 2, Init::He(1.0), rng)?,
            ],
            head: Conv::new(ps, &format!("{name}.head"), 16, 1, 3, 1, Init::Lecun, rng)?,
        })
    }

    /// Scalar probability in (0, 1).
    pub fn forward(&self, tape: &mut Tape, p: &Bound, img: Var) -> Result<Var> {
        let (c, h, w) = tape.value(img).chw()?;
        if c != 1 || h < 8 || w < 8 {
            return Err(Error::invalid("discriminate", format!("expected [1, H>=8, W>=8], got {:?}", tape.shape(img))));
        }
        let mut x = img;
        for conv in &self.convs {
            let y = conv.forward(tape, p, x)?;
            x = tape.relu(y);
        }
        let logits = self.head.forward(tape, p, x)?;
        let m = tape.mean(logits);
        Ok(tape.sigmoid(m))
    }
}

/// Discriminators for modality 1 and modality 2, parameters under `disc.`.
#[derive(Clone, Debug)]
pub struct Discriminators {
    pub m1: Discriminator,
    pub m2: Discriminator,
}

impl Discriminators {
    pub fn new(ps: &mut ParamSet, rng: &mut Rng) -> Result<Self> {
        Ok(Discriminators { m1: Discriminator::new(ps, "disc.m1", rng)?, m2: Discriminator::new(ps, "disc.m2", rng)? })
    }
}
