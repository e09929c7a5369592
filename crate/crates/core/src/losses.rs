//! Training objectives, all recorded on a [`Tape`].

use crate::error::{Error, Result};
use crate::models::FeaturePair;
use crate::tensor::{Tape, Tensor, Var, GUARD};

/// Offset in the correlation-decomposition denominator; keeps it positive
/// for every low-band correlation in [-1, 1].
pub const CORR_EPS: f64 = 1.01;

/// Soft Dice smoothing.
pub const DICE_SMOOTH: f64 = 1e-5;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_adv: f64,
    /// Split between correlation (σ) and content (1 − σ) terms.
    pub sigma: f64,
    pub lambda_fuse: f64,
    pub alpha_ce: f64,
    pub beta_dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_adv: 0.1, sigma: 0.5, lambda_fuse: 0.5, alpha_ce: 0.5, beta_dice: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_adv, self.sigma, self.lambda_fuse, self.alpha_ce, self.beta_dice];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) || self.sigma > 1.0 {
            return Err(Error::Config(format!("loss weights out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Mean over channels of the per-channel Pearson correlation.
pub fn cc(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let r = tape.pearson_channels(a, b)?;
    Ok(tape.mean(r))
}

/// `CC(high_x, high_y)² / (CC(low_x, low_y) + 1.01)`.
pub fn correlation(tape: &mut Tape, fx: &FeaturePair, fy: &FeaturePair) -> Result<Var> {
    let ch = cc(tape, fx.high, fy.high)?;
    let cl = cc(tape, fx.low, fy.low)?;
    correlation_from_cc(tape, ch, cl)
}

pub fn correlation_from_cc(tape: &mut Tape, cc_high: Var, cc_low: Var) -> Result<Var> {
    let num = tape.square(cc_high);
    let den = tape.add_scalar(cc_low, CORR_EPS);
    tape.div(num, den)
}

/// Generator side of the adversarial game: `log(1 − D₁) + log(1 − D₂)`.
pub fn adv_generator(tape: &mut Tape, d1: Var, d2: Var) -> Result<Var> {
    let l1 = log_one_minus(tape, d1);
    let l2 = log_one_minus(tape, d2);
    tape.add(l1, l2)
}

/// Discriminator BCE: `−log D(real) − log(1 − D(fake))`.
pub fn bce_discriminator(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<Var> {
    let lr = tape.log(d_real);
    let lf = log_one_minus(tape, d_fake);
    let s = tape.add(lr, lf)?;
    Ok(tape.neg(s))
}

fn log_one_minus(tape: &mut Tape, p: Var) -> Var {
    let n = tape.neg(p);
    let q = tape.add_scalar(n, 1.0);
    tape.log(q)
}

/// Mean SSIM over valid windows (11×11 Gaussian, σ = 1.5, range 1).
pub fn ssim(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape("ssim", tape.shape(a), tape.shape(b)));
    }
    let (c, _, _) = tape.value(a).chw()?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let stack = tape.concat(&[a, b, aa, bb, ab], 0)?;
    let blurred = tape.gaussian_blur(stack, SSIM_WINDOW, SSIM_SIGMA, true)?;
    let plane = |tape: &mut Tape, i: usize| tape.slice(blurred, 0, i * c, c);
    let (mu_a, mu_b) = (plane(tape, 0)?, plane(tape, 1)?);
    let (e_aa, e_bb, e_ab) = (plane(tape, 2)?, plane(tape, 3)?, plane(tape, 4)?);

    let mu_ab = tape.mul(mu_a, mu_b)?;
    let mu_aa = tape.mul(mu_a, mu_a)?;
    let mu_bb = tape.mul(mu_b, mu_b)?;
    let var_a = tape.sub(e_aa, mu_aa)?;
    let var_b = tape.sub(e_bb, mu_bb)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let t = tape.mul_scalar(mu_ab, 2.0);
    let n1 = tape.add_scalar(t, SSIM_C1);
    let t = tape.mul_scalar(cov, 2.0);
    let n2 = tape.add_scalar(t, SSIM_C2);
    let t = tape.add(mu_aa, mu_bb)?;
    let d1 = tape.add_scalar(t, SSIM_C1);
    let t = tape.add(var_a, var_b)?;
    let d2 = tape.add_scalar(t, SSIM_C2);
    let num = tape.mul(n1, n2)?;
    let den = tape.mul(d1, d2)?;
    let map = tape.div(num, den)?;
    Ok(tape.mean(map))
}

/// `‖x − recon‖² / N + (1 − SSIM(x, recon))`.
pub fn content_pretrain(tape: &mut Tape, x: Var, recon: Var) -> Result<Var> {
    let d = tape.sub(x, recon)?;
    let sq = tape.square(d);
    let mse = tape.mean(sq);
    let s = ssim(tape, x, recon)?;
    let ns = tape.neg(s);
    let one_minus = tape.add_scalar(ns, 1.0);
    tape.add(mse, one_minus)
}

/// `λ_adv·adv + σ·corr + (1 − σ)·content`; also the fusion-stage total with
/// the texture loss in the content slot.
pub fn weighted_total(tape: &mut Tape, w: &LossWeights, adv: Var, corr: Var, content: Var) -> Result<Var> {
    let a = tape.mul_scalar(adv, w.lambda_adv);
    let c = tape.mul_scalar(corr, w.sigma);
    let t = tape.mul_scalar(content, 1.0 - w.sigma);
    let s = tape.add(a, c)?;
    tape.add(s, t)
}

/// Mean absolute gap between the fused gradient magnitude and the stronger
/// source gradient magnitude (Sobel, L1 form).
pub fn texture(tape: &mut Tape, fused: Var, x: Var, y: Var) -> Result<Var> {
    if tape.shape(fused) != tape.shape(x) || tape.shape(x) != tape.shape(y) {
        return Err(Error::shape("texture", tape.shape(fused), tape.shape(x)));
    }
    let gf = tape.sobel_mag(fused)?;
    let gx = tape.sobel_mag(x)?;
    let gy = tape.sobel_mag(y)?;
    let gmax = tape.maximum(gx, gy)?;
    let d = tape.sub(gf, gmax)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// `α·CE + β·(1 − mean soft Dice)` for `[K, H, W]` probabilities and a label mask.
pub fn segmentation(tape: &mut Tape, probs: Var, labels: &[u8], w: &LossWeights) -> Result<Var> {
    let (k, h, wd) = tape.value(probs).chw()?;
    let plane = h * wd;
    if labels.len() != plane {
        return Err(Error::shape("segmentation loss", &[labels.len()], &[h, wd]));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::invalid("segmentation loss", format!("label {bad} outside [0, {k})")));
    }
    let onehot = Tensor::from_fn(&[k, h, wd], |i| f64::from(labels[i % plane] as usize == i / plane));
    let g = tape.constant(onehot);

    // Cross-entropy: −mean log p[label].
    let pg = tape.mul(probs, g)?;
    let p_true = tape.sum_axis(pg, 0)?;
    let logp = tape.log(p_true);
    let m = tape.mean(logp);
    let ce = tape.neg(m);

    // Soft Dice per class, summed over the spatial axes.
    let flat_p = tape.reshape(probs, &[k, plane])?;
    let flat_pg = tape.reshape(pg, &[k, plane])?;
    let inter = tape.sum_axis(flat_pg, 1)?;
    let psum = tape.sum_axis(flat_p, 1)?;
    let gsum_vals: Vec<f64> = (0..k).map(|c| labels.iter().filter(|&&l| l as usize == c).count() as f64).collect();
    let gsum = tape.constant(Tensor::new(vec![k], gsum_vals)?);
    let i2 = tape.mul_scalar(inter, 2.0);
    let num = tape.add_scalar(i2, DICE_SMOOTH);
    let ds = tape.add(psum, gsum)?;
    let den = tape.add_scalar(ds, DICE_SMOOTH);
    let dice = tape.div(num, den)?;
    let md = tape.mean(dice);
    let nd = tape.neg(md);
    let dice_loss = tape.add_scalar(nd, 1.0);

    let a = tape.mul_scalar(ce, w.alpha_ce);
    let b = tape.mul_scalar(dice_loss, w.beta_dice);
    tape.add(a, b)
}

/// `L^s + λ_fuse·L^f`.
pub fn joint(tape: &mut Tape, seg: Var, fusion: Var, lambda_fuse: f64) -> Result<Var> {
    let f = tape.mul_scalar(fusion, lambda_fuse);
    tape.add(seg, f)
}

/// Smallest value [`adv_generator`] can reach per term.
pub fn log_guard_floor() -> f64 {
    GUARD.ln()
}
