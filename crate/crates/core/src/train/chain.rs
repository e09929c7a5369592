//! The joint objective and an explicit assembly of its fusion-side gradient.
//!
//! For `L = L^s(θ(ω_f), ω_s) + λ·L^f(θ(ω_f), ω_f)` the gradient w.r.t. ω_f is
//! the sum of two chains:
//!
//! * `(∂L^s/∂θ)·(∂θ/∂ω_f)`, the segmentation loss pulled back through the
//!   fused image;
//! * `λ·∂L^f/∂ω_f`, the fusion regulariser including its own paths through θ
//!   and through the encoder features.
//!
//! [`two_chain_check`] computes both chains on separate tapes and compares
//! their sum with a single backward pass of the joint loss.

use super::{flat_gradient, FusionState, SegState};
use crate::error::Result;
use crate::image::{GrayImage, LabelMask};
use crate::losses::{self, LossWeights};
use crate::models::FusedVars;
use crate::nn::Bound;
use crate::tensor::gradcheck::rel_error;
use crate::tensor::{Tape, Var};

/// Tape handles of the fusion-stage objective terms.
#[derive(Clone, Copy, Debug)]
pub struct FusionTerms {
    pub adv: Var,
    pub corr: Var,
    pub texture: Var,
    pub total: Var,
}

/// `L^f = λ_adv·adv(θ) + σ·corr + (1 − σ)·texture`.
///
/// `disc` holds the bound discriminator parameters; `None` drops the
/// adversarial term.
pub fn fusion_objective(
    tape: &mut Tape,
    state: &FusionState,
    disc: Option<&Bound>,
    fused: &FusedVars,
    x: Var,
    y: Var,
    w: &LossWeights,
) -> Result<FusionTerms> {
    let corr = losses::correlation(tape, &fused.features_x, &fused.features_y)?;
    let texture = losses::texture(tape, fused.image, x, y)?;
    let (adv, lambda_adv) = match disc {
        Some(pd) => {
            let d1 = state.discs.m1.forward(tape, pd, fused.image)?;
            let d2 = state.discs.m2.forward(tape, pd, fused.image)?;
            (losses::adv_generator(tape, d1, d2)?, w.lambda_adv)
        }
        None => (tape.scalar(0.0), 0.0),
    };
    let total = losses::weighted_total(tape, &LossWeights { lambda_adv, ..*w }, adv, corr, texture)?;
    Ok(FusionTerms { adv, corr, texture, total })
}

/// Flat ω_f gradients from the joint backward pass and from the two chains.
#[derive(Clone, Debug)]
pub struct ChainCheck {
    pub tape_grad: Vec<f64>,
    /// `(∂L^s/∂θ)·(∂θ/∂ω_f)`.
    pub seg_chain: Vec<f64>,
    /// `∂L^f/∂ω_f` (unscaled).
    pub fusion_chain: Vec<f64>,
    pub assembled: Vec<f64>,
    pub rel_error: f64,
}

/// Builds the fused image on `tape` with ω_f bound as trainable.
fn forward_fusion(
    tape: &mut Tape,
    fusion: &FusionState,
    x: &GrayImage,
    y: &GrayImage,
) -> Result<(Bound, FusedVars, Var, Var)> {
    let p = fusion.params.bind(tape, true);
    let xv = tape.constant(x.to_tensor());
    let yv = tape.constant(y.to_tensor());
    let fused = fusion.model.fuse(tape, &p, xv, yv)?;
    Ok((p, fused, xv, yv))
}

/// Compares the joint-loss gradient w.r.t. ω_f with the explicit two-chain sum.
pub fn two_chain_check(
    fusion: &FusionState,
    seg: &SegState,
    x: &GrayImage,
    y: &GrayImage,
    labels: &LabelMask,
    w: &LossWeights,
    use_adv: bool,
) -> Result<ChainCheck> {
    // Joint loss, one backward pass.
    let tape_grad = {
        let mut tape = Tape::new();
        let (p, fused, xv, yv) = forward_fusion(&mut tape, fusion, x, y)?;
        let pd = fusion.disc_params.bind(&mut tape, false);
        let ps = seg.params.bind(&mut tape, true);
        let out = seg.model.forward(&mut tape, &ps, fused.image)?;
        let ls = losses::segmentation(&mut tape, out.probs, &labels.data, w)?;
        let lf = fusion_objective(&mut tape, fusion, use_adv.then_some(&pd), &fused, xv, yv, w)?;
        let l = losses::joint(&mut tape, ls, lf.total, w.lambda_fuse)?;
        let g = tape.backward(l)?;
        flat_gradient(&fusion.params, &p, &g)
    };

    // ∂L^s/∂θ with θ as a leaf.
    let g_theta = {
        let mut tape = Tape::new();
        let (_, fused, _, _) = forward_fusion(&mut tape, fusion, x, y)?;
        let mut t2 = Tape::new();
        let tv = t2.param(tape.value(fused.image).clone());
        let ps = seg.params.bind(&mut t2, false);
        let out = seg.model.forward(&mut t2, &ps, tv)?;
        let ls = losses::segmentation(&mut t2, out.probs, &labels.data, w)?;
        let g = t2.backward(ls)?;
        g.tensor(tv)
    };

    // Vector-Jacobian product g_θᵀ·∂θ/∂ω_f via the scalar ⟨θ, g_θ⟩.
    let seg_chain = {
        let mut tape = Tape::new();
        let (p, fused, _, _) = forward_fusion(&mut tape, fusion, x, y)?;
        let gv = tape.constant(g_theta);
        let prod = tape.mul(fused.image, gv)?;
        let s = tape.sum(prod);
        let g = tape.backward(s)?;
        flat_gradient(&fusion.params, &p, &g)
    };

    let fusion_chain = {
        let mut tape = Tape::new();
        let (p, fused, xv, yv) = forward_fusion(&mut tape, fusion, x, y)?;
        let pd = fusion.disc_params.bind(&mut tape, false);
        let lf = fusion_objective(&mut tape, fusion, use_adv.then_some(&pd), &fused, xv, yv, w)?;
        let g = tape.backward(lf.total)?;
        flat_gradient(&fusion.params, &p, &g)
    };

    let assembled: Vec<f64> = seg_chain.iter().zip(&fusion_chain).map(|(a, b)| a + w.lambda_fuse * b).collect();
    let rel_error = rel_error(&tape_grad, &assembled);
    Ok(ChainCheck { tape_grad, seg_chain, fusion_chain, assembled, rel_error })
}
