use std::time::Instant;

use rand::seq::SliceRandom;

use super::{check_finite, Adam, EpochRecord, FusionState, TermMeans};
use crate::config::RunConfig;
use crate::data::{sample_patch, Dataset, Split};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::losses;
use crate::metrics;
use crate::rng;
use crate::tensor::{Tape, Tensor};

/// Generator pass on one sample. Accumulates `1/batch`-scaled gradients
/// into ω_f and returns the reconstructions for the discriminator step.
fn generator_sample(
    state: &mut FusionState,
    x: &GrayImage,
    y: &GrayImage,
    cfg: &RunConfig,
    use_adv: bool,
    scale: f64,
    terms: &mut TermMeans,
) -> Result<(Tensor, Tensor)> {
    let w = cfg.loss_weights();
    let mut tape = Tape::new();
    let p = state.params.bind(&mut tape, true);
    let xv = tape.constant(x.to_tensor());
    let yv = tape.constant(y.to_tensor());
    let fx = state.model.encode(&mut tape, &p, xv)?;
    let fy = state.model.encode(&mut tape, &p, yv)?;
    let rx = state.model.decode(&mut tape, &p, &fx)?;
    let ry = state.model.decode(&mut tape, &p, &fy)?;

    let corr = losses::correlation(&mut tape, &fx, &fy)?;
    let cx = losses::content_pretrain(&mut tape, xv, rx)?;
    let cy = losses::content_pretrain(&mut tape, yv, ry)?;
    let content = tape.add(cx, cy)?;
    let adv = if use_adv {
        let pd = state.disc_params.bind(&mut tape, false);
        let d1 = state.discs.m1.forward(&mut tape, &pd, rx)?;
        let d2 = state.discs.m2.forward(&mut tape, &pd, ry)?;
        losses::adv_generator(&mut tape, d1, d2)?
    } else {
        tape.scalar(0.0)
    };
    let wa = losses::LossWeights { lambda_adv: if use_adv { w.lambda_adv } else { 0.0 }, ..w };
    let total = losses::weighted_total(&mut tape, &wa, adv, corr, content)?;

    terms.add("adv", check_finite("adv", tape.value(adv).item())?);
    terms.add("corr", check_finite("corr", tape.value(corr).item())?);
    terms.add("content", check_finite("content", tape.value(content).item())?);
    terms.add("total", check_finite("total", tape.value(total).item())?);

    let g = tape.backward(total)?;
    state.params.accumulate(&p, &g, scale);
    Ok((tape.value(rx).clone(), tape.value(ry).clone()))
}

/// One BCE update pass for both discriminators: real sources vs `fakes`.
pub(crate) fn discriminator_pass(
    state: &mut FusionState,
    pairs: &[(Tensor, Tensor, Tensor, Tensor)],
    terms: &mut TermMeans,
) -> Result<()> {
    let scale = 1.0 / pairs.len() as f64;
    for (x, y, fake_x, fake_y) in pairs {
        let mut tape = Tape::new();
        let p = state.disc_params.bind(&mut tape, true);
        let [x, y, fx, fy] = [x, y, fake_x, fake_y].map(|t| tape.constant(t.clone()));
        let d1r = state.discs.m1.forward(&mut tape, &p, x)?;
        let d1f = state.discs.m1.forward(&mut tape, &p, fx)?;
        let d2r = state.discs.m2.forward(&mut tape, &p, y)?;
        let d2f = state.discs.m2.forward(&mut tape, &p, fy)?;
        let b1 = losses::bce_discriminator(&mut tape, d1r, d1f)?;
        let b2 = losses::bce_discriminator(&mut tape, d2r, d2f)?;
        let loss = tape.add(b1, b2)?;
        terms.add("disc_bce", check_finite("disc_bce", tape.value(loss).item())?);
        terms.add("d_real", 0.5 * (tape.value(d1r).item() + tape.value(d2r).item()));
        terms.add("d_fake", 0.5 * (tape.value(d1f).item() + tape.value(d2f).item()));
        let g = tape.backward(loss)?;
        state.disc_params.accumulate(&p, &g, scale);
    }
    Ok(())
}

/// Trains encoder, decoder and discriminators on reconstruction.
///
/// `on_epoch` receives every record as it is produced.
pub fn pretrain(
    state: &mut FusionState,
    data: &Dataset,
    cfg: &RunConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    let train = data.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Dataset("no training cases".into()));
    }
    let val = data.split(Split::Val);
    let use_adv = !cfg.no_adv_pretrain && cfg.lambda_adv > 0.0;
    let mut opt = Adam::new(&state.params);
    let mut opt_d = Adam::new(&state.disc_params);
    let mut order_rng = rng::stream(cfg.seed, "shuffle.pretrain");
    let mut aug_rng = rng::stream(cfg.seed, "augment.pretrain");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs_pretrain);
    let start = Instant::now();

    for epoch in 0..cfg.epochs_pretrain {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut order_rng);
        let mut terms = TermMeans::default();
        for batch in order.chunks(cfg.batch) {
            state.params.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            let mut pairs = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = sample_patch(train[i], cfg.patch.min(train[i].dims().0), true, &mut aug_rng)?;
                let (rx, ry) = generator_sample(state, &s.images[0], &s.images[1], cfg, use_adv, scale, &mut terms)?;
                pairs.push((s.images[0].to_tensor(), s.images[1].to_tensor(), rx, ry));
            }
            if let Some(name) = state.params.first_non_finite() {
                return Err(Error::NonFinite(format!("fusion parameter or gradient `{name}`")));
            }
            opt.step(&mut state.params, lr)?;
            if use_adv {
                state.disc_params.zero_grads();
                discriminator_pass(state, &pairs, &mut terms)?;
                opt_d.step(&mut state.disc_params, lr)?;
            }
        }
        let mut terms = terms.finish();
        terms.extend(validate_reconstruction(state, &val)?);
        let rec =
            EpochRecord { stage: "pretrain".into(), epoch, lr, terms, wall_time_s: start.elapsed().as_secs_f64() };
        on_epoch(&rec)?;
        history.push(rec);
    }
    Ok(history)
}

/// Mean reconstruction SSIM and discriminator outputs on held-out cases.
pub(crate) fn validate_reconstruction(
    state: &FusionState,
    val: &[&crate::data::CaseRecord],
) -> Result<Vec<(String, f64)>> {
    if val.is_empty() {
        return Ok(Vec::new());
    }
    let (mut ssim, mut d_real, mut d_recon) = (0.0, 0.0, 0.0);
    let n = (2 * val.len()) as f64;
    for case in val {
        for (k, (_, img)) in case.images.iter().take(2).enumerate() {
            let r = state.reconstruct(img)?;
            ssim += metrics::ssim(img, &r)? / n;
            d_real += state.discriminate(img, k)? / n;
            d_recon += state.discriminate(&r, k)? / n;
        }
    }
    Ok(vec![("val_recon_ssim".into(), ssim), ("val_d_real".into(), d_real), ("val_d_recon".into(), d_recon)])
}
