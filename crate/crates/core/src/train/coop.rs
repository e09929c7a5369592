use std::time::Instant;

use rand::seq::SliceRandom;

use super::chain::fusion_objective;
use super::pretrain::discriminator_pass;
use super::{check_finite, Adam, EpochRecord, FusionState, SegState, Sgd, TermMeans};
use crate::config::{RunConfig, SegInput};
use crate::data::{sample_patch, CaseRecord, Dataset, Split};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::losses;
use crate::metrics::{FusionMetricsReport, SegMetricsReport};
use crate::rng;
use crate::tensor::{Tape, Tensor};

/// Image the segmenter sees for `x`, `y` under `input`.
pub fn seg_input_image(fusion: &FusionState, x: &GrayImage, y: &GrayImage, input: SegInput) -> Result<GrayImage> {
    match input {
        SegInput::Fused => GrayImage::from_tensor(&fusion.fuse(x, y)?.image),
        SegInput::M1 => Ok(x.clone()),
        SegInput::M2 => Ok(y.clone()),
    }
}

struct StepFlags {
    train_fusion: bool,
    use_adv: bool,
    input: SegInput,
}

/// Forward and backward of the joint loss for one sample. Returns the fused
/// image when the fusion network was run.
#[allow(clippy::too_many_arguments)]
fn joint_sample(
    fusion: &mut FusionState,
    seg: &mut SegState,
    x: &GrayImage,
    y: &GrayImage,
    labels: &[u8],
    cfg: &RunConfig,
    flags: &StepFlags,
    scale: f64,
    terms: &mut TermMeans,
) -> Result<Option<Tensor>> {
    let w = cfg.loss_weights();
    let mut tape = Tape::new();
    let ps = seg.params.bind(&mut tape, true);
    let xv = tape.constant(x.to_tensor());
    let yv = tape.constant(y.to_tensor());

    let (input, fusion_bound, fused_image) = match flags.input {
        SegInput::M1 => (xv, None, None),
        SegInput::M2 => (yv, None, None),
        SegInput::Fused => {
            let p = fusion.params.bind(&mut tape, flags.train_fusion);
            let fused = fusion.model.fuse(&mut tape, &p, xv, yv)?;
            (fused.image, Some((p, fused)), Some(tape.value(fused.image).clone()))
        }
    };

    let out = seg.model.forward(&mut tape, &ps, input)?;
    let ls = losses::segmentation(&mut tape, out.probs, labels, &w)?;
    terms.add("seg", check_finite("seg", tape.value(ls).item())?);

    let loss = match &fusion_bound {
        Some((_, fused)) if flags.train_fusion => {
            let pd = fusion.disc_params.bind(&mut tape, false);
            let lf = fusion_objective(&mut tape, fusion, flags.use_adv.then_some(&pd), fused, xv, yv, &w)?;
            terms.add("adv", check_finite("adv", tape.value(lf.adv).item())?);
            terms.add("corr", check_finite("corr", tape.value(lf.corr).item())?);
            terms.add("texture", check_finite("texture", tape.value(lf.texture).item())?);
            terms.add("fusion", check_finite("fusion", tape.value(lf.total).item())?);
            losses::joint(&mut tape, ls, lf.total, w.lambda_fuse)?
        }
        _ => ls,
    };
    terms.add("total", check_finite("total", tape.value(loss).item())?);

    let g = tape.backward(loss)?;
    seg.params.accumulate(&ps, &g, scale);
    if let Some((p, _)) = &fusion_bound {
        if flags.train_fusion {
            fusion.params.accumulate(p, &g, scale);
        }
    }
    Ok(fused_image)
}

/// Joint training of fusion (Adam) and segmentation (momentum SGD) on
/// `L^s + λ_fuse·L^f`, with discriminator updates on fused vs source images.
///
/// `freeze_fusion` keeps ω_f fixed; `seg_input` other than fused trains the
/// segmenter alone on one modality.
pub fn cooperative(
    fusion: &mut FusionState,
    seg: &mut SegState,
    data: &Dataset,
    cfg: &RunConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    let train = data.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Dataset("no training cases".into()));
    }
    let val = data.split(Split::Val);
    let fused_input = cfg.seg_input == SegInput::Fused;
    let train_fusion = fused_input && !cfg.freeze_fusion;
    let flags = StepFlags {
        train_fusion,
        use_adv: train_fusion && !cfg.no_adv_coop && cfg.lambda_adv > 0.0,
        input: cfg.seg_input,
    };
    let mut opt_f = Adam::new(&fusion.params);
    let mut opt_d = Adam::new(&fusion.disc_params);
    let mut opt_s = Sgd::new(&seg.params, cfg.momentum, cfg.weight_decay);
    let mut order_rng = rng::stream(cfg.seed, "shuffle.coop");
    let mut aug_rng = rng::stream(cfg.seed, "augment.coop");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs_fusion);
    let start = Instant::now();

    if flags.use_adv {
        // The discriminators were fitted to reconstructions; refit them to
        // fused images before the generator is scored against them.
        for batch in train.chunks(cfg.batch) {
            let pairs = batch
                .iter()
                .map(|c| {
                    let (x, y) = (&c.images[0].1, &c.images[1].1);
                    let f = fusion.fuse(x, y)?.image;
                    Ok((x.to_tensor(), y.to_tensor(), f.clone(), f))
                })
                .collect::<Result<Vec<_>>>()?;
            fusion.disc_params.zero_grads();
            discriminator_pass(fusion, &pairs, &mut TermMeans::default())?;
            opt_d.step(&mut fusion.disc_params, cfg.lr_at(0))?;
        }
    }

    for epoch in 0..cfg.epochs_fusion {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut order_rng);
        let mut terms = TermMeans::default();
        for batch in order.chunks(cfg.batch) {
            fusion.params.zero_grads();
            seg.params.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            let mut pairs = Vec::new();
            for &i in batch {
                let (h, w) = train[i].dims();
                let s = sample_patch(train[i], cfg.patch.min(h).min(w), true, &mut aug_rng)?;
                let (x, y) = (&s.images[0], &s.images[1]);
                let fused = joint_sample(fusion, seg, x, y, &s.mask.data, cfg, &flags, scale, &mut terms)?;
                if let (true, Some(f)) = (flags.use_adv, fused) {
                    pairs.push((x.to_tensor(), y.to_tensor(), f.clone(), f));
                }
            }
            if let Some(name) = seg.params.first_non_finite() {
                return Err(Error::NonFinite(format!("segmentation parameter or gradient `{name}`")));
            }
            opt_s.step(&mut seg.params, cfg.lr_seg)?;
            if train_fusion {
                if let Some(name) = fusion.params.first_non_finite() {
                    return Err(Error::NonFinite(format!("fusion parameter or gradient `{name}`")));
                }
                opt_f.step(&mut fusion.params, lr)?;
            }
            if !pairs.is_empty() {
                fusion.disc_params.zero_grads();
                discriminator_pass(fusion, &pairs, &mut terms)?;
                opt_d.step(&mut fusion.disc_params, lr)?;
            }
        }
        let mut terms = terms.finish();
        if !val.is_empty() {
            let rows = evaluate_seg(fusion, seg, &val, cfg.seg_input)?;
            let mean = SegMetricsReport::mean(&rows.into_iter().map(|(_, r)| r).collect::<Vec<_>>());
            terms.insert("val_dice".into(), mean.dice);
            terms.insert("val_miou".into(), mean.miou);
        }
        let rec = EpochRecord { stage: "coop".into(), epoch, lr, terms, wall_time_s: start.elapsed().as_secs_f64() };
        on_epoch(&rec)?;
        history.push(rec);
    }
    Ok(history)
}

/// Per-case segmentation metrics on whole images.
pub fn evaluate_seg(
    fusion: &FusionState,
    seg: &SegState,
    cases: &[&CaseRecord],
    input: SegInput,
) -> Result<Vec<(String, SegMetricsReport)>> {
    cases
        .iter()
        .map(|c| {
            let img = seg_input_image(fusion, &c.images[0].1, &c.images[1].1, input)?;
            let pred = seg.segment(&img)?;
            Ok((c.case_id.clone(), SegMetricsReport::compute(&pred, &c.mask)?))
        })
        .collect()
}

/// Per-case fusion metrics of the 8-bit fused image against both sources.
pub fn evaluate_fusion(fusion: &FusionState, cases: &[&CaseRecord]) -> Result<Vec<(String, FusionMetricsReport)>> {
    cases
        .iter()
        .map(|c| {
            let (x, y) = (&c.images[0].1, &c.images[1].1);
            let f = GrayImage::from_tensor(&fusion.fuse(x, y)?.image)?;
            let q = |g: &GrayImage| GrayImage::from_u8(g.height, g.width, &g.quantized());
            Ok((c.case_id.clone(), FusionMetricsReport::compute(&q(&f)?, &q(x)?, &q(y)?)?))
        })
        .collect()
}
