use fusionseg::models::{predict_mask, CrossAttention, Discriminators, FusionConfig, FusionModel, SegConfig, SegModel};
use fusionseg::nn::ParamSet;
use fusionseg::rng::{self, Rng};
use fusionseg::{Tape, Tensor};
use rand::Rng as _;

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen::<f64>())
}

fn fusion(config: FusionConfig, seed: u64) -> (FusionModel, ParamSet) {
    let mut ps = ParamSet::new();
    let m = FusionModel::new(config, &mut ps, &mut rng::stream(seed, "test.fusion")).unwrap();
    (m, ps)
}

fn seg_model(seed: u64) -> (SegModel, ParamSet) {
    let mut ps = ParamSet::new();
    let m = SegModel::new(SegConfig::default(), &mut ps, &mut rng::stream(seed, "test.seg")).unwrap();
    (m, ps)
}

#[test]
fn encoder_band_shapes_follow_config() {
    let (m, ps) = fusion(FusionConfig::default(), 1);
    let mut tape = Tape::new();
    let p = ps.bind(&mut tape, false);
    let x = tape.constant(random(&[1, 32, 32], &mut rng::stream(1, "x")));
    let f = m.encode(&mut tape, &p, x).unwrap();
    assert_eq!(tape.shape(f.low), &[16, 8, 8]);
    assert_eq!(tape.shape(f.high), &[16, 32, 32]);
}

#[test]
fn encode_is_deterministic_and_rejects_bad_sizes() {
    let (m, ps) = fusion(FusionConfig::default(), 2);
    let img = random(&[1, 16, 16], &mut rng::stream(2, "x"));
    let run = || {
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape, false);
        let x = tape.constant(img.clone());
        let f = m.encode(&mut tape, &p, x).unwrap();
        (tape.value(f.low).clone(), tape.value(f.high).clone())
    };
    assert_eq!(run(), run());

    let mut tape = Tape::new();
    let p = ps.bind(&mut tape, false);
    let bad = tape.constant(Tensor::zeros(&[1, 30, 30]));
    assert!(m.encode(&mut tape, &p, bad).is_err());
}

#[test]
fn zero_image_encodes_to_finite_features() {
    let (m, ps) = fusion(FusionConfig::default(), 3);
    let mut tape = Tape::new();
    let p = ps.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros(&[1, 16, 16]));
    let f = m.encode(&mut tape, &p, x).unwrap();
    assert!(tape.value(f.low).is_finite() && tape.value(f.high).is_finite());
}

#[test]
fn zero_initialized_couplings_are_identity() {
    let cfg = FusionConfig { zero_init_coupling: true, ..FusionConfig::default() };
    let (m, ps) = fusion(cfg, 4);
    let x = random(&[16, 8, 8], &mut rng::stream(4, "x"));
    let mut tape = Tape::new();
    let p = ps.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = m.inn_forward(&mut tape, &p, xv).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn coupling_stacks_round_trip_for_one_to_four_blocks() {
    for blocks in 1..=4 {
        let (m, ps) = fusion(FusionConfig { inn_blocks: blocks, ..FusionConfig::default() }, 10 + blocks as u64);
        let mut r = rng::stream(blocks as u64, "x");
        for _ in 0..5 {
            let x = Tensor::from_fn(&[16, 8, 8], |_| r.gen_range(-2.0..2.0));
            let mut tape = Tape::new();
            let p = ps.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let y = m.inn_forward(&mut tape, &p, xv).unwrap();
            assert!(tape.value(y).max_abs_diff(&x) > 1e-3, "blocks must not be the identity");
            let back = m.inn_inverse(&mut tape, &p, y).unwrap();
            assert!(tape.value(back).max_abs_diff(&x) < 1e-8);
        }
    }
}

#[test]
fn inn_rejects_odd_channels() {
    let (m, ps) = fusion(FusionConfig::default(), 5);
    let mut tape = Tape::new();
    let p = ps.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros(&[15, 8, 8]));
    assert!(m.inn_forward(&mut tape, &p, x).is_err());
    assert!(FusionModel::new(
        FusionConfig { channels_high: 15, ..FusionConfig::default() },
        &mut ParamSet::new(),
        &mut rng::stream(0, "x")
    )
    .is_err());
}

#[test]
fn decode_output_lies_in_unit_interval_and_checks_bands() {
    let (m, ps) = fusion(FusionConfig::default(), 6);
    let mut tape = Tape::new();
    let p = ps.bind(&mut tape, false);
    let x = tape.constant(Tensor::from_fn(&[1, 16, 16], |i| (i as f64 * 0.7).sin() * 40.0));
    let f = m.encode(&mut tape, &p, x).unwrap();
    let r = m.decode(&mut tape, &p, &f).unwrap();
    assert_eq!(tape.shape(r), &[1, 16, 16]);
    assert!(tape.value(r).data().iter().all(|v| (0.0..=1.0).contains(v)));

    let other = tape.constant(Tensor::zeros(&[16, 8, 8]));
    let bad = fusionseg::models::FeaturePair { low: f.low, high: other };
    assert!(m.decode(&mut tape, &p, &bad).is_err());
}

fn cross(channels: usize, patch: usize) -> (CrossAttention, ParamSet) {
    let mut ps = ParamSet::new();
    let ca = CrossAttention::new(&mut ps, "ca", channels, patch, 8, &mut rng::stream(7, "ca")).unwrap();
    (ca, ps)
}

/// Per-pixel channel mix of one `(dy, dx, c)` token by `wv`.
fn mix(token: &[f64], wv: &Tensor, c: usize) -> Vec<f64> {
    let w = wv.data();
    token.chunks(c).flat_map(|px| (0..c).map(move |o| (0..c).map(|i| px[i] * w[i * c + o]).sum::<f64>())).collect()
}

#[test]
fn constant_keys_give_uniform_rows_and_mean_values() {
    let (c, patch) = (3, 2);
    let d = c * patch * patch;
    let (ca, mut ps) = cross(c, patch);
    ps.assign("ca.wk", Tensor::zeros(&[d, 8])).unwrap();
    let mut r = rng::stream(8, "tok");
    let q = random(&[3, d], &mut r);
    let kv = random(&[4, d], &mut r);
    let mut tape = Tape::new();
    let p = ps.bind(&mut tape, false);
    let (qv, kvv) = (tape.constant(q), tape.constant(kv.clone()));
    let (out, a) = ca.attend(&mut tape, &p, qv, kvv).unwrap();
    assert!(tape.value(a).data().iter().all(|v| (v - 0.25).abs() < 1e-12));
    let mean: Vec<f64> = (0..d).map(|j| (0..4).map(|i| kv.data()[i * d + j]).sum::<f64>() / 4.0).collect();
    let expect = mix(&mean, ps.value(ps.id("ca.wv").unwrap()), c);
    for row in tape.value(out).data().chunks(d) {
        for (a, b) in row.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn permuting_kv_tokens_permutes_columns_only() {
    let (c, patch) = (2, 2);
    let d = c * patch * patch;
    let (ca, ps) = cross(c, patch);
    let mut r = rng::stream(9, "tok");
    let q = random(&[4, d], &mut r);
    let kv = random(&[4, d], &mut r);
    let perm = [2usize, 0, 3, 1];
    let kv_p = Tensor::from_fn(&[4, d], |i| kv.data()[perm[i / d] * d + i % d]);
    let run = |kv: Tensor| {
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape, false);
        let (qv, kvv) = (tape.constant(q.clone()), tape.constant(kv));
        let (out, a) = ca.attend(&mut tape, &p, qv, kvv).unwrap();
        (tape.value(out).clone(), tape.value(a).clone())
    };
    let (o1, a1) = run(kv);
    let (o2, a2) = run(kv_p);
    assert!(o1.max_abs_diff(&o2) < 1e-12);
    for row in 0..4 {
        for (j, &src) in perm.iter().enumerate() {
            assert!((a2.data()[row * 4 + j] - a1.data()[row * 4 + src]).abs() < 1e-12);
        }
        let s: f64 = a1.data()[row * 4..row * 4 + 4].iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn cross_attention_rejects_mismatched_dims() {
    let (ca, ps) = cross(2, 2);
    let mut tape = Tape::new();
    let p = ps.bind(&mut tape, false);
    let q = tape.constant(Tensor::zeros(&[3, 8]));
    let kv = tape.constant(Tensor::zeros(&[3, 6]));
    assert!(ca.attend(&mut tape, &p, q, kv).is_err());
}

#[test]
fn fuse_keeps_shape_range_and_stochastic_attention_in_both_orders() {
    let (m, ps) = fusion(FusionConfig::default(), 11);
    let mut r = rng::stream(11, "x");
    let (x, y) = (random(&[1, 16, 16], &mut r), random(&[1, 16, 16], &mut r));
    for (a, b) in [(&x, &y), (&y, &x)] {
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape, false);
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let out = m.fuse(&mut tape, &p, av, bv).unwrap();
        assert_eq!(tape.shape(out.image), &[1, 16, 16]);
        assert!(tape.value(out.image).data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (ab, ba) = out.attention.unwrap();
        for att in [ab, ba] {
            let t = tape.value(att);
            let n = t.shape()[1];
            for row in t.data().chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn cross_attention_without_value_mix_passes_the_band_average() {
    let (m, mut ps) = fusion(FusionConfig::default(), 13);
    for name in ["fusion.fuse.low.wv", "fusion.fuse.high.wv"] {
        let id = ps.id(name).unwrap();
        ps.value_mut(id).data_mut().fill(0.0);
    }
    let mut r = rng::stream(13, "x");
    let (x, y) = (random(&[1, 16, 16], &mut r), random(&[1, 16, 16], &mut r));
    let mut tape = Tape::new();
    let p = ps.bind(&mut tape, false);
    let (xv, yv) = (tape.constant(x), tape.constant(y));
    let (fx, fy) = (m.encode(&mut tape, &p, xv).unwrap(), m.encode(&mut tape, &p, yv).unwrap());
    let (fused, _) = m.fuse_features(&mut tape, &p, &fx, &fy).unwrap();
    for (f, a, b) in [(fused.low, fx.low, fy.low), (fused.high, fx.high, fy.high)] {
        let (a, b) = (tape.value(a).data(), tape.value(b).data());
        let want: Vec<f64> = a.iter().zip(b).map(|(u, v)| 0.5 * (u + v)).collect();
        let got = tape.value(f).data();
        assert!(got.iter().zip(&want).all(|(g, w)| (g - w).abs() < 1e-12));
    }
}

#[test]
fn fuse_rejects_mismatched_inputs() {
    let (m, ps) = fusion(FusionConfig::default(), 12);
    let mut tape = Tape::new();
    let p = ps.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros(&[1, 16, 16]));
    let y = tape.constant(Tensor::zeros(&[1, 16, 24]));
    assert!(m.fuse(&mut tape, &p, x, y).is_err());
}

#[test]
fn every_fusion_parameter_receives_gradient() {
    let variants = [
        FusionConfig::default(),
        FusionConfig { cross_attention: false, ..FusionConfig::default() },
        FusionConfig { decoder: false, ..FusionConfig::default() },
    ];
    for (k, cfg) in variants.into_iter().enumerate() {
        let (m, ps) = fusion(cfg, 20 + k as u64);
        let mut r = rng::stream(k as u64, "x");
        let (x, y) = (random(&[1, 16, 16], &mut r), random(&[1, 16, 16], &mut r));
        let w = Tensor::from_fn(&[1, 16, 16], |_| r.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape, true);
        let (xv, yv, wv) = (tape.constant(x), tape.constant(y), tape.constant(w));
        let out = m.fuse(&mut tape, &p, xv, yv).unwrap();
        let prod = tape.mul(out.image, wv).unwrap();
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap();
        for id in ps.ids() {
            let gi = g.get(p.get(id)).unwrap_or(&[]);
            assert!(gi.iter().any(|v| *v != 0.0), "variant {k}: no gradient reaches {}", ps.name(id));
        }
    }
}

#[test]
fn discriminator_outputs_probabilities_deterministically() {
    let mut ps = ParamSet::new();
    let d = Discriminators::new(&mut ps, &mut rng::stream(13, "d")).unwrap();
    let mut r = rng::stream(13, "x");
    for scale in [0.0, 1.0, 1e3] {
        let img = Tensor::from_fn(&[1, 16, 16], |_| scale * r.gen_range(-1.0..1.0));
        let eval = || {
            let mut tape = Tape::new();
            let p = ps.bind(&mut tape, false);
            let x = tape.constant(img.clone());
            let a = d.m1.forward(&mut tape, &p, x).unwrap();
            let b = d.m2.forward(&mut tape, &p, x).unwrap();
            (tape.value(a).item(), tape.value(b).item())
        };
        let (a, b) = eval();
        assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
        if scale <= 1.0 {
            assert!(a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0);
        }
        assert_eq!(eval(), (a, b));
    }
    let mut tape = Tape::new();
    let p = ps.bind(&mut tape, false);
    let tiny = tape.constant(Tensor::zeros(&[1, 4, 4]));
    assert!(d.m1.forward(&mut tape, &p, tiny).is_err());
}

#[test]
fn segmenter_outputs_a_probability_simplex_per_pixel() {
    let (m, ps) = seg_model(14);
    let img = random(&[1, 16, 24], &mut rng::stream(14, "x"));
    let out = m.segment(&ps, &img).unwrap();
    assert_eq!(out.probs.shape(), &[3, 16, 24]);
    assert_eq!(out.logits.shape(), &[3, 16, 24]);
    let plane = 16 * 24;
    for i in 0..plane {
        let s: f64 = (0..3).map(|c| out.probs.data()[c * plane + i]).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    assert!(m.segment(&ps, &Tensor::zeros(&[1, 12, 16])).is_err());
}

#[test]
fn predict_mask_takes_argmax_with_low_ties() {
    let one_hot = Tensor::new(vec![3, 1, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    assert_eq!(predict_mask(&one_hot).unwrap(), vec![0, 1, 2]);
    let tie = Tensor::full(&[3, 1, 1], 1.0 / 3.0);
    assert_eq!(predict_mask(&tie).unwrap(), vec![0]);
    let two_way = Tensor::new(vec![3, 1, 1], vec![0.2, 0.4, 0.4]).unwrap();
    assert_eq!(predict_mask(&two_way).unwrap(), vec![1]);
}

#[test]
fn argmax_ignores_positive_logit_scaling() {
    let (m, ps) = seg_model(15);
    let out = m.segment(&ps, &random(&[1, 16, 16], &mut rng::stream(15, "x"))).unwrap();
    let soft = |t: &Tensor| {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let s = tape.softmax(v, 0).unwrap();
        tape.value(s).clone()
    };
    let base = predict_mask(&out.probs).unwrap();
    for k in [0.5, 3.0, 10.0] {
        assert_eq!(predict_mask(&soft(&out.logits.map(|v| v * k))).unwrap(), base);
    }
}
