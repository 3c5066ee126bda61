use candle_core::{DType, Device, Tensor, Var};
use priorseg::dataio::Image;
use priorseg::segmodel::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_spec() -> SegModelSpec {
    let mut spec = SegModelSpec::default();
    spec.encoder.depth = Depth::Tiny;
    spec.encoder.widths = [4, 4, 8, 8, 16];
    spec.decoder.widths = [8, 8, 8, 4, 4];
    spec.input_size = 64;
    spec
}

fn images(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f32> = (0..b * h * w)
        .map(|_| rand::Rng::random::<f32>(&mut rng))
        .collect();
    Tensor::from_vec(v, (b, 1, h, w), &Device::Cpu).unwrap()
}

fn to_vec(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

#[test]
fn logits_have_input_shape() {
    let model = SegModel::new(&tiny_spec(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let drop = FeatureDropoutConfig::default();
    for (h, w) in [(32, 32), (64, 96), (96, 64)] {
        let x = images(2, h, w, 1);
        let p = model.encode(&x, Mode::Eval).unwrap();
        assert_eq!(p.deepest().dims()[2..], [h / 32, w / 32]);
        assert_eq!(model.decode_l(&p, Mode::Eval).unwrap().dims(), [2, 2, h, w]);
        assert_eq!(
            model
                .decode_p(&p, &drop, &mut rng, Mode::Train)
                .unwrap()
                .dims(),
            [2, 2, h, w]
        );
    }
    assert!(model.encode(&images(1, 48, 64, 1), Mode::Eval).is_err());
}

#[test]
fn default_pyramid_at_256() {
    let mut spec = tiny_spec();
    spec.input_size = 256;
    let model = SegModel::new(&spec, 0).unwrap();
    let p = model.encode(&images(2, 256, 256, 1), Mode::Eval).unwrap();
    let sides: Vec<usize> = p.features.iter().map(|f| f.dims()[2]).collect();
    assert_eq!(sides, vec![128, 64, 32, 16, 8]);
}

#[test]
fn eval_is_deterministic_and_per_image() {
    let model = SegModel::new(&tiny_spec(), 3).unwrap();
    let one = images(1, 64, 64, 5);
    let two = Tensor::cat(&[&one, &one], 0).unwrap();
    let a = model.infer_logits(&two).unwrap();
    let b = model.infer_logits(&two).unwrap();
    assert_eq!(to_vec(&a), to_vec(&b));
    assert_eq!(to_vec(&a.get(0).unwrap()), to_vec(&a.get(1).unwrap()));
    let zeros = Tensor::zeros((1, 1, 64, 64), DType::F32, &Device::Cpu).unwrap();
    assert!(to_vec(&model.infer_logits(&zeros).unwrap())
        .iter()
        .all(|v| v.is_finite()));
    let probs = candle_nn::ops::softmax(&a, 1).unwrap().sum(1).unwrap();
    assert!(to_vec(&probs).iter().all(|s| (s - 1.0).abs() < 1e-6));
}

#[test]
fn dropout_rate_zero_and_eval_are_identity() {
    let model = SegModel::new(&tiny_spec(), 1).unwrap();
    let p = model.encode(&images(2, 64, 64, 2), Mode::Eval).unwrap();
    let plain = to_vec(
        &model
            .decode_p(
                &p,
                &FeatureDropoutConfig::default(),
                &mut ChaCha8Rng::seed_from_u64(0),
                Mode::Eval,
            )
            .unwrap(),
    );
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = model
            .decode_p(&p, &FeatureDropoutConfig::default(), &mut rng, Mode::Eval)
            .unwrap();
        assert_eq!(to_vec(&e), plain);
    }
    let off = FeatureDropoutConfig {
        drop_rate: 0.0,
        ..Default::default()
    };
    let a = model
        .decode_p(
            &p,
            &off,
            &mut ChaCha8Rng::seed_from_u64(1),
            Mode::TrainFrozenStats,
        )
        .unwrap();
    let b = model
        .decode_p(
            &p,
            &off,
            &mut ChaCha8Rng::seed_from_u64(2),
            Mode::TrainFrozenStats,
        )
        .unwrap();
    assert_eq!(to_vec(&a), to_vec(&b));
}

#[test]
fn channel_dropout_keeps_about_half() {
    let f = Tensor::ones((1, 256, 2, 2), DType::F32, &Device::Cpu).unwrap();
    let cfg = FeatureDropoutConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let out = apply_dropout(&f, &cfg, &mut rng).unwrap();
        let v = to_vec(&out);
        for c in v.chunks(4) {
            assert!(
                c.iter().all(|x| *x == c[0]),
                "channel mask must be constant per channel"
            );
        }
        let kept = v.chunks(4).filter(|c| c[0] != 0.0).count() as f64 / 256.0;
        assert!((0.3..=0.7).contains(&kept), "kept {kept}");
        assert!(v.iter().all(|x| *x == 0.0 || *x == 2.0));
    }
}

#[test]
fn dropout_is_unbiased() {
    let dev = Device::Cpu;
    let base: Vec<f32> = (0..16).map(|i| 0.5 + i as f32 * 0.25).collect();
    let f = Tensor::from_vec(base.clone(), (1, 4, 2, 2), &dev).unwrap();
    for granularity in [Granularity::Channel, Granularity::Element] {
        let cfg = FeatureDropoutConfig {
            granularity,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut sum = vec![0f64; 16];
        let draws = 10_000;
        for _ in 0..draws {
            for (s, v) in sum
                .iter_mut()
                .zip(to_vec(&apply_dropout(&f, &cfg, &mut rng).unwrap()))
            {
                *s += v as f64;
            }
        }
        // Relative L2 error of the empirical mean over the whole tensor.
        let err: f64 = sum
            .iter()
            .zip(&base)
            .map(|(s, b)| (s / draws as f64 - *b as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = base.iter().map(|b| (*b as f64).powi(2)).sum::<f64>().sqrt();
        assert!(
            err <= 0.02 * norm,
            "{granularity:?}: relative error {}",
            err / norm
        );
    }
}

#[test]
fn decoders_are_independent_twins() {
    let model = SegModel::new(&tiny_spec(), 0).unwrap();
    let l: Vec<String> = model
        .group_params("decoder_l")
        .unwrap()
        .into_iter()
        .map(|(k, _)| k.replacen("decoder_l.", "", 1))
        .collect();
    let p: Vec<String> = model
        .group_params("decoder_p")
        .unwrap()
        .into_iter()
        .map(|(k, _)| k.replacen("decoder_p.", "", 1))
        .collect();
    assert_eq!(l, p);
    assert_ne!(
        model.group_checksum("decoder_l").unwrap(),
        model.group_checksum("decoder_p").unwrap()
    );

    let x = images(2, 64, 64, 7);
    let before_l = model.group_checksum("decoder_l").unwrap();
    let before_p = model.group_checksum("decoder_p").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pyr = model.encode(&x, Mode::Eval).unwrap();
    let loss_p = model
        .decode_p(&pyr, &FeatureDropoutConfig::default(), &mut rng, Mode::Eval)
        .unwrap()
        .sqr()
        .unwrap()
        .mean_all()
        .unwrap();
    let grads = loss_p.backward().unwrap();
    let mut opt = priorseg::optim::Sgd::new(0.9, 0.0);
    opt.step(&model.group_params("decoder_p").unwrap(), &grads, 0.1)
        .unwrap();
    assert_eq!(model.group_checksum("decoder_l").unwrap(), before_l);
    assert_ne!(model.group_checksum("decoder_p").unwrap(), before_p);

    let before_p = model.group_checksum("decoder_p").unwrap();
    let loss_l = model
        .decode_l(&pyr, Mode::Eval)
        .unwrap()
        .sqr()
        .unwrap()
        .mean_all()
        .unwrap();
    let grads = loss_l.backward().unwrap();
    opt.step(&model.group_params("decoder_l").unwrap(), &grads, 0.1)
        .unwrap();
    assert_eq!(model.group_checksum("decoder_p").unwrap(), before_p);
    assert_ne!(model.group_checksum("decoder_l").unwrap(), before_l);
}

#[test]
fn predict_never_reads_the_labeled_decoder() {
    let model = SegModel::new(&tiny_spec(), 2).unwrap();
    let im: Image = Image::from_shape_fn((50, 70), |(y, x)| ((y * 7 + x * 3) % 11) as f32 / 10.0);
    let before = model.predict(&im).unwrap();
    for (_, v) in model.group_params("decoder_l").unwrap() {
        v.set(&v.as_tensor().affine(0.0, f64::NAN).unwrap())
            .unwrap();
    }
    let after = model.predict(&im).unwrap();
    assert_eq!(before, after);
    assert_eq!(after.dim(), (50, 70));
    let logits = model.infer_logits(&images(1, 64, 64, 0)).unwrap();
    assert!(to_vec(&logits).iter().all(|v| v.is_finite()));
}

#[test]
fn argmax_tie_goes_to_background() {
    let dev = Device::Cpu;
    let eq = Tensor::zeros((1, 2, 3, 3), DType::F32, &dev).unwrap();
    assert!(argmax_masks(&eq).unwrap()[0].iter().all(|&v| v == 0));
    let fg = Tensor::cat(
        &[
            &Tensor::zeros((1, 1, 3, 3), DType::F32, &dev).unwrap(),
            &Tensor::ones((1, 1, 3, 3), DType::F32, &dev).unwrap(),
        ],
        1,
    )
    .unwrap();
    assert!(argmax_masks(&fg).unwrap()[0].iter().all(|&v| v == 1));
}

#[test]
fn foreground_prob_64_constants() {
    let dev = Device::Cpu;
    let half =
        foreground_prob_64(&Tensor::zeros((2, 2, 128, 96), DType::F32, &dev).unwrap()).unwrap();
    assert_eq!(half.dims(), [2, 1, 64, 64]);
    assert!(to_vec(&half).iter().all(|v| (v - 0.5).abs() < 1e-6));
    let sure = Tensor::cat(
        &[
            &Tensor::full(-30f32, (1, 1, 96, 96), &dev).unwrap(),
            &Tensor::full(30f32, (1, 1, 96, 96), &dev).unwrap(),
        ],
        1,
    )
    .unwrap();
    assert!(to_vec(&foreground_prob_64(&sure).unwrap())
        .iter()
        .all(|v| (v - 1.0).abs() < 1e-6));
}

#[test]
fn foreground_prob_64_matches_mask_resampling() {
    let dev = Device::Cpu;
    let recs = priorseg::dataio::generate_synthetic(2, 96, 4).unwrap();
    let mut logits = Vec::new();
    for r in &recs {
        let m = r.mask.as_ref().unwrap();
        let fg: Vec<f32> = m
            .iter()
            .map(|&v| if v == 1 { 30.0 } else { -30.0 })
            .collect();
        let fg = Tensor::from_vec(fg, (1, 1, 96, 96), &dev).unwrap();
        logits.push(Tensor::cat(&[&fg.neg().unwrap(), &fg], 1).unwrap());
    }
    let out = foreground_prob_64(&Tensor::cat(&logits, 0).unwrap()).unwrap();
    for (i, r) in recs.iter().enumerate() {
        let want = priorseg::dataio::resize_mask_64(r.mask.as_ref().unwrap());
        let got = to_vec(&out.get(i).unwrap());
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-5, "{g} vs {w}");
        }
    }
}

#[test]
fn foreground_prob_64_gradient_matches_finite_differences() {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let base: Vec<f64> = (0..2 * 2 * 4 * 6)
        .map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0))
        .collect();
    // Weight the outputs so the check is not dominated by the softmax sum rule.
    let weights = Tensor::from_vec(
        (0..64 * 64)
            .map(|i| ((i % 7) as f64) / 7.0)
            .collect::<Vec<_>>(),
        (1, 1, 64, 64),
        &dev,
    )
    .unwrap();
    let f = |logits: &Tensor| {
        foreground_prob_64(logits)
            .unwrap()
            .broadcast_mul(&weights)
            .unwrap()
            .sum_all()
            .unwrap()
    };
    let v = Var::from_vec(base.clone(), (2, 2, 4, 6), &dev).unwrap();
    let g = f(v.as_tensor())
        .backward()
        .unwrap()
        .get(v.as_tensor())
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    let h = 1e-4;
    for k in 0..base.len() {
        let eval = |d: f64| {
            let mut p = base.clone();
            p[k] += d;
            f(&Tensor::from_vec(p, (2, 2, 4, 6), &dev).unwrap())
                .to_scalar::<f64>()
                .unwrap()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        assert!(
            (fd - g[k]).abs() <= 1e-3 * fd.abs().max(g[k].abs()).max(1e-8),
            "{k}: fd {fd} vs {}",
            g[k]
        );
    }
}

#[test]
fn checkpoint_round_trip_keeps_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = SegModel::new(&tiny_spec(), 4).unwrap();
    model.set_inference_branch(Branch::Labeled);
    let path = dir.path().join("m.safetensors");
    model.save(&path).unwrap();
    let back = SegModel::load(&path, &Device::Cpu).unwrap();
    assert_eq!(back.checksum().unwrap(), model.checksum().unwrap());
    assert_eq!(back.inference_branch(), Branch::Labeled);
    assert_eq!(back.spec(), model.spec());
    let x = images(1, 64, 64, 8);
    assert_eq!(
        to_vec(&back.infer_logits(&x).unwrap()),
        to_vec(&model.infer_logits(&x).unwrap())
    );
}

#[test]
fn same_seed_same_weights() {
    let a = SegModel::new(&tiny_spec(), 6).unwrap();
    let b = SegModel::new(&tiny_spec(), 6).unwrap();
    let c = SegModel::new(&tiny_spec(), 7).unwrap();
    assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
    assert_ne!(a.checksum().unwrap(), c.checksum().unwrap());
}
