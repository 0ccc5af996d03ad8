use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::autodiff::{finite_difference, max_relative_error, Graph, Tensor};
use crate::error::Error;

fn gray8() -> ImageShape {
    ImageShape::new(1, 8, 8)
}

fn random_images(rng: &mut ChaCha8Rng, n: usize, shape: ImageShape) -> Tensor {
    let len = n * shape.numel();
    Tensor::new(shape.batch_dims(n), (0..len).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn logits(model: &mut Model, x: &Tensor, opts: &ForwardOptions) -> Vec<f64> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let xv = g.constant(x.clone());
    let out = model.forward(&mut g, &p, xv, Mode::Eval, opts).unwrap();
    g.value(out.logits).data().to_vec()
}

#[test]
fn full_scale_parameter_counts() {
    let cifar = ImageShape::new(3, 32, 32);
    let smlp = Model::build(&ModelSpec::smlp(cifar, 10, 1024), 0).unwrap();
    let expected = 3072 * 1024 + 1024 + 1024 * 1024 + 1024 + 1024 * 10 + 10;
    assert_eq!(smlp.params().numel(), expected);

    let dmlp = Model::build(&ModelSpec::dmlp(cifar, 10, 1024), 0).unwrap();
    assert_eq!(dmlp.params().numel(), expected + 2 * (1024 * 1024 + 1024));

    let pre = Model::build(&ModelSpec::smlp(cifar, 10, 1024).with_precode(256, 1e-3, None).unwrap(), 0).unwrap();
    let layout = pre.params().layout();
    let enc = layout.iter().find(|e| e.name.ends_with("encoder.weight")).unwrap();
    let dec = layout.iter().find(|e| e.name.ends_with("decoder.weight")).unwrap();
    assert_eq!(enc.shape, vec![1024, 512]);
    assert_eq!(dec.shape, vec![256, 1024]);
    assert_eq!(pre.params().numel() - expected, (1024 * 512 + 512) + (256 * 1024 + 1024));
}

#[test]
fn precode_parameter_formula_holds_at_every_position() {
    let base = ModelSpec::dmlp(gray8(), 4, 24);
    let base_n = Model::build(&base, 0).unwrap().params().numel();
    for (pos, z) in [(Some(1), 24), (Some(3), 24), (None, 24)] {
        let k = 5;
        let spec = base.clone().with_precode(k, 0.1, pos).unwrap();
        let n = Model::build(&spec, 0).unwrap().params().numel();
        assert_eq!(n - base_n, (z * 2 * k + 2 * k) + (k * z + z));
    }
    let conv = ModelSpec::convnet(gray8(), 4, 3);
    let conv_n = Model::build(&conv, 0).unwrap().params().numel();
    // 8x8 -> 4x4 -> 2x2 -> 2x2 -> 2x2, three channels.
    let z = 3 * 2 * 2;
    let n = Model::build(&conv.clone().with_precode(4, 0.1, None).unwrap(), 0)
        .unwrap()
        .params()
        .numel();
    assert_eq!(n - conv_n, (z * 8 + 8) + (4 * z + z));
    let early = Model::build(&conv.with_precode(4, 0.1, Some(1)).unwrap(), 0).unwrap();
    assert_eq!(early.params().numel() - conv_n, (48 * 8 + 8) + (4 * 48 + 48));
}

#[test]
fn incomposable_specs_name_the_layer_pair() {
    let spec = ModelSpec {
        name: "bad".into(),
        input: gray8(),
        classes: 3,
        layers: vec![LayerSpec::Dense { units: 4 }, LayerSpec::SoftmaxOutput],
    };
    match Model::build(&spec, 0) {
        Err(Error::Build(msg)) => assert!(msg.contains("input -> layer 0 (dense)"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
    let spec = ModelSpec {
        name: "bad".into(),
        input: gray8(),
        classes: 3,
        layers: vec![LayerSpec::Flatten, LayerSpec::Conv2d { channels: 2, kernel: 3, stride: 1, padding: 0 }, LayerSpec::SoftmaxOutput],
    };
    match Model::build(&spec, 0) {
        Err(Error::Build(msg)) => assert!(msg.contains("layer 0 (flatten) -> layer 1 (conv2d)"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn forward_rejects_wrong_input_shape() {
    let mut model = Model::build(&ModelSpec::smlp(gray8(), 4, 8), 0).unwrap();
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let x = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
    assert!(matches!(
        model.forward(&mut g, &p, x, Mode::Eval, &ForwardOptions::default()),
        Err(Error::Usage(_))
    ));
}

#[test]
fn deterministic_without_precode_stochastic_with() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_images(&mut rng, 2, gray8());
    let mut plain = Model::build(&ModelSpec::smlp(gray8(), 4, 16), 1).unwrap();
    let a = logits(&mut plain, &x, &ForwardOptions::default());
    let b = logits(&mut plain, &x, &ForwardOptions::default());
    assert_eq!(a, b);

    let spec = ModelSpec::smlp(gray8(), 4, 16).with_precode(4, 1e-3, None).unwrap();
    let mut pre = Model::build(&spec, 1).unwrap();
    let a = logits(&mut pre, &x, &ForwardOptions::default());
    let b = logits(&mut pre, &x, &ForwardOptions::default());
    assert_ne!(a, b);

    let z1 = logits(&mut pre, &x, &ForwardOptions::zero_noise());
    let z2 = logits(&mut pre, &x, &ForwardOptions::zero_noise());
    assert_eq!(z1, z2);
    let fixed = logits(&mut pre, &x, &ForwardOptions::fixed_noise(vec![Tensor::zeros(&[2, 4])]));
    assert_eq!(z1, fixed);
}

#[test]
fn zero_noise_follows_the_mean_path() {
    // With eps = 0 the block reduces to decoder(encoder_mu(z)); rebuild that by hand.
    let spec = ModelSpec {
        name: "tiny".into(),
        input: ImageShape::new(1, 1, 3),
        classes: 2,
        layers: vec![LayerSpec::Flatten, LayerSpec::Precode { k: 2, beta: 0.5 }, LayerSpec::SoftmaxOutput],
    };
    let mut model = Model::build(&spec, 9).unwrap();
    let x = Tensor::new(vec![1, 1, 1, 3], vec![0.2, -0.4, 0.9]).unwrap();
    let got = logits(&mut model, &x, &ForwardOptions::zero_noise());
    let v = model.params().values();
    let (enc_w, enc_b, dec_w, dec_b, out_w, out_b) = (&v[0], &v[1], &v[2], &v[3], &v[4], &v[5]);
    let mu: Vec<f64> = (0..2)
        .map(|j| (0..3).map(|i| x.data()[i] * enc_w.data()[i * 4 + j]).sum::<f64>() + enc_b.data()[j])
        .collect();
    let dec: Vec<f64> = (0..3)
        .map(|j| (0..2).map(|i| mu[i] * dec_w.data()[i * 3 + j]).sum::<f64>() + dec_b.data()[j])
        .collect();
    let out: Vec<f64> = (0..2)
        .map(|j| (0..3).map(|i| dec[i] * out_w.data()[i * 2 + j]).sum::<f64>() + out_b.data()[j])
        .collect();
    for (a, b) in got.iter().zip(&out) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn kl_closed_form_examples() {
    assert_eq!(kl_divergence(&[0.0], &[1.0]).unwrap(), 0.0);
    assert!((kl_divergence(&[1.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
    let e = std::f64::consts::E;
    assert!((kl_divergence(&[0.0, 0.0], &[e, e]).unwrap() - (e * e - 3.0)).abs() < 1e-12);
    assert!(matches!(kl_divergence(&[0.0], &[0.0]), Err(Error::NonFinite { .. })));
}

#[test]
fn precode_loss_adds_weighted_kl() {
    let mut g = Graph::new();
    let task = g.constant(Tensor::scalar(0.7));
    let mu = g.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
    let sigma = g.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
    let unit_mu = g.constant(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
    let loss = precode_loss(&mut g, task, &[BlockStats { mu, sigma, beta: 0.2 }]).unwrap();
    assert!((g.value(loss).item() - (0.7 + 0.2 * 0.5)).abs() < 1e-15);
    let same = precode_loss(&mut g, task, &[BlockStats { mu: unit_mu, sigma, beta: 3.0 }]).unwrap();
    assert_eq!(g.value(same).item(), 0.7);
    let zero = g.constant(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
    assert!(matches!(
        precode_loss(&mut g, task, &[BlockStats { mu, sigma: zero, beta: 1.0 }]),
        Err(Error::NonFinite { .. })
    ));
}

#[test]
fn kl_is_non_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let mu: Vec<f64> = (0..6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let sigma: Vec<f64> = (0..6).map(|_| rng.random_range(0.05..3.0)).collect();
        assert!(kl_divergence(&mu, &sigma).unwrap() >= 0.0);
    }
}

#[test]
fn reparameterized_gradient_matches_finite_differences() {
    let spec = ModelSpec::smlp(ImageShape::new(1, 2, 2), 3, 5).with_precode(3, 0.3, None).unwrap();
    let mut model = Model::build(&spec, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_images(&mut rng, 2, ImageShape::new(1, 2, 2));
    let labels = [2, 0];
    let eps = Tensor::new(vec![2, 3], (0..6).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
    let opts = ForwardOptions::fixed_noise(vec![eps]);
    let analytic = compute_gradient(&mut model, &x, &labels, Mode::Train, &opts, true).unwrap();
    let base = model.params().values();
    let layout = model.params().layout();
    for entry in layout.iter().filter(|e| e.name.contains("coder")) {
        let idx = layout.iter().position(|e| e.name == entry.name).unwrap();
        let numeric = finite_difference(
            |probe| {
                let mut values = base.clone();
                values[idx] = Tensor::new(entry.shape.clone(), probe.to_vec()).unwrap();
                let mut m = model.clone();
                m.params_mut().set_values(values).unwrap();
                let mut g = Graph::new();
                let p = m.params().bind(&mut g, false);
                let xv = g.constant(x.clone());
                let (loss, _) = m.loss(&mut g, &p, xv, &labels, Mode::Train, &opts, true).unwrap();
                g.value(loss).item()
            },
            base[idx].data(),
            1e-5,
        );
        let err = max_relative_error(analytic.block(idx), &numeric, 1e-6);
        assert!(err < 1e-4, "{}: {err}", entry.name);
    }
}

fn blobs(seed: u64, n: usize) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = ImageShape::new(1, 2, 2);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let c = i % 2;
        let centre = if c == 0 { 0.25 } else { 0.75 };
        for _ in 0..shape.numel() {
            data.push(centre + 0.08 * rng.sample::<f64, _>(StandardNormal));
        }
        labels.push(c);
    }
    (Tensor::new(shape.batch_dims(n), data).unwrap(), labels)
}

#[test]
fn training_separates_blobs_and_is_deterministic() {
    let (x, y) = blobs(1, 64);
    let spec = ModelSpec::smlp(ImageShape::new(1, 2, 2), 2, 8);
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 16,
        learning_rate: 1e-2,
        seed: 2,
        checkpoint_epochs: vec![0, 50],
        ..TrainConfig::default()
    };
    let view = LabeledView::new(&x, &y).unwrap();
    let mut model = Model::build(&spec, 2).unwrap();
    let init = Checkpoint::capture(&model, 0, 2);
    let report = train(&mut model, view, Some(view), &cfg, None).unwrap();
    assert!(*report.train_accuracy.last().unwrap() >= 0.99, "{:?}", report.train_accuracy);
    assert_eq!(report.train_accuracy.len(), 51);
    assert_eq!(report.checkpoints[0].to_bytes().unwrap(), init.to_bytes().unwrap());
    assert_eq!(report.checkpoints[1].epoch(), 50);

    let mut again = Model::build(&spec, 2).unwrap();
    let second = train(&mut again, view, Some(view), &cfg, None).unwrap();
    assert_eq!(report.train_accuracy, second.train_accuracy);
    assert_eq!(model.params(), again.params());
}

#[test]
fn training_accuracy_does_not_regress_across_seeds() {
    let (x, y) = blobs(4, 48);
    let view = LabeledView::new(&x, &y).unwrap();
    let spec = ModelSpec::smlp(ImageShape::new(1, 2, 2), 2, 8).with_precode(2, 1e-3, None).unwrap();
    let (mut start, mut end) = (0.0, 0.0);
    for seed in 0..3 {
        let mut model = Model::build(&spec, seed).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-2,
            seed,
            ..TrainConfig::default()
        };
        let r = train(&mut model, view, None, &cfg, None).unwrap();
        start += r.train_accuracy[0];
        end += r.train_accuracy[20];
    }
    assert!(end >= start);
}

#[test]
fn training_rejects_bad_config_and_reports_divergence() {
    let (x, y) = blobs(1, 8);
    let view = LabeledView::new(&x, &y).unwrap();
    let mut model = Model::build(&ModelSpec::smlp(ImageShape::new(1, 2, 2), 2, 4), 0).unwrap();
    let cfg = TrainConfig {
        checkpoint_epochs: vec![5],
        epochs: 2,
        ..TrainConfig::default()
    };
    assert!(matches!(train(&mut model, view, None, &cfg, None), Err(Error::Config(_))));
    let cfg = TrainConfig {
        epochs: 3,
        learning_rate: 1e300,
        batch_size: 4,
        ..TrainConfig::default()
    };
    assert!(matches!(
        train(&mut model, view, None, &cfg, None),
        Err(Error::Diverged { .. })
    ));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let spec = ModelSpec::convnet(gray8(), 4, 3).with_precode(4, 1e-3, None).unwrap();
    let model = Model::build(&spec, 8).unwrap();
    let ck = Checkpoint::capture(&model, 7, 8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    let restored = back.restore().unwrap();
    assert_eq!(restored.params(), model.params());

    let mut bytes = ck.to_bytes().unwrap();
    bytes.pop();
    assert!(matches!(Checkpoint::from_bytes(&bytes, "m"), Err(Error::Format { .. })));
    bytes[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bytes, "m"), Err(Error::Format { .. })));
}

#[test]
fn analytic_labels_match_the_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..30 {
        let arch = if trial % 2 == 0 {
            ModelSpec::smlp(gray8(), 6, 12)
        } else {
            ModelSpec::convnet(gray8(), 6, 3)
        };
        let mut model = Model::build(&arch, trial).unwrap();
        let x = random_images(&mut rng, 1, gray8());
        let label = rng.random_range(0..6);
        let cap = compute_gradient(&mut model, &x, &[label], Mode::Train, &ForwardOptions::default(), true).unwrap();
        assert_eq!(analytic_label_from_gradient(&cap, &model).unwrap(), label);
    }
}

#[test]
fn zeroed_output_layer_leaves_only_the_true_class_negative() {
    let mut model = Model::build(&ModelSpec::smlp(gray8(), 4, 8), 0).unwrap();
    let mut values = model.params().values();
    let n = values.len();
    values[n - 2] = Tensor::zeros(values[n - 2].shape());
    values[n - 1] = Tensor::zeros(values[n - 1].shape());
    model.params_mut().set_values(values).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_images(&mut rng, 1, gray8());
    let cap = compute_gradient(&mut model, &x, &[3], Mode::Train, &ForwardOptions::default(), true).unwrap();
    let w = cap.block_by_name(model.output_weight()).unwrap();
    for row in w.chunks(4) {
        for (c, v) in row.iter().enumerate() {
            if c == 3 {
                assert!(*v <= 0.0);
            } else {
                assert!(*v >= 0.0);
            }
        }
    }
    assert_eq!(analytic_label_from_gradient(&cap, &model).unwrap(), 3);
}

#[test]
fn noisy_captures_can_defeat_label_recovery() {
    let d = crate::defenses::GradientDefense::gaussian(1e-2, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    for i in 0..32 {
        let mut model = Model::build(&ModelSpec::smlp(gray8(), 10, 16), i).unwrap();
        let x = random_images(&mut rng, 1, gray8());
        let label = rng.random_range(0..10);
        let cap = compute_gradient(&mut model, &x, &[label], Mode::Train, &ForwardOptions::default(), true).unwrap();
        let noisy = crate::defenses::apply_defense(&cap, &d.with_seed(i));
        match analytic_label_from_gradient(&noisy, &model) {
            Ok(l) if l == label => {}
            Ok(_) => failures += 1,
            Err(Error::LabelRecovery(_)) => failures += 1,
            Err(e) => panic!("{e}"),
        }
    }
    assert!(failures > 0);
}
