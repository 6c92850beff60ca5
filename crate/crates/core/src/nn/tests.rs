use super::*;
use crate::data::{generate_openset_task, Family, TaskConfig};
use crate::tensor::gaussian;

fn identity_net(c: usize) -> Network {
    let mut conv = Conv2d::new(c, c, (1, 1), 1, 0);
    let mut dense = Dense::new(c, c);
    for i in 0..c {
        conv.weight[i * c + i] = 1.0;
        dense.weight[i * c + i] = 1.0;
    }
    Network::new([c, 1, 1], vec![Layer::Conv2d(conv), Layer::Flatten, Layer::Dense(dense)]).unwrap()
}

#[test]
fn construction_validates_shapes() {
    assert!(Network::new([1, 4, 4], vec![Layer::Flatten, Layer::Dense(Dense::new(16, 2))]).is_err());
    let bad = vec![Layer::Conv2d(Conv2d::new(2, 1, (3, 3), 1, 0)), Layer::Flatten, Layer::Dense(Dense::new(10, 2))];
    assert!(matches!(Network::new([1, 4, 4], bad), Err(Error::Dimension(_))));
    let no_head = vec![Layer::Conv2d(Conv2d::new(2, 1, (3, 3), 1, 0))];
    assert!(Network::new([1, 4, 4], no_head).is_err());
    let net = Network::small_conv_net([1, 32, 32], 2, Activation::Relu).unwrap();
    assert_eq!(net.layer_output_shape(0), &[16, 32, 32]);
    assert_eq!(net.layer_output_shape(6), &[2048]);
    assert_eq!(net.kernel_bank().d(), 25);
}

#[test]
fn forward_examples() {
    let net = Network::small_conv_net([1, 8, 8], 2, Activation::Relu).unwrap();
    let x = gaussian(&mut Rng::new(1), vec![3, 1, 8, 8], 0.0, 1.0).unwrap();
    assert!(net.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));

    let mut net = net;
    net.init_fan_in(&mut Rng::new(2));
    let row = x.data()[..64].to_vec();
    let dup = Tensor::new(vec![2, 1, 8, 8], [row.clone(), row].concat()).unwrap();
    let logits = net.forward(&dup).unwrap();
    assert_eq!(logits.row(0), logits.row(1));

    let id = identity_net(3);
    let x = Tensor::new(vec![2, 3, 1, 1], vec![0.5, -1.0, 2.0, 3.0, 0.0, -0.25]).unwrap();
    assert_eq!(id.forward(&x).unwrap().data(), x.data());

    assert!(matches!(id.forward(&Tensor::zeros(vec![1, 2, 1, 1])), Err(Error::Dimension(_))));
}

#[test]
fn forward_permutes_with_batch() {
    let mut net = Network::small_conv_net([1, 8, 8], 3, Activation::Sigmoid).unwrap();
    net.init_fan_in(&mut Rng::new(4));
    let x = gaussian(&mut Rng::new(5), vec![3, 1, 8, 8], 0.0, 1.0).unwrap();
    let logits = net.forward(&x).unwrap();
    let d = x.data();
    let swapped = Tensor::new(vec![3, 1, 8, 8], [&d[128..192], &d[0..64], &d[64..128]].concat()).unwrap();
    let l2 = net.forward(&swapped).unwrap();
    assert_eq!(l2.row(0), logits.row(2));
    assert_eq!(l2.row(1), logits.row(0));
    assert_eq!(l2.row(2), logits.row(1));
}

#[test]
fn cross_entropy_examples() {
    let uniform = Tensor::from_rows(&[vec![0.3, 0.3], vec![-1.0, -1.0]]).unwrap();
    assert!((cross_entropy(&uniform, &[0, 1]).unwrap() - 2f64.ln()).abs() < 1e-15);
    let peaked = Tensor::from_rows(&[vec![800.0, -800.0]]).unwrap();
    assert_eq!(cross_entropy(&peaked, &[0]).unwrap(), 0.0);
    // -ln(e² / (e² + 1)) = 0.126928011...
    let two = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
    assert!((cross_entropy(&two, &[0]).unwrap() - 0.126928).abs() < 1e-6);
    assert!(matches!(cross_entropy(&two, &[2]), Err(Error::Input(_))));
}

#[test]
fn lr_schedule() {
    let cfg = SgdConfig::full();
    assert_eq!(lr_at(0, &cfg), 0.005);
    assert!((lr_at(11, &cfg) - 0.005).abs() < 1e-18);
    assert!((lr_at(12, &cfg) - 0.0005).abs() < 1e-15);
    assert!((lr_at(24, &cfg) - 5e-5).abs() < 1e-15);
}

#[test]
fn sgd_step_examples() {
    let mut net = identity_net(1);
    let grads = Gradients {
        layers: vec![
            Some(ParamGrad { weight: vec![2.0], bias: vec![0.0] }),
            None,
            Some(ParamGrad { weight: vec![0.0], bias: vec![0.0] }),
        ],
    };
    let before = net.clone();
    sgd_step(&mut net, &grads, 0.0).unwrap();
    assert_eq!(net, before);
    sgd_step(&mut net, &grads, 0.1).unwrap();
    assert!((net.first_conv().weight[0] - 0.8).abs() < 1e-15);

    // Two steps at the scheduled rates move the weight by exactly those rates.
    let cfg = SgdConfig { decay_every: 1, ..SgdConfig::full() };
    let mut net = identity_net(1);
    for epoch in 0..2 {
        sgd_step(&mut net, &grads, lr_at(epoch, &cfg)).unwrap();
    }
    let expected = 1.0 - 2.0 * lr_at(0, &cfg) - 2.0 * lr_at(1, &cfg);
    assert!((net.first_conv().weight[0] - expected).abs() < 1e-15);

    let short = Gradients { layers: vec![None] };
    assert!(sgd_step(&mut net, &short, 0.1).is_err());
}

fn random_tiny_net(rng: &mut Rng) -> Network {
    loop {
        let c = 1 + rng.below(2);
        let h = 5 + rng.below(4);
        let k = 2 + rng.below(2);
        let stride = 1 + rng.below(2);
        let pad = rng.below(2);
        let act = if rng.below(2) == 0 { Activation::Relu } else { Activation::Sigmoid };
        let mut layers = vec![Layer::Conv2d(Conv2d::new(k, c, (3, 3), stride, pad)), Layer::Activation(act)];
        let out_hw = (h + 2 * pad - 3) / stride + 1;
        let mut flat = k * out_hw * out_hw;
        if rng.below(2) == 0 && out_hw >= 2 {
            layers.push(Layer::MaxPool { window: 2 });
            flat = k * (out_hw / 2) * (out_hw / 2);
        }
        layers.push(Layer::Flatten);
        layers.push(Layer::Dense(Dense::new(flat, 2 + rng.below(2))));
        let mut net = Network::new([c, h, h], layers).unwrap();
        if net.param_count() > 500 {
            continue;
        }
        net.init_fan_in(rng);
        // Nonzero biases exercise the bias paths.
        for buf in net.param_buffers_mut() {
            if buf.len() <= 3 {
                buf.iter_mut().for_each(|b| *b = 0.1 * rng.normal());
            }
        }
        return net;
    }
}

/// Central differences on the scalar objective.
fn numeric_gradients(net: &Network, x: &Tensor, y: &[usize], cfg: &LossConfig) -> Vec<Vec<f64>> {
    let h = 1e-5;
    let n_bufs = net.param_buffers().len();
    (0..n_bufs)
        .map(|b| {
            (0..net.param_buffers()[b].len())
                .map(|i| {
                    let mut plus = net.clone();
                    plus.param_buffers_mut()[b][i] += h;
                    let mut minus = net.clone();
                    minus.param_buffers_mut()[b][i] -= h;
                    (total_loss(&plus, x, y, cfg).unwrap() - total_loss(&minus, x, y, cfg).unwrap()) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

#[test]
fn backward_matches_finite_differences() {
    let mut rng = Rng::new(2024);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let net = random_tiny_net(&mut rng);
        let [c, h, w] = net.input_shape();
        let x = gaussian(&mut rng, vec![3, c, h, w], 0.0, 1.0).unwrap();
        let y: Vec<usize> = (0..3).map(|_| rng.below(net.num_classes())).collect();
        let cfg = match trial % 3 {
            0 => LossConfig::cross_entropy(),
            1 => LossConfig::almost_right(rng.uniform()),
            _ => LossConfig::hard_ortho(rng.uniform()),
        };
        let (grads, parts) = backward(&net, &x, &y, &cfg).unwrap();
        assert!((parts.total - total_loss(&net, &x, &y, &cfg).unwrap()).abs() < 1e-12);
        let numeric = numeric_gradients(&net, &x, &y, &cfg);
        for (a_buf, n_buf) in grads.buffers().iter().zip(&numeric) {
            for (a, n) in a_buf.iter().zip(n_buf) {
                let scale = a.abs().max(n.abs());
                if scale > 1e-8 {
                    worst = worst.max((a - n).abs() / scale);
                }
            }
        }
    }
    assert!(worst < 1e-3, "max relative error {worst}");
}

#[test]
fn alpha_one_is_pure_cross_entropy() {
    let mut rng = Rng::new(6);
    let net = random_tiny_net(&mut rng);
    let [c, h, w] = net.input_shape();
    let x = gaussian(&mut rng, vec![4, c, h, w], 0.0, 1.0).unwrap();
    let y = vec![0, 1, 1, 0];
    let (plain, _) = backward(&net, &x, &y, &LossConfig::cross_entropy()).unwrap();
    let (ar, parts) = backward(&net, &x, &y, &LossConfig::almost_right(1.0)).unwrap();
    assert_eq!(plain, ar);
    assert_eq!(parts.total, parts.cross_entropy);
}

#[test]
fn alpha_zero_touches_only_first_layer_weights() {
    let mut rng = Rng::new(7);
    let net = random_tiny_net(&mut rng);
    let [c, h, w] = net.input_shape();
    let x = gaussian(&mut rng, vec![2, c, h, w], 0.0, 1.0).unwrap();
    let (grads, _) = backward(&net, &x, &[0, 1], &LossConfig::almost_right(0.0)).unwrap();
    let bufs = grads.buffers();
    assert!(bufs[0].iter().any(|&g| g != 0.0));
    assert!(bufs[1..].iter().all(|b| b.iter().all(|&g| g == 0.0)));
}

#[test]
fn cross_entropy_decreases_on_separable_toy() {
    for seed in 0..3 {
        let mut rng = Rng::new(seed);
        let mut net = Network::new(
            [1, 4, 4],
            vec![
                Layer::Conv2d(Conv2d::new(2, 1, (3, 3), 1, 1)),
                Layer::Activation(Activation::Relu),
                Layer::Flatten,
                Layer::Dense(Dense::new(32, 2)),
            ],
        )
        .unwrap();
        net.init_fan_in(&mut rng);
        // Class 1 is bright, class 0 dark.
        let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();
        let data: Vec<f64> = labels
            .iter()
            .flat_map(|&l| {
                let base = if l == 1 { 0.8 } else { 0.2 };
                (0..16).map(move |p| base + 0.05 * ((p % 3) as f64 - 1.0)).collect::<Vec<_>>()
            })
            .collect();
        let x = Tensor::new(vec![16, 1, 4, 4], data).unwrap();
        let cfg = LossConfig::cross_entropy();
        let start = cross_entropy(&net.forward(&x).unwrap(), &labels).unwrap();
        for _ in 0..50 {
            let (g, _) = backward(&net, &x, &labels, &cfg).unwrap();
            sgd_step(&mut net, &g, 0.1).unwrap();
        }
        let end = cross_entropy(&net.forward(&x).unwrap(), &labels).unwrap();
        assert!(end < start, "seed {seed}: {start} -> {end}");
    }
}

fn tiny_task() -> crate::data::Dataset {
    generate_openset_task(&TaskConfig {
        image_size: 8,
        n_train: 30,
        n_val: 10,
        n_test: 12,
        train_families: vec![Family::Checkerboard],
        test_families: vec![Family::StripesHigh],
        ..TaskConfig::default()
    })
    .unwrap()
}

#[test]
fn zero_epochs_reports_initial_weights() {
    let ds = tiny_task();
    let mut net = Network::small_conv_net(ds.input_shape, 2, Activation::Relu).unwrap();
    net.init_fan_in(&mut Rng::new(1));
    let sgd = SgdConfig { epochs: 0, ..SgdConfig::desk() };
    let out = train(net.clone(), &ds, &LossConfig::cross_entropy(), &sgd, &mut Rng::new(1)).unwrap();
    assert_eq!(out.report.epochs.len(), 1);
    assert_eq!(out.report.best_epoch, 0);
    assert_eq!(out.best, net.rounded_to_f32());
    // Same kernels up to the f32 rounding of the snapshot.
    let (a, b) = (&out.report.geometry_init, &out.report.geometry_best);
    assert!((a.mean_abs_cos - b.mean_abs_cos).abs() < 1e-6);
}

#[test]
fn training_is_deterministic() {
    let ds = tiny_task();
    let run = || {
        let mut net = Network::small_conv_net(ds.input_shape, 2, Activation::Sigmoid).unwrap();
        net.init_fan_in(&mut Rng::new(3));
        let sgd = SgdConfig { epochs: 3, ..SgdConfig::desk() };
        train(net, &ds, &LossConfig::almost_right(0.5), &sgd, &mut Rng::new(3)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.report.epochs, b.report.epochs);
    assert_eq!(a.best, b.best);
    assert_eq!(a.report.test_metric, b.report.test_metric);
}

#[test]
fn divergence_is_reported_with_epoch() {
    let ds = tiny_task();
    let mut net = Network::small_conv_net(ds.input_shape, 2, Activation::Relu).unwrap();
    net.init_fan_in(&mut Rng::new(1));
    let sgd = SgdConfig { lr0: 1e9, epochs: 3, ..SgdConfig::desk() };
    match train(net, &ds, &LossConfig::cross_entropy(), &sgd, &mut Rng::new(1)) {
        Err(Error::Divergence { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.report.test_metric)),
    }
}
