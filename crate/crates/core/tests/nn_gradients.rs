//! Central finite differences against the hand-written gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqpick::nn::{
    discriminator_layers, q_network_layers, Adam, DiscriminatorWidths, LayerSpec, Network, QNetWidths, Shape,
};

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// `sum_i c_i f(x)_i`, the scalar whose output gradient is `c`.
fn contracted(net: &Network, x: &[f64], c: &[f64]) -> f64 {
    net.predict(x).unwrap().iter().zip(c).map(|(y, c)| y * c).sum()
}

/// Max relative error of parameter and input gradients over random probes.
fn check_net(net: &mut Network, batch: usize, probes: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_vec(&mut rng, batch * net.input_shape().len(), 1.0);
    let c = random_vec(&mut rng, batch * net.output_shape().len(), 1.0);
    net.zero_grad();
    let (_, cache) = net.forward(&x).unwrap();
    let gx = net.backward(&cache, &c).unwrap();
    let analytic = net.grads().to_vec();
    let mut worst_param: f64 = 0.0;
    let base = net.params().to_vec();
    let n = net.n_params();
    let picks: Vec<usize> = if n <= probes { (0..n).collect() } else { (0..probes).map(|_| rng.random_range(0..n)).collect() };
    for j in picks {
        let mut p = base.clone();
        p[j] = base[j] + H;
        net.set_params(&p).unwrap();
        let up = contracted(net, &x, &c);
        p[j] = base[j] - H;
        net.set_params(&p).unwrap();
        let down = contracted(net, &x, &c);
        worst_param = worst_param.max(rel_err(analytic[j], (up - down) / (2.0 * H)));
    }
    net.set_params(&base).unwrap();
    let mut worst_input: f64 = 0.0;
    for _ in 0..probes.min(x.len()) {
        let i = rng.random_range(0..x.len());
        let mut xp = x.clone();
        xp[i] = x[i] + H;
        let up = contracted(net, &xp, &c);
        xp[i] = x[i] - H;
        let down = contracted(net, &xp, &c);
        worst_input = worst_input.max(rel_err(gx[i], (up - down) / (2.0 * H)));
    }
    (worst_param, worst_input)
}

fn layer_cases() -> Vec<(&'static str, Shape, Vec<LayerSpec>)> {
    use LayerSpec::*;
    vec![
        ("conv s1", Shape::new(3, 6, 5), vec![Conv { out_channels: 4, kernel: 3, stride: 1 }]),
        ("conv s2", Shape::new(3, 7, 6), vec![Conv { out_channels: 5, kernel: 3, stride: 2 }]),
        ("conv k5", Shape::new(2, 6, 6), vec![Conv { out_channels: 3, kernel: 5, stride: 1 }]),
        ("conv out1", Shape::new(4, 5, 5), vec![Conv { out_channels: 1, kernel: 3, stride: 1 }]),
        ("conv k1", Shape::new(3, 4, 4), vec![Conv { out_channels: 2, kernel: 1, stride: 1 }]),
        ("dense", Shape::new(7, 1, 1), vec![Dense { out_dim: 5 }]),
        ("dense out1", Shape::new(9, 1, 1), vec![Dense { out_dim: 1 }]),
        ("relu", Shape::new(2, 4, 3), vec![Relu]),
        ("flatten dense", Shape::new(3, 3, 2), vec![Flatten, Dense { out_dim: 4 }]),
        ("upsample x2", Shape::new(2, 3, 4), vec![Upsample { factor: 2 }]),
        ("upsample x3", Shape::new(1, 2, 3), vec![Upsample { factor: 3 }]),
    ]
}

#[test]
fn every_layer_matches_finite_differences() {
    for (seed, (name, shape, specs)) in layer_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let mut net = Network::new(shape, &specs, &mut rng).unwrap();
        let (p, i) = check_net(&mut net, 3, 100, 100 + seed as u64);
        assert!(p < REL_TOL && i < REL_TOL, "{name}: param {p:e}, input {i:e}");
    }
}

#[test]
fn default_networks_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut q = Network::new(Shape::new(2, 28, 24), &q_network_layers(QNetWidths::default()), &mut rng).unwrap();
    let (p, i) = check_net(&mut q, 2, 100, 1);
    assert!(p < REL_TOL && i < REL_TOL, "q network: param {p:e}, input {i:e}");
    let mut d =
        Network::new(Shape::new(4, 28, 24), &discriminator_layers(DiscriminatorWidths::default()), &mut rng).unwrap();
    let (p, i) = check_net(&mut d, 3, 100, 2);
    assert!(p < REL_TOL && i < REL_TOL, "discriminator: param {p:e}, input {i:e}");
}

#[test]
fn backward_is_linear_in_the_output_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut net = Network::new(Shape::new(2, 8, 8), &q_network_layers(QNetWidths::default()), &mut rng).unwrap();
    let x = random_vec(&mut rng, 2 * 2 * 64, 1.0);
    let g = random_vec(&mut rng, 2 * 64, 1.0);
    let (_, cache) = net.forward(&x).unwrap();
    net.zero_grad();
    net.backward(&cache, &vec![0.0; g.len()]).unwrap();
    assert!(net.grads().iter().all(|&v| v == 0.0));
    net.backward(&cache, &g).unwrap();
    let once = net.grads().to_vec();
    net.zero_grad();
    let g2: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
    net.backward(&cache, &g2).unwrap();
    for (a, b) in net.grads().iter().zip(&once) {
        assert!((a - 2.0 * b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

/// `(weight/2) mean_i |grad_x f(x_i)|^2` evaluated through the public input gradient.
fn input_penalty(net: &Network, x: &[f64], batch: usize, weight: f64) -> f64 {
    let (_, cache) = net.forward(x).unwrap();
    let g = net.input_gradient(&cache, &vec![1.0; batch]).unwrap();
    0.5 * weight * g.iter().map(|v| v * v).sum::<f64>() / batch as f64
}

fn check_penalty_gradient(net: &mut Network, batch: usize, weight: f64, seed: u64, param_penalty: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_vec(&mut rng, batch * net.input_shape().len(), 1.0);
    net.zero_grad();
    let value = if param_penalty {
        net.param_gradient_penalty(&x, weight).unwrap()
    } else {
        let (_, cache) = net.forward(&x).unwrap();
        net.input_gradient_penalty(&cache, weight).unwrap()
    };
    let eval = |net: &mut Network| -> f64 {
        if param_penalty {
            net.clone().param_gradient_penalty(&x, weight).unwrap()
        } else {
            input_penalty(net, &x, batch, weight)
        }
    };
    assert!((value - eval(net)).abs() <= 1e-12 * value.abs().max(1.0));
    let analytic = net.grads().to_vec();
    let base = net.params().to_vec();
    let mut worst: f64 = 0.0;
    for _ in 0..60 {
        let j = rng.random_range(0..base.len());
        let mut p = base.clone();
        p[j] = base[j] + H;
        net.set_params(&p).unwrap();
        let up = eval(net);
        p[j] = base[j] - H;
        net.set_params(&p).unwrap();
        let down = eval(net);
        worst = worst.max(rel_err(analytic[j], (up - down) / (2.0 * H)));
    }
    net.set_params(&base).unwrap();
    worst
}

#[test]
fn input_gradient_penalty_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let widths = DiscriminatorWidths { conv1: 4, conv2: 6, hidden: 10 };
    let mut d = Network::new(Shape::new(4, 9, 8), &discriminator_layers(widths), &mut rng).unwrap();
    let worst = check_penalty_gradient(&mut d, 4, 10.0, 12, false);
    assert!(worst < REL_TOL, "R1 penalty gradient rel err {worst:e}");
    let mut full =
        Network::new(Shape::new(4, 28, 24), &discriminator_layers(DiscriminatorWidths::default()), &mut rng).unwrap();
    let worst = check_penalty_gradient(&mut full, 2, 10.0, 13, false);
    assert!(worst < REL_TOL, "R1 penalty gradient on default net rel err {worst:e}");
}

#[test]
fn upsampling_penalty_path_matches_finite_differences() {
    use LayerSpec::*;
    let specs = [
        Conv { out_channels: 3, kernel: 3, stride: 2 },
        Relu,
        Upsample { factor: 2 },
        Conv { out_channels: 2, kernel: 3, stride: 1 },
        Relu,
        Flatten,
        Dense { out_dim: 1 },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut net = Network::new(Shape::new(2, 6, 6), &specs, &mut rng).unwrap();
    let worst = check_penalty_gradient(&mut net, 3, 2.0, 22, false);
    assert!(worst < REL_TOL, "rel err {worst:e}");
}

#[test]
fn param_gradient_penalty_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let widths = DiscriminatorWidths { conv1: 3, conv2: 4, hidden: 6 };
    let mut d = Network::new(Shape::new(4, 6, 6), &discriminator_layers(widths), &mut rng).unwrap();
    let worst = check_penalty_gradient(&mut d, 3, 10.0, 32, true);
    assert!(worst < 1e-3, "parameter penalty gradient rel err {worst:e}");
}

#[test]
fn forward_output_is_a_fixture() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let net = Network::new(Shape::new(2, 28, 24), &q_network_layers(QNetWidths::default()), &mut rng).unwrap();
    let x: Vec<f64> = (0..2 * 28 * 24).map(|i| ((i * 37) % 17) as f64 / 17.0).collect();
    let y = net.predict(&x).unwrap();
    let sum: f64 = y.iter().sum();
    let probe = [y[0], y[100], y[671]];
    let expected_sum = FIXTURE_SUM;
    let expected = FIXTURE_PROBES;
    assert!((sum - expected_sum).abs() < 1e-12, "sum {sum:.17e}");
    for (a, b) in probe.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a:.17e} vs {b:.17e}");
    }
}

const FIXTURE_SUM: f64 = -7.51961745005998665e1;
const FIXTURE_PROBES: [f64; 3] = [-1.05350442572981345e-1, -1.13592974205163788e-1, -9.94434448613374378e-2];

#[test]
fn adam_runs_are_deterministic_and_descend() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Network::new(Shape::new(3, 1, 1), &[LayerSpec::Dense { out_dim: 1 }], &mut rng).unwrap();
        let mut adam = Adam::new(net.n_params(), 1e-2);
        let x = [0.5, -1.0, 2.0];
        let mut losses = Vec::new();
        for _ in 0..200 {
            let (y, cache) = net.forward(&x).unwrap();
            let err = y[0] - 3.0;
            losses.push(err * err);
            net.zero_grad();
            net.backward(&cache, &[2.0 * err]).unwrap();
            adam.step(&mut net).unwrap();
        }
        (net.params().to_vec(), losses)
    };
    let (a, la) = run();
    let (b, _) = run();
    assert_eq!(a, b);
    assert!(la.last().unwrap() < &(la[0] * 1e-2));
}

#[test]
fn relu_pattern_marks_positive_inputs() {
    use LayerSpec::*;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = Network::new(Shape::new(4, 1, 1), &[Relu, Dense { out_dim: 3 }, Relu], &mut rng).unwrap();
    let x = [0.5, -1.0, 0.0, 2.0, -0.5, 1.0, 3.0, -2.0];
    let pattern = net.relu_pattern(&x).unwrap();
    assert_eq!(pattern.len(), 8 + 6);
    // first layer sees the input channel-major: channel 0 of both samples, then channel 1, ...
    assert_eq!(&pattern[..8], &[true, false, false, true, false, true, true, false]);
    let y = net.predict(&x).unwrap();
    assert!(y.iter().all(|&v| v >= 0.0));
    assert!(net.relu_pattern(&x[..3]).is_err());
}
