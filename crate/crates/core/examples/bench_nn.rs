use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqpick::nn::{q_network_layers, Adam, Network, QNetWidths, Shape};

fn time<F: FnMut()>(label: &str, n: usize, mut f: F) {
    let t = Instant::now();
    for _ in 0..n {
        f();
    }
    println!("{label}: {:.3} ms", t.elapsed().as_secs_f64() * 1e3 / n as f64);
}

fn main() {
    per_layer();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = Network::new(Shape::new(2, 28, 24), &q_network_layers(QNetWidths::default()), &mut rng).unwrap();
    let mut adam = Adam::new(net.n_params(), 1e-4);
    let x: Vec<f64> = (0..16 * 2 * 28 * 24).map(|i| ((i * 7919) % 13) as f64 / 13.0).collect();
    let n = 100;
    time("predict b16", n, || {
        net.predict(&x).unwrap();
    });
    time("forward b16", n, || {
        net.forward(&x).unwrap();
    });
    let (out, cache) = net.forward(&x).unwrap();
    time("backward b16", n, || {
        net.backward_params(&cache, &out).unwrap();
    });
    time("predict b1", n, || {
        net.predict(&x[..2 * 28 * 24]).unwrap();
    });
    time("adam", n, || {
        let mut probe = net.clone();
        adam.step(&mut probe).unwrap();
    });
}

#[allow(dead_code)]
fn per_layer() {
    use seqpick::nn::LayerSpec;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let full = q_network_layers(QNetWidths::default());
    let mut shape = Shape::new(2, 28, 24);
    for spec in full {
        let mut net = Network::new(shape, &[spec], &mut rng).unwrap();
        let x: Vec<f64> = (0..16 * shape.len()).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.3).collect();
        let (out, cache) = net.forward(&x).unwrap();
        time(&format!("{spec:?} fwd"), 200, || {
            net.predict(&x).unwrap();
        });
        time(&format!("{spec:?} bwd"), 200, || {
            net.backward(&cache, &out).unwrap();
        });
        shape = net.output_shape();
        let _ = LayerSpec::Relu;
    }
}
