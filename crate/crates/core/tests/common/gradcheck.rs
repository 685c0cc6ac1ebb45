//! Central finite-difference check of reverse-mode gradients.

use lanekeep::nn::{batch_gradients, Gradients, LayerSpec, Mode, Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const INPUT_SHAPE: [usize; 3] = [1, 8, 12];

/// Every layer type on an 8x12 input, ending in a scalar.
pub fn composed_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv { in_channels: 1, out_channels: 3, kernel: (3, 3), stride: (2, 2) },
        LayerSpec::Elu,
        LayerSpec::Conv { in_channels: 3, out_channels: 4, kernel: (3, 3), stride: (1, 1) },
        LayerSpec::Elu,
        LayerSpec::Flatten,
        LayerSpec::Dense { in_units: 12, out_units: 6 },
        LayerSpec::Elu,
        LayerSpec::Dropout { keep_prob: 0.5 },
        LayerSpec::Dense { in_units: 6, out_units: 1 },
        LayerSpec::Identity,
    ]
}

/// One network per layer type: the layer under test followed by the
/// smallest head that reduces it to a scalar.
pub fn single_layer_specs() -> Vec<(&'static str, Vec<LayerSpec>)> {
    let head = |n| vec![LayerSpec::Flatten, LayerSpec::Dense { in_units: n, out_units: 1 }];
    let with = |layer: LayerSpec, n: usize| {
        let mut v = vec![layer];
        v.extend(head(n));
        v
    };
    vec![
        ("conv", with(LayerSpec::Conv { in_channels: 1, out_channels: 2, kernel: (3, 2), stride: (2, 3) }, 2 * 3 * 4)),
        ("dense", vec![LayerSpec::Flatten, LayerSpec::Dense { in_units: 96, out_units: 1 }]),
        ("elu", with(LayerSpec::Elu, 96)),
        ("dropout", with(LayerSpec::Dropout { keep_prob: 0.7 }, 96)),
        ("flatten", head(96)),
        ("identity", with(LayerSpec::Identity, 96)),
    ]
}

fn random_network(specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> Network {
    let mut net = Network::new(specs).unwrap();
    for p in net.params_mut() {
        p.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    net
}

/// Largest per-parameter relative error between analytic and finite-difference
/// gradients of the squared error, with dropout masks held fixed.
pub fn max_relative_error(specs: &[LayerSpec], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = random_network(specs, &mut rng);
    let n: usize = INPUT_SHAPE.iter().product();
    let x = Tensor::from_vec(INPUT_SHAPE.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let target = 0.3;
    let masks = net.sample_masks(x.shape(), &mut rng).unwrap();

    let mut grads = Gradients::zeros_like(&net);
    batch_gradients(&net, &[&x], &[target], std::slice::from_ref(&masks), &mut grads).unwrap();
    let analytic: Vec<f64> = grads.iter().flatten().copied().collect();

    let loss = |net: &Network| {
        let y = net.forward(&x, Mode::Train(&masks)).unwrap().data()[0];
        (y - target).powi(2)
    };
    let mut worst: f64 = 0.0;
    let mut k = 0;
    let sizes: Vec<usize> = net.params().map(Vec::len).collect();
    for (t, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let orig = net.params().nth(t).unwrap()[i];
            net.params_mut().nth(t).unwrap()[i] = orig + STEP;
            let up = loss(&net);
            net.params_mut().nth(t).unwrap()[i] = orig - STEP;
            let down = loss(&net);
            net.params_mut().nth(t).unwrap()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[k];
            let scale = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / scale);
            k += 1;
        }
    }
    assert_eq!(k, analytic.len());
    worst
}
