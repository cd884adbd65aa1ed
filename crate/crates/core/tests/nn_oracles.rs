use eusml_core::nn::{
    self, grad_cam, gradient_check, gradient_check_indices, param_ranges, predict, random_input, softmax, train,
    ConvLayer, Dataset, Gradients, ToyCnn, TrainConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TENSOR_NAMES: [&str; 8] =
    ["conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b", "dense.w", "dense.b"];

/// Biases nudged away from zero so every tensor gets a non-trivial gradient.
fn model(size: usize, coords: bool, seed: u64) -> ToyCnn {
    let mut m = ToyCnn::new(3, size, coords, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    for t in m.params_mut() {
        if t.shape.len() == 1 {
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
    m
}

fn sample_indices(range: std::ops::Range<usize>, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if range.len() <= n {
        return range.collect();
    }
    (0..n).map(|_| rng.random_range(range.clone())).collect()
}

#[test]
fn backprop_matches_finite_differences_on_every_layer() {
    for (size, coords, seed) in [(16, false, 1), (16, true, 2), (64, true, 3)] {
        let m = model(size, coords, seed);
        let ranges = param_ranges(&m);
        let mut checked = [0usize; 8];
        for k in 0..3u64 {
            let img = random_input(size, seed * 10 + k);
            let label = (seed + k) as usize % 3;
            let (_, grads) = m.loss_and_grad(&img, label).unwrap();
            for (t, range) in ranges.iter().enumerate() {
                let picks = sample_indices(range.clone(), 40, seed + k);
                let r = gradient_check_indices(&m, &img, label, &grads, &picks).unwrap();
                assert!(r.max_rel_error < 1e-4, "{} at {size}x{size}: {r:?}", TENSOR_NAMES[t]);
                checked[t] += r.checked;
            }
            let r = nn::gradient_check_report(&m, &img, label, &grads, 200, seed).unwrap();
            assert_eq!(r.checked, 200);
            assert!(r.max_rel_error < 1e-4, "random 200 at {size}: {r:?}");
            assert!(gradient_check(&m, &img, label, 200, seed).unwrap() < 1e-4);
        }
        for (t, range) in ranges.iter().enumerate() {
            // most probes avoid kinks; every tensor is exercised
            assert!(checked[t] >= range.len().min(40), "{}: only {} checked", TENSOR_NAMES[t], checked[t]);
        }
    }
}

#[test]
fn sign_flipped_conv_gradient_is_caught() {
    let m = model(16, true, 5);
    let img = random_input(16, 6);
    let (_, grads) = m.loss_and_grad(&img, 1).unwrap();
    let mut corrupt = grads.clone();
    corrupt.0[2].iter_mut().for_each(|g| *g = -*g);
    let ranges = param_ranges(&m);
    let picks: Vec<usize> = ranges[2].clone().collect();
    assert!(gradient_check_indices(&m, &img, 1, &grads, &picks).unwrap().max_rel_error < 1e-4);
    assert!(gradient_check_indices(&m, &img, 1, &corrupt, &picks).unwrap().max_rel_error > 0.1);
    let all = Gradients(corrupt.0);
    assert!(nn::gradient_check_against(&m, &img, 1, &all, 500, 0).unwrap() > 0.1);
}

fn separable(n: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Dataset::default();
    for i in 0..n {
        let label = i % 2;
        let level = if label == 0 { -1.0 } else { 1.0 };
        d.push((0..size * size).map(|_| level + rng.random_range(-0.3..0.3)).collect(), label);
    }
    d
}

#[test]
fn loss_does_not_increase_on_separable_data() {
    let data = separable(64, 16, 1);
    let mut m = ToyCnn::new(2, 16, false, 3).unwrap();
    let hist = train(&mut m, &data, &TrainConfig { epochs: 12, lr: 0.01, ..Default::default() }).unwrap();
    for w in hist.windows(2) {
        assert!(w[1].loss <= w[0].loss, "{hist:?}");
    }
    assert_eq!(hist.last().unwrap().accuracy, 1.0);
}

#[test]
fn training_is_bit_deterministic() {
    let data = separable(40, 16, 2);
    let cfg = TrainConfig { epochs: 3, batch_size: 8, seed: 11, ..Default::default() };
    let run = || {
        let mut m = ToyCnn::new(2, 16, true, 4).unwrap();
        let h = train(&mut m, &data, &cfg).unwrap();
        (m, h)
    };
    let (m1, h1) = run();
    let (m2, h2) = run();
    assert_eq!(h1, h2);
    for (a, b) in m1.params().iter().zip(m2.params()) {
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let data = separable(20, 8, 3);
    let mut m = ToyCnn::new(2, 8, false, 5).unwrap();
    let before = m.clone();
    train(&mut m, &data, &TrainConfig { lr: 0.0, epochs: 4, ..Default::default() }).unwrap();
    assert_eq!(m, before);
}

#[test]
fn memorizes_ten_images() {
    let mut data = Dataset::default();
    for i in 0..10 {
        data.push(random_input(16, 100 + i), (i % 3) as usize);
    }
    let mut m = ToyCnn::new(3, 16, true, 6).unwrap();
    train(&mut m, &data, &TrainConfig { epochs: 150, batch_size: 10, ..Default::default() }).unwrap();
    assert_eq!(predict(&m, &data.images).unwrap(), data.labels);
}

#[test]
fn untrained_zero_model_predicts_lowest_class() {
    let mut m = ToyCnn::new(3, 16, false, 0).unwrap();
    for t in m.params_mut() {
        t.data.fill(0.0);
    }
    let imgs: Vec<Vec<f64>> = (0..5).map(|i| random_input(16, i)).collect();
    assert_eq!(predict(&m, &imgs).unwrap(), vec![0; 5]);
}

#[test]
fn grad_cam_of_single_feature_map_logit() {
    let mut m = ToyCnn::new(3, 32, false, 7).unwrap();
    let img = random_input(32, 8);
    let act = m.forward_one(&img).unwrap();
    let (a3, (_, h, w)) = act.conv_output(ConvLayer::Conv3, 32);
    let plane = h * w;
    // pick a channel that is active somewhere
    let c0 = (0..32).find(|&c| a3[c * plane..(c + 1) * plane].iter().any(|&v| v > 0.0)).unwrap();
    let map: Vec<f64> = a3[c0 * plane..(c0 + 1) * plane].to_vec();
    let dw = m.dense_weights_mut();
    dw.data.fill(0.0);
    // logit 1 = sum of feature map c0
    dw.data[32 + c0] = plane as f64;
    let heat = grad_cam(&m, &img, 1, ConvLayer::Conv3).unwrap();
    let max = map.iter().copied().fold(0.0, f64::max);
    for (v, a) in heat.values.iter().zip(&map) {
        assert!((v - a / max).abs() < 1e-12);
    }
    assert_eq!((heat.width, heat.height), (w, h));
    assert_eq!(heat.upsampled.len(), 32 * 32);
}

#[test]
fn all_negative_combination_gives_zero_heatmap() {
    let mut m = ToyCnn::new(3, 32, true, 9).unwrap();
    let dw = m.dense_weights_mut();
    dw.data[..32].iter_mut().for_each(|w| *w = -1.0);
    let heat = grad_cam(&m, &random_input(32, 1), 0, ConvLayer::Conv3).unwrap();
    assert!(heat.values.iter().all(|&v| v == 0.0));
    assert!(heat.upsampled.iter().all(|&v| v == 0.0));
    assert!(grad_cam(&m, &random_input(32, 1), 3, ConvLayer::Conv3).is_err());
}

#[test]
fn grad_cam_on_every_layer_is_normalized() {
    let m = model(32, true, 12);
    for layer in [ConvLayer::Conv1, ConvLayer::Conv2, ConvLayer::Conv3] {
        for class in 0..3 {
            let heat = grad_cam(&m, &random_input(32, class as u64), class, layer).unwrap();
            assert!(heat.values.iter().all(|&v| v >= 0.0));
            let max = heat.values.iter().copied().fold(0.0, f64::max);
            assert!(max == 0.0 || max == 1.0, "{layer:?} {max}");
            assert!(heat.upsampled.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(logits in prop::collection::vec(-500.0f64..500.0, 2..12)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn argmax_breaks_ties_low(v in prop::collection::vec(-3i32..3, 1..10)) {
        let f: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        let i = nn::argmax(&f);
        let max = v.iter().copied().max().unwrap();
        prop_assert_eq!(i, v.iter().position(|&x| x == max).unwrap());
    }
}
