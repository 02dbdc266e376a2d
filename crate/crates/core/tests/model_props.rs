use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sfao_core::model::{masked_softmax, softmax};
use sfao_core::{Dataset, Mlp, MlpShape, ParamVector};

fn batch(rng: &mut ChaCha8Rng, n: usize, in_dim: usize, classes: usize) -> Dataset {
    let x = Array2::from_shape_fn((n, in_dim), |_| rng.sample(StandardNormal));
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Dataset::new(x, y).unwrap()
}

/// Largest relative error between analytic and central-difference gradients.
fn gradcheck(model: &Mlp, data: &Dataset, active: Option<&[usize]>) -> f64 {
    let h = 1e-5;
    let (_, grads) = model.loss_and_grads_masked(data, active).unwrap();
    let layers = model.layers();
    let mut worst: f64 = 0.0;
    for (l, layer) in layers.iter().enumerate() {
        for i in 0..layer.dim() {
            let mut probe = model.clone();
            let eval = |probe: &mut Mlp, delta: f64| {
                let mut ls = layers.clone();
                ls[l][i] += delta;
                probe.set_layers(&ls).unwrap();
                probe.loss(data, active).unwrap()
            };
            let numeric = (eval(&mut probe, h) - eval(&mut probe, -h)) / (2.0 * h);
            let analytic = grads[l][i];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences_on_4_3_2() {
    let shape = MlpShape {
        in_dim: 4,
        hidden: 3,
        classes: 2,
    };
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Mlp::init(shape, &mut rng);
        let data = batch(&mut rng, 8, 4, 2);
        let err = gradcheck(&model, &data, None);
        assert!(err <= 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn masked_gradients_match_finite_differences() {
    let shape = MlpShape {
        in_dim: 5,
        hidden: 6,
        classes: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Mlp::init(shape, &mut rng);
    let x = Array2::from_shape_fn((6, 5), |_| rng.sample(StandardNormal));
    let data = Dataset::new(x, vec![2, 3, 2, 3, 3, 2]).unwrap();
    let err = gradcheck(&model, &data, Some(&[2, 3]));
    assert!(err <= 1e-4, "relative error {err:e}");
    let (_, grads) = model.loss_and_grads_masked(&data, Some(&[2, 3])).unwrap();
    // inactive logits get no gradient
    assert_eq!(grads[3][0], 0.0);
    assert_eq!(grads[3][1], 0.0);
}

#[test]
fn zero_network_loss_is_log_classes() {
    let shape = MlpShape {
        in_dim: 3,
        hidden: 4,
        classes: 5,
    };
    let model = Mlp::zeros(shape);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data = batch(&mut rng, 10, 3, 5);
    assert!((model.loss(&data, None).unwrap() - 5f64.ln()).abs() < 1e-12);
    assert!(
        (model
            .loss(
                &data.select(&[0]),
                Some(&[data.labels[0], (data.labels[0] + 1) % 5])
            )
            .unwrap()
            - 2f64.ln())
        .abs()
            < 1e-12
    );
}

#[test]
fn checkpoint_round_trips_at_f32_precision() {
    let shape = MlpShape {
        in_dim: 7,
        hidden: 5,
        classes: 3,
    };
    let model = Mlp::init(shape, &mut ChaCha8Rng::seed_from_u64(4));
    let mut bytes = Vec::new();
    model.save(&mut bytes).unwrap();
    assert_eq!(&bytes[..4], b"SFAO");
    let back = Mlp::load(bytes.as_slice()).unwrap();
    assert_eq!(back.shape(), shape);
    for (a, b) in model.layers().iter().zip(back.layers()) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(*x as f32, *y as f32);
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(logits in prop::collection::vec(-500.0f64..500.0, 1..20)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn masked_softmax_ignores_inactive(logits in prop::collection::vec(-50.0f64..50.0, 2..12), pick in any::<u64>()) {
        let mask: Vec<bool> = (0..logits.len()).map(|i| i == 0 || (pick >> (i % 64)) & 1 == 1).collect();
        let p = masked_softmax(&logits, &mask);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (pi, m) in p.iter().zip(&mask) {
            if !m {
                prop_assert_eq!(*pi, 0.0);
            }
        }
    }

    #[test]
    fn loss_is_non_negative(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = MlpShape { in_dim: 3, hidden: 4, classes: 3 };
        let model = Mlp::init(shape, &mut rng);
        let data = batch(&mut rng, n, 3, 3);
        prop_assert!(model.loss(&data, None).unwrap() >= 0.0);
    }

    #[test]
    fn flattening_round_trips_bitwise(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = MlpShape { in_dim: 4, hidden: 3, classes: 2 };
        let model = Mlp::init(shape, &mut rng);
        let layers: Vec<ParamVector> = model.layers();
        let mut other = Mlp::zeros(shape);
        other.set_layers(&layers).unwrap();
        prop_assert_eq!(other.layers(), layers);
    }
}
