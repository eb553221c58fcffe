use proptest::prelude::*;
use rand::seq::SliceRandom;

use pointshield::attack::{fgsm, input_gradient, AttackConfig, AttackMode, Reduction};
use pointshield::autodiff::{uniform, Tensor};
use pointshield::data::{gen_synthetic, normalize_unit_sphere, split_dataset, stack_points, PointCloud, ShapeSpec};
use pointshield::embed::{compactness, compute_affinities, kl_divergence};
use pointshield::eval::{five_number, top_k_from_probs};
use pointshield::model::{encode, ModelBundle, ModelConfig};
use pointshield::rng::{stream, Stream};
use pointshield::train::{lr_schedule, train, Regime, TrainConfig};

fn small_model(classes: usize, seed: u64) -> ModelBundle {
    ModelBundle::new(
        ModelConfig {
            class_count: classes,
            point_widths: vec![16, 32, 64],
            classifier_widths: vec![32, 16],
            discriminator_hidden: 16,
        },
        seed,
    )
    .unwrap()
}

fn shapes(count: usize, points: usize, classes: usize, seed: u64) -> Vec<PointCloud> {
    (0..count)
        .map(|i| {
            let label = i % classes;
            let spec = ShapeSpec::for_class(label, 0.02, points).unwrap();
            gen_synthetic(&spec, label, seed.wrapping_add(i as u64)).unwrap()
        })
        .collect()
}

fn stack(clouds: &[PointCloud]) -> Tensor {
    stack_points(&clouds.iter().collect::<Vec<_>>()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn predictions_ignore_point_order(seed in any::<u64>(), n in 2usize..40) {
        let model = small_model(4, seed);
        let mut rng = stream(seed, Stream::Sample);
        let x = uniform(&[1, n, 3], -1.0, 1.0, &mut rng);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let permuted: Vec<f64> = order.iter().flat_map(|&i| x.data()[i * 3..i * 3 + 3].to_vec()).collect();
        let y = Tensor::new([1, n, 3], permuted).unwrap();
        let (a, b) = (model.log_probs(&x).unwrap(), model.log_probs(&y).unwrap());
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
        prop_assert_eq!(model.predict_topk(&x, 4).unwrap(), model.predict_topk(&y, 4).unwrap());
    }

    #[test]
    fn sign_attack_respects_the_budget(seed in 0u64..500, eps in 0.001f64..0.5) {
        let model = small_model(3, seed);
        let clouds = shapes(3, 24, 3, seed);
        let x = stack(&clouds);
        let labels: Vec<usize> = clouds.iter().map(|c| c.label).collect();
        let before = encode(&model);
        let cfg = AttackConfig { epsilon: eps, mode: AttackMode::Sign };
        let xp = fgsm(&model, &x, &labels, &cfg).unwrap();
        prop_assert_eq!(encode(&model), before);
        let (grad, _) = input_gradient(&model, &x, &labels, Reduction::Mean).unwrap();
        let mut max_delta = 0.0f64;
        for ((&a, &b), &g) in x.data().iter().zip(xp.data()).zip(grad.data()) {
            let expected = if g > 0.0 { a + eps } else if g < 0.0 { a - eps } else { a };
            prop_assert_eq!(b, expected);
            max_delta = max_delta.max((b - a).abs());
        }
        prop_assert!(max_delta <= eps * (1.0 + 1e-12));
        if grad.data().iter().any(|&g| g != 0.0) {
            prop_assert!((max_delta - eps).abs() <= 1e-12);
        }
    }

    #[test]
    fn top_k_is_monotone_and_top1_is_accuracy(
        rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 6), 1..30),
        seed in any::<u64>(),
    ) {
        let probs: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| { let s: f64 = r.iter().sum(); r.iter().map(|v| v / s).collect() })
            .collect();
        let mut rng = stream(seed, Stream::Sample);
        let labels: Vec<usize> = (0..probs.len()).map(|_| rand::Rng::random_range(&mut rng, 0..6)).collect();
        let t = Tensor::from_rows(&probs).unwrap();
        let accs: Vec<f64> = (1..=6).map(|k| top_k_from_probs(&t, &labels, k).unwrap()).collect();
        for w in accs.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        prop_assert_eq!(accs[5], 1.0);
        let argmax_hits = probs
            .iter()
            .zip(&labels)
            .filter(|(r, &l)| r.iter().enumerate().all(|(j, &v)| j == l || v < r[l]))
            .count();
        prop_assert_eq!(accs[0], argmax_hits as f64 / probs.len() as f64);
    }

    #[test]
    fn five_number_matches_sorted_interpolation(values in prop::collection::vec(-10.0f64..10.0, 1..50)) {
        let f = five_number(&values, "values").unwrap();
        let mut s = values.clone();
        s.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (s.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
        };
        prop_assert_eq!(f.min, s[0]);
        prop_assert_eq!(f.max, *s.last().unwrap());
        for (got, p) in [(f.q1, 0.25), (f.median, 0.5), (f.q3, 0.75)] {
            prop_assert!((got - q(p)).abs() <= 1e-12);
        }
        let v = f.values();
        prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn lr_schedule_is_step_decay(lr0 in 1e-5f64..1.0, epoch in 0usize..200, every in 1usize..50) {
        let expected = lr0 * 0.5f64.powi((epoch / every) as i32);
        prop_assert_eq!(lr_schedule(lr0, epoch, 0.5, every), expected);
        prop_assert!(lr_schedule(lr0, epoch + every, 0.5, every) < lr_schedule(lr0, epoch, 0.5, every));
    }

    #[test]
    fn kl_is_non_negative(seed in any::<u64>(), n in 4usize..15) {
        let mut rng = stream(seed, Stream::Sample);
        let x = uniform(&[n, 5], -1.0, 1.0, &mut rng);
        let p = compute_affinities(&x, 2.0).unwrap();
        let y: Vec<[f64; 2]> = (0..n)
            .map(|_| {
                let v = uniform(&[2], -3.0, 3.0, &mut rng);
                [v.data()[0], v.data()[1]]
            })
            .collect();
        prop_assert!(kl_divergence(&p, &y) >= 0.0);
    }

    #[test]
    fn compactness_ignores_scale_and_translation(seed in any::<u64>(), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let mut rng = stream(seed, Stream::Sample);
        let pts = uniform(&[12, 2], -1.0, 1.0, &mut rng);
        let y: Vec<[f64; 2]> = pts.data().chunks(2).map(|c| [c[0], c[1]]).collect();
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let moved: Vec<[f64; 2]> = y.iter().map(|p| [p[0] * scale + shift, p[1] * scale - shift]).collect();
        let (a, b) = (compactness(&y, &labels).unwrap(), compactness(&moved, &labels).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn normalization_is_idempotent(seed in any::<u64>()) {
        let cloud = shapes(1, 64, 1, seed).remove(0);
        let mut rng = stream(seed, Stream::Sample);
        let noise = uniform(&[64, 3], -2.0, 5.0, &mut rng);
        let points = cloud.points.iter().zip(noise.data().chunks(3))
            .map(|(p, n)| [p[0] * 3.0 + n[0], p[1] + n[1], p[2] - n[2]])
            .collect();
        let raw = PointCloud::new(points, 0, "raw").unwrap();
        let once = normalize_unit_sphere(raw);
        let twice = normalize_unit_sphere(once.clone());
        for (a, b) in once.points.iter().zip(&twice.points) {
            for d in 0..3 {
                prop_assert!((a[d] - b[d]).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn attack_raises_the_loss_of_a_trained_model() {
    let clouds = shapes(48, 64, 3, 900);
    let split = split_dataset(clouds, 0.75, 1).unwrap();
    let mut model = small_model(3, 2);
    let cfg = TrainConfig {
        regime: Regime::Simple,
        epochs: 8,
        batch_size: 8,
        lr0: 3e-3,
        seed: 4,
        ..TrainConfig::default()
    };
    train(&mut model, &split, &cfg).unwrap();
    let x = stack(&split.test);
    let labels: Vec<usize> = split.test.iter().map(|c| c.label).collect();
    let (_, real) = input_gradient(&model, &x, &labels, Reduction::Mean).unwrap();
    let xp = fgsm(&model, &x, &labels, &AttackConfig::default()).unwrap();
    let (_, adv) = input_gradient(&model, &xp, &labels, Reduction::Mean).unwrap();
    assert!(adv >= real, "adversarial loss {adv} < real loss {real}");
}

#[test]
fn identical_runs_give_identical_parameters() {
    let clouds = shapes(12, 16, 2, 50);
    let split = split_dataset(clouds, 0.75, 2).unwrap();
    let cfg = TrainConfig {
        regime: Regime::Defense,
        epochs: 2,
        batch_size: 3,
        seed: 8,
        ..TrainConfig::default()
    };
    let mut a = small_model(2, 3);
    let mut b = small_model(2, 3);
    train(&mut a, &split, &cfg).unwrap();
    train(&mut b, &split, &cfg).unwrap();
    assert_eq!(encode(&a), encode(&b));
}
