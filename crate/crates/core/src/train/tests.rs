use super::*;
use crate::attack::AttackMode;
use crate::data::{gen_synthetic, split_dataset, ShapeSpec};
use crate::model::ModelConfig;

fn tiny_model(classes: usize, seed: u64) -> ModelBundle {
    ModelBundle::new(
        ModelConfig {
            class_count: classes,
            point_widths: vec![8, 16, 32],
            classifier_widths: vec![16],
            discriminator_hidden: 8,
        },
        seed,
    )
    .unwrap()
}

fn tiny_split(classes: usize, per_class: usize, points: usize) -> DatasetSplit {
    let clouds = (0..classes * per_class)
        .map(|i| {
            let label = i % classes;
            let spec = ShapeSpec::for_class(label, 0.02, points).unwrap();
            gen_synthetic(&spec, label, 100 + i as u64).unwrap()
        })
        .collect();
    split_dataset(clouds, 0.75, 3).unwrap()
}

fn cfg(regime: Regime, epochs: usize) -> TrainConfig {
    TrainConfig {
        regime,
        epochs,
        batch_size: 4,
        lr0: 5e-3,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn one_batch(split: &DatasetSplit, n: usize) -> (Tensor, Vec<usize>) {
    let members: Vec<&PointCloud> = split.train.iter().take(n).collect();
    let labels = members.iter().map(|c| c.label).collect();
    (stack_points(&members).unwrap(), labels)
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let split = tiny_split(3, 4, 16);
    for regime in Regime::ALL {
        let mut model = tiny_model(3, 1);
        let before = model.clone();
        let metrics = train(&mut model, &split, &cfg(regime, 0)).unwrap();
        assert!(metrics.is_empty());
        assert_eq!(model, before);
    }
}

#[test]
fn simple_training_reduces_loss_and_skips_the_discriminator() {
    let split = tiny_split(3, 8, 32);
    let mut model = tiny_model(3, 2);
    let dis_before = model.fingerprint(&[Group::Discriminator]);
    let metrics = train_simple(&mut model, &split, &cfg(Regime::Simple, 5)).unwrap();
    assert_eq!(metrics.len(), 5);
    assert!(
        metrics[4].loss_cls_real < metrics[0].loss_cls_real,
        "{} !< {}",
        metrics[4].loss_cls_real,
        metrics[0].loss_cls_real
    );
    assert_eq!(model.fingerprint(&[Group::Discriminator]), dis_before);
    for m in &metrics {
        assert!(m.loss_cls_adv.is_none() && m.loss_dis.is_none() && m.acc_adv.is_none());
        assert!((0.0..=1.0).contains(&m.acc_real));
    }
}

#[test]
fn zero_epsilon_adversarial_equals_simple_with_doubled_batches() {
    let split = tiny_split(3, 4, 16);
    let mut c = cfg(Regime::Adversarial, 2);
    c.attack = AttackConfig {
        epsilon: 0.0,
        mode: AttackMode::Sign,
    };
    let mut adversarial = tiny_model(3, 3);
    train_adversarial(&mut adversarial, &split, &c).unwrap();

    let mut reference = tiny_model(3, 3);
    let mut opt = c.optimizer(&reference);
    let mut shuffle = rng::stream(c.seed, Stream::Shuffle);
    for epoch in 0..c.epochs {
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        order.shuffle(&mut shuffle);
        for idx in order.chunks(c.batch_size) {
            let members: Vec<&PointCloud> = idx.iter().map(|&i| &split.train[i]).collect();
            let x = stack_points(&members).unwrap();
            let labels: Vec<usize> = members.iter().map(|m| m.label).collect();
            for _ in 0..2 {
                classification_step(&mut reference, &mut opt, &x, &labels, c.lr_at(epoch), StepAt::default())
                    .unwrap();
            }
        }
    }
    assert_eq!(adversarial, reference);
}

#[test]
fn adversarial_metrics_report_both_losses() {
    let split = tiny_split(3, 4, 16);
    let mut model = tiny_model(3, 4);
    let metrics = train(&mut model, &split, &cfg(Regime::Adversarial, 1)).unwrap();
    let m = &metrics[0];
    assert!(m.loss_cls_adv.unwrap().is_finite());
    assert!(m.acc_adv.is_some());
    assert!(m.loss_dis.is_none() && m.loss_feat.is_none());
}

fn masked_substep(mask: LossMask) -> (ModelBundle, ModelBundle) {
    let split = tiny_split(3, 4, 16);
    let c = cfg(Regime::Defense, 1);
    let mut model = tiny_model(3, 5);
    let before = model.clone();
    let mut opt = c.optimizer(&model);
    let (x, labels) = one_batch(&split, 4);
    defense_step(&mut model, &mut opt, &x, &labels, ADVERSARIAL, 1e-2, mask, StepAt::default())
        .unwrap();
    (before, model)
}

fn same(a: &ModelBundle, b: &ModelBundle, g: Group) -> bool {
    a.fingerprint(&[g]) == b.fingerprint(&[g]) && a.group(g).eq(b.group(g))
}

#[test]
fn feature_loss_only_moves_the_extractor() {
    let (before, after) = masked_substep(LossMask {
        cls: false,
        dis: false,
        feat: true,
    });
    assert!(!same(&before, &after, Group::Extractor));
    assert!(same(&before, &after, Group::Classifier));
    assert!(same(&before, &after, Group::Discriminator));
}

#[test]
fn discriminator_loss_only_moves_the_discriminator() {
    let (before, after) = masked_substep(LossMask {
        cls: false,
        dis: true,
        feat: false,
    });
    assert!(same(&before, &after, Group::Extractor));
    assert!(same(&before, &after, Group::Classifier));
    assert!(!same(&before, &after, Group::Discriminator));
}

#[test]
fn classification_loss_never_moves_the_discriminator() {
    let (before, after) = masked_substep(LossMask {
        cls: true,
        dis: false,
        feat: false,
    });
    assert!(!same(&before, &after, Group::Extractor));
    assert!(!same(&before, &after, Group::Classifier));
    assert!(same(&before, &after, Group::Discriminator));
}

#[test]
fn defense_training_is_deterministic_and_reports_all_losses() {
    let split = tiny_split(3, 4, 16);
    let c = cfg(Regime::Defense, 2);
    let mut a = tiny_model(3, 6);
    let mut b = tiny_model(3, 6);
    let ma = train_defense(&mut a, &split, &c).unwrap();
    let mb = train_defense(&mut b, &split, &c).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(a, b);
    for m in &ma {
        for v in [m.loss_cls_adv, m.loss_dis, m.loss_feat, m.acc_adv, m.dis_acc, m.dis_real_prob_adv] {
            assert!(v.unwrap().is_finite());
        }
    }
}

#[test]
fn recorded_learning_rate_follows_the_schedule() {
    let split = tiny_split(2, 3, 8);
    let mut c = cfg(Regime::Simple, 5);
    c.decay_every = 2;
    let mut model = tiny_model(2, 7);
    let metrics = train(&mut model, &split, &c).unwrap();
    let lrs: Vec<f64> = metrics.iter().map(|m| m.lr).collect();
    assert_eq!(lrs, vec![5e-3, 5e-3, 2.5e-3, 2.5e-3, 1.25e-3]);
    let defaults = TrainConfig::default();
    assert_eq!(defaults.lr_at(39), 5e-4);
    assert_eq!(defaults.lr_at(40), 2.5e-4);
}

#[test]
fn non_finite_loss_reports_where_training_diverged() {
    let split = tiny_split(2, 3, 8);
    let mut model = tiny_model(2, 8);
    model.param_mut("fc1.bias").unwrap().value.data_mut()[0] = f64::NAN;
    match train(&mut model, &split, &cfg(Regime::Simple, 1)) {
        Err(Error::Diverged { epoch, batch, what }) => {
            assert_eq!((epoch, batch, what), (0, 0, "loss_cls"));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn regime_and_config_errors() {
    let split = tiny_split(2, 3, 8);
    let mut model = tiny_model(2, 9);
    assert!(matches!(
        train_defense(&mut model, &split, &cfg(Regime::Simple, 1)),
        Err(Error::Config(_))
    ));
    let mut bad = cfg(Regime::Simple, 1);
    bad.decay_gamma = 1.5;
    assert!(matches!(train(&mut model, &split, &bad), Err(Error::Config(_))));
    bad = cfg(Regime::Simple, 1);
    bad.batch_size = 0;
    assert!(matches!(train(&mut model, &split, &bad), Err(Error::Config(_))));
    assert!(matches!("mixed".parse::<Regime>(), Err(Error::Config(_))));
    assert_eq!("defense".parse::<Regime>().unwrap(), Regime::Defense);
}

#[test]
fn metrics_csv_leaves_absent_fields_empty() {
    let m = EpochMetrics {
        epoch: 0,
        lr: 0.001,
        loss_cls_real: 1.5,
        loss_cls_adv: None,
        loss_dis: None,
        loss_feat: None,
        acc_real: 0.25,
        acc_adv: None,
        dis_acc: None,
        dis_real_prob_adv: None,
    };
    let csv = metrics_csv(&[m]);
    assert_eq!(csv, format!("{METRICS_HEADER}\n0,0.0010000000000000000,1.5000000000000000,,,,0.25000000000000000,\n"));
}
