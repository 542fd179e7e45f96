use bmoe::analysis::prepare_all;
use bmoe::data::{generate_dataset, DatasetConfig};
use bmoe::embeddings::{build_label_embeddings, LabelEmbeddingTable};
use bmoe::encoders::RegionId;
use bmoe::gradcheck::GradcheckConfig;
use bmoe::model::{AblationMask, BMoEModel, PreparedSample};
use bmoe::train::{fit, pretrain_expert, region_subset, train_end_to_end, TrainConfig};
use bmoe::Error;

struct Setup {
    model: BMoEModel<f32>,
    data: Vec<PreparedSample<f32>>,
    embeddings: LabelEmbeddingTable,
    cfg: DatasetConfig,
}

fn setup(per_class: usize) -> Setup {
    let cfg = DatasetConfig {
        samples_per_class: per_class,
        ..DatasetConfig::separable(1)
    };
    let model = BMoEModel::new(GradcheckConfig::default().model(), cfg.class_region_map(), cfg.channels).unwrap();
    let samples = generate_dataset(&cfg).unwrap();
    let data = prepare_all(&model, &samples).unwrap();
    let names: Vec<Vec<String>> = cfg.classes.iter().map(|c| c.name.clone()).collect();
    let embeddings = build_label_embeddings(&names, None, 32, 0).unwrap();
    Setup {
        model,
        data,
        embeddings,
        cfg,
    }
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        pretrain_epochs: 2,
        embed_dim: 32,
        learning_rate: 0.005,
        ..TrainConfig::default()
    }
}

#[test]
fn pretraining_leaves_other_experts_untouched() {
    let mut s = setup(6);
    let before = s.model.store.clone();
    let (report, head) = pretrain_expert(&mut s.model, &s.data, RegionId::Head, &s.embeddings, &quick()).unwrap();
    assert_eq!(report.classes, vec![0, 1]);
    assert_eq!(head.classifier.outputs, 2);
    for (name, t) in s.model.store.iter() {
        let old = before.get(before.id(name).unwrap());
        let same = t.data().iter().zip(old.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        let owned = name.starts_with("semantic.") || name.starts_with("expert.head.");
        if !owned {
            assert!(same, "{name} changed");
        }
    }
    let moved = s
        .model
        .store
        .iter()
        .filter(|(n, _)| n.starts_with("expert.head."))
        .any(|(n, t)| t.data() != before.get(before.id(n).unwrap()).data());
    assert!(moved);
}

#[test]
fn temporary_classifier_matches_the_region_class_count() {
    let mut cfg = DatasetConfig::separable(1);
    cfg.samples_per_class = 3;
    cfg.classes[0].region = RegionId::UpperLimb;
    let model = BMoEModel::<f32>::new(GradcheckConfig::default().model(), cfg.class_region_map(), cfg.channels).unwrap();
    let mut s = setup(3);
    s.model = model;
    s.data = prepare_all(&s.model, &generate_dataset(&cfg).unwrap()).unwrap();
    let (report, head) = pretrain_expert(&mut s.model, &s.data, RegionId::UpperLimb, &s.embeddings, &quick()).unwrap();
    assert_eq!(report.classes, vec![0, 4, 5]);
    assert_eq!(head.classifier.outputs, 3);
    assert_eq!(report.samples, 9);
}

#[test]
fn region_sampler_only_yields_that_region() {
    let s = setup(5);
    for r in RegionId::ALL {
        let idx = region_subset(&s.data, &s.cfg.class_region_map(), r);
        assert_eq!(idx.len(), 10);
        for i in 0..s.data.len() {
            let inside = s.cfg.class_region_map()[s.data[i].label] == r;
            assert_eq!(idx.contains(&i), inside);
        }
    }
}

#[test]
fn region_without_classes_is_a_contract_error() {
    let s = setup(2);
    let mut map = s.cfg.class_region_map();
    for r in &mut map {
        if *r == RegionId::Body {
            *r = RegionId::Head;
        }
    }
    let mut model = BMoEModel::<f32>::new(GradcheckConfig::default().model(), map, s.cfg.channels).unwrap();
    let err = pretrain_expert(&mut model, &s.data, RegionId::Body, &s.embeddings, &quick()).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn pretraining_loss_decreases_over_the_first_epochs() {
    let mut s = setup(40);
    let cfg = TrainConfig {
        pretrain_epochs: 5,
        ..quick()
    };
    for r in [RegionId::Head, RegionId::LowerLimb] {
        let (report, _) = pretrain_expert(&mut s.model, &s.data, r, &s.embeddings, &cfg).unwrap();
        let losses: Vec<f64> = report.log.iter().map(|e| e.loss).collect();
        assert_eq!(losses.len(), 5);
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{r}: {losses:?}");
    }
}

#[test]
fn end_to_end_log_has_one_record_per_epoch() {
    let mut s = setup(3);
    let log = train_end_to_end(&mut s.model, &s.data, &AblationMask::all_on(), &TrainConfig { epochs: 3, ..quick() }).unwrap();
    assert_eq!(log.len(), 3);
    assert_eq!(log.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut s = setup(3);
    let before = s.model.store.clone();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        pretrain_learning_rate: 0.0,
        ..quick()
    };
    fit(&mut s.model, &s.data, Some(&s.embeddings), &AblationMask::all_on(), &cfg).unwrap();
    assert!(s.model.store.bitwise_eq(&before));
}

#[test]
fn same_seed_gives_identical_logs_and_weights() {
    let run = || {
        let mut s = setup(3);
        let log = fit(&mut s.model, &s.data, Some(&s.embeddings), &AblationMask::all_on(), &quick()).unwrap();
        (log, s.model)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert!(ma.store.bitwise_eq(&mb.store));
}

#[test]
fn out_of_range_labels_are_rejected() {
    let mut s = setup(2);
    s.data[0].label = 99;
    assert!(train_end_to_end(&mut s.model, &s.data, &AblationMask::all_on(), &quick()).is_err());
}

#[test]
fn milestones_scale_with_the_epoch_budget() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.milestones_for(100), vec![30, 60]);
    assert_eq!(cfg.milestones_for(20), vec![6, 12]);
    let sgd = cfg.optimizer::<f32>(cfg.learning_rate, 10).unwrap();
    assert_eq!(sgd.lr_at(0), 0.00125);
    assert!((sgd.lr_at(3) - 0.000125).abs() < 1e-15);
    assert!((sgd.lr_at(6) - 0.0000125).abs() < 1e-15);
}

#[test]
fn invalid_training_configs_are_rejected() {
    for cfg in [
        TrainConfig { alpha: -1.0, ..quick() },
        TrainConfig { epochs: 0, ..quick() },
        TrainConfig { batch_size: 0, ..quick() },
    ] {
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
    }
}
