mod common;

use std::fs;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use road_core::checkpoint::Checkpoint;
use road_core::dataset::{generate_dataset, label_path, Dataset, LabelPurpose, TARGET_TRAIN, TARGET_VAL};
use road_core::model::{parameter_checksum, Backbone, BackboneConfig, TeacherModel};
use road_core::train::*;
use road_core::RoadError;

fn inputs<'a>(data: &'a TrainData, teacher: Option<&'a TeacherModel<f32>>) -> TrainInputs<'a> {
    TrainInputs {
        data,
        init: Init::Pretrained(teacher.map(|t| t.backbone()).expect("fixture teacher")),
        teacher,
        val: None,
        num_classes: 5,
    }
}

fn random_inputs(data: &TrainData) -> TrainInputs<'_> {
    TrainInputs { data, init: Init::Random(&DEFAULT_BACKBONE), teacher: None, val: None, num_classes: 5 }
}

static DEFAULT_BACKBONE: std::sync::LazyLock<BackboneConfig> = std::sync::LazyLock::new(BackboneConfig::default);

#[test]
fn batch_composition_and_alignment() {
    let data = tiny_data();
    let cfg = TrainConfig { batch_total: 10, batch_source: 5, ..tiny_train(Variant::DstSpt) };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let b = sample_batch(&data, &cfg, 4, &mut rng).unwrap();
        assert_eq!(b.source.len(), 5);
        assert_eq!(b.target.len(), 5);
        assert!(b.source.iter().all(|p| p.labels.is_some() && p.offset.0 % 4 == 0 && p.offset.1 % 4 == 0));
        assert!(b.target.iter().all(|p| p.labels.is_none() && p.offset.0 + 32 <= 64 && p.offset.1 + 32 <= 64));
    }
    let full = TrainConfig { crop: (64, 64), ..cfg };
    let b = sample_batch(&data, &full, 4, &mut rng).unwrap();
    assert!(b.source.iter().chain(&b.target).all(|p| p.offset == (0, 0)));
}

#[test]
fn batch_sequence_is_seeded() {
    let data = tiny_data();
    let cfg = tiny_train(Variant::Nonadapt);
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..5).map(|_| sample_batch(&data, &cfg, 4, &mut rng).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draw(3), draw(3));
    assert_ne!(draw(3), draw(4));
}

#[test]
fn poly_schedule_midpoint() {
    let lr = poly_lr(1000, 2000, 2.5e-4, 0.9).unwrap();
    assert!((lr - 2.5e-4 * 0.5f64.powf(0.9)).abs() < 1e-18);
    assert!((lr - 1.3398e-4).abs() < 1e-8);
    assert!(poly_lr(0, 0, 1.0, 0.9).unwrap_err().is_config());
    assert!(matches!(poly_lr(3, 2, 1.0, 0.9), Err(RoadError::Contract(_))));
}

#[test]
fn grid_parsing_is_ascii_only() {
    assert_eq!(parse_grid("3x3").unwrap(), (3, 3));
    assert_eq!(parse_grid("2x1").unwrap(), (2, 1));
    for bad in ["3×3", "3X3", "3x", "x3", "0x2", "3x3x3", ""] {
        assert!(parse_grid(bad).is_err(), "{bad}");
    }
}

#[test]
fn teacher_presence_must_match_variant() {
    let data = tiny_data();
    let teacher = tiny_teacher();
    assert!(Trainer::new(tiny_train(Variant::Dst), random_inputs(&data)).err().unwrap().is_config());
    let with = TrainInputs { teacher: Some(&teacher), ..random_inputs(&data) };
    assert!(Trainer::new(tiny_train(Variant::Nonadapt), with).err().unwrap().is_config());
}

#[test]
fn nonadapt_logs_zero_adaptation_terms_and_lr_schedule() {
    let data = tiny_data();
    let cfg = TrainConfig { iterations: 8, ..tiny_train(Variant::Nonadapt) };
    let mut t = Trainer::new(cfg.clone(), random_inputs(&data)).unwrap();
    t.run().unwrap();
    let rows = &t.log().rows;
    assert_eq!(rows.len(), 8);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.iteration, i);
        assert_eq!((r.dist, r.spt), (0.0, 0.0));
        assert_eq!(r.total, r.seg);
        assert_eq!(r.lr, poly_lr(i, 8, cfg.base_lr, cfg.lr_power).unwrap());
    }
    assert!(t.bank().is_none());
    assert!(matches!(t.step(), Err(RoadError::Contract(_))));
}

#[test]
fn dst_spt_bookkeeping_and_per_region_entries() {
    let data = tiny_data();
    let teacher = tiny_teacher();
    let cfg = TrainConfig { iterations: 5, ..tiny_train(Variant::DstSpt) };
    let mut t = Trainer::new(cfg.clone(), inputs(&data, Some(&teacher))).unwrap();
    let report = t.step().unwrap();
    assert_eq!(report.per_region.len(), 9);
    t.run().unwrap();
    for r in &t.log().rows {
        let expect = r.seg + cfg.lambda1 * r.dist + cfg.lambda2 * r.spt;
        assert!((r.total - expect).abs() <= 1e-9 * expect.abs(), "{r:?}");
        // the student starts as a copy of the teacher
        assert_eq!(r.dist > 0.0, r.iteration > 0, "{r:?}");
        assert!(r.spt > 0.0);
    }
    assert!(t.log().per_region.iter().all(|p| p.len() == 9));
}

#[test]
fn teacher_is_untouched_by_training() {
    let data = tiny_data();
    let teacher = tiny_teacher();
    let before = parameter_checksum(teacher.backbone());
    let mut t = Trainer::new(TrainConfig { iterations: 6, ..tiny_train(Variant::DstSpt) }, inputs(&data, Some(&teacher))).unwrap();
    t.run().unwrap();
    assert_eq!(parameter_checksum(teacher.backbone()), before);
    assert_ne!(parameter_checksum(&t.student().backbone), before);
}

#[test]
fn zero_weights_make_updates_independent_of_target_images() {
    let teacher = tiny_teacher();
    let cfg = TrainConfig { lambda1: 0.0, lambda2: 0.0, iterations: 4, ..tiny_train(Variant::DstSpt) };
    let data = tiny_data();
    let mut other = data.clone();
    for img in &mut other.target {
        img.data.iter_mut().for_each(|v| *v = v.wrapping_add(97));
    }
    let train = |d: &TrainData| {
        let mut t = Trainer::new(cfg.clone(), inputs(d, Some(&teacher))).unwrap();
        t.run().unwrap();
        t.student().clone()
    };
    assert_eq!(train(&data), train(&other));
}

#[test]
fn repeated_runs_write_identical_metrics() {
    let data = tiny_data();
    let teacher = tiny_teacher();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(tiny_train(Variant::DstSpt), inputs(&data, Some(&teacher))).unwrap().with_run_dir(dir.path());
        t.run().unwrap();
        (fs::read(dir.path().join("metrics.csv")).unwrap(), fs::read(dir.path().join("checkpoint.road")).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn kill_and_resume_matches_uninterrupted_run() {
    let data = tiny_data();
    let teacher = tiny_teacher();
    let cfg = tiny_train(Variant::DstSpt);

    let full_dir = tempfile::tempdir().unwrap();
    let mut full = Trainer::new(cfg.clone(), inputs(&data, Some(&teacher))).unwrap().with_run_dir(full_dir.path());
    full.run().unwrap();

    let dir = tempfile::tempdir().unwrap();
    {
        let mut t = Trainer::new(cfg.clone(), inputs(&data, Some(&teacher))).unwrap().with_run_dir(dir.path());
        // killed three steps past the checkpoint at 10
        t.run_until(13).unwrap();
    }
    let ckpt = Checkpoint::load(&dir.path().join("checkpoint.road")).unwrap();
    assert_eq!(ckpt.iteration, 10);
    let log = MetricsLog::read(dir.path()).unwrap();
    let mut resumed = Trainer::resume(cfg.clone(), inputs(&data, Some(&teacher)), &ckpt)
        .unwrap()
        .with_run_dir(dir.path())
        .with_log(log);
    resumed.run().unwrap();

    assert_eq!(resumed.student(), full.student());
    assert_eq!(resumed.bank(), full.bank());
    let read = |d: &std::path::Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(dir.path(), "metrics.csv"), read(full_dir.path(), "metrics.csv"));
    assert_eq!(read(dir.path(), "checkpoint.road"), read(full_dir.path(), "checkpoint.road"));

    let other = TrainConfig { lambda2: 0.5, ..cfg };
    assert!(Trainer::resume(other, inputs(&data, Some(&teacher)), &ckpt).err().unwrap().is_config());
}

#[test]
fn non_finite_loss_aborts_with_snapshot() {
    let data = tiny_data();
    let mut backbone = Backbone::<f32>::new(&BackboneConfig::default(), 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    backbone.stages[0].weight.data_mut()[0] = f32::NAN;
    let dir = tempfile::tempdir().unwrap();
    let ins = TrainInputs { init: Init::Pretrained(&backbone), ..random_inputs(&data) };
    let mut t = Trainer::new(tiny_train(Variant::Nonadapt), ins).unwrap().with_run_dir(dir.path());
    match t.step() {
        Err(RoadError::NonFinite { iteration, snapshot }) => {
            assert_eq!(iteration, 0);
            assert!(snapshot.starts_with(dir.path().join("diagnostics")));
            assert_eq!(Checkpoint::load(&snapshot).unwrap().iteration, 0);
        }
        other => panic!("expected non-finite abort, got {:?}", other.map(|r| r.total)),
    }
    assert_eq!(t.iteration(), 0);
}

#[test]
fn training_never_reads_target_train_labels() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(dir.path(), &tiny_spec()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let data = TrainData::load(&ds).unwrap();
    let val = ds.load_scenes(TARGET_VAL, LabelPurpose::Evaluation).unwrap();
    let teacher = tiny_teacher();
    let ins = TrainInputs { val: Some(&val), ..inputs(&data, Some(&teacher)) };
    let mut t = Trainer::new(TrainConfig { iterations: 4, val_every: 2, ..tiny_train(Variant::DstSpt) }, ins).unwrap();
    t.run().unwrap();
    assert_eq!(t.log().validation.len(), 2);

    let accessed = ds.accessed();
    let target_labels: Vec<_> = ds.manifest().split(TARGET_TRAIN).unwrap().seed_list().map(|s| label_path(dir.path(), TARGET_TRAIN, s)).collect();
    assert!(accessed.iter().any(|p| p.to_string_lossy().contains(TARGET_TRAIN)));
    assert!(accessed.iter().all(|p| !target_labels.contains(p)));
}

#[test]
fn frozen_variant_keeps_prefix_stages() {
    let data = tiny_data();
    let teacher = tiny_teacher();
    let ins = TrainInputs { teacher: None, ..inputs(&data, Some(&teacher)) };
    let mut t = Trainer::new(TrainConfig { iterations: 3, ..tiny_train(Variant::FrozenK) }, ins).unwrap();
    t.run().unwrap();
    let s = t.student();
    assert_eq!(s.backbone.stages[0], teacher.backbone().stages[0]);
    assert_eq!(s.backbone.stages[1], teacher.backbone().stages[1]);
    assert_ne!(s.backbone.stages[2], teacher.backbone().stages[2]);
}
