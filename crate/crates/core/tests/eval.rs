mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use road_core::ablation::{Experiment, Suite};
use road_core::eval::*;
use road_core::losses::make_partition;
use road_core::model::{BackboneConfig, StudentModel};
use road_core::RoadError;

fn random_maps(rng: &mut ChaCha8Rng, n: usize) -> (Vec<u8>, Vec<u8>) {
    let pred = (0..n).map(|_| rng.gen_range(0..5u8)).collect();
    let gt = (0..n).map(|_| if rng.gen_bool(0.1) { 255 } else { rng.gen_range(0..5u8) }).collect();
    (pred, gt)
}

#[test]
fn worked_example() {
    let r = iou(&confusion(&[0, 0, 0, 0], &[0, 0, 1, 1], 2, 255).unwrap());
    assert_eq!(r.per_class, vec![Some(0.5), Some(0.0)]);
    assert_eq!(r.mean_iou, 0.25);
}

#[test]
fn matches_set_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let (pred, gt) = random_maps(&mut rng, 256);
        let r = iou(&confusion(&pred, &gt, 5, 255).unwrap());
        let (per, mean) = common::iou_oracle(&pred, &gt, 5, 255);
        assert_eq!(r.per_class, per);
        assert_eq!(r.mean_iou, mean);
    }
}

#[test]
fn absent_classes_are_excluded() {
    let r = iou(&confusion(&[0, 1, 1], &[0, 1, 0], 4, 255).unwrap());
    assert_eq!(r.per_class[2..], [None, None]);
    assert_eq!(r.present(), 2);
    assert_eq!(r.mean_iou, (0.5 + 0.5) / 2.0);
}

#[test]
fn confusion_is_additive_and_iou_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (pred, gt) = random_maps(&mut rng, 300);
    let whole = confusion(&pred, &gt, 5, 255).unwrap();
    let mut parts = confusion(&pred[..120], &gt[..120], 5, 255).unwrap();
    parts += &confusion(&pred[120..], &gt[120..], 5, 255).unwrap();
    assert_eq!(parts, whole);
    assert_eq!(whole.total(), gt.iter().filter(|&&g| g != 255).count() as u64);

    let (p2, g2): (Vec<u8>, Vec<u8>) = pred.iter().zip(&gt).filter(|(_, &g)| g != 255).map(|(&p, &g)| (p, g)).unzip();
    let a = iou(&confusion(&p2, &g2, 5, 255).unwrap());
    let b = iou(&confusion(&g2, &p2, 5, 255).unwrap());
    assert_eq!(a.per_class, b.per_class);
    assert!(a.per_class.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn malformed_inputs_are_validation_errors() {
    assert!(matches!(confusion(&[0, 1], &[0], 2, 255), Err(RoadError::Validation(_))));
    assert!(matches!(confusion(&[0, 7], &[0, 1], 2, 255), Err(RoadError::Validation(_))));
}

#[test]
fn evaluation_is_deterministic_and_regions_pool_to_global() {
    let val = common::tiny_val();
    let m = StudentModel::<f32>::new(&BackboneConfig::default(), 5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let p = make_partition(3, 3, (64, 64)).unwrap();
    let a = evaluate_model(&m, &val, Some(&p), Inference::Full).unwrap();
    let b = evaluate_model(&m, &val, Some(&p), Inference::Full).unwrap();
    assert_eq!(a, b);
    let regions = a.region_confusion.as_ref().unwrap();
    assert_eq!(regions.len(), 9);
    let mut pooled = ConfusionMatrix::new(5);
    regions.iter().for_each(|r| pooled += r);
    assert_eq!(pooled, a.confusion);
    assert_eq!(a.report.per_region.as_ref().unwrap().len(), 9);
}

#[test]
fn tiled_inference_covers_every_pixel() {
    let val = common::tiny_val();
    let m = StudentModel::<f32>::new(&BackboneConfig::default(), 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let full = predict_image(&m, &val[0], Inference::Full).unwrap();
    for tile in [(64, 64), (32, 32), (24, 40)] {
        let t = predict_image(&m, &val[0], Inference::Tiled { height: tile.0, width: tile.1 }).unwrap();
        assert_eq!(t.len(), full.len());
        if tile == (64, 64) {
            assert_eq!(t, full);
        }
    }
    assert!(predict_image(&m, &val[0], Inference::Tiled { height: 80, width: 16 }).unwrap_err().is_config());
}

#[test]
fn suites_render_expected_shapes() {
    let exp = Experiment::new(common::tiny_setup()).unwrap();
    let table1 = exp.run_suite(Suite::Table1, &[0, 1, 2], 1).unwrap();
    assert_eq!(table1.runs.len(), 12);
    assert_eq!(table1.summary.len(), 4);
    let fig6 = exp.run_suite(Suite::Fig6, &[0], 2).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let files = render_tables(dir.path(), &[table1.clone(), fig6]).unwrap();
    assert_eq!(files.len(), 3);
    let t = std::fs::read_to_string(dir.path().join("table1.csv")).unwrap();
    let lines: Vec<&str> = t.lines().collect();
    assert_eq!(lines[0], "variant,sky,building,road,vehicle,pole,mean_iou");
    assert_eq!(lines.len(), 5);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 7));
    let f = std::fs::read_to_string(dir.path().join("fig6.csv")).unwrap();
    let keys: Vec<&str> = f.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(keys, ["1x1", "2x1", "2x2", "3x3"]);

    let again = Experiment::new(common::tiny_setup()).unwrap().run_suite(Suite::Table1, &[0, 1, 2], 1).unwrap();
    assert_eq!(again, table1);
}

#[test]
fn empty_results_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert!(matches!(render_tables(&out, &[]), Err(RoadError::Validation(_))));
    assert!(!out.exists());
}
