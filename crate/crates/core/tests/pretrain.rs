mod common;

use road_core::model::{parameter_checksum, BackboneConfig};
use road_core::pretrain::*;
use road_core::scene::SceneConfig;

#[test]
fn default_pretraining_beats_chance_and_mostly_descends() {
    let cfg = PretrainConfig::default();
    let (corpus, held) = target_corpus(&SceneConfig::default(), &cfg).unwrap();
    assert_eq!((corpus.len(), held.len()), (cfg.corpus, cfg.held_out));
    let out = pretrain_teacher(&corpus, &held, &BackboneConfig::default(), 5, &cfg).unwrap();
    assert!(out.held_out_accuracy > 1.0 / 5.0 + 0.2, "accuracy {}", out.held_out_accuracy);
    let drops = out.epoch_losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(drops * 10 >= (out.epoch_losses.len() - 1) * 9, "{:?}", out.epoch_losses);
}

#[test]
fn same_seed_same_teacher() {
    let a = common::tiny_teacher();
    let b = common::tiny_teacher();
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(a.checksum(), parameter_checksum(a.backbone()));
}

#[test]
fn teacher_file_round_trip_and_backbone_guard() {
    let t = common::tiny_teacher();
    let ck = teacher_checkpoint(&t);
    let back = load_teacher(&ck, &BackboneConfig::default()).unwrap();
    assert_eq!(back.checksum(), t.checksum());
    let other = BackboneConfig { widths: vec![8, 16, 32], ..Default::default() };
    assert!(load_teacher(&ck, &other).err().unwrap().is_config());
}

#[test]
fn dominant_class_prefers_lowest_on_ties() {
    let scene = road_core::scene::Scene {
        image: road_core::scene::RgbImage { height: 2, width: 2, data: vec![0; 12] },
        labels: road_core::scene::LabelMap { height: 2, width: 2, data: vec![3, 1, 1, 3] },
        domain: road_core::scene::Domain::Target,
        seed: 0,
    };
    assert_eq!(dominant_class(&scene, (0, 0), 2, 5), Some(1));
    assert_eq!(dominant_class(&scene, (0, 0), 1, 5), Some(3));
}

#[test]
fn bad_inputs_are_config_errors() {
    let bb = BackboneConfig::default();
    assert!(pretrain_teacher(&[], &[], &bb, 5, &PretrainConfig::default()).err().unwrap().is_config());
    let odd = PretrainConfig { patch: 30, ..Default::default() };
    assert!(odd.validate(&bb).unwrap_err().is_config());
}
