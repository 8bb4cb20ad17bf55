#![allow(dead_code)]

use road_core::ablation::ExperimentSetup;
use road_core::dataset::{render_split, DatasetSpec, SOURCE_TRAIN, TARGET_TRAIN, TARGET_VAL};
use road_core::model::BackboneConfig;
use road_core::pretrain::{pretrain_teacher, target_corpus, PretrainConfig};
use road_core::scene::{Scene, SceneConfig};
use road_core::train::{TrainConfig, TrainData, Variant};
use road_core::model::TeacherModel;

pub fn tiny_spec() -> DatasetSpec {
    DatasetSpec::standard(SceneConfig { image_size: (64, 64), ..Default::default() }, 8, 8, 4)
}

pub fn tiny_pretrain() -> PretrainConfig {
    PretrainConfig { corpus: 12, held_out: 4, patches_per_scene: 4, epochs: 2, ..Default::default() }
}

pub fn tiny_train(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        crop: (32, 32),
        batch_total: 4,
        batch_source: 2,
        iterations: 30,
        val_every: 0,
        checkpoint_every: 10,
        ..Default::default()
    }
}

pub fn tiny_setup() -> ExperimentSetup {
    ExperimentSetup {
        dataset: tiny_spec(),
        backbone: BackboneConfig::default(),
        pretrain: tiny_pretrain(),
        train: TrainConfig { iterations: 4, checkpoint_every: 0, ..tiny_train(Variant::DstSpt) },
    }
}

pub fn tiny_data() -> TrainData {
    let spec = tiny_spec();
    TrainData::from_scenes(render_split(&spec, SOURCE_TRAIN).unwrap(), render_split(&spec, TARGET_TRAIN).unwrap())
}

pub fn tiny_val() -> Vec<Scene> {
    render_split(&tiny_spec(), TARGET_VAL).unwrap()
}

pub fn tiny_teacher() -> TeacherModel<f32> {
    let cfg = tiny_pretrain();
    let (corpus, held) = target_corpus(&tiny_spec().scene, &cfg).unwrap();
    pretrain_teacher(&corpus, &held, &BackboneConfig::default(), 5, &cfg).unwrap().teacher
}

/// Per-class IoU by explicit pixel-set intersection and union.
pub fn iou_oracle(pred: &[u8], gt: &[u8], k: usize, ignore: u8) -> (Vec<Option<f64>>, f64) {
    use std::collections::BTreeSet;
    let valid: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] != ignore).collect();
    let per: Vec<Option<f64>> = (0..k as u8)
        .map(|c| {
            let p: BTreeSet<usize> = valid.iter().copied().filter(|&i| pred[i] == c).collect();
            let g: BTreeSet<usize> = valid.iter().copied().filter(|&i| gt[i] == c).collect();
            let union = p.union(&g).count();
            (union > 0).then(|| p.intersection(&g).count() as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    (per, mean)
}

/// Region of the centre pixel of feature cell `(i, j)`, counting the cut
/// lines `floor(k · H / g)` at or above it.
pub fn region_oracle(
    image: (usize, usize),
    offset: (usize, usize),
    stride: usize,
    grid: (usize, usize),
    cell: (usize, usize),
) -> usize {
    let r = offset.0 + cell.0 * stride + stride / 2;
    let c = offset.1 + cell.1 * stride + stride / 2;
    let band = |p: usize, extent: usize, g: usize| (1..g).filter(|&k| k * extent / g <= p).count();
    band(r, image.0, grid.0) * grid.1 + band(c, image.1, grid.1)
}
