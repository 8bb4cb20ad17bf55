use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use road_autodiff::{Graph, Tensor};
use road_core::losses::{distillation_loss, segmentation_loss, LabelCrop};
use road_core::model::*;
use road_core::scene::{generate_scene, Domain, Scene, SceneConfig};
use road_core::RoadError;

fn scene() -> Scene {
    generate_scene(&SceneConfig { image_size: (64, 64), seed: 11, ..Default::default() }).unwrap()
}

fn student(seed: u64) -> StudentModel<f32> {
    StudentModel::new(&BackboneConfig::default(), 5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// One plain SGD step on the segmentation loss of a 32x32 crop.
fn sgd_step(model: &mut StudentModel<f32>, s: &Scene) {
    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g);
    let x = g.constant(crop_tensor(&s.image, (0, 0), (32, 32)).unwrap());
    let logits = model.forward_segmentation(&mut g, &bound, x).unwrap();
    let labels: Vec<u8> = (0..32).flat_map(|r| (0..32).map(move |c| (r, c))).map(|(r, c)| s.labels.get(r, c)).collect();
    let crop = LabelCrop { labels, height: 32, width: 32, domain: Domain::Source };
    let loss = segmentation_loss(&mut g, &[logits], &[crop]).unwrap();
    let grads = g.backward(loss).unwrap();
    for ((_, p), v) in model.named_parameters_mut().into_iter().zip(bound.vars()) {
        if let Some(d) = grads.get(v) {
            p.data_mut().iter_mut().zip(d.data()).for_each(|(w, g)| *w -= 0.1 * g);
        }
    }
}

fn changed(before: &StudentModel<f32>, after: &StudentModel<f32>) -> Vec<(String, bool)> {
    before
        .named_parameters()
        .into_iter()
        .zip(after.named_parameters())
        .map(|((n, a), (_, b))| (n, a != b))
        .collect()
}

#[test]
fn feature_grid_shape() {
    let m = student(0);
    let mut g = Graph::<f32>::new();
    let bound = m.bind(&mut g);
    let x = g.constant(crop_tensor(&scene().image, (0, 0), (64, 64)).unwrap());
    let fm = m.forward_features(&mut g, &bound, x, (0, 0), Domain::Source).unwrap();
    assert_eq!(g.shape(fm.features), &[64, 16, 16]);
    assert_eq!(BackboneConfig::default().total_stride(), 4);
    let logits = m.forward_segmentation(&mut g, &bound, x).unwrap();
    assert_eq!(g.shape(logits), &[5, 64, 64]);
}

#[test]
fn crop_not_divisible_by_stride_is_a_shape_error() {
    let m = student(0);
    let mut g = Graph::<f32>::new();
    let bound = m.bind(&mut g);
    let x = g.constant(crop_tensor(&scene().image, (0, 0), (30, 32)).unwrap());
    assert!(matches!(m.forward_features(&mut g, &bound, x, (0, 0), Domain::Source), Err(RoadError::Shape(_))));
}

#[test]
fn teacher_is_deterministic_and_matches_identical_student() {
    let backbone = Backbone::<f32>::new(&BackboneConfig::default(), 3, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let teacher = TeacherModel::freeze(backbone.clone());
    let s = StudentModel::with_backbone(backbone, 5, &mut ChaCha8Rng::seed_from_u64(4));
    let img = scene().image;
    let mut g = Graph::<f32>::new();
    let x = g.constant(crop_tensor(&img, (0, 0), (32, 32)).unwrap());
    let a = teacher.forward_features(&mut g, x, (0, 0), Domain::Target).unwrap();
    let b = teacher.forward_features(&mut g, x, (0, 0), Domain::Target).unwrap();
    assert_eq!(g.value(a.features), g.value(b.features));
    let bound = s.bind(&mut g);
    let f = s.forward_features(&mut g, &bound, x, (0, 0), Domain::Target).unwrap();
    let d = distillation_loss(&mut g, &f, &a).unwrap();
    assert_eq!(g.value(d).item(), 0.0);
}

#[test]
fn frozen_prefix_controls_which_stages_move() {
    let s = scene();
    let stages = BackboneConfig::default().stages();

    let mut m = student(1);
    let before = m.clone();
    sgd_step(&mut m, &s);
    assert!(changed(&before, &m).iter().all(|(_, c)| *c));

    let mut m = student(1).freeze_prefix(1).unwrap();
    let before = m.clone();
    sgd_step(&mut m, &s);
    for (name, c) in changed(&before, &m) {
        assert_eq!(c, !name.starts_with("backbone.0."), "{name}");
    }

    let mut m = student(1).freeze_prefix(stages).unwrap();
    let before = m.clone();
    sgd_step(&mut m, &s);
    for (name, c) in changed(&before, &m) {
        assert_eq!(c, name.starts_with("head."), "{name}");
    }

    assert!(student(1).freeze_prefix(stages + 1).unwrap_err().is_config());
}

#[test]
fn frozen_stages_receive_no_gradient() {
    let m = student(2).freeze_prefix(2).unwrap();
    let mut g = Graph::<f32>::new();
    let bound = m.bind(&mut g);
    let x = g.constant(crop_tensor(&scene().image, (0, 0), (32, 32)).unwrap());
    let logits = m.forward_segmentation(&mut g, &bound, x).unwrap();
    let loss = g.sum(logits);
    let grads = g.backward(loss).unwrap();
    for (i, b) in bound.backbone.stages.iter().enumerate() {
        let got = grads.get(b.weight).map_or(true, |t| t.data().iter().all(|&v| v == 0.0));
        assert_eq!(got, i < 2, "stage {i}");
    }
}

#[test]
fn permuting_classifier_channels_permutes_argmax() {
    let m = student(5);
    let img = scene().image;
    let base = m.predict(&img, (0, 0), (32, 32)).unwrap();
    let perm = [3usize, 0, 4, 1, 2];
    let mut p = m.clone();
    let c = m.backbone.config.out_channels();
    let w = m.head.weight.data();
    let b = m.head.bias.data();
    p.head.weight = Tensor::from_fn(m.head.weight.shape(), |i| w[perm[i / c] * c + i % c]);
    p.head.bias = Tensor::from_fn(&[5], |i| b[perm[i]]);
    let inverse: Vec<u8> = (0..5).map(|k| perm.iter().position(|&q| q == k).unwrap() as u8).collect();
    let got = p.predict(&img, (0, 0), (32, 32)).unwrap();
    for (a, b) in base.iter().zip(&got) {
        assert_eq!(inverse[*a as usize], *b);
    }
}

#[test]
fn domain_heads_are_independent() {
    let bank = DomainClassifierBank::<f32>::new(9, 64, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(bank.len(), 9);
    let names: Vec<String> = bank.named_parameters().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.len(), 36);
    let w1: Vec<&Tensor<f32>> = bank.named_parameters().into_iter().filter(|(n, _)| n.ends_with("w1")).map(|(_, t)| t).collect();
    for i in 0..w1.len() {
        for j in i + 1..w1.len() {
            assert_ne!(w1[i], w1[j]);
        }
    }
    let mut g = Graph::<f32>::new();
    let bound = bank.bind(&mut g);
    let vars = bound_bank_vars(&bound);
    let mut unique = vars.clone();
    unique.sort_by_key(|v| v.index());
    unique.dedup();
    assert_eq!(unique.len(), vars.len());
}

#[test]
fn checksum_tracks_parameter_bytes() {
    let a = student(7);
    let mut b = a.clone();
    assert_eq!(parameter_checksum(&a), parameter_checksum(&b));
    b.head.bias.data_mut()[0] += 1e-6;
    assert_ne!(parameter_checksum(&a), parameter_checksum(&b));
}

#[test]
fn random_offsets_are_aligned_and_inside() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..200 {
        let (r, c) = random_offset(&mut rng, (128, 100), (64, 32), 4);
        assert!(r % 4 == 0 && c % 4 == 0 && r + 64 <= 128 && c + 32 <= 100);
    }
    assert_eq!(random_offset(&mut rng, (64, 64), (64, 64), 4), (0, 0));
}
