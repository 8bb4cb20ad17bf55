//! Teacher pretraining on a patch-level proxy task over real-style images.
//!
//! The backbone learns to predict the dominant class of a patch from globally
//! pooled features; afterwards only the backbone is kept and frozen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use road_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use sha2::{Digest, Sha256};

use crate::checkpoint::{load_parameters, store_parameters, Checkpoint};
use crate::error::{Result, RoadError};
use crate::model::{crop_tensor, random_offset, Backbone, BackboneConfig, Parameters, TeacherModel};
use crate::scene::{generate_scene, Domain, Scene, SceneConfig, Style, IGNORE_LABEL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Scenes in the training corpus.
    pub corpus: usize,
    /// Scenes held out for the proxy accuracy check.
    pub held_out: usize,
    /// First scene seed; far away from every dataset split.
    pub first_seed: u64,
    pub patch: usize,
    pub patches_per_scene: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            corpus: 120,
            held_out: 30,
            first_seed: 900_000,
            patch: 32,
            patches_per_scene: 8,
            epochs: 10,
            batch: 16,
            lr: 0.01,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        backbone.validate()?;
        if self.corpus == 0 {
            return Err(RoadError::Config("teacher corpus is empty".into()));
        }
        if self.patch == 0 || self.patch % backbone.total_stride() != 0 {
            return Err(RoadError::Config(format!(
                "patch {} not a positive multiple of stride {}",
                self.patch,
                backbone.total_stride()
            )));
        }
        if self.epochs == 0 || self.batch == 0 || self.patches_per_scene == 0 {
            return Err(RoadError::Config("epochs, batch and patches_per_scene must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(RoadError::Config(format!("bad optimiser settings lr {} momentum {}", self.lr, self.momentum)));
        }
        Ok(())
    }
}

/// Real-style scenes for pretraining: `(corpus, held_out)`, rendered in memory.
pub fn target_corpus(scene: &SceneConfig, config: &PretrainConfig) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let template = scene.with_style(Style::TargetReal);
    let render = |lo: u64, n: usize| -> Result<Vec<Scene>> {
        (lo..lo + n as u64).map(|s| generate_scene(&template.with_seed(s))).collect()
    };
    let corpus = render(config.first_seed, config.corpus)?;
    let held = render(config.first_seed + config.corpus as u64, config.held_out)?;
    Ok((corpus, held))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ProxyPatch {
    scene: usize,
    offset: (usize, usize),
    class: usize,
}

/// Most frequent non-ignored class inside the patch; lowest index on ties.
pub fn dominant_class(scene: &Scene, offset: (usize, usize), size: usize, num_classes: usize) -> Option<usize> {
    let mut counts = vec![0usize; num_classes];
    for r in offset.0..offset.0 + size {
        for c in offset.1..offset.1 + size {
            let v = scene.labels.get(r, c);
            if v != IGNORE_LABEL && (v as usize) < num_classes {
                counts[v as usize] += 1;
            }
        }
    }
    let best = (0..num_classes).rev().max_by_key(|&k| counts[k])?;
    (counts[best] > 0).then_some(best)
}

fn proxy_patches(scenes: &[Scene], cfg: &PretrainConfig, align: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<ProxyPatch> {
    let mut out = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        for _ in 0..cfg.patches_per_scene {
            let offset = random_offset(rng, (s.image.height, s.image.width), (cfg.patch, cfg.patch), align);
            if let Some(class) = dominant_class(s, offset, cfg.patch, k) {
                out.push(ProxyPatch { scene: i, offset, class });
            }
        }
    }
    out
}

/// Backbone plus a pooled linear classifier.
struct ProxyNet {
    backbone: Backbone<f32>,
    w: Tensor<f32>,
    b: Tensor<f32>,
}

impl ProxyNet {
    fn logits(&self, g: &mut Graph<f32>, bound: &crate::model::BoundBackbone, w: Var, b: Var, crops: &[Tensor<f32>]) -> Result<Var> {
        let pool = crops[0].shape()[1] / self.backbone.config.total_stride();
        let mut rows = Vec::with_capacity(crops.len());
        for crop in crops {
            let x = g.constant(crop.clone());
            let f = self.backbone.forward(g, bound, x)?;
            let pooled = g.pool_avg2d(f, pool, pool)?;
            rows.push(g.channels_last(pooled)?);
        }
        let picks: Vec<(usize, usize)> = (0..rows.len()).map(|i| (i, 0)).collect();
        let x = g.gather_rows(&rows, &picks)?;
        Ok(g.affine(x, w, b)?)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub teacher: TeacherModel<f32>,
    /// Mean proxy loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Proxy accuracy on held-out patches (NaN when none are held out).
    pub held_out_accuracy: f64,
}

/// Trains a backbone on the dominant-class proxy and freezes it.
pub fn pretrain_teacher(
    corpus: &[Scene],
    held_out: &[Scene],
    backbone: &BackboneConfig,
    num_classes: usize,
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    config.validate(backbone)?;
    if corpus.is_empty() {
        return Err(RoadError::Config("teacher corpus is empty".into()));
    }
    if corpus.iter().chain(held_out).any(|s| s.domain != Domain::Target) {
        return Err(RoadError::Config("teacher corpus must contain real-style scenes only".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let align = backbone.total_stride();
    let mut net = ProxyNet {
        backbone: Backbone::new(backbone, 3, &mut rng)?,
        w: {
            let c = backbone.out_channels();
            let std = (1.0 / c as f64).sqrt();
            let normal = rand_distr::Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(&[c, num_classes], |_| rand_distr::Distribution::sample(&normal, &mut rng) as f32)
        },
        b: Tensor::zeros(&[num_classes]),
    };
    let train = proxy_patches(corpus, config, align, num_classes, &mut rng);
    let test = proxy_patches(held_out, config, align, num_classes, &mut rng);
    if train.is_empty() {
        return Err(RoadError::Config("teacher corpus yields no labelled patches".into()));
    }
    let crop = |p: &ProxyPatch, scenes: &[Scene]| crop_tensor::<f32>(&scenes[p.scene].image, p.offset, (config.patch, config.patch));

    let mut velocity: Vec<Vec<f32>> = Vec::new();
    let mu = config.momentum as f32;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let steps_per_epoch = train.len().div_ceil(config.batch);
    let total_steps = steps_per_epoch * config.epochs;
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch) {
            let crops: Vec<Tensor<f32>> = chunk.iter().map(|&i| crop(&train[i], corpus)).collect::<Result<_>>()?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].class).collect();
            let mut g = Graph::new();
            let bound = net.backbone.bind(&mut g, |_| true);
            let w = g.param(net.w.clone());
            let b = g.param(net.b.clone());
            let logits = net.logits(&mut g, &bound, w, b, &crops)?;
            let loss = g.softmax_cross_entropy(logits, &labels, usize::MAX)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(RoadError::Contract(format!("non-finite proxy loss {value}")));
            }
            total += value;
            batches += 1;
            let grads = g.backward(loss)?;
            let lr = crate::train::poly_lr(step, total_steps, config.lr, 0.9)? as f32;
            step += 1;
            let mut vars = bound.vars();
            vars.extend([w, b]);
            let mut params: Vec<&mut Tensor<f32>> =
                net.backbone.named_parameters_mut().into_iter().map(|(_, t)| t).collect();
            params.push(&mut net.w);
            params.push(&mut net.b);
            if velocity.is_empty() {
                velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
            }
            for ((p, v), var) in params.into_iter().zip(velocity.iter_mut()).zip(vars) {
                let gr = grads.get(var).expect("every proxy parameter is reached");
                for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(gr.data()) {
                    *vv = mu * *vv + lr * gv;
                    *pv -= *vv;
                }
            }
        }
        epoch_losses.push(total / batches as f64);
    }

    let held_out_accuracy = if test.is_empty() {
        f64::NAN
    } else {
        let mut correct = 0usize;
        for chunk in test.chunks(64) {
            let crops: Vec<Tensor<f32>> = chunk.iter().map(|p| crop(p, held_out)).collect::<Result<_>>()?;
            let mut g = Graph::new();
            let bound = net.backbone.bind(&mut g, |_| false);
            let w = g.constant(net.w.clone());
            let b = g.constant(net.b.clone());
            let logits = net.logits(&mut g, &bound, w, b, &crops)?;
            let v = g.value(logits);
            for (row, p) in v.data().chunks(num_classes).zip(chunk) {
                let pred = (0..num_classes).fold(0, |best, k| if row[k] > row[best] { k } else { best });
                correct += usize::from(pred == p.class);
            }
        }
        correct as f64 / test.len() as f64
    };

    Ok(PretrainOutcome { teacher: TeacherModel::freeze(net.backbone), epoch_losses, held_out_accuracy })
}

fn backbone_hash(backbone: &BackboneConfig) -> [u8; 32] {
    Sha256::digest(serde_json::to_vec(backbone).expect("serializable config")).into()
}

/// Teacher backbone in checkpoint form; the hash field identifies the architecture.
pub fn teacher_checkpoint(teacher: &TeacherModel<f32>) -> Checkpoint {
    Checkpoint {
        iteration: 0,
        config_hash: backbone_hash(&teacher.backbone().config),
        tensors: store_parameters(teacher.backbone(), ""),
        rng: Vec::new(),
    }
}

pub fn load_teacher(checkpoint: &Checkpoint, backbone: &BackboneConfig) -> Result<TeacherModel<f32>> {
    if checkpoint.config_hash != backbone_hash(backbone) {
        return Err(RoadError::Config("teacher file was built for a different backbone".into()));
    }
    let mut b = Backbone::new(backbone, 3, &mut ChaCha8Rng::seed_from_u64(0))?;
    load_parameters(&mut b, checkpoint, "")?;
    Ok(TeacherModel::freeze(b))
}
