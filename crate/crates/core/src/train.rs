//! Mixed-domain training with poly-scheduled SGD, variant selection,
//! checkpointing and metrics logging.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use road_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_parameters, restore_rng, rng_state, store_parameters, Checkpoint, StoredTensor};
use crate::dataset::{Dataset, LabelPurpose, SOURCE_TRAIN, TARGET_TRAIN};
use crate::error::{Result, RoadError};
use crate::eval::{evaluate_model, Inference};
use crate::losses::{
    distillation_loss, make_partition, road_loss, road_objective, segmentation_loss, spatial_adaptation_loss,
    FeatureMap, LabelCrop, LossReport, LossWeights, RegionPartition,
};
use crate::model::{
    bound_bank_vars, crop_tensor, random_offset, Backbone, BackboneConfig, DomainClassifierBank, Parameters,
    StudentModel, TeacherModel,
};
use crate::scene::{Domain, RgbImage, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Nonadapt,
    Dst,
    Spt,
    DstSpt,
    FrozenK,
    SourceDistill,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Nonadapt, Variant::Dst, Variant::Spt, Variant::DstSpt, Variant::FrozenK, Variant::SourceDistill];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Nonadapt => "nonadapt",
            Variant::Dst => "dst",
            Variant::Spt => "spt",
            Variant::DstSpt => "dst_spt",
            Variant::FrozenK => "frozen_k",
            Variant::SourceDistill => "source_distill",
        }
    }

    /// Needs a frozen teacher for a distillation term.
    pub fn uses_teacher(self) -> bool {
        matches!(self, Variant::Dst | Variant::DstSpt | Variant::SourceDistill)
    }

    /// Needs a region partition and a classifier bank.
    pub fn uses_spatial(self) -> bool {
        matches!(self, Variant::Spt | Variant::DstSpt)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = RoadError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| RoadError::Config(format!("unknown variant {s:?}")))
    }
}

/// Parses `HxW` with an ASCII `x`, e.g. `3x3`.
pub fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || RoadError::Config(format!("grid {s:?} is not of the form HxW"));
    let (h, w) = s.split_once('x').ok_or_else(bad)?;
    let num = |t: &str| {
        if t.is_empty() || !t.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        t.parse::<usize>().map_err(|_| bad()).and_then(|v| if v == 0 { Err(bad()) } else { Ok(v) })
    };
    Ok((num(h)?, num(w)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub grid: (usize, usize),
    pub lambda1: f64,
    pub lambda2: f64,
    pub base_lr: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub batch_total: usize,
    pub batch_source: usize,
    pub crop: (usize, usize),
    pub iterations: usize,
    pub seed: u64,
    /// Stages frozen by the `frozen_k` variant.
    pub frozen_stages: usize,
    /// Validation cadence in iterations; 0 disables periodic validation.
    pub val_every: usize,
    /// Checkpoint cadence in iterations when a run directory is set; 0 disables.
    pub checkpoint_every: usize,
    /// Learning-rate multiplier of the domain classifier heads.
    pub head_lr_mult: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::DstSpt,
            grid: (3, 3),
            lambda1: 0.1,
            lambda2: 0.01,
            base_lr: 2.5e-4,
            lr_power: 0.9,
            momentum: 0.9,
            batch_total: 10,
            batch_source: 5,
            crop: (64, 64),
            iterations: 2000,
            seed: 0,
            frozen_stages: 2,
            val_every: 200,
            checkpoint_every: 500,
            head_lr_mult: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        LossWeights { lambda1: self.lambda1, lambda2: self.lambda2 }.validate()?;
        if self.batch_source == 0 || self.batch_source > self.batch_total {
            return Err(RoadError::Config(format!(
                "source patches {} must be in 1..={}",
                self.batch_source, self.batch_total
            )));
        }
        if self.iterations == 0 {
            return Err(RoadError::Config("iterations must be >= 1".into()));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(RoadError::Config(format!("grid {:?} has an empty side", self.grid)));
        }
        if !(self.base_lr > 0.0 && self.lr_power > 0.0 && self.head_lr_mult > 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return Err(RoadError::Config("base_lr, lr_power, head_lr_mult must be > 0 and momentum in [0,1)".into()));
        }
        Ok(())
    }

    pub fn target_patches(&self) -> usize {
        self.batch_total - self.batch_source
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda1: self.lambda1, lambda2: self.lambda2 }
    }
}

/// Identity of a run: train config, architecture and class count.
pub fn config_hash(config: &TrainConfig, backbone: &BackboneConfig, num_classes: usize) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("serializable config"));
    h.update(serde_json::to_vec(backbone).expect("serializable config"));
    h.update((num_classes as u64).to_le_bytes());
    h.finalize().into()
}

/// `base · (1 − iter/total)^power`.
pub fn poly_lr(iter: usize, total: usize, base: f64, power: f64) -> Result<f64> {
    if total == 0 {
        return Err(RoadError::Config("poly schedule over zero iterations".into()));
    }
    if iter > total {
        return Err(RoadError::Contract(format!("iteration {iter} beyond schedule of {total}")));
    }
    Ok(base * (1.0 - iter as f64 / total as f64).powf(power))
}

/// Labelled source scenes and unlabelled target images.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub source: Vec<Scene>,
    pub target: Vec<RgbImage>,
}

impl TrainData {
    /// Reads source scenes with labels and target images without labels.
    pub fn load(dataset: &Dataset) -> Result<Self> {
        Ok(Self {
            source: dataset.load_scenes(SOURCE_TRAIN, LabelPurpose::Training)?,
            target: dataset.load_images(TARGET_TRAIN)?,
        })
    }

    /// Keeps only the images of target scenes.
    pub fn from_scenes(source: Vec<Scene>, target: Vec<Scene>) -> Self {
        Self { source, target: target.into_iter().map(|s| s.image).collect() }
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.source.first().map(|s| (s.image.height, s.image.width))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub scene: usize,
    pub offset: (usize, usize),
    pub domain: Domain,
    /// Present for source patches only.
    pub labels: Option<LabelCrop>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub source: Vec<Patch>,
    pub target: Vec<Patch>,
}

fn label_crop(scene: &Scene, offset: (usize, usize), size: (usize, usize)) -> LabelCrop {
    let w = scene.labels.width;
    let mut labels = Vec::with_capacity(size.0 * size.1);
    for r in offset.0..offset.0 + size.0 {
        labels.extend_from_slice(&scene.labels.data[r * w + offset.1..r * w + offset.1 + size.1]);
    }
    LabelCrop { labels, height: size.0, width: size.1, domain: scene.domain }
}

/// Uniform scenes and uniform stride-aligned crop offsets; source patches first.
pub fn sample_batch(data: &TrainData, config: &TrainConfig, align: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    if data.source.is_empty() || data.target.is_empty() {
        return Err(RoadError::Config("training needs non-empty source and target splits".into()));
    }
    let crop = config.crop;
    let fits = |h: usize, w: usize| crop.0 <= h && crop.1 <= w;
    if !data.source.iter().all(|s| fits(s.image.height, s.image.width)) || !data.target.iter().all(|t| fits(t.height, t.width)) {
        return Err(RoadError::Config(format!("crop {crop:?} larger than the images")));
    }
    let mut source = Vec::with_capacity(config.batch_source);
    for _ in 0..config.batch_source {
        let i = rng.gen_range(0..data.source.len());
        let s = &data.source[i];
        let offset = random_offset(rng, (s.image.height, s.image.width), crop, align);
        source.push(Patch { scene: i, offset, domain: Domain::Source, labels: Some(label_crop(s, offset, crop)) });
    }
    let mut target = Vec::with_capacity(config.target_patches());
    for _ in 0..config.target_patches() {
        let i = rng.gen_range(0..data.target.len());
        let t = &data.target[i];
        let offset = random_offset(rng, (t.height, t.width), crop, align);
        target.push(Patch { scene: i, offset, domain: Domain::Target, labels: None });
    }
    Ok(Batch { source, target })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub lr: f64,
    pub seg: f64,
    pub dist: f64,
    pub spt: f64,
    pub total: f64,
    pub skipped_regions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    /// Completed iterations when validation ran.
    pub iteration: usize,
    pub miou: f64,
}

/// Loss rows per step (`iteration` is the 0-based step index), periodic
/// validation rows and wall-clock seconds per step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    pub per_region: Vec<Vec<f64>>,
    pub validation: Vec<ValidationRow>,
    pub wall_seconds: Vec<f64>,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let io = |e: csv::Error| RoadError::Format { path: path.to_path_buf(), detail: e.to_string() };
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| RoadError::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let bad = |e: csv::Error| RoadError::Format { path: path.to_path_buf(), detail: e.to_string() };
    let mut r = csv::Reader::from_path(path).map_err(bad)?;
    r.deserialize().map(|row| row.map_err(bad)).collect()
}

pub const METRICS_HEADER: [&str; 7] = ["iteration", "lr", "seg", "dist", "spt", "total", "skipped_regions"];

impl MetricsLog {
    /// `metrics.csv`, `val.csv` and `timing.csv` (kept apart so the first two
    /// are reproducible byte for byte).
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_csv(&dir.join("metrics.csv"), &self.rows, &METRICS_HEADER)?;
        write_csv(&dir.join("val.csv"), &self.validation, &["iteration", "miou"])?;
        let timing: Vec<(usize, f64)> = self.rows.iter().map(|r| r.iteration).zip(self.wall_seconds.iter().copied()).collect();
        write_csv(&dir.join("timing.csv"), &timing, &["iteration", "seconds"])
    }

    /// Loads rows written by [`MetricsLog::write`] (timings are not restored).
    pub fn read(dir: &Path) -> Result<Self> {
        let rows: Vec<MetricsRow> = read_csv(&dir.join("metrics.csv"))?;
        let validation = if dir.join("val.csv").exists() { read_csv(&dir.join("val.csv"))? } else { Vec::new() };
        Ok(Self { per_region: vec![Vec::new(); rows.len()], rows, validation, wall_seconds: Vec::new() })
    }

    fn truncate_after(&mut self, completed: usize) {
        let keep = self.rows.iter().take_while(|r| r.iteration < completed).count();
        self.rows.truncate(keep);
        self.per_region.truncate(keep);
        self.wall_seconds.truncate(keep.min(self.wall_seconds.len()));
        self.validation.retain(|v| v.iteration <= completed);
    }
}

/// How the student backbone starts.
#[derive(Debug, Clone, Copy)]
pub enum Init<'a> {
    Pretrained(&'a Backbone<f32>),
    Random(&'a BackboneConfig),
}

/// Borrowed inputs of a run.
#[derive(Debug, Clone, Copy)]
pub struct TrainInputs<'a> {
    pub data: &'a TrainData,
    pub init: Init<'a>,
    /// Required exactly when the variant distils.
    pub teacher: Option<&'a TeacherModel<f32>>,
    /// Labelled target-style scenes for periodic validation.
    pub val: Option<&'a [Scene]>,
    pub num_classes: usize,
}

pub struct Trainer<'a> {
    config: TrainConfig,
    inputs: TrainInputs<'a>,
    partition: Option<RegionPartition>,
    student: StudentModel<f32>,
    bank: Option<DomainClassifierBank<f32>>,
    momentum: BTreeMap<String, Tensor<f32>>,
    rng: ChaCha8Rng,
    iteration: usize,
    log: MetricsLog,
    run_dir: Option<PathBuf>,
}

const INIT_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, inputs: TrainInputs<'a>) -> Result<Self> {
        config.validate()?;
        let variant = config.variant;
        if variant.uses_teacher() != inputs.teacher.is_some() {
            return Err(RoadError::Config(format!(
                "variant {variant} {} a teacher",
                if variant.uses_teacher() { "needs" } else { "must not get" }
            )));
        }
        let image = inputs
            .data
            .image_size()
            .ok_or_else(|| RoadError::Config("source split is empty".into()))?;
        if inputs.data.target.is_empty() {
            return Err(RoadError::Config("target split is empty".into()));
        }
        if inputs.data.source.iter().any(|s| s.domain != Domain::Source) {
            return Err(RoadError::Config("source split holds non-source scenes".into()));
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        init_rng.set_stream(INIT_STREAM);
        let backbone = match inputs.init {
            Init::Pretrained(b) => b.clone(),
            Init::Random(cfg) => Backbone::new(cfg, 3, &mut init_rng)?,
        };
        if let Some(t) = inputs.teacher {
            if t.backbone().config != backbone.config {
                return Err(RoadError::Config("teacher and student backbones differ".into()));
            }
        }
        let stride = backbone.config.total_stride();
        if config.crop.0 % stride != 0 || config.crop.1 % stride != 0 {
            return Err(RoadError::Config(format!("crop {:?} not divisible by stride {stride}", config.crop)));
        }
        let channels = backbone.config.out_channels();
        let mut student = StudentModel::with_backbone(backbone, inputs.num_classes, &mut init_rng);
        if variant == Variant::FrozenK {
            student = student.freeze_prefix(config.frozen_stages)?;
        }
        let (partition, bank) = if variant.uses_spatial() {
            let p = make_partition(config.grid.0, config.grid.1, image)?;
            let bank = DomainClassifierBank::new(p.regions(), channels, &mut init_rng);
            (Some(p), Some(bank))
        } else {
            (None, None)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SAMPLE_STREAM);
        Ok(Self {
            config,
            inputs,
            partition,
            student,
            bank,
            momentum: BTreeMap::new(),
            rng,
            iteration: 0,
            log: MetricsLog::default(),
            run_dir: None,
        })
    }

    /// Rebuilds a trainer from a checkpoint written by the same config.
    pub fn resume(config: TrainConfig, inputs: TrainInputs<'a>, checkpoint: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(config, inputs)?;
        if checkpoint.config_hash != t.config_hash() {
            return Err(RoadError::Config("checkpoint was written by a different configuration".into()));
        }
        load_parameters(&mut t.student, checkpoint, "student/")?;
        if let Some(bank) = t.bank.as_mut() {
            load_parameters(bank, checkpoint, "bank/")?;
        }
        for (name, stored) in &checkpoint.tensors {
            if let (Some(key), StoredTensor::F32(v)) = (name.strip_prefix("momentum/"), stored) {
                t.momentum.insert(key.to_string(), v.clone());
            }
        }
        t.rng = restore_rng(&checkpoint.rng)?;
        t.iteration = checkpoint.iteration as usize;
        Ok(t)
    }

    /// Directory for metrics, checkpoints and diagnostics.
    pub fn with_run_dir(mut self, dir: &Path) -> Self {
        self.run_dir = Some(dir.to_path_buf());
        self
    }

    /// Continues an existing log (e.g. read back after a resume).
    pub fn with_log(mut self, mut log: MetricsLog) -> Self {
        log.truncate_after(self.iteration);
        self.log = log;
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn config_hash(&self) -> [u8; 32] {
        config_hash(&self.config, &self.student.backbone.config, self.student.num_classes)
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn student(&self) -> &StudentModel<f32> {
        &self.student
    }

    pub fn bank(&self) -> Option<&DomainClassifierBank<f32>> {
        self.bank.as_ref()
    }

    pub fn partition(&self) -> Option<&RegionPartition> {
        self.partition.as_ref()
    }

    pub fn log(&self) -> &MetricsLog {
        &self.log
    }

    pub fn into_parts(self) -> (StudentModel<f32>, Option<DomainClassifierBank<f32>>, MetricsLog) {
        (self.student, self.bank, self.log)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = store_parameters(&self.student, "student/");
        if let Some(bank) = &self.bank {
            tensors.extend(store_parameters(bank, "bank/"));
        }
        tensors.extend(self.momentum.iter().map(|(n, t)| (format!("momentum/{n}"), StoredTensor::F32(t.clone()))));
        Checkpoint { iteration: self.iteration as u64, config_hash: self.config_hash(), tensors, rng: rng_state(&self.rng) }
    }

    /// Samples the next batch without consuming it (for inspection tools).
    pub fn peek_batch(&self) -> Result<Batch> {
        let mut rng = self.rng.clone();
        sample_batch(self.inputs.data, &self.config, self.student.backbone.config.total_stride(), &mut rng)
    }

    /// Builds the full objective on `graph` for `batch`.
    pub fn build_objective(&self, g: &mut Graph<f32>, batch: &Batch) -> Result<Objective> {
        let student = &self.student;
        let data = self.inputs.data;
        let bound = student.bind(g);
        let bank = self.bank.as_ref().map(|b| b.bind(g));
        let crop = self.config.crop;
        let variant = self.config.variant;

        let mut maps: Vec<FeatureMap> = Vec::with_capacity(batch.source.len() + batch.target.len());
        let mut logits = Vec::with_capacity(batch.source.len());
        let mut labels = Vec::with_capacity(batch.source.len());
        let mut crops: Vec<Var> = Vec::new();
        for p in &batch.source {
            let x = g.constant(crop_tensor(&data.source[p.scene].image, p.offset, crop)?);
            let fm = student.forward_features(g, &bound, x, p.offset, Domain::Source)?;
            logits.push(student.classify(g, &bound, fm.features, crop)?);
            labels.push(p.labels.clone().ok_or_else(|| RoadError::Contract("source patch without labels".into()))?);
            maps.push(fm);
            crops.push(x);
        }
        for p in &batch.target {
            let x = g.constant(crop_tensor(&data.target[p.scene], p.offset, crop)?);
            maps.push(student.forward_features(g, &bound, x, p.offset, Domain::Target)?);
            crops.push(x);
        }
        let seg = segmentation_loss(g, &logits, &labels)?;

        let dist = match (variant, self.inputs.teacher) {
            (Variant::Dst | Variant::DstSpt | Variant::SourceDistill, Some(teacher)) => {
                let domain = if variant == Variant::SourceDistill { Domain::Source } else { Domain::Target };
                let mut terms = Vec::new();
                for (fm, &x) in maps.iter().zip(&crops).filter(|(fm, _)| fm.domain == domain) {
                    let z = teacher.forward_features(g, x, fm.crop_offset, domain)?;
                    terms.push(distillation_loss(g, fm, &z)?);
                }
                let w = 1.0 / terms.len() as f32;
                let weighted: Vec<(Var, f32)> = terms.into_iter().map(|t| (t, w)).collect();
                Some(g.linear_combination(&weighted)?)
            }
            _ => None,
        };

        let mut per_region = Vec::new();
        let mut skipped = 0;
        let spt = match (&self.partition, &bank) {
            (Some(partition), Some(heads)) => match spatial_adaptation_loss(g, &maps, partition, heads) {
                Ok(s) => {
                    per_region = s.per_region.clone();
                    skipped = s.skipped;
                    Some(s.total)
                }
                Err(RoadError::DegenerateStep) => {
                    skipped = partition.regions();
                    per_region = vec![None; partition.regions()];
                    None
                }
                Err(e) => return Err(e),
            },
            _ => None,
        };
        let total = road_objective(g, seg, dist, spt, self.config.weights())?;
        Ok(Objective { bound, bank, seg, dist, spt, per_region, skipped, total })
    }

    /// One SGD step; returns the loss components.
    pub fn step(&mut self) -> Result<LossReport> {
        if self.iteration >= self.config.iterations {
            return Err(RoadError::Contract(format!("schedule of {} iterations is complete", self.config.iterations)));
        }
        let started = Instant::now();
        let it = self.iteration;
        let lr = poly_lr(it, self.config.iterations, self.config.base_lr, self.config.lr_power)?;
        let batch = sample_batch(self.inputs.data, &self.config, self.student.backbone.config.total_stride(), &mut self.rng)?;
        let mut g = Graph::new();
        let obj = self.build_objective(&mut g, &batch)?;
        let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item() as f64);
        let (l1, l2) = (self.config.lambda1, self.config.lambda2);
        let seg = value(Some(obj.seg));
        let dist = value(obj.dist);
        let spt = value(obj.spt);
        let graph_total = value(Some(obj.total));
        let report = match road_loss(seg, dist, spt, l1, l2) {
            Ok(r) if graph_total.is_finite() => r,
            _ => return Err(self.abort_non_finite(it)),
        };

        let grads = g.backward(obj.total)?;
        let mu = self.config.momentum as f32;
        let head_lr = (lr * self.config.head_lr_mult) as f32;
        let momentum = &mut self.momentum;
        let mut apply = |name: String, p: &mut Tensor<f32>, var: Var, lr32: f32| {
            // parameters the loss did not reach (frozen stages, unused heads) stay untouched
            let Some(gr) = grads.get(var) else { return };
            let v = momentum.entry(name).or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(gr.data()) {
                *vv = mu * *vv + lr32 * gv;
                *pv -= *vv;
            }
        };
        for ((name, p), var) in self.student.named_parameters_mut().into_iter().zip(obj.bound.vars()) {
            apply(name, p, var, lr as f32);
        }
        if let (Some(bank), Some(bound)) = (self.bank.as_mut(), obj.bank.as_ref()) {
            for ((name, p), var) in bank.named_parameters_mut().into_iter().zip(bound_bank_vars(bound)) {
                apply(name, p, var, head_lr);
            }
        }

        let per_region: Vec<f64> = obj.per_region.iter().map(|r| r.map_or(f64::NAN, |v| g.value(v).item() as f64)).collect();
        let non_empty = per_region.iter().filter(|v| !v.is_nan()).count();
        self.log.rows.push(MetricsRow {
            iteration: it,
            lr,
            seg: report.seg,
            dist: report.dist,
            spt: report.spt,
            total: report.total,
            skipped_regions: obj.skipped,
        });
        self.log.per_region.push(per_region.clone());
        self.log.wall_seconds.push(started.elapsed().as_secs_f64());
        self.iteration += 1;
        Ok(LossReport { per_region, non_empty_regions: non_empty, ..report })
    }

    fn abort_non_finite(&self, iteration: usize) -> RoadError {
        let dir = self.run_dir.clone().unwrap_or_else(std::env::temp_dir).join("diagnostics");
        let snapshot = dir.join(format!("nonfinite-{iteration:06}.ckpt"));
        let written = fs::create_dir_all(&dir).is_ok() && self.checkpoint().save(&snapshot).is_ok();
        RoadError::NonFinite { iteration, snapshot: if written { snapshot } else { PathBuf::from("<unwritten>") } }
    }

    /// mIoU of the current student on the validation scenes.
    pub fn validate_now(&self) -> Result<Option<f64>> {
        match self.inputs.val {
            Some(val) if !val.is_empty() => {
                Ok(Some(evaluate_model(&self.student, val, None, Inference::Full)?.report.mean_iou))
            }
            _ => Ok(None),
        }
    }

    /// Trains until `iteration` steps are complete, validating and
    /// checkpointing at the configured cadence.
    pub fn run_until(&mut self, iteration: usize) -> Result<()> {
        let end = iteration.min(self.config.iterations);
        while self.iteration < end {
            self.step()?;
            let done = self.iteration;
            if self.config.val_every > 0 && (done % self.config.val_every == 0 || done == self.config.iterations) {
                if let Some(miou) = self.validate_now()? {
                    self.log.validation.push(ValidationRow { iteration: done, miou });
                }
            }
            if let Some(dir) = &self.run_dir {
                if self.config.checkpoint_every > 0 && (done % self.config.checkpoint_every == 0 || done == self.config.iterations) {
                    self.checkpoint().save(&dir.join("checkpoint.road"))?;
                    self.log.write(dir)?;
                }
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.iterations)
    }
}

/// The student stored in a training checkpoint.
pub fn load_student(checkpoint: &Checkpoint, backbone: &BackboneConfig, num_classes: usize) -> Result<StudentModel<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut student = StudentModel::new(backbone, num_classes, &mut rng)?;
    load_parameters(&mut student, checkpoint, "student/")?;
    Ok(student)
}

/// Graph nodes of one step's objective.
pub struct Objective {
    pub bound: crate::model::BoundStudent,
    pub bank: Option<Vec<crate::model::BoundMlp>>,
    pub seg: Var,
    pub dist: Option<Var>,
    pub spt: Option<Var>,
    pub per_region: Vec<Option<Var>>,
    pub skipped: usize,
    pub total: Var,
}
