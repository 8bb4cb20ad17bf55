//! Confusion matrices, IoU and report rendering.

use std::fs;
use std::ops::AddAssign;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ablation::AblationResult;
use crate::error::{Result, RoadError};
use crate::losses::RegionPartition;
use crate::model::StudentModel;
use crate::scene::{Scene, CLASS_NAMES, IGNORE_LABEL};

/// `counts[g * k + p]` = pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one labelled pixel; out-of-range values are a caller bug.
    fn record(&mut self, gt: usize, pred: usize) {
        self.counts[gt * self.num_classes + pred] += 1;
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, rhs: &ConfusionMatrix) {
        assert_eq!(self.num_classes, rhs.num_classes, "merging confusion matrices of different size");
        for (a, b) in self.counts.iter_mut().zip(&rhs.counts) {
            *a += b;
        }
    }
}

/// Exact counts over pixels whose ground truth is not `ignore_index`.
pub fn confusion(pred: &[u8], gt: &[u8], num_classes: usize, ignore_index: u8) -> Result<ConfusionMatrix> {
    if pred.len() != gt.len() {
        return Err(RoadError::Validation(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (&p, &t) in pred.iter().zip(gt) {
        if t == ignore_index {
            continue;
        }
        if t as usize >= num_classes || p as usize >= num_classes {
            return Err(RoadError::Validation(format!("class out of range: gt {t}, pred {p}, K {num_classes}")));
        }
        cm.record(t as usize, p as usize);
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class: Vec<Option<f64>>,
    /// Mean over present classes (0 when none is present).
    pub mean_iou: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_region: Option<Vec<IoUReport>>,
}

impl IoUReport {
    pub fn present(&self) -> usize {
        self.per_class.iter().flatten().count()
    }
}

/// `IoU_c = tp / (row_c + col_c − tp)`; classes with an empty union are
/// excluded from the mean.
pub fn iou(cm: &ConfusionMatrix) -> IoUReport {
    let k = cm.num_classes;
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let row: u64 = (0..k).map(|p| cm.get(c, p)).sum();
            let col: u64 = (0..k).map(|g| cm.get(g, c)).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean_iou = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    IoUReport { per_class, mean_iou, per_region: None }
}

/// How a full image is run through the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Inference {
    /// One forward pass over the whole image.
    Full,
    /// Tiles of the given size: a centred grid of whole tiles, with edge tiles
    /// covering any margin. Pixels covered by the centred grid take its
    /// prediction.
    Tiled { height: usize, width: usize },
}

fn tile_starts(extent: usize, tile: usize, align: usize) -> Vec<usize> {
    let n = extent / tile;
    let margin = ((extent - n * tile) / 2) / align * align;
    let mut starts: Vec<usize> = (0..n).map(|i| margin + i * tile).collect();
    if margin > 0 {
        starts.insert(0, 0);
    }
    if margin + n * tile < extent {
        starts.push(extent - tile);
    }
    starts
}

/// Dense prediction of one image.
pub fn predict_image(model: &StudentModel<f32>, scene: &Scene, inference: Inference) -> Result<Vec<u8>> {
    let (h, w) = (scene.image.height, scene.image.width);
    match inference {
        Inference::Full => model.predict(&scene.image, (0, 0), (h, w)),
        Inference::Tiled { height: th, width: tw } => {
            if th > h || tw > w {
                return Err(RoadError::Config(format!("tile {th}x{tw} larger than image {h}x{w}")));
            }
            let align = model.backbone.config.total_stride();
            let rows = tile_starts(h, th, align);
            let cols = tile_starts(w, tw, align);
            // edge tiles first so centred tiles overwrite the overlap
            let order = |v: &[usize], extent: usize, size: usize| {
                let (mut edge, mut inner): (Vec<usize>, Vec<usize>) =
                    v.iter().partition(|&&s| v.len() > 1 && (s == 0 || s + size == extent) && (extent % size != 0));
                edge.append(&mut inner);
                edge
            };
            let mut out = vec![0u8; h * w];
            for &r in &order(&rows, h, th) {
                for &c in &order(&cols, w, tw) {
                    let pred = model.predict(&scene.image, (r, c), (th, tw))?;
                    for y in 0..th {
                        out[(r + y) * w + c..(r + y) * w + c + tw].copy_from_slice(&pred[y * tw..(y + 1) * tw]);
                    }
                }
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub region_confusion: Option<Vec<ConfusionMatrix>>,
    pub report: IoUReport,
}

/// Accumulates a confusion matrix over a labelled split; with a partition,
/// also one matrix per region (pixels bucketed by region).
pub fn evaluate_model(
    model: &StudentModel<f32>,
    scenes: &[Scene],
    partition: Option<&RegionPartition>,
    inference: Inference,
) -> Result<Evaluation> {
    let k = model.num_classes;
    let mut total = ConfusionMatrix::new(k);
    let mut regions = partition.map(|p| vec![ConfusionMatrix::new(k); p.regions()]);
    for scene in scenes {
        let pred = predict_image(model, scene, inference)?;
        total += &confusion(&pred, &scene.labels.data, k, IGNORE_LABEL)?;
        if let (Some(p), Some(regions)) = (partition, regions.as_mut()) {
            let w = scene.labels.width;
            for (i, (&pv, &gv)) in pred.iter().zip(&scene.labels.data).enumerate() {
                if gv == IGNORE_LABEL {
                    continue;
                }
                let m = p.region_of(i / w, i % w).ok_or_else(|| {
                    RoadError::Contract(format!("image larger than partition {:?}", p.image_size))
                })?;
                regions[m].record(gv as usize, pv as usize);
            }
        }
    }
    let mut report = iou(&total);
    report.per_region = regions.as_ref().map(|r| r.iter().map(iou).collect());
    Ok(Evaluation { confusion: total, region_confusion: regions, report })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Writes `<suite>.csv` per result and `eval.json` with everything. Nothing is
/// written if any input is empty.
pub fn render_tables(dir: &Path, results: &[AblationResult]) -> Result<Vec<PathBuf>> {
    if results.is_empty() || results.iter().any(|r| r.runs.is_empty() || r.summary.is_empty()) {
        return Err(RoadError::Validation("no ablation results to render".into()));
    }
    let mut files: Vec<(PathBuf, String)> = Vec::new();
    for result in results {
        let mut csv = String::new();
        match result.suite {
            crate::ablation::Suite::Table1 => {
                let k = result.summary[0].per_class_median.len();
                let names: Vec<String> =
                    (0..k).map(|c| CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string())).collect();
                csv.push_str(&format!("variant,{},mean_iou\n", names.join(",")));
                for cell in &result.summary {
                    let classes: Vec<String> = cell.per_class_median.iter().map(|v| fmt_opt(*v)).collect();
                    csv.push_str(&format!("{},{},{:.6}\n", cell.label, classes.join(","), cell.median));
                }
            }
            _ => {
                csv.push_str("label,median_miou,min_miou,max_miou,runs\n");
                for cell in &result.summary {
                    csv.push_str(&format!(
                        "{},{:.6},{:.6},{:.6},{}\n",
                        cell.label, cell.median, cell.min, cell.max, cell.runs
                    ));
                }
            }
        }
        files.push((dir.join(format!("{}.csv", result.suite.name())), csv));
    }
    let json = serde_json::to_string_pretty(results).expect("serializable results");
    files.push((dir.join("eval.json"), json));

    fs::create_dir_all(dir).map_err(|e| RoadError::io(dir, e))?;
    let mut written = Vec::new();
    for (path, text) in files {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text).map_err(|e| RoadError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| RoadError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
