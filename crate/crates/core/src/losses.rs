//! Target-guided distillation, spatial partitioning, per-region adversarial
//! domain loss and the joint objective.

use road_autodiff::{Float, Graph, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RoadError};
use crate::model::{BoundMlp, MlpHead};
use crate::scene::{Domain, IGNORE_LABEL};

/// Backbone activations of one crop plus where the crop sits in its image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureMap {
    pub features: Var,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// (row, col) of the crop's top-left pixel in full-image coordinates.
    pub crop_offset: (usize, usize),
    pub feat_stride: usize,
    pub domain: Domain,
}

impl FeatureMap {
    pub fn new<T: Float>(g: &Graph<T>, features: Var, crop_offset: (usize, usize), feat_stride: usize, domain: Domain) -> Self {
        let s = g.shape(features);
        Self { features, channels: s[0], height: s[1], width: s[2], crop_offset, feat_stride, domain }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Full-image pixel at the receptive-field centre of cell `(i, j)`.
    pub fn cell_center(&self, i: usize, j: usize) -> (usize, usize) {
        let half = self.feat_stride / 2;
        (
            self.crop_offset.0 + i * self.feat_stride + half,
            self.crop_offset.1 + j * self.feat_stride + half,
        )
    }
}

/// `(1/N) Σ ‖x − z‖₂` over spatial positions. The teacher side is detached.
pub fn distillation_loss<T: Float>(g: &mut Graph<T>, student: &FeatureMap, teacher: &FeatureMap) -> Result<Var> {
    if (student.channels, student.height, student.width) != (teacher.channels, teacher.height, teacher.width) {
        return Err(RoadError::Shape(format!(
            "student features {:?} vs teacher {:?}",
            g.shape(student.features),
            g.shape(teacher.features)
        )));
    }
    let z = g.detach(teacher.features);
    let dist = g.l2_distance_map(student.features, z)?;
    Ok(g.mean(dist))
}

/// An H×W grid over the full image plane.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionPartition {
    pub grid_h: usize,
    pub grid_w: usize,
    pub image_size: (usize, usize),
    pub row_cuts: Vec<usize>,
    pub col_cuts: Vec<usize>,
}

fn cuts(n: usize, parts: usize) -> Vec<usize> {
    (0..=parts).map(|i| i * n / parts).collect()
}

fn band(cuts: &[usize], p: usize) -> usize {
    // first cut strictly above p, minus one
    cuts.partition_point(|&c| c <= p) - 1
}

/// Near-equal grid: cut `i` sits at `floor(i·H/grid_h)`, so cell sizes differ
/// by at most one pixel and the last cell is never the smallest.
pub fn make_partition(grid_h: usize, grid_w: usize, image_size: (usize, usize)) -> Result<RegionPartition> {
    let (h, w) = image_size;
    if grid_h == 0 || grid_w == 0 || grid_h > h || grid_w > w {
        return Err(RoadError::Config(format!("grid {grid_h}x{grid_w} does not fit image {h}x{w}")));
    }
    Ok(RegionPartition { grid_h, grid_w, image_size, row_cuts: cuts(h, grid_h), col_cuts: cuts(w, grid_w) })
}

impl RegionPartition {
    pub fn regions(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Region index (row-major over the grid) of a full-image pixel.
    pub fn region_of(&self, row: usize, col: usize) -> Option<usize> {
        if row >= self.image_size.0 || col >= self.image_size.1 {
            return None;
        }
        Some(band(&self.row_cuts, row) * self.grid_w + band(&self.col_cuts, col))
    }

    pub fn label(&self) -> String {
        format!("{}x{}", self.grid_h, self.grid_w)
    }
}

/// One activation routed to a region: feature map index, cell index
/// (row-major) and its domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Activation {
    pub map: usize,
    pub cell: usize,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionBatch {
    pub regions: Vec<Vec<Activation>>,
}

impl RegionBatch {
    pub fn has_both_domains(&self, m: usize) -> bool {
        let r = &self.regions[m];
        r.iter().any(|a| a.domain == Domain::Source) && r.iter().any(|a| a.domain == Domain::Target)
    }

    pub fn total(&self) -> usize {
        self.regions.iter().map(Vec::len).sum()
    }
}

/// Spatial-aware splitting: maps each feature cell back to image coordinates
/// and routes it to the region containing that pixel.
pub fn split_by_region(maps: &[FeatureMap], partition: &RegionPartition) -> Result<RegionBatch> {
    let mut regions = vec![Vec::new(); partition.regions()];
    for (idx, fm) in maps.iter().enumerate() {
        let (h, w) = partition.image_size;
        let extent = (fm.height * fm.feat_stride, fm.width * fm.feat_stride);
        if fm.crop_offset.0 + extent.0 > h || fm.crop_offset.1 + extent.1 > w {
            return Err(RoadError::Contract(format!(
                "crop at {:?} of extent {extent:?} leaves the {h}x{w} image",
                fm.crop_offset
            )));
        }
        for i in 0..fm.height {
            for j in 0..fm.width {
                let (r, c) = fm.cell_center(i, j);
                let m = partition.region_of(r, c).expect("centre lies inside the crop");
                regions[m].push(Activation { map: idx, cell: i * fm.width + j, domain: fm.domain });
            }
        }
    }
    Ok(RegionBatch { regions })
}

fn region_loss<T: Float>(
    g: &mut Graph<T>,
    rows: &[Var],
    region: &[Activation],
    head: &BoundMlp,
    reverse: bool,
) -> Result<Var> {
    if region.is_empty() {
        return Err(RoadError::Contract("domain classifier loss over an empty region".into()));
    }
    let picks: Vec<(usize, usize)> = region.iter().map(|a| (a.map, a.cell)).collect();
    let labels: Vec<usize> = region.iter().map(|a| a.domain.label()).collect();
    let x = g.gather_rows(rows, &picks)?;
    let x = if reverse { g.grad_reverse(x) } else { x };
    let logits = MlpHead::forward(g, head, x)?;
    Ok(g.softmax_cross_entropy(logits, &labels, usize::MAX)?)
}

/// Mean cross-entropy of the region's domain classifier. Features pass through
/// a gradient-reversal node first, so one descent step trains the classifier
/// and pushes the backbone towards domain confusion. `rows[i]` is the
/// channels-last (`[cells, C]`) view of feature map `i`.
pub fn domain_classifier_loss<T: Float>(g: &mut Graph<T>, rows: &[Var], region: &[Activation], head: &BoundMlp) -> Result<Var> {
    region_loss(g, rows, region, head, true)
}

/// Same loss without the reversal node; used to check the adversarial sign.
pub fn domain_classifier_loss_unreversed<T: Float>(
    g: &mut Graph<T>,
    rows: &[Var],
    region: &[Activation],
    head: &BoundMlp,
) -> Result<Var> {
    region_loss(g, rows, region, head, false)
}

#[derive(Debug, Clone)]
pub struct SpatialLoss {
    pub total: Var,
    /// Loss node per region; `None` where the region lacked one of the domains.
    pub per_region: Vec<Option<Var>>,
    pub skipped: usize,
}

/// Channels-last views of the feature maps, for [`domain_classifier_loss`].
pub fn rows_of<T: Float>(g: &mut Graph<T>, maps: &[FeatureMap]) -> Result<Vec<Var>> {
    maps.iter().map(|m| Ok(g.channels_last(m.features)?)).collect()
}

/// Σ over regions holding both domains of that region's classifier loss.
pub fn spatial_adaptation_loss<T: Float>(
    g: &mut Graph<T>,
    maps: &[FeatureMap],
    partition: &RegionPartition,
    heads: &[BoundMlp],
) -> Result<SpatialLoss> {
    spatial_loss_impl(g, maps, partition, heads, true)
}

pub fn spatial_adaptation_loss_unreversed<T: Float>(
    g: &mut Graph<T>,
    maps: &[FeatureMap],
    partition: &RegionPartition,
    heads: &[BoundMlp],
) -> Result<SpatialLoss> {
    spatial_loss_impl(g, maps, partition, heads, false)
}

fn spatial_loss_impl<T: Float>(
    g: &mut Graph<T>,
    maps: &[FeatureMap],
    partition: &RegionPartition,
    heads: &[BoundMlp],
    reverse: bool,
) -> Result<SpatialLoss> {
    if heads.len() != partition.regions() {
        return Err(RoadError::Contract(format!(
            "{} classifier heads for {} regions",
            heads.len(),
            partition.regions()
        )));
    }
    let batch = split_by_region(maps, partition)?;
    let rows = rows_of(g, maps)?;
    let mut per_region = Vec::with_capacity(heads.len());
    let mut terms = Vec::new();
    for (m, head) in heads.iter().enumerate() {
        if batch.has_both_domains(m) {
            let l = region_loss(g, &rows, &batch.regions[m], head, reverse)?;
            terms.push((l, T::one()));
            per_region.push(Some(l));
        } else {
            per_region.push(None);
        }
    }
    if terms.is_empty() {
        return Err(RoadError::DegenerateStep);
    }
    let skipped = heads.len() - terms.len();
    let total = g.linear_combination(&terms)?;
    Ok(SpatialLoss { total, per_region, skipped })
}

/// Ground truth for one crop, tagged with the domain it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelCrop {
    pub labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub domain: Domain,
}

/// Pixel-mean cross-entropy over all crops, ignoring label 255. Refuses
/// target-domain labels.
pub fn segmentation_loss<T: Float>(g: &mut Graph<T>, logits: &[Var], labels: &[LabelCrop]) -> Result<Var> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(RoadError::Shape(format!("{} logit maps vs {} label crops", logits.len(), labels.len())));
    }
    if labels.iter().any(|l| l.domain != Domain::Source) {
        return Err(RoadError::Contract("segmentation supervision must come from the source domain".into()));
    }
    let mut rows = Vec::with_capacity(logits.len());
    let mut picks = Vec::new();
    let mut flat = Vec::new();
    for (i, (&l, lab)) in logits.iter().zip(labels).enumerate() {
        let s = g.shape(l).to_vec();
        if s.len() != 3 || (s[1], s[2]) != (lab.height, lab.width) || lab.labels.len() != lab.height * lab.width {
            return Err(RoadError::Shape(format!("logits {s:?} vs labels {}x{}", lab.height, lab.width)));
        }
        rows.push(g.channels_last(l)?);
        picks.extend((0..lab.labels.len()).map(|p| (i, p)));
        flat.extend(lab.labels.iter().map(|&v| v as usize));
    }
    let all = if rows.len() == 1 { rows[0] } else { g.gather_rows(&rows, &picks)? };
    Ok(g.softmax_cross_entropy(all, &flat, IGNORE_LABEL as usize)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.1, lambda2: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(RoadError::Config(format!("loss weights must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Scalar loss components of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub seg: f64,
    pub dist: f64,
    pub spt: f64,
    pub total: f64,
    /// Per-region domain loss; NaN where the region was skipped.
    pub per_region: Vec<f64>,
    pub non_empty_regions: usize,
}

/// `seg + λ1·dist + λ2·spt`.
pub fn road_loss(seg: f64, dist: f64, spt: f64, lambda1: f64, lambda2: f64) -> Result<LossReport> {
    LossWeights { lambda1, lambda2 }.validate()?;
    if ![seg, dist, spt].iter().all(|v| v.is_finite()) {
        return Err(RoadError::Contract(format!("non-finite loss terms {seg} {dist} {spt}")));
    }
    Ok(LossReport {
        seg,
        dist,
        spt,
        total: seg + lambda1 * dist + lambda2 * spt,
        per_region: Vec::new(),
        non_empty_regions: 0,
    })
}

/// The same combination as a graph node, so one backward pass covers all terms.
pub fn road_objective<T: Float>(
    g: &mut Graph<T>,
    seg: Var,
    dist: Option<Var>,
    spt: Option<Var>,
    weights: LossWeights,
) -> Result<Var> {
    weights.validate()?;
    let mut terms = vec![(seg, T::one())];
    if let Some(d) = dist {
        terms.push((d, T::from_f64_lossy(weights.lambda1)));
    }
    if let Some(s) = spt {
        terms.push((s, T::from_f64_lossy(weights.lambda2)));
    }
    Ok(g.linear_combination(&terms)?)
}
