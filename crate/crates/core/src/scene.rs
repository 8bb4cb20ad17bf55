//! Procedural two-style street scenes.
//!
//! The label geometry of a scene depends only on its seed (and jitter); the
//! rendering style decides appearance. Matched seeds therefore share labels
//! across styles, and the domain gap lives purely in pixel statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RoadError};

pub const DEFAULT_NUM_CLASSES: usize = 5;
pub const IGNORE_LABEL: u8 = 255;
pub const CLASS_NAMES: [&str; 5] = ["sky", "building", "road", "vehicle", "pole"];

pub const SKY: u8 = 0;
pub const BUILDING: u8 = 1;
pub const ROAD: u8 = 2;
pub const VEHICLE: u8 = 3;
pub const POLE: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    SourceSynthetic,
    TargetReal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Domain-classifier label: 0 source, 1 target.
    pub fn label(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

impl Style {
    pub fn domain(self) -> Domain {
        match self {
            Style::SourceSynthetic => Domain::Source,
            Style::TargetReal => Domain::Target,
        }
    }
}

/// Strength of the appearance gap of the target style. All zeros renders the
/// target style with the source palette and no texture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleGap {
    pub texture_amplitude: f64,
    pub color_shift: f64,
    pub vignette: f64,
}

impl Default for StyleGap {
    fn default() -> Self {
        Self { texture_amplitude: 1.0, color_shift: 1.0, vignette: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_size: (usize, usize),
    pub num_classes: usize,
    pub style: Style,
    pub seed: u64,
    pub layout_jitter: f64,
    #[serde(default)]
    pub gap: StyleGap,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: (128, 128),
            num_classes: DEFAULT_NUM_CLASSES,
            style: Style::SourceSynthetic,
            seed: 0,
            layout_jitter: 1.0,
            gap: StyleGap::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 32 || w < 32 {
            return Err(RoadError::Config(format!("image size {h}x{w} below 32x32")));
        }
        if !(2..=DEFAULT_NUM_CLASSES).contains(&self.num_classes) {
            return Err(RoadError::Config(format!(
                "num_classes {} outside 2..={DEFAULT_NUM_CLASSES}",
                self.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.layout_jitter) {
            return Err(RoadError::Config(format!("layout_jitter {} outside [0,1]", self.layout_jitter)));
        }
        let gap = self.gap;
        if [gap.texture_amplitude, gap.color_shift, gap.vignette].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(RoadError::Config(format!("style gap knobs must be finite and >= 0: {gap:?}")));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn with_style(&self, style: Style) -> Self {
        Self { style, ..self.clone() }
    }
}

/// Interleaved 8-bit RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Mean of each channel, scaled to [0,1].
    pub fn channel_means(&self) -> [f64; 3] {
        let mut acc = [0u64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c] as u64;
            }
        }
        let n = (self.height * self.width) as f64 * 255.0;
        acc.map(|v| v as f64 / n)
    }
}

/// Per-pixel class indices; [`IGNORE_LABEL`] marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<u64> {
        let mut counts = vec![0u64; num_classes];
        for &l in &self.data {
            if (l as usize) < num_classes {
                counts[l as usize] += 1;
            }
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub image: RgbImage,
    pub labels: LabelMap,
    pub domain: Domain,
    pub seed: u64,
}

/// Geometry shared by both styles of a seed.
#[derive(Debug, Clone)]
struct Layout {
    height: usize,
    width: usize,
    horizon: usize,
    classes: Vec<u8>,
    /// Instance id per pixel (building blocks, vehicles, poles); 0 = none.
    instance: Vec<u16>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Row where the ground plane starts.
pub fn horizon_row(height: usize, jitter: f64, u: f64) -> usize {
    let frac = 0.4 + jitter * u * 0.1;
    ((height as f64 * frac).floor() as usize).clamp(1, height - 1)
}

fn build_layout(cfg: &SceneConfig) -> Layout {
    let (h, w) = cfg.image_size;
    let (hf, wf) = (h as f64, w as f64);
    let mut rng = rng_for(cfg.seed, 0);
    let jitter = cfg.layout_jitter;

    let horizon = horizon_row(h, jitter, rng.gen_range(-1.0..=1.0));
    let cx = wf / 2.0 + jitter * rng.gen_range(-0.08..=0.08) * wf;
    let spread = 0.55 + jitter * rng.gen_range(-0.1..=0.1);
    let ground = (h - horizon) as f64;
    let road_half = |y: usize| spread * wf * (y - horizon + 1) as f64 / ground;

    let mut classes = vec![SKY; h * w];
    let mut instance = vec![0u16; h * w];
    let mut next_id = 1u16;

    // ground: road wedge from the vanishing point, facades either side
    for y in horizon..h {
        let half = road_half(y);
        for x in 0..w {
            let dx = (x as f64 + 0.5 - cx).abs();
            classes[y * w + x] = if dx < half { ROAD } else { BUILDING };
        }
    }

    // skyline: blocks get taller away from the vanishing point
    let mut x0 = 0usize;
    while x0 < w {
        let bw = ((rng.gen_range(0.06..0.18) * wf) as usize).max(2);
        let x1 = (x0 + bw).min(w);
        let centre = (x0 + x1) as f64 / 2.0;
        let lateral = ((centre - cx).abs() / (wf / 2.0)).min(1.0);
        let tall = hf * (0.06 + 0.32 * lateral) * rng.gen_range(0.6..1.25);
        let gap = rng.gen_bool(0.15) && lateral < 0.5;
        if !gap {
            let top = horizon.saturating_sub(tall as usize);
            for y in top..horizon {
                for x in x0..x1 {
                    classes[y * w + x] = BUILDING;
                    instance[y * w + x] = next_id;
                }
            }
            next_id += 1;
        }
        x0 = x1;
    }

    let depth_row = |s: f64| horizon + ((s * (ground - 1.0)).round() as usize).min(h - 1 - horizon);

    let vehicles = rng.gen_range(2..=5);
    for _ in 0..vehicles {
        let s: f64 = rng.gen_range(0.05..1.0);
        let yb = depth_row(s);
        let half = road_half(yb);
        let xc = cx + rng.gen_range(-0.8..0.8) * half;
        let vw = ((0.04 + 0.22 * s) * wf).max(2.0);
        let vh = (0.55 * vw).max(2.0);
        let top = ((yb as f64 - vh).round().max(horizon as f64)) as usize;
        let left = (xc - vw / 2.0).round().max(0.0) as usize;
        let right = ((xc + vw / 2.0).round() as usize).min(w);
        for y in top..=yb {
            for x in left..right {
                classes[y * w + x] = VEHICLE;
                instance[y * w + x] = next_id;
            }
        }
        next_id += 1;
    }

    let poles = rng.gen_range(1..=4);
    for _ in 0..poles {
        let s: f64 = rng.gen_range(0.1..1.0);
        let yb = depth_row(s);
        let side = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        let xc = cx + side * (road_half(yb) + 1.0);
        let pw = (0.5 + 3.0 * s * wf / 128.0).round().max(1.0) as usize;
        let ph = (0.1 + 0.45 * s) * hf;
        let top = ((yb as f64 - ph).round().max(horizon as f64)) as usize;
        let left = xc.round() as isize - (pw as isize) / 2;
        for y in top..=yb {
            for dx in 0..pw as isize {
                let x = left + dx;
                if x >= 0 && (x as usize) < w {
                    classes[y * w + x as usize] = POLE;
                    instance[y * w + x as usize] = next_id;
                }
            }
        }
        next_id += 1;
    }

    Layout { height: h, width: w, horizon, classes, instance }
}

/// Smooth noise in [-1,1]: a coarse random lattice, bilinearly interpolated.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cells: usize) -> Vec<f32> {
    let n = cells + 1;
    let lattice: Vec<f32> = (0..n * n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        let fy = y as f32 / h as f32 * cells as f32;
        let (iy, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f32 / w as f32 * cells as f32;
            let (ix, tx) = (fx.floor() as usize, fx.fract());
            let at = |r: usize, c: usize| lattice[r.min(cells) * n + c.min(cells)];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

const SOURCE_PALETTE: [[f32; 3]; 5] = [
    [120.0, 170.0, 235.0], // sky
    [150.0, 115.0, 95.0],  // building
    [85.0, 85.0, 90.0],    // road
    [200.0, 45.0, 45.0],   // vehicle
    [235.0, 205.0, 60.0],  // pole
];

const TARGET_GAIN: [f32; 3] = [0.85, 0.95, 0.7];
const TARGET_OFFSET: [f32; 3] = [45.0, 15.0, -10.0];

fn render(layout: &Layout, cfg: &SceneConfig) -> RgbImage {
    let (h, w) = (layout.height, layout.width);
    let target = cfg.style == Style::TargetReal;
    let mut rng = rng_for(cfg.seed, if target { 2 } else { 1 });

    // per-instance tint
    let instances = layout.instance.iter().copied().max().unwrap_or(0) as usize + 1;
    let tints: Vec<[f32; 3]> = (0..instances)
        .map(|_| {
            let t = rng.gen_range(-14.0f32..14.0);
            [t + rng.gen_range(-6.0..6.0), t + rng.gen_range(-6.0..6.0), t + rng.gen_range(-6.0..6.0)]
        })
        .collect();
    let low = value_noise(&mut rng, h, w, 4);

    let gap = cfg.gap;
    let (tex, shift, vig) = if target {
        (gap.texture_amplitude as f32, gap.color_shift as f32, gap.vignette as f32)
    } else {
        (0.0, 0.0, 0.0)
    };
    let fine = if tex > 0.0 { value_noise(&mut rng, h, w, (w / 4).max(2)) } else { vec![0.0; h * w] };
    let window_phase = (rng.gen_range(0..4usize), rng.gen_range(0..4usize));

    let mut data = vec![0u8; h * w * 3];
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let class = layout.classes[i] as usize;
            let inst = layout.instance[i] as usize;
            let mut px = SOURCE_PALETTE[class];
            for c in 0..3 {
                px[c] += tints[inst][c] + 8.0 * low[i];
            }
            if tex > 0.0 {
                let texture = match class as u8 {
                    BUILDING => {
                        let win = (y + window_phase.0) % 6 < 3 && (x + window_phase.1) % 5 < 2;
                        (if win { -35.0 } else { 6.0 }) + 10.0 * fine[i]
                    }
                    ROAD => 22.0 * fine[i],
                    SKY => -30.0 * (y as f32 / layout.horizon.max(1) as f32) + 4.0 * fine[i],
                    VEHICLE => 14.0 * fine[i] - 10.0 * ((y % 4) as f32 / 3.0),
                    _ => 12.0 * fine[i],
                };
                let grain = rng.gen_range(-10.0f32..10.0);
                for v in &mut px {
                    *v += tex * (texture + grain);
                }
            }
            if shift > 0.0 {
                for c in 0..3 {
                    let moved = px[c] * TARGET_GAIN[c] + TARGET_OFFSET[c];
                    px[c] += shift * (moved - px[c]);
                }
            }
            if vig > 0.0 {
                let r2 = ((y as f32 - cy) / cy).powi(2) + ((x as f32 - cx) / cx).powi(2);
                let factor = 1.0 - vig * 0.3 * r2 / 2.0;
                for v in &mut px {
                    *v *= factor;
                }
            }
            for c in 0..3 {
                data[i * 3 + c] = px[c].round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RgbImage { height: h, width: w, data }
}

/// Renders one scene. Pure function of `config`.
pub fn generate_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let layout = build_layout(config);
    let image = render(&layout, config);
    let top = config.num_classes as u8 - 1;
    let labels = LabelMap {
        height: layout.height,
        width: layout.width,
        data: layout.classes.iter().map(|&c| c.min(top)).collect(),
    };
    Ok(Scene { image, labels, domain: config.style.domain(), seed: config.seed })
}

/// Result of the spatial-prior checks on one scene.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayoutReport {
    /// No sky in the bottom 20% of rows.
    pub sky_top: bool,
    /// No road in the top 20% of rows.
    pub road_bottom: bool,
    /// Mean component area of vehicles/poles centred in the middle third of
    /// columns is below that of the outer thirds (vacuous when either side
    /// has no components).
    pub center_smaller: bool,
    pub center_areas: Vec<usize>,
    pub outer_areas: Vec<usize>,
    /// Only one class present.
    pub degenerate: bool,
}

/// 4-connected components of `class`: (area, centroid column).
pub fn components(labels: &LabelMap, class: u8) -> Vec<(usize, f64)> {
    let (h, w) = (labels.height, labels.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || labels.data[start] != class {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut area, mut col_sum) = (0usize, 0usize);
        while let Some(p) = stack.pop() {
            area += 1;
            col_sum += p % w;
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if !seen[q] && labels.data[q] == class {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        out.push((area, col_sum as f64 / area as f64));
    }
    out
}

pub fn validate_layout(scene: &Scene) -> LayoutReport {
    let labels = &scene.labels;
    let (h, w) = (labels.height, labels.width);
    let band = h / 5;
    let rows_have = |rows: std::ops::Range<usize>, class: u8| {
        rows.into_iter().any(|r| (0..w).any(|c| labels.get(r, c) == class))
    };
    let present = {
        let mut seen = [false; 256];
        labels.data.iter().for_each(|&l| seen[l as usize] = true);
        seen.iter().filter(|&&s| s).count()
    };

    let (mut center_areas, mut outer_areas) = (Vec::new(), Vec::new());
    for class in [VEHICLE, POLE] {
        for (area, col) in components(labels, class) {
            if col >= w as f64 / 3.0 && col < 2.0 * w as f64 / 3.0 {
                center_areas.push(area);
            } else {
                outer_areas.push(area);
            }
        }
    }
    let center_smaller = match (mean(&center_areas), mean(&outer_areas)) {
        (Some(c), Some(o)) => c < o,
        _ => true,
    };
    LayoutReport {
        sky_top: !rows_have(h - band..h, SKY),
        road_bottom: !rows_have(0..band, ROAD),
        center_smaller,
        center_areas,
        outer_areas,
        degenerate: present <= 1,
    }
}

fn mean(v: &[usize]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<usize>() as f64 / v.len() as f64)
}

/// Corpus-level perspective check: pools component areas over all reports.
pub fn aggregate_center_smaller(reports: &[LayoutReport]) -> Option<bool> {
    let center: Vec<usize> = reports.iter().flat_map(|r| r.center_areas.iter().copied()).collect();
    let outer: Vec<usize> = reports.iter().flat_map(|r| r.outer_areas.iter().copied()).collect();
    Some(mean(&center)? < mean(&outer)?)
}
