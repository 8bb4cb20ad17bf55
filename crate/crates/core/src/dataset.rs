//! On-disk dataset: PNG images and label maps plus a JSON manifest.
//!
//! Every file read goes through [`Dataset`], which keeps an access log so
//! tests can prove that target-train labels are never touched by training.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, RoadError};
use crate::scene::{generate_scene, Domain, LabelMap, RgbImage, Scene, SceneConfig, Style};

pub const GENERATOR_VERSION: &str = "scene-forge/1";
pub const MANIFEST_FILE: &str = "manifest.json";

pub const SOURCE_TRAIN: &str = "source-train";
pub const TARGET_TRAIN: &str = "target-train";
pub const TARGET_VAL: &str = "target-val";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelUse {
    /// Labels may be used for supervision.
    Training,
    /// Labels exist on disk for evaluation only; training must never read them.
    EvaluationOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub domain: Domain,
    pub count: usize,
    /// Inclusive seed range.
    pub seeds: [u64; 2],
    pub labels: LabelUse,
}

impl SplitEntry {
    pub fn seed_list(&self) -> impl Iterator<Item = u64> {
        self.seeds[0]..=self.seeds[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub splits: Vec<SplitEntry>,
    /// Template all scenes were rendered from (seed and style vary per scene).
    pub scene: SceneConfig,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Result<&SplitEntry> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| RoadError::Validation(format!("manifest has no split {name:?}")))
    }

    pub fn total_scenes(&self) -> usize {
        self.splits.iter().map(|s| s.count).sum()
    }
}

/// One split to generate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: String,
    pub style: Style,
    pub count: usize,
    pub first_seed: u64,
    pub labels: LabelUse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub scene: SceneConfig,
    pub splits: Vec<SplitSpec>,
}

impl DatasetSpec {
    /// Source-train, target-train (labels evaluation-only) and target-val.
    pub fn standard(scene: SceneConfig, source: usize, target: usize, val: usize) -> Self {
        let split = |name: &str, style, count, first_seed, labels| SplitSpec {
            name: name.to_string(),
            style,
            count,
            first_seed,
            labels,
        };
        Self {
            scene,
            splits: vec![
                split(SOURCE_TRAIN, Style::SourceSynthetic, source, 100_000, LabelUse::Training),
                split(TARGET_TRAIN, Style::TargetReal, target, 200_000, LabelUse::EvaluationOnly),
                split(TARGET_VAL, Style::TargetReal, val, 300_000, LabelUse::Training),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.splits.is_empty() {
            return Err(RoadError::Config("no splits requested".into()));
        }
        let mut ranges: Vec<(u64, u64, &str)> = Vec::new();
        for s in &self.splits {
            if s.count == 0 {
                return Err(RoadError::Config(format!("split {} is empty", s.name)));
            }
            if s.name.is_empty() || s.name.contains(['/', '\\']) {
                return Err(RoadError::Config(format!("bad split name {:?}", s.name)));
            }
            let hi = s.first_seed + s.count as u64 - 1;
            for &(lo2, hi2, other) in &ranges {
                if s.first_seed <= hi2 && lo2 <= hi {
                    return Err(RoadError::Config(format!("seed ranges of {} and {other} overlap", s.name)));
                }
            }
            ranges.push((s.first_seed, hi, &s.name));
        }
        Ok(())
    }
}

pub fn image_path(root: &Path, split: &str, seed: u64) -> PathBuf {
    root.join(split).join(format!("{seed:08}.png"))
}

pub fn label_path(root: &Path, split: &str, seed: u64) -> PathBuf {
    root.join(split).join(format!("{seed:08}_label.png"))
}

fn encode_png(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("in-memory PNG header");
        writer.write_image_data(data).expect("buffer matches image size");
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = BufWriter::new(File::create(path).map_err(|e| RoadError::io(path, e))?);
    file.write_all(bytes).and_then(|_| file.flush()).map_err(|e| RoadError::io(path, e))
}

pub fn encode_labels(labels: &LabelMap) -> Vec<u8> {
    encode_png(labels.width, labels.height, png::ColorType::Grayscale, &labels.data)
}

fn decode_png(path: &Path, bytes: &[u8], expect: png::ColorType) -> Result<(usize, usize, Vec<u8>)> {
    let fmt = |detail: String| RoadError::Format { path: path.to_path_buf(), detail };
    let decoder = png::Decoder::new(bytes);
    let mut reader = decoder.read_info().map_err(|e| fmt(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| fmt(e.to_string()))?;
    if info.color_type != expect || info.bit_depth != png::BitDepth::Eight {
        return Err(fmt(format!("expected 8-bit {expect:?}, got {:?} {:?}", info.bit_depth, info.color_type)));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

pub fn write_image(path: &Path, image: &RgbImage) -> Result<()> {
    write_file(path, &encode_png(image.width, image.height, png::ColorType::Rgb, &image.data))
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    write_file(path, &encode_labels(labels))
}

pub fn decode_image(path: &Path, bytes: &[u8]) -> Result<RgbImage> {
    let (width, height, data) = decode_png(path, bytes, png::ColorType::Rgb)?;
    Ok(RgbImage { height, width, data })
}

pub fn decode_labels(path: &Path, bytes: &[u8]) -> Result<LabelMap> {
    let (width, height, data) = decode_png(path, bytes, png::ColorType::Grayscale)?;
    Ok(LabelMap { height, width, data })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    write_file(path, text.as_bytes())
}

/// Renders one split in memory; identical to what [`generate_dataset`] writes.
pub fn render_split(spec: &DatasetSpec, name: &str) -> Result<Vec<Scene>> {
    spec.validate()?;
    let s = spec
        .splits
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| RoadError::Config(format!("dataset spec has no split {name:?}")))?;
    let template = spec.scene.with_style(s.style);
    (s.first_seed..s.first_seed + s.count as u64).map(|seed| generate_scene(&template.with_seed(seed))).collect()
}

/// Renders every split to disk. The manifest is written last, so its presence
/// marks a complete dataset.
pub fn generate_dataset(root: &Path, spec: &DatasetSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(root).map_err(|e| RoadError::io(root, e))?;
    let mut splits = Vec::new();
    for s in &spec.splits {
        let dir = root.join(&s.name);
        fs::create_dir_all(&dir).map_err(|e| RoadError::io(&dir, e))?;
        let template = spec.scene.with_style(s.style);
        for seed in s.first_seed..s.first_seed + s.count as u64 {
            let scene = generate_scene(&template.with_seed(seed))?;
            write_image(&image_path(root, &s.name, seed), &scene.image)?;
            write_labels(&label_path(root, &s.name, seed), &scene.labels)?;
        }
        splits.push(SplitEntry {
            name: s.name.clone(),
            domain: s.style.domain(),
            count: s.count,
            seeds: [s.first_seed, s.first_seed + s.count as u64 - 1],
            labels: s.labels,
        });
    }
    let manifest = DatasetManifest { version: GENERATOR_VERSION.to_string(), splits, scene: spec.scene.clone() };
    write_json(&root.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Why a caller wants label files; evaluation-only splits refuse `Training`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelPurpose {
    Training,
    Evaluation,
}

/// An opened dataset with an audit log of every file it has read.
#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
    access_log: RefCell<Vec<PathBuf>>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let file = File::open(&path).map_err(|e| RoadError::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| RoadError::Format { path: path.clone(), detail: e.to_string() })?;
        Ok(Self { root: root.to_path_buf(), manifest, access_log: RefCell::new(Vec::new()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    /// Every path read so far, in order.
    pub fn accessed(&self) -> Vec<PathBuf> {
        self.access_log.borrow().clone()
    }

    fn read(&self, path: &Path) -> Result<Vec<u8>> {
        self.access_log.borrow_mut().push(path.to_path_buf());
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| RoadError::io(path, e))?;
        Ok(bytes)
    }

    pub fn load_images(&self, split: &str) -> Result<Vec<RgbImage>> {
        let entry = self.manifest.split(split)?;
        entry
            .seed_list()
            .map(|seed| {
                let path = image_path(&self.root, split, seed);
                decode_image(&path, &self.read(&path)?)
            })
            .collect()
    }

    pub fn load_labels(&self, split: &str, purpose: LabelPurpose) -> Result<Vec<LabelMap>> {
        let entry = self.manifest.split(split)?;
        if entry.labels == LabelUse::EvaluationOnly && purpose == LabelPurpose::Training {
            return Err(RoadError::Contract(format!("labels of {split} are evaluation-only")));
        }
        entry
            .seed_list()
            .map(|seed| {
                let path = label_path(&self.root, split, seed);
                decode_labels(&path, &self.read(&path)?)
            })
            .collect()
    }

    /// Images with labels, for supervised or evaluation use.
    pub fn load_scenes(&self, split: &str, purpose: LabelPurpose) -> Result<Vec<Scene>> {
        let entry = self.manifest.split(split)?.clone();
        let images = self.load_images(split)?;
        let labels = self.load_labels(split, purpose)?;
        Ok(images
            .into_iter()
            .zip(labels)
            .zip(entry.seed_list())
            .map(|((image, labels), seed)| Scene { image, labels, domain: entry.domain, seed })
            .collect())
    }

    /// Checks that every listed file exists, decodes, matches the manifest
    /// image size, and that label maps survive a decode/encode/decode cycle.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.manifest.scene.image_size;
        for split in &self.manifest.splits {
            if split.count as u64 != split.seeds[1] - split.seeds[0] + 1 {
                return Err(RoadError::Validation(format!("split {} count disagrees with seeds", split.name)));
            }
            for seed in split.seed_list() {
                let ip = image_path(&self.root, &split.name, seed);
                let lp = label_path(&self.root, &split.name, seed);
                for p in [&ip, &lp] {
                    if !p.is_file() {
                        return Err(RoadError::Validation(format!("missing file {}", p.display())));
                    }
                }
                let image = decode_image(&ip, &fs::read(&ip).map_err(|e| RoadError::io(&ip, e))?)?;
                let labels = decode_labels(&lp, &fs::read(&lp).map_err(|e| RoadError::io(&lp, e))?)?;
                if (image.height, image.width) != (h, w) || (labels.height, labels.width) != (h, w) {
                    return Err(RoadError::Validation(format!("{} has wrong size", ip.display())));
                }
                if decode_labels(&lp, &encode_labels(&labels))? != labels {
                    return Err(RoadError::Validation(format!("{} does not round-trip", lp.display())));
                }
            }
        }
        Ok(())
    }

    /// Per-split label histograms (for reporting rare classes).
    pub fn class_pixel_counts(&self, split: &str) -> Result<BTreeMap<usize, u64>> {
        let k = self.manifest.scene.num_classes;
        let mut counts = BTreeMap::new();
        for labels in self.load_labels(split, LabelPurpose::Evaluation)? {
            for (c, n) in labels.class_counts(k).into_iter().enumerate() {
                *counts.entry(c).or_insert(0) += n;
            }
        }
        Ok(counts)
    }
}
