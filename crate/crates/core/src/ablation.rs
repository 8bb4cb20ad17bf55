//! Ablation suites: variant table, distillation alternatives and grid sizes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::dataset::{render_split, DatasetSpec, SOURCE_TRAIN, TARGET_TRAIN, TARGET_VAL};
use crate::error::{Result, RoadError};
use crate::eval::{evaluate_model, Inference};
use crate::model::{BackboneConfig, TeacherModel};
use crate::pretrain::{pretrain_teacher, target_corpus, PretrainConfig};
use crate::scene::Scene;
use crate::train::{config_hash, Init, TrainConfig, TrainData, TrainInputs, Trainer, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Table1,
    Fig5,
    Fig6,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Table1, Suite::Fig5, Suite::Fig6];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Table1 => "table1",
            Suite::Fig5 => "fig5",
            Suite::Fig6 => "fig6",
        }
    }

    /// The runs of one seed. Non-spatial variants keep the base grid so that
    /// identical runs in different suites share a cache key.
    pub fn cells(self, base: &TrainConfig) -> Vec<Cell> {
        let cell = |label: &str, variant, grid| Cell { label: label.to_string(), variant, grid };
        match self {
            Suite::Table1 => [Variant::Nonadapt, Variant::Dst, Variant::Spt, Variant::DstSpt]
                .into_iter()
                .map(|v| cell(v.name(), v, base.grid))
                .collect(),
            Suite::Fig5 => vec![
                cell("bs", Variant::Nonadapt, base.grid),
                cell("fr", Variant::FrozenK, base.grid),
                cell("sd", Variant::SourceDistill, base.grid),
                cell("td", Variant::Dst, base.grid),
            ],
            Suite::Fig6 => [(1, 1), (2, 1), (2, 2), (3, 3)]
                .into_iter()
                .map(|g| cell(&format!("{}x{}", g.0, g.1), Variant::DstSpt, g))
                .collect(),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = RoadError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| RoadError::Config(format!("unknown suite {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub label: String,
    pub variant: Variant,
    pub grid: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub key: String,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub label: String,
    pub variant: Variant,
    pub grid: (usize, usize),
    pub runs: usize,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub per_class_median: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub suite: Suite,
    pub seeds: Vec<u64>,
    pub base: TrainConfig,
    pub runs: Vec<RunRecord>,
    pub summary: Vec<CellSummary>,
}

impl AblationResult {
    pub fn cell(&self, label: &str) -> Option<&CellSummary> {
        self.summary.iter().find(|c| c.label == label)
    }

    pub fn median(&self, label: &str) -> Option<f64> {
        self.cell(label).map(|c| c.median)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn summarize(cells: &[Cell], runs: &[RunRecord]) -> Vec<CellSummary> {
    cells
        .iter()
        .map(|c| {
            let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.label == c.label).collect();
            let mious: Vec<f64> = mine.iter().map(|r| r.miou).collect();
            let k = mine.first().map_or(0, |r| r.per_class.len());
            let per_class_median = (0..k)
                .map(|cls| {
                    let present: Vec<f64> = mine.iter().filter_map(|r| r.per_class[cls]).collect();
                    (!present.is_empty()).then(|| median(&present))
                })
                .collect();
            CellSummary {
                label: c.label.clone(),
                variant: c.variant,
                grid: c.grid,
                runs: mine.len(),
                median: median(&mious),
                min: mious.iter().copied().fold(f64::INFINITY, f64::min),
                max: mious.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                per_class_median,
            }
        })
        .collect()
}

/// Everything a suite needs besides seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSetup {
    pub dataset: DatasetSpec,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
}

impl ExperimentSetup {
    pub fn from_run_config(c: &RunConfig) -> Self {
        Self { dataset: c.dataset_spec(), backbone: c.model.clone(), pretrain: c.pretrain.clone(), train: c.train.clone() }
    }

    pub fn num_classes(&self) -> usize {
        self.dataset.scene.num_classes
    }
}

type RunHook = Box<dyn Fn(&RunRecord) + Send + Sync>;

/// Holds the rendered data, one teacher per seed and a cache of finished runs.
/// Runs are deterministic, so a cached record stands in for a rerun.
pub struct Experiment {
    setup: ExperimentSetup,
    data: TrainData,
    val: Vec<Scene>,
    corpus: OnceLock<(Vec<Scene>, Vec<Scene>)>,
    teachers: Mutex<BTreeMap<u64, Arc<TeacherModel<f32>>>>,
    runs: Mutex<BTreeMap<String, RunRecord>>,
    cache_dir: Option<PathBuf>,
    on_run: Option<RunHook>,
}

impl Experiment {
    /// Renders the dataset in memory.
    pub fn new(setup: ExperimentSetup) -> Result<Self> {
        let spec = &setup.dataset;
        let data = TrainData::from_scenes(render_split(spec, SOURCE_TRAIN)?, render_split(spec, TARGET_TRAIN)?);
        let val = render_split(spec, TARGET_VAL)?;
        Ok(Self::with_data(setup, data, val))
    }

    pub fn with_data(setup: ExperimentSetup, data: TrainData, val: Vec<Scene>) -> Self {
        Self {
            setup,
            data,
            val,
            corpus: OnceLock::new(),
            teachers: Mutex::new(BTreeMap::new()),
            runs: Mutex::new(BTreeMap::new()),
            cache_dir: None,
            on_run: None,
        }
    }

    /// Persists run records as JSON under `dir` and reuses them by key.
    pub fn with_cache_dir(mut self, dir: PathBuf) -> Self {
        self.cache_dir = Some(dir);
        self
    }

    pub fn on_run(mut self, hook: impl Fn(&RunRecord) + Send + Sync + 'static) -> Self {
        self.on_run = Some(Box::new(hook));
        self
    }

    pub fn setup(&self) -> &ExperimentSetup {
        &self.setup
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    pub fn val(&self) -> &[Scene] {
        &self.val
    }

    /// The teacher pretrained with `seed`, trained on first use.
    pub fn teacher(&self, seed: u64) -> Result<Arc<TeacherModel<f32>>> {
        if let Some(t) = self.teachers.lock().expect("teacher cache").get(&seed) {
            return Ok(t.clone());
        }
        let (corpus, held) = match self.corpus.get() {
            Some(c) => c,
            None => {
                let c = target_corpus(&self.setup.dataset.scene, &self.setup.pretrain)?;
                self.corpus.get_or_init(|| c)
            }
        };
        let cfg = PretrainConfig { seed, ..self.setup.pretrain.clone() };
        let outcome = pretrain_teacher(corpus, held, &self.setup.backbone, self.setup.num_classes(), &cfg)?;
        let t = Arc::new(outcome.teacher);
        self.teachers.lock().expect("teacher cache").entry(seed).or_insert_with(|| t.clone());
        Ok(t)
    }

    pub fn run_config(&self, cell: &Cell, seed: u64) -> TrainConfig {
        TrainConfig { variant: cell.variant, grid: cell.grid, seed, ..self.setup.train.clone() }
    }

    fn run_key(&self, config: &TrainConfig) -> String {
        let mut h = Sha256::new();
        h.update(config_hash(config, &self.setup.backbone, self.setup.num_classes()));
        h.update(serde_json::to_vec(&self.setup.dataset).expect("serializable"));
        h.update(serde_json::to_vec(&PretrainConfig { seed: config.seed, ..self.setup.pretrain.clone() }).expect("serializable"));
        hex::encode(&h.finalize()[..16])
    }

    /// Trains and evaluates one cell for one seed, or returns the cached record.
    pub fn run(&self, cell: &Cell, seed: u64) -> Result<RunRecord> {
        let config = self.run_config(cell, seed);
        let key = self.run_key(&config);
        let relabel = |r: RunRecord| RunRecord { label: cell.label.clone(), ..r };
        if let Some(r) = self.runs.lock().expect("run cache").get(&key) {
            return Ok(relabel(r.clone()));
        }
        let cached_file = self.cache_dir.as_ref().map(|d| d.join(format!("{key}.json")));
        if let Some(path) = cached_file.as_ref().filter(|p| p.is_file()) {
            let text = fs::read_to_string(path).map_err(|e| RoadError::io(path, e))?;
            let r: RunRecord = serde_json::from_str(&text)
                .map_err(|e| RoadError::Format { path: path.clone(), detail: e.to_string() })?;
            self.runs.lock().expect("run cache").insert(key, r.clone());
            return Ok(relabel(r));
        }

        let teacher = self.teacher(seed)?;
        let inputs = TrainInputs {
            data: &self.data,
            init: Init::Pretrained(teacher.backbone()),
            teacher: config.variant.uses_teacher().then_some(&*teacher),
            val: Some(&self.val),
            num_classes: self.setup.num_classes(),
        };
        let mut trainer = Trainer::new(config.clone(), inputs)?;
        trainer.run()?;
        let eval = evaluate_model(trainer.student(), &self.val, None, Inference::Full)?;
        let record = RunRecord {
            label: cell.label.clone(),
            seed,
            config,
            key: key.clone(),
            miou: eval.report.mean_iou,
            per_class: eval.report.per_class,
        };
        if let Some(path) = cached_file {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| RoadError::io(dir, e))?;
            }
            let text = serde_json::to_string_pretty(&record).expect("serializable");
            fs::write(&path, text).map_err(|e| RoadError::io(&path, e))?;
        }
        if let Some(hook) = &self.on_run {
            hook(&record);
        }
        self.runs.lock().expect("run cache").insert(key, record.clone());
        Ok(record)
    }

    /// Every cell of `suite` for every seed, on up to `jobs` threads. Results
    /// are ordered by cell, then seed, regardless of `jobs`.
    pub fn run_suite(&self, suite: Suite, seeds: &[u64], jobs: usize) -> Result<AblationResult> {
        if seeds.is_empty() {
            return Err(RoadError::Config("ablation needs at least one seed".into()));
        }
        let cells = suite.cells(&self.setup.train);
        let work: Vec<(&Cell, u64)> = cells.iter().flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
        let results: Vec<Mutex<Option<Result<RunRecord>>>> = work.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let worker = || loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            let Some(&(cell, seed)) = work.get(i) else { break };
            let r = self.run(cell, seed);
            *results[i].lock().expect("result slot") = Some(r);
        };
        let jobs = jobs.clamp(1, work.len());
        if jobs == 1 {
            worker();
        } else {
            std::thread::scope(|s| {
                for _ in 0..jobs {
                    s.spawn(worker);
                }
            });
        }
        let runs = results
            .into_iter()
            .map(|m| m.into_inner().expect("result slot").expect("every slot filled"))
            .collect::<Result<Vec<_>>>()?;
        let summary = summarize(&cells, &runs);
        Ok(AblationResult { suite, seeds: seeds.to_vec(), base: self.setup.train.clone(), runs, summary })
    }
}
