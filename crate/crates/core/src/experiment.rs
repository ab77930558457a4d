//! Experiment configuration, (strategy x seed) sweeps and result tables.
//!
//! A run directory holds one `<strategy>-seed-<seed>/` subdirectory per cell
//! (`iterations.jsonl`, `history.csv`, `manifest.cfg`, `model.bin`, and a
//! `FAILED` marker if the cell errored) plus the top-level `manifest.cfg`,
//! `curves.csv` (mean and std across seeds) and `runs.csv` (every value of
//! every run).

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::active::{read_loop_config, run_active_learning_with, write_loop_config, EvalSets, LoopConfig};
use crate::datasets::{
    generate_mixture, generate_ood, load_features, DatasetSpec, FeatureFormat, FeatureMatrix, ShiftKind, ShiftSpec,
};
use crate::error::{Error, Result};
use crate::flatconf::{join, FlatConfig};
use crate::metrics::IterationReport;
use crate::model::ModelConfig;
use crate::rng;
use crate::strategies::StrategyKind;

pub const PRESETS: [&str; 3] = ["desk-imbalanced", "desk-balanced", "smoke"];

/// Built-in configurations. The desk presets run ten iterations of 100
/// labels over a ten-class Gaussian mixture, scoring 2000 random pool
/// samples per iteration, over five seeds.
pub fn preset(name: &str) -> Result<FlatConfig> {
    let text = match name {
        "desk-imbalanced" => DESK_IMBALANCED,
        "desk-balanced" => DESK_BALANCED,
        "smoke" => SMOKE,
        _ => {
            return Err(Error::Config(format!(
                "unknown preset {name:?} (expected {})",
                PRESETS.join(" | ")
            )))
        }
    };
    FlatConfig::parse(text)
}

const DESK_IMBALANCED: &str = "
data.source = synthetic
data.classes = 10
data.dim = 16
data.n_per_class = 5000
data.imbalance_ratio = 50
data.class_separation = 3
data.noise_sigma = 1
data.seed = 1
data.test_per_class = 100
data.ood_count = 1000
loop.budget = 1000
loop.M = 100
loop.subset_size = 2000
experiment.strategies = featuresim,fre,entropy,bald,coreset,random
experiment.seeds = 0,1,2,3,4
experiment.out = runs/desk-imbalanced
shift.kinds = additive_gaussian,feature_scale,feature_dropout_mask,mean_drift
shift.intensities = 1,2,3,4,5
shift.seed = 3
";

const DESK_BALANCED: &str = "
data.source = synthetic
data.classes = 10
data.dim = 16
data.n_per_class = 500
data.imbalance_ratio = 1
data.class_separation = 3
data.noise_sigma = 1
data.seed = 1
data.test_per_class = 100
data.ood_count = 1000
loop.budget = 1000
loop.M = 100
loop.subset_size = 2000
experiment.strategies = featuresim,fre,entropy,bald,coreset,random
experiment.seeds = 0,1,2,3,4
experiment.out = runs/desk-balanced
shift.kinds = additive_gaussian,feature_scale,feature_dropout_mask,mean_drift
shift.intensities = 1,2,3,4,5
shift.seed = 3
";

const SMOKE: &str = "
data.source = synthetic
data.classes = 3
data.dim = 4
data.n_per_class = 60
data.imbalance_ratio = 1
data.class_separation = 3
data.noise_sigma = 1
data.seed = 1
data.test_per_class = 20
data.ood_count = 30
loop.budget = 30
loop.M = 10
loop.subset_size = 40
loop.mc_passes = 4
model.d_hidden = 16
model.d_feat = 8
model.d_proj = 8
model.epochs = 3
model.classifier_steps = 50
model.lr_decay_epoch = none
experiment.strategies = featuresim,random
experiment.seeds = 0,1
experiment.out = runs/smoke
shift.kinds = additive_gaussian
shift.intensities = 1,3
shift.seed = 3
";

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Gaussian-mixture pool, balanced test set and OOD set.
    Synthetic {
        spec: DatasetSpec,
        test_per_class: usize,
        ood_count: usize,
    },
    /// Feature files; format follows the extension (`.csv` or binary).
    Files {
        train: PathBuf,
        test: PathBuf,
        ood: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub model: ModelConfig,
    /// Template for every cell; strategy and seed are set per cell.
    pub loop_config: LoopConfig,
    pub strategies: Vec<StrategyKind>,
    pub shifts: Vec<ShiftSpec>,
    pub shift_seed: u64,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

const DATA_KEYS: [&str; 13] = [
    "data.source",
    "data.classes",
    "data.dim",
    "data.n_per_class",
    "data.imbalance_ratio",
    "data.class_separation",
    "data.noise_sigma",
    "data.seed",
    "data.test_per_class",
    "data.ood_count",
    "data.train",
    "data.test",
    "data.ood",
];
const OTHER_KEYS: [&str; 7] = [
    "experiment.preset",
    "experiment.strategies",
    "experiment.seeds",
    "experiment.out",
    "shift.kinds",
    "shift.intensities",
    "shift.seed",
];

fn known_keys() -> Vec<String> {
    let mut c = FlatConfig::new();
    ModelConfig::default().write_to(&mut c, "model");
    let mut l = LoopConfig::new(StrategyKind::Random, 1, 1, 1);
    l.loss = Some(crate::model::LossKind::Contrastive);
    write_loop_config(&l, &mut c);
    c.keys()
        .map(str::to_string)
        .chain(DATA_KEYS.iter().chain(&OTHER_KEYS).map(|k| k.to_string()))
        .collect()
}

impl ExperimentConfig {
    /// Parse a config, layering it over `experiment.preset` when set.
    /// Unknown keys are rejected; `meta.*` keys are ignored.
    pub fn from_flat(c: &FlatConfig) -> Result<Self> {
        let mut merged = match c.raw("experiment.preset") {
            Some(name) => preset(name)?,
            None => FlatConfig::new(),
        };
        for key in c.keys() {
            merged.set(key, c.raw(key).unwrap_or_default());
        }
        let c = &merged;
        let known = known_keys();
        let unknown: Vec<&str> = c
            .keys()
            .filter(|k| !k.starts_with("meta.") && !known.iter().any(|n| n == k))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }

        let data = match c.raw("data.source").unwrap_or("synthetic") {
            "synthetic" => {
                let d = DatasetSpec::default();
                let spec = DatasetSpec {
                    classes: c.get_or("data.classes", d.classes)?,
                    dim: c.get_or("data.dim", d.dim)?,
                    n_per_class: c.get_or("data.n_per_class", d.n_per_class)?,
                    imbalance_ratio: c.get_or("data.imbalance_ratio", d.imbalance_ratio)?,
                    class_separation: c.get_or("data.class_separation", d.class_separation)?,
                    noise_sigma: c.get_or("data.noise_sigma", d.noise_sigma)?,
                    seed: c.get_or("data.seed", d.seed)?,
                };
                DataSource::Synthetic {
                    spec,
                    test_per_class: c.get_or("data.test_per_class", 100)?,
                    ood_count: c.get_or("data.ood_count", 1000)?,
                }
            }
            "files" => {
                let path = |k: &str| c.raw(k).filter(|s| !s.is_empty()).map(PathBuf::from);
                DataSource::Files {
                    train: path("data.train").ok_or_else(|| Error::Config("data.source = files needs data.train".into()))?,
                    test: path("data.test").ok_or_else(|| Error::Config("data.source = files needs data.test".into()))?,
                    ood: path("data.ood"),
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "data.source = {other:?} (expected synthetic | files)"
                )))
            }
        };

        let mut model_base = ModelConfig::default();
        if let DataSource::Synthetic { spec, .. } = &data {
            model_base.d_in = spec.dim;
            model_base.classes = spec.classes;
        }
        let model = ModelConfig::read_from(c, "model", &model_base)?;

        let strategies: Vec<StrategyKind> = match c.get_list("experiment.strategies")? {
            Some(list) => list,
            None => vec![c.get_or("loop.strategy", StrategyKind::Featuresim)?],
        };
        let mut loop_base = LoopConfig::new(strategies.first().copied().unwrap_or(StrategyKind::Random), 1000, 100, 2000);
        loop_base.strategy = c.get_or("loop.strategy", loop_base.strategy)?;
        let loop_config = read_loop_config(c, &loop_base)?;

        let kinds: Vec<ShiftKind> = c.get_list("shift.kinds")?.unwrap_or_default();
        let intensities: Vec<u8> = c.get_list("shift.intensities")?.unwrap_or_else(|| vec![1, 2, 3, 4, 5]);
        let seeds: Vec<u64> = c.get_list("experiment.seeds")?.unwrap_or_else(|| vec![0]);
        let config = Self {
            data,
            model,
            loop_config,
            strategies,
            shifts: ShiftSpec::suite(&kinds, &intensities),
            shift_seed: c.get_or("shift.seed", 0)?,
            seeds,
            out_dir: c.get_or("experiment.out", PathBuf::from("runs/experiment"))?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_flat(&FlatConfig::parse(&text)?)
    }

    /// Checks that need no computation.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds is empty".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("experiment.strategies is empty".into()));
        }
        let mut seen = self.strategies.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.strategies.len() {
            return Err(Error::Config("experiment.strategies lists a strategy twice".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("experiment.seeds lists a seed twice".into()));
        }
        for s in &self.shifts {
            s.magnitude().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.loop_config.validate()?;
        self.model.validate()?;
        match &self.data {
            DataSource::Synthetic {
                spec,
                test_per_class,
                ood_count,
            } => {
                spec.validate()?;
                if *test_per_class == 0 {
                    return Err(Error::Config("data.test_per_class must be positive".into()));
                }
                let pool: usize = crate::datasets::class_sizes(spec)?.iter().sum();
                if self.loop_config.subset_size > pool {
                    return Err(Error::Config(format!(
                        "loop.subset_size {} exceeds the pool size {pool}",
                        self.loop_config.subset_size
                    )));
                }
                if *ood_count == 0 {
                    log::info!("data.ood_count = 0: OOD AUROC is not reported");
                }
            }
            DataSource::Files { train, test, ood } => {
                for p in std::iter::once(train).chain(Some(test)).chain(ood.as_ref()) {
                    if !p.is_file() {
                        return Err(Error::Config(format!("data file {} does not exist", p.display())));
                    }
                }
            }
        }
        Ok(())
    }

    /// Full echo of the resolved configuration; parsing it back yields an
    /// equal config.
    pub fn to_flat(&self) -> FlatConfig {
        let mut c = FlatConfig::new();
        match &self.data {
            DataSource::Synthetic {
                spec,
                test_per_class,
                ood_count,
            } => {
                c.set("data.source", "synthetic");
                c.set("data.classes", spec.classes);
                c.set("data.dim", spec.dim);
                c.set("data.n_per_class", spec.n_per_class);
                c.set("data.imbalance_ratio", spec.imbalance_ratio);
                c.set("data.class_separation", spec.class_separation);
                c.set("data.noise_sigma", spec.noise_sigma);
                c.set("data.seed", spec.seed);
                c.set("data.test_per_class", test_per_class);
                c.set("data.ood_count", ood_count);
            }
            DataSource::Files { train, test, ood } => {
                c.set("data.source", "files");
                c.set("data.train", train.display());
                c.set("data.test", test.display());
                if let Some(ood) = ood {
                    c.set("data.ood", ood.display());
                }
            }
        }
        self.model.write_to(&mut c, "model");
        write_loop_config(&self.loop_config, &mut c);
        c.set("experiment.strategies", join(&self.strategies));
        c.set("experiment.seeds", join(&self.seeds));
        c.set("experiment.out", self.out_dir.display());
        let mut kinds: Vec<ShiftKind> = self.shifts.iter().map(|s| s.kind).collect();
        kinds.dedup();
        let mut intensities: Vec<u8> = self.shifts.iter().map(|s| s.intensity).collect();
        intensities.sort_unstable();
        intensities.dedup();
        c.set("shift.kinds", join(&kinds));
        c.set("shift.intensities", join(&intensities));
        c.set("shift.seed", self.shift_seed);
        c
    }

    /// Pool, evaluation sets and the model config with input width and class
    /// count taken from the data.
    pub fn prepare(&self) -> Result<Prepared> {
        let (pool, test, ood) = match &self.data {
            DataSource::Synthetic {
                spec,
                test_per_class,
                ood_count,
            } => {
                let pool = generate_mixture(spec)?;
                let test_spec = DatasetSpec {
                    n_per_class: *test_per_class,
                    imbalance_ratio: 1.0,
                    seed: rng::derive(spec.seed, 1),
                    ..spec.clone()
                };
                let test = generate_mixture(&test_spec)?;
                let ood = (*ood_count > 0)
                    .then(|| generate_ood(spec, *ood_count, rng::derive(spec.seed, 2)))
                    .transpose()?;
                (pool, test, ood)
            }
            DataSource::Files { train, test, ood } => {
                let load = |p: &Path| load_features(p, FeatureFormat::from_path(p));
                (load(train)?, load(test)?, ood.as_deref().map(load).transpose()?)
            }
        };
        pool.require_labels()?;
        let mut model = self.model.clone();
        model.d_in = pool.d();
        if let DataSource::Files { .. } = self.data {
            model.classes = model.classes.max(pool.label_cardinality()).max(test.label_cardinality());
        }
        let mut eval = EvalSets::new(test)?.with_shifts(&self.shifts, self.shift_seed)?;
        if let Some(ood) = ood {
            eval = eval.with_ood(ood)?;
        }
        Ok(Prepared { pool, eval, model })
    }

    pub fn cell_config(&self, strategy: StrategyKind, seed: u64) -> LoopConfig {
        LoopConfig {
            strategy,
            seed,
            ..self.loop_config.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub pool: FeatureMatrix,
    pub eval: EvalSets,
    pub model: ModelConfig,
}

pub fn cell_dir_name(strategy: StrategyKind, seed: u64) -> String {
    format!("{}-seed-{seed}", strategy.name())
}

/// Outcome of one (strategy, seed) cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub dir: PathBuf,
    pub reports: Vec<IterationReport>,
    pub truncated: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub cells: Vec<CellResult>,
    pub curves: Vec<CurveRow>,
}

impl RunSummary {
    pub fn failed(&self) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter(|c| c.error.is_some())
    }
}

fn manifest_text(config: &FlatConfig) -> String {
    let mut c = config.clone();
    c.set("meta.crate", env!("CARGO_PKG_NAME"));
    c.set("meta.version", env!("CARGO_PKG_VERSION"));
    c.render()
}

/// Run every (strategy x seed) cell in order and write the run directory.
///
/// A failing cell leaves its partial output and a `FAILED` marker, and the
/// remaining cells still run; check [`RunSummary::failed`].
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary> {
    config.validate()?;
    let prepared = config.prepare()?;
    let out = &config.out_dir;
    fs::create_dir_all(out)?;
    let mut echo = config.to_flat();
    prepared.model.write_to(&mut echo, "model");
    fs::write(out.join("manifest.cfg"), manifest_text(&echo))?;

    let mut cells = Vec::new();
    for &strategy in &config.strategies {
        for &seed in &config.seeds {
            log::info!("running {strategy} seed {seed}");
            cells.push(run_cell(config, &prepared, strategy, seed)?);
        }
    }
    let curves = aggregate(&cells);
    write_curves(&out.join("curves.csv"), &curves)?;
    write_runs(&out.join("runs.csv"), &cells)?;
    Ok(RunSummary {
        out_dir: out.clone(),
        cells,
        curves,
    })
}

fn run_cell(config: &ExperimentConfig, prepared: &Prepared, strategy: StrategyKind, seed: u64) -> Result<CellResult> {
    let dir = config.out_dir.join(cell_dir_name(strategy, seed));
    fs::create_dir_all(&dir)?;
    let marker = dir.join("FAILED");
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    let loop_config = config.cell_config(strategy, seed);
    let mut echo = config.to_flat();
    prepared.model.write_to(&mut echo, "model");
    write_loop_config(&loop_config, &mut echo);
    echo.set("experiment.strategies", strategy);
    echo.set("experiment.seeds", seed);
    fs::write(dir.join("manifest.cfg"), manifest_text(&echo))?;

    let mut jsonl = BufWriter::new(File::create(dir.join("iterations.jsonl"))?);
    let outcome = run_active_learning_with(&prepared.pool, &prepared.eval, &prepared.model, &loop_config, |r| {
        serde_json::to_writer(&mut jsonl, r)?;
        jsonl.write_all(b"\n")?;
        jsonl.flush()?;
        Ok(())
    });
    drop(jsonl);
    let result = outcome.and_then(|outcome| {
        write_history(&dir.join("history.csv"), &prepared.pool, outcome.pool.history())?;
        outcome.scorer.save(&dir.join("model.bin"))?;
        Ok(outcome)
    });
    match result {
        Ok(outcome) => Ok(CellResult {
            strategy,
            seed,
            dir,
            reports: outcome.reports,
            truncated: outcome.truncated,
            error: None,
        }),
        Err(e) => {
            log::error!("{strategy} seed {seed} failed: {e}");
            fs::write(&marker, format!("{e}\n"))?;
            Ok(CellResult {
                strategy,
                seed,
                reports: read_jsonl(&dir.join("iterations.jsonl")).unwrap_or_default(),
                dir,
                truncated: false,
                error: Some(e.to_string()),
            })
        }
    }
}

fn write_history(path: &Path, pool: &FeatureMatrix, history: &[Vec<usize>]) -> Result<()> {
    let labels = pool.require_labels()?;
    let mut w = csv::Writer::from_path(path).map_err(std::io::Error::from)?;
    w.write_record(["iteration", "index", "id", "label"]).map_err(std::io::Error::from)?;
    for (t, ids) in history.iter().enumerate() {
        for &i in ids {
            w.write_record([(t + 1).to_string(), i.to_string(), pool.ids()[i].clone(), labels[i].to_string()])
                .map_err(std::io::Error::from)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<IterationReport>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

/// Mean and standard deviation of one metric at one iteration across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub strategy: String,
    pub iteration: usize,
    pub labeled_count: usize,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub n_seeds: usize,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Curves over all cells, in strategy order of first appearance.
pub fn aggregate(cells: &[CellResult]) -> Vec<CurveRow> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_key: BTreeMap<(usize, usize, usize), Vec<f64>> = BTreeMap::new();
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for cell in cells {
        let name = cell.strategy.name();
        let s = order.iter().position(|&o| o == name).unwrap_or_else(|| {
            order.push(name);
            order.len() - 1
        });
        for r in &cell.reports {
            counts.entry((s, r.iteration)).or_insert(r.labeled_count);
            for (m, metric) in IterationReport::METRICS.iter().enumerate() {
                if let Some(v) = r.metric(metric) {
                    by_key.entry((s, r.iteration, m)).or_default().push(v);
                }
            }
        }
    }
    by_key
        .into_iter()
        .map(|((s, t, m), values)| {
            let (mean, std) = mean_std(&values);
            CurveRow {
                strategy: order[s].to_string(),
                iteration: t,
                labeled_count: counts[&(s, t)],
                metric: IterationReport::METRICS[m].to_string(),
                mean,
                std,
                n_seeds: values.len(),
            }
        })
        .collect()
}

fn write_curves(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(std::io::Error::from)?;
    w.write_record(["strategy", "iteration", "labeled_count", "metric", "mean", "std", "n_seeds"])
        .map_err(std::io::Error::from)?;
    for r in rows {
        w.write_record([
            r.strategy.clone(),
            r.iteration.to_string(),
            r.labeled_count.to_string(),
            r.metric.clone(),
            r.mean.to_string(),
            r.std.to_string(),
            r.n_seeds.to_string(),
        ])
        .map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

fn write_runs(path: &Path, cells: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(std::io::Error::from)?;
    w.write_record(["strategy", "seed", "iteration", "labeled_count", "metric", "value"])
        .map_err(std::io::Error::from)?;
    for cell in cells {
        for r in &cell.reports {
            for metric in IterationReport::METRICS {
                if let Some(v) = r.metric(metric) {
                    w.write_record([
                        cell.strategy.name().to_string(),
                        cell.seed.to_string(),
                        r.iteration.to_string(),
                        r.labeled_count.to_string(),
                        metric.to_string(),
                        v.to_string(),
                    ])
                    .map_err(std::io::Error::from)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Metrics in the final-iteration summary table.
pub const SUMMARY_METRICS: [&str; 8] = [
    "accuracy",
    "auroc_ood",
    "mce",
    "ece",
    "shift_ece",
    "sampling_bias",
    "nll",
    "brier",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub strategy: String,
    pub iteration: usize,
    pub labeled_count: usize,
    pub n_seeds: usize,
    /// `(metric, mean, std)`; metrics a strategy never reported are absent.
    pub values: Vec<(String, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub summary: Vec<SummaryRow>,
    pub curves: Vec<CurveRow>,
    pub failed_cells: Vec<String>,
}

/// Load every cell of a run directory.
pub fn load_cells(run_dir: &Path) -> Result<Vec<CellResult>> {
    if !run_dir.is_dir() {
        return Err(Error::Config(format!("run directory {} does not exist", run_dir.display())));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(run_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("iterations.jsonl").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Config(format!("{} holds no runs", run_dir.display())));
    }
    let mut cells = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let manifest = FlatConfig::parse(&fs::read_to_string(dir.join("manifest.cfg"))?)?;
        let strategy: StrategyKind = manifest
            .raw("loop.strategy")
            .ok_or_else(|| Error::Format {
                path: dir.join("manifest.cfg"),
                message: "missing loop.strategy".into(),
            })?
            .parse()?;
        let failed = dir.join("FAILED");
        cells.push(CellResult {
            strategy,
            seed: manifest.get_or("loop.seed", 0)?,
            reports: read_jsonl(&dir.join("iterations.jsonl"))?,
            truncated: false,
            error: failed
                .is_file()
                .then(|| fs::read_to_string(&failed).unwrap_or_default().trim().to_string()),
            dir,
        });
    }
    cells.sort_by_key(|c| (c.strategy, c.seed));
    Ok(cells)
}

/// Final-iteration summary per strategy and the learning curves, recomputed
/// from the per-cell JSONL. Writes `summary.csv` and one
/// `curve_<metric>.csv` per metric into `run_dir`.
pub fn report(run_dir: &Path) -> Result<RunReport> {
    let cells = load_cells(run_dir)?;
    let ok: Vec<CellResult> = cells.iter().filter(|c| c.error.is_none()).cloned().collect();
    let curves = aggregate(&ok);
    let mut summary = Vec::new();
    let mut strategies: Vec<&str> = curves.iter().map(|r| r.strategy.as_str()).collect();
    strategies.dedup();
    for strategy in strategies {
        let rows: Vec<&CurveRow> = curves.iter().filter(|r| r.strategy == strategy).collect();
        let last = rows.iter().map(|r| r.iteration).max().unwrap_or(0);
        let at_last: Vec<&&CurveRow> = rows.iter().filter(|r| r.iteration == last).collect();
        summary.push(SummaryRow {
            strategy: strategy.to_string(),
            iteration: last,
            labeled_count: at_last.first().map_or(0, |r| r.labeled_count),
            n_seeds: at_last.iter().map(|r| r.n_seeds).max().unwrap_or(0),
            values: SUMMARY_METRICS
                .iter()
                .filter_map(|m| at_last.iter().find(|r| r.metric == *m).map(|r| (m.to_string(), r.mean, r.std)))
                .collect(),
        });
    }

    let mut w = csv::Writer::from_path(run_dir.join("summary.csv")).map_err(std::io::Error::from)?;
    let mut header = vec!["strategy".to_string(), "iteration".into(), "labeled_count".into(), "n_seeds".into()];
    for m in SUMMARY_METRICS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    w.write_record(&header).map_err(std::io::Error::from)?;
    for row in &summary {
        let mut rec = vec![
            row.strategy.clone(),
            row.iteration.to_string(),
            row.labeled_count.to_string(),
            row.n_seeds.to_string(),
        ];
        for m in SUMMARY_METRICS {
            match row.values.iter().find(|(name, _, _)| name == m) {
                Some((_, mean, std)) => {
                    rec.push(mean.to_string());
                    rec.push(std.to_string());
                }
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec).map_err(std::io::Error::from)?;
    }
    w.flush()?;

    for metric in IterationReport::METRICS {
        let rows: Vec<&CurveRow> = curves.iter().filter(|r| r.metric == metric).collect();
        if rows.is_empty() {
            continue;
        }
        let mut w = csv::Writer::from_path(run_dir.join(format!("curve_{metric}.csv"))).map_err(std::io::Error::from)?;
        w.write_record(["strategy", "iteration", "labeled_count", "mean", "std", "n_seeds"])
            .map_err(std::io::Error::from)?;
        for r in rows {
            w.write_record([
                r.strategy.clone(),
                r.iteration.to_string(),
                r.labeled_count.to_string(),
                r.mean.to_string(),
                r.std.to_string(),
                r.n_seeds.to_string(),
            ])
            .map_err(std::io::Error::from)?;
        }
        w.flush()?;
    }
    Ok(RunReport {
        summary,
        curves,
        failed_cells: cells
            .iter()
            .filter(|c| c.error.is_some())
            .map(|c| c.dir.display().to_string())
            .collect(),
    })
}

impl RunReport {
    /// Plain-text table of the summary.
    pub fn render(&self) -> String {
        let mut out = format!("{:<12} {:>4} {:>7} {:>5}", "strategy", "iter", "labeled", "seeds");
        for m in SUMMARY_METRICS {
            out.push_str(&format!(" {m:>13}"));
        }
        out.push('\n');
        for row in &self.summary {
            out.push_str(&format!(
                "{:<12} {:>4} {:>7} {:>5}",
                row.strategy, row.iteration, row.labeled_count, row.n_seeds
            ));
            for m in SUMMARY_METRICS {
                match row.values.iter().find(|(name, _, _)| name == m) {
                    Some((_, mean, _)) => out.push_str(&format!(" {mean:>13.4}")),
                    None => out.push_str(&format!(" {:>13}", "-")),
                }
            }
            out.push('\n');
        }
        for dir in &self.failed_cells {
            out.push_str(&format!("FAILED: {dir}\n"));
        }
        out
    }
}
