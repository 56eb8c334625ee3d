//! Experiment configuration, orchestration and result files.
//!
//! A run directory looks like
//!
//! ```text
//! out/
//!   results.csv      deterministic metrics, one row per run and period
//!   timing.csv       wall-clock numbers
//!   summary.json     mean and std over seeds at the final period
//!   summary.txt      the same as a table
//!   runs/<key>/      record.json, epochs.jsonl, buffers.json, checkpoints, done
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{error, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{self, PeriodData};
use crate::error::{Error, Result};
use crate::graph::{generate_synthetic, load_graph, load_graph_with_periods, SynthConfig, TemporalGraph};
use crate::metrics::RunRecord;
use crate::selector::{Partitioner, SelectionConfig};
use crate::trainer::{run_strategy_on, Ablation, RunOutput, Strategy, TrainConfig};

pub const RESULTS_FILE: &str = "results.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_TXT: &str = "summary.txt";
pub const SEED_ENV: &str = "TGCL_SEED";
const MAX_INCLUDE_DEPTH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// The generator seed is offset by the run seed, so every seed sees a
    /// different graph.
    Synthetic(SynthConfig),
    Files {
        nodes: PathBuf,
        events: PathBuf,
        #[serde(default)]
        periods: Option<PathBuf>,
    },
}

/// One grid of sweep values. Every axis given is crossed with the others;
/// axes left out keep the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_prime: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition_size: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partitioner: Option<Vec<Partitioner>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub strategies: Vec<Strategy>,
    /// Ablations run for the `ltf` strategy.
    #[serde(default = "default_ablations")]
    pub ablations: Vec<Ablation>,
    #[serde(default)]
    pub sel: SelectionConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// The union of all grids is run. Empty means the base point only.
    #[serde(default)]
    pub sweeps: Vec<SweepGrid>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_ablations() -> Vec<Ablation> {
    vec![Ablation::BothPlusLdst]
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Main,
    Ablation,
    Sensitivity,
    Partition,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "main" => Ok(Preset::Main),
            "ablation" => Ok(Preset::Ablation),
            "sensitivity" => Ok(Preset::Sensitivity),
            "partition" => Ok(Preset::Partition),
            other => Err(Error::config(format!(
                "unknown preset `{other}` (expected main, ablation, sensitivity or partition)"
            ))),
        }
    }
}

pub const SENSITIVITY_GRID: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
pub const BUDGET_SCALES: [f64; 3] = [0.5, 1.0, 1.5];

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::config("strategies: at least one strategy is required"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds: at least one seed is required"));
        }
        if self.strategies.contains(&Strategy::Ltf) && self.ablations.is_empty() {
            return Err(Error::config("ablations: ltf needs at least one ablation"));
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.validate().map_err(|e| Error::config(format!("data.synthetic: {e}")))?;
        }
        self.train.validate()?;
        for point in self.points()? {
            point.sel.validate().map_err(|e| Error::config(format!("sweep point {}: {e}", point.name)))?;
            point.train.validate().map_err(|e| Error::config(format!("sweep point {}: {e}", point.name)))?;
        }
        Ok(())
    }

    /// Replaces strategies, ablations and sweeps with a preset's.
    pub fn apply_preset(&mut self, preset: Preset) {
        match preset {
            Preset::Main => {
                self.strategies = Strategy::ALL.to_vec();
                self.ablations = default_ablations();
                self.sweeps.clear();
            }
            Preset::Ablation => {
                self.strategies = vec![Strategy::Ltf];
                self.ablations = Ablation::ALL.to_vec();
                self.sweeps.clear();
            }
            Preset::Sensitivity => {
                let scaled = |base: usize| -> Vec<usize> {
                    let mut v: Vec<usize> =
                        BUDGET_SCALES.iter().map(|s| ((base as f64 * s).round() as usize).max(1)).collect();
                    v.dedup();
                    v
                };
                self.strategies = vec![Strategy::Ltf];
                self.ablations = default_ablations();
                self.sweeps = vec![
                    SweepGrid {
                        alpha: Some(SENSITIVITY_GRID.iter().map(|s| s * self.sel.alpha).collect()),
                        ..Default::default()
                    },
                    SweepGrid {
                        beta: Some(SENSITIVITY_GRID.iter().map(|s| s * self.train.beta).collect()),
                        ..Default::default()
                    },
                    SweepGrid { m: Some(scaled(self.sel.m)), ..Default::default() },
                    SweepGrid { m_prime: Some(scaled(self.sel.m_prime)), ..Default::default() },
                ];
            }
            Preset::Partition => {
                let p = self.sel.partition_size;
                let mut sizes: Vec<usize> = [p, p / 2, p / 4].iter().map(|&s| s.max(self.sel.m + 1)).collect();
                sizes.dedup();
                self.strategies = vec![Strategy::Ltf];
                self.ablations = default_ablations();
                self.sweeps = vec![SweepGrid {
                    partitioner: Some(vec![Partitioner::Random, Partitioner::Kmeans, Partitioner::Hierarchical]),
                    partition_size: Some(sizes),
                    ..Default::default()
                }];
            }
        }
    }

    /// Expands the sweep grids into named configuration points.
    pub fn points(&self) -> Result<Vec<SweepPoint>> {
        if self.sweeps.is_empty() {
            return Ok(vec![SweepPoint { name: "base".into(), sel: self.sel.clone(), train: self.train.clone() }]);
        }
        let mut out: Vec<SweepPoint> = Vec::new();
        for grid in &self.sweeps {
            let mut points = vec![SweepPoint { name: String::new(), sel: self.sel.clone(), train: self.train.clone() }];
            fn cross<T: Clone + std::fmt::Display>(
                points: Vec<SweepPoint>,
                axis: &str,
                values: &Option<Vec<T>>,
                set: impl Fn(&mut SweepPoint, T),
            ) -> Vec<SweepPoint> {
                let Some(values) = values else { return points };
                let mut next = Vec::with_capacity(points.len() * values.len());
                for p in &points {
                    for v in values {
                        let mut q = p.clone();
                        if !q.name.is_empty() {
                            q.name.push(',');
                        }
                        let _ = write!(q.name, "{axis}={v}");
                        set(&mut q, v.clone());
                        next.push(q);
                    }
                }
                next
            }
            points = cross(points, "alpha", &grid.alpha, |p, v| p.sel.alpha = v);
            points = cross(points, "beta", &grid.beta, |p, v| p.train.beta = v);
            points = cross(points, "m", &grid.m, |p, v| p.sel.m = v);
            points = cross(points, "m_prime", &grid.m_prime, |p, v| p.sel.m_prime = v);
            points = cross(
                points,
                "partitioner",
                &grid.partitioner.as_ref().map(|v| v.iter().map(|p| PartitionerName(*p)).collect()),
                |p, v| p.sel.partitioner = v.0,
            );
            points = cross(points, "p", &grid.partition_size, |p, v| p.sel.partition_size = v);
            for p in points {
                if p.name.is_empty() {
                    return Err(Error::config("sweeps: a grid must set at least one axis"));
                }
                if !out.iter().any(|q| q.name == p.name) {
                    out.push(p);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy)]
struct PartitionerName(Partitioner);

impl std::fmt::Display for PartitionerName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self.0 {
            Partitioner::Random => "random",
            Partitioner::Kmeans => "kmeans",
            Partitioner::Hierarchical => "hierarchical",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub name: String,
    pub sel: SelectionConfig,
    pub train: TrainConfig,
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_with_includes(path: &Path, depth: usize) -> Result<serde_json::Value> {
    if depth > MAX_INCLUDE_DEPTH {
        return Err(Error::config(format!("{}: includes nested deeper than {MAX_INCLUDE_DEPTH}", path.display())));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let include = value.as_object_mut().and_then(|o| o.remove("include"));
    let Some(include) = include else { return Ok(value) };
    let dir = path.parent().unwrap_or(Path::new("."));
    let includes: Vec<String> = match include {
        serde_json::Value::String(s) => vec![s],
        serde_json::Value::Array(a) => a
            .into_iter()
            .map(|v| v.as_str().map(str::to_owned).ok_or_else(|| Error::config("include: entries must be strings")))
            .collect::<Result<_>>()?,
        _ => return Err(Error::config("include: expected a path or a list of paths")),
    };
    let mut merged = serde_json::Value::Object(Default::default());
    for inc in includes {
        merge(&mut merged, read_with_includes(&dir.join(inc), depth + 1)?);
    }
    merge(&mut merged, value);
    Ok(merged)
}

/// Parses a config value, reporting the field path of any error.
pub fn parse_config(value: serde_json::Value) -> Result<ExperimentConfig> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::config(format!("{path}: {}", e.into_inner()))
    })
}

/// Loads a config file, resolving `include` entries (merged underneath the
/// including file) and data paths relative to the file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let value = read_with_includes(path, 0)?;
    let mut cfg = parse_config(value).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    if let DataSource::Files { nodes, events, periods } = &mut cfg.data {
        *nodes = dir.join(&*nodes);
        *events = dir.join(&*events);
        if let Some(p) = periods {
            *p = dir.join(&*p);
        }
    }
    Ok(cfg)
}

/// Seeds from `TGCL_SEED` when set, else the config's.
pub fn effective_seeds(cfg: &ExperimentConfig) -> Result<Vec<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(|s| vec![s])
            .map_err(|_| Error::config(format!("{SEED_ENV}: expected an unsigned integer, got `{v}`"))),
        Err(_) => Ok(cfg.seeds.clone()),
    }
}

pub fn load_graph_for(data: &DataSource, seed: u64) -> Result<TemporalGraph> {
    match data {
        DataSource::Synthetic(s) => generate_synthetic(&SynthConfig { seed: s.seed.wrapping_add(seed), ..s.clone() }),
        DataSource::Files { nodes, events, periods: Some(p) } => load_graph_with_periods(nodes, events, p),
        DataSource::Files { nodes, events, periods: None } => load_graph(nodes, events),
    }
}

/// One unit of work.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub variant: String,
    pub seed: u64,
    pub sel: SelectionConfig,
    pub train: TrainConfig,
}

impl RunSpec {
    pub fn strategy(&self) -> Strategy {
        self.train.strategy
    }

    pub fn ablation_name(&self) -> &'static str {
        if self.train.strategy == Strategy::Ltf {
            self.train.ablation.name()
        } else {
            "none"
        }
    }

    pub fn key(&self) -> String {
        format!("{}__{}__{}__s{}", self.variant, self.strategy().name(), self.ablation_name(), self.seed)
    }

    /// First 16 hex digits of the SHA-256 of the run's canonical config.
    pub fn config_hash(&self, data: &DataSource) -> Result<String> {
        let v = serde_json::json!({ "data": data, "sel": self.sel, "train": self.train, "seed": self.seed });
        let digest = Sha256::digest(serde_json::to_string(&v)?.as_bytes());
        Ok(hex::encode(&digest[..8]))
    }
}

/// Every run the config asks for. Joint is run once per seed under the
/// `base` variant and is added whenever another strategy needs AF.
pub fn plan(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<RunSpec>> {
    let points = cfg.points()?;
    let mut specs = Vec::new();
    for &seed in seeds {
        let mut train = cfg.train.clone();
        train.seed = seed;
        train.strategy = Strategy::Joint;
        let mut sel = cfg.sel.clone();
        sel.seed = seed;
        specs.push(RunSpec { variant: "base".into(), seed, sel, train });
        for point in &points {
            for &strategy in cfg.strategies.iter().filter(|&&s| s != Strategy::Joint) {
                let ablations: &[Ablation] = if strategy == Strategy::Ltf { &cfg.ablations } else { &[Ablation::Both] };
                for &ablation in ablations {
                    let mut train = point.train.clone();
                    train.seed = seed;
                    train.strategy = strategy;
                    train.ablation = ablation;
                    let mut sel = point.sel.clone();
                    sel.seed = seed;
                    specs.push(RunSpec { variant: point.name.clone(), seed, sel, train });
                }
            }
        }
    }
    Ok(specs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    pub strategy: String,
    pub ablation: String,
    pub seed: u64,
    pub period: usize,
    pub ap: f64,
    pub af: Option<f64>,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub variant: String,
    pub strategy: String,
    pub ablation: String,
    pub seed: u64,
    pub period: usize,
    pub time_ms: f64,
    pub selection_ms: Option<f64>,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Some(Stat { mean, std: var.sqrt(), n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub strategy: String,
    pub ablation: String,
    pub period: usize,
    pub ap: Stat,
    pub af: Option<Stat>,
    pub time_ms: Option<Stat>,
}

fn strategy_rank(name: &str) -> usize {
    Strategy::ALL.iter().position(|s| s.name() == name).unwrap_or(usize::MAX)
}

/// Final-period mean and std over seeds per (variant, strategy, ablation).
pub fn summarize(results: &[ResultRow], timing: &[TimingRow]) -> Vec<SummaryRow> {
    let mut final_period: HashMap<(&str, &str, &str, u64), usize> = HashMap::new();
    for r in results {
        let e = final_period.entry((&r.variant, &r.strategy, &r.ablation, r.seed)).or_insert(0);
        *e = (*e).max(r.period);
    }
    type Key = (String, String, String);
    let mut groups: BTreeMap<Key, (usize, Vec<f64>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut order: Vec<Key> = Vec::new();
    for r in results {
        if final_period[&(r.variant.as_str(), r.strategy.as_str(), r.ablation.as_str(), r.seed)] != r.period {
            continue;
        }
        let key = (r.variant.clone(), r.strategy.clone(), r.ablation.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        let g = groups.entry(key).or_insert_with(|| (r.period, Vec::new(), Vec::new(), Vec::new()));
        g.1.push(r.ap);
        g.2.extend(r.af);
        if let Some(t) = timing.iter().find(|t| {
            t.variant == r.variant
                && t.strategy == r.strategy
                && t.ablation == r.ablation
                && t.seed == r.seed
                && t.period == r.period
        }) {
            g.3.push(t.time_ms);
        }
    }
    order.sort_by(|a, b| (&a.0, strategy_rank(&a.1), &a.2).cmp(&(&b.0, strategy_rank(&b.1), &b.2)));
    order
        .into_iter()
        .map(|key| {
            let (period, ap, af, time) = &groups[&key];
            SummaryRow {
                variant: key.0,
                strategy: key.1,
                ablation: key.2,
                period: *period,
                ap: Stat::of(ap).expect("group has at least one row"),
                af: Stat::of(af),
                time_ms: Stat::of(time),
            }
        })
        .collect()
}

/// Fixed-width comparison table: AP (higher is better), AF (lower is
/// better), Time per epoch in ms (lower is better).
pub fn render_table(rows: &[SummaryRow]) -> String {
    let fmt = |s: &Option<Stat>, prec: usize| match s {
        Some(s) => format!("{:.prec$}±{:.prec$}", s.mean, s.std),
        None => "---".into(),
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:<10} {:<16} {:>17} {:>17} {:>15}",
        "variant", "strategy", "ablation", "AP↑", "AF↓", "Time(ms)↓"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<28} {:<10} {:<16} {:>17} {:>17} {:>15}",
            r.variant,
            r.strategy,
            r.ablation,
            fmt(&Some(r.ap.clone()), 4),
            fmt(&r.af, 4),
            fmt(&r.time_ms, 2)
        );
    }
    out
}

pub struct RunOptions {
    pub out: PathBuf,
    pub jobs: usize,
    pub resume: bool,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub records: Vec<(RunSpec, RunRecord)>,
    pub summary: Vec<SummaryRow>,
    pub failed: Vec<(String, String)>,
}

const DONE_MARKER: &str = "done";

fn write_run_artifacts(dir: &Path, out: &RunOutput, hash: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("record.json"), serde_json::to_string_pretty(&out.record)?)?;
    let mut epochs = fs::File::create(dir.join("epochs.jsonl"))?;
    for log in &out.logs {
        for e in &log.epochs {
            writeln!(epochs, "{}", serde_json::to_string(e)?)?;
        }
    }
    if !out.buffers.is_empty() {
        fs::write(dir.join("buffers.json"), serde_json::to_string_pretty(&out.buffers)?)?;
    }
    if !out.selection_reports.is_empty() {
        fs::write(dir.join("selection.json"), serde_json::to_string_pretty(&out.selection_reports)?)?;
    }
    for (i, snap) in out.snapshots.iter().enumerate() {
        fs::write(dir.join(format!("checkpoint_p{}.json", i + 1)), snap.to_json()?)?;
    }
    fs::write(dir.join(DONE_MARKER), hash)?;
    Ok(())
}

fn load_finished(dir: &Path, hash: &str) -> Option<RunRecord> {
    let marker = fs::read_to_string(dir.join(DONE_MARKER)).ok()?;
    if marker.trim() != hash {
        return None;
    }
    serde_json::from_str(&fs::read_to_string(dir.join("record.json")).ok()?).ok()
}

/// Executes every planned run, writes all result files and returns the
/// records. Failed runs are reported in the outcome and leave the others
/// intact.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let seeds = effective_seeds(cfg)?;
    let specs = plan(cfg, &seeds)?;
    let runs_dir = opts.out.join("runs");
    fs::create_dir_all(&runs_dir)?;
    fs::write(opts.out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;

    let mut prepared: HashMap<u64, (usize, Vec<PeriodData>)> = HashMap::new();
    for &seed in &seeds {
        let graph = load_graph_for(&cfg.data, seed)?;
        prepared.insert(seed, (graph.feature_dim(), dataset::build_all(&graph, seed)?));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::config(e.to_string()))?;
    let execute = |spec: &RunSpec, joint: Option<&RunRecord>| -> Result<RunRecord> {
        let key = spec.key();
        let dir = runs_dir.join(&key);
        let hash = spec.config_hash(&cfg.data)?;
        if opts.resume {
            if let Some(record) = load_finished(&dir, &hash) {
                info!("{key}: already complete, skipping");
                return Ok(record);
            }
        }
        info!("{key}: running");
        let (dim, data) = &prepared[&spec.seed];
        let out = run_strategy_on(data, *dim, &spec.sel, &spec.train, joint)?;
        write_run_artifacts(&dir, &out, &hash)?;
        Ok(out.record)
    };

    let (joints, others): (Vec<&RunSpec>, Vec<&RunSpec>) = specs.iter().partition(|s| s.strategy() == Strategy::Joint);
    let joint_results: Vec<Result<RunRecord>> = pool.install(|| joints.par_iter().map(|s| execute(s, None)).collect());
    let mut joint_by_seed: HashMap<u64, RunRecord> = HashMap::new();
    let mut failed = Vec::new();
    let mut records = Vec::new();
    for (spec, res) in joints.iter().zip(joint_results) {
        match res {
            Ok(r) => {
                joint_by_seed.insert(spec.seed, r.clone());
                records.push(((*spec).clone(), r));
            }
            Err(e) => {
                error!("{}: {e}", spec.key());
                failed.push((spec.key(), e.to_string()));
            }
        }
    }
    let other_results: Vec<Result<RunRecord>> = pool.install(|| {
        others
            .par_iter()
            .map(|s| match joint_by_seed.get(&s.seed) {
                Some(j) => execute(s, Some(j)),
                None => Err(Error::config(format!("joint reference for seed {} failed", s.seed))),
            })
            .collect()
    });
    for (spec, res) in others.iter().zip(other_results) {
        match res {
            Ok(r) => records.push(((*spec).clone(), r)),
            Err(e) => {
                error!("{}: {e}", spec.key());
                failed.push((spec.key(), e.to_string()));
            }
        }
    }

    let (results, timing) = rows_for(cfg, &records)?;
    write_csv(&opts.out.join(RESULTS_FILE), &results)?;
    write_csv(&opts.out.join(TIMING_FILE), &timing)?;
    let summary = summarize(&results, &timing);
    fs::write(opts.out.join(SUMMARY_JSON), serde_json::to_string_pretty(&summary)?)?;
    let table = render_table(&summary);
    fs::write(opts.out.join(SUMMARY_TXT), &table)?;
    if !failed.is_empty() {
        warn!("{} run(s) failed", failed.len());
    }
    Ok(ExperimentOutcome { records, summary, failed })
}

fn rows_for(cfg: &ExperimentConfig, records: &[(RunSpec, RunRecord)]) -> Result<(Vec<ResultRow>, Vec<TimingRow>)> {
    let mut sorted: Vec<&(RunSpec, RunRecord)> = records.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.0.variant, strategy_rank(a.0.strategy().name()), a.0.ablation_name(), a.0.seed).cmp(&(
            &b.0.variant,
            strategy_rank(b.0.strategy().name()),
            b.0.ablation_name(),
            b.0.seed,
        ))
    });
    let mut results = Vec::new();
    let mut timing = Vec::new();
    for (spec, record) in sorted {
        let hash = spec.config_hash(&cfg.data)?;
        for p in &record.periods {
            results.push(ResultRow {
                variant: spec.variant.clone(),
                strategy: record.strategy.clone(),
                ablation: record.ablation.clone(),
                seed: spec.seed,
                period: p.period,
                ap: p.ap,
                af: p.af,
                config_hash: hash.clone(),
            });
            timing.push(TimingRow {
                variant: spec.variant.clone(),
                strategy: record.strategy.clone(),
                ablation: record.ablation.clone(),
                seed: spec.seed,
                period: p.period,
                time_ms: crate::metrics::time_per_epoch(&p.epoch_time_ms)?,
                selection_ms: p.selection_ms,
                epochs_run: p.epochs_run,
            });
        }
    }
    Ok((results, timing))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Re-renders the summary of an output directory from its CSV files.
pub fn report(dir: &Path) -> Result<(Vec<SummaryRow>, String)> {
    let results: Vec<ResultRow> = read_csv(&dir.join(RESULTS_FILE))?;
    let timing: Vec<TimingRow> =
        if dir.join(TIMING_FILE).exists() { read_csv(&dir.join(TIMING_FILE))? } else { Vec::new() };
    let summary = summarize(&results, &timing);
    let table = render_table(&summary);
    Ok((summary, table))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentConfig {
        parse_config(serde_json::json!({
            "data": { "synthetic": { "num_periods": 2, "classes_per_period": 2, "nodes_per_class_per_period": 20,
                "feature_dim": 4, "class_center_scale": 3.0, "drift_step": 1.0, "noise_sigma": 1.0,
                "intra_class_edge_prob": 0.7, "inter_class_edge_prob": 0.3, "events_per_node": 3, "seed": 0 } },
            "strategies": ["ltf"],
            "sel": { "alpha": 1.0, "m": 4, "m_prime": 4, "partition_size": 40, "partitioner": "random",
                "scoring_mode": "witness", "seed": 0 },
            "seeds": [0]
        }))
        .unwrap()
    }

    #[test]
    fn field_path_in_errors() {
        let err =
            parse_config(serde_json::json!({ "data": { "synthetic": { "num_periods": "x" } }, "strategies": [] }))
                .unwrap_err()
                .to_string();
        assert!(err.contains("data.synthetic.num_periods"), "{err}");
        let err = parse_config(
            serde_json::json!({ "data": { "files": { "nodes": "a", "events": "b" } }, "strategies": ["nope"] }),
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("strategies[0]"), "{err}");
    }

    #[test]
    fn presets() {
        let mut c = base();
        c.apply_preset(Preset::Main);
        assert_eq!(c.strategies, Strategy::ALL.to_vec());
        c.apply_preset(Preset::Sensitivity);
        let names: Vec<String> = c.points().unwrap().into_iter().map(|p| p.name).collect();
        assert_eq!(names.iter().filter(|n| n.starts_with("alpha=")).count(), 5);
        assert_eq!(names.iter().filter(|n| n.starts_with("beta=")).count(), 5);
        assert_eq!(names.iter().filter(|n| n.starts_with("m=")).count(), 3);
        c.apply_preset(Preset::Partition);
        let pts = c.points().unwrap();
        assert_eq!(pts.len(), 9);
        assert!(pts.iter().all(|p| p.sel.partition_size > p.sel.m));
        c.apply_preset(Preset::Ablation);
        assert_eq!(plan(&c, &[0]).unwrap().len(), 5);
        assert!("bogus".parse::<Preset>().is_err());
    }

    #[test]
    fn joint_is_planned_once_per_seed() {
        let mut c = base();
        c.strategies = vec![Strategy::Joint, Strategy::Finetune, Strategy::Ltf];
        c.apply_preset(Preset::Main);
        let specs = plan(&c, &[0, 1]).unwrap();
        assert_eq!(specs.iter().filter(|s| s.strategy() == Strategy::Joint).count(), 2);
        let keys: std::collections::HashSet<String> = specs.iter().map(RunSpec::key).collect();
        assert_eq!(keys.len(), specs.len());
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = base();
        c.strategies.clear();
        assert!(c.validate().is_err());
        let mut c = base();
        c.sel.partition_size = 3;
        assert!(c.validate().is_err());
        assert!(base().validate().is_ok());
    }

    #[test]
    fn stats() {
        let s = Stat::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 1.0).abs() < 1e-15);
        assert_eq!(Stat::of(&[5.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }
}
