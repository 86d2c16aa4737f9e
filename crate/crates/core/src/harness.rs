//! Datasets, experiment configuration, and the train / evaluate / generalize
//! pipelines behind the command-line tool.
//!
//! On-disk layout of a dataset directory:
//!
//! ```text
//! <dir>/manifest.json             m, count, seed, per-instance generator seeds
//! <dir>/instance_0000.json ...    one instance document per file
//! <dir>/labels/oracle.json        oracle settings the labels were computed with
//! <dir>/labels/instance_0000.labels
//! <dir>/labels/summary.json       per-instance label statistics
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asp_graph::{AssemblyGraph, GraphError, RewardMode};
use crate::feasibility::{check_stability_with, find_insertion_path, FeasibilityConfig, InsertionSearch};
use crate::gnn::{GnnError, NodeFeatures, QNetParams};
use crate::rl::{train, CurvePoint, Environment, RlError, TrainerConfig};
use crate::search::{
    beam_plan, count_feasible_orders, greedy_plan, heuristic_plan, random_walk_plan,
    random_walk_success_probability, validate_plan, BeamCandidate, Method, NetScorer, Plan, SearchError,
    Validation,
};
use crate::world::{generate_instance, load_instance, save_instance, Instance, WorldError};

/// Beam width of the generalization matrix.
pub const GENERALIZATION_BEAM_WIDTH: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid experiment: {0}")]
    Spec(String),
    #[error("{path}: labels were computed with different oracle settings; delete the labels directory to relabel")]
    StaleLabels { path: String },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

type Result<T, E = HarnessError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, message: impl ToString) -> HarnessError {
    HarnessError::Parse {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(path, text).map_err(io_err(path))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| parse_err(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    serde_json::from_str(&read_text(path)?).map_err(|e| parse_err(path, e))
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub m: usize,
    pub count: usize,
    pub seed: u64,
    /// Generator seed of each instance, by instance id.
    pub instance_seeds: Vec<u64>,
}

#[derive(Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn m(&self) -> usize {
        self.manifest.m
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

pub fn instance_file(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("instance_{id:04}.json"))
}

fn labels_dir(dir: &Path) -> PathBuf {
    dir.join("labels")
}

fn label_file(dir: &Path, id: usize) -> PathBuf {
    labels_dir(dir).join(format!("instance_{id:04}.labels"))
}

/// Generator seeds for a dataset; each size draws from its own stream so datasets
/// of different sizes built from one seed are unrelated.
pub fn instance_seeds(m: usize, count: usize, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(m as u64);
    (0..count).map(|_| rng.gen()).collect()
}

/// Writes `count` generated instances of `m` parts plus a manifest into `dir`.
pub fn generate_dataset(dir: &Path, m: usize, count: usize, seed: u64) -> Result<DatasetManifest> {
    create_dir(dir)?;
    let manifest = DatasetManifest {
        m,
        count,
        seed,
        instance_seeds: instance_seeds(m, count, seed),
    };
    for (id, &s) in manifest.instance_seeds.iter().enumerate() {
        let instance = generate_instance(m, s)?;
        save_instance(instance_file(dir, id), &instance)?;
    }
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    let instances = (0..manifest.count)
        .map(|id| {
            let instance = load_instance(instance_file(dir, id))?;
            if instance.m() != manifest.m {
                return Err(parse_err(
                    &instance_file(dir, id),
                    format!("instance has {} parts, manifest says {}", instance.m(), manifest.m),
                ));
            }
            Ok(instance)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        dir: dir.to_path_buf(),
        manifest,
        instances,
    })
}

/// Disjoint train / test instance ids, each sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n`; the first `round(n * train_fraction)` ids train.
pub fn split_ids(n: usize, train_fraction: f64, seed: u64) -> Split {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((n as f64) * train_fraction).round() as usize;
    let mut train = ids[..cut.min(n)].to_vec();
    let mut test = ids[cut.min(n)..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Split { train, test }
}

// ---------------------------------------------------------------------------
// Labels

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceLabels {
    pub id: usize,
    pub labels: usize,
    pub feasible: usize,
    /// Infeasible edges whose part-only insertion search hit the budget.
    pub budget_exhausted: usize,
    pub solvable: bool,
    pub feasible_orders: u64,
    pub random_walk_probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub m: usize,
    pub instances: usize,
    pub labels: usize,
    pub oracle_calls: usize,
    pub budget_exhausted: usize,
    pub solvable: usize,
    pub per_instance: Vec<InstanceLabels>,
}

/// Assembly graphs of a dataset, seeded from its label cache when one exists.
pub fn load_graphs(dataset: &Dataset, oracle: &FeasibilityConfig) -> Result<Vec<AssemblyGraph>> {
    let cached = labels_match(&dataset.dir, oracle)?;
    dataset
        .instances
        .iter()
        .enumerate()
        .map(|(id, instance)| {
            let graph = AssemblyGraph::new(instance.clone(), oracle.clone());
            let file = label_file(&dataset.dir, id);
            if cached && file.exists() {
                graph.load_labels(&file)?;
            }
            Ok(graph)
        })
        .collect()
}

/// Whether a label cache exists for these oracle settings; errors when one exists
/// for different settings.
fn labels_match(dir: &Path, oracle: &FeasibilityConfig) -> Result<bool> {
    let path = labels_dir(dir).join("oracle.json");
    if !path.exists() {
        return Ok(false);
    }
    let stored: FeasibilityConfig = read_json(&path)?;
    if &stored != oracle {
        return Err(HarnessError::StaleLabels {
            path: path.display().to_string(),
        });
    }
    Ok(true)
}

/// Resolves and persists every edge label of every instance. Already cached labels
/// are reused, so a second run makes no oracle calls.
pub fn label_dataset(dataset: &Dataset, oracle: &FeasibilityConfig) -> Result<LabelReport> {
    let graphs = load_graphs(dataset, oracle)?;
    write_json(&labels_dir(&dataset.dir).join("oracle.json"), oracle)?;
    let mut per_instance = Vec::with_capacity(graphs.len());
    let mut oracle_calls = 0;
    for (id, graph) in graphs.iter().enumerate() {
        graph.label_all();
        oracle_calls += graph.oracle_calls();
        graph.save_labels(label_file(&dataset.dir, id))?;
        per_instance.push(instance_labels(id, graph));
    }
    write_json(&labels_dir(&dataset.dir).join("summary.json"), &per_instance)?;
    Ok(LabelReport {
        m: dataset.m(),
        instances: graphs.len(),
        labels: per_instance.iter().map(|s| s.labels).sum(),
        oracle_calls,
        budget_exhausted: per_instance.iter().map(|s| s.budget_exhausted).sum(),
        solvable: per_instance.iter().filter(|s| s.solvable).count(),
        per_instance,
    })
}

fn instance_labels(id: usize, graph: &AssemblyGraph) -> InstanceLabels {
    let edges = graph.labeled_edges();
    let config = graph.config();
    // Only stable infeasible edges can owe their label to the search budget.
    let budget_exhausted = edges
        .iter()
        .filter(|&&(_, u, y)| !y && check_stability_with(graph.instance(), u, config.stability))
        .filter(|&&(v, u, _)| {
            let p = graph.edge_part(v, u).expect("labeled edges are admissible");
            matches!(
                find_insertion_path(graph.instance(), v, p, config),
                InsertionSearch::BudgetExhausted { .. }
            )
        })
        .count();
    InstanceLabels {
        id,
        labels: edges.len(),
        feasible: edges.iter().filter(|e| e.2).count(),
        budget_exhausted,
        solvable: graph.reachable_to_full(graph.root()),
        feasible_orders: count_feasible_orders(graph),
        random_walk_probability: random_walk_success_probability(graph),
    }
}

// ---------------------------------------------------------------------------
// Experiment configuration

fn default_methods() -> Vec<Method> {
    vec![Method::Greedy, Method::Beam, Method::RandomWalk, Method::Heuristic]
}

/// One experiment: which datasets, methods, widths and seeds, and how to train.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Dataset directories, one per part count.
    pub datasets: Vec<PathBuf>,
    pub methods: Vec<Method>,
    pub beam_widths: Vec<usize>,
    /// One model per seed; the seed also drives random walks.
    pub seeds: Vec<u64>,
    /// Overrides `trainer.reward_mode`.
    pub reward_mode: RewardMode,
    pub trainer: TrainerConfig,
    pub oracle: FeasibilityConfig,
    pub out_dir: PathBuf,
    pub split_seed: u64,
    pub train_fraction: f64,
    /// Evaluate on every instance instead of the held-out split.
    pub full_dataset: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            datasets: Vec::new(),
            methods: default_methods(),
            beam_widths: vec![1, 3, 5],
            seeds: vec![0, 1, 2],
            reward_mode: RewardMode::Delayed,
            trainer: TrainerConfig::default(),
            oracle: FeasibilityConfig::default(),
            out_dir: PathBuf::from("out"),
            split_seed: 0,
            train_fraction: 0.8,
            full_dataset: false,
        }
    }
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        toml::from_str(&read_text(path)?).map_err(|e| parse_err(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Spec(m.to_string()));
        if self.datasets.is_empty() {
            return bad("no datasets");
        }
        for d in &self.datasets {
            if !d.join("manifest.json").is_file() {
                return Err(HarnessError::Spec(format!("{} is not a dataset directory", d.display())));
            }
        }
        if self.methods.is_empty() {
            return bad("no methods");
        }
        if self.seeds.is_empty() {
            return bad("no seeds");
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct");
        }
        if self.beam_widths.contains(&0) {
            return bad("beam widths must be at least 1");
        }
        if self.methods.contains(&Method::Beam) && self.beam_widths.is_empty() {
            return bad("beam search needs at least one width");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        self.trainer.validate()?;
        Ok(())
    }

    /// Trainer settings for one seed.
    pub fn trainer_for(&self, seed: u64) -> TrainerConfig {
        TrainerConfig {
            seed,
            reward_mode: self.reward_mode,
            ..self.trainer.clone()
        }
    }

    pub fn model_path(&self, m: usize, seed: u64) -> PathBuf {
        self.out_dir
            .join("models")
            .join(format!("m{m}-{}-seed{seed}.json", self.reward_mode))
    }

    pub fn curve_path(&self, m: usize, seed: u64) -> PathBuf {
        self.out_dir
            .join("curves")
            .join(format!("m{m}-{}-seed{seed}.csv", self.reward_mode))
    }
}

/// A dataset with its graphs and split, ready for training and evaluation.
pub struct Prepared {
    pub m: usize,
    pub graphs: Vec<AssemblyGraph>,
    pub split: Split,
}

impl Prepared {
    pub fn load(dir: &Path, spec: &ExperimentSpec) -> Result<Self> {
        let dataset = load_dataset(dir)?;
        let graphs = load_graphs(&dataset, &spec.oracle)?;
        Ok(Prepared {
            m: dataset.m(),
            split: split_ids(graphs.len(), spec.train_fraction, spec.split_seed),
            graphs,
        })
    }

    /// Instance ids evaluated by `cmd_eval` and `cmd_generalize`.
    pub fn eval_ids(&self, spec: &ExperimentSpec) -> Vec<usize> {
        if spec.full_dataset {
            (0..self.graphs.len()).collect()
        } else {
            self.split.test.clone()
        }
    }

    fn environments(&self, ids: &[usize]) -> Vec<Environment<f64>> {
        ids.iter()
            .map(|&id| {
                let src = &self.graphs[id];
                let env = Environment::new(src.instance().clone(), src.config().clone());
                seed_labels(&env.graph, src);
                env
            })
            .collect()
    }
}

fn seed_labels(dst: &AssemblyGraph, src: &AssemblyGraph) {
    for (v, u, y) in src.labeled_edges() {
        let p = src.edge_part(v, u).expect("labeled edges are admissible");
        dst.set_label(v, p, y).expect("labels agree");
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub m: usize,
    pub seed: u64,
    pub reward_mode: RewardMode,
    pub steps: u64,
    pub syncs: u64,
    pub episodes: usize,
    /// Greedy success on the held-out split at the last epoch.
    pub final_eval: Option<f64>,
    pub wall_time_s: f64,
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
}

/// Trains one model on the training split and writes its checkpoint and curve.
pub fn train_model(
    spec: &ExperimentSpec,
    data: &Prepared,
    seed: u64,
    on_epoch: impl FnMut(&CurvePoint),
) -> Result<(QNetParams<f64>, TrainRecord, Vec<CurvePoint>)> {
    let config = spec.trainer_for(seed);
    let train_envs = data.environments(&data.split.train);
    let eval_envs = data.environments(&data.split.test);
    let start = Instant::now();
    let outcome = train(&train_envs, &eval_envs, &config, on_epoch)?;
    let wall_time_s = start.elapsed().as_secs_f64();
    let checkpoint = spec.model_path(data.m, seed);
    let curve = spec.curve_path(data.m, seed);
    if let Some(parent) = checkpoint.parent() {
        create_dir(parent)?;
    }
    outcome.params.save(&checkpoint)?;
    write_csv(&curve, &outcome.curve)?;
    let record = TrainRecord {
        m: data.m,
        seed,
        reward_mode: config.reward_mode,
        steps: outcome.steps,
        syncs: outcome.syncs,
        episodes: config.total_episodes(),
        final_eval: outcome.curve.last().and_then(|p| p.eval_success),
        wall_time_s,
        checkpoint,
        curve,
    };
    Ok((outcome.params, record, outcome.curve))
}

/// Loads the checkpoint for `(m, seed)`, training it first if it does not exist.
pub fn ensure_model(spec: &ExperimentSpec, data: &Prepared, seed: u64) -> Result<QNetParams<f64>> {
    let path = spec.model_path(data.m, seed);
    if path.exists() {
        return Ok(QNetParams::load(&path)?);
    }
    Ok(train_model(spec, data, seed, |_| {})?.0)
}

/// Trains one model per dataset and seed.
pub fn cmd_train(spec: &ExperimentSpec, mut on_epoch: impl FnMut(usize, u64, &CurvePoint)) -> Result<Vec<TrainRecord>> {
    spec.validate()?;
    let mut records = Vec::new();
    for dir in &spec.datasets {
        let data = Prepared::load(dir, spec)?;
        for &seed in &spec.seeds {
            let (_, record, _) = train_model(spec, &data, seed, |p| on_epoch(data.m, seed, p))?;
            records.push(record);
        }
    }
    write_json(
        &spec.out_dir.join(format!("train-{}.json", spec.reward_mode)),
        &records,
    )?;
    Ok(records)
}

pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<CurvePoint>, _>>()?)
}

// ---------------------------------------------------------------------------
// Evaluation

/// One attempted plan, enough to recompute every reported number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub instance: usize,
    pub method: Method,
    /// Part count the model was trained on (learned methods only).
    pub m_train: Option<usize>,
    pub m_test: usize,
    pub b: Option<usize>,
    pub seed: u64,
    pub sequence: Vec<usize>,
    pub scores: Option<Vec<f64>>,
    pub feasible: Vec<bool>,
    pub success: bool,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub m_train: Option<usize>,
    pub m_test: usize,
    pub b: Option<usize>,
    pub seed: u64,
    pub successes: usize,
    pub trials: usize,
    pub success_rate: f64,
    pub mean_plan_length: f64,
    pub wall_time_s: f64,
}

/// Seed of the random walk on one instance.
pub fn walk_seed(seed: u64, instance: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ instance as u64
}

/// What plans one instance.
#[derive(Clone, Copy)]
pub enum Planner<'a> {
    Greedy(&'a QNetParams<f64>),
    Beam(&'a QNetParams<f64>, usize),
    RandomWalk(u64),
    Heuristic,
}

impl Planner<'_> {
    pub fn method(&self) -> Method {
        match self {
            Planner::Greedy(_) => Method::Greedy,
            Planner::Beam(..) => Method::Beam,
            Planner::RandomWalk(_) => Method::RandomWalk,
            Planner::Heuristic => Method::Heuristic,
        }
    }

    pub fn width(&self) -> Option<usize> {
        match self {
            Planner::Beam(_, b) => Some(*b),
            _ => None,
        }
    }

    pub fn plan(&self, graph: &AssemblyGraph, id: usize) -> Plan {
        let features = || NodeFeatures::<f64>::from_instance(graph.instance());
        match *self {
            Planner::Greedy(params) => {
                let features = features();
                greedy_plan(graph, &NetScorer { params, features: &features })
            }
            Planner::Beam(params, b) => {
                let features = features();
                beam_plan(graph, &NetScorer { params, features: &features }, b).plan
            }
            Planner::RandomWalk(seed) => random_walk_plan(graph, walk_seed(seed, id)),
            Planner::Heuristic => heuristic_plan(graph),
        }
    }
}

/// Plans every listed instance, spreading instances across threads.
pub fn evaluate(
    graphs: &[AssemblyGraph],
    ids: &[usize],
    planner: Planner<'_>,
    m_train: Option<usize>,
    seed: u64,
) -> Vec<PlanRecord> {
    let run = |id: usize| {
        let graph = &graphs[id];
        let start = Instant::now();
        let plan = planner.plan(graph, id);
        PlanRecord {
            instance: id,
            method: planner.method(),
            m_train,
            m_test: graph.m(),
            b: planner.width(),
            seed,
            sequence: plan.sequence,
            scores: plan.scores,
            feasible: plan.feasible,
            success: plan.success,
            wall_time_s: start.elapsed().as_secs_f64(),
        }
    };
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(ids.len().max(1));
    if threads <= 1 {
        return ids.iter().map(|&id| run(id)).collect();
    }
    let chunk = ids.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = ids
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(|&id| run(id)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    })
}

/// Aggregates plans into one row per (method, m_train, m_test, b, seed), in
/// sorted key order.
pub fn rows_from_plans(plans: &[PlanRecord]) -> Vec<ResultRow> {
    type Key = (String, Option<usize>, usize, Option<usize>, u64);
    let mut groups: BTreeMap<Key, (Method, Vec<&PlanRecord>)> = BTreeMap::new();
    for p in plans {
        let key = (p.method.to_string(), p.m_train, p.m_test, p.b, p.seed);
        groups.entry(key).or_insert_with(|| (p.method, Vec::new())).1.push(p);
    }
    groups
        .into_iter()
        .map(|((_, m_train, m_test, b, seed), (method, group))| {
            let trials = group.len();
            let successes = group.iter().filter(|p| p.success).count();
            ResultRow {
                method,
                m_train,
                m_test,
                b,
                seed,
                successes,
                trials,
                success_rate: successes as f64 / trials as f64,
                mean_plan_length: group.iter().map(|p| p.sequence.len() as f64).sum::<f64>() / trials as f64,
                wall_time_s: group.iter().map(|p| p.wall_time_s).sum(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub m_test: usize,
    pub seeds: usize,
    pub mean: f64,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub std: f64,
}

/// One table row: a method at one beam width, success per part count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub b: Option<usize>,
    pub cells: Vec<SummaryCell>,
}

fn method_rank(m: Method) -> usize {
    match m {
        Method::RandomWalk => 0,
        Method::Heuristic => 1,
        Method::Greedy => 2,
        Method::Beam => 3,
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and spread across seeds for every (method, b) and test size.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(usize, Option<usize>), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    let mut methods = BTreeMap::new();
    for r in rows {
        let key = (method_rank(r.method), r.b);
        methods.insert(key, r.method);
        groups.entry(key).or_default().entry(r.m_test).or_default().push(r.success_rate);
    }
    groups
        .into_iter()
        .map(|(key, by_m)| SummaryRow {
            method: methods[&key],
            b: key.1,
            cells: by_m
                .into_iter()
                .map(|(m_test, rates)| {
                    let (mean, std) = mean_std(&rates);
                    SummaryCell {
                        m_test,
                        seeds: rates.len(),
                        mean,
                        std,
                    }
                })
                .collect(),
        })
        .collect()
}

/// Plain-text table: one line per (method, b), success percentages per part count.
pub fn format_summary(summary: &[SummaryRow]) -> String {
    let sizes: BTreeSet<usize> = summary.iter().flat_map(|r| r.cells.iter().map(|c| c.m_test)).collect();
    let mut out = format!("{:<12} {:>3}", "method", "b");
    for m in &sizes {
        out += &format!(" {:>15}", format!("M={m}"));
    }
    out.push('\n');
    for row in summary {
        let b = row.b.map_or("-".to_string(), |b| b.to_string());
        out += &format!("{:<12} {:>3}", row.method.to_string(), b);
        for m in &sizes {
            let cell = row.cells.iter().find(|c| c.m_test == *m);
            let text = cell.map_or("-".to_string(), |c| format!("{:.2} ± {:.2}", 100.0 * c.mean, 100.0 * c.std));
            out += &format!(" {text:>15}");
        }
        out.push('\n');
    }
    out
}

fn write_plans(path: &Path, plans: &[PlanRecord]) -> Result<()> {
    let mut text = String::new();
    for p in plans {
        text += &serde_json::to_string(p).map_err(|e| parse_err(path, e))?;
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn read_plans(path: &Path) -> Result<Vec<PlanRecord>> {
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| parse_err(path, e)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
}

/// Every method, width and seed on every dataset's evaluation instances. Writes
/// `eval/plans.jsonl`, `eval/results.csv`, `eval/summary.json` and
/// `eval/summary.txt`; missing models are trained first.
pub fn cmd_eval(spec: &ExperimentSpec) -> Result<EvalReport> {
    spec.validate()?;
    let mut plans = Vec::new();
    for dir in &spec.datasets {
        let data = Prepared::load(dir, spec)?;
        let ids = data.eval_ids(spec);
        for &seed in &spec.seeds {
            let learned = spec.methods.iter().any(|m| matches!(m, Method::Greedy | Method::Beam));
            let params = if learned { Some(ensure_model(spec, &data, seed)?) } else { None };
            for &method in &spec.methods {
                let planners: Vec<Planner<'_>> = match (method, &params) {
                    (Method::Greedy, Some(p)) => vec![Planner::Greedy(p)],
                    (Method::Beam, Some(p)) => spec.beam_widths.iter().map(|&b| Planner::Beam(p, b)).collect(),
                    (Method::RandomWalk, _) => vec![Planner::RandomWalk(seed)],
                    (Method::Heuristic, _) => vec![Planner::Heuristic],
                    _ => unreachable!("learned methods load a model"),
                };
                for planner in planners {
                    let m_train = matches!(method, Method::Greedy | Method::Beam).then_some(data.m);
                    plans.extend(evaluate(&data.graphs, &ids, planner, m_train, seed));
                }
            }
        }
    }
    let rows = rows_from_plans(&plans);
    let summary = summarize(&rows);
    let dir = spec.out_dir.join("eval");
    write_plans(&dir.join("plans.jsonl"), &plans)?;
    write_csv(&dir.join("results.csv"), &rows)?;
    write_json(&dir.join("summary.json"), &summary)?;
    write_text(&dir.join("summary.txt"), &format_summary(&summary))?;
    Ok(EvalReport { rows, summary })
}

// ---------------------------------------------------------------------------
// Generalization

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub sizes: Vec<usize>,
    pub beam_width: usize,
    /// `matrix[i][j]`: mean success over seeds of models trained on `sizes[i]`
    /// when tested on `sizes[j]`; the diagonal is empty.
    pub matrix: Vec<Vec<Option<f64>>>,
    /// Mean RandomWalk success per test size.
    pub random_walk: Vec<f64>,
    /// Per-seed rows behind the matrix and the RandomWalk reference.
    pub rows: Vec<ResultRow>,
}

impl GeneralizationReport {
    /// Whether every trained model beats RandomWalk on every size it was tested on.
    pub fn models_beat_random_walk(&self) -> bool {
        self.rows
            .iter()
            .filter(|r| r.method == Method::Beam)
            .all(|r| {
                let j = self.sizes.iter().position(|&m| m == r.m_test).expect("tested size");
                r.success_rate > self.random_walk[j]
            })
    }

    pub fn format(&self) -> String {
        let mut out = format!("train \\ test (b={})", self.beam_width);
        for m in &self.sizes {
            out += &format!(" {:>8}", format!("M={m}"));
        }
        out.push('\n');
        for (i, m) in self.sizes.iter().enumerate() {
            out += &format!("{:<18}", format!("M={m}"));
            for cell in &self.matrix[i] {
                let text = cell.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
                out += &format!(" {text:>8}");
            }
            out.push('\n');
        }
        out += &format!("{:<18}", "random walk");
        for x in &self.random_walk {
            out += &format!(" {:>8}", format!("{:.2}", 100.0 * x));
        }
        out.push('\n');
        out
    }
}

/// Trains (or loads) a model per size and seed, then tests each on every other
/// size with beam search at the fixed width. Writes `generalize/`.
pub fn cmd_generalize(spec: &ExperimentSpec) -> Result<GeneralizationReport> {
    spec.validate()?;
    let mut data: Vec<Prepared> = spec
        .datasets
        .iter()
        .map(|d| Prepared::load(d, spec))
        .collect::<Result<_>>()?;
    data.sort_by_key(|d| d.m);
    let sizes: Vec<usize> = data.iter().map(|d| d.m).collect();
    if sizes.windows(2).any(|w| w[0] == w[1]) {
        return Err(HarnessError::Spec("one dataset per part count".into()));
    }
    let b = GENERALIZATION_BEAM_WIDTH;
    let mut plans = Vec::new();
    for &seed in &spec.seeds {
        for d in &data {
            plans.extend(evaluate(&d.graphs, &d.eval_ids(spec), Planner::RandomWalk(seed), None, seed));
        }
        for (i, train_data) in data.iter().enumerate() {
            let params = ensure_model(spec, train_data, seed)?;
            for (j, test_data) in data.iter().enumerate() {
                if i == j {
                    continue;
                }
                let ids = test_data.eval_ids(spec);
                plans.extend(evaluate(&test_data.graphs, &ids, Planner::Beam(&params, b), Some(sizes[i]), seed));
            }
        }
    }
    let rows = rows_from_plans(&plans);
    let mean_of = |pred: &dyn Fn(&ResultRow) -> bool| {
        let rates: Vec<f64> = rows.iter().filter(|r| pred(r)).map(|r| r.success_rate).collect();
        mean_std(&rates).0
    };
    let matrix = sizes
        .iter()
        .map(|&mi| {
            sizes
                .iter()
                .map(|&mj| (mi != mj).then(|| mean_of(&|r| r.m_train == Some(mi) && r.m_test == mj)))
                .collect()
        })
        .collect();
    let random_walk = sizes
        .iter()
        .map(|&mj| mean_of(&|r| r.method == Method::RandomWalk && r.m_test == mj))
        .collect();
    let report = GeneralizationReport {
        sizes,
        beam_width: b,
        matrix,
        random_walk,
        rows,
    };
    let dir = spec.out_dir.join("generalize");
    write_plans(&dir.join("plans.jsonl"), &plans)?;
    write_csv(&dir.join("results.csv"), &report.rows)?;
    write_json(&dir.join("matrix.json"), &report)?;
    write_text(&dir.join("matrix.txt"), &report.format())?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Single-instance planning

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub record: PlanRecord,
    pub validation: Option<Validation>,
    pub candidates: Vec<BeamCandidate>,
    /// Number of beam candidates checked against the oracle.
    pub validated: usize,
}

/// Plans one instance file with a checkpoint and beam width `b`.
pub fn cmd_plan(instance: &Path, checkpoint: &Path, b: usize, oracle: &FeasibilityConfig) -> Result<PlanReport> {
    if b == 0 {
        return Err(HarnessError::Spec("beam width must be at least 1".into()));
    }
    let params = QNetParams::<f64>::load(checkpoint)?;
    let graph = AssemblyGraph::new(load_instance(instance)?, oracle.clone());
    let features = NodeFeatures::<f64>::from_instance(graph.instance());
    let start = Instant::now();
    let result = beam_plan(&graph, &NetScorer { params: &params, features: &features }, b);
    let wall_time_s = start.elapsed().as_secs_f64();
    let plan = result.plan;
    let validation = if plan.sequence.len() == graph.m() {
        Some(validate_plan(&graph, &plan.sequence)?)
    } else {
        None
    };
    Ok(PlanReport {
        record: PlanRecord {
            instance: 0,
            method: Method::Beam,
            m_train: None,
            m_test: graph.m(),
            b: Some(b),
            seed: 0,
            sequence: plan.sequence,
            scores: plan.scores,
            feasible: plan.feasible,
            success: plan.success,
            wall_time_s,
        },
        validation,
        candidates: result.candidates,
        validated: result.validated,
    })
}
