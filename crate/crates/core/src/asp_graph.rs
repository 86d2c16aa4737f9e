//! The subassembly lattice of one instance: nodes are part subsets, edges add one
//! part. Edge feasibility labels are resolved lazily through the geometric oracle
//! and memoized; reachability of the full assembly is memoized per node.
//!
//! Both caches are lock-free arrays of atomics with insert-if-absent writes, so a
//! graph can be shared by reference between threads.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU8, AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feasibility::{check_action_feasible, FeasibilityConfig};
use crate::world::{Instance, SubassemblyMask};

const UNKNOWN: u8 = 0;
const FALSE: u8 = 1;
const TRUE: u8 = 2;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("({v:?}, {u:?}) is not an admissible edge")]
    NotAdmissible { v: SubassemblyMask, u: SubassemblyMask },
    #[error("label of ({v:?}, {u:?}) is already {existing}, refusing to set {new}")]
    LabelConflict {
        v: SubassemblyMask,
        u: SubassemblyMask,
        existing: u8,
        new: u8,
    },
    #[error("label file line {line}: {message}")]
    LabelFile { line: usize, message: String },
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reward {
    Fail,
    Neutral,
    Success,
}

impl Reward {
    pub fn value(self) -> f64 {
        match self {
            Reward::Fail => -1.0,
            Reward::Neutral => 0.0,
            Reward::Success => 1.0,
        }
    }

    pub fn from_value(v: i8) -> Option<Self> {
        match v {
            -1 => Some(Reward::Fail),
            0 => Some(Reward::Neutral),
            1 => Some(Reward::Success),
            _ => None,
        }
    }
}

/// Reward for one transition; non-zero rewards always end the episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RewardOutcome {
    pub reward: Reward,
    pub done: bool,
}

impl RewardOutcome {
    pub const FAIL: RewardOutcome = RewardOutcome { reward: Reward::Fail, done: true };
    pub const SUCCESS: RewardOutcome = RewardOutcome { reward: Reward::Success, done: true };
    pub const CONTINUE: RewardOutcome = RewardOutcome { reward: Reward::Neutral, done: false };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    /// Reward withheld until the full assembly is known to be reachable.
    Delayed,
    /// Feasibility of the current step only.
    Immediate,
}

impl std::fmt::Display for RewardMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RewardMode::Delayed => "delayed",
            RewardMode::Immediate => "immediate",
        })
    }
}

pub struct AssemblyGraph {
    instance: Instance,
    config: FeasibilityConfig,
    /// Indexed by `v * m + p` for the edge adding `p` to `v`.
    labels: Vec<AtomicU8>,
    reach: Vec<AtomicU8>,
    oracle_calls: AtomicUsize,
}

impl std::fmt::Debug for AssemblyGraph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AssemblyGraph")
            .field("m", &self.m())
            .field("labeled", &self.labeled_count())
            .field("oracle_calls", &self.oracle_calls())
            .finish()
    }
}

impl AssemblyGraph {
    pub fn new(instance: Instance, config: FeasibilityConfig) -> Self {
        let m = instance.m();
        let nodes = 1usize << m;
        AssemblyGraph {
            labels: (0..nodes * m).map(|_| AtomicU8::new(UNKNOWN)).collect(),
            reach: (0..nodes).map(|_| AtomicU8::new(UNKNOWN)).collect(),
            oracle_calls: AtomicUsize::new(0),
            instance,
            config,
        }
    }

    pub fn instance(&self) -> &Instance {
        &self.instance
    }

    pub fn config(&self) -> &FeasibilityConfig {
        &self.config
    }

    pub fn m(&self) -> usize {
        self.instance.m()
    }

    /// `N = 2^M`.
    pub fn node_count(&self) -> usize {
        1 << self.m()
    }

    /// `|E| = M * 2^(M-1)`.
    pub fn edge_count(&self) -> usize {
        self.m() << (self.m() - 1)
    }

    pub fn root(&self) -> SubassemblyMask {
        SubassemblyMask::EMPTY
    }

    pub fn full(&self) -> SubassemblyMask {
        self.instance.full_mask()
    }

    pub fn nodes(&self) -> impl Iterator<Item = SubassemblyMask> {
        (0..self.node_count() as u32).map(SubassemblyMask::from_bits)
    }

    /// `(p, v + p)` for every missing part, ascending by part id.
    pub fn out_neighbors(&self, v: SubassemblyMask) -> Vec<(usize, SubassemblyMask)> {
        v.missing(self.m()).map(|p| (p, v.with(p))).collect()
    }

    /// Every admissible edge as `(v, p)`.
    pub fn edges(&self) -> impl Iterator<Item = (SubassemblyMask, usize)> + '_ {
        self.nodes()
            .flat_map(move |v| v.missing(self.m()).map(move |p| (v, p)))
    }

    /// Part added by the edge `(v, u)`, or an error if the edge is not admissible.
    pub fn edge_part(&self, v: SubassemblyMask, u: SubassemblyMask) -> Result<usize, GraphError> {
        let m = self.m();
        let added = u.bits() & !v.bits();
        if v.is_valid_for(m) && u.is_valid_for(m) && v.is_subset_of(u) && added.count_ones() == 1 {
            Ok(added.trailing_zeros() as usize)
        } else {
            Err(GraphError::NotAdmissible { v, u })
        }
    }

    fn slot(&self, v: SubassemblyMask, p: usize) -> usize {
        v.index() * self.m() + p
    }

    /// Label if already resolved.
    pub fn cached_label(&self, v: SubassemblyMask, p: usize) -> Option<bool> {
        match self.labels[self.slot(v, p)].load(Ordering::Acquire) {
            UNKNOWN => None,
            s => Some(s == TRUE),
        }
    }

    /// Records a label; re-labeling with a different value is an error.
    pub fn set_label(&self, v: SubassemblyMask, p: usize, feasible: bool) -> Result<(), GraphError> {
        let new = if feasible { TRUE } else { FALSE };
        match self.labels[self.slot(v, p)].compare_exchange(
            UNKNOWN,
            new,
            Ordering::AcqRel,
            Ordering::Acquire,
        ) {
            Ok(_) => Ok(()),
            Err(existing) if existing == new => Ok(()),
            Err(existing) => Err(GraphError::LabelConflict {
                v,
                u: v.with(p),
                existing: existing - 1,
                new: new - 1,
            }),
        }
    }

    /// Feasibility label of adding `p` to `v` (`p` must be missing from `v`).
    pub fn label(&self, v: SubassemblyMask, p: usize) -> bool {
        debug_assert!(!v.contains(p) && p < self.m());
        if let Some(y) = self.cached_label(v, p) {
            return y;
        }
        self.oracle_calls.fetch_add(1, Ordering::Relaxed);
        let y = check_action_feasible(&self.instance, v, p, &self.config);
        // A concurrent writer can only have stored the same deterministic value.
        self.set_label(v, p, y).expect("oracle is deterministic");
        y
    }

    /// Label of the edge `(v, u)`, consulting the oracle at most once per edge.
    pub fn label_edge(&self, v: SubassemblyMask, u: SubassemblyMask) -> Result<bool, GraphError> {
        let p = self.edge_part(v, u)?;
        Ok(self.label(v, p))
    }

    pub fn oracle_calls(&self) -> usize {
        self.oracle_calls.load(Ordering::Relaxed)
    }

    pub fn labeled_count(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| l.load(Ordering::Relaxed) != UNKNOWN)
            .count()
    }

    /// Resolves every admissible edge.
    pub fn label_all(&self) {
        for (v, p) in self.edges().collect::<Vec<_>>() {
            self.label(v, p);
        }
    }

    /// True when a path of feasible edges leads from `v` to the full assembly.
    pub fn reachable_to_full(&self, v: SubassemblyMask) -> bool {
        if v == self.full() {
            return true;
        }
        match self.reach[v.index()].load(Ordering::Acquire) {
            TRUE => return true,
            FALSE => return false,
            _ => {}
        }
        let ok = v
            .missing(self.m())
            .any(|p| self.label(v, p) && self.reachable_to_full(v.with(p)));
        self.reach[v.index()].store(if ok { TRUE } else { FALSE }, Ordering::Release);
        ok
    }

    /// Delayed assignment: an infeasible edge, or a feasible edge into a node from
    /// which the full assembly cannot be reached, fails the episode; completing the
    /// assembly succeeds; anything else continues with zero reward.
    pub fn delayed_reward(&self, v: SubassemblyMask, u: SubassemblyMask) -> Result<RewardOutcome, GraphError> {
        let p = self.edge_part(v, u)?;
        Ok(if !self.label(v, p) {
            RewardOutcome::FAIL
        } else if u == self.full() {
            RewardOutcome::SUCCESS
        } else if self.reachable_to_full(u) {
            RewardOutcome::CONTINUE
        } else {
            RewardOutcome::FAIL
        })
    }

    /// Step-local reward: only the feasibility of the current edge is judged.
    pub fn immediate_reward(&self, v: SubassemblyMask, u: SubassemblyMask) -> Result<RewardOutcome, GraphError> {
        let p = self.edge_part(v, u)?;
        Ok(if !self.label(v, p) {
            RewardOutcome::FAIL
        } else if u == self.full() {
            RewardOutcome::SUCCESS
        } else {
            RewardOutcome::CONTINUE
        })
    }

    pub fn reward(&self, mode: RewardMode, v: SubassemblyMask, u: SubassemblyMask) -> Result<RewardOutcome, GraphError> {
        match mode {
            RewardMode::Delayed => self.delayed_reward(v, u),
            RewardMode::Immediate => self.immediate_reward(v, u),
        }
    }

    /// Resolved labels as `(v, u, feasible)`, ordered by `(v, p)`.
    pub fn labeled_edges(&self) -> Vec<(SubassemblyMask, SubassemblyMask, bool)> {
        self.edges()
            .filter_map(|(v, p)| self.cached_label(v, p).map(|y| (v, v.with(p), y)))
            .collect()
    }

    /// Label cache as text: a `# m=<M>` header, then one `v u y` line per labeled
    /// edge with `v`, `u` as decimal bitmasks and `y` in {0, 1}.
    pub fn labels_to_text(&self) -> String {
        let mut out = format!("# m={}\n", self.m());
        for (v, u, y) in self.labeled_edges() {
            let _ = writeln!(out, "{} {} {}", v.bits(), u.bits(), u8::from(y));
        }
        out
    }

    /// Merges labels from text produced by [`labels_to_text`](Self::labels_to_text).
    /// Returns the number of records read.
    pub fn merge_labels_text(&self, text: &str) -> Result<usize, GraphError> {
        let mut records = 0;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let bad = |message: String| GraphError::LabelFile { line, message };
            let raw = raw.trim();
            if raw.is_empty() {
                continue;
            }
            if let Some(header) = raw.strip_prefix('#') {
                if let Some(m) = header.trim().strip_prefix("m=") {
                    let m: usize = m.parse().map_err(|_| bad(format!("bad header `{raw}`")))?;
                    if m != self.m() {
                        return Err(bad(format!("file is for m={m}, graph has m={}", self.m())));
                    }
                }
                continue;
            }
            let fields: Vec<&str> = raw.split_whitespace().collect();
            let [v, u, y] = fields[..] else {
                return Err(bad(format!("expected `v u y`, got `{raw}`")));
            };
            let num = |s: &str| s.parse::<u32>().map_err(|_| bad(format!("`{s}` is not an integer")));
            let (v, u) = (SubassemblyMask::from_bits(num(v)?), SubassemblyMask::from_bits(num(u)?));
            let y = match y {
                "0" => false,
                "1" => true,
                other => return Err(bad(format!("label `{other}` is not 0 or 1"))),
            };
            let p = self.edge_part(v, u).map_err(|e| bad(e.to_string()))?;
            self.set_label(v, p, y)?;
            records += 1;
        }
        Ok(records)
    }

    pub fn save_labels(&self, path: impl AsRef<Path>) -> Result<(), GraphError> {
        let path = path.as_ref();
        std::fs::write(path, self.labels_to_text()).map_err(|source| GraphError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_labels(&self, path: impl AsRef<Path>) -> Result<usize, GraphError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| GraphError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.merge_labels_text(&text)
    }
}
