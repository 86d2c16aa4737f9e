//! Plan construction at inference time: greedy and beam search over learned
//! scores, two baselines, and step-by-step validation against the oracle.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asp_graph::AssemblyGraph;
use crate::gnn::{is_masked, q_values_at, NodeFeatures, QNetParams};
use crate::scalar::Scalar;
use crate::world::SubassemblyMask;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SearchError {
    #[error("plan has {got} steps, instance has {m} parts")]
    Length { m: usize, got: usize },
    #[error("step {step}: part {part} is out of range or already placed")]
    Step { step: usize, part: usize },
}

/// Scores for every part at a state; placed parts must score `f64::MIN` (or be
/// otherwise ignored by the caller's mask).
pub trait ActionScorer {
    fn scores(&self, v: SubassemblyMask) -> Vec<f64>;
}

impl<F: Fn(SubassemblyMask) -> Vec<f64>> ActionScorer for F {
    fn scores(&self, v: SubassemblyMask) -> Vec<f64> {
        self(v)
    }
}

/// Q-network scores for one instance.
pub struct NetScorer<'a, T> {
    pub params: &'a QNetParams<T>,
    pub features: &'a NodeFeatures<T>,
}

impl<T: Scalar> ActionScorer for NetScorer<'_, T> {
    fn scores(&self, v: SubassemblyMask) -> Vec<f64> {
        q_values_at(self.params, self.features, v)
            .expect("finite network output")
            .into_iter()
            .map(|q| if is_masked(q) { f64::MIN } else { q.as_f64() })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Greedy,
    Beam,
    RandomWalk,
    Heuristic,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Greedy => "greedy",
            Method::Beam => "beam",
            Method::RandomWalk => "random_walk",
            Method::Heuristic => "heuristic",
        })
    }
}

/// An attempted assembly sequence and what the oracle said about each step.
/// On failure the sequence ends with the offending part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub sequence: Vec<usize>,
    /// Visited states, starting with the empty assembly.
    pub states: Vec<SubassemblyMask>,
    /// Per-step scores (learned methods only).
    pub scores: Option<Vec<f64>>,
    /// Oracle verdict per attempted step.
    pub feasible: Vec<bool>,
    pub success: bool,
}

impl Plan {
    fn from_steps(sequence: Vec<usize>, scores: Option<Vec<f64>>, feasible: Vec<bool>, m: usize) -> Self {
        let mut states = vec![SubassemblyMask::EMPTY];
        for (&p, &ok) in sequence.iter().zip(&feasible) {
            if !ok {
                break;
            }
            let last = *states.last().expect("non-empty");
            states.push(last.with(p));
        }
        let success = feasible.len() == m && feasible.iter().all(|&f| f);
        Plan {
            sequence,
            states,
            scores,
            feasible,
            success,
        }
    }

    /// Offending `(step, state, part)` of a failed plan.
    pub fn failure(&self) -> Option<(usize, SubassemblyMask, usize)> {
        let k = self.feasible.iter().position(|&f| !f)?;
        Some((k, self.states[k], self.sequence[k]))
    }
}

/// Partial sequence kept by beam search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamCandidate {
    pub state: SubassemblyMask,
    pub history: Vec<usize>,
    pub step_scores: Vec<f64>,
    /// Sum of the step scores.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamResult {
    /// First candidate that validates, else the best-scoring one.
    pub plan: Plan,
    /// Final candidates in validation order.
    pub candidates: Vec<BeamCandidate>,
    /// Number of candidates checked before success (or all of them).
    pub validated: usize,
}

/// Per-step oracle check of a complete sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Validation {
    pub feasible: Vec<bool>,
    pub valid: bool,
}

fn check_sequence(m: usize, sequence: &[usize]) -> Result<(), SearchError> {
    if sequence.len() != m {
        return Err(SearchError::Length { m, got: sequence.len() });
    }
    let mut v = SubassemblyMask::EMPTY;
    for (step, &part) in sequence.iter().enumerate() {
        if part >= m || v.contains(part) {
            return Err(SearchError::Step { step, part });
        }
        v = v.with(part);
    }
    Ok(())
}

/// Checks every step of a complete sequence.
pub fn validate_plan(graph: &AssemblyGraph, sequence: &[usize]) -> Result<Validation, SearchError> {
    check_sequence(graph.m(), sequence)?;
    let mut v = SubassemblyMask::EMPTY;
    let feasible: Vec<bool> = sequence
        .iter()
        .map(|&p| {
            let ok = graph.label(v, p);
            v = v.with(p);
            ok
        })
        .collect();
    let valid = feasible.iter().all(|&f| f);
    Ok(Validation { feasible, valid })
}

/// Validates steps in order and stops at the first infeasible one.
fn walk(graph: &AssemblyGraph, sequence: &[usize]) -> Vec<bool> {
    let mut v = SubassemblyMask::EMPTY;
    let mut out = Vec::with_capacity(sequence.len());
    for &p in sequence {
        let ok = graph.label(v, p);
        out.push(ok);
        if !ok {
            break;
        }
        v = v.with(p);
    }
    out
}

/// Highest-scoring part not in `v`, skipping `f64::MIN`; lowest id on ties.
pub fn best_admissible(q: &[f64], v: SubassemblyMask) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (p, &x) in q.iter().enumerate() {
        if v.contains(p) || x == f64::MIN {
            continue;
        }
        if best.is_none_or(|b| x > q[b]) {
            best = Some(p);
        }
    }
    best
}

/// Repeatedly takes the highest-scoring admissible part (lowest id on ties),
/// checking each step with the oracle and stopping at the first infeasible one.
pub fn greedy_plan(graph: &AssemblyGraph, scorer: &dyn ActionScorer) -> Plan {
    let m = graph.m();
    let mut v = SubassemblyMask::EMPTY;
    let (mut sequence, mut scores, mut feasible) = (Vec::new(), Vec::new(), Vec::new());
    while !v.is_full(m) {
        let q = scorer.scores(v);
        let p = best_admissible(&q, v).expect("a non-full state has an admissible part");
        let ok = graph.label(v, p);
        sequence.push(p);
        scores.push(q[p]);
        feasible.push(ok);
        if !ok {
            break;
        }
        v = v.with(p);
    }
    Plan::from_steps(sequence, Some(scores), feasible, m)
}

fn candidate_order(a: &BeamCandidate, b: &BeamCandidate) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.history.cmp(&b.history))
}

/// Keeps the `b` best partial sequences by cumulative score at every depth without
/// consulting the oracle, then validates the complete candidates in descending
/// score order and returns the first that is feasible throughout.
pub fn beam_plan(graph: &AssemblyGraph, scorer: &dyn ActionScorer, b: usize) -> BeamResult {
    assert!(b >= 1, "beam width must be at least 1");
    let m = graph.m();
    let mut beam = vec![BeamCandidate {
        state: SubassemblyMask::EMPTY,
        history: Vec::new(),
        step_scores: Vec::new(),
        score: 0.0,
    }];
    for _ in 0..m {
        let mut next = Vec::with_capacity(beam.len() * m);
        for cand in &beam {
            let q = scorer.scores(cand.state);
            for p in cand.state.missing(m) {
                if q[p] == f64::MIN {
                    continue;
                }
                let mut history = cand.history.clone();
                history.push(p);
                let mut step_scores = cand.step_scores.clone();
                step_scores.push(q[p]);
                next.push(BeamCandidate {
                    state: cand.state.with(p),
                    history,
                    step_scores,
                    score: cand.score + q[p],
                });
            }
        }
        next.sort_by(candidate_order);
        next.truncate(b);
        beam = next;
    }

    let mut validated = 0;
    for cand in &beam {
        validated += 1;
        let feasible = walk(graph, &cand.history);
        if feasible.len() == m && feasible.iter().all(|&f| f) {
            let plan = Plan::from_steps(cand.history.clone(), Some(cand.step_scores.clone()), feasible, m);
            return BeamResult {
                plan,
                candidates: beam,
                validated,
            };
        }
    }
    let best = &beam[0];
    let feasible = walk(graph, &best.history);
    let n = feasible.len();
    let plan = Plan::from_steps(
        best.history[..n].to_vec(),
        Some(best.step_scores[..n].to_vec()),
        feasible,
        m,
    );
    BeamResult {
        plan,
        candidates: beam,
        validated,
    }
}

/// Uniform random admissible part at every step, checked with the oracle.
pub fn random_walk_plan(graph: &AssemblyGraph, seed: u64) -> Plan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = graph.m();
    let mut v = SubassemblyMask::EMPTY;
    let (mut sequence, mut feasible) = (Vec::new(), Vec::new());
    while !v.is_full(m) {
        let options: Vec<usize> = v.missing(m).collect();
        let p = *options.choose(&mut rng).expect("non-full state");
        let ok = graph.label(v, p);
        sequence.push(p);
        feasible.push(ok);
        if !ok {
            break;
        }
        v = v.with(p);
    }
    Plan::from_steps(sequence, None, feasible, m)
}

/// Parts in ascending center-of-mass height (ties to the lowest id).
pub fn heuristic_order(graph: &AssemblyGraph) -> Vec<usize> {
    let mut order: Vec<usize> = (0..graph.m()).collect();
    let z = |p: usize| graph.instance().part(p).center_of_mass()[2];
    order.sort_by(|&a, &b| z(a).total_cmp(&z(b)).then(a.cmp(&b)));
    order
}

/// Lowest parts first, checked step by step.
pub fn heuristic_plan(graph: &AssemblyGraph) -> Plan {
    let order = heuristic_order(graph);
    let feasible = walk(graph, &order);
    let n = feasible.len();
    Plan::from_steps(order[..n].to_vec(), None, feasible, graph.m())
}

/// Exact success probability of a random walk, by dynamic programming over the
/// lattice.
pub fn random_walk_success_probability(graph: &AssemblyGraph) -> f64 {
    let m = graph.m();
    let mut prob = vec![0.0; 1 << m];
    prob[graph.full().index()] = 1.0;
    for bits in (0..(1u32 << m) - 1).rev() {
        let v = SubassemblyMask::from_bits(bits);
        let missing: Vec<usize> = v.missing(m).collect();
        let total: f64 = missing
            .iter()
            .filter(|&&p| graph.label(v, p))
            .map(|&p| prob[v.with(p).index()])
            .sum();
        prob[v.index()] = total / missing.len() as f64;
    }
    prob[0]
}

/// Number of complete feasible orders (paths from the root to the full assembly).
pub fn count_feasible_orders(graph: &AssemblyGraph) -> u64 {
    let m = graph.m();
    let mut ways = vec![0u64; 1 << m];
    ways[graph.full().index()] = 1;
    for bits in (0..(1u32 << m) - 1).rev() {
        let v = SubassemblyMask::from_bits(bits);
        ways[v.index()] = v
            .missing(m)
            .filter(|&p| graph.label(v, p))
            .map(|p| ways[v.with(p).index()])
            .sum();
    }
    ways[0]
}
