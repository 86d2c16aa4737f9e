//! Double DQN training over assembly lattices.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asp_graph::{AssemblyGraph, Reward, RewardMode};
use crate::feasibility::FeasibilityConfig;
use crate::gnn::{argmax_admissible, q_values_at, GnnError, NetConfig, NodeFeatures, QNetParams, Tape};
use crate::scalar::Scalar;
use crate::search::{best_admissible, greedy_plan, ActionScorer, NetScorer};
use crate::world::{Instance, SubassemblyMask};

#[derive(Debug, thiserror::Error)]
pub enum RlError {
    #[error("transition into the full assembly is not marked done (instance {instance}, state {state:?})")]
    TerminalNotDone { instance: usize, state: SubassemblyMask },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("buffer holds {have} transitions, batch needs {need}")]
    BufferTooSmall { have: usize, need: usize },
    #[error("non-finite loss {loss} at step {step} (targets {targets:?}, predictions {predictions:?})")]
    NonFiniteLoss {
        loss: f64,
        step: u64,
        targets: Vec<f64>,
        predictions: Vec<f64>,
    },
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Gnn(#[from] GnnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: SubassemblyMask,
    pub action: usize,
    pub reward: Reward,
    pub next_state: SubassemblyMask,
    pub done: bool,
    /// Index of the instance in the training set.
    pub instance: usize,
}

/// Fixed-capacity store; once full, a new transition overwrites a uniformly
/// random slot.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn items(&self) -> &[Transition] {
        &self.items
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            let i = self.rng.gen_range(0..self.capacity);
            self.items[i] = t;
        }
    }

    /// Uniform sample of distinct slots.
    pub fn sample(&mut self, batch: usize) -> Result<Vec<Transition>, RlError> {
        if batch == 0 {
            return Err(RlError::EmptyBatch);
        }
        if batch > self.items.len() {
            return Err(RlError::BufferTooSmall {
                have: self.items.len(),
                need: batch,
            });
        }
        Ok(sample(&mut self.rng, self.items.len(), batch)
            .into_iter()
            .map(|i| self.items[i])
            .collect())
    }
}

/// Every knob of a training run. Field names double as config-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub gamma: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch: usize,
    pub target_sync_every: u64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Episodes over which epsilon decays linearly; `None` means half of all episodes.
    pub epsilon_decay_episodes: Option<usize>,
    pub buffer_capacity: usize,
    /// Transitions collected before the first update.
    pub warmup: usize,
    /// One gradient step per this many collected transitions.
    pub train_every: usize,
    /// Evaluate on the held-out set every this many epochs (0 disables).
    pub eval_every_epochs: usize,
    pub reward_mode: RewardMode,
    pub seed: u64,
    pub net: NetConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            gamma: 0.99,
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch: 32,
            target_sync_every: 100,
            epochs: 2000,
            episodes_per_epoch: 10,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_episodes: None,
            buffer_capacity: 100_000,
            warmup: 1000,
            train_every: 1,
            eval_every_epochs: 1,
            reward_mode: RewardMode::Delayed,
            seed: 0,
            net: NetConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch == 0 || self.batch > self.buffer_capacity {
            return bad("batch must be positive and fit in the buffer");
        }
        if self.warmup < self.batch {
            return bad("warmup must be at least one batch");
        }
        if self.target_sync_every == 0 || self.train_every == 0 || self.episodes_per_epoch == 0 {
            return bad("target_sync_every, train_every and episodes_per_epoch must be positive");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("epsilon bounds must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn total_episodes(&self) -> usize {
        self.epochs * self.episodes_per_epoch
    }

    /// Linear decay from `epsilon_start` to `epsilon_end`, then flat.
    pub fn epsilon(&self, episode: usize) -> f64 {
        let decay = self
            .epsilon_decay_episodes
            .unwrap_or(self.total_episodes() / 2)
            .max(1);
        let frac = (episode as f64 / decay as f64).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// Adam over every tensor of a network.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &QNetParams<T>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<T>> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| vec![T::zero(); t.len()])
            .collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update from the accumulated gradients.
    pub fn step(&mut self, params: &mut QNetParams<T>) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::one() - T::of(self.beta1.powi(self.t as i32));
        let c2 = T::one() - T::of(self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for ((tensor, m), v) in params.tensors_mut().into_iter().zip(&mut self.m).zip(&mut self.v) {
            let (values, grad) = tensor.values_and_grad_mut();
            for i in 0..values.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// One training instance: its lattice (with label cache) and node features.
pub struct Environment<T> {
    pub graph: AssemblyGraph,
    pub features: NodeFeatures<T>,
}

impl<T: Scalar> Environment<T> {
    pub fn new(instance: Instance, config: FeasibilityConfig) -> Self {
        let features = NodeFeatures::from_instance(&instance);
        Environment {
            graph: AssemblyGraph::new(instance, config),
            features,
        }
    }

    pub fn m(&self) -> usize {
        self.graph.m()
    }
}

/// Uniform random admissible part at `v`.
pub fn random_action<R: Rng + ?Sized>(v: SubassemblyMask, m: usize, rng: &mut R) -> usize {
    let options: Vec<usize> = v.missing(m).collect();
    *options.choose(rng).expect("non-full state has an admissible part")
}

/// Rolls out one episode from the empty assembly with epsilon-greedy actions.
pub fn run_episode<T: Scalar, R: Rng + ?Sized>(
    env: &Environment<T>,
    instance_id: usize,
    params: &QNetParams<T>,
    epsilon: f64,
    mode: RewardMode,
    rng: &mut R,
) -> Vec<Transition> {
    let scorer = NetScorer {
        params,
        features: &env.features,
    };
    run_episode_with(&env.graph, instance_id, &scorer, epsilon, mode, rng)
}

/// `run_episode` with any scorer in place of the network.
pub fn run_episode_with<S: ActionScorer + ?Sized, R: Rng + ?Sized>(
    graph: &AssemblyGraph,
    instance_id: usize,
    scorer: &S,
    epsilon: f64,
    mode: RewardMode,
    rng: &mut R,
) -> Vec<Transition> {
    let m = graph.m();
    let mut v = SubassemblyMask::EMPTY;
    let mut out = Vec::with_capacity(m);
    while !v.is_full(m) {
        let action = if rng.gen::<f64>() < epsilon {
            random_action(v, m, rng)
        } else {
            best_admissible(&scorer.scores(v), v).expect("non-full state")
        };
        let u = v.with(action);
        let outcome = graph.reward(mode, v, u).expect("admissible edge");
        out.push(Transition {
            state: v,
            action,
            reward: outcome.reward,
            next_state: u,
            done: outcome.done,
            instance: instance_id,
        });
        if outcome.done {
            break;
        }
        v = u;
    }
    out
}

/// Target-network scores memoized per (instance, state) until the next sync.
#[derive(Debug, Default)]
pub struct TargetCache<T> {
    entries: HashMap<(usize, u32), Vec<T>>,
}

impl<T: Scalar> TargetCache<T> {
    pub fn clear(&mut self) {
        self.entries.clear();
    }

    fn get(
        &mut self,
        target: &QNetParams<T>,
        env: &Environment<T>,
        instance: usize,
        v: SubassemblyMask,
    ) -> Result<&Vec<T>, GnnError> {
        use std::collections::hash_map::Entry;
        match self.entries.entry((instance, v.bits())) {
            Entry::Occupied(e) => Ok(e.into_mut()),
            Entry::Vacant(e) => Ok(e.insert(q_values_at(target, &env.features, v)?)),
        }
    }
}

/// `y = r` for terminal transitions, otherwise
/// `y = r + gamma * Q'(s', argmax_a Q(s', a))`.
pub fn ddqn_target<T: Scalar>(
    batch: &[Transition],
    envs: &[Environment<T>],
    online: &QNetParams<T>,
    target: &QNetParams<T>,
    gamma: f64,
) -> Result<Vec<T>, RlError> {
    ddqn_target_cached(batch, envs, online, target, gamma, &mut TargetCache::default())
}

pub fn ddqn_target_cached<T: Scalar>(
    batch: &[Transition],
    envs: &[Environment<T>],
    online: &QNetParams<T>,
    target: &QNetParams<T>,
    gamma: f64,
    cache: &mut TargetCache<T>,
) -> Result<Vec<T>, RlError> {
    double_q_targets(
        batch,
        gamma,
        |i| envs[i].m(),
        |i, s| Ok(q_values_at(online, &envs[i].features, s)?),
        |i, s, a| Ok(cache.get(target, &envs[i], i, s)?[a]),
    )
}

/// Double-Q targets with the two networks supplied as lookups: `online(i, s')`
/// returns every score at `s'` of instance `i` (placed parts masked), and
/// `target(i, s', a)` the target network's score for action `a`.
pub fn double_q_targets<T: Scalar>(
    batch: &[Transition],
    gamma: f64,
    part_count: impl Fn(usize) -> usize,
    mut online: impl FnMut(usize, SubassemblyMask) -> Result<Vec<T>, RlError>,
    mut target: impl FnMut(usize, SubassemblyMask, usize) -> Result<T, RlError>,
) -> Result<Vec<T>, RlError> {
    if batch.is_empty() {
        return Err(RlError::EmptyBatch);
    }
    batch
        .iter()
        .map(|t| {
            let r = T::of(t.reward.value());
            if t.done {
                return Ok(r);
            }
            if t.next_state.is_full(part_count(t.instance)) {
                return Err(RlError::TerminalNotDone {
                    instance: t.instance,
                    state: t.next_state,
                });
            }
            let q = online(t.instance, t.next_state)?;
            let a = argmax_admissible(&q, t.next_state).expect("non-full next state");
            Ok(r + T::of(gamma) * target(t.instance, t.next_state, a)?)
        })
        .collect()
}

/// Online network, target network, optimizer and counters.
pub struct Learner<T> {
    pub online: QNetParams<T>,
    pub target: QNetParams<T>,
    pub optimizer: Adam<T>,
    pub steps: u64,
    pub syncs: u64,
    pub sync_every: u64,
    pub gamma: f64,
    cache: TargetCache<T>,
    tape: Tape<T>,
}

impl<T: Scalar> Learner<T> {
    pub fn new(online: QNetParams<T>, config: &TrainerConfig) -> Self {
        let optimizer = Adam::new(&online, config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps);
        Learner {
            target: online.clone(),
            online,
            optimizer,
            steps: 0,
            syncs: 0,
            sync_every: config.target_sync_every,
            gamma: config.gamma,
            cache: TargetCache::default(),
            tape: Tape::new(),
        }
    }

    /// Squared TD error on `batch`, one Adam update, and a target sync whenever
    /// the step counter reaches a multiple of `sync_every`.
    pub fn train_step(&mut self, batch: &[Transition], envs: &[Environment<T>]) -> Result<f64, RlError> {
        let targets = ddqn_target_cached(batch, envs, &self.online, &self.target, self.gamma, &mut self.cache)?;
        let loss = self.fit(batch, envs, &targets)?;
        self.steps += 1;
        if self.steps.is_multiple_of(self.sync_every) {
            self.sync_target();
        }
        Ok(loss)
    }

    /// Gradient step toward fixed targets; returns the loss before the update.
    pub fn fit(&mut self, batch: &[Transition], envs: &[Environment<T>], targets: &[T]) -> Result<f64, RlError> {
        if batch.is_empty() {
            return Err(RlError::EmptyBatch);
        }
        self.tape.clear();
        let mut preds = Vec::with_capacity(batch.len());
        for t in batch {
            let q = self.tape.record_q(&self.online, &envs[t.instance].features, t.state, &[t.action])?;
            preds.push(q[0]);
        }
        let n = T::of(batch.len() as f64);
        let mut loss = T::zero();
        let mut dq = Vec::with_capacity(batch.len());
        for (&y, &q) in targets.iter().zip(&preds) {
            let err = q - y;
            loss += err * err;
            dq.push(T::of(2.0) * err / n);
        }
        loss /= n;
        let loss = loss.as_f64();
        if !loss.is_finite() {
            return Err(RlError::NonFiniteLoss {
                loss,
                step: self.steps,
                targets: targets.iter().map(|x| x.as_f64()).collect(),
                predictions: preds.iter().map(|x| x.as_f64()).collect(),
            });
        }
        self.online.zero_grad();
        self.tape.backward(&mut self.online, &dq)?;
        self.optimizer.step(&mut self.online);
        Ok(loss)
    }

    pub fn sync_target(&mut self) {
        self.target.copy_values_from(&self.online);
        self.cache.clear();
        self.syncs += 1;
    }
}

/// One row of the training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub episodes: usize,
    pub steps: u64,
    pub epsilon: f64,
    pub mean_reward: f64,
    pub mean_loss: f64,
    /// Greedy success on the held-out set; empty when not evaluated this epoch.
    pub eval_success: Option<f64>,
}

pub struct TrainOutcome<T> {
    pub params: QNetParams<T>,
    pub curve: Vec<CurvePoint>,
    pub steps: u64,
    pub syncs: u64,
}

/// Fraction of environments solved by greedy search with `params`.
pub fn greedy_success_rate<T: Scalar>(params: &QNetParams<T>, envs: &[Environment<T>]) -> f64 {
    if envs.is_empty() {
        return 0.0;
    }
    let solved = envs
        .iter()
        .filter(|env| {
            let scorer = NetScorer {
                params,
                features: &env.features,
            };
            greedy_plan(&env.graph, &scorer).success
        })
        .count();
    solved as f64 / envs.len() as f64
}

/// Full training run: each episode samples a training instance uniformly, rolls
/// it out epsilon-greedily, stores the transitions and, once the buffer holds
/// `warmup` transitions, takes one gradient step per `train_every` new ones.
pub fn train<T: Scalar>(
    train_envs: &[Environment<T>],
    eval_envs: &[Environment<T>],
    config: &TrainerConfig,
    mut on_epoch: impl FnMut(&CurvePoint),
) -> Result<TrainOutcome<T>, RlError> {
    config.validate()?;
    if train_envs.is_empty() {
        return Err(RlError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = QNetParams::init(config.net, &mut rng);
    let mut learner = Learner::new(init, config);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity, rng.gen());
    let mut curve = Vec::with_capacity(config.epochs);
    let mut since_update = 0usize;
    let mut episode = 0usize;
    for epoch in 0..config.epochs {
        let (mut reward_sum, mut loss_sum, mut losses) = (0.0, 0.0, 0usize);
        let mut epsilon = 0.0;
        for _ in 0..config.episodes_per_epoch {
            epsilon = config.epsilon(episode);
            let i = rng.gen_range(0..train_envs.len());
            let transitions = run_episode(
                &train_envs[i],
                i,
                &learner.online,
                epsilon,
                config.reward_mode,
                &mut rng,
            );
            reward_sum += transitions.iter().map(|t| t.reward.value()).sum::<f64>();
            for t in transitions {
                buffer.push(t);
                if buffer.len() < config.warmup {
                    continue;
                }
                since_update += 1;
                if since_update >= config.train_every {
                    since_update = 0;
                    let batch = buffer.sample(config.batch)?;
                    loss_sum += learner.train_step(&batch, train_envs)?;
                    losses += 1;
                }
            }
            episode += 1;
        }
        let evaluate = config.eval_every_epochs > 0
            && ((epoch + 1) % config.eval_every_epochs == 0 || epoch + 1 == config.epochs);
        let point = CurvePoint {
            epoch: epoch + 1,
            episodes: episode,
            steps: learner.steps,
            epsilon,
            mean_reward: reward_sum / config.episodes_per_epoch as f64,
            mean_loss: if losses > 0 { loss_sum / losses as f64 } else { f64::NAN },
            eval_success: evaluate.then(|| greedy_success_rate(&learner.online, eval_envs)),
        };
        on_epoch(&point);
        curve.push(point);
    }
    Ok(TrainOutcome {
        steps: learner.steps,
        syncs: learner.syncs,
        params: learner.online,
        curve,
    })
}
