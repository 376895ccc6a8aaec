//! Q-learning control loop over per-action regression trees.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{Action, EnvError, Environment};
use crate::qtree::{QTree, SplitConfig, TreeError};
use crate::relations::{GameId, Observation, RelationSpace, RelationalState, StateBuilder};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("empty action set")]
    NoActions,
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardTransform {
    #[serde(rename = "sign")]
    Sign,
    #[serde(rename = "sign-plus-0.1")]
    SignPlusTenth,
    #[serde(rename = "identity")]
    Identity,
}

impl RewardTransform {
    pub fn as_str(self) -> &'static str {
        match self {
            RewardTransform::Sign => "sign",
            RewardTransform::SignPlusTenth => "sign-plus-0.1",
            RewardTransform::Identity => "identity",
        }
    }
}

impl fmt::Display for RewardTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RewardTransform {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sign" => Ok(RewardTransform::Sign),
            "sign-plus-0.1" => Ok(RewardTransform::SignPlusTenth),
            "identity" => Ok(RewardTransform::Identity),
            other => Err(format!("unknown reward transform `{other}`")),
        }
    }
}

fn sign(r: f64) -> f64 {
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn transform_reward(r: f64, mode: RewardTransform) -> f64 {
    match mode {
        RewardTransform::Sign => sign(r),
        RewardTransform::SignPlusTenth => sign(r) + 0.1,
        RewardTransform::Identity => r,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon0: f64,
    /// Per-iteration multiplicative decay `d`.
    pub epsilon_decay: f64,
    pub epsilon_floor: f64,
    /// Exploration rate used for checkpoint selection and testing.
    pub test_epsilon: f64,
    pub reward_transform: RewardTransform,
    pub action_buffer_len: usize,
    /// Consecutive zero rewards that end an episode early.
    pub reward_buffer_len: Option<usize>,
}

impl AgentConfig {
    pub fn for_game(game: GameId) -> Self {
        let base = Self {
            alpha: 0.1,
            gamma: 0.99,
            epsilon0: 1.0,
            epsilon_decay: 0.9999995,
            epsilon_floor: 0.1,
            test_epsilon: 0.05,
            reward_transform: RewardTransform::Sign,
            action_buffer_len: 10,
            reward_buffer_len: None,
        };
        match game {
            GameId::Breakout => base,
            GameId::Pong => Self {
                epsilon_decay: 0.9999977,
                reward_transform: RewardTransform::SignPlusTenth,
                ..base
            },
            GameId::DemonAttack => Self {
                reward_buffer_len: Some(300),
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::Config(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.epsilon0) || !(0.0..=1.0).contains(&self.test_epsilon) {
            return bad("epsilon must lie in [0, 1]");
        }
        if !(self.epsilon_floor <= self.epsilon0 && self.epsilon_floor >= 0.0) {
            return bad("epsilon_floor must lie in [0, epsilon0]");
        }
        if !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0) {
            return bad("epsilon_decay must lie in (0, 1]");
        }
        if self.reward_buffer_len == Some(0) {
            return bad("reward_buffer_len must be positive");
        }
        Ok(())
    }
}

pub fn decay_epsilon(epsilon: f64, d: f64, floor: f64) -> f64 {
    (d * epsilon).max(floor)
}

/// The last `len` actions taken.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionBuffer {
    len: usize,
    recent: VecDeque<usize>,
}

impl ActionBuffer {
    pub fn new(len: usize) -> Self {
        Self {
            len,
            recent: VecDeque::with_capacity(len),
        }
    }

    pub fn push(&mut self, action: usize) {
        if self.len == 0 {
            return;
        }
        if self.recent.len() == self.len {
            self.recent.pop_front();
        }
        self.recent.push_back(action);
    }

    pub fn clear(&mut self) {
        self.recent.clear();
    }

    /// True when the buffer is full of one repeated action.
    pub fn stalled(&self) -> bool {
        self.len > 0 && self.recent.len() == self.len && self.recent.iter().all(|&a| a == self.recent[0])
    }
}

/// Index of the highest predicted q, lowest index on ties.
pub fn greedy_action(trees: &[QTree], state: &RelationalState) -> Result<usize, AgentError> {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, tree) in trees.iter().enumerate() {
        let q = tree.predict(state)?;
        if q > best.1 {
            best = (i, q);
        }
    }
    if trees.is_empty() {
        return Err(AgentError::NoActions);
    }
    Ok(best.0)
}

/// ε-greedy choice of an action index into `trees`.
///
/// With probability ε the action is uniform over all actions, so the greedy
/// action has total mass `1 - ε + ε/|A|`.
pub fn select_action<R: Rng + ?Sized>(
    trees: &[QTree],
    state: &RelationalState,
    epsilon: f64,
    rng: &mut R,
    buffer: &ActionBuffer,
) -> Result<usize, AgentError> {
    let n = trees.len();
    if n == 0 {
        return Err(AgentError::NoActions);
    }
    if buffer.stalled() || state.is_empty() {
        return Ok(rng.gen_range(0..n));
    }
    if rng.gen::<f64>() < epsilon {
        return Ok(rng.gen_range(0..n));
    }
    greedy_action(trees, state)
}

pub fn max_q(trees: &[QTree], state: &RelationalState) -> Result<f64, AgentError> {
    let mut best = f64::NEG_INFINITY;
    for tree in trees {
        best = best.max(tree.predict(state)?);
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub state: RelationalState,
    pub action: usize,
    /// Already transformed.
    pub reward: f64,
    pub next_state: RelationalState,
    pub done: bool,
}

/// Bellman target. Terminal steps and empty next states do not bootstrap.
pub fn q_target(record: &StepRecord, trees: &[QTree], gamma: f64) -> Result<f64, AgentError> {
    if record.done || record.next_state.is_empty() {
        return Ok(record.reward);
    }
    Ok(record.reward + gamma * max_q(trees, &record.next_state)?)
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub config: AgentConfig,
    pub split: SplitConfig,
    pub actions: Vec<Action>,
    /// One tree per entry of `actions`.
    pub trees: Vec<QTree>,
    pub epsilon: f64,
    buffer: ActionBuffer,
}

impl Agent {
    pub fn new(config: AgentConfig, split: SplitConfig, actions: &[Action], space: Arc<RelationSpace>) -> Result<Self, AgentError> {
        config.validate()?;
        if actions.is_empty() {
            return Err(AgentError::NoActions);
        }
        Ok(Self {
            epsilon: config.epsilon0,
            buffer: ActionBuffer::new(config.action_buffer_len),
            trees: actions.iter().map(|_| QTree::new(Arc::clone(&space))).collect(),
            actions: actions.to_vec(),
            config,
            split,
        })
    }

    /// Apply one transition to the tree of the action taken.
    ///
    /// Transitions out of an empty state are skipped.
    pub fn learn(&mut self, record: &StepRecord) -> Result<(), AgentError> {
        if record.state.is_empty() {
            return Ok(());
        }
        let target = q_target(record, &self.trees, self.config.gamma)?;
        self.trees[record.action].learn(&record.state, target, self.config.alpha, &self.split)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    /// Iterations completed when the episode ended.
    pub iteration: u64,
    pub raw_return: f64,
    pub epsilon: f64,
    pub steps: u64,
    /// Ended by the zero-reward buffer rather than by the game.
    pub truncated: bool,
}

/// Counts consecutive zero rewards.
#[derive(Debug, Clone, Copy)]
struct ZeroRun {
    limit: Option<usize>,
    run: usize,
}

impl ZeroRun {
    fn push(&mut self, raw: f64) -> bool {
        match self.limit {
            None => false,
            Some(limit) => {
                self.run = if raw == 0.0 { self.run + 1 } else { 0 };
                self.run >= limit
            }
        }
    }
}

/// Train `agent` for `iterations` environment steps.
///
/// `on_checkpoint` is called after every `checkpoint_every` iterations.
/// Returns one record per completed episode; an episode cut off by the
/// iteration budget is not logged.
pub fn run_training<R, F>(
    env: &mut dyn Environment,
    builder: &StateBuilder,
    agent: &mut Agent,
    iterations: u64,
    checkpoint_every: u64,
    rng: &mut R,
    mut on_checkpoint: F,
) -> Result<Vec<EpisodeRecord>, AgentError>
where
    R: Rng + ?Sized,
    F: FnMut(u64, &Agent) -> Result<(), AgentError>,
{
    let mut log = Vec::new();
    if iterations == 0 {
        return Ok(log);
    }
    let mut obs = env.reset(rng.gen());
    let mut prev = obs.clone();
    let mut zeros = ZeroRun {
        limit: agent.config.reward_buffer_len,
        run: 0,
    };
    agent.buffer.clear();
    let (mut ret, mut steps) = (0.0, 0u64);
    for it in 1..=iterations {
        let state = builder.build(&obs, &prev);
        let a = select_action(&agent.trees, &state, agent.epsilon, rng, &agent.buffer)?;
        agent.buffer.push(a);
        let step = env.step(agent.actions[a])?;
        ret += step.reward;
        steps += 1;
        let truncated = zeros.push(step.reward);
        let next_state = builder.build(&step.obs, &obs);
        let record = StepRecord {
            state,
            action: a,
            reward: transform_reward(step.reward, agent.config.reward_transform),
            next_state,
            done: step.done,
        };
        agent.learn(&record)?;
        agent.epsilon = decay_epsilon(agent.epsilon, agent.config.epsilon_decay, agent.config.epsilon_floor);

        if step.done || truncated {
            log.push(EpisodeRecord {
                episode: log.len() as u64,
                iteration: it,
                raw_return: ret,
                epsilon: agent.epsilon,
                steps,
                truncated: truncated && !step.done,
            });
            obs = env.reset(rng.gen());
            prev = obs.clone();
            zeros.run = 0;
            agent.buffer.clear();
            ret = 0.0;
            steps = 0;
        } else {
            prev = std::mem::replace(&mut obs, step.obs);
        }
        if checkpoint_every > 0 && it % checkpoint_every == 0 {
            on_checkpoint(it, agent)?;
        }
    }
    Ok(log)
}

/// Play one episode with fixed trees and return the raw return.
///
/// `observer` sees every observation, starting with the reset one.
#[allow(clippy::too_many_arguments)]
pub fn run_episode<R: Rng + ?Sized>(
    env: &mut dyn Environment,
    builder: &StateBuilder,
    trees: &[QTree],
    config: &AgentConfig,
    epsilon: f64,
    seed: u64,
    rng: &mut R,
    mut observer: Option<&mut dyn FnMut(&Observation)>,
) -> Result<f64, AgentError> {
    let mut obs = env.reset(seed);
    if let Some(f) = observer.as_mut() {
        f(&obs);
    }
    let mut prev = obs.clone();
    let mut buffer = ActionBuffer::new(config.action_buffer_len);
    let mut zeros = ZeroRun {
        limit: config.reward_buffer_len,
        run: 0,
    };
    let mut ret = 0.0;
    loop {
        let state = builder.build(&obs, &prev);
        let a = select_action(trees, &state, epsilon, rng, &buffer)?;
        buffer.push(a);
        let step = env.step(env.actions()[a])?;
        if let Some(f) = observer.as_mut() {
            f(&step.obs);
        }
        ret += step.reward;
        if step.done || zeros.push(step.reward) {
            return Ok(ret);
        }
        prev = std::mem::replace(&mut obs, step.obs);
    }
}
