//! Per-UE deep-Q agent: observation encoding, epsilon-greedy selection,
//! rewards, replay buffer, training epochs and the upload/receive protocol.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::dqsa_reward;
use crate::env5g::UeView;
use crate::nnet::{td_gradient, td_loss, Experience, NnetError, QNetwork};

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("observation has {got} features but the model expects {expected}")]
    ObservationSize { expected: usize, got: usize },
    #[error("received model shape does not match the agent's model")]
    ShapeMismatch,
    #[error(transparent)]
    Nnet(#[from] NnetError),
}

/// Channel request or silence. RBG indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Request(usize),
    Silent,
}

impl Action {
    /// Index into the action vector: `0..M` for channels, `M` for silence.
    pub fn index(self, channels: usize) -> usize {
        match self {
            Action::Request(k) => k,
            Action::Silent => channels,
        }
    }

    pub fn from_index(index: usize, channels: usize) -> Self {
        if index >= channels {
            Action::Silent
        } else {
            Action::Request(index)
        }
    }

    /// 1-based code: `1..=M` for channels, `M + 1` for silence.
    pub fn code(self, channels: usize) -> usize {
        self.index(channels) + 1
    }

    pub fn from_code(code: usize, channels: usize) -> Option<Self> {
        (1..=channels + 1)
            .contains(&code)
            .then(|| Self::from_index(code - 1, channels))
    }

    pub fn channel(self) -> Option<usize> {
        match self {
            Action::Request(k) => Some(k),
            Action::Silent => None,
        }
    }
}

/// Encoded local state. Flattened layout: M rates, buffer bit, silent bit,
/// M request ages, success bit (D = 2M + 3).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub rates: Vec<f64>,
    pub buffer_nonempty: bool,
    pub silent_last_slot: bool,
    pub request_ages: Vec<f64>,
    pub success_last_slot: bool,
}

pub fn observation_dim(channels: usize) -> usize {
    2 * channels + 3
}

fn bit(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

impl Observation {
    pub fn channels(&self) -> usize {
        self.rates.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(observation_dim(self.channels()));
        v.extend_from_slice(&self.rates);
        v.push(bit(self.buffer_nonempty));
        v.push(bit(self.silent_last_slot));
        v.extend_from_slice(&self.request_ages);
        v.push(bit(self.success_last_slot));
        v
    }
}

/// Rates are divided by `max_rate_bits`, ages are capped at `age_cap` and
/// divided by it.
pub fn build_observation(view: &UeView, max_rate_bits: u64, age_cap: u32) -> Observation {
    let cap = age_cap.max(1);
    Observation {
        rates: view
            .rates
            .iter()
            .map(|&r| (r as f64 / max_rate_bits.max(1) as f64).min(1.0))
            .collect(),
        buffer_nonempty: view.buffer_bits > 0,
        silent_last_slot: !matches!(view.last_action, Some(Action::Request(_))),
        request_ages: view
            .request_age
            .iter()
            .map(|&a| f64::from(a.min(cap)) / f64::from(cap))
            .collect(),
        success_last_slot: view.last_success,
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Epsilon-greedy choice. Always consumes exactly two draws from `rng`: a
/// uniform `f64` for the explore decision, then a uniform action index.
pub fn select_action<R: Rng + ?Sized>(
    model: &QNetwork,
    obs: &[f64],
    epsilon: f64,
    rng: &mut R,
) -> Result<Action, AgentError> {
    let channels = model.channels();
    let u: f64 = rng.gen();
    let random = rng.gen_range(0..=channels);
    let index = if u < epsilon {
        random
    } else {
        argmax(&model.forward(obs)?)
    };
    Ok(Action::from_index(index, channels))
}

/// Own-slot outcome as seen by the UE.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotFeedback {
    Success,
    /// Requested a channel and did not get it.
    Failed,
    Silent,
}

/// Collision-punishing reward: `+x` on success, `-alpha * x` on a failed
/// request, 0 when silent.
pub fn compute_reward(feedback: SlotFeedback, rate_bits: f64, alpha: f64) -> f64 {
    match feedback {
        SlotFeedback::Success => rate_bits,
        SlotFeedback::Failed => -alpha * rate_bits,
        SlotFeedback::Silent => 0.0,
    }
}

/// Affine map `(1 - gamma) (r + alpha x_max) / ((1 + alpha) x_max)` so that
/// every discounted return of rewards in `[-alpha x_max, x_max]` lies in
/// `[0, 1]`.
pub fn normalize_reward(raw: f64, alpha: f64, gamma: f64, max_rate_bits: f64) -> f64 {
    (1.0 - gamma) * (raw + alpha * max_rate_bits) / ((1.0 + alpha) * max_rate_bits)
}

/// `sum_t gamma^(t-1) r(t)`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardScheme {
    /// Success `+x`, failed request `-alpha x`, silence 0.
    Punishing,
    /// Success `+x`, anything else 0.
    NonNegative,
}

impl RewardScheme {
    pub fn reward(self, feedback: SlotFeedback, rate_bits: f64, alpha: f64) -> f64 {
        match self {
            RewardScheme::Punishing => compute_reward(feedback, rate_bits, alpha),
            RewardScheme::NonNegative => dqsa_reward(feedback, rate_bits),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub epsilon: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub buffer_capacity: usize,
    pub age_cap: u32,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            gamma: 0.95,
            alpha: 1.0,
            hidden: 64,
            learning_rate: 0.01,
            batch_size: 32,
            steps_per_epoch: 4,
            buffer_capacity: 500,
            age_cap: 50,
        }
    }
}

/// Bounded FIFO of experience tuples.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: VecDeque<Experience>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: VecDeque::with_capacity(capacity.min(4096)),
            capacity,
        }
    }

    pub fn push(&mut self, e: Experience) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(e);
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

    pub fn clear(&mut self) {
        self.items.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.items.iter()
    }

    /// Uniform sample of `n` distinct entries (`n <= len`).
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Experience> {
        index::sample(rng, self.items.len(), n)
            .into_iter()
            .map(|i| self.items[i].clone())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpochOutcome {
    Trained { loss: f64 },
    /// Buffer held fewer tuples than one batch.
    Skipped,
    /// Training is disabled between upload and the next received model.
    Disabled,
    /// A non-finite gradient or update stopped the epoch early.
    Aborted,
}

/// Per-agent counters surfaced to the run diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgentDiagnostics {
    pub train_steps: u64,
    pub epochs: u64,
    pub skipped_epochs: u64,
    pub aborted_epochs: u64,
    pub last_loss: Option<f64>,
}

/// One UE's learner. Holds the online and target networks, the replay
/// buffer and the pending `(s, a)` waiting for its reward and successor.
#[derive(Debug, Clone)]
pub struct Agent {
    pub ue_id: usize,
    config: AgentConfig,
    reward_scheme: RewardScheme,
    max_rate_bits: f64,
    model: QNetwork,
    target: QNetwork,
    buffer: ReplayBuffer,
    training_enabled: bool,
    pending: Option<(Vec<f64>, usize)>,
    explore_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    diagnostics: AgentDiagnostics,
}

impl Agent {
    pub fn new(
        ue_id: usize,
        model: QNetwork,
        config: AgentConfig,
        reward_scheme: RewardScheme,
        max_rate_bits: u64,
        explore_rng: ChaCha8Rng,
        replay_rng: ChaCha8Rng,
    ) -> Self {
        Self {
            ue_id,
            buffer: ReplayBuffer::new(config.buffer_capacity),
            config,
            reward_scheme,
            max_rate_bits: max_rate_bits.max(1) as f64,
            target: model.clone(),
            model,
            training_enabled: true,
            pending: None,
            explore_rng,
            replay_rng,
            diagnostics: AgentDiagnostics::default(),
        }
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn model(&self) -> &QNetwork {
        &self.model
    }

    pub fn target_model(&self) -> &QNetwork {
        &self.target
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn training_enabled(&self) -> bool {
        self.training_enabled
    }

    pub fn diagnostics(&self) -> &AgentDiagnostics {
        &self.diagnostics
    }

    pub fn set_epsilon(&mut self, epsilon: f64) {
        self.config.epsilon = epsilon;
    }

    pub fn observe(&self, view: &UeView) -> Observation {
        build_observation(view, self.max_rate_bits as u64, self.config.age_cap)
    }

    /// Normalized reward for an own-slot outcome.
    pub fn reward(&self, feedback: SlotFeedback, rate_bits: f64) -> f64 {
        let raw = self
            .reward_scheme
            .reward(feedback, rate_bits, self.config.alpha);
        normalize_reward(raw, self.config.alpha, self.config.gamma, self.max_rate_bits)
    }

    /// Completes the previous transition with `last` (the feedback for the
    /// previous action) and `obs` as its successor, stores it when training
    /// is enabled, then picks the next action.
    pub fn step(
        &mut self,
        obs: &Observation,
        last: Option<(SlotFeedback, f64)>,
    ) -> Result<Action, AgentError> {
        let state = obs.to_vec();
        if state.len() != self.model.input_dim() {
            return Err(AgentError::ObservationSize {
                expected: self.model.input_dim(),
                got: state.len(),
            });
        }
        if let (Some((prev_state, prev_action)), Some((feedback, rate))) = (self.pending.take(), last)
        {
            if self.training_enabled {
                let reward = self.reward(feedback, rate);
                self.buffer.push(Experience {
                    state: prev_state,
                    action: prev_action,
                    reward,
                    next_state: state.clone(),
                });
            }
        }
        let action = select_action(&self.model, &state, self.config.epsilon, &mut self.explore_rng)?;
        self.pending = Some((state, action.index(self.model.channels())));
        Ok(action)
    }

    /// Runs `steps_per_epoch` gradient steps on uniformly sampled batches,
    /// then copies the online network to the target network.
    pub fn train_epoch(&mut self) -> EpochOutcome {
        if !self.training_enabled {
            return EpochOutcome::Disabled;
        }
        let batch_size = self.config.batch_size.max(1);
        if self.buffer.len() < batch_size {
            self.diagnostics.skipped_epochs += 1;
            return EpochOutcome::Skipped;
        }
        let gamma = self.config.gamma;
        let mut loss_sum = 0.0;
        for _ in 0..self.config.steps_per_epoch {
            let batch = self.buffer.sample(batch_size, &mut self.replay_rng);
            let step = td_loss(&self.model, &self.target, &batch, gamma).and_then(|loss| {
                let grads = td_gradient(&self.model, &self.target, &batch, gamma)?;
                self.model
                    .apply_gradients(&grads, self.config.learning_rate)
                    .map(|_| loss)
            });
            match step {
                Ok(loss) => {
                    loss_sum += loss;
                    self.diagnostics.train_steps += 1;
                }
                Err(_) => {
                    self.diagnostics.aborted_epochs += 1;
                    self.target = self.model.clone();
                    return EpochOutcome::Aborted;
                }
            }
        }
        self.target = self.model.clone();
        self.diagnostics.epochs += 1;
        let loss = loss_sum / self.config.steps_per_epoch.max(1) as f64;
        self.diagnostics.last_loss = Some(loss);
        EpochOutcome::Trained { loss }
    }

    /// Hands out a copy of the online network and stops training until a
    /// model is received.
    pub fn upload_model(&mut self) -> QNetwork {
        self.training_enabled = false;
        self.model.clone()
    }

    /// Replaces both networks, clears the replay buffer and any half-built
    /// transition, and re-enables training.
    pub fn receive_model(&mut self, model: QNetwork) -> Result<(), AgentError> {
        if !model.same_shape(&self.model) {
            return Err(AgentError::ShapeMismatch);
        }
        self.target = model.clone();
        self.model = model;
        self.buffer.clear();
        self.pending = None;
        self.training_enabled = true;
        Ok(())
    }

    /// Fresh start with a new model (used when a UE joins mid-run).
    pub fn reset(&mut self, model: QNetwork) -> Result<(), AgentError> {
        self.receive_model(model)
    }
}
