//! Scenario configuration, seed streams, the master simulation loop and
//! output writing.
//!
//! Slot order: membership events -> traffic -> CQI refresh (every 200
//! slots) -> observations and actions -> collision resolution -> rewards.
//! At the end of every `train_every_slots` slots each agent runs one training
//! epoch; at the end of every `shuffle_every_slots` slots (Hermes only) the
//! agents upload, the shufflers match, and models are delivered after
//! `shuffle_latency_slots` slots.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{observation_dim, Action, Agent, AgentConfig, AgentError, RewardScheme, SlotFeedback};
use crate::baselines::{pf_schedule, PfConfig, PfState};
use crate::env5g::{
    Application, EnvError, Environment, Membership, RadioConfig, RbgStatus, SlotOutcome,
    SLOTS_PER_FRAME,
};
use crate::metrics::{avg_throughput, convergence_slot, jfi, CueBreakdown, MetricsError, MetricsWindow};
use crate::nnet::QNetwork;
use crate::shuffle::{distribute, partition_ues, MatchingStrategy, MlaTable, ModelUpload, ShuffleError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Shuffle(#[from] ShuffleError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed time series: {0}")]
    Series(String),
}

fn config_err(msg: impl Into<String>) -> SimError {
    SimError::Config(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Hermes,
    Pf,
    Dqsa,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hermes" => Ok(Method::Hermes),
            "pf" => Ok(Method::Pf),
            "dqsa" => Ok(Method::Dqsa),
            other => Err(format!("unknown method {other:?} (expected hermes, pf or dqsa)")),
        }
    }
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Hermes => "hermes",
            Method::Pf => "pf",
            Method::Dqsa => "dqsa",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    AddUe,
    RemoveUe,
    AddRbg,
    RemoveRbg,
}

/// Membership change taking effect at the start of `slot`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioEvent {
    pub slot: u64,
    pub kind: EventKind,
    pub id: usize,
}

impl ScenarioEvent {
    pub fn membership(&self) -> Membership {
        match self.kind {
            EventKind::AddUe => Membership::AddUe(self.id),
            EventKind::RemoveUe => Membership::RemoveUe(self.id),
            EventKind::AddRbg => Membership::AddRbg(self.id),
            EventKind::RemoveRbg => Membership::RemoveRbg(self.id),
        }
    }
}

fn default_applications() -> Vec<Application> {
    vec![Application {
        packet_interval_slots: 1,
        packet_size_bytes: 1000,
    }]
}

/// Full description of one experiment. `n_ues` and `m_rbgs` are the maximum
/// population; `initial_ues` / `initial_rbgs` (default: all) are active at
/// slot 0 and the rest join through `events`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_ues: usize,
    pub m_rbgs: usize,
    pub frames: u64,
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Explicit UE distances from the gNB in meters.
    #[serde(default)]
    pub distances_m: Option<Vec<f64>>,
    /// Line deployment: UEs spaced `interval_d` apart with UE
    /// `floor((n-1)/2)` at `anchor_m`.
    #[serde(default)]
    pub interval_d: Option<f64>,
    #[serde(default)]
    pub anchor_m: Option<f64>,
    #[serde(default = "default_applications")]
    pub applications: Vec<Application>,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default = "default_train_every")]
    pub train_every_slots: u64,
    #[serde(default = "default_shuffle_every")]
    pub shuffle_every_slots: u64,
    #[serde(default)]
    pub shuffle_latency_slots: u64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub matching: MatchingStrategy,
    #[serde(default = "default_one")]
    pub num_shufflers: usize,
    #[serde(default)]
    pub initial_ues: Option<usize>,
    #[serde(default)]
    pub initial_rbgs: Option<usize>,
    #[serde(default)]
    pub events: Vec<ScenarioEvent>,
    #[serde(default)]
    pub radio: RadioConfig,
    #[serde(default)]
    pub pf: PfConfig,
    #[serde(default = "default_window_frames")]
    pub metrics_window_frames: u64,
    #[serde(default = "default_convergence_threshold")]
    pub convergence_threshold: f64,
}

fn default_seed() -> u64 {
    1
}
fn default_train_every() -> u64 {
    10
}
fn default_shuffle_every() -> u64 {
    50
}
fn default_lambda() -> f64 {
    1.0
}
fn default_one() -> usize {
    1
}
fn default_window_frames() -> u64 {
    100
}
fn default_convergence_threshold() -> f64 {
    0.1
}

pub const DEFAULT_INTERVAL_M: f64 = 20.0;
pub const DEFAULT_ANCHOR_M: f64 = 500.0;

/// Distances for a line deployment: `anchor + (i - floor((n-1)/2)) * d`.
pub fn line_deployment(n: usize, interval_d: f64, anchor_m: f64) -> Vec<f64> {
    let mid = n.saturating_sub(1) / 2;
    (0..n)
        .map(|i| anchor_m + (i as f64 - mid as f64) * interval_d)
        .collect()
}

impl ScenarioConfig {
    /// Minimal config with every other field at its default.
    pub fn new(n_ues: usize, m_rbgs: usize, frames: u64) -> Self {
        let doc = serde_json::json!({ "n_ues": n_ues, "m_rbgs": m_rbgs, "frames": frames });
        serde_json::from_value(doc).expect("minimal scenario deserializes")
    }

    pub fn total_slots(&self) -> u64 {
        self.frames * SLOTS_PER_FRAME
    }

    pub fn distances(&self) -> Vec<f64> {
        match &self.distances_m {
            Some(d) => d.clone(),
            None => line_deployment(
                self.n_ues,
                self.interval_d.unwrap_or(DEFAULT_INTERVAL_M),
                self.anchor_m.unwrap_or(DEFAULT_ANCHOR_M),
            ),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_ues == 0 {
            return Err(config_err("n_ues must be at least 1"));
        }
        if self.m_rbgs == 0 {
            return Err(config_err("m_rbgs must be at least 1"));
        }
        if self.frames == 0 {
            return Err(config_err("frames must be at least 1"));
        }
        if self.distances_m.is_some() && (self.interval_d.is_some() || self.anchor_m.is_some()) {
            return Err(config_err(
                "distances_m cannot be combined with interval_d/anchor_m",
            ));
        }
        let distances = self.distances();
        if distances.len() != self.n_ues {
            return Err(config_err(format!(
                "distances_m has {} entries for {} UEs",
                distances.len(),
                self.n_ues
            )));
        }
        let r = self.radio.coverage_radius_m;
        if !(r > 0.0) {
            return Err(config_err("radio.coverage_radius_m must be positive"));
        }
        if let Some((i, d)) = distances
            .iter()
            .enumerate()
            .find(|(_, d)| !(0.0..=r).contains(*d))
        {
            return Err(config_err(format!(
                "distance of UE {i} ({d} m) outside coverage radius {r} m"
            )));
        }
        self.radio.validate().map_err(|e| config_err(format!("radio: {e}")))?;
        for (i, app) in self.applications.iter().enumerate() {
            if app.packet_interval_slots == 0 || app.packet_size_bytes == 0 {
                return Err(config_err(format!(
                    "applications[{i}]: packet_interval_slots and packet_size_bytes must be positive"
                )));
            }
        }
        let a = &self.agent;
        if !(0.0..=1.0).contains(&a.epsilon) {
            return Err(config_err("agent.epsilon must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&a.gamma) {
            return Err(config_err("agent.gamma must lie in [0, 1)"));
        }
        if !(a.alpha >= 0.0 && a.alpha.is_finite()) {
            return Err(config_err("agent.alpha must be non-negative"));
        }
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
            return Err(config_err("agent.learning_rate must be positive"));
        }
        if a.hidden == 0 || a.batch_size == 0 || a.buffer_capacity == 0 || a.age_cap == 0 {
            return Err(config_err(
                "agent.hidden, agent.batch_size, agent.buffer_capacity and agent.age_cap must be positive",
            ));
        }
        if self.train_every_slots == 0 || self.shuffle_every_slots == 0 {
            return Err(config_err(
                "train_every_slots and shuffle_every_slots must be positive",
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(config_err("lambda must be non-negative"));
        }
        if self.num_shufflers == 0 {
            return Err(config_err("num_shufflers must be at least 1"));
        }
        if self.initial_ues.is_some_and(|n| n > self.n_ues) {
            return Err(config_err("initial_ues exceeds n_ues"));
        }
        if self.initial_rbgs.is_some_and(|m| m > self.m_rbgs) {
            return Err(config_err("initial_rbgs exceeds m_rbgs"));
        }
        if !(self.pf.beta > 0.0 && self.pf.beta <= 1.0) {
            return Err(config_err("pf.beta must lie in (0, 1]"));
        }
        if !(self.pf.initial_avg_bits > 0.0) {
            return Err(config_err("pf.initial_avg_bits must be positive"));
        }
        if self.pf.periodicity_slots == 0 {
            return Err(config_err("pf.periodicity_slots must be positive"));
        }
        if self.metrics_window_frames == 0 {
            return Err(config_err("metrics_window_frames must be positive"));
        }
        let horizon = self.total_slots();
        for (i, ev) in self.events.iter().enumerate() {
            if ev.slot >= horizon {
                return Err(config_err(format!(
                    "events[{i}]: slot {} beyond horizon of {horizon} slots",
                    ev.slot
                )));
            }
            let limit = match ev.kind {
                EventKind::AddUe | EventKind::RemoveUe => self.n_ues,
                EventKind::AddRbg | EventKind::RemoveRbg => self.m_rbgs,
            };
            if ev.id >= limit {
                return Err(config_err(format!("events[{i}]: id {} out of range", ev.id)));
            }
        }
        // Replay membership to catch duplicate adds/removes before running.
        let mut ues: Vec<bool> = (0..self.n_ues)
            .map(|u| u < self.initial_ues.unwrap_or(self.n_ues))
            .collect();
        let mut rbgs: Vec<bool> = (0..self.m_rbgs)
            .map(|r| r < self.initial_rbgs.unwrap_or(self.m_rbgs))
            .collect();
        for (i, ev) in self.sorted_events().iter().enumerate() {
            let (flags, want) = match ev.kind {
                EventKind::AddUe => (&mut ues, true),
                EventKind::RemoveUe => (&mut ues, false),
                EventKind::AddRbg => (&mut rbgs, true),
                EventKind::RemoveRbg => (&mut rbgs, false),
            };
            if flags[ev.id] == want {
                return Err(config_err(format!(
                    "events (sorted #{i}): {:?} {} has no effect at slot {}",
                    ev.kind, ev.id, ev.slot
                )));
            }
            flags[ev.id] = want;
        }
        Ok(())
    }

    fn sorted_events(&self) -> Vec<ScenarioEvent> {
        let mut events = self.events.clone();
        events.sort_by_key(|e| e.slot);
        events
    }
}

/// Parses and validates a JSON scenario document. Unknown keys are rejected.
pub fn load_scenario(document: &str) -> Result<ScenarioConfig, SimError> {
    let de = &mut serde_json::Deserializer::from_str(document);
    let config: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        config_err(format!("{path}: {}", e.into_inner()))
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_scenario_file(path: &Path) -> Result<ScenarioConfig, SimError> {
    let text = fs::read_to_string(path).map_err(|source| SimError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    load_scenario(&text)
}

/// Keyed random streams derived from one master seed. Every stream is a
/// ChaCha8 generator seeded with the master seed and placed on the stream
/// number given by the FNV-1a hash of its key, so streams never overlap and
/// do not depend on the order in which they are requested.
#[derive(Debug, Clone)]
pub struct SeedStreams {
    master: u64,
    renames: BTreeMap<String, String>,
}

pub const STREAM_CQI: &str = "env-cqi";
pub const STREAM_TRAFFIC: &str = "env-traffic";
pub const STREAM_PARTITION: &str = "shuffler-partition";

pub fn agent_init_key(ue: usize) -> String {
    format!("agent-init/{ue}")
}
pub fn agent_epsilon_key(ue: usize) -> String {
    format!("agent-epsilon/{ue}")
}
pub fn agent_replay_key(ue: usize) -> String {
    format!("agent-replay/{ue}")
}

fn fnv1a(key: &str) -> u64 {
    key.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl SeedStreams {
    pub fn new(master: u64) -> Self {
        Self {
            master,
            renames: BTreeMap::new(),
        }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Derive `from` under a different key.
    pub fn with_key(mut self, from: &str, to: &str) -> Self {
        self.renames.insert(from.to_string(), to.to_string());
        self
    }

    pub fn stream(&self, key: &str) -> ChaCha8Rng {
        let key = self.renames.get(key).map_or(key, String::as_str);
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(fnv1a(key));
        rng
    }
}

/// One shuffler's matching in one round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShuffleRecord {
    pub slot: u64,
    pub round: i64,
    pub shuffler: usize,
    /// `(receiving UE, uploading UE, lineage)`.
    pub assignments: Vec<(usize, usize, usize)>,
    pub bottleneck: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: Method,
    pub slots: u64,
    pub window_start_slot: u64,
    pub window_slots: u64,
    pub cue: CueBreakdown,
    pub avg_throughput_bps: f64,
    /// `None` when nobody transmitted in the window.
    pub jfi: Option<f64>,
    pub per_ue_throughput_bps: BTreeMap<usize, f64>,
    pub per_rbg_throughput_bps: Vec<f64>,
    /// First slot from which the rolling collision proportion stays below
    /// the configured threshold.
    pub convergence_slot: Option<u64>,
}

/// Summary over outcomes whose slot is `>= window_start`. UEs are those with
/// at least one record in the window.
pub fn summarize(
    method: Method,
    outcomes: &[SlotOutcome],
    window_start: u64,
    convergence_threshold: f64,
) -> Result<Summary, SimError> {
    let window: Vec<&SlotOutcome> = outcomes.iter().filter(|o| o.slot >= window_start).collect();
    let w = MetricsWindow::from_outcomes(window.iter().copied());
    let cue = w.cue()?;
    let mut ues: Vec<usize> = window.iter().flat_map(|o| o.ues.iter().map(|r| r.ue_id)).collect();
    ues.sort_unstable();
    ues.dedup();
    let tputs = w.throughputs(&ues);
    let total: u64 = ues.iter().map(|&u| w.ue_bits[u]).sum();
    let jfi = match jfi(&tputs) {
        Ok(j) => Some(j),
        Err(MetricsError::AllZero) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(Summary {
        method,
        slots: outcomes.len() as u64,
        window_start_slot: window_start,
        window_slots: w.slots,
        cue,
        avg_throughput_bps: avg_throughput(total, ues.len(), w.duration_s())?,
        jfi,
        per_ue_throughput_bps: ues.iter().copied().zip(tputs).collect(),
        per_rbg_throughput_bps: w
            .rbg_bits
            .iter()
            .map(|&b| b as f64 / w.duration_s())
            .collect(),
        convergence_slot: convergence_slot(outcomes, 100, convergence_threshold),
    })
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: ScenarioConfig,
    pub outcomes: Vec<SlotOutcome>,
    pub shuffles: Vec<ShuffleRecord>,
    pub summary: Summary,
    /// Initial model of every UE (index = UE id), for reproducibility checks.
    pub initial_models: Vec<QNetwork>,
    /// Training steps taken by each agent while waiting for a shuffled model.
    pub steps_while_waiting: Vec<u64>,
}

impl RunArtifacts {
    pub fn window_start(&self) -> u64 {
        window_start(&self.config)
    }
}

fn window_start(config: &ScenarioConfig) -> u64 {
    config
        .total_slots()
        .saturating_sub(config.metrics_window_frames * SLOTS_PER_FRAME)
}

pub fn run(config: &ScenarioConfig) -> Result<RunArtifacts, SimError> {
    run_with_streams(config, &SeedStreams::new(config.seed))
}

struct Pending {
    deliver_at: u64,
    ue: usize,
    lineage: usize,
    model: QNetwork,
}

pub fn run_with_streams(config: &ScenarioConfig, streams: &SeedStreams) -> Result<RunArtifacts, SimError> {
    config.validate()?;
    let n = config.n_ues;
    let m = config.m_rbgs;
    let mut env = Environment::new(
        config.radio.clone(),
        &config.distances(),
        vec![config.applications.clone(); n],
        m,
    )?;
    for ue in 0..config.initial_ues.unwrap_or(n) {
        env.set_ue_active(ue, true)?;
    }
    for rbg in 0..config.initial_rbgs.unwrap_or(m) {
        env.set_rbg_active(rbg, true)?;
    }
    let max_rate = config.radio.max_rate_bits();
    let mut cqi_rng = streams.stream(STREAM_CQI);
    let mut partition_rng = streams.stream(STREAM_PARTITION);

    let scheme = match config.method {
        Method::Dqsa => RewardScheme::NonNegative,
        _ => RewardScheme::Punishing,
    };
    let learning = config.method != Method::Pf;
    let shuffling = config.method == Method::Hermes;
    let dim = observation_dim(m);
    let mut init_rngs: Vec<ChaCha8Rng> = (0..n).map(|u| streams.stream(&agent_init_key(u))).collect();
    let mut agents: Vec<Agent> = (0..n)
        .map(|u| {
            let model = QNetwork::random(dim, config.agent.hidden, m, &mut init_rngs[u]);
            Agent::new(
                u,
                model,
                config.agent.clone(),
                scheme,
                max_rate,
                streams.stream(&agent_epsilon_key(u)),
                streams.stream(&agent_replay_key(u)),
            )
        })
        .collect();
    let initial_models: Vec<QNetwork> = agents.iter().map(|a| a.model().clone()).collect();
    let add_events = config.events.iter().filter(|e| e.kind == EventKind::AddUe).count();
    let mut lineage: Vec<usize> = (0..n).collect();
    let mut next_lineage = n;
    let mut mla = MlaTable::new(n + add_events);
    let mut pending: Vec<Pending> = Vec::new();
    let mut steps_while_waiting = vec![0u64; n];

    let mut pf = PfState::new(n, &config.pf);
    let mut pf_alloc: Vec<Option<usize>> = vec![None; m];

    let events = config.sorted_events();
    let mut next_event = 0;
    let slots = config.total_slots();
    let mut outcomes = Vec::with_capacity(slots as usize);
    let mut shuffles = Vec::new();
    let mut last_feedback: Vec<Option<(SlotFeedback, f64)>> = vec![None; n];

    for slot in 0..slots {
        while next_event < events.len() && events[next_event].slot == slot {
            let ev = events[next_event];
            env.reconfigure(ev.membership())?;
            match ev.kind {
                EventKind::AddUe => {
                    let model = QNetwork::random(dim, config.agent.hidden, m, &mut init_rngs[ev.id]);
                    agents[ev.id].reset(model)?;
                    lineage[ev.id] = next_lineage;
                    next_lineage += 1;
                    last_feedback[ev.id] = None;
                }
                EventKind::RemoveUe => {
                    pending.retain(|p| p.ue != ev.id);
                    last_feedback[ev.id] = None;
                }
                EventKind::AddRbg | EventKind::RemoveRbg => {}
            }
            next_event += 1;
        }

        while let Some(pos) = pending.iter().position(|p| p.deliver_at <= slot) {
            let p = pending.remove(pos);
            agents[p.ue].receive_model(p.model)?;
            lineage[p.ue] = p.lineage;
        }

        env.traffic_tick();
        if env.cqi_due() {
            env.cqi_tick(&mut cqi_rng);
        }

        let mut actions: Vec<Option<Action>> = vec![None; n];
        if learning {
            for ue in env.active_ues().collect::<Vec<_>>() {
                let obs = agents[ue].observe(&env.view(ue));
                actions[ue] = Some(agents[ue].step(&obs, last_feedback[ue])?);
            }
        } else {
            if slot % config.pf.periodicity_slots == 0 {
                let rates: Vec<Vec<u64>> = (0..n)
                    .map(|u| (0..m).map(|r| env.data_rate(u, r)).collect())
                    .collect();
                let buffers: Vec<u64> = (0..n)
                    .map(|u| if env.is_ue_active(u) { env.ue(u).map_or(0, |d| d.buffer_bits) } else { 0 })
                    .collect();
                pf_alloc = pf_schedule(&rates, &buffers, &pf);
            }
            for ue in env.active_ues().collect::<Vec<_>>() {
                actions[ue] = Some(Action::Silent);
            }
            for (rbg, owner) in pf_alloc.iter().enumerate() {
                if let Some(ue) = owner {
                    if env.is_ue_active(*ue) {
                        actions[*ue] = Some(Action::Request(rbg));
                    }
                }
            }
        }

        let outcome = env.resolve_slot(&actions)?;
        if learning {
            for r in &outcome.ues {
                let fb = match (r.action, r.success) {
                    (_, true) => SlotFeedback::Success,
                    (Action::Request(_), false) => SlotFeedback::Failed,
                    (Action::Silent, false) => SlotFeedback::Silent,
                };
                last_feedback[r.ue_id] = Some((fb, r.rate_bits as f64));
            }
        } else {
            let mut served = vec![0.0; n];
            for r in &outcome.ues {
                served[r.ue_id] = r.transmitted_bits as f64;
            }
            pf.update(&served);
        }
        outcomes.push(outcome);

        let end = slot + 1;
        if learning && end % config.train_every_slots == 0 {
            for ue in env.active_ues().collect::<Vec<_>>() {
                let before = agents[ue].diagnostics().train_steps;
                let waiting = !agents[ue].training_enabled();
                agents[ue].train_epoch();
                if waiting {
                    steps_while_waiting[ue] += agents[ue].diagnostics().train_steps - before;
                }
            }
        }
        if shuffling && end % config.shuffle_every_slots == 0 {
            let participants: Vec<usize> = env
                .active_ues()
                .filter(|&u| agents[u].training_enabled())
                .collect();
            let groups = partition_ues(&participants, config.num_shufflers, &mut partition_rng);
            let round = mla.current_round();
            for (s, group) in groups.iter().enumerate() {
                if group.is_empty() {
                    continue;
                }
                let uploads: Vec<ModelUpload> = group
                    .iter()
                    .map(|&u| ModelUpload {
                        ue_id: u,
                        lineage: lineage[u],
                        model: agents[u].upload_model(),
                    })
                    .collect();
                let out = distribute(&uploads, &mut mla, config.lambda, config.matching)?;
                shuffles.push(ShuffleRecord {
                    slot: end,
                    round,
                    shuffler: s,
                    assignments: out
                        .assignments
                        .iter()
                        .map(|&(ue, idx)| (ue, uploads[idx].ue_id, uploads[idx].lineage))
                        .collect(),
                    bottleneck: out.bottleneck,
                    total: out.total,
                });
                for &(ue, idx) in &out.assignments {
                    pending.push(Pending {
                        deliver_at: end + config.shuffle_latency_slots,
                        ue,
                        lineage: uploads[idx].lineage,
                        model: uploads[idx].model.clone(),
                    });
                }
            }
            mla.advance_round();
            if config.shuffle_latency_slots == 0 {
                for p in pending.drain(..) {
                    agents[p.ue].receive_model(p.model)?;
                    lineage[p.ue] = p.lineage;
                }
            }
        }
        env.advance();
    }

    let summary = summarize(
        config.method,
        &outcomes,
        window_start(config),
        config.convergence_threshold,
    )?;
    Ok(RunArtifacts {
        config: config.clone(),
        outcomes,
        shuffles,
        summary,
        initial_models,
        steps_while_waiting,
    })
}

pub const TIMESERIES_FILE: &str = "timeseries.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.resolved.json";
pub const SHUFFLES_FILE: &str = "shuffles.json";

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SimError + '_ {
    move |source| SimError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// CSV with one row per (slot, active UE): `slot,ue_id,action,success,bits`
/// followed by one status column per RBG. `action` is 1..=M for channels and
/// M+1 for silence.
pub fn write_timeseries<W: Write>(out: W, outcomes: &[SlotOutcome], rbgs: usize) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let mut header: Vec<String> = ["slot", "ue_id", "action", "success", "bits"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..rbgs).map(|k| format!("rbg_{k}")));
    w.write_record(&header)?;
    for o in outcomes {
        let statuses: Vec<&str> = o.rbg_status.iter().map(|s| s.as_str()).collect();
        for r in &o.ues {
            let mut row = vec![
                o.slot.to_string(),
                r.ue_id.to_string(),
                r.action.code(rbgs).to_string(),
                u8::from(r.success).to_string(),
                r.transmitted_bits.to_string(),
            ];
            row.extend(statuses.iter().map(|s| s.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SimError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_outputs(artifacts: &RunArtifacts, out_dir: &Path) -> Result<(), SimError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let ts = out_dir.join(TIMESERIES_FILE);
    let file = fs::File::create(&ts).map_err(io_err(&ts))?;
    write_timeseries(io::BufWriter::new(file), &artifacts.outcomes, artifacts.config.m_rbgs)
        .map_err(|e| SimError::Io {
            path: ts.clone(),
            source: io::Error::other(e),
        })?;
    write_json(&out_dir.join(SUMMARY_FILE), &artifacts.summary)?;
    write_json(&out_dir.join(CONFIG_FILE), &artifacts.config)?;
    write_json(&out_dir.join(SHUFFLES_FILE), &artifacts.shuffles)?;
    Ok(())
}

fn parse_status(s: &str) -> Result<RbgStatus, SimError> {
    Ok(match s {
        "idle" => RbgStatus::Idle,
        "utilized" => RbgStatus::Utilized,
        "collided" => RbgStatus::Collided,
        "inactive" => RbgStatus::Inactive,
        other => return Err(SimError::Series(format!("unknown RBG status {other:?}"))),
    })
}

/// Rebuilds slot outcomes from a time series. Slots without any active UE
/// have no rows and are not recovered.
pub fn read_timeseries<R: io::Read>(input: R) -> Result<Vec<SlotOutcome>, SimError> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr
        .headers()
        .map_err(|e| SimError::Series(e.to_string()))?
        .clone();
    if header.len() < 5 || &header[0] != "slot" {
        return Err(SimError::Series("unexpected header".into()));
    }
    let rbgs = header.len() - 5;
    let mut outcomes: Vec<SlotOutcome> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| SimError::Series(e.to_string()))?;
        let num = |i: usize| -> Result<u64, SimError> {
            rec[i]
                .parse()
                .map_err(|_| SimError::Series(format!("row {}: bad number in column {i}", line + 1)))
        };
        let slot = num(0)?;
        let ue_id = num(1)? as usize;
        let action = Action::from_code(num(2)? as usize, rbgs)
            .ok_or_else(|| SimError::Series(format!("row {}: bad action", line + 1)))?;
        let success = num(3)? == 1;
        let bits = num(4)?;
        if outcomes.last().map_or(true, |o| o.slot != slot) {
            let statuses = (5..5 + rbgs)
                .map(|i| parse_status(&rec[i]))
                .collect::<Result<Vec<_>, _>>()?;
            outcomes.push(SlotOutcome {
                slot,
                rbg_status: statuses,
                ues: Vec::new(),
            });
        }
        outcomes
            .last_mut()
            .expect("pushed above")
            .ues
            .push(crate::env5g::UeSlotRecord {
                ue_id,
                action,
                success,
                transmitted_bits: bits,
                rate_bits: 0,
            });
    }
    Ok(outcomes)
}

/// Recomputes the summary of a run directory from its time series and
/// resolved config.
pub fn analyze(dir: &Path) -> Result<Summary, SimError> {
    let config_path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&config_path).map_err(io_err(&config_path))?;
    let config: ScenarioConfig = serde_json::from_str(&text).map_err(|e| config_err(e.to_string()))?;
    let ts = dir.join(TIMESERIES_FILE);
    let file = fs::File::open(&ts).map_err(io_err(&ts))?;
    let mut outcomes = read_timeseries(io::BufReader::new(file))?;
    // Restore slots that had no active UE so windows and rolling statistics
    // line up with the original run.
    outcomes = fill_missing_slots(outcomes, config.total_slots(), config.m_rbgs);
    summarize(
        config.method,
        &outcomes,
        window_start(&config),
        config.convergence_threshold,
    )
}

fn fill_missing_slots(outcomes: Vec<SlotOutcome>, slots: u64, rbgs: usize) -> Vec<SlotOutcome> {
    let mut by_slot: BTreeMap<u64, SlotOutcome> = outcomes.into_iter().map(|o| (o.slot, o)).collect();
    (0..slots)
        .map(|s| {
            by_slot.remove(&s).unwrap_or_else(|| SlotOutcome {
                slot: s,
                rbg_status: vec![RbgStatus::Idle; rbgs],
                ues: Vec::new(),
            })
        })
        .collect()
}
