//! Evaluation metrics over slot outcomes (channel utilization, average
//! throughput, Jain's fairness index, convergence) and the two-player
//! expected-reward analysis for epsilon-greedy play.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env5g::{RbgStatus, SlotOutcome, SLOTS_PER_FRAME};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("metrics window contains no active RBG-slots")]
    EmptyWindow,
    #[error("fairness index undefined: no positive throughput")]
    AllZero,
    #[error("throughput values must be finite and non-negative")]
    InvalidThroughput,
    #[error("duration must be positive")]
    NonPositiveDuration,
}

/// Proportions of active RBG-slots in each state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CueBreakdown {
    pub utilized: f64,
    pub collided: f64,
    pub idle: f64,
}

/// Aggregates over a run of consecutive slots.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsWindow {
    pub slots: u64,
    pub utilized: u64,
    pub collided: u64,
    pub idle: u64,
    /// Indexed by UE id; grows on demand.
    pub ue_bits: Vec<u64>,
    /// Indexed by RBG id.
    pub rbg_bits: Vec<u64>,
}

impl MetricsWindow {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_outcomes<'a>(outcomes: impl IntoIterator<Item = &'a SlotOutcome>) -> Self {
        let mut w = Self::new();
        for o in outcomes {
            w.push(o);
        }
        w
    }

    pub fn push(&mut self, outcome: &SlotOutcome) {
        self.slots += 1;
        for s in &outcome.rbg_status {
            match s {
                RbgStatus::Utilized => self.utilized += 1,
                RbgStatus::Collided => self.collided += 1,
                RbgStatus::Idle => self.idle += 1,
                RbgStatus::Inactive => {}
            }
        }
        if self.rbg_bits.len() < outcome.rbg_status.len() {
            self.rbg_bits.resize(outcome.rbg_status.len(), 0);
        }
        for r in &outcome.ues {
            if self.ue_bits.len() <= r.ue_id {
                self.ue_bits.resize(r.ue_id + 1, 0);
            }
            self.ue_bits[r.ue_id] += r.transmitted_bits;
            if let Some(k) = r.action.channel() {
                if r.success {
                    self.rbg_bits[k] += r.transmitted_bits;
                }
            }
        }
    }

    /// Number of active RBG-slots (the CUE denominator).
    pub fn trials(&self) -> u64 {
        self.utilized + self.collided + self.idle
    }

    pub fn duration_s(&self) -> f64 {
        self.slots as f64 * 1e-3
    }

    pub fn cue(&self) -> Result<CueBreakdown, MetricsError> {
        let total = self.trials();
        if total == 0 {
            return Err(MetricsError::EmptyWindow);
        }
        let t = total as f64;
        let collided = self.collided as f64 / t;
        let idle = self.idle as f64 / t;
        Ok(CueBreakdown {
            utilized: 1.0 - collided - idle,
            collided,
            idle,
        })
    }

    /// Per-UE throughput in bits/s for the given UE ids.
    pub fn throughputs(&self, ues: &[usize]) -> Vec<f64> {
        let d = self.duration_s();
        ues.iter()
            .map(|&u| self.ue_bits.get(u).copied().unwrap_or(0) as f64 / d)
            .collect()
    }
}

/// Utilized / collided / idle proportions over the outcomes.
pub fn cue<'a>(outcomes: impl IntoIterator<Item = &'a SlotOutcome>) -> Result<CueBreakdown, MetricsError> {
    MetricsWindow::from_outcomes(outcomes).cue()
}

/// Mean per-UE throughput in bits/s: `(sum of bits / n_ues) / duration`.
pub fn avg_throughput(total_bits: u64, n_ues: usize, duration_s: f64) -> Result<f64, MetricsError> {
    if !(duration_s > 0.0) {
        return Err(MetricsError::NonPositiveDuration);
    }
    if n_ues == 0 {
        return Ok(0.0);
    }
    Ok(total_bits as f64 / n_ues as f64 / duration_s)
}

/// Jain's fairness index `(sum x)^2 / (n sum x^2)`.
pub fn jfi(throughputs: &[f64]) -> Result<f64, MetricsError> {
    if throughputs.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(MetricsError::InvalidThroughput);
    }
    let sum: f64 = throughputs.iter().sum();
    if !(sum > 0.0) {
        return Err(MetricsError::AllZero);
    }
    let sq: f64 = throughputs.iter().map(|x| x * x).sum();
    Ok((sum * sum / (throughputs.len() as f64 * sq)).min(1.0))
}

/// First slot from which every `window`-slot rolling collision proportion
/// stays below `threshold`. `None` when the final window is still above.
pub fn convergence_slot(outcomes: &[SlotOutcome], window: usize, threshold: f64) -> Option<u64> {
    if window == 0 || outcomes.len() < window {
        return None;
    }
    let collided: Vec<(u64, u64)> = outcomes
        .iter()
        .map(|o| (o.count(RbgStatus::Collided) as u64, o.active_rbgs() as u64))
        .collect();
    let (mut c, mut t) = (0u64, 0u64);
    let mut converged_from = Some(outcomes[0].slot);
    for (i, (ci, ti)) in collided.iter().enumerate() {
        c += ci;
        t += ti;
        if i >= window {
            c -= collided[i - window].0;
            t -= collided[i - window].1;
        }
        if i + 1 >= window {
            let p = if t == 0 { 0.0 } else { c as f64 / t as f64 };
            if p >= threshold {
                converged_from = outcomes.get(i + 1).map(|o| o.slot);
            }
        }
    }
    converged_from
}

/// Slot index of the first slot of `frame`.
pub fn frame_start(frame: u64) -> u64 {
    frame * SLOTS_PER_FRAME
}

/// Toy two-player, single-channel game: action 0 = request, 1 = silent.
pub const REQUEST: usize = 0;
pub const SILENT: usize = 1;

/// `rewards[a][b] = (reward of player A, reward of player B)` when A plays
/// `a` and B plays `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardTable {
    pub rewards: [[(f64, f64); 2]; 2],
}

impl RewardTable {
    /// Table induced by per-outcome rewards on one shared channel.
    pub fn single_channel(success: f64, collision: f64, silent: f64) -> Self {
        Self {
            rewards: [
                [(collision, collision), (success, silent)],
                [(silent, success), (silent, silent)],
            ],
        }
    }

    /// Rewards where collisions earn nothing.
    pub fn non_punishing() -> Self {
        Self::single_channel(1.0, 0.0, 0.0)
    }

    /// Rewards where collisions are punished with -1.
    pub fn punishing() -> Self {
        Self::single_channel(1.0, -1.0, 0.0)
    }
}

/// Expected rewards per intended action profile under epsilon-greedy play.
pub type ExpectationTable = RewardTable;

/// Each player takes its intended action with probability `1 - eps + eps/2`
/// and the other one with `eps/2`; entries are the resulting expectations.
pub fn reward_expectation_table(table: &RewardTable, epsilon: f64) -> ExpectationTable {
    let k = 2.0;
    let p = |intended: usize, actual: usize| {
        if intended == actual {
            1.0 - epsilon + epsilon / k
        } else {
            epsilon / k
        }
    };
    let mut out = [[(0.0, 0.0); 2]; 2];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            for a in 0..2 {
                for b in 0..2 {
                    let w = p(i, a) * p(j, b);
                    cell.0 += w * table.rewards[a][b].0;
                    cell.1 += w * table.rewards[a][b].1;
                }
            }
        }
    }
    RewardTable { rewards: out }
}

/// Profiles where neither player gains strictly by deviating alone.
pub fn nash_equilibria(table: &ExpectationTable) -> Vec<(usize, usize)> {
    let r = &table.rewards;
    let mut out = Vec::new();
    for i in 0..2 {
        for j in 0..2 {
            let a_ok = (0..2).all(|i2| r[i2][j].0 <= r[i][j].0);
            let b_ok = (0..2).all(|j2| r[i][j2].1 <= r[i][j].1);
            if a_ok && b_ok {
                out.push((i, j));
            }
        }
    }
    out
}
