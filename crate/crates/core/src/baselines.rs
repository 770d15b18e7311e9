//! Reference schedulers: centralized proportional fairness and the reward
//! used by the shuffle-free DQSA agents.

use serde::{Deserialize, Serialize};

use crate::agent::SlotFeedback;

/// DQSA reward: `+x` on success, 0 otherwise.
pub fn dqsa_reward(feedback: SlotFeedback, rate_bits: f64) -> f64 {
    match feedback {
        SlotFeedback::Success => rate_bits,
        SlotFeedback::Failed | SlotFeedback::Silent => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PfConfig {
    /// EMA weight of the newest served rate.
    pub beta: f64,
    /// Warm-start historical average, bits/slot.
    pub initial_avg_bits: f64,
    pub max_rbg_per_ue: usize,
    /// Reschedule every this many slots; the allocation is held in between.
    pub periodicity_slots: u64,
}

impl Default for PfConfig {
    fn default() -> Self {
        Self {
            beta: 0.01,
            initial_avg_bits: 1.0,
            max_rbg_per_ue: 1,
            periodicity_slots: 1,
        }
    }
}

/// Historical average served rate per UE.
#[derive(Debug, Clone, PartialEq)]
pub struct PfState {
    pub avg_rate: Vec<f64>,
    pub beta: f64,
    pub max_rbg_per_ue: usize,
}

impl PfState {
    pub fn new(ues: usize, config: &PfConfig) -> Self {
        Self {
            avg_rate: vec![config.initial_avg_bits; ues],
            beta: config.beta,
            max_rbg_per_ue: config.max_rbg_per_ue,
        }
    }

    /// `avg <- (1 - beta) avg + beta actual`.
    pub fn update(&mut self, served_bits: &[f64]) {
        for (avg, &actual) in self.avg_rate.iter_mut().zip(served_bits) {
            *avg = (1.0 - self.beta) * *avg + self.beta * actual;
        }
    }
}

/// Assigns RBGs in index order, each to the eligible UE with the largest
/// `rate / avg_rate` (ties to the lowest UE index). A UE is eligible when its
/// buffer is non-empty, it is below the per-UE cap, and its rate on the RBG
/// is positive. `rates[ue][rbg]` in bits/slot; `None` in the result means
/// the RBG stays idle.
pub fn pf_schedule(rates: &[Vec<u64>], buffers: &[u64], state: &PfState) -> Vec<Option<usize>> {
    let rbgs = rates.first().map_or(0, Vec::len);
    let mut allocated = vec![0usize; rates.len()];
    (0..rbgs)
        .map(|rbg| {
            let mut best: Option<(usize, f64)> = None;
            for (ue, ue_rates) in rates.iter().enumerate() {
                let rate = ue_rates[rbg];
                if buffers[ue] == 0 || allocated[ue] >= state.max_rbg_per_ue || rate == 0 {
                    continue;
                }
                let metric = rate as f64 / state.avg_rate[ue];
                if best.map_or(true, |(_, m)| metric > m) {
                    best = Some((ue, metric));
                }
            }
            best.map(|(ue, _)| {
                allocated[ue] += 1;
                ue
            })
        })
        .collect()
}
