//! Uplink 5G slot environment: CQI processes per (UE, RB), data rates per
//! RBG, application traffic, collision resolution and dynamic membership.
//!
//! Per-slot call order, driven by the simulation loop:
//! `traffic_tick` -> `cqi_tick` (every `cqi_period_slots`) -> observations ->
//! actions -> `resolve_slot` -> `advance`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::Action;

pub const SLOTS_PER_FRAME: u64 = 10;
pub const RBS_PER_RBG: usize = 16;
pub const SUBCARRIERS_PER_RB: usize = 12;
pub const SYMBOLS_PER_SLOT: usize = 14;
pub const DMRS_SYMBOLS: usize = 2;
pub const MIN_CQI: u8 = 1;
pub const MAX_CQI: u8 = 15;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("UE distance {distance} m outside coverage radius {radius} m")]
    OutOfCoverage { distance: f64, radius: f64 },
    #[error("UE {0} does not exist")]
    UnknownUe(usize),
    #[error("RBG {0} does not exist")]
    UnknownRbg(usize),
    #[error("UE {0} is already active")]
    UeAlreadyActive(usize),
    #[error("UE {0} is already inactive")]
    UeAlreadyInactive(usize),
    #[error("RBG {0} is already active")]
    RbgAlreadyActive(usize),
    #[error("RBG {0} is already inactive")]
    RbgAlreadyInactive(usize),
    #[error("expected {expected} action slots, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("active UE {0} supplied no action")]
    MissingAction(usize),
    #[error("efficiency table must have 15 finite non-negative entries")]
    BadEfficiencyTable,
}

/// Application on a UE: adds `packet_size_bytes` to the buffer every
/// `packet_interval_slots` slots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Application {
    pub packet_interval_slots: u64,
    pub packet_size_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadioConfig {
    pub coverage_radius_m: f64,
    pub cqi_period_slots: u64,
    pub cqi_fluctuation: u8,
    /// Bits per symbol for CQI 1..=15.
    pub efficiency: Vec<f64>,
}

impl Default for RadioConfig {
    fn default() -> Self {
        Self {
            coverage_radius_m: 1000.0,
            cqi_period_slots: 200,
            cqi_fluctuation: 2,
            efficiency: (1..=15).map(|q| 0.15 * q as f64 + 0.4).collect(),
        }
    }
}

impl RadioConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.efficiency.len() != MAX_CQI as usize
            || !self.efficiency.iter().all(|e| e.is_finite() && *e >= 0.0)
        {
            return Err(EnvError::BadEfficiencyTable);
        }
        Ok(())
    }

    pub fn efficiency_of(&self, cqi: u8) -> f64 {
        self.efficiency[(cqi.clamp(MIN_CQI, MAX_CQI) - 1) as usize]
    }

    /// Largest per-slot rate any UE can reach on one RBG.
    pub fn max_rate_bits(&self) -> u64 {
        (MIN_CQI..=MAX_CQI)
            .map(|q| bits_per_slot(self.efficiency_of(q)))
            .max()
            .unwrap_or(0)
    }
}

/// `floor(eff * (symbols - dmrs) * subcarriers * RBs)`.
pub fn bits_per_slot(efficiency: f64) -> u64 {
    let resource_elements = (SYMBOLS_PER_SLOT - DMRS_SYMBOLS) * SUBCARRIERS_PER_RB * RBS_PER_RBG;
    (efficiency * resource_elements as f64).floor() as u64
}

fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Distance-determined CQI: `clamp(round(15 * (1 - d / R)), 1, 15)`.
pub fn base_cqi_from_distance(distance_m: f64, coverage_radius_m: f64) -> Result<u8, EnvError> {
    if !(0.0..=coverage_radius_m).contains(&distance_m) {
        return Err(EnvError::OutOfCoverage {
            distance: distance_m,
            radius: coverage_radius_m,
        });
    }
    let raw = round_half_up(f64::from(MAX_CQI) * (1.0 - distance_m / coverage_radius_m));
    Ok(raw.clamp(f64::from(MIN_CQI), f64::from(MAX_CQI)) as u8)
}

/// `clamp(base + delta, 1, 15)`.
pub fn perturb_cqi(base: u8, delta: i32) -> u8 {
    (i32::from(base) + delta).clamp(i32::from(MIN_CQI), i32::from(MAX_CQI)) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RbgStatus {
    Idle,
    Utilized,
    Collided,
    Inactive,
}

impl RbgStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RbgStatus::Idle => "idle",
            RbgStatus::Utilized => "utilized",
            RbgStatus::Collided => "collided",
            RbgStatus::Inactive => "inactive",
        }
    }
}

/// What one UE saw in one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct UeSlotRecord {
    pub ue_id: usize,
    pub action: Action,
    pub success: bool,
    pub transmitted_bits: u64,
    /// Achievable rate on the requested RBG (0 when silent or inactive RBG).
    pub rate_bits: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotOutcome {
    pub slot: u64,
    pub rbg_status: Vec<RbgStatus>,
    /// One record per active UE, in UE-id order.
    pub ues: Vec<UeSlotRecord>,
}

impl SlotOutcome {
    pub fn record(&self, ue_id: usize) -> Option<&UeSlotRecord> {
        self.ues.iter().find(|r| r.ue_id == ue_id)
    }

    pub fn count(&self, status: RbgStatus) -> usize {
        self.rbg_status.iter().filter(|s| **s == status).count()
    }

    pub fn active_rbgs(&self) -> usize {
        self.rbg_status.len() - self.count(RbgStatus::Inactive)
    }
}

/// Local information a UE has about itself. Nothing here depends on other
/// UEs' actions except through the UE's own success bit.
#[derive(Debug, Clone, PartialEq)]
pub struct UeView {
    pub ue_id: usize,
    /// Achievable bits/slot per RBG; 0 for inactive RBGs.
    pub rates: Vec<u64>,
    pub buffer_bits: u64,
    pub last_action: Option<Action>,
    pub last_success: bool,
    /// Slots since this UE last requested each RBG (saturating; `u32::MAX`
    /// means never).
    pub request_age: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct UeDevice {
    pub ue_id: usize,
    pub active: bool,
    pub distance_m: f64,
    pub base_cqi: u8,
    pub buffer_bits: u64,
    pub applications: Vec<Application>,
    /// CQI per RB, `rbgs * RBS_PER_RBG` entries.
    cqi: Vec<u8>,
    last_action: Option<Action>,
    last_success: bool,
    request_age: Vec<u32>,
    pub offered_bits: u64,
    pub delivered_bits: u64,
}

#[derive(Debug, Clone)]
pub struct Environment {
    radio: RadioConfig,
    ues: Vec<UeDevice>,
    rbg_active: Vec<bool>,
    slot: u64,
}

impl Environment {
    /// All UEs and RBGs start inactive; use [`Environment::set_ue_active`]
    /// and [`Environment::set_rbg_active`] or [`Environment::reconfigure`].
    pub fn new(
        radio: RadioConfig,
        distances_m: &[f64],
        applications: Vec<Vec<Application>>,
        rbgs: usize,
    ) -> Result<Self, EnvError> {
        radio.validate()?;
        let ues = distances_m
            .iter()
            .enumerate()
            .map(|(ue_id, &d)| {
                let base = base_cqi_from_distance(d, radio.coverage_radius_m)?;
                Ok(UeDevice {
                    ue_id,
                    active: false,
                    distance_m: d,
                    base_cqi: base,
                    buffer_bits: 0,
                    applications: applications.get(ue_id).cloned().unwrap_or_default(),
                    cqi: vec![base; rbgs * RBS_PER_RBG],
                    last_action: None,
                    last_success: false,
                    request_age: vec![u32::MAX; rbgs],
                    offered_bits: 0,
                    delivered_bits: 0,
                })
            })
            .collect::<Result<Vec<_>, EnvError>>()?;
        Ok(Self {
            radio,
            ues,
            rbg_active: vec![false; rbgs],
            slot: 0,
        })
    }

    pub fn radio(&self) -> &RadioConfig {
        &self.radio
    }

    pub fn slot(&self) -> u64 {
        self.slot
    }

    pub fn frame(&self) -> u64 {
        self.slot / SLOTS_PER_FRAME
    }

    pub fn num_ues(&self) -> usize {
        self.ues.len()
    }

    pub fn num_rbgs(&self) -> usize {
        self.rbg_active.len()
    }

    pub fn ue(&self, ue_id: usize) -> Option<&UeDevice> {
        self.ues.get(ue_id)
    }

    pub fn ue_mut(&mut self, ue_id: usize) -> Option<&mut UeDevice> {
        self.ues.get_mut(ue_id)
    }

    pub fn is_ue_active(&self, ue_id: usize) -> bool {
        self.ues.get(ue_id).is_some_and(|u| u.active)
    }

    pub fn is_rbg_active(&self, rbg: usize) -> bool {
        self.rbg_active.get(rbg).copied().unwrap_or(false)
    }

    pub fn active_ues(&self) -> impl Iterator<Item = usize> + '_ {
        self.ues.iter().filter(|u| u.active).map(|u| u.ue_id)
    }

    pub fn active_rbg_count(&self) -> usize {
        self.rbg_active.iter().filter(|a| **a).count()
    }

    pub fn set_ue_active(&mut self, ue_id: usize, active: bool) -> Result<(), EnvError> {
        let ue = self.ues.get_mut(ue_id).ok_or(EnvError::UnknownUe(ue_id))?;
        match (ue.active, active) {
            (true, true) => Err(EnvError::UeAlreadyActive(ue_id)),
            (false, false) => Err(EnvError::UeAlreadyInactive(ue_id)),
            _ => {
                ue.active = active;
                ue.last_action = None;
                ue.last_success = false;
                ue.request_age.fill(u32::MAX);
                Ok(())
            }
        }
    }

    pub fn set_rbg_active(&mut self, rbg: usize, active: bool) -> Result<(), EnvError> {
        let flag = self
            .rbg_active
            .get_mut(rbg)
            .ok_or(EnvError::UnknownRbg(rbg))?;
        match (*flag, active) {
            (true, true) => Err(EnvError::RbgAlreadyActive(rbg)),
            (false, false) => Err(EnvError::RbgAlreadyInactive(rbg)),
            _ => {
                *flag = active;
                Ok(())
            }
        }
    }

    pub fn reconfigure(&mut self, change: Membership) -> Result<(), EnvError> {
        match change {
            Membership::AddUe(id) => self.set_ue_active(id, true),
            Membership::RemoveUe(id) => self.set_ue_active(id, false),
            Membership::AddRbg(id) => self.set_rbg_active(id, true),
            Membership::RemoveRbg(id) => self.set_rbg_active(id, false),
        }
    }

    /// Adds application traffic for the current slot.
    pub fn traffic_tick(&mut self) {
        let slot = self.slot;
        for ue in self.ues.iter_mut().filter(|u| u.active) {
            for app in &ue.applications {
                if app.packet_interval_slots > 0 && slot % app.packet_interval_slots == 0 {
                    let bits = app.packet_size_bytes * 8;
                    ue.buffer_bits += bits;
                    ue.offered_bits += bits;
                }
            }
        }
    }

    /// True when the current slot is a CQI refresh boundary.
    pub fn cqi_due(&self) -> bool {
        self.radio.cqi_period_slots > 0 && self.slot % self.radio.cqi_period_slots == 0
    }

    /// Redraws every per-(UE, RB) CQI as the distance base plus a uniform
    /// integer offset in `[-f, f]`. Draws for every UE (active or not) so the
    /// stream does not depend on membership.
    pub fn cqi_tick<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let f = i32::from(self.radio.cqi_fluctuation);
        for ue in &mut self.ues {
            for c in &mut ue.cqi {
                let delta = rng.gen_range(-f..=f);
                *c = perturb_cqi(ue.base_cqi, delta);
            }
        }
    }

    pub fn cqi(&self, ue_id: usize, rb: usize) -> u8 {
        self.ues[ue_id].cqi[rb]
    }

    pub fn set_cqi(&mut self, ue_id: usize, rb: usize, cqi: u8) {
        self.ues[ue_id].cqi[rb] = cqi.clamp(MIN_CQI, MAX_CQI);
    }

    /// Mean CQI over the RBG's RBs, rounded half-up.
    pub fn rbg_cqi(&self, ue_id: usize, rbg: usize) -> u8 {
        let rbs = &self.ues[ue_id].cqi[rbg * RBS_PER_RBG..(rbg + 1) * RBS_PER_RBG];
        let sum: u32 = rbs.iter().map(|&c| u32::from(c)).sum();
        // (2*sum + n) / (2n) is round-half-up of sum/n in integers
        let n = RBS_PER_RBG as u32;
        ((2 * sum + n) / (2 * n)) as u8
    }

    /// Achievable bits/slot for the UE on the RBG; 0 if either is inactive.
    pub fn data_rate(&self, ue_id: usize, rbg: usize) -> u64 {
        if !self.is_ue_active(ue_id) || !self.is_rbg_active(rbg) {
            return 0;
        }
        bits_per_slot(self.radio.efficiency_of(self.rbg_cqi(ue_id, rbg)))
    }

    pub fn view(&self, ue_id: usize) -> UeView {
        let ue = &self.ues[ue_id];
        UeView {
            ue_id,
            rates: (0..self.num_rbgs()).map(|r| self.data_rate(ue_id, r)).collect(),
            buffer_bits: ue.buffer_bits,
            last_action: ue.last_action,
            last_success: ue.last_success,
            request_age: ue.request_age.clone(),
        }
    }

    /// Resolves one slot. `actions[ue]` must be `Some` for every active UE;
    /// entries for inactive UEs are ignored.
    pub fn resolve_slot(&mut self, actions: &[Option<Action>]) -> Result<SlotOutcome, EnvError> {
        if actions.len() != self.ues.len() {
            return Err(EnvError::ActionCount {
                expected: self.ues.len(),
                got: actions.len(),
            });
        }
        let m = self.num_rbgs();
        let mut requests = vec![0usize; m];
        for ue in self.ues.iter().filter(|u| u.active) {
            match actions[ue.ue_id] {
                None => return Err(EnvError::MissingAction(ue.ue_id)),
                Some(Action::Request(k)) if k < m => requests[k] += 1,
                Some(_) => {}
            }
        }
        let rbg_status: Vec<RbgStatus> = (0..m)
            .map(|k| match (self.rbg_active[k], requests[k]) {
                (false, _) => RbgStatus::Inactive,
                (true, 0) => RbgStatus::Idle,
                (true, 1) => RbgStatus::Utilized,
                (true, _) => RbgStatus::Collided,
            })
            .collect();

        let mut records = Vec::new();
        for ue_id in 0..self.ues.len() {
            if !self.ues[ue_id].active {
                continue;
            }
            let action = actions[ue_id].expect("checked above");
            let (rate, success) = match action {
                Action::Request(k) if k < m => (
                    self.data_rate(ue_id, k),
                    rbg_status[k] == RbgStatus::Utilized,
                ),
                _ => (0, false),
            };
            let ue = &mut self.ues[ue_id];
            let sent = if success { ue.buffer_bits.min(rate) } else { 0 };
            ue.buffer_bits -= sent;
            ue.delivered_bits += sent;
            for age in &mut ue.request_age {
                *age = age.saturating_add(1);
            }
            if let Action::Request(k) = action {
                if k < m {
                    ue.request_age[k] = 0;
                }
            }
            ue.last_action = Some(action);
            ue.last_success = success;
            records.push(UeSlotRecord {
                ue_id,
                action,
                success,
                transmitted_bits: sent,
                rate_bits: rate,
            });
        }
        Ok(SlotOutcome {
            slot: self.slot,
            rbg_status,
            ues: records,
        })
    }

    /// Moves the clock to the next slot.
    pub fn advance(&mut self) {
        self.slot += 1;
    }
}

/// Membership change applied at a slot boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum Membership {
    AddUe(usize),
    RemoveUe(usize),
    AddRbg(usize),
    RemoveRbg(usize),
}
