//! Stochastic lane-change surrogate for single-lane rings.
//!
//! Cut-ins are modelled as insertions of a new vehicle into a sufficiently
//! large gap, cut-outs as deletions of a human vehicle. Each eligible vehicle
//! receives an independent Bernoulli trial whose probability is the expected
//! number of events per step divided by the number of candidates, so the
//! expected event count per step equals the configured rate.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{RingState, VehicleKind, VehicleState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LaneChangeConfig {
    /// Expected insertions (cut-ins) per simulation step.
    pub e_in: f64,
    /// Expected deletions (cut-outs) per simulation step.
    pub e_out: f64,
    /// Minimum bumper-to-bumper gap (m) in front of a follower for a cut-in.
    pub min_insert_gap: f64,
    pub enabled: bool,
}

impl Default for LaneChangeConfig {
    fn default() -> Self {
        Self { e_in: 0.0, e_out: 0.0, min_insert_gap: 14.0, enabled: false }
    }
}

impl LaneChangeConfig {
    pub fn with_rates(e_in: f64, e_out: f64) -> Self {
        Self { e_in, e_out, enabled: true, ..Self::default() }
    }

    /// Smallest admissible insertion threshold, `2·(s0 + length)`.
    pub fn min_gap_floor(s0: f64, vehicle_length: f64) -> f64 {
        2.0 * (s0 + vehicle_length)
    }

    pub fn validate(&self, s0: f64, vehicle_length: f64) -> Result<()> {
        if !(self.e_in >= 0.0 && self.e_out >= 0.0) {
            return Err(Error::InvalidConfig("lane_change rates must be >= 0".into()));
        }
        let floor = Self::min_gap_floor(s0, vehicle_length);
        if !(self.min_insert_gap >= floor) {
            return Err(Error::InvalidConfig(format!(
                "lane_change.min_insert_gap {} below 2·(s0 + length) = {floor}",
                self.min_insert_gap
            )));
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.enabled && (self.e_in > 0.0 || self.e_out > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Insertion,
    Deletion,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Insertion => "insertion",
            EventKind::Deletion => "deletion",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaneChangeEvent {
    pub kind: EventKind,
    /// Follower id for insertions, removed vehicle id for deletions.
    pub target: u64,
    /// Speed given to an inserted vehicle (m/s): the mean speed of the ring.
    pub entry_speed: f64,
    /// Follower headway after an insertion (m): half of its current headway.
    pub entry_gap: f64,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventOutcome {
    Applied,
    Rejected(&'static str),
}

impl EventOutcome {
    pub fn applied(&self) -> bool {
        matches!(self, EventOutcome::Applied)
    }
}

/// Vehicles whose headway admits a cut-in in front of them.
pub fn eligible_count(ring: &RingState, cfg: &LaneChangeConfig) -> usize {
    (0..ring.len()).filter(|&i| ring.headway(i) >= cfg.min_insert_gap).count()
}

/// Sample this step's lane-change events from the current ring state.
///
/// Insertion trials run over vehicles with headway ≥ `min_insert_gap`
/// (probability `e_in / n_t`); deletion trials over human vehicles
/// (probability `e_out / n_human`). Probabilities are capped at 1.
pub fn sample_events<R: Rng + ?Sized>(
    ring: &RingState,
    cfg: &LaneChangeConfig,
    rng: &mut R,
) -> Vec<LaneChangeEvent> {
    let mut events = Vec::new();
    if !cfg.enabled {
        return events;
    }
    let eligible = eligible_count(ring, cfg);
    let deletable = ring.vehicles.iter().filter(|v| v.kind == VehicleKind::Human).count();
    let p_enter = if eligible > 0 { (cfg.e_in / eligible as f64).min(1.0) } else { 0.0 };
    let p_exit = if deletable > 0 { (cfg.e_out / deletable as f64).min(1.0) } else { 0.0 };
    let mean_speed = ring.mean_speed();

    for (i, veh) in ring.vehicles.iter().enumerate() {
        let headway = ring.headway(i);
        if p_enter > 0.0 && headway >= cfg.min_insert_gap && rng.random::<f64>() < p_enter {
            events.push(LaneChangeEvent {
                kind: EventKind::Insertion,
                target: veh.id,
                entry_speed: mean_speed,
                entry_gap: headway / 2.0,
                time: ring.time,
            });
        }
        if p_exit > 0.0 && veh.kind == VehicleKind::Human && rng.random::<f64>() < p_exit {
            events.push(LaneChangeEvent {
                kind: EventKind::Deletion,
                target: veh.id,
                entry_speed: 0.0,
                entry_gap: 0.0,
                time: ring.time,
            });
        }
    }
    events
}

/// Insert a human vehicle with id `new_id` in front of the event's follower,
/// splitting the follower's current headway `g` into `g/2` (follower) and
/// `g/2 - length` (newcomer).
pub fn apply_insertion(
    ring: &mut RingState,
    event: &LaneChangeEvent,
    cfg: &LaneChangeConfig,
    new_id: u64,
    length: f64,
    s0: f64,
) -> EventOutcome {
    let Some(i) = ring.index_of(event.target) else {
        return reject("insertion follower no longer present");
    };
    let gap = ring.headway(i);
    if gap < cfg.min_insert_gap {
        return reject("insertion gap below threshold");
    }
    // keep the uniform-flow density feasible so V_eq stays defined
    let n = ring.len() + 1;
    if ring.circumference / n as f64 - length <= s0 {
        return reject("insertion would exceed jam density");
    }
    let follower = &ring.vehicles[i];
    let position = (follower.position + gap / 2.0 + length).rem_euclid(ring.circumference);
    let newcomer = VehicleState {
        id: new_id,
        position,
        speed: event.entry_speed.max(0.0),
        length,
        kind: VehicleKind::Human,
    };
    let at = ring.vehicles.partition_point(|v| v.position < position);
    ring.vehicles.insert(at, newcomer);
    EventOutcome::Applied
}

/// Remove a human vehicle. AVs are never removed.
pub fn apply_deletion(ring: &mut RingState, event: &LaneChangeEvent) -> EventOutcome {
    let Some(i) = ring.index_of(event.target) else {
        return reject("deletion target no longer present");
    };
    if ring.vehicles[i].kind == VehicleKind::Av {
        return reject("deletion target is an AV");
    }
    ring.vehicles.remove(i);
    EventOutcome::Applied
}

fn reject(reason: &'static str) -> EventOutcome {
    log::debug!("lane-change event rejected: {reason}");
    EventOutcome::Rejected(reason)
}

/// Write events as `time,kind,follower_id,entry_speed,entry_gap`. Deletions
/// leave the entry columns empty.
pub fn write_event_log<W: Write>(mut out: W, events: &[LaneChangeEvent]) -> Result<()> {
    writeln!(out, "time,kind,follower_id,entry_speed,entry_gap")?;
    for e in events {
        match e.kind {
            EventKind::Insertion => writeln!(
                out,
                "{},{},{},{},{}",
                e.time,
                e.kind.as_str(),
                e.target,
                e.entry_speed,
                e.entry_gap
            )?,
            EventKind::Deletion => writeln!(out, "{},{},{},,", e.time, e.kind.as_str(), e.target)?,
        }
    }
    Ok(())
}
