//! Open multi-lane highway with a downstream speed-limit bottleneck, used to
//! evaluate ring-trained policies zero-shot.
//!
//! Each step spawns inflow at `x = 0`, resolves human lane changes one
//! vehicle at a time, then integrates every lane with explicit Euler. Vehicles
//! past the end of the segment leave; colliding pairs are removed and counted.
//! AVs execute the policy only inside the control region and drive exactly
//! like humans elsewhere.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{free_road_accel, idm_accel, IdmParams, VehicleKind, VehicleState, DEFAULT_VEHICLE_LENGTH};
use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::ring_env::{AvActuator, FrameHistory, FRAME_DIM};
use crate::rng::{self, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LaneChangeModel {
    pub politeness: f64,
    /// Minimum net acceleration advantage (m/s²).
    pub threshold: f64,
    /// Largest deceleration a lane change may impose on the new follower (m/s²).
    pub safe_decel: f64,
}

impl Default for LaneChangeModel {
    fn default() -> Self {
        Self { politeness: 0.3, threshold: 0.2, safe_decel: 4.0 }
    }
}

/// Desired speed is capped at `speed_limit` for vehicles with `x ≥ start`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Bottleneck {
    pub start: f64,
    pub speed_limit: f64,
}

impl Default for Bottleneck {
    fn default() -> Self {
        Self { start: 1400.0, speed_limit: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HighwayConfig {
    pub lanes: usize,
    pub segment_length: f64,
    /// Vehicles per hour per lane offered at the upstream boundary.
    pub inflow_rate: f64,
    /// Upper bound on the speed of newly spawned vehicles (m/s).
    pub entry_speed: f64,
    pub dt: f64,
    pub warmup_duration: f64,
    pub eval_duration: f64,
    pub penetration: f64,
    /// Tag every `round(1/penetration)`-th spawn as an AV instead of drawing.
    pub round_robin: bool,
    pub control_region: [f64; 2],
    pub bottleneck: Bottleneck,
    pub lc_model: LaneChangeModel,
    /// Speeds below this count as stopped (m/s).
    pub v_stop: f64,
    pub idm: IdmParams,
    pub vehicle_length: f64,
    /// Emergency braking limit applied to human accelerations (m/s²).
    pub max_decel: f64,
    pub action_bounds: [f64; 2],
    pub av_failsafe: bool,
    pub obs_frames: usize,
    pub obs_sample_period: f64,
}

impl Default for HighwayConfig {
    fn default() -> Self {
        Self {
            lanes: 2,
            segment_length: 1600.0,
            inflow_rate: 2000.0,
            entry_speed: 25.0,
            dt: 0.4,
            warmup_duration: 3600.0,
            eval_duration: 600.0,
            penetration: 0.05,
            round_robin: true,
            control_region: [300.0, 1300.0],
            bottleneck: Bottleneck::default(),
            lc_model: LaneChangeModel::default(),
            v_stop: 0.3,
            idm: IdmParams::default(),
            vehicle_length: DEFAULT_VEHICLE_LENGTH,
            max_decel: 9.0,
            action_bounds: [-3.0, 1.3],
            av_failsafe: true,
            obs_frames: 5,
            obs_sample_period: 2.0,
        }
    }
}

impl HighwayConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        self.idm.validate()?;
        if self.lanes == 0 {
            return bad("highway.lanes must be >= 1".into());
        }
        if !(self.segment_length > 0.0) || !(self.dt > 0.0) {
            return bad("highway.segment_length and highway.dt must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.penetration) {
            return bad(format!("highway.penetration must be in [0, 1], got {}", self.penetration));
        }
        let [on, off] = self.control_region;
        if !(0.0 <= on && on <= off && off <= self.segment_length) {
            return bad(format!("highway.control_region [{on}, {off}] must satisfy 0 <= x_on <= x_off <= segment_length"));
        }
        if !(self.inflow_rate >= 0.0) || !(self.entry_speed >= 0.0) {
            return bad("highway.inflow_rate and highway.entry_speed must be >= 0".into());
        }
        if !(self.warmup_duration >= 0.0 && self.eval_duration >= 0.0) {
            return bad("highway durations must be >= 0".into());
        }
        if !(self.bottleneck.speed_limit > 0.0) {
            return bad("highway.bottleneck.speed_limit must be > 0".into());
        }
        if !(self.lc_model.politeness >= 0.0 && self.lc_model.safe_decel > 0.0) || self.lc_model.threshold.is_nan() {
            return bad("highway.lc_model has invalid parameters".into());
        }
        if !(self.v_stop >= 0.0 && self.max_decel > 0.0 && self.vehicle_length > 0.0) {
            return bad("highway.v_stop, max_decel and vehicle_length must be positive".into());
        }
        if self.obs_frames == 0 || self.frame_stride() == 0 {
            return bad("highway.obs_frames and highway.obs_sample_period must be positive".into());
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_duration / self.dt).round() as usize
    }

    pub fn eval_steps(&self) -> usize {
        (self.eval_duration / self.dt).round() as usize
    }

    pub fn frame_stride(&self) -> usize {
        (self.obs_sample_period / self.dt).round() as usize
    }

    pub fn obs_dim(&self) -> usize {
        FRAME_DIM * self.obs_frames
    }

    /// IDM parameters for a vehicle at `position`, with the bottleneck limit.
    pub fn idm_at(&self, position: f64) -> IdmParams {
        if position >= self.bottleneck.start {
            IdmParams { v0: self.idm.v0.min(self.bottleneck.speed_limit), ..self.idm }
        } else {
            self.idm
        }
    }

    pub fn in_control_region(&self, position: f64) -> bool {
        position >= self.control_region[0] && position < self.control_region[1]
    }

    fn actuator(&self) -> AvActuator {
        AvActuator { bounds: self.action_bounds, failsafe: self.av_failsafe, margin: self.idm.s0, dt: self.dt }
    }
}

#[derive(Debug, Clone)]
pub struct HighwayVehicle {
    pub state: VehicleState,
    pub lane: usize,
    /// Total time spent below `v_stop` since spawning (s).
    pub stopped_time: f64,
    history: FrameHistory,
}

/// Per-lane vehicle lists sorted by increasing position; the leader of entry
/// `i` is entry `i + 1`.
#[derive(Debug, Clone)]
pub struct HighwayState {
    pub lanes: Vec<Vec<HighwayVehicle>>,
    pub time: f64,
    pub steps: usize,
    pub spawned: u64,
    pub exited: u64,
    pub collision_removed: u64,
    pub collisions: u64,
    pub lane_changes: u64,
    credit: Vec<f64>,
    next_id: u64,
    tagged: u64,
}

impl HighwayState {
    pub fn vehicle_count(&self) -> usize {
        self.lanes.iter().map(Vec::len).sum()
    }

    pub fn vehicles(&self) -> impl Iterator<Item = &HighwayVehicle> {
        self.lanes.iter().flatten()
    }

    pub fn find(&self, id: u64) -> Option<&HighwayVehicle> {
        self.vehicles().find(|v| v.state.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepReport {
    pub spawned: u64,
    pub exited: u64,
    pub lane_changes: u64,
    pub collisions: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HighwayTraceRow {
    pub time: f64,
    pub id: u64,
    pub kind: VehicleKind,
    pub lane: usize,
    pub position: f64,
    pub speed: f64,
    pub accel: f64,
}

pub const HIGHWAY_TRACE_HEADER: &str = "time,vehicle_id,kind,position,speed,accel,lane";

pub fn write_highway_trace<W: Write>(mut out: W, rows: &[HighwayTraceRow]) -> Result<()> {
    writeln!(out, "{HIGHWAY_TRACE_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{},{},{}", r.time, r.id, r.kind, r.position, r.speed, r.accel, r.lane)?;
    }
    Ok(())
}

/// Highway simulation with its random stream and optional trajectory record.
#[derive(Debug, Clone)]
pub struct HighwaySim {
    cfg: HighwayConfig,
    state: HighwayState,
    rng: SimRng,
    recording: Option<Vec<HighwayTraceRow>>,
}

/// What a vehicle sees ahead in its lane: `(gap, leader speed)`, or `None`
/// on an empty road.
fn lead_view(lane: &[HighwayVehicle], idx: usize) -> Option<(f64, f64)> {
    lane.get(idx + 1).map(|l| (l.state.position - l.state.length - lane[idx].state.position, l.state.speed))
}

fn accel_with(v: f64, ahead: Option<(f64, f64)>, p: &IdmParams, noise: f64) -> f64 {
    match ahead {
        Some((gap, v_lead)) => {
            idm_accel(v, v_lead, gap.max(1e-6), p, noise).expect("headway clamped positive")
        }
        None => free_road_accel(v, p, noise),
    }
}

impl HighwaySim {
    pub fn new(cfg: HighwayConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let state = HighwayState {
            lanes: vec![Vec::new(); cfg.lanes],
            time: 0.0,
            steps: 0,
            spawned: 0,
            exited: 0,
            collision_removed: 0,
            collisions: 0,
            lane_changes: 0,
            credit: vec![0.0; cfg.lanes],
            next_id: 0,
            tagged: 0,
        };
        Ok(Self { cfg, state, rng: rng::seeded(seed), recording: None })
    }

    pub fn config(&self) -> &HighwayConfig {
        &self.cfg
    }

    pub fn state(&self) -> &HighwayState {
        &self.state
    }

    pub fn start_recording(&mut self) {
        self.recording.get_or_insert_with(Vec::new);
    }

    pub fn take_recording(&mut self) -> Option<Vec<HighwayTraceRow>> {
        self.recording.take()
    }

    /// Place a vehicle directly (scenario construction and tests).
    pub fn insert_vehicle(&mut self, lane: usize, mut vehicle: VehicleState) -> Result<u64> {
        if lane >= self.cfg.lanes {
            return Err(Error::InvalidConfig(format!("lane {lane} does not exist")));
        }
        vehicle.id = self.state.next_id;
        self.state.next_id += 1;
        let id = vehicle.id;
        self.push_vehicle(lane, vehicle);
        self.refresh_histories();
        Ok(id)
    }

    fn push_vehicle(&mut self, lane: usize, state: VehicleState) {
        let frame = [state.speed, f64::INFINITY, state.speed];
        let history = FrameHistory::new(frame, self.cfg.obs_frames, self.cfg.frame_stride());
        let veh = HighwayVehicle { state, lane, stopped_time: 0.0, history };
        let lane_vec = &mut self.state.lanes[lane];
        let at = lane_vec.partition_point(|v| v.state.position < veh.state.position);
        lane_vec.insert(at, veh);
    }

    /// `(v, h, v_lead)` with the segment end standing in for a missing leader.
    fn frame(&self, lane: usize, idx: usize) -> [f64; FRAME_DIM] {
        let lane_vec = &self.state.lanes[lane];
        let me = &lane_vec[idx].state;
        match lead_view(lane_vec, idx) {
            Some((gap, v_lead)) => [me.speed, gap, v_lead],
            None => [me.speed, (self.cfg.segment_length - me.position).max(0.0), me.speed],
        }
    }

    /// Replace every initial (placeholder) frame with the current one.
    fn refresh_histories(&mut self) {
        for lane in 0..self.cfg.lanes {
            for idx in 0..self.state.lanes[lane].len() {
                if self.state.lanes[lane][idx].history.observation().as_slice()[1].is_infinite() {
                    let frame = self.frame(lane, idx);
                    let (n, stride) = (self.cfg.obs_frames, self.cfg.frame_stride());
                    self.state.lanes[lane][idx].history = FrameHistory::new(frame, n, stride);
                }
            }
        }
    }

    /// Upstream boundary: accumulate per-lane credit and spawn when the entry
    /// is clear. Credit is capped at one pending vehicle.
    pub fn spawn_inflow(&mut self) -> u64 {
        let per_step = self.cfg.inflow_rate / 3600.0 * self.cfg.dt;
        let mut spawned = 0;
        for lane in 0..self.cfg.lanes {
            self.state.credit[lane] = (self.state.credit[lane] + per_step).min(1.0);
            if self.state.credit[lane] < 1.0 {
                continue;
            }
            let p = &self.cfg.idm;
            let (speed, clear) = match self.state.lanes[lane].first() {
                None => (self.cfg.entry_speed, true),
                Some(rear) => {
                    let v = self.cfg.entry_speed.min(rear.state.speed);
                    let rear_bumper = rear.state.position - rear.state.length;
                    (v, rear_bumper >= p.s0 + v * p.time_headway)
                }
            };
            if !clear {
                continue;
            }
            self.state.credit[lane] -= 1.0;
            let kind = self.next_kind();
            let id = self.state.next_id;
            self.state.next_id += 1;
            let vehicle = VehicleState { id, position: 0.0, speed, length: self.cfg.vehicle_length, kind };
            self.push_vehicle(lane, vehicle);
            spawned += 1;
        }
        self.state.spawned += spawned;
        if spawned > 0 {
            self.refresh_histories();
        }
        spawned
    }

    fn next_kind(&mut self) -> VehicleKind {
        let pen = self.cfg.penetration;
        let is_av = if self.cfg.round_robin {
            pen > 0.0 && {
                let period = (1.0 / pen).round().max(1.0) as u64;
                (self.state.tagged + 1) % period == 0
            }
        } else {
            self.rng.random::<f64>() < pen
        };
        self.state.tagged += 1;
        if is_av {
            VehicleKind::Av
        } else {
            VehicleKind::Human
        }
    }

    fn is_policy_driven(&self, veh: &VehicleState, policy_active: bool) -> bool {
        policy_active && veh.is_av() && self.cfg.in_control_region(veh.position)
    }

    /// Evaluate a move of `lane[idx]` into `target`. Returns the incentive
    /// when the move is safe and worthwhile.
    fn lane_change_incentive(&self, lane: usize, idx: usize, target: usize) -> Option<f64> {
        let lc = &self.cfg.lc_model;
        let s0 = self.cfg.idm.s0;
        let me = &self.state.lanes[lane][idx].state;
        let tgt = &self.state.lanes[target];
        let at = tgt.partition_point(|v| v.state.position < me.position);
        let new_leader = tgt.get(at);
        let new_follower = at.checked_sub(1).map(|k| &tgt[k]);
        if let Some(l) = new_leader {
            if l.state.position - l.state.length - me.position < s0 {
                return None;
            }
        }
        if let Some(f) = new_follower {
            if me.position - me.length - f.state.position < s0 {
                return None;
            }
        }
        let p_me = self.cfg.idm_at(me.position).noiseless();
        let current = accel_with(me.speed, lead_view(&self.state.lanes[lane], idx), &p_me, 0.0);
        let ahead = new_leader.map(|l| (l.state.position - l.state.length - me.position, l.state.speed));
        let projected = accel_with(me.speed, ahead, &p_me, 0.0);
        let mut loss = 0.0;
        if let Some(f) = new_follower {
            let p_f = self.cfg.idm_at(f.state.position).noiseless();
            let before = accel_with(f.state.speed, lead_view(tgt, at - 1), &p_f, 0.0);
            let after = accel_with(f.state.speed, Some((me.position - me.length - f.state.position, me.speed)), &p_f, 0.0);
            if after < -lc.safe_decel {
                return None;
            }
            loss = before - after;
        }
        let incentive = projected - current - lc.politeness * loss;
        (incentive > lc.threshold).then_some(incentive)
    }

    /// Sequential lane-change pass; every vehicle moves at most once.
    fn resolve_lane_changes(&mut self, policy_active: bool) -> u64 {
        if self.cfg.lanes < 2 {
            return 0;
        }
        let mut order: Vec<(u64, usize, f64)> = self
            .state
            .vehicles()
            .map(|v| (v.state.id, v.lane, v.state.position))
            .collect();
        order.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.1.cmp(&b.1)));
        let mut moved = 0;
        for (id, lane, _) in order {
            let Some(idx) = self.state.lanes[lane].iter().position(|v| v.state.id == id) else {
                continue;
            };
            if self.is_policy_driven(&self.state.lanes[lane][idx].state, policy_active) {
                continue;
            }
            let candidates = [lane.checked_sub(1), (lane + 1 < self.cfg.lanes).then_some(lane + 1)];
            let best = candidates
                .into_iter()
                .flatten()
                .filter_map(|t| self.lane_change_incentive(lane, idx, t).map(|inc| (t, inc)))
                .max_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((target, _)) = best {
                let mut veh = self.state.lanes[lane].remove(idx);
                veh.lane = target;
                let tgt = &mut self.state.lanes[target];
                let at = tgt.partition_point(|v| v.state.position < veh.state.position);
                tgt.insert(at, veh);
                moved += 1;
            }
        }
        self.state.lane_changes += moved;
        moved
    }

    /// Accelerations for every vehicle, lane by lane. Noise is drawn for every
    /// vehicle whatever its type so streams align across policies.
    fn accelerations(&mut self, policy: Option<&PolicyParams>) -> Result<Vec<Vec<f64>>> {
        let actuator = self.cfg.actuator();
        let mut out = Vec::with_capacity(self.cfg.lanes);
        for lane in 0..self.cfg.lanes {
            let mut accels = Vec::with_capacity(self.state.lanes[lane].len());
            for idx in 0..self.state.lanes[lane].len() {
                let noise = self.cfg.idm.sample_noise(&mut self.rng);
                let lane_vec = &self.state.lanes[lane];
                let veh = &lane_vec[idx];
                let a = match policy {
                    Some(p) if self.is_policy_driven(&veh.state, true) => {
                        let obs = veh.history.observation();
                        let (command, _) = p.forward(obs.as_slice())?;
                        let [v, h, v_lead] = self.frame(lane, idx);
                        actuator.execute(command, v, v_lead, h)
                    }
                    _ => {
                        let p = self.cfg.idm_at(veh.state.position);
                        accel_with(veh.state.speed, lead_view(lane_vec, idx), &p, noise).max(-self.cfg.max_decel)
                    }
                };
                accels.push(a);
            }
            out.push(accels);
        }
        Ok(out)
    }

    /// Advance one step. `policy = None` runs every vehicle as a human.
    pub fn step(&mut self, policy: Option<&PolicyParams>) -> Result<StepReport> {
        if let Some(p) = policy {
            if p.obs_dim() != self.cfg.obs_dim() {
                return Err(Error::DimensionMismatch { expected: self.cfg.obs_dim(), got: p.obs_dim() });
            }
        }
        let mut report = StepReport { spawned: self.spawn_inflow(), ..StepReport::default() };
        report.lane_changes = self.resolve_lane_changes(policy.is_some());
        let accels = self.accelerations(policy)?;
        let dt = self.cfg.dt;
        let time = self.state.time + dt;

        for (lane, lane_accels) in accels.iter().enumerate() {
            let old: Vec<(f64, f64, f64)> = self.state.lanes[lane]
                .iter()
                .map(|v| (v.state.position, v.state.speed, v.state.length))
                .collect();
            let mut crashed = HashSet::new();
            for (i, veh) in self.state.lanes[lane].iter_mut().enumerate() {
                let v = (veh.state.speed + lane_accels[i] * dt).max(0.0);
                veh.state.speed = v;
                veh.state.position += v * dt;
            }
            let lane_vec = &self.state.lanes[lane];
            for i in 0..lane_vec.len().saturating_sub(1) {
                let gap = old[i + 1].0 - old[i + 1].2 - old[i].0;
                let new_gap = gap + (lane_vec[i + 1].state.speed - lane_vec[i].state.speed) * dt;
                if new_gap <= 0.0 {
                    crashed.insert(i);
                    crashed.insert(i + 1);
                    report.collisions += 1;
                    log::warn!(
                        "collision in lane {lane} at t={time:.1}s between vehicles {} and {}",
                        lane_vec[i].state.id,
                        lane_vec[i + 1].state.id
                    );
                }
            }
            if let Some(rows) = self.recording.as_mut() {
                for (i, veh) in self.state.lanes[lane].iter().enumerate() {
                    rows.push(HighwayTraceRow {
                        time,
                        id: veh.state.id,
                        kind: veh.state.kind,
                        lane,
                        position: veh.state.position,
                        speed: veh.state.speed,
                        accel: lane_accels[i],
                    });
                }
            }
            let length = self.cfg.segment_length;
            let mut k = 0;
            let mut exited = 0;
            self.state.lanes[lane].retain(|veh| {
                let keep = !crashed.contains(&k) && veh.state.position < length;
                if !crashed.contains(&k) && veh.state.position >= length {
                    exited += 1;
                }
                k += 1;
                keep
            });
            report.exited += exited;
            self.state.collision_removed += crashed.len() as u64;
        }

        self.state.exited += report.exited;
        self.state.collisions += report.collisions;
        self.state.time = time;
        self.state.steps += 1;
        for lane in 0..self.cfg.lanes {
            for idx in 0..self.state.lanes[lane].len() {
                let frame = self.frame(lane, idx);
                let veh = &mut self.state.lanes[lane][idx];
                if veh.state.speed < self.cfg.v_stop {
                    veh.stopped_time += dt;
                }
                veh.history.push(frame);
            }
        }
        Ok(report)
    }
}

/// Stopped time, speed and outflow accumulated over an evaluation window.
#[derive(Debug, Clone, Default)]
pub struct DelayAccumulator {
    dt: f64,
    v_stop: f64,
    stopped: HashMap<u64, f64>,
    speed_sum: f64,
    vehicle_steps: u64,
    outflow: u64,
    steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayMetrics {
    /// Seconds below `v_stop` per vehicle present during the window.
    pub avg_stopped_time: f64,
    pub mean_speed: f64,
    /// Outflow in vehicles per hour.
    pub throughput: f64,
    pub vehicles: usize,
    pub collisions: u64,
}

impl DelayAccumulator {
    pub fn new(dt: f64, v_stop: f64) -> Self {
        Self { dt, v_stop, ..Self::default() }
    }

    /// Account one step: the speeds of vehicles present after the step and
    /// the number that left the segment during it.
    pub fn record(&mut self, vehicles: impl IntoIterator<Item = (u64, f64)>, exited: u64) {
        for (id, speed) in vehicles {
            let entry = self.stopped.entry(id).or_insert(0.0);
            if speed < self.v_stop {
                *entry += self.dt;
            }
            self.speed_sum += speed;
            self.vehicle_steps += 1;
        }
        self.outflow += exited;
        self.steps += 1;
    }

    pub fn finish(&self, collisions: u64) -> Result<DelayMetrics> {
        if self.steps == 0 || self.stopped.is_empty() {
            return Err(Error::Empty("evaluation window"));
        }
        let duration = self.steps as f64 * self.dt;
        Ok(DelayMetrics {
            avg_stopped_time: self.stopped.values().sum::<f64>() / self.stopped.len() as f64,
            mean_speed: self.speed_sum / self.vehicle_steps as f64,
            throughput: self.outflow as f64 * 3600.0 / duration,
            vehicles: self.stopped.len(),
            collisions,
        })
    }
}

/// Lane changes observed over a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneChangeRate {
    pub events: u64,
    pub steps: u64,
    /// Lane changes per simulation step on the whole highway.
    pub per_step: f64,
    /// Lane changes per vehicle per second.
    pub per_vehicle_second: f64,
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub metrics: DelayMetrics,
    pub lane_changes: LaneChangeRate,
    pub trace: Option<Vec<HighwayTraceRow>>,
}

/// Warm-up followed by the evaluation window. The policy (if any) drives
/// AVs in the control region for the whole run; the trajectory record and
/// all statistics cover the evaluation window only.
pub fn run_transfer(cfg: &HighwayConfig, policy: Option<&PolicyParams>, seed: u64, record: bool) -> Result<TransferOutcome> {
    let mut sim = HighwaySim::new(cfg.clone(), seed)?;
    for _ in 0..cfg.warmup_steps() {
        sim.step(policy)?;
    }
    if record {
        sim.start_recording();
    }
    let mut acc = DelayAccumulator::new(cfg.dt, cfg.v_stop);
    let (mut lc, mut collisions, mut vehicle_steps) = (0, 0, 0u64);
    for _ in 0..cfg.eval_steps() {
        let report = sim.step(policy)?;
        lc += report.lane_changes;
        collisions += report.collisions;
        vehicle_steps += sim.state().vehicle_count() as u64;
        acc.record(sim.state().vehicles().map(|v| (v.state.id, v.state.speed)), report.exited);
    }
    let steps = cfg.eval_steps() as u64;
    let lane_changes = measure_lc_rate(lc, steps, vehicle_steps, cfg.dt);
    Ok(TransferOutcome { metrics: acc.finish(collisions)?, lane_changes, trace: sim.take_recording() })
}

/// Lane-change frequency from raw counts.
pub fn measure_lc_rate(events: u64, steps: u64, vehicle_steps: u64, dt: f64) -> LaneChangeRate {
    let per_step = if steps == 0 { 0.0 } else { events as f64 / steps as f64 };
    let exposure = vehicle_steps as f64 * dt;
    let per_vehicle_second = if exposure > 0.0 { events as f64 / exposure } else { 0.0 };
    LaneChangeRate { events, steps, per_step, per_vehicle_second }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::MlpLayout;
    use approx::assert_abs_diff_eq;

    fn quiet(cfg: HighwayConfig) -> HighwayConfig {
        HighwayConfig { idm: cfg.idm.noiseless(), ..cfg }
    }

    fn closed(lanes: usize) -> HighwayConfig {
        quiet(HighwayConfig { lanes, inflow_rate: 0.0, ..HighwayConfig::default() })
    }

    #[test]
    fn round_robin_tags_every_twentieth_vehicle() {
        let cfg = HighwayConfig { inflow_rate: 3000.0, ..HighwayConfig::default() };
        let mut sim = HighwaySim::new(cfg, 1).unwrap();
        let mut kinds = HashMap::new();
        for _ in 0..1500 {
            sim.step(None).unwrap();
            for v in sim.state().vehicles() {
                kinds.insert(v.state.id, v.state.kind);
            }
        }
        let n = sim.state().spawned;
        assert!(n >= 200);
        for id in 0..n {
            let expect = if (id + 1) % 20 == 0 { VehicleKind::Av } else { VehicleKind::Human };
            if let Some(k) = kinds.get(&id) {
                assert_eq!(*k, expect, "vehicle {id}");
            }
        }
    }

    #[test]
    fn zero_inflow_never_spawns() {
        let mut sim = HighwaySim::new(closed(2), 3).unwrap();
        for _ in 0..200 {
            sim.step(None).unwrap();
        }
        assert_eq!(sim.state().spawned, 0);
        assert_eq!(sim.state().vehicle_count(), 0);
    }

    #[test]
    fn blocked_entry_defers_spawn() {
        let cfg = quiet(HighwayConfig { lanes: 1, inflow_rate: 3600.0, ..HighwayConfig::default() });
        let mut sim = HighwaySim::new(cfg, 3).unwrap();
        sim.insert_vehicle(0, VehicleState::human(0, 6.0, 0.0)).unwrap();
        let before = sim.state().spawned;
        assert_eq!(sim.spawn_inflow(), 0);
        assert_eq!(sim.spawn_inflow(), 0);
        assert_eq!(sim.state().spawned, before);
        assert!(sim.state().credit[0] <= 1.0);
    }

    #[test]
    fn blocked_lane_moves_to_empty_lane() {
        let mut sim = HighwaySim::new(closed(2), 1).unwrap();
        let id = sim.insert_vehicle(0, VehicleState::human(0, 100.0, 20.0)).unwrap();
        sim.insert_vehicle(0, VehicleState::human(0, 120.0, 0.0)).unwrap();
        sim.resolve_lane_changes(false);
        assert_eq!(sim.state().find(id).unwrap().lane, 1);
    }

    #[test]
    fn unsafe_gap_vetoes_change() {
        let mut sim = HighwaySim::new(closed(2), 1).unwrap();
        let id = sim.insert_vehicle(0, VehicleState::human(0, 100.0, 10.0)).unwrap();
        sim.insert_vehicle(0, VehicleState::human(0, 115.0, 0.0)).unwrap();
        // fast follower in the target lane would have to brake far beyond b_safe
        sim.insert_vehicle(1, VehicleState::human(0, 85.0, 30.0)).unwrap();
        sim.resolve_lane_changes(false);
        assert_eq!(sim.state().find(id).unwrap().lane, 0);
    }

    #[test]
    fn symmetric_lanes_do_not_change() {
        let mut sim = HighwaySim::new(closed(2), 1).unwrap();
        for lane in 0..2 {
            sim.insert_vehicle(lane, VehicleState::human(0, 100.0, 15.0)).unwrap();
            sim.insert_vehicle(lane, VehicleState::human(0, 130.0, 15.0)).unwrap();
        }
        assert_eq!(sim.resolve_lane_changes(false), 0);
    }

    #[test]
    fn gating_equivalence_with_empty_control_region() {
        let base = HighwayConfig { warmup_duration: 120.0, eval_duration: 120.0, ..HighwayConfig::default() };
        let gated = HighwayConfig { control_region: [500.0, 500.0], ..base.clone() };
        let human = HighwayConfig { penetration: 0.0, ..base };
        let policy = PolicyParams::init(MlpLayout::new(15, &[8]), &mut rng::seeded(1));
        let a = run_transfer(&gated, Some(&policy), 4, true).unwrap();
        let b = run_transfer(&human, None, 4, true).unwrap();
        let strip = |rows: Vec<HighwayTraceRow>| -> Vec<(u64, u64, u64)> {
            rows.iter().map(|r| (r.id, r.position.to_bits(), r.speed.to_bits())).collect()
        };
        assert_eq!(strip(a.trace.unwrap()), strip(b.trace.unwrap()));
    }

    #[test]
    fn av_outside_region_drives_like_human_twin() {
        let cfg = HighwayConfig { inflow_rate: 0.0, control_region: [500.0, 1000.0], ..HighwayConfig::default() };
        let policy = PolicyParams::init(MlpLayout::new(15, &[8]), &mut rng::seeded(1));
        let mut with_av = HighwaySim::new(cfg.clone(), 9).unwrap();
        with_av.insert_vehicle(0, VehicleState::av(0, 100.0, 12.0)).unwrap();
        with_av.insert_vehicle(0, VehicleState::human(0, 130.0, 10.0)).unwrap();
        let mut twin = HighwaySim::new(cfg, 9).unwrap();
        twin.insert_vehicle(0, VehicleState::human(0, 100.0, 12.0)).unwrap();
        twin.insert_vehicle(0, VehicleState::human(0, 130.0, 10.0)).unwrap();
        let a = with_av.accelerations(Some(&policy)).unwrap();
        let b = twin.accelerations(None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn free_flow_reaches_desired_speed() {
        let cfg = HighwayConfig {
            inflow_rate: 400.0,
            entry_speed: 30.0,
            bottleneck: Bottleneck { start: 1600.0, speed_limit: 30.0 },
            warmup_duration: 300.0,
            eval_duration: 300.0,
            ..HighwayConfig::default()
        };
        let out = run_transfer(&cfg, None, 2, false).unwrap();
        assert!((out.metrics.mean_speed - 30.0).abs() < 1.0, "{}", out.metrics.mean_speed);
        assert_eq!(out.metrics.avg_stopped_time, 0.0);
        assert_eq!(out.metrics.collisions, 0);
    }

    #[test]
    fn single_lane_and_disabled_model_have_no_lane_changes() {
        let short = HighwayConfig { warmup_duration: 200.0, eval_duration: 200.0, ..HighwayConfig::default() };
        let one = HighwayConfig { lanes: 1, ..short.clone() };
        assert_eq!(run_transfer(&one, None, 1, false).unwrap().lane_changes.per_step, 0.0);
        let off = HighwayConfig { lc_model: LaneChangeModel { threshold: f64::INFINITY, ..LaneChangeModel::default() }, ..short };
        assert_eq!(run_transfer(&off, None, 1, false).unwrap().lane_changes.per_step, 0.0);
    }

    #[test]
    fn vehicle_conservation_and_ordering() {
        let cfg = HighwayConfig { inflow_rate: 2200.0, ..HighwayConfig::default() };
        let mut sim = HighwaySim::new(cfg, 6).unwrap();
        let mut stopped: HashMap<u64, f64> = HashMap::new();
        for _ in 0..1500 {
            sim.step(None).unwrap();
            let s = sim.state();
            assert_eq!(s.spawned - s.exited - s.collision_removed, s.vehicle_count() as u64);
            for lane in &s.lanes {
                assert!(lane.windows(2).all(|w| w[0].state.position < w[1].state.position));
            }
            for v in s.vehicles() {
                let prev = stopped.insert(v.state.id, v.stopped_time).unwrap_or(0.0);
                assert!(v.stopped_time >= prev);
            }
        }
    }

    #[test]
    fn held_vehicle_accrues_full_window() {
        let mut acc = DelayAccumulator::new(0.4, 0.3);
        for _ in 0..1500 {
            acc.record([(7, 0.0)], 0);
        }
        let m = acc.finish(0).unwrap();
        assert_abs_diff_eq!(m.avg_stopped_time, 600.0, epsilon = 1e-9);
        assert_eq!(m.mean_speed, 0.0);
    }

    #[test]
    fn empty_window_is_an_error() {
        assert!(DelayAccumulator::new(0.4, 0.3).finish(0).is_err());
    }

    #[test]
    fn protocol_step_counts() {
        let cfg = HighwayConfig::default();
        assert_eq!(cfg.warmup_steps(), 9000);
        assert_eq!(cfg.eval_steps(), 1500);
    }

    #[test]
    fn lane_change_rate_normalisation() {
        let r = measure_lc_rate(30, 100, 10_000, 0.4);
        assert_abs_diff_eq!(r.per_step, 0.3);
        assert_abs_diff_eq!(r.per_vehicle_second, 30.0 / 4000.0);
    }

    #[test]
    fn congested_baseline_has_stopped_time() {
        let cfg = HighwayConfig { warmup_duration: 600.0, eval_duration: 600.0, ..HighwayConfig::default() };
        let out = run_transfer(&cfg, None, 0, false).unwrap();
        assert!(out.metrics.avg_stopped_time > 0.0);
        assert!(out.lane_changes.per_step > 0.0);
        assert_eq!(out.metrics.collisions, 0);
    }
}
