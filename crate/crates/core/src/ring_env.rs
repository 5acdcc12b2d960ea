//! Mixed-autonomy ring road as a multiagent MDP.
//!
//! Every AV is an agent. Agents observe a short history of their own speed,
//! headway and leader speed, command an acceleration, and are rewarded for
//! holding the uniform-flow speed with small accelerations.

use std::collections::VecDeque;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{
    equilibrium_speed, safe_accel_bound, step_string, uniform_ring, IdmParams, RingState,
    VehicleKind, DEFAULT_VEHICLE_LENGTH,
};
use crate::error::{Error, Result};
use crate::perturbation::{
    apply_deletion, apply_insertion, sample_events, EventKind, LaneChangeConfig, LaneChangeEvent,
};
use crate::rng::{self, SimRng};

/// Values per observation frame: ego speed, headway, leader speed.
pub const FRAME_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RingEnvConfig {
    pub n_av: usize,
    pub vehicles_per_av: usize,
    /// Circumference range (m) sampled uniformly at every reset. `None` means
    /// `[250·n_av, 360·n_av]`.
    pub length_range: Option<[f64; 2]>,
    pub dt: f64,
    pub horizon_steps: usize,
    pub obs_frames: usize,
    /// Seconds between stacked observation frames.
    pub obs_sample_period: f64,
    pub action_bounds: [f64; 2],
    pub c1: f64,
    pub c2: f64,
    pub idm: IdmParams,
    /// All-human steps simulated inside `reset` before agents act.
    pub warmup_steps: usize,
    pub vehicle_length: f64,
    /// Cap AV commands so the AV can always stop behind its leader.
    pub av_failsafe: bool,
    #[serde(skip)]
    pub lane_change: LaneChangeConfig,
}

impl Default for RingEnvConfig {
    fn default() -> Self {
        Self {
            n_av: 1,
            vehicles_per_av: 22,
            length_range: None,
            dt: 0.2,
            horizon_steps: 3000,
            obs_frames: 5,
            obs_sample_period: 2.0,
            action_bounds: [-3.0, 1.3],
            c1: 0.005,
            c2: 0.1,
            idm: IdmParams::default(),
            warmup_steps: 0,
            vehicle_length: DEFAULT_VEHICLE_LENGTH,
            av_failsafe: true,
            lane_change: LaneChangeConfig::default(),
        }
    }
}

impl RingEnvConfig {
    pub fn with_avs(n_av: usize) -> Self {
        Self { n_av, ..Self::default() }
    }

    /// Fixed-circumference preset, e.g. the 44-vehicle/2-AV/500 m ring.
    pub fn preset(n_av: usize, circumference: f64) -> Self {
        Self { n_av, length_range: Some([circumference, circumference]), ..Self::default() }
    }

    /// Same ring, circumference draw and noise stream, with every AV replaced
    /// by a human driver.
    pub fn human_twin(&self) -> Self {
        Self {
            n_av: 0,
            vehicles_per_av: self.n_vehicles(),
            length_range: Some(self.length_range()),
            ..self.clone()
        }
    }

    pub fn length_range(&self) -> [f64; 2] {
        self.length_range
            .unwrap_or([250.0 * self.n_av as f64, 360.0 * self.n_av as f64])
    }

    pub fn n_vehicles(&self) -> usize {
        self.vehicles_per_av * self.n_av.max(1)
    }

    /// Simulator steps between observation frames.
    pub fn frame_stride(&self) -> usize {
        (self.obs_sample_period / self.dt).round() as usize
    }

    pub fn obs_dim(&self) -> usize {
        FRAME_DIM * self.obs_frames
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        self.idm.validate()?;
        self.lane_change.validate(self.idm.s0, self.vehicle_length)?;
        let [lo, hi] = self.length_range();
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("ring.length_range [{lo}, {hi}] is not a valid interval"));
        }
        if self.vehicles_per_av == 0 {
            return bad("ring.vehicles_per_av must be >= 1".into());
        }
        if !(self.dt > 0.0) {
            return bad("ring.dt must be > 0".into());
        }
        if self.obs_frames == 0 {
            return bad("ring.obs_frames must be >= 1".into());
        }
        let stride = self.obs_sample_period / self.dt;
        if !(stride >= 1.0 - 1e-9) || (stride - stride.round()).abs() > 1e-9 {
            return bad("ring.obs_sample_period must be an integer multiple of ring.dt".into());
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return bad("ring.c1 and ring.c2 must be > 0".into());
        }
        if !(self.action_bounds[0] < self.action_bounds[1]) {
            return bad("ring.action_bounds must be increasing".into());
        }
        if self.horizon_steps == 0 {
            return bad("ring.horizon_steps must be >= 1".into());
        }
        if !(self.vehicle_length > 0.0) {
            return bad("ring.vehicle_length must be > 0".into());
        }
        Ok(())
    }

    /// Hex digest of the configuration, recorded in traces and manifests.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(format!("{self:?}").as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn actuator(&self) -> AvActuator {
        AvActuator {
            bounds: self.action_bounds,
            failsafe: self.av_failsafe,
            margin: self.idm.s0,
            dt: self.dt,
        }
    }
}

/// Turns policy commands into executed AV accelerations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvActuator {
    pub bounds: [f64; 2],
    /// Cap commands so the AV can still stop behind its leader when braking
    /// at `-bounds[0]`, keeping `margin` metres.
    pub failsafe: bool,
    pub margin: f64,
    pub dt: f64,
}

impl AvActuator {
    pub fn execute(&self, command: f64, speed: f64, leader_speed: f64, headway: f64) -> f64 {
        let clipped = command.clamp(self.bounds[0], self.bounds[1]);
        if !self.failsafe {
            return clipped;
        }
        let cap = safe_accel_bound(speed, leader_speed, headway, -self.bounds[0], self.margin, self.dt);
        clipped.min(cap)
    }
}

/// Stacked local view of one agent, newest frame first:
/// `(v, h, v_lead)` at `t, t - Δt, …, t - (N-1)·Δt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn frame(&self, k: usize) -> [f64; FRAME_DIM] {
        let s = &self.0[k * FRAME_DIM..(k + 1) * FRAME_DIM];
        [s[0], s[1], s[2]]
    }
}

/// Per-step frames of one agent, long enough to reach back `(N-1)·stride`
/// steps. Before that much history exists the oldest (initial) frame is
/// repeated.
#[derive(Debug, Clone)]
pub struct FrameHistory {
    frames: VecDeque<[f64; FRAME_DIM]>,
    capacity: usize,
    stride: usize,
    n_frames: usize,
}

impl FrameHistory {
    pub fn new(initial: [f64; FRAME_DIM], n_frames: usize, stride: usize) -> Self {
        let capacity = (n_frames - 1) * stride + 1;
        let mut frames = VecDeque::with_capacity(capacity);
        frames.push_back(initial);
        Self { frames, capacity, stride, n_frames }
    }

    pub fn push(&mut self, frame: [f64; FRAME_DIM]) {
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
    }

    pub fn observation(&self) -> Observation {
        let newest = self.frames.len() - 1;
        let mut out = Vec::with_capacity(self.n_frames * FRAME_DIM);
        for k in 0..self.n_frames {
            let idx = newest.saturating_sub(k * self.stride);
            out.extend_from_slice(&self.frames[idx]);
        }
        Observation(out)
    }
}

/// `r = -c1·(v - V_eq)² - c2·a²`.
pub fn reward(speed: f64, accel: f64, v_eq: f64, cfg: &RingEnvConfig) -> f64 {
    let dv = speed - v_eq;
    -cfg.c1 * dv * dv - cfg.c2 * accel * accel
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceVehicle {
    pub id: u64,
    pub kind: VehicleKind,
    pub position: f64,
    pub speed: f64,
    pub accel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub time: f64,
    /// Uniform-flow speed for the vehicle count during this step.
    pub v_eq: f64,
    pub vehicles: Vec<TraceVehicle>,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub seed: u64,
    pub config_hash: String,
    pub circumference: f64,
    pub steps: Vec<TraceStep>,
}

impl EpisodeTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `time,vehicle_id,kind,position,speed,accel`, one row per vehicle per step.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "time,vehicle_id,kind,position,speed,accel")?;
        for step in &self.steps {
            for v in &step.vehicles {
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    step.time, v.id, v.kind, v.position, v.speed, v.accel
                )?;
            }
        }
        Ok(())
    }
}

/// Uniform-flow ratio `m = 1/(N·T) · Σ_t Σ_i v_i(t) / V_eq(N/L)` over a trace.
/// When lane changes alter the vehicle count, each step is normalised by its
/// own count and `V_eq`.
pub fn metric_m(trace: &EpisodeTrace) -> Result<f64> {
    if trace.steps.is_empty() {
        return Err(Error::Empty("trace"));
    }
    let total: f64 = trace.steps.iter().map(step_speed_ratio).sum();
    Ok(total / trace.steps.len() as f64)
}

fn step_speed_ratio(step: &TraceStep) -> f64 {
    if step.vehicles.is_empty() {
        return 0.0;
    }
    let sum: f64 = step.vehicles.iter().map(|v| v.speed).sum();
    sum / (step.vehicles.len() as f64 * step.v_eq)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observations: Vec<Observation>,
    pub rewards: Vec<f64>,
    /// Executed (post-clip) accelerations of the agents.
    pub executed: Vec<f64>,
    pub done: bool,
    pub collided: bool,
}

/// One ring-road episode.
#[derive(Debug, Clone)]
pub struct RingEnv {
    cfg: RingEnvConfig,
    seed: u64,
    state: RingState,
    rng: SimRng,
    agents: Vec<u64>,
    histories: Vec<FrameHistory>,
    v_eq: f64,
    v_eq_count: usize,
    steps: usize,
    next_id: u64,
    done: bool,
    ratio_sum: f64,
    trace: Option<EpisodeTrace>,
    events: Vec<LaneChangeEvent>,
}

impl RingEnv {
    /// Sample a circumference, place `22·n_av` vehicles equidistantly at
    /// `V_eq` with every 22nd vehicle an AV, and pad observation histories with
    /// the initial frame.
    pub fn reset(cfg: RingEnvConfig, seed: u64) -> Result<(Self, Vec<Observation>)> {
        Self::reset_inner(cfg, seed, false)
    }

    /// Like [`RingEnv::reset`] but records a full [`EpisodeTrace`].
    pub fn reset_traced(cfg: RingEnvConfig, seed: u64) -> Result<(Self, Vec<Observation>)> {
        Self::reset_inner(cfg, seed, true)
    }

    fn reset_inner(cfg: RingEnvConfig, seed: u64, traced: bool) -> Result<(Self, Vec<Observation>)> {
        cfg.validate()?;
        let mut rng = rng::seeded(seed);
        let [lo, hi] = cfg.length_range();
        let circumference = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let n = cfg.n_vehicles();
        let v_eq = equilibrium_speed(n, circumference, cfg.vehicle_length, &cfg.idm)?;
        let stride_av = cfg.vehicles_per_av;
        let n_av = cfg.n_av;
        let state = uniform_ring(n, circumference, v_eq, cfg.vehicle_length, |i| {
            i % stride_av == 0 && i / stride_av < n_av
        })?;
        let agents: Vec<u64> = state.vehicles.iter().filter(|v| v.is_av()).map(|v| v.id).collect();
        let trace = traced.then(|| EpisodeTrace {
            seed,
            config_hash: cfg.config_hash(),
            circumference,
            steps: Vec::new(),
        });
        let mut env = Self {
            seed,
            next_id: n as u64,
            histories: Vec::new(),
            agents,
            state,
            rng,
            v_eq,
            v_eq_count: n,
            steps: 0,
            done: false,
            ratio_sum: 0.0,
            trace,
            events: Vec::new(),
            cfg,
        };
        let stride = env.cfg.frame_stride();
        env.histories = (0..env.agents.len())
            .map(|k| FrameHistory::new(env.frame_of(k), env.cfg.obs_frames, stride))
            .collect();
        for _ in 0..env.cfg.warmup_steps {
            env.advance(None)?;
        }
        let obs = env.observations();
        Ok((env, obs))
    }

    pub fn config(&self) -> &RingEnvConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> &RingState {
        &self.state
    }

    pub fn agents(&self) -> &[u64] {
        &self.agents
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn v_eq(&self) -> f64 {
        self.v_eq
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn trace(&self) -> Option<&EpisodeTrace> {
        self.trace.as_ref()
    }

    pub fn into_trace(self) -> Option<EpisodeTrace> {
        self.trace
    }

    pub fn events(&self) -> &[LaneChangeEvent] {
        &self.events
    }

    /// Running value of the uniform-flow metric over the steps taken so far.
    pub fn metric_so_far(&self) -> Option<f64> {
        (self.steps > 0).then(|| self.ratio_sum / self.steps as f64)
    }

    /// Current `(v, h, v_lead)` of agent `k`.
    fn frame_of(&self, k: usize) -> [f64; FRAME_DIM] {
        let i = self.state.index_of(self.agents[k]).expect("AVs are never removed");
        let lead = self.state.leader_index(i);
        [self.state.vehicles[i].speed, self.state.headway(i), self.state.vehicles[lead].speed]
    }

    pub fn observe(&self, agent: usize) -> Observation {
        self.histories[agent].observation()
    }

    pub fn observations(&self) -> Vec<Observation> {
        (0..self.agents.len()).map(|k| self.observe(k)).collect()
    }

    /// Apply one acceleration command per agent and advance one step.
    pub fn step(&mut self, actions: &[f64]) -> Result<StepResult> {
        if actions.len() != self.agents.len() {
            return Err(Error::DimensionMismatch { expected: self.agents.len(), got: actions.len() });
        }
        if self.done {
            return Err(Error::InvalidConfig("step called on a finished episode".into()));
        }
        let (executed, collided) = self.advance(Some(actions))?;
        let rewards: Vec<f64> = self
            .agents
            .iter()
            .zip(&executed)
            .map(|(&id, &a)| {
                let i = self.state.index_of(id).expect("AVs are never removed");
                reward(self.state.vehicles[i].speed, a, self.v_eq, &self.cfg)
            })
            .collect();
        self.steps += 1;
        self.ratio_sum += self.state.mean_speed() / self.v_eq;
        if let Some(trace) = self.trace.as_mut() {
            if let Some(last) = trace.steps.last_mut() {
                last.rewards = rewards.clone();
            }
        }
        self.done = collided || self.steps >= self.cfg.horizon_steps;
        Ok(StepResult { observations: self.observations(), rewards, executed, done: self.done, collided })
    }

    /// Lane-change events, accelerations and integration. `actions = None`
    /// drives AVs with the human model (warm-up).
    fn advance(&mut self, actions: Option<&[f64]>) -> Result<(Vec<f64>, bool)> {
        self.apply_lane_changes();

        let n = self.state.len();
        let mut accels = Vec::with_capacity(n);
        let mut executed = vec![0.0; self.agents.len()];
        for i in 0..n {
            // one draw per vehicle keeps noise streams aligned across policies
            let noise = self.cfg.idm.sample_noise(&mut self.rng);
            let veh = &self.state.vehicles[i];
            let agent = match (veh.kind, actions) {
                (VehicleKind::Av, Some(_)) => self.agents.iter().position(|&id| id == veh.id),
                _ => None,
            };
            let accel = match (agent, actions) {
                (Some(k), Some(actions)) => {
                    let lead = self.state.leader_index(i);
                    let a = self.cfg.actuator().execute(
                        actions[k],
                        veh.speed,
                        self.state.vehicles[lead].speed,
                        self.state.headway(i),
                    );
                    executed[k] = a;
                    a
                }
                _ => self.state.idm_accel_of(i, &self.cfg.idm, noise)?,
            };
            accels.push(accel);
        }

        let prev = std::mem::replace(&mut self.state, RingState {
            circumference: 0.0,
            vehicles: Vec::new(),
            time: 0.0,
        });
        let ids: Vec<u64> = prev.vehicles.iter().map(|v| v.id).collect();
        let stepped = step_string(&prev, &accels, self.cfg.dt)?;
        self.state = stepped.state;

        if let Some(trace) = self.trace.as_mut() {
            let accel_of = |id: u64| accels[ids.iter().position(|&x| x == id).expect("same vehicles")];
            trace.steps.push(TraceStep {
                time: self.state.time,
                v_eq: self.v_eq,
                vehicles: self
                    .state
                    .vehicles
                    .iter()
                    .map(|v| TraceVehicle {
                        id: v.id,
                        kind: v.kind,
                        position: v.position,
                        speed: v.speed,
                        accel: accel_of(v.id),
                    })
                    .collect(),
                rewards: Vec::new(),
            });
        }
        for k in 0..self.agents.len() {
            let frame = self.frame_of(k);
            self.histories[k].push(frame);
        }
        Ok((executed, stepped.collided))
    }

    fn apply_lane_changes(&mut self) {
        if !self.cfg.lane_change.is_active() {
            return;
        }
        let mut events = sample_events(&self.state, &self.cfg.lane_change, &mut self.rng);
        // insertions first: they never invalidate a pending deletion target
        events.sort_by_key(|e| e.kind == EventKind::Deletion);
        for event in events {
            let outcome = match event.kind {
                EventKind::Insertion => {
                    let id = self.next_id;
                    let outcome = apply_insertion(
                        &mut self.state,
                        &event,
                        &self.cfg.lane_change,
                        id,
                        self.cfg.vehicle_length,
                        self.cfg.idm.s0,
                    );
                    if outcome.applied() {
                        self.next_id += 1;
                    }
                    outcome
                }
                EventKind::Deletion => apply_deletion(&mut self.state, &event),
            };
            if outcome.applied() {
                self.events.push(event);
            }
        }
        if self.state.len() != self.v_eq_count {
            self.v_eq_count = self.state.len();
            // insertions keep the density feasible, deletions only lower it
            self.v_eq = equilibrium_speed(
                self.v_eq_count,
                self.state.circumference,
                self.cfg.vehicle_length,
                &self.cfg.idm,
            )
            .expect("feasible density");
        }
    }
}
