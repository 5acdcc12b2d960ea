//! Car-following physics: the Intelligent Driver Model, uniform-flow
//! equilibria and explicit-Euler integration of single-lane vehicle strings
//! on a ring with periodic boundary.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_VEHICLE_LENGTH: f64 = 5.0;

/// IDM parameters. Defaults are v0=30, T=1, a=1.3, b=2.0, δ=4, s0=2 with
/// acceleration noise ε ~ N(0, 0.3).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdmParams {
    /// Desired speed (m/s).
    pub v0: f64,
    /// Time headway (s).
    pub time_headway: f64,
    /// Maximum acceleration (m/s²).
    pub accel: f64,
    /// Comfortable deceleration (m/s²).
    pub decel: f64,
    pub delta: f64,
    /// Minimum gap (m).
    pub s0: f64,
    /// Standard deviation of the additive acceleration noise (m/s²).
    pub noise_std: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            v0: 30.0,
            time_headway: 1.0,
            accel: 1.3,
            decel: 2.0,
            delta: 4.0,
            s0: 2.0,
            noise_std: 0.3,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("v0", self.v0),
            ("time_headway", self.time_headway),
            ("accel", self.accel),
            ("decel", self.decel),
            ("s0", self.s0),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::InvalidConfig(format!("idm.{name} must be > 0, got {value}")));
            }
        }
        if !(self.delta >= 1.0) {
            return Err(Error::InvalidConfig(format!("idm.delta must be >= 1, got {}", self.delta)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "idm.noise_std must be >= 0, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    /// Same parameters without the stochastic term.
    pub fn noiseless(self) -> Self {
        Self { noise_std: 0.0, ..self }
    }

    /// Draw one realisation of ε. Consumes no randomness when `noise_std` is 0.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.noise_std > 0.0 {
            // noise_std > 0 was validated, so the constructor cannot fail
            Normal::new(0.0, self.noise_std).expect("valid normal").sample(rng)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VehicleKind {
    Human,
    Av,
}

impl VehicleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VehicleKind::Human => "human",
            VehicleKind::Av => "av",
        }
    }
}

impl fmt::Display for VehicleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for VehicleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "human" => Ok(VehicleKind::Human),
            "av" => Ok(VehicleKind::Av),
            other => Err(Error::InvalidConfig(format!("unknown vehicle kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    pub id: u64,
    /// Front-bumper coordinate along the road (m).
    pub position: f64,
    pub speed: f64,
    pub length: f64,
    pub kind: VehicleKind,
}

impl VehicleState {
    pub fn human(id: u64, position: f64, speed: f64) -> Self {
        Self { id, position, speed, length: DEFAULT_VEHICLE_LENGTH, kind: VehicleKind::Human }
    }

    pub fn av(id: u64, position: f64, speed: f64) -> Self {
        Self { kind: VehicleKind::Av, ..Self::human(id, position, speed) }
    }

    pub fn is_av(&self) -> bool {
        self.kind == VehicleKind::Av
    }
}

/// Vehicles on a circular single-lane track, sorted by increasing position.
/// The leader of vehicle `i` is `i + 1`, and the last vehicle follows the first.
#[derive(Debug, Clone, PartialEq)]
pub struct RingState {
    pub circumference: f64,
    pub vehicles: Vec<VehicleState>,
    pub time: f64,
}

impl RingState {
    /// Build a ring, sorting vehicles by position and checking the invariants.
    pub fn new(circumference: f64, mut vehicles: Vec<VehicleState>) -> Result<Self> {
        vehicles.sort_by(|a, b| a.position.total_cmp(&b.position));
        let ring = Self { circumference, vehicles, time: 0.0 };
        ring.validate()?;
        Ok(ring)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.circumference > 0.0) {
            return Err(Error::InvalidConfig("ring circumference must be positive".into()));
        }
        for (i, v) in self.vehicles.iter().enumerate() {
            if !(0.0..self.circumference).contains(&v.position) {
                return Err(Error::InvalidConfig(format!(
                    "vehicle {} position {} outside [0, {})",
                    v.id, v.position, self.circumference
                )));
            }
            if !(v.speed >= 0.0) || !(v.length > 0.0) {
                return Err(Error::InvalidConfig(format!("vehicle {} has invalid speed/length", v.id)));
            }
            if i > 0 && !(self.vehicles[i - 1].position < v.position) {
                return Err(Error::InvalidConfig("vehicle positions must be strictly increasing".into()));
            }
        }
        for i in 0..self.vehicles.len() {
            if !(self.headway(i) > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "vehicle {} overlaps its leader",
                    self.vehicles[i].id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vehicles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vehicles.is_empty()
    }

    pub fn leader_index(&self, i: usize) -> usize {
        (i + 1) % self.vehicles.len()
    }

    /// Front-to-front distance from vehicle `i` to its leader, in (0, L].
    fn spacing(&self, i: usize) -> f64 {
        let lead = self.leader_index(i);
        if lead == i {
            return self.circumference;
        }
        (self.vehicles[lead].position - self.vehicles[i].position).rem_euclid(self.circumference)
    }

    /// Bumper-to-bumper headway of vehicle `i` to its leader, with periodic
    /// wraparound. A lone vehicle follows itself at distance `L - length`.
    pub fn headway(&self, i: usize) -> f64 {
        let lead = self.leader_index(i);
        self.spacing(i) - self.vehicles[lead].length
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.vehicles.iter().position(|v| v.id == id)
    }

    pub fn mean_speed(&self) -> f64 {
        if self.vehicles.is_empty() {
            return 0.0;
        }
        self.vehicles.iter().map(|v| v.speed).sum::<f64>() / self.vehicles.len() as f64
    }

    pub fn av_count(&self) -> usize {
        self.vehicles.iter().filter(|v| v.is_av()).count()
    }

    /// Human IDM acceleration for vehicle `i` with the given noise draw.
    pub fn idm_accel_of(&self, i: usize, params: &IdmParams, noise: f64) -> Result<f64> {
        let lead = self.leader_index(i);
        idm_accel(
            self.vehicles[i].speed,
            self.vehicles[lead].speed,
            self.headway(i),
            params,
            noise,
        )
    }
}

/// Desired gap `s* = s0 + max(0, v·T + v·(v - v_lead) / (2·sqrt(a·b)))`.
///
/// `dv` is `v_lead - v`, so a closing speed (`dv < 0`) widens the desired gap.
pub fn desired_gap(v: f64, dv: f64, p: &IdmParams) -> f64 {
    let dynamic = v * p.time_headway - v * dv / (2.0 * (p.accel * p.decel).sqrt());
    p.s0 + dynamic.max(0.0)
}

/// IDM acceleration `a·[1 - (v/v0)^δ - (s*/h)²] + noise`.
pub fn idm_accel(v: f64, v_lead: f64, headway: f64, p: &IdmParams, noise: f64) -> Result<f64> {
    if !(headway > 0.0) {
        return Err(Error::NonPositiveHeadway(headway));
    }
    let gap_term = desired_gap(v, v_lead - v, p) / headway;
    Ok(p.accel * (1.0 - (v / p.v0).powf(p.delta) - gap_term * gap_term) + noise)
}

/// IDM acceleration on an empty road ahead.
pub fn free_road_accel(v: f64, p: &IdmParams, noise: f64) -> f64 {
    p.accel * (1.0 - (v / p.v0).powf(p.delta)) + noise
}

/// Noiseless uniform-flow residual, scaled so that `accel * residual` is the
/// IDM acceleration at speed `v` with equal leader speed and headway `gap`.
fn equilibrium_residual(v: f64, gap: f64, p: &IdmParams) -> f64 {
    let ratio = (p.s0 + v * p.time_headway) / gap;
    1.0 - (v / p.v0).powf(p.delta) - ratio * ratio
}

/// Uniform-flow speed for a given bumper-to-bumper gap, by bisection.
pub fn equilibrium_speed_for_gap(gap: f64, p: &IdmParams) -> Result<f64> {
    if !(gap > p.s0) {
        return Err(Error::JamDensity { gap, s0: p.s0 });
    }
    if gap.is_infinite() {
        return Ok(p.v0);
    }
    // residual is strictly decreasing in v, positive at 0 and negative at v0
    let (mut lo, mut hi) = (0.0_f64, p.v0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if equilibrium_residual(mid, gap, p) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Uniform-flow speed `V_eq` of `n` vehicles of body length `length` on a ring
/// of circumference `circumference`.
pub fn equilibrium_speed(n: usize, circumference: f64, length: f64, p: &IdmParams) -> Result<f64> {
    if n == 0 {
        return Err(Error::Empty("ring"));
    }
    equilibrium_speed_for_gap(circumference / n as f64 - length, p)
}

/// Largest acceleration that still lets a vehicle stop behind its leader if
/// both brake at `decel` from the next step on, keeping at least `margin`.
pub fn safe_accel_bound(v: f64, v_lead: f64, headway: f64, decel: f64, margin: f64, dt: f64) -> f64 {
    let room = (headway - margin).max(0.0);
    let bd = decel * dt;
    let v_safe = -bd + (bd * bd + v_lead * v_lead + 2.0 * decel * room).sqrt();
    (v_safe - v) / dt
}

#[derive(Debug, Clone, PartialEq)]
pub struct StringStep {
    pub state: RingState,
    /// Some post-step headway is ≤ 0 (or a vehicle passed its leader).
    pub collided: bool,
}

/// Advance a ring by one explicit-Euler step: `v' = max(0, v + a·dt)`,
/// `x' = (x + v'·dt) mod L`.
pub fn step_string(ring: &RingState, accels: &[f64], dt: f64) -> Result<StringStep> {
    let n = ring.vehicles.len();
    if accels.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: accels.len() });
    }
    let new_speeds: Vec<f64> = ring
        .vehicles
        .iter()
        .zip(accels)
        .map(|(veh, &a)| (veh.speed + a * dt).max(0.0))
        .collect();

    // Unwrapped gap update against the pre-step leader: passing shows up as a
    // non-positive gap instead of being hidden by the modulo.
    let mut collided = false;
    if n > 1 {
        for i in 0..n {
            let lead = ring.leader_index(i);
            let gap = ring.headway(i) + (new_speeds[lead] - new_speeds[i]) * dt;
            if gap <= 0.0 {
                collided = true;
            }
        }
    }

    let mut vehicles: Vec<VehicleState> = ring
        .vehicles
        .iter()
        .zip(&new_speeds)
        .map(|(veh, &speed)| {
            let mut position = (veh.position + speed * dt).rem_euclid(ring.circumference);
            // rem_euclid can round up to exactly L for tiny negative inputs
            if position >= ring.circumference {
                position = 0.0;
            }
            VehicleState { position, speed, ..veh.clone() }
        })
        .collect();
    if !collided {
        // cyclic order is unchanged, so sorting only rotates the list
        vehicles.sort_by(|a, b| a.position.total_cmp(&b.position));
    }
    Ok(StringStep {
        state: RingState { circumference: ring.circumference, vehicles, time: ring.time + dt },
        collided,
    })
}

/// Place `n` vehicles equidistantly at `speed`, starting at position 0.
pub fn uniform_ring(
    n: usize,
    circumference: f64,
    speed: f64,
    length: f64,
    is_av: impl Fn(usize) -> bool,
) -> Result<RingState> {
    let spacing = circumference / n as f64;
    let vehicles = (0..n)
        .map(|i| VehicleState {
            id: i as u64,
            position: i as f64 * spacing,
            speed,
            length,
            kind: if is_av(i) { VehicleKind::Av } else { VehicleKind::Human },
        })
        .collect();
    RingState::new(circumference, vehicles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn table1() -> IdmParams {
        IdmParams::default()
    }

    #[test]
    fn desired_gap_examples() {
        let p = table1();
        assert_eq!(desired_gap(0.0, 0.0, &p), 2.0);
        assert_abs_diff_eq!(desired_gap(10.0, 0.0, &p), 12.0, epsilon = 1e-12);
        // hand evaluation: 2 + 10 + 10*5/(2*sqrt(2.6))
        let expected = 2.0 + 10.0 + 50.0 / (2.0 * 2.6_f64.sqrt());
        assert_abs_diff_eq!(desired_gap(10.0, -5.0, &p), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 27.5, epsilon = 0.1);
        // a much faster leader clamps the dynamic term at zero
        assert_eq!(desired_gap(10.0, 50.0, &p), 2.0);
        assert!(desired_gap(10.0, 5.0, &p) < 12.0);
    }

    #[test]
    fn idm_accel_examples() {
        let p = table1();
        assert_abs_diff_eq!(idm_accel(0.0, 0.0, 2.0, &p, 0.0).unwrap(), 0.0, epsilon = 1e-15);
        let far = idm_accel(30.0, 30.0, 1e9, &p, 0.0).unwrap();
        assert!(far < 0.0 && far > -1e-10);
        let expected = 1.3 * (1.0 - (1.0_f64 / 3.0).powi(4) - (12.0_f64 / 20.0).powi(2));
        assert_abs_diff_eq!(idm_accel(10.0, 10.0, 20.0, &p, 0.0).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.8160, epsilon = 1e-4);
        assert_abs_diff_eq!(idm_accel(10.0, 10.0, 20.0, &p, 0.25).unwrap(), expected + 0.25, epsilon = 1e-12);
    }

    #[test]
    fn idm_rejects_non_positive_headway() {
        let p = table1();
        assert!(matches!(idm_accel(5.0, 5.0, 0.0, &p, 0.0), Err(Error::NonPositiveHeadway(_))));
        assert!(idm_accel(5.0, 5.0, -1.0, &p, 0.0).is_err());
    }

    #[test]
    fn equilibrium_examples() {
        let p = table1();
        let v = equilibrium_speed(1, 1e12, 5.0, &p).unwrap();
        assert_abs_diff_eq!(v, 30.0, epsilon = 1e-3);

        let v = equilibrium_speed(22, 250.0, 5.0, &p).unwrap();
        let h = 250.0 / 22.0 - 5.0;
        assert!((v - 4.4).abs() < 0.5, "V_eq = {v}");
        assert!(idm_accel(v, v, h, &p, 0.0).unwrap().abs() < 1e-8);

        // h_eq == s0 exactly: 22 * (2 + 5) = 154
        assert!(matches!(equilibrium_speed(22, 154.0, 5.0, &p), Err(Error::JamDensity { .. })));
    }

    #[test]
    fn equilibrium_speed_decreases_with_density() {
        let p = table1();
        let mut last = f64::INFINITY;
        for n in 5..=40 {
            let v = equilibrium_speed(n, 300.0, 5.0, &p).unwrap();
            assert!(v < last, "n={n}: {v} !< {last}");
            last = v;
        }
    }

    #[test]
    fn headway_examples() {
        let ring = RingState::new(
            100.0,
            vec![VehicleState::human(0, 0.0, 0.0), VehicleState::human(1, 50.0, 0.0)],
        )
        .unwrap();
        assert_eq!(ring.headway(0), 45.0);
        assert_eq!(ring.headway(1), 45.0);

        let lone = RingState::new(100.0, vec![VehicleState::human(0, 10.0, 0.0)]).unwrap();
        assert_eq!(lone.headway(0), 95.0);
    }

    #[test]
    fn overlapping_ring_rejected() {
        let r = RingState::new(
            100.0,
            vec![VehicleState::human(0, 0.0, 0.0), VehicleState::human(1, 3.0, 0.0)],
        );
        assert!(r.is_err());
    }

    #[test]
    fn speed_is_clamped_at_zero() {
        let ring = RingState::new(100.0, vec![VehicleState::human(0, 0.0, 1.0)]).unwrap();
        let next = step_string(&ring, &[-10.0], 0.2).unwrap();
        assert_eq!(next.state.vehicles[0].speed, 0.0);
        assert_eq!(next.state.vehicles[0].position, 0.0);
        assert!(!next.collided);
    }

    #[test]
    fn uniform_flow_is_a_fixed_point() {
        let p = table1().noiseless();
        let (n, l) = (22, 260.0);
        let veq = equilibrium_speed(n, l, 5.0, &p).unwrap();
        let mut ring = uniform_ring(n, l, veq, 5.0, |_| false).unwrap();
        let start: Vec<(u64, f64)> = ring.vehicles.iter().map(|v| (v.id, v.position)).collect();
        let dt = 0.2;
        let steps = 1000;
        for _ in 0..steps {
            let accels: Vec<f64> =
                (0..ring.len()).map(|i| ring.idm_accel_of(i, &p, 0.0).unwrap()).collect();
            let next = step_string(&ring, &accels, dt).unwrap();
            assert!(!next.collided);
            ring = next.state;
        }
        // track the unwrapped analytic trajectory x_i(0) + V_eq t
        for (id, x0) in start {
            let veh = &ring.vehicles[ring.index_of(id).unwrap()];
            let analytic = (x0 + veq * dt * steps as f64).rem_euclid(l);
            let mut drift = (veh.position - analytic).abs();
            drift = drift.min(l - drift);
            assert!(drift < 1e-6, "vehicle {id} drifted {drift}");
        }
    }

    #[test]
    fn forced_overtake_is_flagged() {
        let ring = RingState::new(
            100.0,
            vec![VehicleState::human(0, 0.0, 0.0), VehicleState::human(1, 8.0, 0.0)],
        )
        .unwrap();
        // vehicle 0 covers 20 m in one step while its leader stands still
        let next = step_string(&ring, &[100.0, 0.0], 0.2).unwrap();
        assert!(next.collided);
    }

    #[test]
    fn noise_draw_skipped_without_variance() {
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        assert_eq!(table1().noiseless().sample_noise(&mut a), 0.0);
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn safe_bound_stops_before_standing_leader() {
        // AV at 10 m/s, standing leader 15 m ahead: repeatedly applying the
        // bound (and braking at `decel` beyond it) never closes the gap
        let (decel, dt) = (3.0, 0.2);
        let (mut v, mut gap) = (10.0_f64, 15.0_f64);
        for _ in 0..200 {
            let a = safe_accel_bound(v, 0.0, gap, decel, 2.0, dt).min(1.3);
            v = (v + a * dt).max(0.0);
            gap -= v * dt;
            assert!(gap > 0.0);
        }
        assert!(v < 1e-9);
    }

    proptest! {
        #[test]
        fn idm_matches_reassembled_formula(
            v in 0.0f64..35.0,
            v_lead in 0.0f64..35.0,
            h in 0.1f64..200.0,
        ) {
            let p = table1();
            let s = desired_gap(v, v_lead - v, &p);
            let by_hand = p.accel * (1.0 - (v / p.v0).powf(p.delta) - (s / h).powi(2));
            let got = idm_accel(v, v_lead, h, &p, 0.0).unwrap();
            prop_assert!((got - by_hand).abs() <= 1e-12 * by_hand.abs().max(1.0));
        }

        #[test]
        fn accel_non_positive_at_desired_spacing(v in 0.0f64..30.0) {
            let p = table1();
            let h = p.s0 + v * p.time_headway;
            prop_assert!(idm_accel(v, v, h, &p, 0.0).unwrap() <= 1e-15);
        }

        #[test]
        fn stepping_preserves_count_and_cyclic_order(
            seed in any::<u64>(),
            n in 2usize..30,
        ) {
            let p = table1();
            let l = n as f64 * 12.0;
            let veq = equilibrium_speed(n, l, 5.0, &p).unwrap();
            let mut ring = uniform_ring(n, l, veq, 5.0, |_| false).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..200 {
                let accels: Vec<f64> = (0..ring.len())
                    .map(|i| ring.idm_accel_of(i, &p, p.sample_noise(&mut rng)).unwrap())
                    .collect();
                let order: Vec<u64> = ring.vehicles.iter().map(|v| v.id).collect();
                let next = step_string(&ring, &accels, 0.2).unwrap();
                prop_assert_eq!(next.state.len(), n);
                if next.collided { break; }
                let new_order: Vec<u64> = next.state.vehicles.iter().map(|v| v.id).collect();
                let shift = new_order.iter().position(|&id| id == order[0]).unwrap();
                let rotated: Vec<u64> = (0..n).map(|k| new_order[(shift + k) % n]).collect();
                prop_assert_eq!(rotated, order);
                ring = next.state;
            }
        }
    }
}
