//! World and route definitions: human-editable TOML files holding the map
//! geometry, the route polyline, scripted traffic, signal phase schedules,
//! stop-sign trigger zones, and pedestrian crossing events.
//!
//! A [`World`] is the parsed definition; [`World::instantiate`] applies the
//! per-seed randomization (signal phase offsets, agent timing and speed
//! jitter) and yields a [`WorldInstance`] whose agent and pedestrian
//! positions are pure functions of simulation time.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::geometry::{add, scale, sub, Point, Polyline};
use crate::autodiff::Rng;
use crate::error::{Error, Result};

/// Ego dynamics and footprint parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    /// Wheelbase L (m).
    pub wheelbase: f64,
    /// Full-steer road wheel angle (rad).
    pub max_steer_angle: f64,
    /// Acceleration at full throttle (m/s²).
    pub k_throttle: f64,
    /// Deceleration at full brake (m/s²).
    pub k_brake: f64,
    /// Linear drag coefficient (1/s).
    pub drag: f64,
    /// Hard speed cap (m/s).
    pub v_max: f64,
    /// Collision disc radius (m).
    pub radius: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            wheelbase: 2.5,
            max_steer_angle: 0.5,
            k_throttle: 3.0,
            k_brake: 6.0,
            drag: 0.1,
            v_max: 10.0,
            radius: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouteSpec {
    pub points: Vec<Point>,
    #[serde(default = "default_completion_radius")]
    pub completion_radius: f64,
}

fn default_completion_radius() -> f64 {
    2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Cyclist,
}

/// Scripted traffic agent following its own polyline at constant speed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentSpec {
    pub kind: AgentKind,
    pub path: Vec<Point>,
    pub speed: f64,
    #[serde(default)]
    pub start_time: f64,
    #[serde(default = "default_half_length")]
    pub half_length: f64,
    #[serde(default = "default_half_width")]
    pub half_width: f64,
}

fn default_half_length() -> f64 {
    2.2
}

fn default_half_width() -> f64 {
    0.9
}

/// Time-triggered pedestrian crossing from `start` to `end`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PedestrianSpec {
    pub start: Point,
    pub end: Point,
    pub speed: f64,
    pub start_time: f64,
    #[serde(default = "default_ped_radius")]
    pub radius: f64,
}

fn default_ped_radius() -> f64 {
    0.35
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalState {
    Green,
    Yellow,
    Red,
}

/// Signalized stop line with a repeating phase schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignalSpec {
    pub stop_line: [Point; 2],
    /// Repeating (state, duration seconds) cycle.
    pub phases: Vec<(SignalState, f64)>,
    #[serde(default)]
    pub offset: f64,
}

/// Stop-sign trigger zone: the ego must drop below walking pace inside it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StopSignSpec {
    pub trigger: Vec<Point>,
    /// Distance at which the zone becomes visible in the observation;
    /// short ranges model road-painted signs, long ranges upright ones.
    #[serde(default = "default_visible_from")]
    pub visible_from: f64,
}

fn default_visible_from() -> f64 {
    30.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolygonSpec {
    pub polygon: Vec<Point>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolylineSpec {
    pub points: Vec<Point>,
}

/// Parsed world definition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct World {
    pub name: String,
    /// Simulation step (s).
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Episode wall-clock limit (s).
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    #[serde(default)]
    pub vehicle: VehicleParams,
    pub route: RouteSpec,
    pub drivable: PolygonSpec,
    #[serde(default)]
    pub lanes: Vec<PolylineSpec>,
    #[serde(default)]
    pub sidewalks: Vec<PolygonSpec>,
    #[serde(default)]
    pub obstacles: Vec<PolygonSpec>,
    #[serde(default)]
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub pedestrians: Vec<PedestrianSpec>,
    #[serde(default)]
    pub signals: Vec<SignalSpec>,
    #[serde(default)]
    pub stop_signs: Vec<StopSignSpec>,
}

fn default_dt() -> f64 {
    0.05
}

fn default_timeout() -> f64 {
    60.0
}

impl World {
    pub fn from_toml(text: &str) -> Result<World> {
        let world: World =
            toml::from_str(text).map_err(|e| Error::World(format!("parse: {e}")))?;
        world.validate()?;
        Ok(world)
    }

    pub fn load(path: &Path) -> Result<World> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::World(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dt <= 0.0 {
            return Err(Error::World(format!("dt must be positive, got {}", self.dt)));
        }
        if self.route.points.len() < 2 {
            return Err(Error::World("route needs at least two points".into()));
        }
        if Polyline::new(self.route.points.clone()).length() <= 0.0 {
            return Err(Error::World("route length must be positive".into()));
        }
        if self.drivable.polygon.len() < 3 {
            return Err(Error::World("drivable polygon needs at least three points".into()));
        }
        for sig in &self.signals {
            if sig.phases.is_empty() {
                return Err(Error::World("signal phase schedule is empty".into()));
            }
            if sig.phases.iter().any(|(_, d)| *d <= 0.0) {
                return Err(Error::World("signal phase durations must be positive".into()));
            }
        }
        for stop in &self.stop_signs {
            if stop.trigger.len() < 3 {
                return Err(Error::World("stop-sign trigger polygon needs 3+ points".into()));
            }
        }
        for agent in &self.agents {
            if agent.path.len() < 2 && agent.speed > 0.0 {
                return Err(Error::World("moving agent needs a path of 2+ points".into()));
            }
        }
        Ok(())
    }

    /// Apply per-seed randomization: signal cycle offsets, agent start
    /// times and speed factors, pedestrian timing. Deterministic in
    /// (world, seed).
    pub fn instantiate(&self, seed: u64) -> WorldInstance {
        let mut rng = Rng::new(seed ^ 0x5EED_0F_u64.wrapping_mul(fxhash(&self.name)));
        let signals = self
            .signals
            .iter()
            .map(|s| {
                let cycle: f64 = s.phases.iter().map(|(_, d)| d).sum();
                let offset = s.offset + rng.uniform_in(0.0, cycle);
                SignalInstance { spec: s.clone(), cycle, offset }
            })
            .collect();
        let agents = self
            .agents
            .iter()
            .map(|a| AgentInstance {
                path: Polyline::new(a.path.clone()),
                speed: a.speed * rng.uniform_in(0.9, 1.1),
                start_time: a.start_time + rng.uniform_in(0.0, 1.0),
                spec: a.clone(),
            })
            .collect();
        let pedestrians = self
            .pedestrians
            .iter()
            .map(|p| PedestrianInstance {
                start_time: (p.start_time + rng.uniform_in(-1.0, 1.0)).max(0.0),
                spec: p.clone(),
            })
            .collect();
        WorldInstance {
            route: Polyline::new(self.route.points.clone()),
            lanes: self.lanes.iter().map(|l| Polyline::new(l.points.clone())).collect(),
            world: self.clone(),
            seed,
            signals,
            agents,
            pedestrians,
        }
    }
}

fn fxhash(s: &str) -> u64 {
    // tiny deterministic string hash for seed mixing
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

#[derive(Debug, Clone)]
pub struct SignalInstance {
    pub spec: SignalSpec,
    pub cycle: f64,
    pub offset: f64,
}

impl SignalInstance {
    pub fn state_at(&self, t: f64) -> SignalState {
        let mut phase_t = (t + self.offset).rem_euclid(self.cycle);
        for (state, dur) in &self.spec.phases {
            if phase_t < *dur {
                return *state;
            }
            phase_t -= dur;
        }
        self.spec.phases.last().expect("validated non-empty").0
    }

    /// Midpoint of the stop line.
    pub fn stop_point(&self) -> Point {
        scale(add(self.spec.stop_line[0], self.spec.stop_line[1]), 0.5)
    }
}

#[derive(Debug, Clone)]
pub struct AgentInstance {
    pub spec: AgentSpec,
    pub path: Polyline,
    pub speed: f64,
    pub start_time: f64,
}

impl AgentInstance {
    /// Pose (position, heading) at time `t`; agents hold at the path end.
    pub fn pose_at(&self, t: f64) -> (Point, f64) {
        let station = ((t - self.start_time).max(0.0) * self.speed).min(self.path.length());
        (self.path.at_station(station), self.path.heading_at(station))
    }

    pub fn speed_at(&self, t: f64) -> f64 {
        if t < self.start_time {
            return 0.0;
        }
        let station = (t - self.start_time) * self.speed;
        if station >= self.path.length() {
            0.0
        } else {
            self.speed
        }
    }
}

#[derive(Debug, Clone)]
pub struct PedestrianInstance {
    pub spec: PedestrianSpec,
    pub start_time: f64,
}

impl PedestrianInstance {
    /// Position at time `t`; `None` before the crossing starts or after it
    /// completes (the pedestrian leaves the scene).
    pub fn position_at(&self, t: f64) -> Option<Point> {
        if t < self.start_time {
            return None;
        }
        let total = super::geometry::dist(self.spec.start, self.spec.end);
        if total == 0.0 {
            return Some(self.spec.start);
        }
        let walked = (t - self.start_time) * self.spec.speed;
        if walked > total {
            return None;
        }
        let dir = scale(sub(self.spec.end, self.spec.start), 1.0 / total);
        Some(add(self.spec.start, scale(dir, walked)))
    }
}

/// A seeded, randomized world ready to simulate. Scene state at any time is
/// a pure function of `t`.
#[derive(Debug, Clone)]
pub struct WorldInstance {
    pub world: World,
    pub seed: u64,
    pub route: Polyline,
    pub lanes: Vec<Polyline>,
    pub signals: Vec<SignalInstance>,
    pub agents: Vec<AgentInstance>,
    pub pedestrians: Vec<PedestrianInstance>,
}

impl WorldInstance {
    pub fn dt(&self) -> f64 {
        self.world.dt
    }

    pub fn timeout(&self) -> f64 {
        self.world.timeout
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINI_WORLD: &str = r#"
name = "mini"
dt = 0.05
timeout = 30.0

[route]
points = [[0.0, 0.0], [50.0, 0.0]]

[drivable]
polygon = [[-5.0, -5.0], [55.0, -5.0], [55.0, 5.0], [-5.0, 5.0]]

[[signals]]
stop_line = [[20.0, -3.0], [20.0, 3.0]]
phases = [["green", 5.0], ["yellow", 1.0], ["red", 4.0]]

[[agents]]
kind = "vehicle"
path = [[30.0, 0.0], [50.0, 0.0]]
speed = 2.0

[[pedestrians]]
start = [25.0, -5.0]
end = [25.0, 5.0]
speed = 1.0
start_time = 3.0
"#;

    #[test]
    fn parses_and_validates() {
        let w = World::from_toml(MINI_WORLD).unwrap();
        assert_eq!(w.name, "mini");
        assert_eq!(w.signals.len(), 1);
        assert_eq!(w.agents.len(), 1);
    }

    #[test]
    fn rejects_bad_worlds() {
        let no_route = MINI_WORLD.replace("[[0.0, 0.0], [50.0, 0.0]]", "[[0.0, 0.0]]");
        assert!(World::from_toml(&no_route).is_err());
        let bad_phase = MINI_WORLD.replace(r#"["green", 5.0]"#, r#"["green", -5.0]"#);
        assert!(World::from_toml(&bad_phase).is_err());
    }

    #[test]
    fn instantiate_is_deterministic_per_seed() {
        let w = World::from_toml(MINI_WORLD).unwrap();
        let a = w.instantiate(3);
        let b = w.instantiate(3);
        let c = w.instantiate(4);
        assert_eq!(a.signals[0].offset.to_bits(), b.signals[0].offset.to_bits());
        assert_eq!(a.agents[0].speed.to_bits(), b.agents[0].speed.to_bits());
        assert_ne!(a.signals[0].offset.to_bits(), c.signals[0].offset.to_bits());
    }

    #[test]
    fn signal_cycles_through_phases() {
        let w = World::from_toml(MINI_WORLD).unwrap();
        let mut inst = w.instantiate(0);
        inst.signals[0].offset = 0.0;
        let sig = &inst.signals[0];
        assert_eq!(sig.state_at(0.0), SignalState::Green);
        assert_eq!(sig.state_at(4.9), SignalState::Green);
        assert_eq!(sig.state_at(5.5), SignalState::Yellow);
        assert_eq!(sig.state_at(6.5), SignalState::Red);
        assert_eq!(sig.state_at(10.5), SignalState::Green, "cycle wraps");
    }

    #[test]
    fn agent_and_pedestrian_motion() {
        let w = World::from_toml(MINI_WORLD).unwrap();
        let mut inst = w.instantiate(0);
        inst.agents[0].speed = 2.0;
        inst.agents[0].start_time = 0.0;
        let (p, yaw) = inst.agents[0].pose_at(5.0);
        assert!((p[0] - 40.0).abs() < 1e-12);
        assert_eq!(yaw, 0.0);
        // holds at path end
        let (p_end, _) = inst.agents[0].pose_at(100.0);
        assert!((p_end[0] - 50.0).abs() < 1e-12);
        assert_eq!(inst.agents[0].speed_at(100.0), 0.0);

        inst.pedestrians[0].start_time = 3.0;
        assert!(inst.pedestrians[0].position_at(2.0).is_none());
        let pp = inst.pedestrians[0].position_at(8.0).unwrap();
        assert!((pp[1] - 0.0).abs() < 1e-12, "halfway across at t=8");
        assert!(inst.pedestrians[0].position_at(14.0).is_none(), "crossing done");
    }
}
