//! Privileged scripted expert: pure-pursuit steering plus PID speed control
//! over the route, with direct access to world state for hazard handling
//! (signals, stop zones, lead vehicles, crossing pedestrians). Besides the
//! action it emits the supervision signals used for behavior cloning: the
//! T-step future waypoint plan, its target speed, and a discounted
//! progress-minus-penalty value estimate.

use super::geometry::{wrap_angle, world_to_frame};
use super::world::{SignalState, WorldInstance};
use super::StepContext;
use crate::controller::{PidGains, PidState};
use crate::types::{ControlAction, Trajectory};

/// Cruise speed on open road (m/s).
pub const CRUISE_SPEED: f64 = 6.0;
/// Planning deceleration for approach profiles (m/s²).
const PLAN_DECEL: f64 = 3.0;
/// Planning acceleration (m/s²).
const PLAN_ACCEL: f64 = 2.0;
/// Stop margin before stop lines (m).
const STOP_MARGIN: f64 = 2.5;
/// Discount for the value estimate.
const VALUE_GAMMA: f64 = 0.9;
/// Value plan horizon (waypoint intervals).
const VALUE_HORIZON: usize = 10;
/// Waypoint horizon T for the supervision trajectory.
pub const EXPERT_HORIZON: usize = 4;

#[derive(Debug, Clone)]
pub struct ExpertDecision {
    pub action: ControlAction,
    pub trajectory: Trajectory,
    pub target_speed: f64,
    pub value: f64,
}

/// Mutable expert state: controller windows and per-zone stop progress.
pub struct Expert {
    lateral: PidState,
    longitudinal: PidState,
    stop_satisfied: Vec<bool>,
    waypoint_dt: f64,
}

impl Expert {
    pub fn new(world: &WorldInstance, waypoint_interval: usize) -> Self {
        Expert {
            lateral: PidState::new(PidGains { kp: 1.1, ki: 0.0, kd: 0.3, ..Default::default() }),
            longitudinal: PidState::new(PidGains {
                kp: 0.6,
                ki: 0.08,
                kd: 0.0,
                ..Default::default()
            }),
            stop_satisfied: vec![false; world.world.stop_signs.len()],
            waypoint_dt: waypoint_interval as f64 * world.dt(),
        }
    }

    /// Speed allowed by a stop `dist` meters ahead under the planning
    /// deceleration.
    fn approach_speed(dist: f64) -> f64 {
        (2.0 * PLAN_DECEL * (dist - STOP_MARGIN).max(0.0)).sqrt()
    }

    /// Privileged target speed from curvature and every hazard ahead.
    /// Returns (target, braking_hazard_active).
    fn target_speed(&mut self, ctx: &StepContext, station: f64) -> (f64, bool) {
        let world = ctx.world;
        let route = &world.route;
        let mut target = CRUISE_SPEED;

        // slow for curvature ahead
        let h_now = route.heading_at(station + 1.0);
        let h_mid = route.heading_at(station + 6.0);
        let turn = wrap_angle(h_mid - h_now).abs();
        let turn_factor = (1.0 - turn / 1.2).clamp(0.35, 1.0);
        target *= turn_factor;

        // slow toward route end
        let remaining = route.length() - station;
        target = target.min(Self::approach_speed(remaining + STOP_MARGIN + 1.0));

        let mut hazard = false;

        for sig in &world.signals {
            let (s_sig, lat) = route.project(sig.stop_point());
            if lat > 4.0 {
                continue;
            }
            let dist = s_sig - station;
            if dist < -0.5 || dist > 40.0 {
                continue;
            }
            let state = sig.state_at(ctx.time);
            let must_stop = match state {
                SignalState::Red => true,
                // stop for yellow unless already on top of the line
                SignalState::Yellow => dist > 3.0,
                SignalState::Green => false,
            };
            if must_stop {
                let allowed = Self::approach_speed(dist);
                if allowed < target {
                    target = allowed;
                    hazard = true;
                }
            }
        }

        for (i, stop) in world.world.stop_signs.iter().enumerate() {
            if self.stop_satisfied[i] {
                continue;
            }
            let centroid = super::geometry::polygon_centroid(&stop.trigger);
            let (s_zone, lat) = route.project(centroid);
            if lat > 4.0 {
                continue;
            }
            let dist = s_zone - station;
            let inside =
                super::geometry::point_in_polygon(ctx.ego.position(), &stop.trigger);
            if inside {
                // hold until fully stopped, then mark satisfied
                if ctx.ego.v < 0.05 {
                    self.stop_satisfied[i] = true;
                } else {
                    target = 0.0;
                    hazard = true;
                }
            } else if (-1.0..=35.0).contains(&dist) {
                let allowed = Self::approach_speed(dist + 1.0);
                if allowed < target {
                    target = allowed;
                    hazard = true;
                }
            }
        }

        for agent in &world.agents {
            let (pos, _) = agent.pose_at(ctx.time);
            let (s_a, lat) = route.project(pos);
            if lat > 2.5 {
                continue;
            }
            let gap = s_a - station - agent.spec.half_length - 2.0;
            if s_a <= station || gap > 25.0 {
                continue;
            }
            let lead_speed = agent.speed_at(ctx.time);
            let allowed = if gap < 4.0 {
                0.0
            } else {
                (lead_speed + (gap - 4.0) * 0.4).min(Self::approach_speed(gap + STOP_MARGIN))
            };
            if allowed < target {
                target = allowed;
                hazard = true;
            }
        }

        for ped in &world.pedestrians {
            let Some(pos) = ped.position_at(ctx.time) else { continue };
            let (s_p, lat) = route.project(pos);
            if lat > 6.0 {
                continue;
            }
            let gap = s_p - station;
            if gap < -1.0 || gap > 22.0 {
                continue;
            }
            let allowed = Self::approach_speed(gap - 3.0);
            if allowed < target {
                target = allowed;
                hazard = true;
            }
        }

        (target.max(0.0), hazard)
    }

    /// Pure-pursuit steering toward a speed-scaled lookahead point.
    fn steer(&mut self, ctx: &StepContext, station: f64) -> f64 {
        let route = &ctx.world.route;
        let lookahead = (1.5 + 0.6 * ctx.ego.v).clamp(2.0, 8.0);
        let aim_world = route.at_station(station + lookahead);
        let aim = world_to_frame(aim_world, ctx.ego.position(), ctx.ego.yaw);
        let alpha = aim[1].atan2(aim[0]);
        let wheelbase = ctx.world.world.vehicle.wheelbase;
        let wheel = (2.0 * wheelbase * alpha.sin() / lookahead).atan();
        let raw = wheel / ctx.world.world.vehicle.max_steer_angle;
        self.lateral.step(raw.clamp(-1.5, 1.5)).clamp(-1.0, 1.0)
    }

    /// Future speed plan toward `target`, and the waypoint stations it
    /// implies.
    fn plan(&self, v0: f64, target: f64, horizon: usize) -> (Vec<f64>, Vec<f64>) {
        let dt = self.waypoint_dt;
        let mut speeds = Vec::with_capacity(horizon);
        let mut stations = Vec::with_capacity(horizon);
        let mut v = v0;
        let mut s = 0.0;
        for _ in 0..horizon {
            let dv = (target - v).clamp(-PLAN_DECEL * dt, PLAN_ACCEL * dt);
            v = (v + dv).max(0.0);
            s += v * dt;
            speeds.push(v);
            stations.push(s);
        }
        (speeds, stations)
    }

    pub fn decide(&mut self, ctx: &StepContext) -> ExpertDecision {
        let (station, _) = ctx.world.route.project(ctx.ego.position());
        let (target, hazard) = self.target_speed(ctx, station);

        let steer = self.steer(ctx, station);
        let pedal = self.longitudinal.step(target - ctx.ego.v);
        let action = if pedal >= 0.0 {
            ControlAction::clamped(steer, pedal, 0.0)
        } else {
            ControlAction::clamped(steer, 0.0, -pedal)
        };

        // supervision waypoints along the route at the planned progress
        let (_, stations) = self.plan(ctx.ego.v, target, EXPERT_HORIZON);
        let waypoints: Vec<[f64; 2]> = stations
            .iter()
            .map(|ds| {
                let p = ctx.world.route.at_station(station + ds);
                world_to_frame(p, ctx.ego.position(), ctx.ego.yaw)
            })
            .collect();
        let trajectory = Trajectory::from_waypoints(&waypoints);

        // discounted progress-minus-penalty value
        let (speeds, _) = self.plan(ctx.ego.v, target, VALUE_HORIZON);
        let mut value = 0.0;
        let mut discount = 1.0;
        for v in speeds {
            value += discount * (v / CRUISE_SPEED);
            discount *= VALUE_GAMMA;
        }
        value *= 1.0 - VALUE_GAMMA;
        if hazard {
            value -= 0.5;
        }
        let value = value.clamp(-1.0, 1.0);

        ExpertDecision { action, trajectory, target_speed: target, value }
    }
}
