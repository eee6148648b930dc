//! Infraction detection: a pure function of the completed step trace, so
//! re-running it over the same trace always yields the same events.

use serde::{Deserialize, Serialize};

use super::geometry::{disc_overlaps_polygon, dist, point_in_polygon, OrientedBox};
use super::record::StepRecord;
use super::world::{SignalState, WorldInstance};
use super::{Termination, BLOCKED_SPEED};

/// Infraction taxonomy; scoring coefficients and per-km tables key on this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfractionKind {
    CollisionPedestrian,
    CollisionVehicle,
    CollisionLayout,
    RedLight,
    StopSign,
    OffRoad,
    RouteDeviation,
    RouteTimeout,
    AgentBlocked,
}

impl InfractionKind {
    pub const ALL: [InfractionKind; 9] = [
        InfractionKind::CollisionPedestrian,
        InfractionKind::CollisionVehicle,
        InfractionKind::CollisionLayout,
        InfractionKind::RedLight,
        InfractionKind::StopSign,
        InfractionKind::OffRoad,
        InfractionKind::RouteDeviation,
        InfractionKind::RouteTimeout,
        InfractionKind::AgentBlocked,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            InfractionKind::CollisionPedestrian => "collision_pedestrian",
            InfractionKind::CollisionVehicle => "collision_vehicle",
            InfractionKind::CollisionLayout => "collision_layout",
            InfractionKind::RedLight => "red_light",
            InfractionKind::StopSign => "stop_sign",
            InfractionKind::OffRoad => "off_road",
            InfractionKind::RouteDeviation => "route_deviation",
            InfractionKind::RouteTimeout => "route_timeout",
            InfractionKind::AgentBlocked => "agent_blocked",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfractionEvent {
    pub kind: InfractionKind,
    pub time: f64,
    pub position: [f64; 2],
}

/// Scan a completed trace for every infraction. Contact-style events
/// (collisions, off-road excursions) fire once per contact episode; rule
/// events (red light, stop sign) fire once per crossing.
pub fn detect_infractions(
    world: &WorldInstance,
    steps: &[StepRecord],
    termination: Termination,
    end_time: f64,
) -> Vec<InfractionEvent> {
    let mut events = Vec::new();
    if steps.is_empty() {
        return events;
    }
    let ego_radius = world.world.vehicle.radius;

    let mut agent_contact = vec![false; world.agents.len()];
    let mut ped_contact = vec![false; world.pedestrians.len()];
    let mut obstacle_contact = vec![false; world.world.obstacles.len()];
    let mut off_road = false;
    let mut sig_side = vec![0.0f64; world.signals.len()];
    let mut stop_inside = vec![false; world.world.stop_signs.len()];
    let mut stop_min_speed = vec![f64::INFINITY; world.world.stop_signs.len()];
    let mut stop_done = vec![false; world.world.stop_signs.len()];

    for (_k, step) in steps.iter().enumerate() {
        let pos = step.ego.position();
        let t = step.time;

        // collisions with scripted agents
        for (i, agent) in world.agents.iter().enumerate() {
            let (center, yaw) = agent.pose_at(t);
            let obox = OrientedBox {
                center,
                yaw,
                half_length: agent.spec.half_length,
                half_width: agent.spec.half_width,
            };
            let corners = obox.corners();
            let overlap = disc_overlaps_polygon(pos, ego_radius, &corners);
            if overlap && !agent_contact[i] {
                events.push(InfractionEvent {
                    kind: InfractionKind::CollisionVehicle,
                    time: t,
                    position: pos,
                });
            }
            agent_contact[i] = overlap;
        }

        // collisions with pedestrians
        for (i, ped) in world.pedestrians.iter().enumerate() {
            let overlap = match ped.position_at(t) {
                Some(p) => dist(p, pos) <= ego_radius + ped.spec.radius,
                None => false,
            };
            if overlap && !ped_contact[i] {
                events.push(InfractionEvent {
                    kind: InfractionKind::CollisionPedestrian,
                    time: t,
                    position: pos,
                });
            }
            ped_contact[i] = overlap;
        }

        // collisions with static layout
        for (i, obstacle) in world.world.obstacles.iter().enumerate() {
            let overlap = disc_overlaps_polygon(pos, ego_radius, &obstacle.polygon);
            if overlap && !obstacle_contact[i] {
                events.push(InfractionEvent {
                    kind: InfractionKind::CollisionLayout,
                    time: t,
                    position: pos,
                });
            }
            obstacle_contact[i] = overlap;
        }

        // red light: the ego changes sides of the stop line during a red
        // phase. Signed-side tracking makes a crossing that lands exactly
        // on the line count once.
        for (i, sig) in world.signals.iter().enumerate() {
            let [a, b] = sig.spec.stop_line;
            let dir = [b[0] - a[0], b[1] - a[1]];
            let side = dir[0] * (pos[1] - a[1]) - dir[1] * (pos[0] - a[0]);
            if side != 0.0 {
                let crossed = sig_side[i] != 0.0 && side.signum() != sig_side[i].signum();
                // only count crossings near the line itself, not far past
                // its extension
                let (d2_a, _) = super::geometry::point_segment(pos, a, b);
                if crossed && sig.state_at(t) == SignalState::Red && d2_a < 25.0 {
                    events.push(InfractionEvent {
                        kind: InfractionKind::RedLight,
                        time: t,
                        position: pos,
                    });
                }
                sig_side[i] = side;
            }
        }

        // stop signs: must drop below walking pace inside the trigger zone
        for (i, stop) in world.world.stop_signs.iter().enumerate() {
            let inside = point_in_polygon(pos, &stop.trigger);
            if inside {
                stop_min_speed[i] = stop_min_speed[i].min(step.ego.v);
            }
            if stop_inside[i] && !inside && !stop_done[i] {
                stop_done[i] = true;
                if stop_min_speed[i] >= BLOCKED_SPEED {
                    events.push(InfractionEvent {
                        kind: InfractionKind::StopSign,
                        time: t,
                        position: pos,
                    });
                }
            }
            stop_inside[i] = inside;
        }

        // off-road excursions
        let outside = !point_in_polygon(pos, &world.world.drivable.polygon);
        if outside && !off_road {
            events.push(InfractionEvent { kind: InfractionKind::OffRoad, time: t, position: pos });
        }
        off_road = outside;
    }

    let last_pos = steps.last().expect("non-empty").ego.position();
    match termination {
        Termination::RouteDeviation => events.push(InfractionEvent {
            kind: InfractionKind::RouteDeviation,
            time: end_time,
            position: last_pos,
        }),
        Termination::Timeout => events.push(InfractionEvent {
            kind: InfractionKind::RouteTimeout,
            time: end_time,
            position: last_pos,
        }),
        Termination::Blocked => events.push(InfractionEvent {
            kind: InfractionKind::AgentBlocked,
            time: end_time,
            position: last_pos,
        }),
        Termination::RouteComplete => {}
    }
    events
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Measurements, NavCommand};
    use crate::sim::world::World;
    use crate::sim::EgoState;
    use crate::types::{ControlAction, Trajectory};

    fn make_step(time: f64, x: f64, y: f64, v: f64) -> StepRecord {
        StepRecord {
            time,
            ego: EgoState { x, y, yaw: 0.0, v },
            meas: Measurements { speed: v, command: NavCommand::Follow, goal: [10.0, 0.0] },
            expert_action: ControlAction::coast(),
            expert_trajectory: Trajectory::from_deltas(vec![[1.0, 0.0]; 4]),
            expert_target_speed: 0.0,
            expert_value: 0.0,
            policy_action: ControlAction::coast(),
            observation: None,
        }
    }

    fn world_with_zones() -> WorldInstance {
        let mut w = World::from_toml(
            r#"
name = "zones"
[route]
points = [[0.0, 0.0], [100.0, 0.0]]
[drivable]
polygon = [[-5.0, -6.0], [110.0, -6.0], [110.0, 6.0], [-5.0, 6.0]]
[[signals]]
stop_line = [[30.0, -4.0], [30.0, 4.0]]
phases = [["red", 1000.0]]
[[stop_signs]]
trigger = [[50.0, -4.0], [56.0, -4.0], [56.0, 4.0], [50.0, 4.0]]
[[pedestrians]]
start = [70.0, -0.2]
end = [70.0, 0.2]
speed = 0.005
start_time = 0.0
"#,
        )
        .unwrap()
        .instantiate(0);
        w.signals[0].offset = 0.0;
        w
    }

    fn drive_through(speeds_fn: impl Fn(f64) -> f64) -> Vec<StepRecord> {
        // straight line x = 2t at 2 m/s, 0..45 s
        (0..900)
            .map(|k| {
                let t = k as f64 * 0.05;
                let x = 2.0 * t;
                make_step(t, x, 0.0, speeds_fn(x))
            })
            .collect()
    }

    #[test]
    fn stop_satisfied_inside_trigger_no_event() {
        let w = world_with_zones();
        // stop inside the zone (x in 50..56): dip below 0.1 m/s there
        let steps = drive_through(|x| if (51.0..54.0).contains(&x) { 0.05 } else { 2.0 });
        let events = detect_infractions(&w, &steps, Termination::RouteComplete, 45.0);
        assert!(events.iter().all(|e| e.kind != InfractionKind::StopSign));
    }

    #[test]
    fn rolling_through_stop_and_red_light() {
        let w = world_with_zones();
        let steps = drive_through(|_| 2.0);
        let events = detect_infractions(&w, &steps, Termination::RouteComplete, 45.0);
        let count = |kind: InfractionKind| events.iter().filter(|e| e.kind == kind).count();
        assert_eq!(count(InfractionKind::RedLight), 1, "{events:?}");
        assert_eq!(count(InfractionKind::StopSign), 1);
        // slow pedestrian sits on the lane center at x=70 → collision
        assert_eq!(count(InfractionKind::CollisionPedestrian), 1);
    }

    #[test]
    fn synthetic_trace_with_three_known_violations() {
        let w = world_with_zones();
        // roll the stop sign, run the red light, clip the pedestrian
        let steps = drive_through(|_| 2.0);
        let events = detect_infractions(&w, &steps, Termination::RouteComplete, 45.0);
        assert_eq!(events.len(), 3, "{events:?}");
        // detector is a pure function of the trace
        let again = detect_infractions(&w, &steps, Termination::RouteComplete, 45.0);
        assert_eq!(events, again);
        // red light crossing at x=30 → t=15 s ± one step
        let red = events.iter().find(|e| e.kind == InfractionKind::RedLight).unwrap();
        assert!((red.time - 15.0).abs() <= 0.05 + 1e-9);
        // pedestrian contact as the ego disc reaches x≈70−1.35: t ≈ 34.3
        let ped =
            events.iter().find(|e| e.kind == InfractionKind::CollisionPedestrian).unwrap();
        assert!((ped.time - (70.0 - 1.35) / 2.0).abs() <= 0.3, "{}", ped.time);
    }

    #[test]
    fn termination_events_and_offroad() {
        let w = world_with_zones();
        let mut steps = vec![make_step(0.0, 0.0, 0.0, 2.0)];
        steps.push(make_step(0.05, 0.0, 7.0, 2.0)); // off the drivable area
        steps.push(make_step(0.10, 0.0, 7.1, 2.0)); // still off: no second event
        let events = detect_infractions(&w, &steps, Termination::RouteDeviation, 0.15);
        let kinds: Vec<_> = events.iter().map(|e| e.kind).collect();
        assert_eq!(
            kinds,
            vec![InfractionKind::OffRoad, InfractionKind::RouteDeviation],
            "{events:?}"
        );
    }
}
