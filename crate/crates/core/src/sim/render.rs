//! Ego-frame rasterization: the observation grid the policy sees, the
//! per-category ground-truth masks used by the interpretability metrics,
//! and the measurement vector (speed, navigation command, goal point).
//!
//! The window is a forward-facing square: x ahead in [0, extent), y lateral
//! in [−extent/2, extent/2). Row 0 is the far edge, column 0 the left edge.

use super::geometry::{
    disc_overlaps_rect, frame_to_world, point_in_polygon, wrap_angle, world_to_frame, OrientedBox,
    Point,
};
use super::world::{AgentKind, SignalState, WorldInstance};
use super::EgoState;
use crate::model::{Measurements, NavCommand, Observation};

/// Forward window extent (m); cells are `extent / grid` on a side.
pub const WINDOW_EXTENT: f64 = 32.0;

/// Observation channel indices.
pub const CH_DRIVABLE: usize = 0;
pub const CH_ROUTE: usize = 1;
pub const CH_VEHICLES: usize = 2;
pub const CH_PEDESTRIANS: usize = 3;
pub const CH_SIGNALS: usize = 4;
pub const OBS_CHANNELS: usize = 5;

/// Route lookahead for the navigation command (m).
const COMMAND_LOOKAHEAD: f64 = 12.0;
/// Heading change that marks a turn command (rad).
const TURN_THRESHOLD: f64 = 0.35;
/// Goal point lookahead along the route (m).
const GOAL_LOOKAHEAD: f64 = 10.0;

/// Ground-truth object categories reported by the interpretability metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MaskCategory {
    Pedestrians,
    Cyclists,
    Vehicles,
    TrafficLights,
}

impl MaskCategory {
    pub const ALL: [MaskCategory; 4] = [
        MaskCategory::Pedestrians,
        MaskCategory::Cyclists,
        MaskCategory::Vehicles,
        MaskCategory::TrafficLights,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            MaskCategory::Pedestrians => "pedestrians",
            MaskCategory::Cyclists => "cyclists",
            MaskCategory::Vehicles => "vehicles",
            MaskCategory::TrafficLights => "traffic_lights",
        }
    }
}

/// Semantic classes for the concept-level report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SemanticClass {
    Road,
    Roadline,
    Sidewalk,
}

impl SemanticClass {
    pub const ALL: [SemanticClass; 3] =
        [SemanticClass::Road, SemanticClass::Roadline, SemanticClass::Sidewalk];

    pub fn label(&self) -> &'static str {
        match self {
            SemanticClass::Road => "road",
            SemanticClass::Roadline => "roadline",
            SemanticClass::Sidewalk => "sidewalk",
        }
    }
}

/// Center of cell (row, col) in the ego frame for a `grid`-sized raster.
fn cell_center(row: usize, col: usize, grid: usize) -> Point {
    let cell = WINDOW_EXTENT / grid as f64;
    let x = WINDOW_EXTENT - (row as f64 + 0.5) * cell;
    let y = WINDOW_EXTENT / 2.0 - (col as f64 + 0.5) * cell;
    [x, y]
}

fn for_each_cell(grid: usize, mut f: impl FnMut(usize, Point)) {
    for row in 0..grid {
        for col in 0..grid {
            f(row * grid + col, cell_center(row, col, grid))
        }
    }
}

/// True if any of a 3×3 subsample of the cell satisfies `pred` (world
/// coordinates).
fn cell_hits(
    local_center: Point,
    cell: f64,
    ego: &EgoState,
    mut pred: impl FnMut(Point) -> bool,
) -> bool {
    for di in -1i32..=1 {
        for dj in -1i32..=1 {
            let p = [
                local_center[0] + di as f64 * cell / 3.0,
                local_center[1] + dj as f64 * cell / 3.0,
            ];
            if pred(frame_to_world(p, [ego.x, ego.y], ego.yaw)) {
                return true;
            }
        }
    }
    false
}

/// Signal zones currently requiring attention: red or yellow phase, plus
/// stop-sign triggers within their visibility range.
fn active_signal_regions(world: &WorldInstance, ego: &EgoState, time: f64) -> Vec<Vec<Point>> {
    let mut regions = Vec::new();
    for sig in &world.signals {
        if matches!(sig.state_at(time), SignalState::Red | SignalState::Yellow) {
            // thicken the stop line into a thin quad
            let [a, b] = sig.spec.stop_line;
            let dir = super::geometry::sub(b, a);
            let n = super::geometry::norm(dir);
            if n == 0.0 {
                continue;
            }
            let normal = [-dir[1] / n * 0.6, dir[0] / n * 0.6];
            regions.push(vec![
                super::geometry::add(a, normal),
                super::geometry::add(b, normal),
                super::geometry::sub(b, normal),
                super::geometry::sub(a, normal),
            ]);
        }
    }
    for stop in &world.world.stop_signs {
        let center = super::geometry::polygon_centroid(&stop.trigger);
        let d = super::geometry::dist([ego.x, ego.y], center);
        if d <= stop.visible_from {
            regions.push(stop.trigger.clone());
        }
    }
    regions
}

/// Rasterize the five-channel occupancy observation.
pub fn render_observation(
    world: &WorldInstance,
    ego: &EgoState,
    time: f64,
    grid: usize,
) -> Observation {
    let mut obs = Observation::zeros(OBS_CHANNELS, grid);
    let cell = WINDOW_EXTENT / grid as f64;
    let ego_pos = [ego.x, ego.y];

    let (ego_station, _) = world.route.project(ego_pos);
    let agent_boxes: Vec<(AgentKind, OrientedBox)> = world
        .agents
        .iter()
        .map(|a| {
            let (center, yaw) = a.pose_at(time);
            (
                a.spec.kind,
                OrientedBox {
                    center,
                    yaw,
                    half_length: a.spec.half_length,
                    half_width: a.spec.half_width,
                },
            )
        })
        .collect();
    let peds: Vec<(Point, f64)> = world
        .pedestrians
        .iter()
        .filter_map(|p| p.position_at(time).map(|pos| (pos, p.spec.radius)))
        .collect();
    let signal_regions = active_signal_regions(world, ego, time);

    for_each_cell(grid, |idx, local| {
        let world_center = frame_to_world(local, ego_pos, ego.yaw);
        let (row, col) = (idx / grid, idx % grid);

        if point_in_polygon(world_center, &world.world.drivable.polygon) {
            obs.set(CH_DRIVABLE, row, col, 1.0);
        }
        // remaining route only (behind-ego route is not drawn)
        let (s, d) = world.route.project(world_center);
        if d <= cell && s >= ego_station - cell {
            obs.set(CH_ROUTE, row, col, 1.0);
        }
        let vehicle_hit = cell_hits(local, cell, ego, |p| {
            agent_boxes.iter().any(|(_, b)| b.contains(p))
        });
        if vehicle_hit {
            obs.set(CH_VEHICLES, row, col, 1.0);
        }
        let ped_hit = peds.iter().any(|(pos, r)| {
            // disc vs cell rectangle in the ego frame
            let local_ped = world_to_frame(*pos, ego_pos, ego.yaw);
            disc_overlaps_rect(local_ped, *r, local, [cell / 2.0, cell / 2.0])
        });
        if ped_hit {
            obs.set(CH_PEDESTRIANS, row, col, 1.0);
        }
        let sig_hit = cell_hits(local, cell, ego, |p| {
            signal_regions.iter().any(|poly| point_in_polygon(p, poly))
        });
        if sig_hit {
            obs.set(CH_SIGNALS, row, col, 1.0);
        }
    });
    obs
}

/// Boolean raster of one ground-truth category at `grid` resolution.
pub fn render_category_mask(
    world: &WorldInstance,
    ego: &EgoState,
    time: f64,
    grid: usize,
    category: MaskCategory,
) -> Vec<bool> {
    let mut mask = vec![false; grid * grid];
    let cell = WINDOW_EXTENT / grid as f64;
    let ego_pos = [ego.x, ego.y];
    match category {
        MaskCategory::Vehicles | MaskCategory::Cyclists => {
            let want = if category == MaskCategory::Vehicles {
                AgentKind::Vehicle
            } else {
                AgentKind::Cyclist
            };
            let boxes: Vec<OrientedBox> = world
                .agents
                .iter()
                .filter(|a| a.spec.kind == want)
                .map(|a| {
                    let (center, yaw) = a.pose_at(time);
                    OrientedBox {
                        center,
                        yaw,
                        half_length: a.spec.half_length,
                        half_width: a.spec.half_width,
                    }
                })
                .collect();
            for_each_cell(grid, |idx, local| {
                mask[idx] = cell_hits(local, cell, ego, |p| boxes.iter().any(|b| b.contains(p)));
            });
        }
        MaskCategory::Pedestrians => {
            let peds: Vec<(Point, f64)> = world
                .pedestrians
                .iter()
                .filter_map(|p| p.position_at(time).map(|pos| (pos, p.spec.radius)))
                .collect();
            for_each_cell(grid, |idx, local| {
                mask[idx] = peds.iter().any(|(pos, r)| {
                    let local_ped = world_to_frame(*pos, ego_pos, ego.yaw);
                    disc_overlaps_rect(local_ped, *r, local, [cell / 2.0, cell / 2.0])
                });
            });
        }
        MaskCategory::TrafficLights => {
            let regions = active_signal_regions(world, ego, time);
            for_each_cell(grid, |idx, local| {
                mask[idx] =
                    cell_hits(local, cell, ego, |p| regions.iter().any(|g| point_in_polygon(p, g)));
            });
        }
    }
    mask
}

/// Boolean raster of one semantic class at `grid` resolution.
pub fn render_semantic_mask(
    world: &WorldInstance,
    ego: &EgoState,
    grid: usize,
    class: SemanticClass,
) -> Vec<bool> {
    let mut mask = vec![false; grid * grid];
    let cell = WINDOW_EXTENT / grid as f64;
    for_each_cell(grid, |idx, local| {
        let p = frame_to_world(local, [ego.x, ego.y], ego.yaw);
        mask[idx] = match class {
            SemanticClass::Road => point_in_polygon(p, &world.world.drivable.polygon),
            SemanticClass::Roadline => world
                .lanes
                .iter()
                .any(|lane| lane.project(p).1 <= cell * 0.5),
            SemanticClass::Sidewalk => world
                .world
                .sidewalks
                .iter()
                .any(|s| point_in_polygon(p, &s.polygon)),
        };
    });
    mask
}

/// Measurement vector for the policy: current speed, the navigation command
/// derived from the route heading change ahead, and the goal point.
pub fn measurements(world: &WorldInstance, ego: &EgoState) -> Measurements {
    let (station, _) = world.route.project([ego.x, ego.y]);
    let h_now = world.route.heading_at(station);
    let h_ahead = world.route.heading_at(station + COMMAND_LOOKAHEAD);
    let turn = wrap_angle(h_ahead - h_now);
    let command = if turn > TURN_THRESHOLD {
        NavCommand::Left
    } else if turn < -TURN_THRESHOLD {
        NavCommand::Right
    } else {
        NavCommand::Follow
    };
    let goal_world = world.route.at_station(station + GOAL_LOOKAHEAD);
    let goal = world_to_frame(goal_world, [ego.x, ego.y], ego.yaw);
    Measurements { speed: ego.v, command, goal }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::world::World;

    fn empty_world() -> WorldInstance {
        World::from_toml(
            r#"
name = "empty"
[route]
points = [[0.0, 0.0], [60.0, 0.0]]
[drivable]
polygon = [[-5.0, -6.0], [70.0, -6.0], [70.0, 6.0], [-5.0, 6.0]]
"#,
        )
        .unwrap()
        .instantiate(0)
    }

    fn ego_at(x: f64, y: f64, yaw: f64) -> EgoState {
        EgoState { x, y, yaw, v: 0.0 }
    }

    #[test]
    fn empty_world_renders_only_drivable_and_route() {
        let w = empty_world();
        let obs = render_observation(&w, &ego_at(5.0, 0.0, 0.0), 0.0, 32);
        let sum = |c: usize| -> f64 {
            (0..32).flat_map(|i| (0..32).map(move |j| (i, j))).map(|(i, j)| obs.get(c, i, j)).sum()
        };
        assert!(sum(CH_DRIVABLE) > 0.0);
        assert!(sum(CH_ROUTE) > 0.0);
        assert_eq!(sum(CH_VEHICLES), 0.0);
        assert_eq!(sum(CH_PEDESTRIANS), 0.0);
        assert_eq!(sum(CH_SIGNALS), 0.0);
    }

    #[test]
    fn rendering_is_rigid_motion_covariant() {
        // moving ego and world together leaves the raster unchanged
        let base = World::from_toml(
            r#"
name = "cov"
[route]
points = [[0.0, 0.0], [60.0, 0.0]]
[drivable]
polygon = [[-5.0, -6.0], [70.0, -6.0], [70.0, 6.0], [-5.0, 6.0]]
[[agents]]
kind = "vehicle"
path = [[20.0, 1.0], [30.0, 1.0]]
speed = 0.0
"#,
        )
        .unwrap();
        let shift = [13.0, -7.5];
        let mut moved = base.clone();
        let mv = |p: &mut Point| {
            p[0] += shift[0];
            p[1] += shift[1];
        };
        moved.route.points.iter_mut().for_each(mv);
        moved.drivable.polygon.iter_mut().for_each(mv);
        moved.agents[0].path.iter_mut().for_each(mv);

        let wa = base.instantiate(1);
        let wb = moved.instantiate(1);
        let oa = render_observation(&wa, &ego_at(5.0, 0.0, 0.1), 0.0, 16);
        let ob =
            render_observation(&wb, &ego_at(5.0 + shift[0], shift[1], 0.1), 0.0, 16);
        assert_eq!(oa.data(), ob.data());
    }

    #[test]
    fn vehicle_ahead_lands_in_expected_cells() {
        let w = World::from_toml(
            r#"
name = "veh"
[route]
points = [[0.0, 0.0], [60.0, 0.0]]
[drivable]
polygon = [[-5.0, -6.0], [70.0, -6.0], [70.0, 6.0], [-5.0, 6.0]]
[[agents]]
kind = "vehicle"
path = [[10.0, 0.0], [20.0, 0.0]]
speed = 0.0
half_length = 2.0
half_width = 0.9
"#,
        )
        .unwrap()
        .instantiate(0);
        // ego at origin facing +x; vehicle center 10 m ahead
        let obs = render_observation(&w, &ego_at(0.0, 0.0, 0.0), 0.0, 32);
        // cell size 1 m; vehicle spans x in [8, 12], y in [-0.9, 0.9]
        // x=10 → row = 32 − 10 − 0.5 → rows 31−10=21 (x∈[10,11) is row 21)
        let mut hits = Vec::new();
        for i in 0..32 {
            for j in 0..32 {
                if obs.get(CH_VEHICLES, i, j) > 0.0 {
                    hits.push((i, j));
                }
            }
        }
        assert!(!hits.is_empty());
        for (i, j) in &hits {
            let c = cell_center(*i, *j, 32);
            assert!(
                c[0] > 7.0 && c[0] < 13.0 && c[1].abs() < 2.0,
                "unexpected vehicle cell at {c:?}"
            );
        }
        // the cell straight ahead at 10 m must be hit
        let row = (WINDOW_EXTENT - 10.0 - 0.5) as usize; // x≈10.5 center
        let col = 15; // y≈+0.5 → col 15 center exactly at +0.5
        assert!(
            obs.get(CH_VEHICLES, row, col) > 0.0 || obs.get(CH_VEHICLES, row, 16) > 0.0,
            "vehicle missing from the straight-ahead cells"
        );
    }

    #[test]
    fn command_reflects_route_turns() {
        let left_turn = World::from_toml(
            r#"
name = "turn"
[route]
points = [[0.0, 0.0], [12.0, 0.0], [12.0, 30.0]]
[drivable]
polygon = [[-5.0, -6.0], [20.0, -6.0], [20.0, 36.0], [-5.0, 36.0]]
"#,
        )
        .unwrap()
        .instantiate(0);
        let m = measurements(&left_turn, &ego_at(2.0, 0.0, 0.0));
        assert_eq!(m.command, NavCommand::Left);
        let m_far = measurements(&left_turn, &ego_at(12.0, 20.0, 1.57));
        assert_eq!(m_far.command, NavCommand::Follow);
    }

    #[test]
    fn goal_point_is_ahead_in_ego_frame() {
        let w = empty_world();
        let m = measurements(&w, &ego_at(5.0, 0.0, 0.0));
        assert!((m.goal[0] - GOAL_LOOKAHEAD).abs() < 1e-9);
        assert!(m.goal[1].abs() < 1e-9);
    }

    #[test]
    fn pedestrian_mask_catches_small_discs() {
        let w = World::from_toml(
            r#"
name = "ped"
[route]
points = [[0.0, 0.0], [60.0, 0.0]]
[drivable]
polygon = [[-5.0, -6.0], [70.0, -6.0], [70.0, 6.0], [-5.0, 6.0]]
[[pedestrians]]
start = [10.0, -2.0]
end = [10.0, 2.0]
speed = 1.0
start_time = 0.0
radius = 0.35
"#,
        )
        .unwrap()
        .instantiate(0);
        let mut found = false;
        for inst in [&w] {
            let mask =
                render_category_mask(inst, &ego_at(0.0, 0.0, 0.0), 2.0, 8, MaskCategory::Pedestrians);
            found |= mask.iter().any(|&b| b);
        }
        assert!(found, "0.35 m pedestrian must land in the 8x8 mask");
    }
}
