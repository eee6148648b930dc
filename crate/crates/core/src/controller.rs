//! Inverse dynamics: PID controllers that turn predicted waypoints into
//! actuation, deterministic action extraction from the Beta heads, and the
//! situational fusion of the two action sources.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use crate::losses::BetaActionParams;
use crate::model::NavCommand;
use crate::types::{ControlAction, Trajectory};

/// Trajectories whose farthest waypoint is below this are treated as
/// degenerate by the lateral controller (steer falls back to 0).
pub const DEGENERATE_REACH: f64 = 1e-6;

/// Pedal outputs below this are zeroed (actuation deadband).
pub const PEDAL_DEADBAND: f64 = 1e-3;

/// PID gains and windup/window settings for one controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Sliding error-window length for the integral term.
    pub window: usize,
    /// Anti-windup clamp on the windowed mean error.
    pub windup: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        PidGains { kp: 1.0, ki: 0.1, kd: 0.0, window: 20, windup: 1.0 }
    }
}

/// Sliding-window PID state. One instance per controlled signal per episode.
#[derive(Debug, Clone)]
pub struct PidState {
    gains: PidGains,
    errors: VecDeque<f64>,
    window_sum: f64,
    prev_error: Option<f64>,
}

impl PidState {
    pub fn new(gains: PidGains) -> Self {
        PidState {
            gains,
            errors: VecDeque::with_capacity(gains.window.max(1)),
            window_sum: 0.0,
            prev_error: None,
        }
    }

    pub fn reset(&mut self) {
        self.errors.clear();
        self.window_sum = 0.0;
        self.prev_error = None;
    }

    /// One controller step: kp·e + ki·clamp(mean window e) + kd·Δe.
    pub fn step(&mut self, error: f64) -> f64 {
        let window = self.gains.window.max(1);
        self.errors.push_back(error);
        self.window_sum += error;
        if self.errors.len() > window {
            self.window_sum -= self.errors.pop_front().expect("window non-empty");
        }
        let integral =
            (self.window_sum / self.errors.len() as f64).clamp(-self.gains.windup, self.gains.windup);
        let derivative = match self.prev_error {
            Some(prev) => error - prev,
            None => 0.0,
        };
        self.prev_error = Some(error);
        self.gains.kp * error + self.gains.ki * integral + self.gains.kd * derivative
    }

    pub fn integral_term(&self) -> f64 {
        if self.errors.is_empty() {
            return 0.0;
        }
        (self.window_sum / self.errors.len() as f64).clamp(-self.gains.windup, self.gains.windup)
    }
}

/// Blend weights for the situational action fusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionWeights {
    /// Weight on the control-branch action while turning.
    pub w_turn: f64,
    /// Weight on the control-branch action on straight segments.
    pub w_straight: f64,
    /// |steer| above this marks the situation as turning.
    pub steer_threshold: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights { w_turn: 0.7, w_straight: 0.3, steer_threshold: 0.1 }
    }
}

/// Driving situation for the fusion rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Situation {
    Turning,
    Straight,
}

/// Waypoint-tracking controller pair (lateral + longitudinal) with its
/// mutable PID state.
#[derive(Debug, Clone)]
pub struct WaypointController {
    lateral: PidState,
    longitudinal: PidState,
    /// Time between consecutive trajectory waypoints (s).
    waypoint_dt: f64,
}

impl WaypointController {
    pub fn new(lateral: PidGains, longitudinal: PidGains, waypoint_dt: f64) -> Self {
        WaypointController {
            lateral: PidState::new(lateral),
            longitudinal: PidState::new(longitudinal),
            waypoint_dt,
        }
    }

    pub fn reset(&mut self) {
        self.lateral.reset();
        self.longitudinal.reset();
    }

    /// Steering from the heading error to the aim point (mean of the first
    /// two waypoints). Degenerate trajectories steer 0.
    pub fn lateral_control(&mut self, traj: &Trajectory) -> f64 {
        if traj.horizon() == 0 || traj.max_reach() < DEGENERATE_REACH {
            return 0.0;
        }
        let wps = traj.waypoints();
        let aim = if wps.len() >= 2 {
            [(wps[0][0] + wps[1][0]) / 2.0, (wps[0][1] + wps[1][1]) / 2.0]
        } else {
            wps[0]
        };
        let heading_error = aim[1].atan2(aim[0]);
        self.lateral.step(heading_error).clamp(-1.0, 1.0)
    }

    /// Throttle/brake from the speed error against the target speed implied
    /// by the mean waypoint spacing.
    pub fn longitudinal_control(&mut self, traj: &Trajectory, current_speed: f64) -> (f64, f64) {
        let target = target_speed(traj, self.waypoint_dt);
        let out = self.longitudinal.step(target - current_speed);
        if out >= PEDAL_DEADBAND {
            (out.min(1.0), 0.0)
        } else if out <= -PEDAL_DEADBAND {
            (0.0, (-out).min(1.0))
        } else {
            (0.0, 0.0)
        }
    }

    /// Full trajectory-tracking action.
    pub fn track(&mut self, traj: &Trajectory, current_speed: f64) -> ControlAction {
        let steer = self.lateral_control(traj);
        let (throttle, brake) = self.longitudinal_control(traj, current_speed);
        ControlAction::clamped(steer, throttle, brake)
    }
}

/// Target speed from mean waypoint spacing divided by the waypoint interval.
pub fn target_speed(traj: &Trajectory, waypoint_dt: f64) -> f64 {
    if traj.horizon() == 0 || waypoint_dt <= 0.0 {
        return 0.0;
    }
    let mean_spacing = traj
        .deltas()
        .iter()
        .map(|d| d[0].hypot(d[1]))
        .sum::<f64>()
        / traj.horizon() as f64;
    mean_spacing / waypoint_dt
}

/// Deterministic action from the Beta heads: distribution means mapped to
/// the action ranges, acceleration split into throttle/brake at zero.
pub fn extract_action(params: &BetaActionParams) -> ControlAction {
    let steer = 2.0 * params.steer.mean() - 1.0;
    let accel = 2.0 * params.accel.mean() - 1.0;
    if accel >= 0.0 {
        ControlAction::clamped(steer, accel, 0.0)
    } else {
        ControlAction::clamped(steer, 0.0, -accel)
    }
}

/// Turning iff the active command is a turn or the control head steers
/// beyond the threshold.
pub fn classify_situation(
    command: NavCommand,
    a_ctrl: &ControlAction,
    weights: &FusionWeights,
) -> Situation {
    match command {
        NavCommand::Left | NavCommand::Right => Situation::Turning,
        _ if a_ctrl.steer.abs() > weights.steer_threshold => Situation::Turning,
        _ => Situation::Straight,
    }
}

/// Convex per-field blend of the two action sources; the control-branch
/// weight is `w_turn` while turning and `w_straight` otherwise.
pub fn fuse_actions(
    a_traj: &ControlAction,
    a_ctrl: &ControlAction,
    situation: Situation,
    weights: &FusionWeights,
) -> ControlAction {
    let w = match situation {
        Situation::Turning => weights.w_turn,
        Situation::Straight => weights.w_straight,
    }
    .clamp(0.0, 1.0);
    let blend = |t: f64, c: f64| (1.0 - w) * t + w * c;
    ControlAction::clamped(
        blend(a_traj.steer, a_ctrl.steer),
        blend(a_traj.throttle, a_ctrl.throttle),
        blend(a_traj.brake, a_ctrl.brake),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::BetaParams;
    use proptest::prelude::*;

    fn straight_traj() -> Trajectory {
        Trajectory::from_deltas(vec![[1.0, 0.0]; 4])
    }

    #[test]
    fn straight_ahead_steers_zero() {
        let mut c = WaypointController::new(PidGains::default(), PidGains::default(), 0.5);
        assert_eq!(c.lateral_control(&straight_traj()), 0.0);
    }

    #[test]
    fn mirrored_trajectories_steer_symmetrically() {
        let left = Trajectory::from_deltas(vec![[1.0, 0.2], [1.0, 0.4], [1.0, 0.6], [1.0, 0.8]]);
        let right = Trajectory::from_deltas(
            left.deltas().iter().map(|d| [d[0], -d[1]]).collect::<Vec<_>>(),
        );
        let gains = PidGains { kp: 0.8, ki: 0.05, kd: 0.1, ..Default::default() };
        let mut cl = WaypointController::new(gains, PidGains::default(), 0.5);
        let mut cr = WaypointController::new(gains, PidGains::default(), 0.5);
        let sl = cl.lateral_control(&left);
        let sr = cr.lateral_control(&right);
        assert!(sl > 0.0);
        assert_eq!(sl.to_bits(), (-sr).to_bits(), "exact mirror symmetry");
    }

    #[test]
    fn pure_p_step_response() {
        // constant heading error 0.2 rad, kp=1, ki=kd=0 → steer 0.2 always
        let gains = PidGains { kp: 1.0, ki: 0.0, kd: 0.0, ..Default::default() };
        let mut pid = PidState::new(gains);
        for _ in 0..50 {
            let out = pid.step(0.2);
            assert!((out - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_trajectory_steers_zero() {
        let traj = Trajectory::from_deltas(vec![[1e-9, 1e-9]; 4]);
        let gains = PidGains { kp: 5.0, ..Default::default() };
        let mut c = WaypointController::new(gains, PidGains::default(), 0.5);
        assert_eq!(c.lateral_control(&traj), 0.0);
    }

    #[test]
    fn longitudinal_zero_error_idles() {
        // waypoints spaced 1 m at 0.5 s → target 2 m/s
        let mut c = WaypointController::new(PidGains::default(), PidGains::default(), 0.5);
        let (throttle, brake) = c.longitudinal_control(&straight_traj(), 2.0);
        assert_eq!(throttle, 0.0);
        assert_eq!(brake, 0.0);
    }

    #[test]
    fn stationary_target_brakes() {
        let stopped = Trajectory::from_deltas(vec![[0.0, 0.0]; 4]);
        let mut c = WaypointController::new(PidGains::default(), PidGains::default(), 0.5);
        let (throttle, brake) = c.longitudinal_control(&stopped, 5.0);
        assert_eq!(throttle, 0.0);
        assert!(brake > 0.0);
    }

    #[test]
    fn pure_p_speed_error_saturates_throttle() {
        // speed error 2 m/s, kp=0.5 → raw 1.0 → throttle min(1, 1.0) = 1.0
        let gains = PidGains { kp: 0.5, ki: 0.0, kd: 0.0, ..Default::default() };
        let mut c = WaypointController::new(PidGains::default(), gains, 0.5);
        // target from straight_traj at 0.5 s spacing is 2 m/s; current 0
        let (throttle, brake) = c.longitudinal_control(&straight_traj(), 0.0);
        assert_eq!(brake, 0.0);
        assert!((throttle - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_gain_pid_is_silent() {
        let gains = PidGains { kp: 0.0, ki: 0.0, kd: 0.0, ..Default::default() };
        let mut pid = PidState::new(gains);
        for e in [-3.0, 5.0, 0.4] {
            assert_eq!(pid.step(e), 0.0);
        }
    }

    #[test]
    fn integral_respects_windup_clamp() {
        let gains = PidGains { kp: 0.0, ki: 1.0, kd: 0.0, window: 5, windup: 0.6 };
        let mut pid = PidState::new(gains);
        for _ in 0..50 {
            pid.step(10.0);
        }
        assert!(pid.integral_term() <= 0.6 + 1e-15);
        assert!((pid.step(10.0) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn extract_symmetric_beta_idles() {
        let p = BetaActionParams {
            steer: BetaParams::new(2.5, 2.5).unwrap(),
            accel: BetaParams::new(4.0, 4.0).unwrap(),
        };
        let a = extract_action(&p);
        assert_eq!(a.steer, 0.0);
        assert_eq!(a.throttle, 0.0);
        assert_eq!(a.brake, 0.0);
    }

    #[test]
    fn extract_accel_split() {
        let p = BetaActionParams {
            steer: BetaParams::new(2.0, 2.0).unwrap(),
            accel: BetaParams::new(3.0, 1.0).unwrap(),
        };
        let a = extract_action(&p);
        assert!((a.throttle - 0.5).abs() < 1e-15);
        assert_eq!(a.brake, 0.0);

        let p = BetaActionParams {
            steer: BetaParams::new(2.0, 2.0).unwrap(),
            accel: BetaParams::new(1.0, 3.0).unwrap(),
        };
        let a = extract_action(&p);
        assert_eq!(a.throttle, 0.0);
        assert!((a.brake - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fusion_fixed_point_on_equal_inputs() {
        let a = ControlAction::clamped(0.3, 0.6, 0.0);
        let w = FusionWeights::default();
        for situation in [Situation::Turning, Situation::Straight] {
            let fused = fuse_actions(&a, &a, situation, &w);
            assert!((fused.steer - a.steer).abs() < 1e-15);
            assert!((fused.throttle - a.throttle).abs() < 1e-15);
            assert_eq!(fused.brake, a.brake);
        }
    }

    #[test]
    fn fusion_endpoint_weights() {
        let a_traj = ControlAction::clamped(-0.4, 0.2, 0.0);
        let a_ctrl = ControlAction::clamped(0.8, 0.0, 0.5);
        let w = FusionWeights { w_turn: 1.0, w_straight: 0.0, ..Default::default() };
        let fused = fuse_actions(&a_traj, &a_ctrl, Situation::Turning, &w);
        assert_eq!(fused.steer, a_ctrl.steer);
        assert_eq!(fused.brake, a_ctrl.brake);
        let fused = fuse_actions(&a_traj, &a_ctrl, Situation::Straight, &w);
        assert_eq!(fused.steer, a_traj.steer);
        assert_eq!(fused.throttle, a_traj.throttle);
    }

    #[test]
    fn fusion_hand_blend() {
        // steer (0.2, 0.6), turning, w_turn=0.7 → 0.3·0.2 + 0.7·0.6 = 0.48
        let a_traj = ControlAction::clamped(0.2, 0.0, 0.0);
        let a_ctrl = ControlAction::clamped(0.6, 0.0, 0.0);
        let w = FusionWeights::default();
        let fused = fuse_actions(&a_traj, &a_ctrl, Situation::Turning, &w);
        assert!((fused.steer - 0.48).abs() < 1e-12);
    }

    #[test]
    fn situation_classification() {
        let w = FusionWeights::default();
        let mild = ControlAction::clamped(0.05, 0.3, 0.0);
        let sharp = ControlAction::clamped(0.4, 0.3, 0.0);
        assert_eq!(classify_situation(NavCommand::Follow, &mild, &w), Situation::Straight);
        assert_eq!(classify_situation(NavCommand::Follow, &sharp, &w), Situation::Turning);
        assert_eq!(classify_situation(NavCommand::Left, &mild, &w), Situation::Turning);
        assert_eq!(classify_situation(NavCommand::Right, &mild, &w), Situation::Turning);
    }

    proptest! {
        #[test]
        fn fused_action_always_in_range(
            s1 in -1.0f64..1.0, t1 in 0.0f64..1.0, b1 in 0.0f64..1.0,
            s2 in -1.0f64..1.0, t2 in 0.0f64..1.0, b2 in 0.0f64..1.0,
            w_turn in 0.0f64..1.0,
        ) {
            let a = ControlAction::clamped(s1, t1, b1);
            let b = ControlAction::clamped(s2, t2, b2);
            let w = FusionWeights { w_turn, ..Default::default() };
            let fused = fuse_actions(&a, &b, Situation::Turning, &w);
            prop_assert!(fused.is_valid());
        }

        #[test]
        fn fusion_monotone_in_blend_weight(
            s1 in -1.0f64..1.0, s2 in -1.0f64..1.0,
            w_lo in 0.0f64..1.0, w_hi in 0.0f64..1.0,
        ) {
            prop_assume!(w_lo <= w_hi);
            let a = ControlAction::clamped(s1, 0.0, 0.0);
            let b = ControlAction::clamped(s2, 0.0, 0.0);
            let lo = fuse_actions(&a, &b,
                Situation::Turning, &FusionWeights { w_turn: w_lo, ..Default::default() });
            let hi = fuse_actions(&a, &b,
                Situation::Turning, &FusionWeights { w_turn: w_hi, ..Default::default() });
            // moving weight toward a_ctrl moves steer toward a_ctrl's steer
            if s2 >= s1 {
                prop_assert!(hi.steer >= lo.steer - 1e-12);
            } else {
                prop_assert!(hi.steer <= lo.steer + 1e-12);
            }
        }

        #[test]
        fn lateral_mirror_negates_steer(
            dys in proptest::collection::vec(-0.9f64..0.9, 4),
            kp in 0.1f64..2.0,
        ) {
            let deltas: Vec<[f64; 2]> = dys.iter().map(|&dy| [1.0, dy]).collect();
            let mirrored: Vec<[f64; 2]> = dys.iter().map(|&dy| [1.0, -dy]).collect();
            let gains = PidGains { kp, ki: 0.3, kd: 0.2, ..Default::default() };
            let mut ca = WaypointController::new(gains, PidGains::default(), 0.5);
            let mut cb = WaypointController::new(gains, PidGains::default(), 0.5);
            let sa = ca.lateral_control(&Trajectory::from_deltas(deltas));
            let sb = cb.lateral_control(&Trajectory::from_deltas(mirrored));
            prop_assert!((sa + sb).abs() < 1e-12);
        }
    }
}
