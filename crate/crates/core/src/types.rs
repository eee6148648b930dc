//! Domain value types shared across the policy, controller, losses and
//! simulator.

use serde::{Deserialize, Serialize};

/// Raw actuation command. Steer is signed, throttle/brake are mutually
/// exclusive by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlAction {
    pub steer: f64,
    pub throttle: f64,
    pub brake: f64,
}

impl ControlAction {
    /// Clamp fields into range and re-enforce throttle/brake exclusivity by
    /// folding them into a net acceleration command.
    pub fn clamped(steer: f64, throttle: f64, brake: f64) -> Self {
        let net = throttle.clamp(0.0, 1.0) - brake.clamp(0.0, 1.0);
        ControlAction {
            steer: steer.clamp(-1.0, 1.0),
            throttle: net.max(0.0),
            brake: (-net).max(0.0),
        }
    }

    /// Steer 0, no pedal input.
    pub fn coast() -> Self {
        ControlAction { steer: 0.0, throttle: 0.0, brake: 0.0 }
    }

    /// Signed acceleration command in [-1, 1]: throttle minus brake.
    pub fn accel(&self) -> f64 {
        self.throttle - self.brake
    }

    pub fn is_valid(&self) -> bool {
        (-1.0..=1.0).contains(&self.steer)
            && (0.0..=1.0).contains(&self.throttle)
            && (0.0..=1.0).contains(&self.brake)
            && self.throttle * self.brake == 0.0
    }
}

/// Planned ego-frame path: T waypoints (meters, +x forward) and the per-step
/// deltas that generate them from the origin.
///
/// Waypoints are always the exact running float sum of the deltas, so
/// `w[t] == w[t-1] + delta[t]` holds bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    waypoints: Vec<[f64; 2]>,
    deltas: Vec<[f64; 2]>,
}

impl Trajectory {
    pub fn from_deltas(deltas: Vec<[f64; 2]>) -> Self {
        let mut waypoints = Vec::with_capacity(deltas.len());
        let mut cur = [0.0f64; 2];
        for d in &deltas {
            cur = [cur[0] + d[0], cur[1] + d[1]];
            waypoints.push(cur);
        }
        Trajectory { waypoints, deltas }
    }

    /// Build from waypoint positions. Deltas are the successive differences;
    /// waypoints are then re-accumulated from those deltas so the exactness
    /// invariant holds even where float subtraction does not round-trip.
    pub fn from_waypoints(waypoints: &[[f64; 2]]) -> Self {
        let mut deltas = Vec::with_capacity(waypoints.len());
        let mut prev = [0.0f64; 2];
        for w in waypoints {
            deltas.push([w[0] - prev[0], w[1] - prev[1]]);
            prev = *w;
        }
        Self::from_deltas(deltas)
    }

    pub fn horizon(&self) -> usize {
        self.waypoints.len()
    }

    pub fn waypoints(&self) -> &[[f64; 2]] {
        &self.waypoints
    }

    pub fn deltas(&self) -> &[[f64; 2]] {
        &self.deltas
    }

    /// Largest waypoint distance from the origin.
    pub fn max_reach(&self) -> f64 {
        self.waypoints
            .iter()
            .map(|w| w[0].hypot(w[1]))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamped_enforces_ranges_and_exclusivity() {
        let a = ControlAction::clamped(1.7, 0.9, 0.4);
        assert_eq!(a.steer, 1.0);
        assert!((a.throttle - 0.5).abs() < 1e-15);
        assert_eq!(a.brake, 0.0);
        assert!(a.is_valid());

        let b = ControlAction::clamped(-2.0, 0.2, 0.9);
        assert_eq!(b.steer, -1.0);
        assert_eq!(b.throttle, 0.0);
        assert!((b.brake - 0.7).abs() < 1e-15);
        assert!(b.is_valid());
    }

    #[test]
    fn trajectory_accumulation_is_bit_exact() {
        let deltas = vec![[0.1, 0.2], [0.3, -0.7], [1e-9, 13.37], [-0.1, 0.1]];
        let t = Trajectory::from_deltas(deltas);
        for i in 0..t.horizon() {
            let prev = if i == 0 { [0.0, 0.0] } else { t.waypoints()[i - 1] };
            let expect = [prev[0] + t.deltas()[i][0], prev[1] + t.deltas()[i][1]];
            assert_eq!(t.waypoints()[i][0].to_bits(), expect[0].to_bits());
            assert_eq!(t.waypoints()[i][1].to_bits(), expect[1].to_bits());
        }
    }

    #[test]
    fn from_waypoints_preserves_exactness_invariant() {
        let wps = vec![[1e16, 0.0], [1e16 + 1.0, 2.0], [3.0, 4.0]];
        let t = Trajectory::from_waypoints(&wps);
        for i in 0..t.horizon() {
            let prev = if i == 0 { [0.0, 0.0] } else { t.waypoints()[i - 1] };
            let expect = [prev[0] + t.deltas()[i][0], prev[1] + t.deltas()[i][1]];
            assert_eq!(t.waypoints()[i][0].to_bits(), expect[0].to_bits());
            assert_eq!(t.waypoints()[i][1].to_bits(), expect[1].to_bits());
        }
    }
}
