//! The learned driving stack as a closed-loop policy: network forward pass,
//! Beta-mean action extraction, PID trajectory tracking, and situational
//! fusion.

use crate::controller::{
    classify_situation, extract_action, fuse_actions, FusionWeights, PidGains, WaypointController,
};
use crate::error::Result;
use crate::model::Model;
use crate::sim::{Decision, Policy, StepContext};

/// Model + controllers, evaluated closed-loop.
pub struct NeuralPolicy {
    model: Model,
    controller: WaypointController,
    lateral_gains: PidGains,
    longitudinal_gains: PidGains,
    fusion: FusionWeights,
    waypoint_dt: f64,
}

impl NeuralPolicy {
    pub fn new(
        model: Model,
        lateral: PidGains,
        longitudinal: PidGains,
        fusion: FusionWeights,
        waypoint_dt: f64,
    ) -> Self {
        NeuralPolicy {
            controller: WaypointController::new(lateral, longitudinal, waypoint_dt),
            lateral_gains: lateral,
            longitudinal_gains: longitudinal,
            model,
            fusion,
            waypoint_dt,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }
}

impl Policy for NeuralPolicy {
    fn reset(&mut self) {
        self.controller =
            WaypointController::new(self.lateral_gains, self.longitudinal_gains, self.waypoint_dt);
    }

    fn decide(&mut self, ctx: &StepContext) -> Result<Decision> {
        let out = self.model.forward(ctx.obs, &ctx.meas)?;
        let a_ctrl = extract_action(&out.betas[0]);
        let a_traj = self.controller.track(&out.trajectory, ctx.ego.v);
        let situation = classify_situation(ctx.meas.command, &a_ctrl, &self.fusion);
        let action = fuse_actions(&a_traj, &a_ctrl, situation, &self.fusion);
        Ok(Decision {
            action,
            ctrl_steer: a_ctrl.steer,
            traj_steer: a_traj.steer,
            trajectory: Some(out.trajectory.clone()),
            outputs: Some(out),
        })
    }

    fn obs_grid(&self) -> usize {
        self.model.config().obs_size
    }
}
