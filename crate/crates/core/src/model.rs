//! Two-branch driving policy: a strided conv encoder over the ego-view
//! occupancy grid, an MLP measurement encoder, a GRU trajectory branch with
//! cumulative waypoint prediction, and a control branch that unrolls a
//! temporal GRU with spatial attention and a Beta policy head.
//!
//! All feature stacks handed to the diversity loss are ReLU-terminated, so
//! they are non-negative by construction. Beta head outputs go through
//! softplus + 1, so both concentration parameters are strictly above 1.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Rng, Tensor, Var, RNG_ALGORITHM};
use crate::error::{Error, Result};
use crate::losses::{BetaActionParams, BetaParams, FeatureMapStack};
use crate::types::Trajectory;

/// Speed input normalizer (m/s) for the measurement encoder.
const SPEED_NORM: f64 = 10.0;
/// Goal-point input normalizer (m).
const GOAL_NORM: f64 = 20.0;

const CHECKPOINT_MAGIC: &[u8; 8] = b"DVDRCKPT";
const CHECKPOINT_VERSION: u32 = 1;

// ── observation & measurements ───────────────────────────────────────

/// Ego-view occupancy grid, `channels × size × size`, values in [0, 1].
/// Channel order: drivable area, remaining route, vehicles, pedestrians,
/// active signal zones.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    channels: usize,
    size: usize,
    data: Vec<f64>,
}

impl Observation {
    pub fn new(channels: usize, size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * size * size {
            return Err(Error::BadTensorData {
                context: "Observation::new",
                shape: vec![channels, size, size],
                expected: channels * size * size,
                got: data.len(),
            });
        }
        Ok(Observation { channels, size, data })
    }

    pub fn zeros(channels: usize, size: usize) -> Self {
        Observation { channels, size, data: vec![0.0; channels * size * size] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.size + i) * self.size + j]
    }

    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f64) {
        self.data[(c * self.size + i) * self.size + j] = v;
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.channels, self.size, self.size], self.data.clone())
            .expect("observation dims consistent")
    }
}

/// Discrete navigation command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NavCommand {
    Follow,
    Left,
    Right,
    Straight,
}

impl NavCommand {
    pub fn one_hot(&self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[*self as usize] = 1.0;
        v
    }

    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            0 => Ok(NavCommand::Follow),
            1 => Ok(NavCommand::Left),
            2 => Ok(NavCommand::Right),
            3 => Ok(NavCommand::Straight),
            _ => Err(Error::InvalidArgument(format!("bad nav command index {i}"))),
        }
    }
}

/// Scalar measurement inputs: speed, navigation command, goal point in the
/// ego frame (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurements {
    pub speed: f64,
    pub command: NavCommand,
    pub goal: [f64; 2],
}

impl Measurements {
    /// Encoder input vector: normalized speed, command one-hot, normalized
    /// goal. Length 7.
    pub fn to_vector(&self) -> Vec<f64> {
        let oh = self.command.one_hot();
        vec![
            self.speed / SPEED_NORM,
            oh[0],
            oh[1],
            oh[2],
            oh[3],
            self.goal[0] / GOAL_NORM,
            self.goal[1] / GOAL_NORM,
        ]
    }
}

// ── config ───────────────────────────────────────────────────────────

/// Network dimensions. The encoder output grid is `obs_size / 4`, so
/// `obs_size` must be a multiple of 4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub obs_channels: usize,
    pub obs_size: usize,
    /// Image feature maps out of the encoder.
    pub n_f: usize,
    /// Measurement feature channels tiled into F_traj.
    pub meas_dim: usize,
    /// GRU hidden width (both branches).
    pub hidden: usize,
    /// Future steps T.
    pub horizon: usize,
    /// Width of the previous-action embedding fed to the temporal GRU.
    pub action_embed: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            obs_channels: 5,
            obs_size: 32,
            n_f: 16,
            meas_dim: 16,
            hidden: 64,
            horizon: 4,
            action_embed: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.obs_size % 4 != 0 || self.obs_size < 8 {
            return Err(Error::Config(format!(
                "obs_size must be a multiple of 4 and at least 8, got {}",
                self.obs_size
            )));
        }
        for (name, v) in [
            ("obs_channels", self.obs_channels),
            ("n_f", self.n_f),
            ("meas_dim", self.meas_dim),
            ("hidden", self.hidden),
            ("horizon", self.horizon),
            ("action_embed", self.action_embed),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Encoder output grid side length.
    pub fn grid(&self) -> usize {
        self.obs_size / 4
    }

    fn conv_channels(&self) -> (usize, usize) {
        ((self.n_f / 2).max(1), (3 * self.n_f / 4).max(1))
    }

    /// Measurement encoder input width.
    pub const MEAS_INPUT: usize = 7;
}

// ── model ────────────────────────────────────────────────────────────

/// Per-graph handles to every parameter, plus the config.
pub struct ModelVars {
    vars: BTreeMap<String, Var>,
}

impl ModelVars {
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Graph-side outputs of one forward pass.
pub struct PolicyVars {
    /// Encoder image stack `[n_f, g, g]` (saliency source).
    pub image_features: Var,
    /// `[n_f + meas_dim, g, g]` concatenated stack for the trajectory branch.
    pub f_traj: Var,
    /// Per-step control feature stacks, t = 0..=T.
    pub f_ctrl: Vec<Var>,
    /// Waypoint deltas, t = 1..=T, each `[2, 1]`.
    pub deltas: Vec<Var>,
    /// Accumulated waypoints, t = 1..=T, each `[2, 1]`.
    pub waypoints: Vec<Var>,
    /// Beta head outputs (alpha, beta), each `[2, 1]`, t = 0..=T.
    pub beta_seq: Vec<(Var, Var)>,
    /// Spatial attention maps, each `[g·g, 1]`, t = 0..=T.
    pub attention: Vec<Var>,
    /// Predicted current speed (m/s), `[1, 1]`.
    pub speed: Var,
    /// Predicted value estimate, `[1, 1]`.
    pub value: Var,
    /// Combined latent (pooled image + measurement features), the feature
    /// matched by the sub-task loss.
    pub latent: Var,
}

/// Plain-value outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct PolicyOutputs {
    pub image_features: FeatureMapStack,
    pub f_traj: FeatureMapStack,
    pub f_ctrl: Vec<FeatureMapStack>,
    pub trajectory: Trajectory,
    pub betas: Vec<BetaActionParams>,
    pub attention: Vec<Vec<f64>>,
    pub speed: f64,
    pub value: f64,
    pub latent: Vec<f64>,
}

/// The policy network: named parameter tensors plus dimensions.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
}

fn xavier(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.uniform_in(-a, a)).collect())
        .expect("xavier dims")
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (c1, c2) = config.conv_channels();
        let (nf, md, hd, ae) = (config.n_f, config.meas_dim, config.hidden, config.action_embed);
        let g2 = config.grid() * config.grid();
        let jdim = nf + md;

        let mut params = BTreeMap::new();
        let add_linear = |params: &mut BTreeMap<String, Tensor>,
                              rng: &mut Rng,
                              name: &str,
                              out_dim: usize,
                              in_dim: usize| {
            params.insert(format!("{name}.w"), xavier(rng, out_dim, in_dim, in_dim, out_dim));
            params.insert(format!("{name}.b"), Tensor::zeros(vec![out_dim, 1]));
        };
        let add_conv = |params: &mut BTreeMap<String, Tensor>,
                        rng: &mut Rng,
                        name: &str,
                        out_c: usize,
                        in_c: usize| {
            let fan_in = in_c * 9;
            let fan_out = out_c * 9;
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Tensor::new(
                vec![out_c, in_c, 3, 3],
                (0..out_c * in_c * 9).map(|_| rng.uniform_in(-a, a)).collect(),
            )
            .expect("conv dims");
            params.insert(format!("{name}.w"), w);
            params.insert(format!("{name}.b"), Tensor::zeros(vec![out_c]));
        };
        let add_gru = |params: &mut BTreeMap<String, Tensor>,
                       rng: &mut Rng,
                       name: &str,
                       in_dim: usize,
                       hidden: usize| {
            for gate in ["z", "r", "n"] {
                params.insert(
                    format!("{name}.w{gate}"),
                    xavier(rng, hidden, in_dim, in_dim, hidden),
                );
                params.insert(
                    format!("{name}.u{gate}"),
                    xavier(rng, hidden, hidden, hidden, hidden),
                );
                params.insert(format!("{name}.b{gate}"), Tensor::zeros(vec![hidden, 1]));
            }
        };

        add_conv(&mut params, rng, "conv1", c1, config.obs_channels);
        add_conv(&mut params, rng, "conv2", c2, c1);
        add_conv(&mut params, rng, "conv3", nf, c2);
        add_linear(&mut params, rng, "meas1", hd, ModelConfig::MEAS_INPUT);
        add_linear(&mut params, rng, "meas2", md, hd);
        add_linear(&mut params, rng, "traj_h0", hd, jdim);
        add_gru(&mut params, rng, "traj_gru", 4, hd);
        add_linear(&mut params, rng, "traj_head", 2, hd);
        add_linear(&mut params, rng, "ctrl_h0", hd, jdim);
        add_gru(&mut params, rng, "ctrl_gru", nf + ae, hd);
        add_linear(&mut params, rng, "attn", g2, 2 * hd);
        add_linear(&mut params, rng, "fuse_meas", nf, md);
        add_linear(&mut params, rng, "fuse_h", nf, hd);
        add_linear(&mut params, rng, "act_embed", ae, 2);
        add_linear(&mut params, rng, "policy1", hd, nf + hd);
        add_linear(&mut params, rng, "policy2", 4, hd);
        add_linear(&mut params, rng, "speed_head", 1, jdim);
        add_linear(&mut params, rng, "value_head", 1, jdim);

        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Load every parameter onto a graph. Trainable when `trainable`,
    /// constant leaves otherwise (inference).
    pub fn load_into(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        let vars = self
            .params
            .iter()
            .map(|(name, tensor)| {
                let v = if trainable { g.param(tensor.clone()) } else { g.leaf(tensor.clone()) };
                (name.clone(), v)
            })
            .collect();
        ModelVars { vars }
    }

    // ── forward pieces ───────────────────────────────────────────────

    /// Image + measurement encoders. Returns the ReLU'd image stack
    /// `[n_f, g, g]` and the ReLU'd measurement feature column
    /// `[meas_dim, 1]`.
    pub fn encode_g(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        obs: Var,
        meas: Var,
    ) -> Result<(Var, Var)> {
        let shape = g.shape(obs).to_vec();
        if shape != vec![self.config.obs_channels, self.config.obs_size, self.config.obs_size] {
            return Err(Error::ShapeMismatch {
                op: "encode observation",
                lhs: shape,
                rhs: vec![self.config.obs_channels, self.config.obs_size, self.config.obs_size],
            });
        }
        let c1 = g.conv2d(obs, vars.get("conv1.w"), vars.get("conv1.b"), 2, 1)?;
        let a1 = g.relu(c1);
        let c2 = g.conv2d(a1, vars.get("conv2.w"), vars.get("conv2.b"), 2, 1)?;
        let a2 = g.relu(c2);
        let c3 = g.conv2d(a2, vars.get("conv3.w"), vars.get("conv3.b"), 1, 1)?;
        let img = g.relu(c3);

        if g.shape(meas) != [ModelConfig::MEAS_INPUT, 1] {
            return Err(Error::ShapeMismatch {
                op: "encode measurements",
                lhs: g.shape(meas).to_vec(),
                rhs: vec![ModelConfig::MEAS_INPUT, 1],
            });
        }
        let m1 = self.linear(g, vars, "meas1", meas)?;
        let m1 = g.relu(m1);
        let m2 = self.linear(g, vars, "meas2", m1)?;
        let meas_feat = g.relu(m2);
        Ok((img, meas_feat))
    }

    fn linear(&self, g: &mut Graph, vars: &ModelVars, name: &str, x: Var) -> Result<Var> {
        let wx = g.matmul(vars.get(&format!("{name}.w")), x)?;
        g.add(wx, vars.get(&format!("{name}.b")))
    }

    fn gru_step(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        name: &str,
        x: Var,
        h: Var,
    ) -> Result<Var> {
        let gate = |g: &mut Graph, w: &str, u: &str, b: &str, rh: Var| -> Result<Var> {
            let wx = g.matmul(vars.get(w), x)?;
            let uh = g.matmul(vars.get(u), rh)?;
            let s = g.add(wx, uh)?;
            g.add(s, vars.get(b))
        };
        let z_pre = gate(g, &format!("{name}.wz"), &format!("{name}.uz"), &format!("{name}.bz"), h)?;
        let z = g.sigmoid(z_pre);
        let r_pre = gate(g, &format!("{name}.wr"), &format!("{name}.ur"), &format!("{name}.br"), h)?;
        let r = g.sigmoid(r_pre);
        let rh = g.mul(r, h)?;
        let n_pre = gate(g, &format!("{name}.wn"), &format!("{name}.un"), &format!("{name}.bn"), rh)?;
        let n = g.tanh(n_pre);
        // h' = (1−z)∘h + z∘n
        let d = g.sub(n, h)?;
        let zd = g.mul(z, d)?;
        g.add(h, zd)
    }

    /// Spatial mean over a `[c, g, g]` stack, reshaped to a `[c, 1]` column.
    fn pool(&self, g: &mut Graph, stack: Var) -> Result<Var> {
        let c = g.shape(stack)[0];
        let m1 = g.mean(stack, Some(2))?;
        let m2 = g.mean(m1, Some(1))?;
        g.reshape(m2, vec![c, 1])
    }

    /// Trajectory branch: GRU over T steps from the pooled F_traj latent,
    /// accumulating waypoints from the origin.
    /// Returns (per-step hiddens h_0..h_T, deltas, waypoints).
    pub fn trajectory_branch_g(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        f_traj: Var,
        goal: Var,
    ) -> Result<(Vec<Var>, Vec<Var>, Vec<Var>)> {
        let pooled = self.pool(g, f_traj)?;
        let h0_pre = self.linear(g, vars, "traj_h0", pooled)?;
        let mut h = g.tanh(h0_pre);
        let mut hiddens = vec![h];
        let mut deltas = Vec::new();
        let mut waypoints = Vec::new();
        let mut w_prev = g.leaf(Tensor::column(vec![0.0, 0.0]));
        for _ in 1..=self.config.horizon {
            let x = g.concat(&[w_prev, goal], 0)?;
            h = self.gru_step(g, vars, "traj_gru", x, h)?;
            hiddens.push(h);
            let delta = self.linear(g, vars, "traj_head", h)?;
            let w = g.add(w_prev, delta)?;
            deltas.push(delta);
            waypoints.push(w);
            w_prev = w;
        }
        Ok((hiddens, deltas, waypoints))
    }

    /// Control branch: T+1 steps of attention, feature fusion, Beta head, and
    /// temporal GRU update. Returns (beta sequence, F_ctrl stacks, attention
    /// maps).
    #[allow(clippy::type_complexity)]
    pub fn control_branch_g(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        img: Var,
        meas_feat: Var,
        latent: Var,
        traj_hiddens: &[Var],
    ) -> Result<(Vec<(Var, Var)>, Vec<Var>, Vec<Var>)> {
        let t_horizon = self.config.horizon;
        if traj_hiddens.len() != t_horizon + 1 {
            return Err(Error::InvalidArgument(format!(
                "need {} trajectory hiddens, got {}",
                t_horizon + 1,
                traj_hiddens.len()
            )));
        }
        let grid = self.config.grid();
        let nf = self.config.n_f;
        let h0_pre = self.linear(g, vars, "ctrl_h0", latent)?;
        let mut h_ctrl = g.tanh(h0_pre);

        let mut beta_seq = Vec::new();
        let mut f_ctrl_seq = Vec::new();
        let mut attn_seq = Vec::new();
        for t in 0..=t_horizon {
            // attention over spatial positions from both branch hiddens
            let attn_in = g.concat(&[traj_hiddens[t], h_ctrl], 0)?;
            let logits = self.linear(g, vars, "attn", attn_in)?;
            let attn = g.softmax(logits, 0)?;
            attn_seq.push(attn);
            let attn_spatial = g.reshape(attn, vec![1, grid, grid])?;
            let weighted_img = g.mul(img, attn_spatial)?;

            // fuse with measurement features at t=0, with the temporal
            // hidden afterwards; ReLU keeps the stack non-negative
            let fused_bias = if t == 0 {
                self.linear(g, vars, "fuse_meas", meas_feat)?
            } else {
                self.linear(g, vars, "fuse_h", h_ctrl)?
            };
            let bias_spatial = g.reshape(fused_bias, vec![nf, 1, 1])?;
            let bias_full = g.broadcast_to(bias_spatial, vec![nf, grid, grid])?;
            let f_pre = g.add(weighted_img, bias_full)?;
            let f_ctrl = g.relu(f_pre);
            f_ctrl_seq.push(f_ctrl);

            // Beta policy head over the pooled stack and the hidden
            let pooled = self.pool(g, f_ctrl)?;
            let head_in = g.concat(&[pooled, h_ctrl], 0)?;
            let p1 = self.linear(g, vars, "policy1", head_in)?;
            let p1 = g.relu(p1);
            let raw = self.linear(g, vars, "policy2", p1)?;
            let sp = g.softplus(raw);
            let ab = g.add_scalar(sp, 1.0);
            let alpha = g.narrow(ab, 0, 0, 2)?;
            let beta = g.narrow(ab, 0, 2, 2)?;
            beta_seq.push((alpha, beta));

            if t < t_horizon {
                // deterministic action (Beta mean mapped to [-1,1]),
                // embedded and fed to the temporal GRU with the features
                let ab_sum = g.add(alpha, beta)?;
                let mean = g.div(alpha, ab_sum)?;
                let act = g.scale(mean, 2.0);
                let act = g.add_scalar(act, -1.0);
                let emb = self.linear(g, vars, "act_embed", act)?;
                let x = g.concat(&[pooled, emb], 0)?;
                h_ctrl = self.gru_step(g, vars, "ctrl_gru", x, h_ctrl)?;
            }
        }
        Ok((beta_seq, f_ctrl_seq, attn_seq))
    }

    /// Full forward pass on an existing graph.
    pub fn forward_g(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        obs: &Observation,
        meas: &Measurements,
    ) -> Result<PolicyVars> {
        let obs_var = g.leaf(obs.to_tensor());
        let meas_var = g.leaf(Tensor::column(meas.to_vector()));
        let (img, meas_feat) = self.encode_g(g, vars, obs_var, meas_var)?;

        // F_traj: image stack concatenated with the measurement features
        // tiled over space
        let grid = self.config.grid();
        let md = self.config.meas_dim;
        let meas_spatial = g.reshape(meas_feat, vec![md, 1, 1])?;
        let meas_tiled = g.broadcast_to(meas_spatial, vec![md, grid, grid])?;
        let f_traj = g.concat(&[img, meas_tiled], 0)?;

        // combined latent: pooled image features + measurement features
        let pooled_img = self.pool(g, img)?;
        let latent = g.concat(&[pooled_img, meas_feat], 0)?;

        let goal = g.leaf(Tensor::column(vec![
            meas.goal[0] / GOAL_NORM,
            meas.goal[1] / GOAL_NORM,
        ]));
        let (traj_hiddens, deltas, waypoints) =
            self.trajectory_branch_g(g, vars, f_traj, goal)?;
        let (beta_seq, f_ctrl, attention) =
            self.control_branch_g(g, vars, img, meas_feat, latent, &traj_hiddens)?;

        let speed = self.linear(g, vars, "speed_head", latent)?;
        let value = self.linear(g, vars, "value_head", latent)?;

        Ok(PolicyVars {
            image_features: img,
            f_traj,
            f_ctrl,
            deltas,
            waypoints,
            beta_seq,
            attention,
            speed,
            value,
            latent,
        })
    }

    /// Inference: fresh graph, constant parameters, plain-value outputs.
    pub fn forward(&self, obs: &Observation, meas: &Measurements) -> Result<PolicyOutputs> {
        let mut g = Graph::new();
        let vars = self.load_into(&mut g, false);
        let out = self.forward_g(&mut g, &vars, obs, meas)?;
        let stack = |g: &Graph, v: Var| FeatureMapStack::from_tensor(g.value(v));
        let betas = out
            .beta_seq
            .iter()
            .map(|(a, b)| {
                let av = g.value(*a).data();
                let bv = g.value(*b).data();
                Ok(BetaActionParams {
                    steer: BetaParams::new(av[0], bv[0])?,
                    accel: BetaParams::new(av[1], bv[1])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let deltas: Vec<[f64; 2]> = out
            .deltas
            .iter()
            .map(|d| {
                let v = g.value(*d).data();
                [v[0], v[1]]
            })
            .collect();
        Ok(PolicyOutputs {
            image_features: stack(&g, out.image_features)?,
            f_traj: stack(&g, out.f_traj)?,
            f_ctrl: out.f_ctrl.iter().map(|&v| stack(&g, v)).collect::<Result<Vec<_>>>()?,
            trajectory: Trajectory::from_deltas(deltas),
            betas,
            attention: out.attention.iter().map(|&a| g.value(a).data().to_vec()).collect(),
            speed: g.scalar_value(out.speed),
            value: g.scalar_value(out.value),
            latent: g.value(out.latent).data().to_vec(),
        })
    }

    // ── checkpoint io ────────────────────────────────────────────────

    /// Write a versioned binary checkpoint: magic, version, config hash,
    /// model config, generator state, and the named parameter table.
    pub fn save_checkpoint<W: Write>(
        &self,
        mut out: W,
        config_hash: &[u8; 32],
        rng: &Rng,
    ) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(config_hash)?;
        let cfg = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
        out.write_all(&(cfg.len() as u32).to_le_bytes())?;
        out.write_all(&cfg)?;
        let alg = RNG_ALGORITHM.as_bytes();
        out.write_all(&(alg.len() as u32).to_le_bytes())?;
        out.write_all(alg)?;
        out.write_all(&rng.seed().to_le_bytes())?;
        for s in rng.state() {
            out.write_all(&s.to_le_bytes())?;
        }
        out.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.params {
            let nb = name.as_bytes();
            out.write_all(&(nb.len() as u32).to_le_bytes())?;
            out.write_all(nb)?;
            out.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
            for &d in tensor.shape() {
                out.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in tensor.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save_checkpoint_file(
        &self,
        path: &Path,
        config_hash: &[u8; 32],
        rng: &Rng,
    ) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut buf = std::io::BufWriter::new(file);
        self.save_checkpoint(&mut buf, config_hash, rng)?;
        buf.flush()?;
        Ok(())
    }

    /// Read a checkpoint, verifying magic, version, and config hash.
    pub fn load_checkpoint<R: Read>(mut input: R, expected_hash: &[u8; 32]) -> Result<(Model, Rng)> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes, not a checkpoint".into()));
        }
        let version = read_u32(&mut input)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut hash = [0u8; 32];
        input.read_exact(&mut hash)?;
        if &hash != expected_hash {
            return Err(Error::Checkpoint(
                "config hash mismatch: checkpoint was produced under a different configuration"
                    .into(),
            ));
        }
        let cfg_len = read_u32(&mut input)? as usize;
        let mut cfg_buf = vec![0u8; cfg_len];
        input.read_exact(&mut cfg_buf)?;
        let config: ModelConfig = serde_json::from_slice(&cfg_buf)
            .map_err(|e| Error::Checkpoint(format!("config parse: {e}")))?;
        config.validate()?;

        let alg_len = read_u32(&mut input)? as usize;
        let mut alg = vec![0u8; alg_len];
        input.read_exact(&mut alg)?;
        if alg != RNG_ALGORITHM.as_bytes() {
            return Err(Error::Checkpoint(format!(
                "unknown generator algorithm {:?}",
                String::from_utf8_lossy(&alg)
            )));
        }
        let seed = read_u64(&mut input)?;
        let mut state = [0u64; 4];
        for s in &mut state {
            *s = read_u64(&mut input)?;
        }
        let rng = Rng::restore(seed, state);

        let n_params = read_u32(&mut input)? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..n_params {
            let name_len = read_u32(&mut input)? as usize;
            let mut name_buf = vec![0u8; name_len];
            input.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
            let ndim = read_u32(&mut input)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut input)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 8];
                input.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok((Model { config, params }, rng))
    }

    pub fn load_checkpoint_file(path: &Path, expected_hash: &[u8; 32]) -> Result<(Model, Rng)> {
        let file = std::fs::File::open(path)?;
        Self::load_checkpoint(std::io::BufReader::new(file), expected_hash)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Stack per-step `[2, 1]` waypoint columns into a `[T, 2]` tensor.
pub fn waypoints_tensor_g(g: &mut Graph, waypoints: &[Var]) -> Result<Var> {
    let rows: Vec<Var> = waypoints
        .iter()
        .map(|&w| g.reshape(w, vec![1, 2]))
        .collect::<Result<Vec<_>>>()?;
    g.concat(&rows, 0)
}
