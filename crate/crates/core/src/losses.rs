//! Training objectives: L1 waypoint loss, Beta-KL action loss, auxiliary
//! sub-task losses, the feature-diversity regularizer and its branch-wise
//! application, and the weighted total.
//!
//! Every loss has two surfaces: a graph form (`*_g`) used in training, and a
//! plain value form that routes through the same graph code on a throwaway
//! tape. The diversity weighting is applied exactly once: the branch sum is
//! unweighted and `lambda_div` multiplies it in [`total_loss_g`] (and in
//! [`diversity_loss_branches`], which mirrors the weighted branch term for
//! logging).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Mean-activation guard: a stack whose largest per-map mean is below this is
/// rejected as degenerate by the diversity ops.
pub const MEAN_EPS: f64 = 1e-12;

// ── domain types ─────────────────────────────────────────────────────

/// Stack of `n_f` spatial feature maps, `h × w` each, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapStack {
    n_f: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl FeatureMapStack {
    pub fn new(n_f: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if n_f < 1 || h * w < 1 {
            return Err(Error::InvalidArgument(format!(
                "feature map stack must be non-empty, got {n_f}x{h}x{w}"
            )));
        }
        if data.len() != n_f * h * w {
            return Err(Error::BadTensorData {
                context: "FeatureMapStack::new",
                shape: vec![n_f, h, w],
                expected: n_f * h * w,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("FeatureMapStack::new"));
        }
        Ok(FeatureMapStack { n_f, h, w, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "feature map stack needs a rank-3 tensor, got shape {s:?}"
            )));
        }
        Self::new(s[0], s[1], s[2], t.data().to_vec())
    }

    pub fn n_f(&self) -> usize {
        self.n_f
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, map: usize, i: usize, j: usize) -> f64 {
        self.data[(map * self.h + i) * self.w + j]
    }

    pub fn map_slice(&self, map: usize) -> &[f64] {
        &self.data[map * self.h * self.w..(map + 1) * self.h * self.w]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n_f, self.h, self.w], self.data.clone())
            .expect("stack dims consistent")
    }
}

/// Concentration parameters of one Beta distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "Beta parameters must be finite and positive, got ({alpha}, {beta})"
            )));
        }
        Ok(BetaParams { alpha, beta })
    }

    /// Distribution mean α/(α+β), in (0, 1).
    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }
}

/// Beta policy parameters for both action dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaActionParams {
    pub steer: BetaParams,
    pub accel: BetaParams,
}

/// Loss weighting factors. `lambda_div` defaults to 5e-5; every other factor
/// defaults to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_traj: f64,
    pub lambda_ctrl: f64,
    pub lambda_sub: f64,
    pub lambda_feature: f64,
    pub lambda_speed: f64,
    pub lambda_value: f64,
    pub lambda_div: f64,
    pub lambda_baseline: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_traj: 1.0,
            lambda_ctrl: 1.0,
            lambda_sub: 1.0,
            lambda_feature: 1.0,
            lambda_speed: 1.0,
            lambda_value: 1.0,
            lambda_div: 5e-5,
            lambda_baseline: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_traj", self.lambda_traj),
            ("lambda_ctrl", self.lambda_ctrl),
            ("lambda_sub", self.lambda_sub),
            ("lambda_feature", self.lambda_feature),
            ("lambda_speed", self.lambda_speed),
            ("lambda_value", self.lambda_value),
            ("lambda_div", self.lambda_div),
            ("lambda_baseline", self.lambda_baseline),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Spatially-normalized, mean-scaled feature maps (the ŝ of the diversity
/// term), with the per-map derived quantities.
#[derive(Debug, Clone)]
pub struct WeightedDiversityMap {
    /// Same layout as the input stack.
    pub maps: FeatureMapStack,
    /// Per-map mean raw activation.
    pub mean_activation: Vec<f64>,
    /// Per-map scale factor: mean / max-of-means, in (0, 1].
    pub scale: Vec<f64>,
}

/// Itemized breakdown of one total-loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub traj: f64,
    pub ctrl: f64,
    pub sub: f64,
    /// Unweighted diversity branch sum.
    pub div_raw: f64,
    /// lambda_div times the branch sum.
    pub div_weighted: f64,
    pub total: f64,
}

// ── trajectory loss ──────────────────────────────────────────────────

/// Graph form of the waypoint loss: Σ_t ‖w_t − w̃_t‖₁ over `[T, 2]` tensors.
pub fn trajectory_loss_g(g: &mut Graph, pred: Var, expert: Var) -> Result<Var> {
    let ps = g.shape(pred).to_vec();
    let es = g.shape(expert).to_vec();
    if ps != es || ps.len() != 2 || ps[1] != 2 {
        return Err(Error::ShapeMismatch { op: "trajectory_loss", lhs: ps, rhs: es });
    }
    let diff = g.sub(pred, expert)?;
    let mag = g.abs(diff);
    g.sum(mag, None)
}

/// Waypoint loss over ego-frame points in meters.
pub fn trajectory_loss(pred: &[[f64; 2]], expert: &[[f64; 2]]) -> Result<f64> {
    if pred.len() != expert.len() {
        return Err(Error::InvalidArgument(format!(
            "trajectory horizon mismatch: {} vs {}",
            pred.len(),
            expert.len()
        )));
    }
    let flatten = |wps: &[[f64; 2]]| {
        Tensor::new(vec![wps.len(), 2], wps.iter().flatten().copied().collect())
            .expect("waypoint layout")
    };
    let mut g = Graph::new();
    let p = g.leaf(flatten(pred));
    let e = g.leaf(flatten(expert));
    let loss = trajectory_loss_g(&mut g, p, e)?;
    Ok(g.scalar_value(loss))
}

// ── Beta KL ──────────────────────────────────────────────────────────

/// Elementwise KL(Beta(α₁,β₁) ‖ Beta(α₂,β₂)) between same-shaped parameter
/// tensors:
///
/// KL = ln B(α₂,β₂) − ln B(α₁,β₁) + (α₁−α₂)ψ(α₁) + (β₁−β₂)ψ(β₁)
///      + (α₂−α₁+β₂−β₁)ψ(α₁+β₁)
pub fn beta_kl_g(g: &mut Graph, a1: Var, b1: Var, a2: Var, b2: Var) -> Result<Var> {
    let shape = g.shape(a1).to_vec();
    for v in [b1, a2, b2] {
        if g.shape(v) != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "beta_kl",
                lhs: shape,
                rhs: g.shape(v).to_vec(),
            });
        }
    }
    let ln_beta = |g: &mut Graph, a: Var, b: Var| -> Result<Var> {
        let s = g.add(a, b)?;
        let la = g.ln_gamma(a)?;
        let lb = g.ln_gamma(b)?;
        let ls = g.ln_gamma(s)?;
        let num = g.add(la, lb)?;
        g.sub(num, ls)
    };
    let s1 = g.add(a1, b1)?;
    let ln_b1 = ln_beta(g, a1, b1)?;
    let ln_b2 = ln_beta(g, a2, b2)?;
    let da = g.sub(a1, a2)?;
    let db = g.sub(b1, b2)?;
    let psi_a1 = g.digamma(a1)?;
    let psi_b1 = g.digamma(b1)?;
    let psi_s1 = g.digamma(s1)?;
    let t3 = g.mul(da, psi_a1)?;
    let t4 = g.mul(db, psi_b1)?;
    let dsum = g.add(da, db)?;
    let ndsum = g.neg(dsum);
    let t5 = g.mul(ndsum, psi_s1)?;
    let base = g.sub(ln_b2, ln_b1)?;
    let acc = g.add(base, t3)?;
    let acc = g.add(acc, t4)?;
    g.add(acc, t5)
}

/// KL divergence between two Beta distributions over one action dimension.
pub fn beta_kl(p: BetaParams, q: BetaParams) -> Result<f64> {
    BetaParams::new(p.alpha, p.beta)?;
    BetaParams::new(q.alpha, q.beta)?;
    let mut g = Graph::new();
    let a1 = g.leaf(Tensor::scalar(p.alpha));
    let b1 = g.leaf(Tensor::scalar(p.beta));
    let a2 = g.leaf(Tensor::scalar(q.alpha));
    let b2 = g.leaf(Tensor::scalar(q.beta));
    let kl = beta_kl_g(&mut g, a1, b1, a2, b2)?;
    Ok(g.scalar_value(kl))
}

/// Graph form of the multi-step action loss. `pred` and `expert` hold, per
/// step t = 0..=T, the (alpha, beta) parameter tensors covering all action
/// dimensions. The step-0 KL enters with weight 1, steps 1..=T with mean
/// weight 1/T.
pub fn action_loss_g(g: &mut Graph, pred: &[(Var, Var)], expert: &[(Var, Var)]) -> Result<Var> {
    if pred.len() != expert.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "action sequence length mismatch: {} vs {}",
            pred.len(),
            expert.len()
        )));
    }
    let horizon = pred.len() - 1;
    let step_kl = |g: &mut Graph, t: usize| -> Result<Var> {
        let kl = beta_kl_g(g, pred[t].0, pred[t].1, expert[t].0, expert[t].1)?;
        g.sum(kl, None)
    };
    let mut loss = step_kl(g, 0)?;
    if horizon > 0 {
        let mut future = step_kl(g, 1)?;
        for t in 2..=horizon {
            let kl = step_kl(g, t)?;
            future = g.add(future, kl)?;
        }
        let averaged = g.scale(future, 1.0 / horizon as f64);
        loss = g.add(loss, averaged)?;
    }
    Ok(loss)
}

/// Multi-step action loss over per-step Beta parameters for both dims.
pub fn action_loss(pred: &[BetaActionParams], expert: &[BetaActionParams]) -> Result<f64> {
    if pred.len() != expert.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "action sequence length mismatch: {} vs {}",
            pred.len(),
            expert.len()
        )));
    }
    let mut g = Graph::new();
    let load = |g: &mut Graph, seq: &[BetaActionParams]| -> Vec<(Var, Var)> {
        seq.iter()
            .map(|p| {
                let a = g.leaf(Tensor::from_vec(vec![p.steer.alpha, p.accel.alpha]));
                let b = g.leaf(Tensor::from_vec(vec![p.steer.beta, p.accel.beta]));
                (a, b)
            })
            .collect()
    };
    let pv = load(&mut g, pred);
    let ev = load(&mut g, expert);
    let loss = action_loss_g(&mut g, &pv, &ev)?;
    Ok(g.scalar_value(loss))
}

// ── sub-task losses ──────────────────────────────────────────────────

/// λ_F · mean squared feature difference + λ_S · |Δspeed| + λ_V · (Δvalue)².
pub fn subtask_loss_g(
    g: &mut Graph,
    model_feat: Var,
    expert_feat: Var,
    pred_speed: Var,
    expert_speed: Var,
    pred_value: Var,
    expert_value: Var,
    w: &LossWeights,
) -> Result<Var> {
    if g.shape(model_feat) != g.shape(expert_feat) {
        return Err(Error::ShapeMismatch {
            op: "subtask_loss features",
            lhs: g.shape(model_feat).to_vec(),
            rhs: g.shape(expert_feat).to_vec(),
        });
    }
    let fd = g.sub(model_feat, expert_feat)?;
    let fsq = g.mul(fd, fd)?;
    let l_f = g.mean(fsq, None)?;

    let sd = g.sub(pred_speed, expert_speed)?;
    let l_s = g.abs(sd);
    let l_s = g.sum(l_s, None)?;

    let vd = g.sub(pred_value, expert_value)?;
    let vsq = g.mul(vd, vd)?;
    let l_v = g.sum(vsq, None)?;

    let a = g.scale(l_f, w.lambda_feature);
    let b = g.scale(l_s, w.lambda_speed);
    let c = g.scale(l_v, w.lambda_value);
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

pub fn subtask_loss(
    model_feat: &Tensor,
    expert_feat: &Tensor,
    pred_speed: f64,
    expert_speed: f64,
    pred_value: f64,
    expert_value: f64,
    w: &LossWeights,
) -> Result<f64> {
    let mut g = Graph::new();
    let mf = g.leaf(model_feat.clone());
    let ef = g.leaf(expert_feat.clone());
    let ps = g.leaf(Tensor::scalar(pred_speed));
    let es = g.leaf(Tensor::scalar(expert_speed));
    let pv = g.leaf(Tensor::scalar(pred_value));
    let ev = g.leaf(Tensor::scalar(expert_value));
    let loss = subtask_loss_g(&mut g, mf, ef, ps, es, pv, ev, w)?;
    Ok(g.scalar_value(loss))
}

// ── diversity loss ───────────────────────────────────────────────────

fn validate_stack_var(g: &Graph, stack: Var) -> Result<(usize, usize, usize)> {
    let shape = g.shape(stack).to_vec();
    if shape.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "diversity loss expects a [n_f, h, w] stack, got {shape:?}"
        )));
    }
    let data = g.value(stack).data();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("diversity loss input"));
    }
    if data.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument(
            "diversity loss input must be non-negative (ReLU-terminated encoder)".into(),
        ));
    }
    let (n_f, h, w) = (shape[0], shape[1], shape[2]);
    let hw = h * w;
    let max_mean = (0..n_f)
        .map(|l| data[l * hw..(l + 1) * hw].iter().sum::<f64>() / hw as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    if max_mean <= MEAN_EPS {
        return Err(Error::Degenerate(format!(
            "all-zero feature map stack (max mean activation {max_mean:.3e})"
        )));
    }
    Ok((n_f, h, w))
}

/// Graph form of the diversity weighting: per map, spatial softmax scaled by
/// the ratio of that map's mean activation to the largest mean.
pub fn diversity_weighted_map_g(g: &mut Graph, stack: Var) -> Result<Var> {
    let (n_f, h, w) = validate_stack_var(g, stack)?;
    let flat = g.reshape(stack, vec![n_f, h * w])?;
    let sm = g.softmax(flat, 1)?;
    let means = g.mean(flat, Some(1))?;
    let max_mean = g.max(means, None)?;
    let scale = g.div(means, max_mean)?;
    let scale_col = g.reshape(scale, vec![n_f, 1])?;
    let weighted = g.mul(sm, scale_col)?;
    g.reshape(weighted, vec![n_f, h, w])
}

/// Diversity weighting of a stack, with the per-map means and scale factors.
pub fn diversity_weighted_map(stack: &FeatureMapStack) -> Result<WeightedDiversityMap> {
    let mut g = Graph::new();
    let s = g.leaf(stack.to_tensor());
    let wm = diversity_weighted_map_g(&mut g, s)?;
    let maps = FeatureMapStack::from_tensor(g.value(wm))?;
    let hw = (stack.h * stack.w) as f64;
    let mean_activation: Vec<f64> = (0..stack.n_f)
        .map(|l| stack.map_slice(l).iter().sum::<f64>() / hw)
        .collect();
    let max_mean = mean_activation.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = mean_activation.iter().map(|&m| m / max_mean).collect();
    Ok(WeightedDiversityMap { maps, mean_activation, scale })
}

/// Graph form of the diversity loss: −Σ_ij max_l ŝ_ij^l.
pub fn diversity_loss_g(g: &mut Graph, stack: Var) -> Result<Var> {
    let shape = g.shape(stack).to_vec();
    let weighted = diversity_weighted_map_g(g, stack)?;
    let flat = g.reshape(weighted, vec![shape[0], shape[1] * shape[2]])?;
    let per_pixel_max = g.max(flat, Some(0))?;
    let total = g.sum(per_pixel_max, None)?;
    Ok(g.neg(total))
}

/// Diversity loss of one stack; always in [−n_f, −1] up to float roundoff.
pub fn diversity_loss(stack: &FeatureMapStack) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.leaf(stack.to_tensor());
    let loss = diversity_loss_g(&mut g, s)?;
    Ok(g.scalar_value(loss))
}

/// Graph form of the unweighted branch sum:
/// L_div(F^traj) + L_div(F^ctrl_0) + (1/T) Σ_{t=1..T} L_div(F^ctrl_t).
///
/// `f_ctrl_seq` must have length `t_horizon + 1` (steps 0..=T).
pub fn diversity_branch_sum_g(
    g: &mut Graph,
    f_traj: Var,
    f_ctrl_seq: &[Var],
    t_horizon: usize,
) -> Result<Var> {
    if f_ctrl_seq.len() != t_horizon + 1 {
        return Err(Error::InvalidArgument(format!(
            "control feature sequence length {} does not match horizon T={} (want T+1)",
            f_ctrl_seq.len(),
            t_horizon
        )));
    }
    let traj_term = diversity_loss_g(g, f_traj)?;
    let ctrl0 = diversity_loss_g(g, f_ctrl_seq[0])?;
    let mut acc = g.add(traj_term, ctrl0)?;
    if t_horizon > 0 {
        let mut future = diversity_loss_g(g, f_ctrl_seq[1])?;
        for &fv in &f_ctrl_seq[2..] {
            let term = diversity_loss_g(g, fv)?;
            future = g.add(future, term)?;
        }
        let averaged = g.scale(future, 1.0 / t_horizon as f64);
        acc = g.add(acc, averaged)?;
    }
    Ok(acc)
}

/// Branch-wise diversity term, weighted: λ_div · branch sum.
pub fn diversity_loss_branches(
    lambda_div: f64,
    f_traj: &FeatureMapStack,
    f_ctrl_seq: &[FeatureMapStack],
    t_horizon: usize,
) -> Result<f64> {
    let mut g = Graph::new();
    let traj = g.leaf(f_traj.to_tensor());
    let ctrl: Vec<Var> = f_ctrl_seq.iter().map(|s| g.leaf(s.to_tensor())).collect();
    let sum = diversity_branch_sum_g(&mut g, traj, &ctrl, t_horizon)?;
    Ok(lambda_div * g.scalar_value(sum))
}

// ── total ────────────────────────────────────────────────────────────

/// Component losses feeding the weighted total. `div_branch_sum` is the
/// unweighted branch sum from [`diversity_branch_sum_g`].
pub struct LossComponents {
    pub traj: Var,
    pub ctrl: Var,
    pub sub: Var,
    pub div_branch_sum: Var,
}

/// Weighted total:
/// λ_div · div_branch_sum + λ_baseline (λ_traj L_traj + λ_ctrl L_ctrl + λ_sub L_sub).
pub fn total_loss_g(
    g: &mut Graph,
    parts: &LossComponents,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let named = [
        ("trajectory", parts.traj),
        ("control", parts.ctrl),
        ("sub-task", parts.sub),
        ("diversity", parts.div_branch_sum),
    ];
    for (name, v) in named {
        let val = g.value(v);
        if !val.is_scalar() {
            return Err(Error::NonScalarRoot { shape: val.shape().to_vec() });
        }
        if !val.item().is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite {name} loss component")));
        }
    }
    let div_term = g.scale(parts.div_branch_sum, w.lambda_div);
    let t = g.scale(parts.traj, w.lambda_traj);
    let c = g.scale(parts.ctrl, w.lambda_ctrl);
    let s = g.scale(parts.sub, w.lambda_sub);
    let tc = g.add(t, c)?;
    let tcs = g.add(tc, s)?;
    let baseline = g.scale(tcs, w.lambda_baseline);
    let total = g.add(div_term, baseline)?;
    let breakdown = LossBreakdown {
        traj: g.scalar_value(parts.traj),
        ctrl: g.scalar_value(parts.ctrl),
        sub: g.scalar_value(parts.sub),
        div_raw: g.scalar_value(parts.div_branch_sum),
        div_weighted: g.scalar_value(div_term),
        total: g.scalar_value(total),
    };
    Ok((total, breakdown))
}

/// Value form of the weighted total over scalar components.
pub fn total_loss(
    traj: f64,
    ctrl: f64,
    sub: f64,
    div_branch_sum: f64,
    w: &LossWeights,
) -> Result<(f64, LossBreakdown)> {
    let mut g = Graph::new();
    let parts = LossComponents {
        traj: g.leaf(Tensor::scalar(traj)),
        ctrl: g.leaf(Tensor::scalar(ctrl)),
        sub: g.leaf(Tensor::scalar(sub)),
        div_branch_sum: g.leaf(Tensor::scalar(div_branch_sum)),
    };
    let (total, breakdown) = total_loss_g(&mut g, &parts, w)?;
    Ok((g.scalar_value(total), breakdown))
}
