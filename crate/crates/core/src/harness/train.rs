//! Behavior-cloning training: deterministic minibatch SGD with momentum
//! over the full loss suite, per-epoch component logging, and best/last
//! checkpoint selection by validation loss.
//!
//! The scripted expert has no latent features, so the feature-matching term
//! of the sub-task loss has no training signal here: the expert feature is
//! a detached copy of the model latent, making that term identically zero
//! while the speed and value regressions carry the supervision.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::dataset::{Dataset, Frame};
use super::RunConfig;
use crate::autodiff::{Graph, Rng, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{
    action_loss_g, diversity_branch_sum_g, diversity_loss_g, subtask_loss_g, total_loss_g,
    trajectory_loss_g, LossBreakdown, LossComponents, LossWeights, MEAN_EPS,
};
use crate::model::{waypoints_tensor_g, Model, ModelVars};

/// Clamp for expert action means before the Beta conversion.
const BETA_MEAN_EPS: f64 = 1e-3;

/// Beta targets for one expert action: mean-matched concentrations
/// α = κ·μ, β = κ·(1−μ) per dimension, with μ the action mapped to (0, 1).
pub fn expert_beta_targets(
    steer: f64,
    accel: f64,
    concentration: f64,
) -> ([f64; 2], [f64; 2]) {
    let mu = |a: f64| ((a + 1.0) / 2.0).clamp(BETA_MEAN_EPS, 1.0 - BETA_MEAN_EPS);
    let (ms, ma) = (mu(steer), mu(accel));
    (
        [concentration * ms, concentration * ma],
        [concentration * (1.0 - ms), concentration * (1.0 - ma)],
    )
}

/// One epoch row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val_total: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub best_val: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
    pub log_path: PathBuf,
}

/// Per-sample loss components on an existing graph.
#[allow(clippy::too_many_arguments)]
fn sample_components(
    g: &mut Graph,
    model: &Model,
    vars: &ModelVars,
    dataset: &Dataset,
    sample: usize,
    weights: &LossWeights,
    concentration: f64,
) -> Result<(Var, Var, Var, Var)> {
    let frame: &Frame = &dataset.frames[sample];
    let out = model.forward_g(g, vars, &frame.observation, &frame.meas)?;

    // trajectory supervision
    let pred = waypoints_tensor_g(g, &out.waypoints)?;
    let wps = frame.expert_trajectory.waypoints();
    let expert = g.leaf(Tensor::new(
        vec![wps.len(), 2],
        wps.iter().flatten().copied().collect(),
    )?);
    let l_traj = trajectory_loss_g(g, pred, expert)?;

    // action supervision over t = 0..=T from future frames
    let mut expert_betas = Vec::with_capacity(dataset.horizon as usize + 1);
    let now = expert_beta_targets(
        frame.expert_action.steer,
        frame.expert_action.accel(),
        concentration,
    );
    expert_betas.push(now);
    for j in dataset.future_label_indices(sample) {
        let f = &dataset.frames[j];
        expert_betas.push(expert_beta_targets(
            f.expert_action.steer,
            f.expert_action.accel(),
            concentration,
        ));
    }
    let expert_vars: Vec<(Var, Var)> = expert_betas
        .into_iter()
        .map(|(a, b)| {
            (g.leaf(Tensor::column(a.to_vec())), g.leaf(Tensor::column(b.to_vec())))
        })
        .collect();
    let l_ctrl = action_loss_g(g, &out.beta_seq, &expert_vars)?;

    // sub-task supervision (detached latent as the feature target)
    let latent_value = g.value(out.latent).clone();
    let expert_feat = g.leaf(latent_value);
    let expert_speed = g.leaf(Tensor::scalar(frame.expert_target_speed));
    let expert_value = g.leaf(Tensor::scalar(frame.expert_value));
    let l_sub = subtask_loss_g(
        g,
        out.latent,
        expert_feat,
        out.speed,
        expert_speed,
        out.value,
        expert_value,
        weights,
    )?;

    let l_div = diversity_branch_sum_guarded(g, out.f_traj, &out.f_ctrl, model.config().horizon)?;
    Ok((l_traj, l_ctrl, l_sub, l_div))
}

// A fully dead (all-zero) stack has no defined diversity weighting (its
// scale factor is 0/0); such stacks contribute nothing to the branch sum
// instead of aborting the run. Healthy stacks follow the exact branch rule.
fn diversity_branch_sum_guarded(
    g: &mut Graph,
    f_traj: Var,
    f_ctrl: &[Var],
    horizon: usize,
) -> Result<Var> {
    let alive = |g: &Graph, v: Var| -> bool {
        let data = g.value(v).data();
        let n = data.len() as f64;
        data.iter().sum::<f64>() / n > MEAN_EPS * g.value(v).shape()[0] as f64
    };
    let all_alive = alive(g, f_traj) && f_ctrl.iter().all(|&v| alive(g, v));
    if all_alive {
        return diversity_branch_sum_g(g, f_traj, f_ctrl, horizon);
    }
    let mut acc = g.leaf(Tensor::scalar(0.0));
    if alive(g, f_traj) {
        let t = diversity_loss_g(g, f_traj)?;
        acc = g.add(acc, t)?;
    }
    if alive(g, f_ctrl[0]) {
        let t = diversity_loss_g(g, f_ctrl[0])?;
        acc = g.add(acc, t)?;
    }
    if horizon > 0 {
        let mut future: Option<Var> = None;
        for &v in &f_ctrl[1..] {
            if alive(g, v) {
                let t = diversity_loss_g(g, v)?;
                future = Some(match future {
                    None => t,
                    Some(acc_f) => g.add(acc_f, t)?,
                });
            }
        }
        if let Some(future) = future {
            let averaged = g.scale(future, 1.0 / horizon as f64);
            acc = g.add(acc, averaged)?;
        }
    }
    Ok(acc)
}

/// Mean total loss of a batch of samples; also returns the breakdown.
fn batch_loss(
    g: &mut Graph,
    model: &Model,
    vars: &ModelVars,
    dataset: &Dataset,
    batch: &[usize],
    weights: &LossWeights,
    concentration: f64,
) -> Result<(Var, LossBreakdown)> {
    let mut acc: Option<(Var, Var, Var, Var)> = None;
    for &sample in batch {
        let (t, c, s, d) =
            sample_components(g, model, vars, dataset, sample, weights, concentration)?;
        acc = Some(match acc {
            None => (t, c, s, d),
            Some((ta, ca, sa, da)) => {
                (g.add(ta, t)?, g.add(ca, c)?, g.add(sa, s)?, g.add(da, d)?)
            }
        });
    }
    let (t, c, s, d) = acc.ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let k = 1.0 / batch.len() as f64;
    let parts = LossComponents {
        traj: g.scale(t, k),
        ctrl: g.scale(c, k),
        sub: g.scale(s, k),
        div_branch_sum: g.scale(d, k),
    };
    total_loss_g(g, &parts, weights)
}

/// Forward-only mean total loss over `samples` (validation).
fn eval_loss(
    model: &Model,
    dataset: &Dataset,
    samples: &[usize],
    weights: &LossWeights,
    concentration: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    // small graphs per chunk keep memory flat
    for chunk in samples.chunks(16) {
        let mut g = Graph::new();
        let vars = model.load_into(&mut g, false);
        let (loss, _) = batch_loss(&mut g, model, &vars, dataset, chunk, weights, concentration)?;
        total += g.scalar_value(loss) * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Train a fresh model on the dataset. Deterministic in (config, dataset).
/// Writes `best.ckpt`, `last.ckpt`, and `training_log.csv` under `out_dir`.
pub fn train(config: &RunConfig, dataset: &Dataset, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let hash = config.hash();
    if dataset.config_hash != hash {
        return Err(Error::Config(
            "dataset was collected under a different configuration (hash mismatch)".into(),
        ));
    }
    if dataset.obs_channels as usize != config.model.obs_channels
        || dataset.obs_size as usize != config.model.obs_size
        || dataset.horizon as usize != config.model.horizon
    {
        return Err(Error::Config("dataset dimensions do not match the model config".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut rng = Rng::new(config.seed);
    let mut model = Model::new(config.model.clone(), &mut rng)?;
    let weights = &config.weights;
    let kappa = config.expert_beta_concentration;

    // deterministic split
    let mut samples = dataset.trainable_indices();
    if samples.is_empty() {
        return Err(Error::Dataset("dataset has no trainable samples".into()));
    }
    let mut split_rng = rng.derive(0xDA7A);
    split_rng.shuffle(&mut samples);
    let n_val = (samples.len() as f64 * config.optimizer.val_fraction).floor() as usize;
    let (val_set, train_set) = samples.split_at(n_val);
    let val_set = val_set.to_vec();
    let mut train_set = train_set.to_vec();
    if train_set.is_empty() {
        return Err(Error::Dataset("validation split left no training samples".into()));
    }

    let mut momentum: BTreeMap<String, Vec<f64>> = model
        .params()
        .iter()
        .map(|(name, t)| (name.clone(), vec![0.0; t.numel()]))
        .collect();

    let mut log = Vec::with_capacity(config.optimizer.epochs);
    let mut best: Option<(f64, usize, Model, Rng)> = None;
    let mut epoch_rng = rng.derive(0x0E9C);

    for epoch in 0..config.optimizer.epochs {
        let lr = config.optimizer.learning_rate * config.optimizer.lr_decay.powi(epoch as i32);
        epoch_rng.shuffle(&mut train_set);
        let mut sums = LossBreakdown {
            traj: 0.0,
            ctrl: 0.0,
            sub: 0.0,
            div_raw: 0.0,
            div_weighted: 0.0,
            total: 0.0,
        };
        let mut n_batches = 0usize;
        for batch in train_set.chunks(config.optimizer.batch_size) {
            let mut g = Graph::new();
            let vars = model.load_into(&mut g, true);
            let (loss, breakdown) =
                batch_loss(&mut g, &model, &vars, dataset, batch, weights, kappa)?;
            if !breakdown.total.is_finite() {
                return Err(Error::NonFinite("training total loss"));
            }
            g.backward(loss)?;
            // momentum SGD
            for (name, var) in vars.iter() {
                let grad = g.grad(*var);
                let buf = momentum.get_mut(name).expect("momentum buffer");
                let theta = model.params_mut().get_mut(name).expect("parameter");
                for ((m, &dw), w) in
                    buf.iter_mut().zip(grad.data()).zip(theta.data_mut().iter_mut())
                {
                    *m = config.optimizer.momentum * *m - lr * dw;
                    *w += *m;
                }
            }
            sums.traj += breakdown.traj;
            sums.ctrl += breakdown.ctrl;
            sums.sub += breakdown.sub;
            sums.div_raw += breakdown.div_raw;
            sums.div_weighted += breakdown.div_weighted;
            sums.total += breakdown.total;
            n_batches += 1;
        }
        let k = 1.0 / n_batches.max(1) as f64;
        let train_mean = LossBreakdown {
            traj: sums.traj * k,
            ctrl: sums.ctrl * k,
            sub: sums.sub * k,
            div_raw: sums.div_raw * k,
            div_weighted: sums.div_weighted * k,
            total: sums.total * k,
        };
        // rank checkpoints by validation loss (training loss when no split)
        let val_total = if val_set.is_empty() {
            train_mean.total
        } else {
            eval_loss(&model, dataset, &val_set, weights, kappa)?
        };
        log.push(EpochLog { epoch, train: train_mean, val_total });
        let improved = match &best {
            None => true,
            Some((best_val, ..)) => val_total < *best_val,
        };
        if improved {
            best = Some((val_total, epoch, model.clone(), epoch_rng.clone()));
        }
    }

    let log_path = out_dir.join("training_log.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    writeln!(f, "epoch,train_total,train_traj,train_ctrl,train_sub,train_div_raw,train_div_weighted,val_total")?;
    for row in &log {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            row.epoch,
            row.train.total,
            row.train.traj,
            row.train.ctrl,
            row.train.sub,
            row.train.div_raw,
            row.train.div_weighted,
            row.val_total
        )?;
    }
    f.flush()?;

    let (best_val, best_epoch, best_model, best_rng) =
        best.expect("at least one epoch ran");
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");
    best_model.save_checkpoint_file(&best_path, &hash, &best_rng)?;
    model.save_checkpoint_file(&last_path, &hash, &epoch_rng)?;

    Ok(TrainOutcome {
        model: best_model,
        best_val,
        best_epoch,
        log,
        best_path,
        last_path,
        log_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::collect;
    use crate::model::ModelConfig;

    fn quick_config() -> RunConfig {
        RunConfig {
            routes: vec!["builtin:straight_clear".into()],
            collect_seeds: 1,
            model: ModelConfig {
                obs_channels: 5,
                obs_size: 16,
                n_f: 6,
                meas_dim: 6,
                hidden: 16,
                horizon: 4,
                action_embed: 4,
            },
            optimizer: super::super::OptimizerConfig {
                epochs: 2,
                batch_size: 16,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn beta_targets_match_means_and_stay_positive() {
        let (alpha, beta) = expert_beta_targets(0.5, -1.0, 20.0);
        // steer mean 0.75
        assert!((alpha[0] / (alpha[0] + beta[0]) - 0.75).abs() < 1e-12);
        // full brake clamps just inside (0,1)
        assert!(alpha[1] > 0.0 && beta[1] > 0.0);
        assert!(alpha[1] / (alpha[1] + beta[1]) < 2e-3);
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let mut cfg = quick_config();
        cfg.weights = LossWeights {
            lambda_traj: 0.0,
            lambda_ctrl: 0.0,
            lambda_sub: 0.0,
            lambda_feature: 0.0,
            lambda_speed: 0.0,
            lambda_value: 0.0,
            lambda_div: 0.0,
            lambda_baseline: 0.0,
        };
        cfg.optimizer.epochs = 1;
        let ds = collect(&cfg).unwrap().dataset;
        let dir = tempfile::tempdir().unwrap();
        let outcome = train(&cfg, &ds, dir.path()).unwrap();
        // compare against a freshly initialized model with the same seed
        let mut rng = Rng::new(cfg.seed);
        let fresh = Model::new(cfg.model.clone(), &mut rng).unwrap();
        for (name, t) in fresh.params() {
            let trained = &outcome.model.params()[name];
            assert!(t
                .data()
                .iter()
                .zip(trained.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn training_is_deterministic_and_logs_identity() {
        let cfg = quick_config();
        let ds = collect(&cfg).unwrap().dataset;
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = train(&cfg, &ds, dir_a.path()).unwrap();
        let b = train(&cfg, &ds, dir_b.path()).unwrap();
        let bytes_a = std::fs::read(&a.best_path).unwrap();
        let bytes_b = std::fs::read(&b.best_path).unwrap();
        assert_eq!(bytes_a, bytes_b, "bit-identical checkpoints");

        // bookkeeping identity per logged epoch
        let w = &cfg.weights;
        for row in &a.log {
            let expect = w.lambda_div * row.train.div_raw
                + w.lambda_baseline
                    * (w.lambda_traj * row.train.traj
                        + w.lambda_ctrl * row.train.ctrl
                        + w.lambda_sub * row.train.sub);
            assert!(
                (row.train.total - expect).abs() < 1e-9,
                "epoch {}: {} vs {}",
                row.epoch,
                row.train.total,
                expect
            );
            assert!((row.train.div_weighted - w.lambda_div * row.train.div_raw).abs() < 1e-12);
        }
    }

    #[test]
    fn training_rejects_mismatched_dataset() {
        let cfg = quick_config();
        let ds = collect(&cfg).unwrap().dataset;
        let mut other = cfg.clone();
        other.seed += 1;
        let dir = tempfile::tempdir().unwrap();
        assert!(train(&other, &ds, dir.path()).is_err());
    }

    #[test]
    fn one_sample_overfit_drives_loss_down() {
        // single-sample dataset: loss should collapse well below its start
        let mut cfg = quick_config();
        cfg.optimizer.epochs = 500;
        cfg.optimizer.batch_size = 1;
        cfg.optimizer.val_fraction = 0.0;
        cfg.optimizer.learning_rate = 2e-3;
        cfg.optimizer.lr_decay = 0.99;
        let mut ds = collect(&cfg).unwrap().dataset;
        let keep = ds.trainable_indices()[40];
        let horizon_span = (ds.waypoint_interval / ds.collect_stride) as usize
            * ds.horizon as usize;
        ds.frames = ds.frames[keep..=keep + horizon_span].to_vec();
        ds.episodes[0].frame_offset = 0;
        ds.episodes[0].frame_count = ds.frames.len() as u64;
        let dir = tempfile::tempdir().unwrap();
        let outcome = train(&cfg, &ds, dir.path()).unwrap();
        let first = outcome.log.first().unwrap().train.total;
        let last = outcome.log.last().unwrap().train.total;
        assert!(
            last < 0.01 * first.abs().max(1e-9),
            "overfit failed: first {first}, last {last}"
        );
        // monotone after warmup at the block scale: 50-epoch means keep
        // descending (single SGD steps zigzag by construction)
        let tail: Vec<f64> =
            outcome.log.iter().skip(100).map(|r| r.train.total).collect();
        let blocks: Vec<f64> = tail
            .chunks(50)
            .filter(|c| c.len() == 50)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        for pair in blocks.windows(2) {
            assert!(
                pair[1] <= pair[0] * 1.05 + 1e-9,
                "block means rose after warmup: {blocks:?}"
            );
        }
    }
}
