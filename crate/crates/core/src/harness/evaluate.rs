//! Closed-loop evaluation: run a policy over the configured routes and
//! seeds, score the episodes, and write the metric reports (CSV + JSON),
//! every artifact stamped with the config hash.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::RunConfig;
use crate::error::Result;
use crate::model::Model;
use crate::policy::NeuralPolicy;
use crate::sim::infractions::InfractionKind;
use crate::sim::{
    run_episode, score, BenchmarkScore, EpisodeOptions, EpisodeRecord, ExpertPolicy, Policy,
};

/// Which policy to evaluate.
pub enum EvalSubject {
    Expert,
    Checkpoint(PathBuf),
    /// An already-loaded model (used by the sweep and tests).
    Model(Box<Model>),
}

pub struct EvalOutcome {
    pub bench: BenchmarkScore,
    pub records: Vec<EpisodeRecord>,
    pub report_paths: Vec<PathBuf>,
}

fn build_policy(subject: &EvalSubject, config: &RunConfig) -> Result<Box<dyn Policy>> {
    Ok(match subject {
        EvalSubject::Expert => Box::new(ExpertPolicy::new(
            config.waypoint_interval,
            config.model.obs_size,
        )),
        EvalSubject::Checkpoint(path) => {
            let (model, _) = Model::load_checkpoint_file(path, &config.hash())?;
            Box::new(neural(model, config))
        }
        EvalSubject::Model(model) => Box::new(neural((**model).clone(), config)),
    })
}

fn neural(model: Model, config: &RunConfig) -> NeuralPolicy {
    let dt = 0.05; // worlds carry their own dt; waypoint spacing uses it
    NeuralPolicy::new(
        model,
        config.lateral_pid,
        config.longitudinal_pid,
        config.fusion,
        config.waypoint_interval as f64 * dt,
    )
}

/// Run the closed-loop benchmark. `runs` overrides the configured
/// `eval_seeds` when given.
pub fn evaluate(
    config: &RunConfig,
    subject: EvalSubject,
    runs: Option<u64>,
    out_dir: &Path,
) -> Result<EvalOutcome> {
    config.validate()?;
    let worlds = config.load_routes()?;
    let n_runs = runs.unwrap_or(config.eval_seeds).max(1);
    let mut policy = build_policy(&subject, config)?;
    let opts = EpisodeOptions {
        record_observations: false,
        waypoint_interval: config.waypoint_interval,
    };
    let mut records = Vec::new();
    for world in &worlds {
        for run in 0..n_runs {
            let seed = config.seed ^ (run.wrapping_mul(0xC0FF_EE)) ^ 0x5EED;
            records.push(run_episode(world, seed, policy.as_mut(), &opts, None)?);
        }
    }
    let bench = score(&records, &config.penalties)?;
    let report_paths = write_reports(config, &bench, out_dir)?;
    Ok(EvalOutcome { bench, records, report_paths })
}

#[derive(Serialize)]
struct Summary<'a> {
    config_hash: String,
    ds_mean: f64,
    ds_std: f64,
    rc_mean: f64,
    rc_std: f64,
    ip_mean: f64,
    ip_std: f64,
    total_km: f64,
    episodes: usize,
    per_km: Option<&'a std::collections::BTreeMap<InfractionKind, f64>>,
}

fn write_reports(
    config: &RunConfig,
    bench: &BenchmarkScore,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let hash_hex = config.hash_hex();
    let mut paths = Vec::new();

    let metrics_path = out_dir.join("metrics.csv");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
        writeln!(f, "# config_hash={hash_hex}")?;
        writeln!(f, "metric,mean,std")?;
        writeln!(f, "driving_score,{},{}", bench.ds_mean, bench.ds_std)?;
        writeln!(f, "route_completion,{},{}", bench.rc_mean, bench.rc_std)?;
        writeln!(f, "infraction_penalty,{},{}", bench.ip_mean, bench.ip_std)?;
        f.flush()?;
    }
    paths.push(metrics_path);

    let infractions_path = out_dir.join("infractions.csv");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&infractions_path)?);
        writeln!(f, "# config_hash={hash_hex}")?;
        writeln!(f, "kind,count,per_km")?;
        for kind in InfractionKind::ALL {
            let count = bench.infraction_counts.get(&kind).copied().unwrap_or(0);
            match &bench.per_km {
                Some(rates) => writeln!(f, "{},{},{}", kind.label(), count, rates[&kind])?,
                None => writeln!(f, "{},{},", kind.label(), count)?,
            }
        }
        f.flush()?;
    }
    paths.push(infractions_path);

    let episodes_path = out_dir.join("episodes.csv");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&episodes_path)?);
        writeln!(f, "# config_hash={hash_hex}")?;
        writeln!(f, "route,seed,rc,ip,ds,distance_km")?;
        for e in &bench.episodes {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                e.world_name, e.seed, e.rc, e.ip, e.ds, e.distance_km
            )?;
        }
        f.flush()?;
    }
    paths.push(episodes_path);

    let summary_path = out_dir.join("summary.json");
    {
        let summary = Summary {
            config_hash: hash_hex,
            ds_mean: bench.ds_mean,
            ds_std: bench.ds_std,
            rc_mean: bench.rc_mean,
            rc_std: bench.rc_std,
            ip_mean: bench.ip_mean,
            ip_std: bench.ip_std,
            total_km: bench.total_km,
            episodes: bench.episodes.len(),
            per_km: bench.per_km.as_ref(),
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(&summary_path)?);
        serde_json::to_writer_pretty(&mut f, &summary)
            .map_err(|e| crate::error::Error::Io(std::io::Error::other(e)))?;
        f.flush()?;
    }
    paths.push(summary_path);
    Ok(paths)
}
