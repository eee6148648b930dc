//! Interpretability pipeline: replay the policy closed-loop, extract a
//! saliency map per frame from the encoder feature stack, compare against
//! rasterized ground-truth object masks and semantic classes, and correlate
//! lateral saliency mass with the steering signals.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::RunConfig;
use crate::error::{Error, Result};
use crate::interpret::{
    binarize, category_report, correlation_report, eigencam, pearson, semantic_iou, BinaryMask,
    CategoryReport, CorrelationReport, MeanScores,
};
use crate::model::Model;
use crate::policy::NeuralPolicy;
use crate::sim::{
    render, run_episode, EpisodeOptions, MaskCategory, SemanticClass, StepView,
};

/// Per-model interpretability statistics over the benchmark.
#[derive(Debug, Clone, Default)]
pub struct InterpretStats {
    pub per_route_categories: BTreeMap<String, CategoryReport>,
    pub per_route_semantic: BTreeMap<String, BTreeMap<SemanticClass, MeanScores>>,
    /// Pooled over all routes.
    pub pooled_categories: CategoryReport,
    /// Saliency-mass correlation with the control-head steer, when defined.
    pub rho_ctrl: Option<f64>,
    /// Same against the trajectory-PID steer.
    pub rho_traj: Option<f64>,
    pub frames: usize,
}

impl InterpretStats {
    /// Overall ground-truth coverage, the headline comparison number.
    pub fn overall_gtc(&self) -> Option<f64> {
        self.pooled_categories.overall.as_ref().and_then(|m| m.gtc)
    }
}

pub struct InterpretOutcome {
    pub main: InterpretStats,
    pub baseline: Option<InterpretStats>,
    pub comparisons: Vec<(String, CorrelationReport)>,
    pub report_paths: Vec<PathBuf>,
}

struct FrameAccumulator {
    quantile: f64,
    grid: usize,
    category_frames: Vec<(BinaryMask, BTreeMap<MaskCategory, BinaryMask>)>,
    semantic_frames: Vec<(BinaryMask, BTreeMap<SemanticClass, BinaryMask>)>,
    mass: Vec<f64>,
    ctrl_steer: Vec<f64>,
    traj_steer: Vec<f64>,
    exported: usize,
    export_budget: usize,
    export_dir: Option<PathBuf>,
}

impl FrameAccumulator {
    fn observe(&mut self, view: &StepView) -> Result<()> {
        let Some(outputs) = view.decision.outputs.as_ref() else {
            return Ok(());
        };
        let saliency = eigencam(&outputs.image_features)?;
        let mask = binarize(&saliency, self.quantile)?;

        let mut cats = BTreeMap::new();
        for cat in MaskCategory::ALL {
            let cells = render::render_category_mask(
                view.ctx.world,
                &view.ctx.ego,
                view.ctx.time,
                self.grid,
                cat,
            );
            cats.insert(cat, BinaryMask::new(self.grid, self.grid, cells)?);
        }
        let mut classes = BTreeMap::new();
        for class in SemanticClass::ALL {
            let cells =
                render::render_semantic_mask(view.ctx.world, &view.ctx.ego, self.grid, class);
            classes.insert(class, BinaryMask::new(self.grid, self.grid, cells)?);
        }
        self.mass.push(saliency.lateral_mass());
        self.ctrl_steer.push(view.decision.ctrl_steer);
        self.traj_steer.push(view.decision.traj_steer);
        if let (Some(dir), true) = (&self.export_dir, self.exported < self.export_budget) {
            let path = dir.join(format!("frame_{:05}.pgm", self.exported));
            saliency.write_pgm_file(&path)?;
            self.exported += 1;
        }
        self.category_frames.push((mask.clone(), cats));
        self.semantic_frames.push((mask, classes));
        Ok(())
    }
}

/// Run the benchmark closed-loop with `model` and accumulate interpretability
/// statistics.
pub fn interpret_model(
    config: &RunConfig,
    model: Model,
    runs: Option<u64>,
    export_saliency: Option<(PathBuf, usize)>,
) -> Result<InterpretStats> {
    let worlds = config.load_routes()?;
    let n_runs = runs.unwrap_or(config.eval_seeds).max(1);
    let mut policy = NeuralPolicy::new(
        model,
        config.lateral_pid,
        config.longitudinal_pid,
        config.fusion,
        config.waypoint_interval as f64 * 0.05,
    );
    let opts = EpisodeOptions {
        record_observations: false,
        waypoint_interval: config.waypoint_interval,
    };

    let mut stats = InterpretStats::default();
    let mut pooled_cat_frames = Vec::new();
    let mut mass = Vec::new();
    let mut ctrl_steer = Vec::new();
    let mut traj_steer = Vec::new();
    let (export_dir, export_budget) = match export_saliency {
        Some((dir, n)) => {
            std::fs::create_dir_all(&dir)?;
            (Some(dir), n)
        }
        None => (None, 0),
    };
    let mut export_used = 0usize;

    for world in &worlds {
        let mut acc = FrameAccumulator {
            quantile: config.binarize_quantile,
            grid: config.model.grid(),
            category_frames: Vec::new(),
            semantic_frames: Vec::new(),
            mass: Vec::new(),
            ctrl_steer: Vec::new(),
            traj_steer: Vec::new(),
            exported: 0,
            export_budget: export_budget.saturating_sub(export_used),
            export_dir: export_dir.clone(),
        };
        for run in 0..n_runs {
            let seed = config.seed ^ (run.wrapping_mul(0xC0FF_EE)) ^ 0x5EED;
            let mut err: Option<Error> = None;
            let mut observer = |view: &StepView| {
                if err.is_none() {
                    if let Err(e) = acc.observe(view) {
                        err = Some(e);
                    }
                }
            };
            run_episode(world, seed, &mut policy, &opts, Some(&mut observer))?;
            if let Some(e) = err {
                return Err(e);
            }
        }
        export_used += acc.exported;
        stats.frames += acc.category_frames.len();
        stats
            .per_route_categories
            .insert(world.name.clone(), category_report(&acc.category_frames)?);
        stats
            .per_route_semantic
            .insert(world.name.clone(), semantic_iou(&acc.semantic_frames)?);
        pooled_cat_frames.extend(acc.category_frames);
        mass.extend(acc.mass);
        ctrl_steer.extend(acc.ctrl_steer);
        traj_steer.extend(acc.traj_steer);
    }
    stats.pooled_categories = category_report(&pooled_cat_frames)?;
    let correlate = |a: &[f64], b: &[f64]| match pearson(a, b) {
        Ok(rho) => Some(rho),
        Err(Error::Degenerate(_)) => None,
        Err(Error::InvalidArgument(_)) if a.len() < 3 => None,
        Err(_) => None,
    };
    stats.rho_ctrl = correlate(&mass, &ctrl_steer);
    stats.rho_traj = correlate(&mass, &traj_steer);
    Ok(stats)
}

/// Full interpret command: checkpoint (plus optional baseline checkpoint for
/// the comparative correlation table), reports written under `out_dir`.
pub fn interpret(
    config: &RunConfig,
    checkpoint: &Path,
    baseline: Option<&Path>,
    runs: Option<u64>,
    export_saliency: Option<usize>,
    out_dir: &Path,
) -> Result<InterpretOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let hash = config.hash();
    let (model, _) = Model::load_checkpoint_file(checkpoint, &hash)?;
    let export = export_saliency.map(|n| (out_dir.join("saliency"), n));
    let main = interpret_model(config, model, runs, export)?;

    let baseline_stats = match baseline {
        Some(path) => {
            let (model, _) = Model::load_checkpoint_file(path, &hash)?;
            Some(interpret_model(config, model, runs, None)?)
        }
        None => None,
    };

    // comparative correlation rows need both models and enough frames
    let mut comparisons = Vec::new();
    if let Some(base) = &baseline_stats {
        let n_a = main.frames;
        let n_b = base.frames;
        for (signal, rho_a, rho_b) in [
            ("steer_ctrl", main.rho_ctrl, base.rho_ctrl),
            ("steer_traj", main.rho_traj, base.rho_traj),
        ] {
            if let (Some(ra), Some(rb)) = (rho_a, rho_b) {
                if n_a > 3 && n_b > 3 && ra.abs() < 1.0 && rb.abs() < 1.0 {
                    comparisons.push((signal.to_string(), correlation_report(ra, rb, n_a, n_b)?));
                }
            }
        }
    }

    let report_paths =
        write_reports(config, &main, baseline_stats.as_ref(), &comparisons, out_dir)?;
    Ok(InterpretOutcome { main, baseline: baseline_stats, comparisons, report_paths })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Serialize)]
struct JsonSummary {
    config_hash: String,
    frames: usize,
    overall_gtc: Option<f64>,
    rho_ctrl: Option<f64>,
    rho_traj: Option<f64>,
    baseline_frames: Option<usize>,
    baseline_overall_gtc: Option<f64>,
    baseline_rho_ctrl: Option<f64>,
    baseline_rho_traj: Option<f64>,
}

fn write_reports(
    config: &RunConfig,
    main: &InterpretStats,
    baseline: Option<&InterpretStats>,
    comparisons: &[(String, CorrelationReport)],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let hash_hex = config.hash_hex();
    let mut paths = Vec::new();

    let cat_path = out_dir.join("categories.csv");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&cat_path)?);
        writeln!(f, "# config_hash={hash_hex}")?;
        writeln!(f, "route,category,frames,iou,gtc,sc")?;
        let write_report = |f: &mut dyn Write, route: &str, rep: &CategoryReport| -> Result<()> {
            for (cat, m) in &rep.per_category {
                writeln!(
                    f,
                    "{route},{},{},{},{},{}",
                    cat.label(),
                    m.frames,
                    fmt_opt(m.iou),
                    fmt_opt(m.gtc),
                    fmt_opt(m.sc)
                )?;
            }
            if let Some(m) = &rep.overall {
                writeln!(
                    f,
                    "{route},overall,{},{},{},{}",
                    m.frames,
                    fmt_opt(m.iou),
                    fmt_opt(m.gtc),
                    fmt_opt(m.sc)
                )?;
            }
            Ok(())
        };
        for (route, rep) in &main.per_route_categories {
            write_report(&mut f, route, rep)?;
        }
        write_report(&mut f, "all", &main.pooled_categories)?;
        f.flush()?;
    }
    paths.push(cat_path);

    let sem_path = out_dir.join("semantic.csv");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&sem_path)?);
        writeln!(f, "# config_hash={hash_hex}")?;
        writeln!(f, "route,class,frames,iou")?;
        for (route, rep) in &main.per_route_semantic {
            for (class, m) in rep {
                writeln!(f, "{route},{},{},{}", class.label(), m.frames, fmt_opt(m.iou))?;
            }
        }
        f.flush()?;
    }
    paths.push(sem_path);

    let corr_path = out_dir.join("correlation.csv");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&corr_path)?);
        writeln!(f, "# config_hash={hash_hex}")?;
        writeln!(f, "signal,rho,n")?;
        writeln!(f, "steer_ctrl,{},{}", fmt_opt(main.rho_ctrl), main.frames)?;
        writeln!(f, "steer_traj,{},{}", fmt_opt(main.rho_traj), main.frames)?;
        f.flush()?;
    }
    paths.push(corr_path);

    if !comparisons.is_empty() {
        let cmp_path = out_dir.join("comparison.csv");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&cmp_path)?);
        writeln!(f, "# config_hash={hash_hex}")?;
        writeln!(f, "signal,rho_main,rho_baseline,r_squared,fisher_z,n_main,n_baseline")?;
        for (signal, row) in comparisons {
            writeln!(
                f,
                "{signal},{},{},{},{},{},{}",
                row.rho_a, row.rho_b, row.r_squared, row.fisher_z, row.n_a, row.n_b
            )?;
        }
        f.flush()?;
        paths.push(cmp_path);
    }

    let json_path = out_dir.join("interpret_summary.json");
    {
        let summary = JsonSummary {
            config_hash: hash_hex,
            frames: main.frames,
            overall_gtc: main.overall_gtc(),
            rho_ctrl: main.rho_ctrl,
            rho_traj: main.rho_traj,
            baseline_frames: baseline.map(|b| b.frames),
            baseline_overall_gtc: baseline.and_then(|b| b.overall_gtc()),
            baseline_rho_ctrl: baseline.and_then(|b| b.rho_ctrl),
            baseline_rho_traj: baseline.and_then(|b| b.rho_traj),
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(&json_path)?);
        serde_json::to_writer_pretty(&mut f, &summary)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        f.flush()?;
    }
    paths.push(json_path);
    Ok(paths)
}
