// scratch: paired-twin comparison (diversity on vs off) for calibration
use divdrive::harness::dataset::collect;
use divdrive::harness::evaluate::{evaluate, EvalSubject};
use divdrive::harness::interpret_run::interpret_model;
use divdrive::harness::train::train;
use divdrive::harness::RunConfig;

fn main() {
    let t0 = std::time::Instant::now();
    let base = RunConfig::default();
    for (label, lambda) in [("div", 5e-5), ("base", 0.0)] {
        let mut cfg = base.clone();
        cfg.weights.lambda_div = lambda;
        let out = std::path::PathBuf::from(format!("/tmp/twin_{label}"));
        std::fs::create_dir_all(&out).unwrap();
        let data = collect(&cfg).unwrap();
        let trained = train(&cfg, &data.dataset, &out).unwrap();
        let eval = evaluate(&cfg, EvalSubject::Model(Box::new(trained.model.clone())), None, &out.join("eval")).unwrap();
        let stats = interpret_model(&cfg, trained.model, None, None).unwrap();
        println!(
            "{label}: DS {:.3} ± {:.3}  RC {:.2}  GTC {:?}  IoU {:?}  rho_ctrl {:?} rho_traj {:?} frames {} [{:.0} s]",
            eval.bench.ds_mean, eval.bench.ds_std, eval.bench.rc_mean,
            stats.overall_gtc(),
            stats.pooled_categories.overall.as_ref().and_then(|m| m.iou),
            stats.rho_ctrl, stats.rho_traj, stats.frames,
            t0.elapsed().as_secs_f64()
        );
    }
}
