// scratch: calibration over (seed, epochs) for the shipped default config
use divdrive::harness::dataset::collect;
use divdrive::harness::evaluate::{evaluate, EvalSubject};
use divdrive::harness::interpret_run::interpret_model;
use divdrive::harness::train::train;
use divdrive::harness::RunConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args[1].parse().unwrap();
    let epochs: usize = args[2].parse().unwrap();
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let mut results = Vec::new();
    for (label, lambda) in [("div", 5e-5), ("base", 0.0)] {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.optimizer.epochs = epochs;
        cfg.optimizer.learning_rate = lr;
        cfg.weights.lambda_div = lambda;
        let out = std::path::PathBuf::from(format!("/tmp/calib_{seed}_{epochs}_{label}"));
        std::fs::create_dir_all(&out).unwrap();
        let data = collect(&cfg).unwrap();
        let trained = train(&cfg, &data.dataset, &out).unwrap();
        let eval = evaluate(&cfg, EvalSubject::Model(Box::new(trained.model.clone())), None, &out.join("eval")).unwrap();
        let stats = interpret_model(&cfg, trained.model, None, None).unwrap();
        println!(
            "seed {seed} epochs {epochs} {label}: DS {:.10}  RC {:.6}  GTC {:.10}",
            eval.bench.ds_mean, eval.bench.rc_mean,
            stats.overall_gtc().unwrap_or(f64::NAN),
        );
        results.push((eval.bench.ds_mean, stats.overall_gtc().unwrap_or(f64::NAN)));
    }
    let pass = results[0].0 >= results[1].0 && results[0].1 > results[1].1;
    println!("seed {seed} epochs {epochs}: DS_div>=DS_base {}  GTC_div>GTC_base {}  ==> {}",
        results[0].0 >= results[1].0, results[0].1 > results[1].1, if pass {"PASS"} else {"FAIL"});
}
