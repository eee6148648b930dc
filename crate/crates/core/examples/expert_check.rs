// scratch: expert closed-loop quality across the desk benchmark
use divdrive::sim::{routes, run_episode, score, EpisodeOptions, ExpertPolicy, PenaltyCoefficients};

fn main() {
    let mut records = Vec::new();
    for world in routes::desk_benchmark() {
        for seed in 0..3u64 {
            let mut policy = ExpertPolicy::new(10, 32);
            let rec = run_episode(&world, seed, &mut policy, &EpisodeOptions::default(), None).unwrap();
            println!(
                "{:>16} seed {}: completion {:.3} dur {:>5.1}s dist {:.3}km term {:?} infractions {:?}",
                world.name, seed, rec.completion, rec.duration, rec.distance_km, rec.termination,
                rec.infractions.iter().map(|e| e.kind).collect::<Vec<_>>()
            );
            records.push(rec);
        }
    }
    let bench = score(&records, &PenaltyCoefficients::default()).unwrap();
    println!("\nDS {:.2} ± {:.2}  RC {:.2} ± {:.2}  IP {:.3} ± {:.3}  km {:.3}",
        bench.ds_mean, bench.ds_std, bench.rc_mean, bench.rc_std, bench.ip_mean, bench.ip_std, bench.total_km);
}
