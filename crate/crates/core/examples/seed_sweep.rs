//! How often the first five rounds show forgetting and recovery, per seed.
//!
//! cargo run --release --example seed_sweep [seeds]

use p2pl::config::{preset_config, EvalDevicesConfig, DATA_DIR_ENV};
use p2pl::data;
use p2pl::engine::{oscillation_stats, run_experiment, EvalDevices, Phase, Stratum};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seeds: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(10);
    let mut cfg = preset_config("fig3-noniid")?;
    if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
        cfg.data.dir = dir.into();
    }
    cfg.rounds = 5;
    cfg.eval.devices = EvalDevicesConfig(EvalDevices::List(vec![0]));
    cfg.eval.train_loss_samples = 0;
    let (train, test) = data::load_mnist_dir(&cfg.data.dir)?;
    println!("{:>4} {:>14} {:>12} {:>10} {:>10}", "seed", "min learned", "max jump", "|seen|", "|unseen|");
    for seed in 0..seeds {
        cfg.seed = seed;
        let records = run_experiment(&cfg.setup()?, &train, &test)?.records;
        let learned = records
            .iter()
            .filter(|r| r.phase == Phase::PostLearning)
            .filter_map(|r| r.unseen_acc)
            .fold(f64::INFINITY, f64::min);
        let stats = oscillation_stats(&records, 1..=5);
        let (seen, unseen) = (stats.get(0, Stratum::Seen).unwrap(), stats.get(0, Stratum::Unseen).unwrap());
        let jump = unseen.amplitudes.iter().map(|&(_, a)| a).fold(f64::NEG_INFINITY, f64::max);
        println!(
            "{seed:>4} {learned:>14.3} {jump:>12.3} {:>10.3} {:>10.3}",
            seen.window_mean_abs.unwrap_or(0.0),
            unseen.window_mean_abs.unwrap_or(0.0)
        );
    }
    Ok(())
}
