//! The forgetting sawtooth of two devices with disjoint digit pairs: unseen
//! accuracy collapses during local training and jumps back after consensus.
//!
//! cargo run --release --example forgetting

use p2pl::config::{preset_config, DATA_DIR_ENV};
use p2pl::data;
use p2pl::engine::{oscillation_stats, run_experiment, Phase, Stratum};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = preset_config("fig3-noniid")?;
    if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
        cfg.data.dir = dir.into();
    }
    cfg.rounds = 15;
    let (train, test) = data::load_mnist_dir(&cfg.data.dir)?;
    let records = run_experiment(&cfg.setup()?, &train, &test)?.records;

    println!("device A (digits 0 and 1), seed {}", cfg.seed);
    println!("{:>5} {:>10} {:>10} {:>10} {:>10}", "round", "phase", "seen", "unseen", "overall");
    for r in records.iter().filter(|r| r.device == 0) {
        let pct = |s| r.stratum(s).map_or("-".into(), |v| format!("{:.1}%", 100.0 * v));
        let phase = match r.phase {
            Phase::Init => "init",
            Phase::PostLearning => "learned",
            Phase::PostConsensus => "mixed",
        };
        println!(
            "{:>5} {phase:>10} {:>10} {:>10} {:>10}",
            r.round,
            pct(Stratum::Seen),
            pct(Stratum::Unseen),
            pct(Stratum::Overall)
        );
    }
    let stats = oscillation_stats(&records, 1..=5);
    for s in [Stratum::Seen, Stratum::Unseen] {
        let series = stats.get(0, s).expect("device 0 evaluated");
        println!(
            "rounds 1-5 {} amplitude: mean {:+.3}, mean |.| {:.3}",
            s.name(),
            series.window_mean.unwrap_or(0.0),
            series.window_mean_abs.unwrap_or(0.0)
        );
    }
    Ok(())
}
