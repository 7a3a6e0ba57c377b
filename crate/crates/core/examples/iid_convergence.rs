//! P2PL on ten IID shards of 600 samples over a complete graph.
//!
//! cargo run --release --example iid_convergence [rounds]

use p2pl::config::{preset_config, ShardsConfig, DATA_DIR_ENV};
use p2pl::data;
use p2pl::engine::{convergence_rounds, run_experiment, summarize, Phase, Stratum};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = preset_config("fig2-iid-complete")?;
    if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
        cfg.data.dir = dir.into();
    }
    cfg.shards = ShardsConfig::Iid {
        devices: 10,
        per_device: Some(600),
    };
    cfg.rounds = std::env::args().nth(1).map(|r| r.parse()).transpose()?.unwrap_or(50);
    let (train, test) = data::load_mnist_dir(&cfg.data.dir)?;
    let records = run_experiment(&cfg.setup()?, &train, &test)?.records;
    for s in summarize(&records, Stratum::Overall) {
        if s.phase == Phase::PostConsensus && (s.round % 5 == 0 || s.round == 1) {
            println!("round {:>3}: min {:.4} mean {:.4} max {:.4}", s.round, s.min, s.mean, s.max);
        }
    }
    for threshold in [0.90, 0.93] {
        let c = convergence_rounds(&records, threshold);
        println!("{threshold}: average at {:?}, minimum at {:?}", c.average, c.minimum);
    }
    Ok(())
}
