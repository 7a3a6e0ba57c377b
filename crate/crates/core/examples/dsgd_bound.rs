//! Local DSGD against DSGD at matched gradient steps on the disjoint digit
//! pairs. DSGD mixes after every step; local DSGD after ten.
//!
//! cargo run --release --example dsgd_bound

use p2pl::config::{preset_config, DATA_DIR_ENV};
use p2pl::data;
use p2pl::engine::{run_experiment, MetricsRecord, Phase};
use p2pl::protocol::{preset, AlgorithmConfig, Variant};

fn unseen(records: &[MetricsRecord], round: usize, device: usize) -> f64 {
    records
        .iter()
        .find(|r| r.round == round && r.phase == Phase::PostConsensus && r.device == device)
        .and_then(|r| r.unseen_acc)
        .unwrap_or(f64::NAN)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut local = preset_config("fig3-noniid")?;
    if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
        local.data.dir = dir.into();
    }
    local.rounds = 20;
    local.eval.train_loss_samples = 0;
    let mut dsgd = local.clone();
    dsgd.algorithm = AlgorithmConfig {
        local_steps: 1,
        ..preset(Variant::Dsgd)
    };
    dsgd.rounds = 10 * local.rounds;
    dsgd.eval.every = 10;

    let (train, test) = data::load_mnist_dir(&local.data.dir)?;
    let l = run_experiment(&local.setup()?, &train, &test)?.records;
    let d = run_experiment(&dsgd.setup()?, &train, &test)?.records;
    println!("{:>6} {:>12} {:>12} {:>12} {:>12}", "steps", "local A", "dsgd A", "local B", "dsgd B");
    for r in 1..=local.rounds {
        println!(
            "{:>6} {:>12.3} {:>12.3} {:>12.3} {:>12.3}",
            10 * r,
            unseen(&l, r, 0),
            unseen(&d, 10 * r, 0),
            unseen(&l, r, 1),
            unseen(&d, 10 * r, 1)
        );
    }
    Ok(())
}
