//! P2PL with Affinity against local DSGD on the five/five digit split.
//!
//! cargo run --release --example affinity_damping [eta_d]

use p2pl::config::{preset_config, EvalDevicesConfig, DATA_DIR_ENV};
use p2pl::data;
use p2pl::engine::{oscillation_stats, run_experiment, EvalDevices, Phase, Stratum};
use p2pl::protocol::Variant;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut base = preset_config("fig6-affinity")?;
    if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
        base.data.dir = dir.into();
    }
    if let Some(eta) = std::env::args().nth(1) {
        base.algorithm.affinity_step = eta.parse()?;
    }
    base.eval.devices = EvalDevicesConfig(EvalDevices::List(vec![0]));
    base.eval.train_loss_samples = 0;
    let mut local = base.clone();
    local.algorithm.variant = Variant::LocalDsgd;
    local.algorithm.affinity_step = 0.0;

    let (train, test) = data::load_mnist_dir(&base.data.dir)?;
    for (label, cfg) in [("affinity", &base), ("local dsgd", &local)] {
        let records = run_experiment(&cfg.setup()?, &train, &test)?.records;
        let stats = oscillation_stats(&records, 1..=cfg.rounds);
        let amp = stats.get(0, Stratum::Unseen).and_then(|s| s.window_mean_abs);
        let last = records
            .iter()
            .find(|r| r.round == cfg.rounds && r.phase == Phase::PostConsensus)
            .and_then(|r| r.unseen_acc);
        println!(
            "{label:<11} eta_d={:<5} mean |unseen amplitude| {:.4}  final unseen {:.4}",
            cfg.algorithm.affinity_step,
            amp.unwrap_or(f64::NAN),
            last.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
