//! Oscillation amplitude with two digits per device against five per device.
//!
//! cargo run --release --example task_complexity

use p2pl::config::{preset_config, EvalDevicesConfig, DATA_DIR_ENV};
use p2pl::data;
use p2pl::engine::{oscillation_stats, run_experiment, EvalDevices, Stratum};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut loaded = None;
    for name in ["fig5-taskcomplexity-4class", "fig5-taskcomplexity"] {
        let mut cfg = preset_config(name)?;
        if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
            cfg.data.dir = dir.into();
        }
        cfg.rounds = 20;
        cfg.eval.devices = EvalDevicesConfig(EvalDevices::List(vec![0]));
        cfg.eval.train_loss_samples = 0;
        let (train, test) = match &loaded {
            Some(d) => d,
            None => loaded.insert(data::load_mnist_dir(&cfg.data.dir)?),
        };
        let records = run_experiment(&cfg.setup()?, train, test)?.records;
        let stats = oscillation_stats(&records, 1..=cfg.rounds);
        let unseen = stats.get(0, Stratum::Unseen).expect("device 0 evaluated");
        println!(
            "{name:<28} B={:<5} mean unseen amplitude {:.4}, first rounds {:?}",
            cfg.algorithm.batch_size,
            unseen.window_mean_abs.unwrap_or(f64::NAN),
            unseen.amplitudes.iter().take(5).map(|&(_, a)| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
    Ok(())
}
