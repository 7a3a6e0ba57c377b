//! Same gradient budget, consensus every 10 or every 5 local steps.
//!
//! cargo run --release --example local_steps_sweep

use p2pl::config::{preset_config, EvalDevicesConfig, DATA_DIR_ENV};
use p2pl::data;
use p2pl::engine::{oscillation_stats, run_experiment, EvalDevices, Phase, Stratum};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut loaded = None;
    for name in ["fig4-localsteps", "fig4-localsteps-t5"] {
        let mut cfg = preset_config(name)?;
        if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
            cfg.data.dir = dir.into();
        }
        cfg.eval.devices = EvalDevicesConfig(EvalDevices::List(vec![0]));
        cfg.eval.train_loss_samples = 0;
        let (train, test) = match &loaded {
            Some(d) => d,
            None => loaded.insert(data::load_mnist_dir(&cfg.data.dir)?),
        };
        let records = run_experiment(&cfg.setup()?, train, test)?.records;
        let last = records
            .iter()
            .find(|r| r.round == cfg.rounds && r.phase == Phase::PostConsensus)
            .expect("last round evaluated");
        let stats = oscillation_stats(&records, 1..=cfg.rounds);
        let amp = |s| stats.get(0, s).and_then(|x| x.window_mean_abs).unwrap_or(f64::NAN);
        println!(
            "T={:<3} rounds={:<3} final overall {:.4}  mean |amplitude| overall {:.4} seen {:.4} unseen {:.4}",
            cfg.algorithm.local_steps,
            cfg.rounds,
            last.overall_acc.unwrap_or(f64::NAN),
            amp(Stratum::Overall),
            amp(Stratum::Seen),
            amp(Stratum::Unseen)
        );
    }
    Ok(())
}
