//! Runs a short experiment and renders its sawtooth to SVG.
//!
//! cargo run --release --example render_plot [out_dir]

use std::path::PathBuf;

use p2pl::config::{preset_config, DATA_DIR_ENV};
use p2pl::data;
use p2pl::engine::run_experiment;
use p2pl::report::{emit_csv, parse_selector, read_csv, write_svg};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs/plot-demo"));
    let mut cfg = preset_config("fig3-noniid")?;
    if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
        cfg.data.dir = dir.into();
    }
    cfg.rounds = 12;
    let (train, test) = data::load_mnist_dir(&cfg.data.dir)?;
    let records = run_experiment(&cfg.setup()?, &train, &test)?.records;

    std::fs::create_dir_all(&out)?;
    let csv = out.join("metrics.csv");
    emit_csv(&records, &csv)?;
    // plot from the file, as the CLI does
    let stored = read_csv(&csv)?;
    let spec = parse_selector("device=0,stratum=unseen;device=0,stratum=seen;x=iterations;title=device A")?;
    write_svg(&stored, &spec, &out.join("sawtooth.svg"))?;
    let spec = parse_selector("device=mean,stratum=overall,phase=post_consensus;device=min,stratum=overall,phase=post_consensus")?;
    write_svg(&stored, &spec, &out.join("consensus.svg"))?;
    println!("wrote {}", out.display());
    Ok(())
}
