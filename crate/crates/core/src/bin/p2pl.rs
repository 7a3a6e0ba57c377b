use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use p2pl::config::{self, AlgorithmPartial, EvalDevicesConfig, EvalPartial, Overrides, DATA_DIR_ENV};
use p2pl::data;
use p2pl::engine::{self, EvalDevices, Stratum};
use p2pl::fetch;
use p2pl::protocol::Variant;
use p2pl::report::{self, CsvSink};
use p2pl::topology::{self, GraphKind};

#[derive(Parser)]
#[command(name = "p2pl", version, about = "Peer-to-peer deep learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write config.toml, metrics.csv and edges.txt.
    Run(Box<RunArgs>),
    /// Render an SVG line chart from a metrics CSV.
    Plot(PlotArgs),
    /// Download and verify the MNIST IDX files.
    FetchData(FetchArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a shipped preset (beats the file's `preset` key).
    #[arg(long, long_help = preset_help())]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Worker threads (0 = one per core).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory holding the four MNIST IDX files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// dsgd, local_dsgd, p2pl or p2pl_affinity.
    #[arg(long)]
    variant: Option<Variant>,
    /// Learning rate.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Affinity bias step size.
    #[arg(long)]
    eta_d: Option<f64>,
    /// Consensus bias step size.
    #[arg(long)]
    eta_b: Option<f64>,
    /// Local gradient steps per round (T).
    #[arg(long)]
    local_steps: Option<usize>,
    /// Consensus steps per round (S).
    #[arg(long)]
    consensus_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_norm_sync: Option<bool>,
    /// Device count of an IID partition.
    #[arg(long)]
    devices: Option<usize>,
    /// complete, ring, grid or erdos_renyi:<p>.
    #[arg(long, value_parser = parse_graph)]
    graph: Option<GraphKind>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// all, a comma list of ids, or random:<n>.
    #[arg(long, value_parser = parse_eval_devices)]
    eval_devices: Option<EvalDevices>,
    #[arg(long)]
    train_loss_samples: Option<usize>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    metrics: PathBuf,
    /// Series selector, e.g. `device=0,stratum=unseen;device=0,stratum=seen;x=iterations`.
    #[arg(long)]
    spec: String,
    /// Output SVG (default: next to the CSV as plot.svg).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FetchArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = fetch::DEFAULT_BASE_URL)]
    base_url: String,
}

fn preset_help() -> String {
    let mut s = String::from("Start from a shipped preset (beats the file's `preset` key):\n");
    for (name, what) in config::PRESETS {
        s.push_str(&format!("  {name:<28} {what}\n"));
    }
    s
}

fn parse_graph(s: &str) -> Result<GraphKind, String> {
    match s {
        "complete" => Ok(GraphKind::Complete),
        "ring" => Ok(GraphKind::Ring),
        "grid" => Ok(GraphKind::Grid),
        _ => {
            let p = s
                .strip_prefix("erdos_renyi:")
                .ok_or_else(|| format!("unknown graph `{s}`"))?;
            let p: f64 = p.parse().map_err(|_| format!("bad edge probability `{p}`"))?;
            Ok(GraphKind::ErdosRenyi { p })
        }
    }
}

fn parse_eval_devices(s: &str) -> Result<EvalDevices, String> {
    if s == "all" {
        return Ok(EvalDevices::All);
    }
    if let Some(n) = s.strip_prefix("random:") {
        return n.parse().map(EvalDevices::Random).map_err(|_| format!("bad count `{n}`"));
    }
    s.split(',')
        .map(|d| d.trim().parse().map_err(|_| format!("bad device id `{d}`")))
        .collect::<Result<_, _>>()
        .map(EvalDevices::List)
}

/// Error categories, each with its own exit code.
enum Failure {
    Config(String),
    Data(String),
    Simulation(String),
    Output(String),
    Network(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Simulation(_) => 4,
            Failure::Output(_) => 5,
            Failure::Network(_) => 6,
        }
    }

    fn report(&self) {
        let (kind, msg) = match self {
            Failure::Config(m) => ("config error", m),
            Failure::Data(m) => ("data error", m),
            Failure::Simulation(m) => ("simulation error", m),
            Failure::Output(m) => ("output error", m),
            Failure::Network(m) => ("network error", m),
        };
        eprintln!("p2pl: {kind}: {msg}");
    }
}

fn overrides(a: &RunArgs) -> Overrides {
    Overrides {
        seed: a.seed,
        rounds: a.rounds,
        workers: a.workers,
        output_dir: a.out.clone(),
        data_dir: a.data_dir.clone(),
        algorithm: AlgorithmPartial {
            variant: a.variant,
            lr: a.eta,
            momentum: a.momentum,
            affinity_step: a.eta_d,
            consensus_bias_step: a.eta_b,
            local_steps: a.local_steps,
            consensus_steps: a.consensus_steps,
            batch_size: a.batch_size,
            epsilon: a.epsilon,
            max_norm_sync: a.max_norm_sync,
        },
        devices: a.devices,
        graph: a.graph,
        eval: EvalPartial {
            every: a.eval_every,
            devices: a.eval_devices.clone().map(EvalDevicesConfig),
            train_loss_samples: a.train_loss_samples,
        },
    }
}

fn run(a: RunArgs) -> Result<(), Failure> {
    if a.config.is_none() && a.preset.is_none() {
        return Err(Failure::Config("give --config <file>, --preset <name> or both".into()));
    }
    let file = match &a.config {
        Some(path) => Some(config::parse_config(path).map_err(|e| Failure::Config(e.to_string()))?),
        None => None,
    };
    let env_dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
    let cfg = config::resolve(a.preset.as_deref(), file.as_ref(), &overrides(&a), env_dir)
        .map_err(|e| Failure::Config(e.to_string()))?;
    let setup = cfg.setup().map_err(|e| Failure::Config(e.to_string()))?;

    let (train, test) = data::load_mnist_dir(&cfg.data.dir).map_err(|e| {
        Failure::Data(format!("{e} (run `p2pl fetch-data --out {}` first?)", cfg.data.dir.display()))
    })?;

    let out = &cfg.output_dir;
    let io = |what: &str, e: std::io::Error| Failure::Output(format!("{what} in {}: {e}", out.display()));
    std::fs::create_dir_all(out).map_err(|e| io("cannot create output directory", e))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()).map_err(|e| io("cannot write config.toml", e))?;

    let graph = topology::build_graph(setup.graph, setup.shards.num_devices(), setup.seed)
        .map_err(|e| Failure::Simulation(e.to_string()))?;
    let edges = File::create(out.join("edges.txt")).map_err(|e| io("cannot create edges.txt", e))?;
    graph
        .write_edge_list(BufWriter::new(edges))
        .map_err(|e| io("cannot write edges.txt", e))?;

    let csv = File::create(out.join("metrics.csv")).map_err(|e| io("cannot create metrics.csv", e))?;
    let mut sink = CsvSink::new(BufWriter::new(csv)).map_err(|e| io("cannot write metrics.csv", e))?;
    let mut write_error = None;
    let result = engine::run_experiment_with(&setup, &train, &test, |r| {
        if write_error.is_none() {
            write_error = sink.push(r).err();
        }
    });
    sink.finish().map_err(|e| io("cannot flush metrics.csv", e))?;
    if let Some(e) = write_error {
        return Err(io("cannot write metrics.csv", e));
    }
    let table = result.map_err(|f| {
        Failure::Simulation(format!("{f}; partial metrics kept in {}", out.join("metrics.csv").display()))
    })?;

    println!("wrote {}", out.display());
    let summary = engine::summarize(&table.records, Stratum::Overall);
    if let Some(last) = summary.last() {
        println!(
            "round {} ({}): overall accuracy min {:.4} mean {:.4} max {:.4}",
            last.round, last.phase, last.min, last.mean, last.max
        );
    }
    let conv = engine::convergence_rounds(&table.records, 0.97);
    let show = |r: Option<usize>| r.map_or("not reached".to_string(), |r| format!("round {r}"));
    println!("97% overall: average {}, minimum {}", show(conv.average), show(conv.minimum));
    let osc = engine::oscillation_stats(&table.records, 1..=cfg.rounds);
    for ((device, stratum), s) in &osc.series {
        if let (Some(m), Some(abs)) = (s.window_mean, s.window_mean_abs) {
            if *stratum != Stratum::Overall && *device < 4 {
                println!("device {device} {}: mean amplitude {m:+.4} (|.| {abs:.4})", stratum.name());
            }
        }
    }
    Ok(())
}

fn plot(a: PlotArgs) -> Result<(), Failure> {
    let spec = report::parse_selector(&a.spec).map_err(|e| Failure::Config(e.to_string()))?;
    let records = report::read_csv(&a.metrics).map_err(|e| Failure::Data(e.to_string()))?;
    let out = a
        .out
        .unwrap_or_else(|| a.metrics.parent().unwrap_or(std::path::Path::new(".")).join("plot.svg"));
    report::write_svg(&records, &spec, &out).map_err(|e| match e {
        report::ReportError::Write { .. } => Failure::Output(e.to_string()),
        _ => Failure::Config(e.to_string()),
    })?;
    println!("wrote {}", out.display());
    Ok(())
}

fn fetch_data(a: FetchArgs) -> Result<(), Failure> {
    let outcomes = fetch::fetch_mnist(&a.base_url, &a.out).map_err(|e| match e {
        fetch::FetchError::Io { .. } => Failure::Output(e.to_string()),
        _ => Failure::Network(e.to_string()),
    })?;
    for (file, outcome) in fetch::mnist_files().iter().zip(outcomes) {
        let what = match outcome {
            fetch::Outcome::Downloaded => "downloaded",
            fetch::Outcome::AlreadyPresent => "already present",
        };
        println!("{}: {what}", file.name);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(*a),
        Command::Plot(a) => plot(a),
        Command::FetchData(a) => fetch_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            f.report();
            ExitCode::from(f.code())
        }
    }
}
