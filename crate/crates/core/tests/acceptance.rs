//! End-to-end acceptance checks on real MNIST.
//!
//! Runs as a plain binary (no libtest harness) so every criterion prints one
//! PASS/FAIL line whether or not it fails. Set `ACCEPTANCE_ONLY=4,6` to run a
//! subset. MNIST is read from `P2PL_DATA_DIR` or `<workspace>/data/mnist`.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use p2pl::config::{preset_config, ResolvedConfig, DATA_DIR_ENV};
use p2pl::data::{self, BatchStream, Dataset, Shard};
use p2pl::engine::{
    oscillation_stats, run_experiment, summarize, EvalDevices, MetricsRecord, Phase, Simulation, Stratum,
};
use p2pl::nn::{self, gradcheck, Batch};
use p2pl::protocol::{self, preset, AlgorithmConfig, DeviceState, Variant};
use p2pl::report::to_csv_string;
use p2pl::topology::{build_graph, mixing_weights, GraphKind};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Mnist {
    train: Dataset,
    test: Dataset,
}

fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn run(cfg: &ResolvedConfig, m: &Mnist) -> Vec<MetricsRecord> {
    let setup = cfg.setup().expect("valid config");
    run_experiment(&setup, &m.train, &m.test).expect("run succeeds").records
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

fn value(records: &[MetricsRecord], round: usize, phase: Phase, device: usize, s: Stratum) -> f64 {
    records
        .iter()
        .find(|r| r.round == round && r.phase == phase && r.device == device)
        .and_then(|r| r.stratum(s))
        .unwrap_or_else(|| panic!("no {s:?} value for round {round} {phase} device {device}"))
}

fn mean_abs_amplitude(records: &[MetricsRecord], rounds: std::ops::RangeInclusive<usize>, s: Stratum) -> f64 {
    oscillation_stats(records, rounds)
        .get(0, s)
        .and_then(|x| x.window_mean_abs)
        .expect("amplitudes exist")
}

/// Analytic gradients against central differences on real images.
///
/// The backpropagation code is checked in its `f64` instantiation, where the
/// tolerance measures the derivation rather than `f32` rounding; the `f32`
/// training path is reported alongside. Coordinates whose stencil flips a
/// ReLU are redrawn, so every pair contributes 200 differentiable points.
fn criterion_1(m: &Mnist) -> Outcome {
    const COORDS: usize = 200;
    let h = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    let (mut checked, mut redrawn) = (0, 0);
    for pair in 0..20u64 {
        let params = nn::init_params(1000 + pair);
        let idx: Vec<usize> = (0..4).map(|_| rng.gen_range(0..m.train.len())).collect();
        let batch: Batch = m.train.gather(&idx);
        let sizes = params.sizes();
        let w: Vec<f64> = params.values().iter().map(|&v| v as f64).collect();
        let (_, g64) = nn::loss_and_grad_f64(&sizes, &w, &batch).unwrap();
        let g32 = nn::loss_and_grad(&params, &batch).unwrap().grad;
        let mut kept = 0;
        while kept < COORDS {
            let c = rng.gen_range(0..params.len());
            let e = gradcheck::central_differences(&sizes, &w, &batch, &[c], h)[0];
            if e.crosses_kink {
                redrawn += 1;
                continue;
            }
            worst64 = worst64.max(gradcheck::relative_error(g64[c], e.value));
            worst32 = worst32.max(gradcheck::relative_error(g32[c] as f64, e.value));
            kept += 1;
        }
        checked += kept;
    }
    outcome(
        worst64 < 1e-4,
        format!(
            "max relative error {worst64:.2e} ({worst32:.2e} in f32) over {checked} coordinates in 20 (params, batch) pairs, {redrawn} kink crossings redrawn"
        ),
    )
}

/// The affinity code path with every extra switched off replays DSGD bit for bit.
fn criterion_2(m: &Mnist) -> Outcome {
    let mut base = preset_config("fig2-iid-complete").unwrap();
    base.shards = p2pl::config::ShardsConfig::Iid {
        devices: 3,
        per_device: Some(40),
    };
    base.rounds = 5;
    base.algorithm = preset(Variant::Dsgd);
    let mut reduced = base.clone();
    reduced.algorithm = AlgorithmConfig {
        variant: Variant::P2plAffinity,
        local_steps: 1,
        consensus_steps: 1,
        momentum: 0.0,
        affinity_step: 0.0,
        consensus_bias_step: 0.0,
        ..preset(Variant::P2plAffinity)
    };
    let mut a = Simulation::new(&base.setup().unwrap(), &m.train, &m.test).unwrap();
    let mut b = Simulation::new(&reduced.setup().unwrap(), &m.train, &m.test).unwrap();
    let start = a.devices()[0].params.clone();
    let mut identical = true;
    let mut same_metrics = true;
    for _ in 0..5 {
        let (ra, rb) = (a.run_round(None).unwrap(), b.run_round(None).unwrap());
        same_metrics &= ra == rb;
        identical &= a
            .devices()
            .iter()
            .zip(b.devices())
            .all(|(x, y)| x.params.values() == y.params.values());
    }
    let moved = a.devices()[0].params != start;
    outcome(
        identical && same_metrics && moved,
        format!("parameters bit-identical after each of 5 rounds: {identical}; metrics identical: {same_metrics}"),
    )
}

/// Row sums, signs and sparsity of alpha on random instances; mean
/// preservation of one consensus step on complete graphs with equal sizes.
fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_row = 0.0f64;
    let mut structure_ok = true;
    for i in 0..100u64 {
        let k = rng.gen_range(2..30);
        let kind = match i % 4 {
            0 => GraphKind::Complete,
            1 => GraphKind::Ring,
            2 if k >= 4 && (2..=k).any(|r| r * r <= k && k % r == 0) => GraphKind::Grid,
            _ => GraphKind::ErdosRenyi {
                p: rng.gen_range(0.2..0.8),
            },
        };
        let g = build_graph(kind, k, i).unwrap();
        let n: Vec<usize> = (0..k).map(|_| rng.gen_range(1..2000)).collect();
        let alpha = mixing_weights(&g, &n).unwrap().alpha;
        for r in 0..k {
            worst_row = worst_row.max((alpha.row(r).sum() - 1.0).abs());
            for c in 0..k {
                let allowed = r == c || g.is_adjacent(r, c);
                let v = alpha[[r, c]];
                structure_ok &= v >= 0.0 && (v > 0.0) == allowed;
            }
        }
    }

    let mut worst_mean = 0.0f64;
    for trial in 0..10u64 {
        let k = 3 + trial as usize;
        let g = build_graph(GraphKind::Complete, k, trial).unwrap();
        let alpha = mixing_weights(&g, &vec![600; k]).unwrap();
        let cfg = preset(Variant::LocalDsgd);
        let mut devices: Vec<DeviceState> = (0..k)
            .map(|d| {
                let shard = Shard {
                    device: d,
                    indices: vec![d],
                    seen_classes: Default::default(),
                };
                let stream = BatchStream::new(shard, 1, 0).unwrap();
                let params = nn::init_params(100 * trial + d as u64);
                DeviceState::new(d, params, g.neighbors(d).to_vec(), stream, &cfg)
            })
            .collect();
        let mean = |devs: &[DeviceState]| -> Vec<f64> {
            let mut m = vec![0.0; devs[0].params.len()];
            for d in devs {
                for (a, &v) in m.iter_mut().zip(d.params.values()) {
                    *a += v as f64 / devs.len() as f64;
                }
            }
            m
        };
        let before = mean(&devices);
        protocol::consensus_step(&mut devices, &alpha, None, &cfg).unwrap();
        let after = mean(&devices);
        let norm = before.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff = before.iter().zip(&after).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        worst_mean = worst_mean.max(diff / norm);
    }
    outcome(
        worst_row <= 1e-12 && structure_ok && worst_mean <= 1e-6,
        format!(
            "max |row sum - 1| {worst_row:.1e}, signs and sparsity ok: {structure_ok}, mean drift {worst_mean:.1e} (relative)"
        ),
    )
}

struct ForgettingWindow {
    learn_min: f64,
    jump: f64,
    seen_abs: f64,
    unseen_abs: f64,
}

impl ForgettingWindow {
    fn of(recs: &[MetricsRecord]) -> Self {
        let learn_min = (1..=5)
            .map(|r| value(recs, r, Phase::PostLearning, 0, Stratum::Unseen))
            .fold(f64::INFINITY, f64::min);
        let stats = oscillation_stats(recs, 1..=5);
        let unseen = stats.get(0, Stratum::Unseen).unwrap();
        let seen = stats.get(0, Stratum::Seen).unwrap();
        Self {
            learn_min,
            jump: unseen.amplitudes.iter().map(|&(_, a)| a).fold(f64::NEG_INFINITY, f64::max),
            seen_abs: seen.window_mean_abs.unwrap(),
            unseen_abs: unseen.window_mean_abs.unwrap(),
        }
    }

    fn pass(&self) -> bool {
        self.learn_min < 0.05 && self.jump > 0.30 && self.seen_abs < self.unseen_abs
    }
}

/// Forgetting and recovery in the first five rounds of the non-IID pair.
/// The preset's seed decides the verdict; a sweep over other seeds is
/// reported so the seed dependence stays visible.
fn criterion_4(m: &Mnist) -> (Outcome, String) {
    let mut cfg = preset_config("fig3-noniid").unwrap();
    cfg.rounds = 5;
    cfg.workers = 1;
    let recs = run(&cfg, m);
    let w = ForgettingWindow::of(&recs);
    let sweep = (0..20u64)
        .filter(|&s| {
            let mut c = cfg.clone();
            c.seed = s;
            c.eval.devices = p2pl::config::EvalDevicesConfig(EvalDevices::List(vec![0]));
            c.eval.train_loss_samples = 0;
            ForgettingWindow::of(&run(&c, m)).pass()
        })
        .count();
    let detail = format!(
        "seed {}: min post-learning unseen {}, largest unseen jump {}, mean |amplitude| seen {} vs unseen {}; seeds 0-19 passing: {sweep}/20",
        cfg.seed,
        pct(w.learn_min),
        pct(w.jump),
        pct(w.seen_abs),
        pct(w.unseen_abs)
    );
    (outcome(w.pass(), detail), to_csv_string(&recs))
}

/// DSGD's unseen accuracy bounds local DSGD's at matched gradient steps.
fn criterion_5(m: &Mnist) -> Outcome {
    let rounds = 20;
    let mut worst = f64::NEG_INFINITY;
    let mut at = (0, 0, 0);
    let first = preset_config("fig3-noniid").unwrap().seed;
    for seed in first..first + 3 {
        let mut local = preset_config("fig3-noniid").unwrap();
        local.seed = seed;
        local.rounds = rounds;
        local.eval.train_loss_samples = 0;
        let mut dsgd = local.clone();
        dsgd.algorithm = AlgorithmConfig {
            local_steps: 1,
            ..preset(Variant::Dsgd)
        };
        dsgd.rounds = rounds * 10;
        dsgd.eval.every = 10;
        let (l, d) = (run(&local, m), run(&dsgd, m));
        for r in 4..=rounds {
            for dev in 0..2 {
                let excess = value(&l, r, Phase::PostConsensus, dev, Stratum::Unseen)
                    - value(&d, 10 * r, Phase::PostConsensus, dev, Stratum::Unseen);
                if excess > worst {
                    worst = excess;
                    at = (seed, r, dev);
                }
            }
        }
    }
    outcome(
        worst <= 0.02,
        format!(
            "largest excess of local DSGD over DSGD {} (seed {}, round {}, device {}); 3 seeds, rounds 4-{rounds}, both devices",
            pct(worst),
            at.0,
            at.1,
            at.2
        ),
    )
}

/// The affinity bias damps oscillations without costing unseen accuracy.
fn criterion_6(m: &Mnist) -> (Outcome, BTreeMap<(u64, &'static str), String>) {
    let mut lines = Vec::new();
    let mut pass = true;
    let mut csvs = BTreeMap::new();
    let first = preset_config("fig6-affinity").unwrap().seed;
    for seed in first..first + 3 {
        let mut aff = preset_config("fig6-affinity").unwrap();
        aff.seed = seed;
        aff.workers = 1;
        aff.eval.devices = p2pl::config::EvalDevicesConfig(EvalDevices::List(vec![0]));
        aff.eval.train_loss_samples = 0;
        let mut local = aff.clone();
        local.algorithm.variant = Variant::LocalDsgd;
        local.algorithm.affinity_step = 0.0;
        let (a, l) = (run(&aff, m), run(&local, m));
        let (amp_a, amp_l) = (
            mean_abs_amplitude(&a, 1..=20, Stratum::Unseen),
            mean_abs_amplitude(&l, 1..=20, Stratum::Unseen),
        );
        let (acc_a, acc_l) = (
            value(&a, 20, Phase::PostConsensus, 0, Stratum::Unseen),
            value(&l, 20, Phase::PostConsensus, 0, Stratum::Unseen),
        );
        pass &= amp_a < amp_l && acc_a >= acc_l - 0.01;
        lines.push(format!(
            "seed {seed}: |amp| {} vs {}, round-20 unseen {} vs {}",
            pct(amp_a),
            pct(amp_l),
            pct(acc_a),
            pct(acc_l)
        ));
        csvs.insert((seed, Variant::P2plAffinity.name()), to_csv_string(&a));
        csvs.insert((seed, Variant::LocalDsgd.name()), to_csv_string(&l));
    }
    (outcome(pass, format!("affinity vs local DSGD; {}", lines.join("; "))), csvs)
}

/// Halving T at a matched step budget does not hurt and oscillates less.
/// Accuracy and amplitude are both taken on the seen+unseen stratum.
fn criterion_7(m: &Mnist) -> Outcome {
    let t10 = preset_config("fig4-localsteps").unwrap();
    let t5 = preset_config("fig4-localsteps-t5").unwrap();
    assert_eq!(t10.rounds * t10.algorithm.local_steps, t5.rounds * t5.algorithm.local_steps);
    let (a, b) = (run(&t10, m), run(&t5, m));
    let final_acc = |recs: &[MetricsRecord], r| value(recs, r, Phase::PostConsensus, 0, Stratum::Overall);
    let (acc10, acc5) = (final_acc(&a, t10.rounds), final_acc(&b, t5.rounds));
    let amp = |s| {
        (
            mean_abs_amplitude(&b, 1..=t5.rounds, s),
            mean_abs_amplitude(&a, 1..=t10.rounds, s),
        )
    };
    let (o5, o10) = amp(Stratum::Overall);
    let (u5, u10) = amp(Stratum::Unseen);
    let (s5, s10) = amp(Stratum::Seen);
    outcome(
        acc5 >= acc10 - 0.003 && o5 < o10,
        format!(
            "final accuracy T=5 {} vs T=10 {}; mean |amplitude| {} vs {} (unseen {} vs {}, seen {} vs {})",
            pct(acc5),
            pct(acc10),
            pct(o5),
            pct(o10),
            pct(u5),
            pct(u10),
            pct(s5),
            pct(s10)
        ),
    )
}

/// Scaled IID convergence: ten devices of 600 samples on a complete graph.
fn criterion_8(m: &Mnist) -> Outcome {
    let mut cfg = preset_config("fig2-iid-complete").unwrap();
    cfg.shards = p2pl::config::ShardsConfig::Iid {
        devices: 10,
        per_device: Some(600),
    };
    cfg.rounds = 50;
    let recs = run(&cfg, m);
    let mean: Vec<f64> = summarize(&recs, Stratum::Overall)
        .into_iter()
        .filter(|s| s.phase == Phase::PostConsensus)
        .map(|s| s.mean)
        .collect();
    assert_eq!(mean.len(), 50);
    let reached = mean.iter().position(|&a| a >= 0.93).map(|i| i + 1);
    // smoothed[i] averages rounds i+1..=i+5
    let smoothed: Vec<f64> = mean.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    let first = 5; // windows ending after round 5
    let drops: Vec<(usize, f64)> = smoothed
        .windows(2)
        .enumerate()
        .skip(first)
        .filter(|(_, w)| w[1] < w[0])
        .map(|(i, w)| (i + 6, w[0] - w[1]))
        .collect();
    outcome(
        reached.is_some() && drops.is_empty(),
        format!(
            "mean accuracy reaches 93% at round {}, round 50 mean {}; 5-round average decreases {:?}",
            reached.map_or("never".to_string(), |r| r.to_string()),
            pct(*mean.last().unwrap()),
            drops
        ),
    )
}

/// Same seed, different pool sizes, identical CSV bytes.
fn criterion_9(m: &Mnist, fig3_csv: &str, fig6_csvs: &BTreeMap<(u64, &'static str), String>) -> Outcome {
    let mut cfg = preset_config("fig3-noniid").unwrap();
    cfg.rounds = 5;
    cfg.workers = 4;
    let same3 = to_csv_string(&run(&cfg, m)) == fig3_csv;
    let mut same6 = true;
    for variant in [Variant::P2plAffinity, Variant::LocalDsgd] {
        let mut c = preset_config("fig6-affinity").unwrap();
        c.workers = 4;
        c.eval.devices = p2pl::config::EvalDevicesConfig(EvalDevices::List(vec![0]));
        c.eval.train_loss_samples = 0;
        if variant == Variant::LocalDsgd {
            c.algorithm.variant = Variant::LocalDsgd;
            c.algorithm.affinity_step = 0.0;
        }
        same6 &= fig6_csvs.get(&(c.seed, variant.name())).map(String::as_str) == Some(to_csv_string(&run(&c, m)).as_str());
    }
    outcome(
        same3 && same6,
        format!("1 vs 4 workers byte-identical: criterion 4 run {same3}, criterion 6 runs {same6}"),
    )
}

fn main() -> ExitCode {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));

    let dir = data_dir();
    let (train, test) = match data::load_mnist_dir(&dir) {
        Ok(d) => d,
        Err(e) => {
            println!("acceptance: cannot load MNIST from {} ({e}); run `p2pl fetch-data --out {}`", dir.display(), dir.display());
            return ExitCode::FAILURE;
        }
    };
    let m = Mnist { train, test };

    let mut failures = 0;
    let mut report = |n: u32, started: Instant, o: Outcome| {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n}: {verdict} [{:.1}s] {}", started.elapsed().as_secs_f64(), o.detail);
        if !o.pass {
            failures += 1;
        }
    };

    let mut fig3_csv = None;
    let mut fig6_csvs = None;
    for n in 1..=9 {
        if !wanted(n) {
            continue;
        }
        let t = Instant::now();
        let o = match n {
            1 => criterion_1(&m),
            2 => criterion_2(&m),
            3 => criterion_3(),
            4 => {
                let (o, csv) = criterion_4(&m);
                fig3_csv = Some(csv);
                o
            }
            5 => criterion_5(&m),
            6 => {
                let (o, csvs) = criterion_6(&m);
                fig6_csvs = Some(csvs);
                o
            }
            7 => criterion_7(&m),
            8 => criterion_8(&m),
            _ => {
                let csv3 = fig3_csv.take().unwrap_or_else(|| criterion_4(&m).1);
                let csv6 = fig6_csvs.take().unwrap_or_else(|| criterion_6(&m).1);
                criterion_9(&m, &csv3, &csv6)
            }
        };
        report(n, t, o);
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criterion(s) failed");
        ExitCode::FAILURE
    }
}
