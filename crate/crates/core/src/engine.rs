//! Bulk-synchronous round scheduler with dual-phase stratified evaluation.
//!
//! Each round runs the learning phase on every device in parallel, evaluates
//! all devices (`post_learning`), runs the consensus phase, and evaluates
//! again (`post_consensus`). Devices never share mutable state inside a
//! phase, and every random stream is keyed by (seed, device, epoch), so the
//! metrics are identical for any worker count.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{self, BatchStream, DataError, Dataset, ShardSpec, NUM_CLASSES};
use crate::nn::{self, Batch, ModelParams, NnError};
use crate::protocol::{self, AlgorithmConfig, DeviceState, ProtocolError};
use crate::seed::{derive_seed, tag};
use crate::topology::{self, AffinityMatrix, Graph, GraphKind, MixingMatrix, TopologyError};

/// Rows per forward pass when scoring the test set.
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid evaluation options: {0}")]
    Eval(String),
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    /// Before any training, after max-norm synchronization.
    Init,
    PostLearning,
    PostConsensus,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::PostLearning => "post_learning",
            Phase::PostConsensus => "post_consensus",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Phase::Init, Phase::PostLearning, Phase::PostConsensus]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown phase `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stratum {
    Seen,
    Unseen,
    Overall,
}

impl Stratum {
    pub fn name(&self) -> &'static str {
        match self {
            Stratum::Seen => "seen",
            Stratum::Unseen => "unseen",
            Stratum::Overall => "overall",
        }
    }
}

impl FromStr for Stratum {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Stratum::Seen, Stratum::Unseen, Stratum::Overall]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown stratum `{s}`"))
    }
}

/// Per-class correct/total counts of one model on a test set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassScores {
    pub correct: [usize; NUM_CLASSES],
    pub total: [usize; NUM_CLASSES],
}

/// Accuracies split by the device's seen classes. `None` marks an empty
/// stratum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stratified {
    pub per_class: [Option<f64>; NUM_CLASSES],
    pub seen: Option<f64>,
    pub unseen: Option<f64>,
    pub overall: Option<f64>,
}

impl ClassScores {
    pub fn stratify(&self, seen: &BTreeSet<u8>) -> Stratified {
        let ratio = |c: usize, t: usize| (t > 0).then(|| c as f64 / t as f64);
        let pool = |pick: &dyn Fn(usize) -> bool| {
            let (c, t) = (0..NUM_CLASSES)
                .filter(|&k| pick(k))
                .fold((0, 0), |(c, t), k| (c + self.correct[k], t + self.total[k]));
            ratio(c, t)
        };
        Stratified {
            per_class: std::array::from_fn(|k| ratio(self.correct[k], self.total[k])),
            seen: pool(&|k| seen.contains(&(k as u8))),
            unseen: pool(&|k| !seen.contains(&(k as u8))),
            overall: pool(&|_| true),
        }
    }
}

/// Argmax classification of every test sample, tallied per class.
pub fn class_scores(params: &ModelParams, inputs: &Array2<f32>, labels: &[u8]) -> Result<ClassScores, NnError> {
    let mut scores = ClassScores::default();
    let mut start = 0;
    while start < labels.len() {
        let end = (start + EVAL_CHUNK).min(labels.len());
        let preds = nn::predict(params, nn::slice_rows(inputs, start, end))?;
        for (&p, &y) in preds.iter().zip(&labels[start..end]) {
            scores.total[y as usize] += 1;
            if p == y {
                scores.correct[y as usize] += 1;
            }
        }
        start = end;
    }
    Ok(scores)
}

/// Stratified test accuracy of `params`. The unseen stratum is every class
/// present in `test` but absent from `seen`.
pub fn evaluate_stratified(params: &ModelParams, test: &Dataset, seen: &BTreeSet<u8>) -> Result<Stratified, NnError> {
    let all: Vec<usize> = (0..test.len()).collect();
    let inputs = test.inputs(&all);
    Ok(class_scores(params, &inputs, test.labels())?.stratify(seen))
}

/// Largest pairwise L2 distance between parameter vectors.
pub fn consensus_gap(params: &[&[f32]]) -> f64 {
    let pairs: Vec<(usize, usize)> = (0..params.len())
        .flat_map(|a| (a + 1..params.len()).map(move |b| (a, b)))
        .collect();
    pairs
        .par_iter()
        .map(|&(a, b)| {
            params[a]
                .iter()
                .zip(params[b])
                .map(|(&x, &y)| {
                    let d = x as f64 - y as f64;
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .reduce(|| 0.0, f64::max)
}

/// One evaluation of one device at one point of the schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub round: usize,
    pub phase: Phase,
    pub device: usize,
    /// Local gradient steps taken by each device so far.
    pub cum_steps: u64,
    pub per_class_acc: [Option<f64>; NUM_CLASSES],
    pub seen_acc: Option<f64>,
    pub unseen_acc: Option<f64>,
    pub overall_acc: Option<f64>,
    /// Mean cross-entropy on the device's fixed training-loss subset.
    pub train_loss: Option<f64>,
    pub consensus_gap: f64,
}

impl MetricsRecord {
    pub fn stratum(&self, s: Stratum) -> Option<f64> {
        match s {
            Stratum::Seen => self.seen_acc,
            Stratum::Unseen => self.unseen_acc,
            Stratum::Overall => self.overall_acc,
        }
    }
}

/// Which devices are scored at each evaluation point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalDevices {
    All,
    List(Vec<usize>),
    /// A seeded random subset of this size, fixed for the whole run.
    Random(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalOptions {
    /// Evaluate rounds that are multiples of this (the last round always).
    pub every: usize,
    pub devices: EvalDevices,
    /// Training-loss subset size per device; 0 disables the column.
    pub train_loss_samples: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            every: 1,
            devices: EvalDevices::All,
            train_loss_samples: 1000,
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSetup {
    pub algorithm: AlgorithmConfig,
    pub shards: ShardSpec,
    pub graph: GraphKind,
    pub rounds: usize,
    pub seed: u64,
    /// Worker threads; 0 picks the rayon default.
    pub workers: usize,
    pub eval: EvalOptions,
}

pub struct Simulation<'a> {
    train: &'a Dataset,
    test_inputs: Array2<f32>,
    test_labels: Vec<u8>,
    seen: Vec<BTreeSet<u8>>,
    loss_batches: Vec<Option<Batch>>,
    devices: Vec<DeviceState>,
    graph: Graph,
    alpha: MixingMatrix,
    beta: AffinityMatrix,
    cfg: AlgorithmConfig,
    eval: EvalOptions,
    eval_devices: Vec<usize>,
    pool: rayon::ThreadPool,
    round: usize,
}

impl<'a> Simulation<'a> {
    /// Partitions the data, builds the graph and weights, initializes every
    /// device independently and applies max-norm synchronization if enabled.
    ///
    /// The test set is restricted to the task's classes, i.e. the union of
    /// classes present on any device.
    pub fn new(setup: &ExperimentSetup, train: &'a Dataset, test: &Dataset) -> Result<Self, EngineError> {
        let cfg = setup.algorithm.clone();
        cfg.validate()?;
        if setup.eval.every == 0 {
            return Err(EngineError::Eval("every must be >= 1".into()));
        }
        let shards = data::partition(train, &setup.shards)?;
        let k = shards.len();
        let graph = topology::build_graph(setup.graph, k, setup.seed)?;
        let sizes: Vec<usize> = shards.iter().map(|s| s.n_k()).collect();
        let alpha = topology::mixing_weights(&graph, &sizes)?;
        let beta = topology::affinity_weights(&graph, &sizes)?;

        let task: BTreeSet<u8> = shards.iter().flat_map(|s| s.seen_classes.iter().copied()).collect();
        let test = test.filter_classes(&task);
        let all: Vec<usize> = (0..test.len()).collect();
        let test_inputs = test.inputs(&all);
        let test_labels = test.labels().to_vec();

        let eval_devices = match &setup.eval.devices {
            EvalDevices::All => (0..k).collect(),
            EvalDevices::List(list) => {
                if let Some(bad) = list.iter().find(|&&d| d >= k) {
                    return Err(EngineError::Eval(format!("device {bad} does not exist ({k} devices)")));
                }
                let set: BTreeSet<usize> = list.iter().copied().collect();
                set.into_iter().collect()
            }
            EvalDevices::Random(count) => {
                if *count == 0 || *count > k {
                    return Err(EngineError::Eval(format!("cannot pick {count} of {k} devices")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[setup.seed, tag::EVAL]));
                let mut picked = sample(&mut rng, k, *count).into_vec();
                picked.sort_unstable();
                picked
            }
        };

        let seen: Vec<BTreeSet<u8>> = shards.iter().map(|s| s.seen_classes.clone()).collect();
        let loss_batches = shards
            .iter()
            .map(|s| {
                let m = setup.eval.train_loss_samples.min(s.n_k());
                (m > 0).then(|| train.gather(&s.indices[..m]))
            })
            .collect();

        let mut devices = Vec::with_capacity(k);
        for shard in shards {
            let id = shard.device;
            let params = nn::init_params(derive_seed(&[setup.seed, tag::INIT, id as u64]));
            let stream = BatchStream::new(shard, cfg.batch_size, setup.seed)?;
            devices.push(DeviceState::new(id, params, graph.neighbors(id).to_vec(), stream, &cfg));
        }
        if cfg.max_norm_sync {
            protocol::max_norm_sync(&mut devices);
        }

        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(setup.workers)
            .build()
            .map_err(|e| EngineError::Pool(e.to_string()))?;

        Ok(Self {
            train,
            test_inputs,
            test_labels,
            seen,
            loss_batches,
            devices,
            graph,
            alpha,
            beta,
            cfg,
            eval: setup.eval.clone(),
            eval_devices,
            pool,
            round: 0,
        })
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn mixing(&self) -> &MixingMatrix {
        &self.alpha
    }

    pub fn affinity(&self) -> &AffinityMatrix {
        &self.beta
    }

    pub fn config(&self) -> &AlgorithmConfig {
        &self.cfg
    }

    /// Rounds completed so far.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn seen_classes(&self, device: usize) -> &BTreeSet<u8> {
        &self.seen[device]
    }

    /// Number of test samples in the task-restricted test set.
    pub fn test_len(&self) -> usize {
        self.test_labels.len()
    }

    pub fn consensus_gap(&self) -> f64 {
        let params: Vec<&[f32]> = self.devices.iter().map(|d| d.params.values()).collect();
        self.pool.install(|| consensus_gap(&params))
    }

    /// Runs the learning phase of the next round.
    pub fn learning_phase(&mut self) -> Result<(), EngineError> {
        let train = self.train;
        let cfg = &self.cfg;
        let results: Vec<Result<(), ProtocolError>> = self.pool.install(|| {
            self.devices
                .par_iter_mut()
                .map(|dev| {
                    for _ in 0..cfg.local_steps {
                        let batch = dev.stream.next_batch(train);
                        protocol::local_step(dev, &batch, cfg)?;
                    }
                    Ok(())
                })
                .collect()
        });
        results.into_iter().collect::<Result<(), _>>()?;
        Ok(())
    }

    /// Runs the `S` consensus steps of the current round.
    pub fn consensus_phase(&mut self) -> Result<(), EngineError> {
        let (alpha, beta, cfg) = (&self.alpha, &self.beta, &self.cfg);
        let devices = &mut self.devices;
        self.pool.install(|| {
            for _ in 0..cfg.consensus_steps {
                protocol::consensus_step(devices, alpha, Some(beta), cfg)?;
            }
            Ok::<_, ProtocolError>(())
        })?;
        Ok(())
    }

    /// Scores the selected devices. Devices with bit-identical parameters
    /// share one forward pass over the test set.
    pub fn evaluate(&self, phase: Phase) -> Result<Vec<MetricsRecord>, EngineError> {
        let mut representative: Vec<usize> = Vec::new();
        let mut owner = Vec::with_capacity(self.eval_devices.len());
        for &d in &self.eval_devices {
            let values = self.devices[d].params.values();
            match representative
                .iter()
                .position(|&r| self.devices[r].params.values() == values)
            {
                Some(i) => owner.push(i),
                None => {
                    owner.push(representative.len());
                    representative.push(d);
                }
            }
        }
        let gap = self.consensus_gap();
        let (scores, losses) = self.pool.install(|| {
            let scores: Result<Vec<ClassScores>, NnError> = representative
                .par_iter()
                .map(|&d| class_scores(&self.devices[d].params, &self.test_inputs, &self.test_labels))
                .collect();
            let losses: Result<Vec<Option<f64>>, NnError> = self
                .eval_devices
                .par_iter()
                .map(|&d| {
                    self.loss_batches[d]
                        .as_ref()
                        .map(|b| nn::loss(&self.devices[d].params, b))
                        .transpose()
                })
                .collect();
            (scores, losses)
        });
        let (scores, losses) = (scores?, losses?);
        let cum_steps = self.round as u64 * self.cfg.local_steps as u64;
        Ok(self
            .eval_devices
            .iter()
            .zip(owner)
            .zip(losses)
            .map(|((&d, o), train_loss)| {
                let s = scores[o].stratify(&self.seen[d]);
                MetricsRecord {
                    round: self.round,
                    phase,
                    device: d,
                    cum_steps,
                    per_class_acc: s.per_class,
                    seen_acc: s.seen,
                    unseen_acc: s.unseen,
                    overall_acc: s.overall,
                    train_loss,
                    consensus_gap: gap,
                }
            })
            .collect())
    }

    fn should_evaluate(&self, last_round: Option<usize>) -> bool {
        self.round.is_multiple_of(self.eval.every) || Some(self.round) == last_round
    }

    /// One full round: learning, evaluation, consensus, evaluation. The two
    /// snapshots are empty when this round is skipped by `every`.
    /// `last_round`, when given, is always evaluated.
    pub fn run_round(&mut self, last_round: Option<usize>) -> Result<RoundOutput, EngineError> {
        let mut out = RoundOutput {
            post_learning: Vec::new(),
            post_consensus: Vec::new(),
        };
        self.round_streaming(last_round, &mut |rows| {
            for r in rows {
                match r.phase {
                    Phase::PostLearning => out.post_learning.push(r),
                    _ => out.post_consensus.push(r),
                }
            }
        })?;
        Ok(out)
    }

    fn round_streaming(
        &mut self,
        last_round: Option<usize>,
        emit: &mut dyn FnMut(Vec<MetricsRecord>),
    ) -> Result<(), EngineError> {
        self.round += 1;
        self.learning_phase()?;
        let eval = self.should_evaluate(last_round);
        if eval {
            emit(self.evaluate(Phase::PostLearning)?);
        }
        self.consensus_phase()?;
        if eval {
            emit(self.evaluate(Phase::PostConsensus)?);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutput {
    pub post_learning: Vec<MetricsRecord>,
    pub post_consensus: Vec<MetricsRecord>,
}

/// Metrics of a whole run plus the setup that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub setup: ExperimentSetup,
    pub records: Vec<MetricsRecord>,
}

impl MetricsTable {
    pub fn select(&self, device: usize, phase: Phase) -> impl Iterator<Item = &MetricsRecord> {
        self.records.iter().filter(move |r| r.device == device && r.phase == phase)
    }
}

/// A failed run together with every record produced before the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub error: EngineError,
    pub partial: Box<MetricsTable>,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} records)", self.error, self.partial.records.len())
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Runs `setup.rounds` rounds, streaming every record to `sink` as soon as it
/// exists, so a caller can persist partial results of a failing run.
pub fn run_experiment_with(
    setup: &ExperimentSetup,
    train: &Dataset,
    test: &Dataset,
    mut sink: impl FnMut(&MetricsRecord),
) -> Result<MetricsTable, RunFailure> {
    let mut records = Vec::new();
    let fail = |error: EngineError, records: Vec<MetricsRecord>| RunFailure {
        error,
        partial: Box::new(MetricsTable {
            setup: setup.clone(),
            records,
        }),
    };
    let mut sim = match Simulation::new(setup, train, test) {
        Ok(sim) => sim,
        Err(e) => return Err(fail(e, records)),
    };
    let mut emit = |batch: Vec<MetricsRecord>, records: &mut Vec<MetricsRecord>| {
        for r in batch {
            sink(&r);
            records.push(r);
        }
    };
    match sim.evaluate(Phase::Init) {
        Ok(rows) => emit(rows, &mut records),
        Err(e) => return Err(fail(e, records)),
    }
    for _ in 0..setup.rounds {
        if let Err(e) = sim.round_streaming(Some(setup.rounds), &mut |rows| emit(rows, &mut records)) {
            return Err(fail(e, records));
        }
    }
    Ok(MetricsTable {
        setup: setup.clone(),
        records,
    })
}

pub fn run_experiment(setup: &ExperimentSetup, train: &Dataset, test: &Dataset) -> Result<MetricsTable, RunFailure> {
    run_experiment_with(setup, train, test, |_| {})
}

/// Per-device, per-stratum oscillation amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct OscillationSeries {
    /// `(round, post_consensus - post_learning)` for every round where both
    /// phases were evaluated and the stratum is non-empty.
    pub amplitudes: Vec<(usize, f64)>,
    /// Mean signed amplitude over the window, if any round falls inside it.
    pub window_mean: Option<f64>,
    /// Mean absolute amplitude over the window.
    pub window_mean_abs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OscillationStats {
    pub window: RangeInclusive<usize>,
    pub series: BTreeMap<(usize, Stratum), OscillationSeries>,
}

impl OscillationStats {
    pub fn get(&self, device: usize, stratum: Stratum) -> Option<&OscillationSeries> {
        self.series.get(&(device, stratum))
    }
}

/// Amplitudes `acc_post_consensus(r) - acc_post_learning(r)` and their means
/// over the rounds in `window`.
pub fn oscillation_stats(records: &[MetricsRecord], window: RangeInclusive<usize>) -> OscillationStats {
    let mut learning: BTreeMap<(usize, usize), &MetricsRecord> = BTreeMap::new();
    let mut consensus: BTreeMap<(usize, usize), &MetricsRecord> = BTreeMap::new();
    for r in records {
        match r.phase {
            Phase::PostLearning => learning.insert((r.device, r.round), r),
            Phase::PostConsensus => consensus.insert((r.device, r.round), r),
            Phase::Init => None,
        };
    }
    let mut series: BTreeMap<(usize, Stratum), OscillationSeries> = BTreeMap::new();
    for (&(device, round), after) in &consensus {
        let Some(before) = learning.get(&(device, round)) else { continue };
        for stratum in [Stratum::Seen, Stratum::Unseen, Stratum::Overall] {
            let entry = series.entry((device, stratum)).or_insert_with(|| OscillationSeries {
                amplitudes: Vec::new(),
                window_mean: None,
                window_mean_abs: None,
            });
            if let (Some(a), Some(b)) = (after.stratum(stratum), before.stratum(stratum)) {
                entry.amplitudes.push((round, a - b));
            }
        }
    }
    for s in series.values_mut() {
        let inside: Vec<f64> = s
            .amplitudes
            .iter()
            .filter(|(r, _)| window.contains(r))
            .map(|&(_, a)| a)
            .collect();
        if !inside.is_empty() {
            let n = inside.len() as f64;
            s.window_mean = Some(inside.iter().sum::<f64>() / n);
            s.window_mean_abs = Some(inside.iter().map(|a| a.abs()).sum::<f64>() / n);
        }
    }
    OscillationStats { window, series }
}

/// Min, mean and max of one stratum over the evaluated devices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseSummary {
    pub round: usize,
    pub phase: Phase,
    pub cum_steps: u64,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

/// Aggregates over devices for every evaluated (round, phase), in schedule
/// order.
pub fn summarize(records: &[MetricsRecord], stratum: Stratum) -> Vec<PhaseSummary> {
    let mut groups: BTreeMap<(usize, Phase), (u64, Vec<f64>)> = BTreeMap::new();
    for r in records {
        if let Some(v) = r.stratum(stratum) {
            groups.entry((r.round, r.phase)).or_insert((r.cum_steps, Vec::new())).1.push(v);
        }
    }
    groups
        .into_iter()
        .map(|((round, phase), (cum_steps, vals))| PhaseSummary {
            round,
            phase,
            cum_steps,
            min: vals.iter().cloned().fold(f64::INFINITY, f64::min),
            mean: vals.iter().sum::<f64>() / vals.len() as f64,
            max: vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect()
}

/// First round at which the post-consensus overall accuracy reaches
/// `threshold`, measured on the device average and on the worst device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvergenceRounds {
    pub average: Option<usize>,
    pub minimum: Option<usize>,
}

pub fn convergence_rounds(records: &[MetricsRecord], threshold: f64) -> ConvergenceRounds {
    let summary: Vec<PhaseSummary> = summarize(records, Stratum::Overall)
        .into_iter()
        .filter(|s| s.phase == Phase::PostConsensus)
        .collect();
    ConvergenceRounds {
        average: summary.iter().find(|s| s.mean >= threshold).map(|s| s.round),
        minimum: summary.iter().find(|s| s.min >= threshold).map(|s| s.round),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PIXELS;

    #[test]
    fn stratify_counts() {
        let mut s = ClassScores::default();
        s.total[0] = 10;
        s.correct[0] = 10;
        s.total[3] = 5;
        s.total[7] = 5;
        s.correct[7] = 1;
        let st = s.stratify(&BTreeSet::from([0, 3]));
        assert_eq!(st.per_class[0], Some(1.0));
        assert_eq!(st.per_class[1], None);
        assert_eq!(st.seen, Some(10.0 / 15.0));
        assert_eq!(st.unseen, Some(0.2));
        assert_eq!(st.overall, Some(11.0 / 20.0));

        let every: BTreeSet<u8> = (0..10).collect();
        let st = s.stratify(&every);
        assert_eq!(st.unseen, None);
        assert_eq!(st.overall, st.seen);
    }

    #[test]
    fn constant_class_zero_predictor() {
        // a single bias on class 0 makes every prediction 0
        let mut p = ModelParams::zeros(&[PIXELS, 10]).unwrap();
        let n = p.len();
        p.values_mut()[n - 10] = 1.0;
        let labels: Vec<u8> = (0..50).map(|i| (i % 10) as u8).collect();
        let test = Dataset::new(vec![3; 50 * PIXELS], labels).unwrap();
        let st = evaluate_stratified(&p, &test, &BTreeSet::from([0])).unwrap();
        assert_eq!(st.per_class[0], Some(1.0));
        assert!(st.per_class[1..].iter().all(|&a| a == Some(0.0)));
    }

    #[test]
    fn gap_of_identical_and_distinct_vectors() {
        let a = [1.0f32, 2.0];
        let b = [1.0f32, 2.0];
        let c = [4.0f32, 6.0];
        assert_eq!(consensus_gap(&[&a, &b]), 0.0);
        assert_eq!(consensus_gap(&[&a, &b, &c]), 5.0);
        assert_eq!(consensus_gap(&[&a]), 0.0);
    }

    fn record(round: usize, phase: Phase, device: usize, acc: f64) -> MetricsRecord {
        MetricsRecord {
            round,
            phase,
            device,
            cum_steps: round as u64,
            per_class_acc: [None; NUM_CLASSES],
            seen_acc: Some(acc),
            unseen_acc: Some(1.0 - acc),
            overall_acc: Some(acc),
            train_loss: None,
            consensus_gap: 0.0,
        }
    }

    #[test]
    fn oscillation_amplitudes() {
        let recs = vec![
            record(0, Phase::Init, 0, 0.1),
            record(1, Phase::PostLearning, 0, 0.3),
            record(1, Phase::PostConsensus, 0, 0.8),
            record(2, Phase::PostLearning, 0, 0.5),
            record(2, Phase::PostConsensus, 0, 0.5),
        ];
        let st = oscillation_stats(&recs, 1..=2);
        let seen = st.get(0, Stratum::Seen).unwrap();
        assert_eq!(seen.amplitudes.len(), 2);
        assert!((seen.amplitudes[0].1 - 0.5).abs() < 1e-12);
        assert_eq!(seen.amplitudes[1].1, 0.0);
        assert!((seen.window_mean.unwrap() - 0.25).abs() < 1e-12);
        let unseen = st.get(0, Stratum::Unseen).unwrap();
        assert!((unseen.window_mean.unwrap() + 0.25).abs() < 1e-12);
        assert!((unseen.window_mean_abs.unwrap() - 0.25).abs() < 1e-12);

        let flat = vec![
            record(1, Phase::PostLearning, 0, 0.4),
            record(1, Phase::PostConsensus, 0, 0.4),
        ];
        assert_eq!(oscillation_stats(&flat, 1..=1).get(0, Stratum::Seen).unwrap().window_mean, Some(0.0));
    }

    #[test]
    fn summaries_and_convergence() {
        let recs = vec![
            record(1, Phase::PostConsensus, 0, 0.9),
            record(1, Phase::PostConsensus, 1, 0.98),
            record(2, Phase::PostConsensus, 0, 0.97),
            record(2, Phase::PostConsensus, 1, 0.99),
        ];
        let s = summarize(&recs, Stratum::Overall);
        assert_eq!(s.len(), 2);
        assert!((s[0].mean - 0.94).abs() < 1e-12);
        assert_eq!(s[0].min, 0.9);
        let c = convergence_rounds(&recs, 0.97);
        assert_eq!(c, ConvergenceRounds { average: Some(2), minimum: Some(2) });
        let c = convergence_rounds(&recs, 0.935);
        assert_eq!(c, ConvergenceRounds { average: Some(1), minimum: Some(2) });
    }
}
