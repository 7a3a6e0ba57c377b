//! Per-device update rules.
//!
//! A round consists of a learning phase of `T` local steps followed by a
//! consensus phase of `S` mixing steps. In the learning phase device `k`
//! applies
//!
//! ```text
//! v <- mu * v + grad F_k(w)
//! w <- w - lr * v + eta_d * d
//! ```
//!
//! where the affinity bias `d` stays frozen for the whole phase. In the
//! consensus phase every device reads a snapshot of its neighbours' parameters
//! and applies
//!
//! ```text
//! w <- (1 - eps) * w + eps * sum_j alpha_kj w_j + eta_b * b
//! ```
//!
//! with the consensus bias `b` frozen. `d` is refreshed from the same snapshot
//! at every consensus step, `b` after every local step. DSGD, local DSGD and
//! P2PL are the special cases with `eta_d = eta_b = 0`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::BatchStream;
use crate::nn::{loss_and_grad, Batch, ModelParams, NnError};
use crate::topology::{AffinityMatrix, MixingMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("invalid algorithm config: {0}")]
    InvalidConfig(String),
    #[error("unknown algorithm variant `{0}` (expected dsgd, local_dsgd, p2pl or p2pl_affinity)")]
    UnknownVariant(String),
    #[error("device {device} produced a non-finite gradient at local step {step} (loss {loss})")]
    NonFiniteGradient { device: usize, step: u64, loss: f64 },
    #[error("mixing weight alpha[{row}][{col}] is nonzero but {col} is not a neighbour of {row}")]
    MixingSparsity { row: usize, col: usize },
    #[error("mixing matrix is {found}x{found} for {expected} devices")]
    MixingShape { expected: usize, found: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dsgd,
    LocalDsgd,
    P2pl,
    P2plAffinity,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Dsgd, Variant::LocalDsgd, Variant::P2pl, Variant::P2plAffinity];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Dsgd => "dsgd",
            Variant::LocalDsgd => "local_dsgd",
            Variant::P2pl => "p2pl",
            Variant::P2plAffinity => "p2pl_affinity",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ProtocolError::UnknownVariant(s.to_string()))
    }
}

/// Hyperparameters of one algorithm instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub variant: Variant,
    /// Learning rate.
    pub lr: f64,
    /// Polyak momentum coefficient (PyTorch convention, no dampening).
    pub momentum: f64,
    /// Step size of the affinity bias `d` in the learning phase.
    pub affinity_step: f64,
    /// Step size of the consensus bias `b` in the consensus phase.
    pub consensus_bias_step: f64,
    /// Local gradient steps per round (`T`).
    pub local_steps: usize,
    /// Consensus steps per round (`S`).
    pub consensus_steps: usize,
    pub batch_size: usize,
    /// Consensus step size; 1 means plain mixing.
    pub epsilon: f64,
    pub max_norm_sync: bool,
}

/// Default hyperparameters for `variant`.
///
/// `lr = 0.01` and `B = 10` everywhere. P2PL uses `mu = 0.5` and `T = 60`
/// (one epoch of a 600-sample shard). The other variants default to the
/// two-device settings: `mu = 0` and `T = 10`, except DSGD which is pinned to
/// `T = 1`. P2PL with Affinity uses `eta_d = 0.5` and no consensus bias. All
/// presets start from max-norm synchronized parameters.
///
/// Why not `eta_d = 1`: `d` is read from the pre-mixing snapshot, so on a
/// two-device complete graph the displacement `D = w_B - w_A` at the end of a
/// learning phase follows `D' = -2 eta_d D + (gradient drift)`. With
/// `eta_d = 1` that map doubles `D` every round and the pair diverges into an
/// alternating swap; `1/2` is the largest step that does not expand it.
pub fn preset(variant: Variant) -> AlgorithmConfig {
    let base = AlgorithmConfig {
        variant,
        lr: 0.01,
        momentum: 0.0,
        affinity_step: 0.0,
        consensus_bias_step: 0.0,
        local_steps: 10,
        consensus_steps: 1,
        batch_size: 10,
        epsilon: 1.0,
        max_norm_sync: true,
    };
    match variant {
        Variant::Dsgd => AlgorithmConfig { local_steps: 1, ..base },
        Variant::LocalDsgd => base,
        Variant::P2pl => AlgorithmConfig {
            momentum: 0.5,
            local_steps: 60,
            ..base
        },
        Variant::P2plAffinity => AlgorithmConfig {
            affinity_step: 0.5,
            ..base
        },
    }
}

impl AlgorithmConfig {
    /// Checks ranges and the constraints each variant imposes.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |msg: String| Err(ProtocolError::InvalidConfig(msg));
        let v = self.variant;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be a finite value >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.affinity_step >= 0.0 && self.affinity_step.is_finite()) {
            return bad(format!("affinity_step must be >= 0, got {}", self.affinity_step));
        }
        if !(self.consensus_bias_step >= 0.0 && self.consensus_bias_step.is_finite()) {
            return bad(format!("consensus_bias_step must be >= 0, got {}", self.consensus_bias_step));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return bad(format!("epsilon must lie in (0, 1], got {}", self.epsilon));
        }
        if self.local_steps == 0 {
            return bad("local_steps must be >= 1".into());
        }
        if self.consensus_steps == 0 {
            return bad("consensus_steps must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if v == Variant::Dsgd && self.local_steps != 1 {
            return bad(format!("variant {v} requires local_steps = 1, got {}", self.local_steps));
        }
        if matches!(v, Variant::Dsgd | Variant::LocalDsgd) && self.consensus_steps != 1 {
            return bad(format!("variant {v} requires consensus_steps = 1, got {}", self.consensus_steps));
        }
        if v != Variant::P2plAffinity {
            if self.affinity_step != 0.0 {
                return bad(format!("variant {v} requires affinity_step = 0, got {}", self.affinity_step));
            }
            if self.consensus_bias_step != 0.0 {
                return bad(format!(
                    "variant {v} requires consensus_bias_step = 0, got {}",
                    self.consensus_bias_step
                ));
            }
        }
        if v == Variant::P2pl && !self.max_norm_sync {
            return bad("variant p2pl requires max_norm_sync = true".into());
        }
        Ok(())
    }

    pub fn uses_affinity(&self) -> bool {
        self.variant == Variant::P2plAffinity
    }
}

/// One peer.
#[derive(Debug, Clone)]
pub struct DeviceState {
    pub id: usize,
    pub params: ModelParams,
    pub momentum: Vec<f32>,
    /// Affinity bias `d`, frozen during local learning.
    pub affinity_bias: Vec<f32>,
    /// Consensus bias `b`, frozen during consensus.
    pub consensus_bias: Vec<f32>,
    pub neighbors: Vec<usize>,
    pub stream: BatchStream,
    /// Local gradient steps taken so far.
    pub steps: u64,
}

impl DeviceState {
    /// Fresh device. `b` starts at the initial parameters when the consensus
    /// bias is enabled and at zero otherwise.
    pub fn new(id: usize, params: ModelParams, neighbors: Vec<usize>, stream: BatchStream, cfg: &AlgorithmConfig) -> Self {
        let p = params.len();
        let consensus_bias = if cfg.consensus_bias_step != 0.0 {
            params.values().to_vec()
        } else {
            vec![0.0; p]
        };
        Self {
            id,
            params,
            momentum: vec![0.0; p],
            affinity_bias: vec![0.0; p],
            consensus_bias,
            neighbors,
            stream,
            steps: 0,
        }
    }
}

/// All devices adopt the parameters of the device with the largest max-norm;
/// the lowest id wins ties.
pub fn max_norm_sync(devices: &mut [DeviceState]) {
    let Some(leader) = devices
        .iter()
        .enumerate()
        .fold(None::<(usize, f32)>, |best, (i, d)| {
            let norm = d.params.max_abs();
            match best {
                Some((_, b)) if b >= norm => best,
                _ => Some((i, norm)),
            }
        })
        .map(|(i, _)| i)
    else {
        return;
    };
    let values = devices[leader].params.values().to_vec();
    for d in devices.iter_mut() {
        d.params.values_mut().copy_from_slice(&values);
        if d.consensus_bias.iter().any(|&x| x != 0.0) {
            d.consensus_bias.copy_from_slice(&values);
        }
    }
}

/// One local learning step on `batch`. Returns the batch loss.
pub fn local_step(dev: &mut DeviceState, batch: &Batch, cfg: &AlgorithmConfig) -> Result<f64, ProtocolError> {
    let lg = loss_and_grad(&dev.params, batch)?;
    if !lg.loss.is_finite() || lg.grad.iter().any(|g| !g.is_finite()) {
        return Err(ProtocolError::NonFiniteGradient {
            device: dev.id,
            step: dev.steps,
            loss: lg.loss,
        });
    }
    let lr = cfg.lr as f32;
    let mu = cfg.momentum as f32;
    let w = dev.params.values_mut();
    for ((wi, vi), gi) in w.iter_mut().zip(dev.momentum.iter_mut()).zip(&lg.grad) {
        *vi = mu * *vi + gi;
        *wi -= lr * *vi;
    }
    if cfg.affinity_step != 0.0 {
        let eta_d = cfg.affinity_step as f32;
        for (wi, di) in w.iter_mut().zip(&dev.affinity_bias) {
            *wi += eta_d * di;
        }
    }
    dev.steps += 1;
    if cfg.consensus_bias_step != 0.0 {
        update_consensus_bias(dev, cfg.consensus_steps);
    }
    Ok(lg.loss)
}

/// `b <- w / S`.
pub fn update_consensus_bias(dev: &mut DeviceState, consensus_steps: usize) {
    let inv = 1.0 / consensus_steps as f32;
    for (b, &w) in dev.consensus_bias.iter_mut().zip(dev.params.values()) {
        *b = w * inv;
    }
}

/// `d_k = (1/T) sum_j beta_kj (w_j - w_k)`, evaluated on a parameter snapshot.
pub fn affinity_bias(k: usize, snapshot: &[&[f32]], beta: &AffinityMatrix, local_steps: usize) -> Vec<f32> {
    let own = snapshot[k];
    let mut acc = vec![0.0f64; own.len()];
    for (j, other) in snapshot.iter().enumerate() {
        let weight = beta.beta[[k, j]];
        if j == k || weight == 0.0 {
            continue;
        }
        for ((a, &wj), &wk) in acc.iter_mut().zip(other.iter()).zip(own) {
            *a += weight * (wj as f64 - wk as f64);
        }
    }
    let inv_t = 1.0 / local_steps as f64;
    acc.into_iter().map(|a| (a * inv_t) as f32).collect()
}

/// `sum_j alpha_kj w_j` over `k` and its neighbours, accumulated in `f64` in
/// increasing `j` order.
fn mix_row(k: usize, snapshot: &[&[f32]], alpha: &MixingMatrix) -> Vec<f32> {
    let mut acc = vec![0.0f64; snapshot[k].len()];
    for (j, other) in snapshot.iter().enumerate() {
        let weight = alpha.alpha[[k, j]];
        if weight == 0.0 {
            continue;
        }
        for (a, &wj) in acc.iter_mut().zip(other.iter()) {
            *a += weight * wj as f64;
        }
    }
    acc.into_iter().map(|a| a as f32).collect()
}

fn check_mixing(devices: &[DeviceState], alpha: &MixingMatrix) -> Result<(), ProtocolError> {
    let k = devices.len();
    if alpha.alpha.dim() != (k, k) {
        return Err(ProtocolError::MixingShape {
            expected: k,
            found: alpha.alpha.nrows(),
        });
    }
    for (row, dev) in devices.iter().enumerate() {
        for col in 0..k {
            if col != row && alpha.alpha[[row, col]] != 0.0 && !dev.neighbors.contains(&col) {
                return Err(ProtocolError::MixingSparsity { row, col });
            }
        }
    }
    Ok(())
}

/// One synchronous consensus step over all devices.
///
/// Every device reads the same pre-step snapshot, so the result does not
/// depend on the order devices are visited in. With `beta` given and the
/// affinity variant selected, each device's `d` is replaced from that same
/// snapshot.
pub fn consensus_step(
    devices: &mut [DeviceState],
    alpha: &MixingMatrix,
    beta: Option<&AffinityMatrix>,
    cfg: &AlgorithmConfig,
) -> Result<(), ProtocolError> {
    check_mixing(devices, alpha)?;
    let snapshot: Vec<&[f32]> = devices.iter().map(|d| d.params.values()).collect();
    let eps = cfg.epsilon as f32;
    let eta_b = cfg.consensus_bias_step as f32;
    let beta = beta.filter(|_| cfg.uses_affinity());

    let updates: Vec<(Vec<f32>, Option<Vec<f32>>)> = (0..devices.len())
        .into_par_iter()
        .map(|k| {
            let mut w = mix_row(k, &snapshot, alpha);
            if eps != 1.0 {
                for (m, &own) in w.iter_mut().zip(snapshot[k]) {
                    *m = (1.0 - eps) * own + eps * *m;
                }
            }
            if eta_b != 0.0 {
                for (m, &b) in w.iter_mut().zip(&devices[k].consensus_bias) {
                    *m += eta_b * b;
                }
            }
            let d = beta.map(|beta| affinity_bias(k, &snapshot, beta, cfg.local_steps));
            (w, d)
        })
        .collect();

    for (dev, (w, d)) in devices.iter_mut().zip(updates) {
        dev.params.values_mut().copy_from_slice(&w);
        if let Some(d) = d {
            dev.affinity_bias = d;
        }
    }
    Ok(())
}
