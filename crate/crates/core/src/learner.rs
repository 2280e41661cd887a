//! State features and the feed-forward dispatch policy.
//!
//! The policy is a single hidden layer of rectified units followed by a
//! softmax over the `P + 1` actions. It is trained by plain mini-batch
//! gradient descent on cross-entropy against one-hot or frequency targets.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ppa::{Action, CostParams, SystemState};
use crate::rng::{Purpose, RngStream};

/// Bumped whenever the meaning or order of feature components changes.
pub const FEATURE_LAYOUT_VERSION: u32 = 1;
pub const HIDDEN_UNITS: usize = 64;
const TARGET_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite value in batch row {0}")]
    NonFinite(usize),
    #[error("row {0} has a target that is not a distribution")]
    InvalidTarget(usize),
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("model artifact: {0}")]
    Artifact(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub fn feature_len(physicians: usize) -> usize {
    2 + 6 * physicians
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Normalised view of `state`: the caller block (duration / T, priority - 1)
/// followed by six entries per physician (preferred, slots left / L_p,
/// priority-1 bookings / L_p, workload / T, eligible, feasible).
pub fn extract_features(state: &SystemState, params: &CostParams) -> Vec<f64> {
    let t = params.session_minutes;
    let mut x = Vec::with_capacity(feature_len(state.physicians.len()));
    x.push(ratio(state.patient.duration, t));
    x.push(state.patient.priority.index() as f64);
    for (p, ph) in state.physicians.iter().enumerate() {
        let l = params.capacities[p] as f64;
        x.push(f64::from(u8::from(ph.is_preferred)));
        x.push(ratio(ph.slots_left as f64, l));
        x.push(ratio(ph.priority1_count as f64, l));
        x.push(ratio(ph.workload, t));
        x.push(f64::from(u8::from(state.eligibility[p])));
        x.push(f64::from(u8::from(state.is_feasible(Action::assign(p), params))));
    }
    x
}

/// Weights of the policy network, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
    /// `hidden x inputs`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `outputs x hidden`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(physicians: usize, hidden: usize) -> PolicyParams {
        let inputs = feature_len(physicians);
        let outputs = physicians + 1;
        PolicyParams {
            inputs,
            hidden,
            outputs,
            w1: vec![0.0; hidden * inputs],
            b1: vec![0.0; hidden],
            w2: vec![0.0; outputs * hidden],
            b2: vec![0.0; outputs],
        }
    }

    /// Scaled uniform initialisation; biases start at zero.
    pub fn init(physicians: usize, hidden: usize, stream: RngStream) -> PolicyParams {
        let mut p = PolicyParams::zeros(physicians, hidden);
        let mut rng = stream.rng();
        let a1 = (6.0 / (p.inputs + p.hidden) as f64).sqrt();
        for w in &mut p.w1 {
            *w = rng.random_range(-a1..a1);
        }
        let a2 = (6.0 / (p.hidden + p.outputs) as f64).sqrt();
        for w in &mut p.w2 {
            *w = rng.random_range(-a2..a2);
        }
        p
    }

    pub fn physicians(&self) -> usize {
        self.outputs - 1
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn blocks(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn blocks_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// All parameters in `w1, b1, w2, b2` order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<(), LearnerError> {
        if values.len() != self.num_params() {
            return Err(LearnerError::Shape {
                expected: self.num_params(),
                got: values.len(),
            });
        }
        let mut rest = values;
        for block in self.blocks_mut() {
            let (head, tail) = rest.split_at(block.len());
            block.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    fn check_shapes(&self) -> Result<(), LearnerError> {
        let expect = [
            (self.w1.len(), self.hidden * self.inputs),
            (self.b1.len(), self.hidden),
            (self.w2.len(), self.outputs * self.hidden),
            (self.b2.len(), self.outputs),
        ];
        for (got, expected) in expect {
            if got != expected {
                return Err(LearnerError::Shape { expected, got });
            }
        }
        if self.outputs < 2 || self.inputs != feature_len(self.outputs - 1) {
            return Err(LearnerError::Shape {
                expected: feature_len(self.outputs.saturating_sub(1)),
                got: self.inputs,
            });
        }
        if self.blocks().iter().any(|b| b.iter().any(|v| !v.is_finite())) {
            return Err(LearnerError::Artifact("non-finite weight".into()));
        }
        Ok(())
    }

    fn l2_norm_sq(&self) -> f64 {
        self.w1.iter().chain(&self.w2).map(|w| w * w).sum()
    }

    /// Hidden activations and output logits for one input.
    fn activations(&self, x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
        for (h, (row, b)) in hidden.iter_mut().zip(self.w1.chunks_exact(self.inputs).zip(&self.b1)) {
            let z = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            *h = z.max(0.0);
        }
        for (o, (row, b)) in logits.iter_mut().zip(self.w2.chunks_exact(self.hidden).zip(&self.b2)) {
            *o = b + row.iter().zip(hidden.iter()).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

/// Replaces `z` by `log softmax(z)` and returns the softmax.
fn log_softmax(z: &mut [f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in z.iter_mut() {
        *v -= lse;
    }
    z.iter().map(|v| v.exp()).collect()
}

pub fn policy_forward(params: &PolicyParams, x: &[f64]) -> Result<Vec<f64>, LearnerError> {
    if x.len() != params.inputs {
        return Err(LearnerError::Shape {
            expected: params.inputs,
            got: x.len(),
        });
    }
    let mut hidden = vec![0.0; params.hidden];
    let mut logits = vec![0.0; params.outputs];
    params.activations(x, &mut hidden, &mut logits);
    let probs = log_softmax(&mut logits);
    let sum: f64 = probs.iter().sum();
    Ok(probs.into_iter().map(|p| p / sum).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    Greedy,
    Sample,
}

/// Picks an action among the feasible entries of `probs`. Greedy ties go to
/// the lowest index; rejection is always allowed.
pub fn select_action<R: Rng + ?Sized>(probs: &[f64], feasible: &[bool], mode: SelectMode, rng: &mut R) -> Action {
    let allowed = |a: usize| a == 0 || feasible.get(a).copied().unwrap_or(false);
    match mode {
        SelectMode::Greedy => {
            let mut best = 0;
            for a in 1..probs.len() {
                if allowed(a) && probs[a] > probs[best] {
                    best = a;
                }
            }
            Action(best)
        }
        SelectMode::Sample => {
            let total: f64 = (0..probs.len()).filter(|&a| allowed(a)).map(|a| probs[a]).sum();
            if !(total > 0.0) {
                return Action(0);
            }
            let mut u = rng.random::<f64>() * total;
            let mut last = 0;
            for a in (0..probs.len()).filter(|&a| allowed(a)) {
                last = a;
                if u < probs[a] {
                    return Action(a);
                }
                u -= probs[a];
            }
            Action(last)
        }
    }
}

/// One training example: features and a target distribution over actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub target: Vec<f64>,
}

impl Sample {
    pub fn validate(&self, inputs: usize, outputs: usize, row: usize) -> Result<(), LearnerError> {
        if self.features.len() != inputs {
            return Err(LearnerError::Shape {
                expected: inputs,
                got: self.features.len(),
            });
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(LearnerError::NonFinite(row));
        }
        let sum: f64 = self.target.iter().sum();
        if self.target.len() != outputs || self.target.iter().any(|&t| !(t >= 0.0)) || (sum - 1.0).abs() > TARGET_TOL {
            return Err(LearnerError::InvalidTarget(row));
        }
        Ok(())
    }
}

/// Mean cross-entropy over `batch` plus `l2 / 2 * |W|^2` (weights only), and
/// its exact gradient.
pub fn loss_and_grad(params: &PolicyParams, batch: &[Sample], l2: f64) -> Result<(f64, PolicyParams), LearnerError> {
    loss_and_grad_refs(params, batch.iter(), batch.len(), l2)
}

fn loss_and_grad_refs<'a>(
    params: &PolicyParams,
    batch: impl Iterator<Item = &'a Sample>,
    n: usize,
    l2: f64,
) -> Result<(f64, PolicyParams), LearnerError> {
    let (ni, nh, no) = (params.inputs, params.hidden, params.outputs);
    let mut grad = PolicyParams {
        inputs: ni,
        hidden: nh,
        outputs: no,
        w1: vec![0.0; nh * ni],
        b1: vec![0.0; nh],
        w2: vec![0.0; no * nh],
        b2: vec![0.0; no],
    };
    if n == 0 {
        return Err(LearnerError::EmptyDataset);
    }
    let mut hidden = vec![0.0; nh];
    let mut logits = vec![0.0; no];
    let mut dh = vec![0.0; nh];
    let mut loss = 0.0;
    for (row, s) in batch.enumerate() {
        s.validate(ni, no, row)?;
        params.activations(&s.features, &mut hidden, &mut logits);
        let probs = log_softmax(&mut logits);
        let mut row_loss = 0.0;
        for (t, lp) in s.target.iter().zip(&logits) {
            if *t > 0.0 {
                row_loss -= t * lp;
            }
        }
        if !row_loss.is_finite() {
            return Err(LearnerError::NonFinite(row));
        }
        loss += row_loss;
        dh.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..no {
            let d = probs[o] - s.target[o];
            grad.b2[o] += d;
            let w_row = &params.w2[o * nh..(o + 1) * nh];
            let g_row = &mut grad.w2[o * nh..(o + 1) * nh];
            for h in 0..nh {
                g_row[h] += d * hidden[h];
                dh[h] += d * w_row[h];
            }
        }
        for h in 0..nh {
            if hidden[h] <= 0.0 {
                continue;
            }
            grad.b1[h] += dh[h];
            let g_row = &mut grad.w1[h * ni..(h + 1) * ni];
            for (g, x) in g_row.iter_mut().zip(&s.features) {
                *g += dh[h] * x;
            }
        }
    }
    let scale = 1.0 / n as f64;
    for block in grad.blocks_mut() {
        block.iter_mut().for_each(|g| *g *= scale);
    }
    for (g, w) in grad.w1.iter_mut().zip(&params.w1) {
        *g += l2 * w;
    }
    for (g, w) in grad.w2.iter_mut().zip(&params.w2) {
        *g += l2 * w;
    }
    Ok((loss * scale + 0.5 * l2 * params.l2_norm_sq(), grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub l2: f64,
    /// Epochs used when continuing from an earlier policy.
    pub warm_start_epochs: usize,
    /// Continue from the previous iteration's policy instead of retraining.
    pub warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            epochs: 50,
            batch_size: 128,
            seed: 0,
            l2: 1e-4,
            warm_start_epochs: 10,
            warm_start: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(LearnerError::Config(
                "learning_rate must be a finite non-negative number".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(LearnerError::Config("batch_size must be at least 1".into()));
        }
        if !(self.l2 >= 0.0) {
            return Err(LearnerError::Config("l2 must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    /// Mean mini-batch loss of every epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Shuffled mini-batch gradient descent. Starts from `start` when given
/// (running `warm_start_epochs`), otherwise from a seeded initialisation.
pub fn train(
    data: &[Sample],
    physicians: usize,
    config: &TrainConfig,
    start: Option<&PolicyParams>,
) -> Result<TrainOutcome, LearnerError> {
    config.validate()?;
    if data.is_empty() {
        return Err(LearnerError::EmptyDataset);
    }
    let (mut params, epochs) = match start {
        Some(p) => {
            p.check_shapes()?;
            if p.physicians() != physicians {
                return Err(LearnerError::Shape {
                    expected: physicians + 1,
                    got: p.outputs,
                });
            }
            (p.clone(), config.warm_start_epochs)
        }
        None => (
            PolicyParams::init(physicians, HIDDEN_UNITS, RngStream::new(config.seed, Purpose::Init)),
            config.epochs,
        ),
    };
    for (row, s) in data.iter().enumerate() {
        s.validate(params.inputs, params.outputs, row)?;
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    // Warm continuations draw shuffles from a disjoint part of the stream.
    let lane = u64::from(start.is_some());
    for epoch in 0..epochs {
        let mut rng = RngStream::new(config.seed, Purpose::Shuffle)
            .epoch(epoch as u64)
            .call(lane)
            .rng();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (loss, grad) = loss_and_grad_refs(&params, chunk.iter().map(|&i| &data[i]), chunk.len(), config.l2)?;
            total += loss * chunk.len() as f64;
            for (block, g) in params.blocks_mut().into_iter().zip(grad.blocks()) {
                for (w, d) in block.iter_mut().zip(g) {
                    *w -= config.learning_rate * d;
                }
            }
        }
        let mean = total / data.len() as f64;
        log::debug!("train epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome { params, epoch_losses })
}

/// SHA-256 over the feature and target bits of every row, in order.
pub fn dataset_fingerprint(data: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in data {
        h.update((s.features.len() as u64).to_le_bytes());
        for v in s.features.iter().chain(&s.target) {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Serialized policy with enough context to refuse a mismatched load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArtifact {
    pub layout_version: u32,
    pub physicians: usize,
    pub feature_len: usize,
    pub params: PolicyParams,
    pub train_config: TrainConfig,
    pub dataset_fingerprint: String,
    pub dataset_size: usize,
}

impl ModelArtifact {
    pub fn new(params: PolicyParams, train_config: TrainConfig, data: &[Sample]) -> ModelArtifact {
        ModelArtifact {
            layout_version: FEATURE_LAYOUT_VERSION,
            physicians: params.physicians(),
            feature_len: params.inputs,
            params,
            train_config,
            dataset_fingerprint: dataset_fingerprint(data),
            dataset_size: data.len(),
        }
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        if self.layout_version != FEATURE_LAYOUT_VERSION {
            return Err(LearnerError::Artifact(format!(
                "feature layout version {} (expected {FEATURE_LAYOUT_VERSION})",
                self.layout_version
            )));
        }
        self.params.check_shapes()?;
        if self.physicians != self.params.physicians() || self.feature_len != feature_len(self.physicians) {
            return Err(LearnerError::Artifact("header does not match the weight shapes".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), LearnerError> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelArtifact, LearnerError> {
        let artifact: ModelArtifact = serde_json::from_slice(&std::fs::read(path)?)?;
        artifact.validate()?;
        Ok(artifact)
    }
}
