//! Dual-input, dual-output policy network.
//!
//! Asset branch: row-wise conv over the stacked `[A1; A2]` plane, then a
//! dense layer. Context branch: the same over `C`. The two hidden vectors are
//! concatenated, passed through a merge layer, and feed a softmax weights
//! head and a `cap·sigmoid` leverage head.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{bail, Result};
use crate::features::{ObservationBatch, ObservationSpec, ObservationStack, DERIVED_CONTEXT_ROWS};
use crate::scalar::Scalar;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchConfig {
    pub filters: usize,
    pub kernel: usize,
    pub hidden: usize,
}

/// Architecture hyper-parameters; input sizes come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub asset: BranchConfig,
    pub context: BranchConfig,
    pub merge: usize,
    pub leverage_cap: f64,
    pub l2: f64,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            asset: BranchConfig {
                filters: 8,
                kernel: 3,
                hidden: 32,
            },
            context: BranchConfig {
                filters: 4,
                kernel: 3,
                hidden: 16,
            },
            merge: 32,
            leverage_cap: 3.0,
            l2: 1e-8,
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub arch: Architecture,
    /// Number of hedging strategies `l`.
    pub strategies: usize,
    pub lags: usize,
    /// Raw context features plus the derived rows.
    pub context_rows: usize,
    pub context_lags: usize,
}

impl NetworkConfig {
    pub fn new(arch: Architecture, strategies: usize, spec: &ObservationSpec, raw_context: usize) -> Result<Self> {
        let cfg = NetworkConfig {
            arch,
            strategies,
            lags: spec.lags.len(),
            context_rows: raw_context + DERIVED_CONTEXT_ROWS,
            context_lags: spec.context_lags.len(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        let widths = [
            ("asset.filters", a.asset.filters),
            ("asset.kernel", a.asset.kernel),
            ("asset.hidden", a.asset.hidden),
            ("context.filters", a.context.filters),
            ("context.kernel", a.context.kernel),
            ("context.hidden", a.context.hidden),
            ("merge", a.merge),
            ("strategies", self.strategies),
            ("context_rows", self.context_rows),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, w)| *w == 0) {
            bail!(Config, "network width `{name}` must be at least 1");
        }
        if a.asset.kernel > self.lags {
            bail!(Config, "asset kernel {} exceeds the {} lags", a.asset.kernel, self.lags);
        }
        if a.context.kernel > self.context_lags {
            bail!(
                Config,
                "context kernel {} exceeds the {} context lags",
                a.context.kernel,
                self.context_lags
            );
        }
        if !(a.leverage_cap > 0.0 && a.leverage_cap.is_finite()) {
            bail!(Config, "leverage cap must be positive, got {}", a.leverage_cap);
        }
        if !(a.l2 >= 0.0 && a.l2.is_finite()) {
            bail!(Config, "l2 coefficient must be non-negative, got {}", a.l2);
        }
        Ok(())
    }

    fn asset_features(&self) -> usize {
        self.arch.asset.filters * 2 * self.strategies * (self.lags - self.arch.asset.kernel + 1)
    }

    fn context_features(&self) -> usize {
        self.arch.context.filters * self.context_rows * (self.context_lags - self.arch.context.kernel + 1)
    }

    /// Parameter layout: name, shape, fan-in, and whether the layer is
    /// followed by the hidden activation.
    fn layout(&self) -> Vec<(&'static str, Vec<usize>, usize, bool)> {
        let a = &self.arch;
        let h = a.asset.hidden + a.context.hidden;
        vec![
            ("asset.conv.kernel", vec![a.asset.filters, 1, a.asset.kernel], a.asset.kernel, true),
            ("asset.conv.bias", vec![a.asset.filters], 0, true),
            ("asset.dense.weight", vec![self.asset_features(), a.asset.hidden], self.asset_features(), true),
            ("asset.dense.bias", vec![a.asset.hidden], 0, true),
            ("context.conv.kernel", vec![a.context.filters, 1, a.context.kernel], a.context.kernel, true),
            ("context.conv.bias", vec![a.context.filters], 0, true),
            ("context.dense.weight", vec![self.context_features(), a.context.hidden], self.context_features(), true),
            ("context.dense.bias", vec![a.context.hidden], 0, true),
            ("merge.dense.weight", vec![h, a.merge], h, true),
            ("merge.dense.bias", vec![a.merge], 0, true),
            ("weights.dense.weight", vec![a.merge, self.strategies], a.merge, false),
            ("weights.dense.bias", vec![self.strategies], 0, false),
            ("leverage.dense.weight", vec![a.merge, 1], a.merge, false),
            ("leverage.dense.bias", vec![1], 0, false),
        ]
    }
}

pub fn is_bias(name: &str) -> bool {
    name.ends_with(".bias")
}

pub fn is_context_param(name: &str) -> bool {
    name.starts_with("context.")
}

/// Named parameter arrays in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<T> {
    entries: Vec<(String, Tensor<T>)>,
    pub seed: u64,
}

impl<T: Scalar> PolicyParams<T> {
    pub fn from_entries(entries: Vec<(String, Tensor<T>)>, seed: u64) -> Result<Self> {
        for (i, (name, t)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(n, _)| n == name) {
                bail!(Contract, "duplicate parameter `{name}`");
            }
            if !t.is_finite() {
                bail!(Numeric, "parameter `{name}` holds non-finite values");
            }
        }
        Ok(PolicyParams { entries, seed })
    }

    pub fn zeros(config: &NetworkConfig) -> Self {
        let entries = config
            .layout()
            .into_iter()
            .map(|(n, shape, _, _)| (n.to_string(), Tensor::zeros(&shape)))
            .collect();
        PolicyParams { entries, seed: 0 }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Checks names and shapes against the layout implied by `config`.
    pub fn check_against(&self, config: &NetworkConfig) -> Result<()> {
        let layout = config.layout();
        if layout.len() != self.entries.len() {
            bail!(Shape, "expected {} parameter arrays, found {}", layout.len(), self.entries.len());
        }
        for ((name, shape, _, _), (n, t)) in layout.iter().zip(&self.entries) {
            if name != n || shape.as_slice() != t.shape() {
                bail!(
                    Shape,
                    "parameter `{n}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                );
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> PolicyParams<U> {
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| {
                let data = t.data().iter().map(|v| U::lit(v.as_f64())).collect();
                (n.clone(), Tensor::from_vec(t.shape(), data).expect("same shape"))
            })
            .collect();
        PolicyParams {
            entries,
            seed: self.seed,
        }
    }

    /// Registers every array as a tape parameter.
    pub fn register(&self, tape: &mut Tape<T>) -> ParamNodes {
        ParamNodes {
            ids: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), tape.param(n.clone(), t.clone())))
                .collect(),
        }
    }
}

/// Tape handles for a registered [`PolicyParams`].
#[derive(Debug, Clone)]
pub struct ParamNodes {
    ids: Vec<(String, NodeId)>,
}

impl ParamNodes {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, NodeId)>) -> Self {
        ParamNodes {
            ids: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        match self.ids.iter().find(|(n, _)| n == name) {
            Some((_, id)) => Ok(*id),
            None => bail!(Contract, "parameter `{name}` not registered"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(n, id)| (n.as_str(), *id))
    }
}

/// Weights drawn from N(0, gain/fan_in) — gain 2 before the hidden
/// activation, 1 for the heads — and zero biases.
pub fn init_params<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<PolicyParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (name, shape, fan_in, hidden) in config.layout() {
        let mut t = Tensor::zeros(&shape);
        if !is_bias(name) {
            let gain = if hidden && config.arch.activation == Activation::Relu {
                2.0
            } else {
                1.0
            };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
            for v in t.data_mut() {
                *v = T::lit(normal.sample(&mut rng));
            }
        }
        entries.push((name.to_string(), t));
    }
    PolicyParams::from_entries(entries, seed)
}

/// Weights `[batch × l]` and leverage `[batch × 1]` nodes.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub weights: NodeId,
    pub leverage: NodeId,
}

fn activate<T: Scalar>(tape: &mut Tape<T>, x: NodeId, act: Activation) -> Result<NodeId> {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Identity => Ok(x),
    }
}

fn branch<T: Scalar>(
    tape: &mut Tape<T>,
    nodes: &ParamNodes,
    prefix: &str,
    input: NodeId,
    batch: usize,
    act: Activation,
) -> Result<NodeId> {
    let k = nodes.get(&format!("{prefix}.conv.kernel"))?;
    let b = nodes.get(&format!("{prefix}.conv.bias"))?;
    let conv = tape.conv_rowwise(input, k, b)?;
    let conv = activate(tape, conv, act)?;
    let flat = tape.flatten_samples(conv, batch)?;
    let w = nodes.get(&format!("{prefix}.dense.weight"))?;
    let b = nodes.get(&format!("{prefix}.dense.bias"))?;
    let hidden = tape.dense(flat, w, b)?;
    activate(tape, hidden, act)
}

/// Builds the network on `tape` for `batch` stacked samples.
///
/// `asset` is `[batch·2l × lags]` and `context` `[batch·rows × context lags]`.
pub fn forward_nodes<T: Scalar>(
    tape: &mut Tape<T>,
    nodes: &ParamNodes,
    config: &NetworkConfig,
    asset: NodeId,
    context: NodeId,
    batch: usize,
) -> Result<HeadNodes> {
    let (sa, sc) = (tape.value(asset).shape().to_vec(), tape.value(context).shape().to_vec());
    if sa != [batch * 2 * config.strategies, config.lags] {
        bail!(
            Shape,
            "asset input {sa:?} does not match {batch} samples of {} strategies × {} lags",
            config.strategies,
            config.lags
        );
    }
    if sc != [batch * config.context_rows, config.context_lags] {
        bail!(
            Shape,
            "context input {sc:?} does not match {batch} samples of {} rows × {} lags",
            config.context_rows,
            config.context_lags
        );
    }
    let act = config.arch.activation;
    let ha = branch(tape, nodes, "asset", asset, batch, act)?;
    let hc = branch(tape, nodes, "context", context, batch, act)?;
    let joined = tape.concat_cols(ha, hc)?;
    let merged = tape.dense(joined, nodes.get("merge.dense.weight")?, nodes.get("merge.dense.bias")?)?;
    let merged = activate(tape, merged, act)?;
    let logits = tape.dense(merged, nodes.get("weights.dense.weight")?, nodes.get("weights.dense.bias")?)?;
    let weights = tape.softmax(logits)?;
    let raw = tape.dense(merged, nodes.get("leverage.dense.weight")?, nodes.get("leverage.dense.bias")?)?;
    let leverage = tape.scaled_sigmoid(raw, T::lit(config.arch.leverage_cap))?;
    Ok(HeadNodes { weights, leverage })
}

/// `coeff · Σ w²` over weight arrays; biases are excluded.
pub fn l2_penalty<T: Scalar>(tape: &mut Tape<T>, nodes: &ParamNodes, coeff: T) -> Result<NodeId> {
    if coeff < T::zero() {
        bail!(Config, "l2 coefficient must be non-negative");
    }
    let mut total = tape.constant(Tensor::scalar(T::zero()));
    for (name, id) in nodes.iter() {
        if is_bias(name) {
            continue;
        }
        let sq = tape.mul(id, id)?;
        let s = tape.sum(sq)?;
        total = tape.add(total, s)?;
    }
    tape.scale(total, coeff)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationDecision<T> {
    pub weights: Vec<T>,
    pub leverage: T,
}

impl<T: Scalar> AllocationDecision<T> {
    /// Zero-leverage decision (pure risky asset), uniform weights.
    pub fn flat(strategies: usize) -> Self {
        AllocationDecision {
            weights: vec![T::one() / T::lit(strategies as f64); strategies],
            leverage: T::zero(),
        }
    }

    /// Checks the simplex and `0 ≤ leverage ≤ cap`.
    pub fn validate(&self, cap: T) -> Result<()> {
        let sum: T = self.weights.iter().copied().sum();
        if self.weights.iter().any(|w| !(*w >= T::zero())) || (sum - T::one()).abs() > T::lit(1e-10) {
            bail!(Contract, "weights are not a probability vector: {:?}", self.weights);
        }
        if !(self.leverage >= T::zero() && self.leverage <= cap) {
            bail!(Contract, "leverage {} outside [0, {cap}]", self.leverage);
        }
        Ok(())
    }

    /// Per-strategy exposures `lvg · w`.
    pub fn exposures(&self) -> Vec<T> {
        self.weights.iter().map(|&w| w * self.leverage).collect()
    }
}

fn decisions_from<T: Scalar>(tape: &Tape<T>, heads: HeadNodes) -> Vec<AllocationDecision<T>> {
    let w = tape.value(heads.weights);
    let lvg = tape.value(heads.leverage);
    (0..w.rows())
        .map(|i| AllocationDecision {
            weights: w.row(i).to_vec(),
            leverage: lvg.data()[i],
        })
        .collect()
}

/// Decisions for every sample of a stack, in one batched pass.
pub fn forward_stack<T: Scalar>(
    params: &PolicyParams<T>,
    config: &NetworkConfig,
    stack: &ObservationStack<T>,
) -> Result<Vec<AllocationDecision<T>>> {
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape);
    let a = tape.constant(stack.asset.clone());
    let c = tape.constant(stack.context.clone());
    let heads = forward_nodes(&mut tape, &nodes, config, a, c, stack.count)?;
    Ok(decisions_from(&tape, heads))
}

pub fn forward<T: Scalar>(
    params: &PolicyParams<T>,
    config: &NetworkConfig,
    obs: &ObservationBatch<T>,
) -> Result<AllocationDecision<T>> {
    let stack = ObservationStack::from_batches(std::slice::from_ref(obs))?;
    Ok(forward_stack(params, config, &stack)?.remove(0))
}
