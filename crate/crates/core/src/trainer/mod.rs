//! Adversarial policy-gradient training.
//!
//! Each iteration replays the whole training episode on one tape: the
//! network is evaluated for every decision date at once, some dates are
//! replaced by random actions, the overlay path and reward are built from
//! the resulting exposures, and a single Adam step climbs the reward.
//!
//! Random draws, all from one ChaCha8 stream seeded with `seed`:
//! 1. one `u64` seeding parameter initialisation;
//! 2. per iteration, if adversarial noise is on: one normal per asset-input
//!    entry, then one per context-input entry (row-major);
//! 3. per iteration, if the exploration probability is below 1: for each
//!    decision date in order, one uniform; on exploration, `l` unit
//!    exponentials (a flat Dirichlet) and one uniform leverage.

mod adam;
mod episode;

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{bail, Error, Result};
use crate::features::ObservationBatch;
use crate::metrics::{reward_value, RewardKind};
use crate::policy::{init_params, is_context_param, l2_penalty, AllocationDecision, NetworkConfig, PolicyParams};
use crate::scalar::Scalar;
use crate::simulator::EpisodeConfig;

pub use adam::{adam_step, AdamState};
pub use episode::{build_episode, episode_returns, episode_returns_node, policy_decisions, Episode, Exploration};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Keep the parameters with the best training reward.
    #[default]
    BestTrain,
    /// Keep the parameters with the best reward on the evaluation window
    /// (looks at test data; for auditing only).
    BestTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub noise_std: f64,
    pub max_iterations: usize,
    pub patience: usize,
    /// Probability of taking the policy's action at the first iteration.
    pub exploration_p: f64,
    /// Raise the policy probability linearly to 1 over the iterations.
    pub anneal: bool,
    pub adversarial: bool,
    pub use_context: bool,
    pub reward: RewardKind,
    pub selection: Selection,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            learning_rate: 0.01,
            noise_std: 0.002,
            max_iterations: 500,
            patience: 50,
            exploration_p: 0.9,
            anneal: true,
            adversarial: true,
            use_context: true,
            reward: RewardKind::NetProfit,
            selection: Selection::BestTrain,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bail!(Config, "learning rate must be positive, got {}", self.learning_rate);
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            bail!(Config, "noise std must be non-negative, got {}", self.noise_std);
        }
        if self.max_iterations == 0 {
            bail!(Config, "max_iterations must be at least 1");
        }
        if self.patience > self.max_iterations {
            bail!(
                Config,
                "patience {} exceeds max_iterations {}",
                self.patience,
                self.max_iterations
            );
        }
        if !(self.exploration_p > 0.0 && self.exploration_p <= 1.0) {
            bail!(Config, "exploration_p must lie in (0, 1], got {}", self.exploration_p);
        }
        Ok(())
    }

    /// Policy-action probability at iteration `k`.
    pub fn policy_probability(&self, k: usize) -> f64 {
        if !self.anneal || self.max_iterations < 2 {
            return self.exploration_p;
        }
        let frac = k as f64 / (self.max_iterations - 1) as f64;
        (self.exploration_p + (1.0 - self.exploration_p) * frac).min(1.0)
    }
}

/// Zero-mean Gaussian perturbation of every observation entry.
pub fn inject_noise<T: Scalar, R: Rng + ?Sized>(obs: &ObservationBatch<T>, std: f64, rng: &mut R) -> ObservationBatch<T> {
    let mut out = obs.clone();
    if std > 0.0 {
        let normal = Normal::new(0.0, std).expect("finite std");
        for t in [&mut out.a1, &mut out.a2, &mut out.c] {
            perturb(t, &normal, rng);
        }
    }
    out
}

fn perturb<T: Scalar, R: Rng + ?Sized>(t: &mut Tensor<T>, normal: &Normal<f64>, rng: &mut R) {
    for v in t.data_mut() {
        *v += T::lit(normal.sample(rng));
    }
}

/// Transitions of the current episode: observation index, action taken,
/// next observation index.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    entries: Vec<(usize, AllocationDecision<f64>, usize)>,
}

impl ReplayBuffer {
    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn push(&mut self, obs: usize, action: AllocationDecision<f64>, next: usize) {
        self.entries.push((obs, action, next));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(usize, AllocationDecision<f64>, usize)> {
        self.entries.iter()
    }
}

/// Stops once more than `patience` iterations have passed since the best.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: None }
    }

    /// Records iteration `k`; returns true when training should stop.
    pub fn observe(&mut self, k: usize, reward: f64) -> bool {
        match self.best {
            Some((_, r)) if reward <= r => {}
            _ => self.best = Some((k, reward)),
        }
        let (best_k, _) = self.best.expect("set above");
        k - best_k > self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Counts words drawn from the wrapped generator.
#[derive(Debug, Clone)]
pub struct CountingRng<R> {
    inner: R,
    pub draws: u64,
}

impl<R: RngCore> CountingRng<R> {
    pub fn new(inner: R) -> Self {
        CountingRng { inner, draws: 0 }
    }
}

impl<R: RngCore> RngCore for CountingRng<R> {
    fn next_u32(&mut self) -> u32 {
        self.draws += 1;
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.draws += dst.len().div_ceil(8) as u64;
        self.inner.fill_bytes(dst)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub reward: f64,
    pub best_reward: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: PolicyParams<f64>,
    pub log: Vec<LogRow>,
    pub best_iteration: usize,
    pub best_reward: f64,
    /// Clean reward of the initial parameters.
    pub initial_reward: f64,
    pub stopped_early: bool,
    /// Random words drawn after parameter initialisation.
    pub draws_after_init: u64,
}

impl TrainResult {
    pub fn iterations(&self) -> usize {
        self.log.len()
    }
}

/// Draws the exploration plan for one iteration.
fn explore<R: Rng + ?Sized>(rng: &mut R, p: f64, rows: usize, l: usize, cap: f64) -> Option<Exploration> {
    if p >= 1.0 {
        return None;
    }
    let mut mask = Tensor::filled(&[rows, l], 1.0);
    let mut random = Tensor::zeros(&[rows, l]);
    let mut any = false;
    for i in 0..rows {
        let u: f64 = rng.random();
        if u < p {
            continue;
        }
        any = true;
        let g: Vec<f64> = (0..l).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = g.iter().sum();
        let lvg = rng.random_range(0.0..cap);
        for j in 0..l {
            mask.data_mut()[i * l + j] = 0.0;
            random.data_mut()[i * l + j] = lvg * g[j] / total;
        }
    }
    any.then_some(Exploration { mask, random })
}

/// Clean (noise-free, policy-only) reward of `params` on an episode.
pub fn evaluate(
    params: &PolicyParams<f64>,
    net: &NetworkConfig,
    ep: &Episode,
    kind: RewardKind,
    use_context: bool,
    ecfg: &EpisodeConfig,
) -> Result<f64> {
    let returns = episode_returns(params, net, ep, use_context, ecfg)?;
    clean_reward(kind, &returns)
}

fn clean_reward(kind: RewardKind, returns: &[f64]) -> Result<f64> {
    let r = reward_value(kind, returns)
        .or_else(|| reward_value(RewardKind::NetProfit, returns))
        .expect("net profit is always defined");
    if !r.is_finite() {
        bail!(Training, "non-finite {} reward on a clean replay", kind.name());
    }
    Ok(r)
}

/// Trains from freshly initialised parameters.
pub fn train(
    ep: &Episode,
    net: &NetworkConfig,
    tcfg: &TrainerConfig,
    ecfg: &EpisodeConfig,
    validation: Option<&Episode>,
) -> Result<TrainResult> {
    let mut rng = CountingRng::new(ChaCha8Rng::seed_from_u64(tcfg.seed));
    let mut params: PolicyParams<f64> = init_params(net, rng.next_u64())?;
    rng.draws = 0;
    train_from(&mut params, &mut rng, ep, net, tcfg, ecfg, validation)
}

/// The training loop proper, starting from `params`.
pub fn train_from<R: RngCore>(
    params: &mut PolicyParams<f64>,
    rng: &mut CountingRng<R>,
    ep: &Episode,
    net: &NetworkConfig,
    tcfg: &TrainerConfig,
    ecfg: &EpisodeConfig,
    validation: Option<&Episode>,
) -> Result<TrainResult> {
    tcfg.validate()?;
    ecfg.validate()?;
    params.check_against(net)?;
    if tcfg.selection == Selection::BestTest && validation.is_none() {
        bail!(Config, "selection = best_test needs an evaluation window");
    }
    if !tcfg.use_context {
        for (name, t) in params.iter_mut() {
            if is_context_param(name) {
                t.fill(0.0);
            }
        }
    }
    let mut adam = AdamState::new(params);
    let mut stopper = EarlyStopping::new(tcfg.patience);
    let mut buffer = ReplayBuffer::default();
    let mut log = Vec::new();
    let mut best_params = params.clone();
    let mut best_select = f64::NEG_INFINITY;
    let mut best_iteration = 0;
    let mut initial_reward = f64::NAN;
    let mut stopped_early = false;
    let noise = (tcfg.adversarial && tcfg.noise_std > 0.0).then(|| Normal::new(0.0, tcfg.noise_std).expect("finite std"));
    let (rows, l) = (ep.stack.count, net.strategies);

    for k in 0..tcfg.max_iterations {
        buffer.clear();
        let mut asset = ep.stack.asset.clone();
        let mut context = ep.stack.context.clone();
        if let Some(n) = &noise {
            perturb(&mut asset, n, rng);
            perturb(&mut context, n, rng);
        }
        if !tcfg.use_context {
            context.fill(0.0);
        }
        let plan = explore(rng, tcfg.policy_probability(k), rows, l, ecfg.leverage_cap);

        let mut tape = Tape::new();
        let nodes = params.register(&mut tape);
        let (port, heads) = episode_returns_node(&mut tape, &nodes, net, ep, asset, context, plan.as_ref(), ecfg)?;
        let reward = crate::metrics::reward_node(&mut tape, tcfg.reward, port)?;
        let penalty = l2_penalty(&mut tape, &nodes, net.arch.l2)?;
        let objective = tape.sub(reward.node, penalty)?;
        let episode_reward = tape.value(reward.node).item();
        if !episode_reward.is_finite() {
            bail!(
                Training,
                "iteration {k}: non-finite {} reward ({episode_reward}); parameters finite: {}",
                reward.kind.name(),
                params.is_finite()
            );
        }
        // Transitions actually taken on this replay.
        let w = tape.value(heads.weights).clone();
        let lv = tape.value(heads.leverage).clone();
        for i in 0..rows {
            let explored = plan.as_ref().is_some_and(|p| p.mask.at(i, 0) == 0.0);
            let action = match (explored, &plan) {
                (true, Some(p)) => {
                    let e = p.random.row(i);
                    let lvg: f64 = e.iter().sum();
                    AllocationDecision {
                        weights: e.iter().map(|x| if lvg > 0.0 { x / lvg } else { 1.0 / l as f64 }).collect(),
                        leverage: lvg,
                    }
                }
                _ => AllocationDecision {
                    weights: w.row(i).to_vec(),
                    leverage: lv.data()[i],
                },
            };
            buffer.push(i, action, i + 1);
        }

        // Reward of the current parameters without noise or exploration.
        let clean = if noise.is_none() && plan.is_none() {
            let r = tape.value(port).data();
            clean_reward(tcfg.reward, r)?
        } else {
            evaluate(params, net, ep, tcfg.reward, tcfg.use_context, ecfg)?
        };
        if k == 0 {
            initial_reward = clean;
        }
        let select = match (tcfg.selection, validation) {
            (Selection::BestTest, Some(v)) => evaluate(params, net, v, tcfg.reward, tcfg.use_context, ecfg)?,
            _ => clean,
        };
        if select > best_select {
            best_select = select;
            best_params = params.clone();
            best_iteration = k;
        }
        let stop = stopper.observe(k, clean);
        let best_reward = stopper.best().map_or(clean, |(_, r)| r);

        let grads = tape.backward(objective)?;
        let frozen = |name: &str| !tcfg.use_context && is_context_param(name);
        let grad_norm = grads
            .iter()
            .filter(|(n, _)| !frozen(n))
            .map(|(_, g)| g.sum_squares())
            .sum::<f64>()
            .sqrt();
        log.push(LogRow {
            iteration: k,
            reward: clean,
            best_reward,
            grad_norm,
        });
        if stop {
            stopped_early = true;
            break;
        }
        adam_step(params, &grads, &mut adam, tcfg.learning_rate, frozen)
            .map_err(|e| Error::Training(format!("iteration {k}: {e}")))?;
    }
    log::debug!(
        "trained {} iterations; best {} at iteration {best_iteration}",
        log.len(),
        best_select
    );
    let best_reward = log[best_iteration].reward;
    Ok(TrainResult {
        params: best_params,
        log,
        best_iteration,
        best_reward,
        initial_reward,
        stopped_early,
        draws_after_init: rng.draws,
    })
}

/// Writes `iteration,reward,best_reward,grad_norm`.
pub fn write_training_log(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    let file = path.as_ref();
    let mut w = csv::Writer::from_path(file).map_err(|e| Error::csv(file, e))?;
    w.write_record(["iteration", "reward", "best_reward", "grad_norm"])
        .map_err(|e| Error::csv(file, e))?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            format!("{}", r.reward),
            format!("{}", r.best_reward),
            format!("{}", r.grad_norm),
        ])
        .map_err(|e| Error::csv(file, e))?;
    }
    w.flush().map_err(|e| Error::io(file, e))
}
