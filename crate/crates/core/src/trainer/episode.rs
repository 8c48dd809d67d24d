use chrono::NaiveDate;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{bail, Result};
use crate::features::{observation_stack, ContextScaler, MarketData, ObservationSpec, ObservationStack};
use crate::policy::{forward_nodes, forward_stack, HeadNodes, NetworkConfig, ParamNodes, PolicyParams};
use crate::simulator::{DatedDecision, EpisodeConfig};

/// A training episode: one decision per date `first..=last`, each earning
/// the return `delay` days later.
#[derive(Debug, Clone)]
pub struct Episode {
    pub decision_dates: Vec<NaiveDate>,
    pub first_decision: usize,
    pub stack: ObservationStack<f64>,
    /// Risky returns on the earning days, `[B]`.
    pub risky: Tensor<f64>,
    /// Strategy returns on the earning days, `[B × l]`.
    pub strategies: Tensor<f64>,
    pub delay: usize,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.stack.count
    }

    pub fn is_empty(&self) -> bool {
        self.stack.count == 0
    }

    /// Returns index of the first earning day.
    pub fn first_day(&self) -> usize {
        self.first_decision + self.delay
    }
}

pub fn build_episode(
    data: &MarketData,
    spec: &ObservationSpec,
    scaler: &ContextScaler,
    first: usize,
    last: usize,
    ecfg: &EpisodeConfig,
) -> Result<Episode> {
    ecfg.validate()?;
    let delay = ecfg.delay();
    if first > last || last + delay >= data.len() {
        bail!(
            Range,
            "episode decisions {first}..={last} need returns through index {}, have {}",
            last + delay,
            data.len()
        );
    }
    let stack = observation_stack(data, first..=last, spec, scaler)?;
    let days = (first + delay)..=(last + delay);
    let l = data.strategy_count();
    let mut strat = Vec::with_capacity(stack.count * l);
    for s in days.clone() {
        strat.extend(data.strategies.iter().map(|x| x.values[s]));
    }
    Ok(Episode {
        decision_dates: data.dates[first..=last].to_vec(),
        first_decision: first,
        risky: Tensor::vector(data.risky[days].to_vec()),
        strategies: Tensor::from_vec(&[stack.count, l], strat)?,
        stack,
        delay,
    })
}

/// Replacement of some dates' actions by random exposures.
///
/// Row `i` of the applied exposure is `policy_i ⊙ mask_i + random_i`; an
/// explored row has a zero mask and carries its random exposure.
#[derive(Debug, Clone)]
pub struct Exploration {
    pub mask: Tensor<f64>,
    pub random: Tensor<f64>,
}

/// Daily overlay returns of an episode, built on `tape`.
///
/// Returns the `[B]` portfolio-returns node and the policy heads.
#[allow(clippy::too_many_arguments)]
pub fn episode_returns_node(
    tape: &mut Tape<f64>,
    nodes: &ParamNodes,
    net: &NetworkConfig,
    ep: &Episode,
    asset: Tensor<f64>,
    context: Tensor<f64>,
    explore: Option<&Exploration>,
    ecfg: &EpisodeConfig,
) -> Result<(NodeId, HeadNodes)> {
    let a = tape.constant(asset);
    let c = tape.constant(context);
    let heads = forward_nodes(tape, nodes, net, a, c, ep.len())?;
    let mut e = tape.scale_rows(heads.weights, heads.leverage)?;
    if let Some(x) = explore {
        let m = tape.constant(x.mask.clone());
        let r = tape.constant(x.random.clone());
        e = tape.mul(e, m)?;
        e = tape.add(e, r)?;
    }
    let s = tape.constant(ep.strategies.clone());
    let es = tape.mul(e, s)?;
    let overlay = tape.sum_rows(es)?;
    let prev = tape.shift_rows(e, 1)?;
    let diff = tape.sub(e, prev)?;
    let moved = tape.abs(diff)?;
    let turnover = tape.sum_rows(moved)?;
    let cost = tape.scale(turnover, ecfg.cost_rate)?;
    let risky = tape.constant(ep.risky.clone());
    let gross = tape.add(risky, overlay)?;
    Ok((tape.sub(gross, cost)?, heads))
}

/// The same returns without a tape, from the policy's own actions.
pub fn episode_returns(
    params: &PolicyParams<f64>,
    net: &NetworkConfig,
    ep: &Episode,
    use_context: bool,
    ecfg: &EpisodeConfig,
) -> Result<Vec<f64>> {
    let decisions = if use_context {
        forward_stack(params, net, &ep.stack)?
    } else {
        forward_stack(params, net, &ep.stack.clone().without_context())?
    };
    let l = net.strategies;
    let mut prev = vec![0.0; l];
    let mut out = Vec::with_capacity(decisions.len());
    for (i, d) in decisions.iter().enumerate() {
        let e = d.exposures();
        let overlay: f64 = e.iter().zip(ep.strategies.row(i)).map(|(x, s)| x * s).sum();
        let turnover: f64 = e.iter().zip(&prev).map(|(a, b)| (a - b).abs()).sum();
        out.push(ep.risky.data()[i] + overlay - ecfg.cost_rate * turnover);
        prev = e;
    }
    Ok(out)
}

/// Policy decisions for returns indices `first..=last`.
#[allow(clippy::too_many_arguments)]
pub fn policy_decisions(
    params: &PolicyParams<f64>,
    net: &NetworkConfig,
    data: &MarketData,
    spec: &ObservationSpec,
    scaler: &ContextScaler,
    first: usize,
    last: usize,
    use_context: bool,
) -> Result<Vec<DatedDecision>> {
    let mut stack = observation_stack(data, first..=last, spec, scaler)?;
    if !use_context {
        stack = stack.without_context();
    }
    let decisions = forward_stack(params, net, &stack)?;
    Ok(decisions
        .into_iter()
        .zip(&data.dates[first..=last])
        .map(|(decision, &date)| DatedDecision { date, decision })
        .collect())
}
