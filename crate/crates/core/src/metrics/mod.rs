//! Training rewards and evaluation metrics.
//!
//! Undefined ratios (zero volatility, no downside days) come back as
//! `None`, never as infinities.

mod report;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{bail, Result};
use crate::scalar::Scalar;

pub use report::{read_metrics_csv, write_metrics_csv, MetricsRow};

pub const TRADING_DAYS: f64 = 250.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    NetProfit,
    Sharpe,
    Sortino,
}

impl RewardKind {
    pub const ALL: [RewardKind; 3] = [RewardKind::NetProfit, RewardKind::Sharpe, RewardKind::Sortino];

    pub fn name(self) -> &'static str {
        match self {
            RewardKind::NetProfit => "net_profit",
            RewardKind::Sharpe => "sharpe",
            RewardKind::Sortino => "sortino",
        }
    }
}

/// Population mean and standard deviation; deviations are taken from the
/// first element so a constant sample has exactly zero spread.
fn mean_std<T: Scalar>(x: &[T]) -> (T, T) {
    let n = T::lit(x.len() as f64);
    let shift = x[0];
    let mu = x.iter().map(|&v| v - shift).sum::<T>() / n;
    let var = x.iter().map(|&v| (v - shift - mu) * (v - shift - mu)).sum::<T>() / n;
    (mu + shift, var.sqrt())
}

/// Spread at or below rounding noise relative to the sample's magnitude.
fn degenerate<T: Scalar>(std: T, x: &[T]) -> bool {
    let scale = x.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    !(std > T::epsilon() * T::lit(16.0) * scale)
}

/// `final / initial − 1`.
pub fn net_profit<T: Scalar>(values: &[T]) -> Result<T> {
    match (values.first(), values.last()) {
        (Some(&first), Some(&last)) if first > T::zero() => Ok(last / first - T::one()),
        (Some(first), _) => bail!(Domain, "initial portfolio value must be positive, got {first}"),
        _ => bail!(Domain, "net profit of an empty path"),
    }
}

/// `mean·250 / (std·√250)` with population std; `None` when undefined.
pub fn annualized_sharpe<T: Scalar>(returns: &[T]) -> Option<T> {
    if returns.len() < 2 {
        return None;
    }
    let (mu, sd) = mean_std(returns);
    if degenerate(sd, returns) {
        return None;
    }
    let days = T::lit(TRADING_DAYS);
    Some(mu * days / (sd * days.sqrt()))
}

/// Annualised mean return over `√250 ·` the population std of the strictly
/// negative returns; `None` without at least two distinct losses.
pub fn sortino<T: Scalar>(returns: &[T]) -> Option<T> {
    let downside: Vec<T> = returns.iter().copied().filter(|&r| r < T::zero()).collect();
    if downside.is_empty() {
        return None;
    }
    let (_, dsd) = mean_std(&downside);
    if degenerate(dsd, &downside) {
        return None;
    }
    let (mu, _) = mean_std(returns);
    let days = T::lit(TRADING_DAYS);
    Some(mu * days / (days.sqrt() * dsd))
}

/// Largest fall from the running maximum, as a fraction of that maximum.
pub fn max_drawdown<T: Scalar>(values: &[T]) -> Result<T> {
    if values.is_empty() {
        bail!(Domain, "drawdown of an empty path");
    }
    if let Some(v) = values.iter().find(|&&v| !(v > T::zero())) {
        bail!(Domain, "drawdown needs positive values, got {v}");
    }
    let mut peak = values[0];
    let mut worst = T::zero();
    for &v in values {
        peak = peak.max(v);
        worst = worst.max((peak - v) / peak);
    }
    Ok(worst)
}

/// Compounded annual growth over a path of `values.len() − 1` days.
pub fn annualized_return<T: Scalar>(values: &[T]) -> Option<T> {
    let days = values.len().checked_sub(1).filter(|&d| d > 0)?;
    let growth = values[days] / values[0];
    (growth > T::zero()).then(|| growth.powf(T::lit(TRADING_DAYS / days as f64)) - T::one())
}

/// Episode reward evaluated without a tape.
pub fn reward_value<T: Scalar>(kind: RewardKind, returns: &[T]) -> Option<T> {
    match kind {
        RewardKind::NetProfit => Some(returns.iter().fold(T::one(), |acc, &r| acc * (T::one() + r)) - T::one()),
        RewardKind::Sharpe => annualized_sharpe(returns),
        RewardKind::Sortino => sortino(returns),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RewardNode {
    pub node: NodeId,
    /// The reward actually built; differs from the request after a fallback.
    pub kind: RewardKind,
}

fn net_profit_node<T: Scalar>(tape: &mut Tape<T>, returns: NodeId) -> Result<NodeId> {
    let one = tape.constant(Tensor::scalar(T::one()));
    let gross = tape.add(returns, one)?;
    let prod = tape.reduce(crate::autodiff::Reduction::Product, gross)?;
    tape.sub(prod, one)
}

/// Builds the reward for a daily-returns node `[n]`. An undefined Sharpe
/// or Sortino falls back to net profit with a warning.
pub fn reward_node<T: Scalar>(tape: &mut Tape<T>, kind: RewardKind, returns: NodeId) -> Result<RewardNode> {
    let values = tape.value(returns).data().to_vec();
    if values.is_empty() {
        bail!(Domain, "reward of an empty episode");
    }
    let days = T::lit(TRADING_DAYS);
    let node = match kind {
        RewardKind::NetProfit => net_profit_node(tape, returns)?,
        _ if reward_value(kind, &values).is_none() => {
            log::warn!("{} undefined on this episode; using net_profit", kind.name());
            return Ok(RewardNode {
                node: net_profit_node(tape, returns)?,
                kind: RewardKind::NetProfit,
            });
        }
        RewardKind::Sharpe => {
            let mu = tape.mean(returns)?;
            let sd = tape.std_dev(returns)?;
            let ratio = tape.div(mu, sd)?;
            tape.scale(ratio, days.sqrt())?
        }
        RewardKind::Sortino => {
            let neg: Vec<usize> = (0..values.len()).filter(|&i| values[i] < T::zero()).collect();
            let mu = tape.mean(returns)?;
            let down = tape.select(returns, neg)?;
            let dsd = tape.std_dev(down)?;
            let ratio = tape.div(mu, dsd)?;
            tape.scale(ratio, days.sqrt())?
        }
    };
    Ok(RewardNode { node, kind })
}

#[cfg(test)]
mod tests;
