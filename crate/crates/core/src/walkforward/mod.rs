//! Anchored walk-forward evaluation.
//!
//! Every split trains from the anchor up to the day before its test range
//! and then trades the test range out of sample; the test ranges tile the
//! out-of-sample window and their decisions are replayed as one stitched
//! path.

use std::ops::RangeInclusive;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{baseline_decisions_at, rebalance_dates, BaselineConfig, BaselineKind};
use crate::error::{bail, Error, Result};
use crate::features::{ContextScaler, MarketData, ObservationSpec};
use crate::metrics::{annualized_return, annualized_sharpe, max_drawdown, net_profit, sortino, MetricsRow, RewardKind, TRADING_DAYS};
use crate::policy::{Architecture, NetworkConfig, PolicyParams};
use crate::simulator::{run_episode, DatedDecision, EpisodeConfig, PortfolioPath};
use crate::trainer::{build_episode, policy_decisions, train, LogRow, Selection, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub anchor: NaiveDate,
    pub first_test_year: i32,
    pub test_span_years: u32,
    pub min_train_years: u32,
    /// Last date to trade; defaults to the end of the data.
    pub end: Option<NaiveDate>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            anchor: NaiveDate::from_ymd_opt(2000, 1, 1).unwrap(),
            first_test_year: 2007,
            test_span_years: 1,
            min_train_years: 7,
            end: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub index: usize,
    /// Returns indices fitted on.
    pub train: RangeInclusive<usize>,
    /// Returns indices traded out of sample.
    pub test: RangeInclusive<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub splits: Vec<Split>,
}

impl SplitPlan {
    pub fn len(&self) -> usize {
        self.splits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splits.is_empty()
    }

    /// Returns indices of the whole out-of-sample window.
    pub fn test_window(&self) -> RangeInclusive<usize> {
        let first = *self.splits[0].test.start();
        let last = *self.splits[self.splits.len() - 1].test.end();
        first..=last
    }
}

fn jan1(year: i32) -> Result<NaiveDate> {
    match NaiveDate::from_ymd_opt(year, 1, 1) {
        Some(d) => Ok(d),
        None => bail!(Config, "year {year} out of range"),
    }
}

/// Yearly staircase on `calendar`; the last test range is cut at the final
/// date and may be short.
pub fn make_splits(calendar: &[NaiveDate], cfg: &PlanConfig) -> Result<SplitPlan> {
    if cfg.test_span_years == 0 {
        bail!(Config, "test_span_years must be at least 1");
    }
    let earliest = cfg.anchor.year() + cfg.min_train_years as i32;
    if cfg.first_test_year < earliest {
        bail!(
            Config,
            "first test year {} leaves less than {} training years after the {} anchor",
            cfg.first_test_year,
            cfg.min_train_years,
            cfg.anchor
        );
    }
    let Some(anchor) = calendar.iter().position(|d| *d >= cfg.anchor) else {
        bail!(Config, "no data on or after the anchor {}", cfg.anchor);
    };
    if calendar[anchor].year() > cfg.first_test_year - cfg.min_train_years as i32 {
        bail!(
            Config,
            "data starts {}, too late for {} training years before {}",
            calendar[anchor],
            cfg.min_train_years,
            cfg.first_test_year
        );
    }
    let last_date = *calendar.last().expect("non-empty after the anchor check");
    let end = cfg.end.map_or(last_date, |e| e.min(last_date));
    let first_test = jan1(cfg.first_test_year)?;
    if end < first_test {
        bail!(Config, "data ends {end}, before the first test year {}", cfg.first_test_year);
    }

    let mut splits = Vec::new();
    let mut year = cfg.first_test_year;
    loop {
        let start = jan1(year)?;
        if start > end {
            break;
        }
        let stop = jan1(year + cfg.test_span_years as i32)?.pred_opt().expect("valid date").min(end);
        let first = calendar.partition_point(|d| *d < start);
        let last = calendar.partition_point(|d| *d <= stop);
        if last > first {
            splits.push(Split {
                index: splits.len(),
                train: anchor..=first - 1,
                test: first..=last - 1,
            });
        }
        year += cfg.test_span_years as i32;
    }
    if splits.is_empty() {
        bail!(Config, "no trading days between {first_test} and {end}");
    }
    Ok(SplitPlan { splits })
}

/// What gets refitted on every split.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Baseline(BaselineKind),
    Drl { name: String, trainer: TrainerConfig },
}

impl ModelSpec {
    pub fn name(&self) -> &str {
        match self {
            ModelSpec::Baseline(k) => k.name(),
            ModelSpec::Drl { name, .. } => name,
        }
    }
}

/// Settings shared by every model of a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WalkforwardSetup {
    pub observation: ObservationSpec,
    pub architecture: Architecture,
    pub episode: EpisodeConfig,
    pub baseline: BaselineConfig,
}

#[derive(Debug, Clone)]
pub struct SplitReport {
    pub index: usize,
    pub train_dates: (NaiveDate, NaiveDate),
    pub test_dates: (NaiveDate, NaiveDate),
    /// Clean training reward of the kept parameters (learned models).
    pub train_reward: Option<f64>,
    pub best_iteration: Option<usize>,
    pub test: MetricsRow,
    pub params: Option<PolicyParams<f64>>,
    pub log: Vec<LogRow>,
}

#[derive(Debug, Clone)]
pub struct StitchedResult {
    pub model: String,
    pub strategy_names: Vec<String>,
    pub path: PortfolioPath,
    pub decisions: Vec<DatedDecision>,
    pub splits: Vec<SplitReport>,
}

impl StitchedResult {
    pub fn performance(&self) -> f64 {
        net_profit(&self.path.values).expect("stitched path has a base value")
    }
}

/// Annualised return, Sharpe, Sortino and drawdown of a path.
pub fn path_metrics(model: &str, window_years: f64, path: &PortfolioPath) -> MetricsRow {
    MetricsRow {
        model: model.to_string(),
        window_years,
        return_ann: annualized_return(&path.values),
        sharpe: annualized_sharpe(&path.returns),
        sortino: sortino(&path.returns),
        max_dd: max_drawdown(&path.values).ok(),
    }
}

fn run_split(
    model: &ModelSpec,
    data: &MarketData,
    setup: &WalkforwardSetup,
    split: &Split,
) -> Result<(Vec<DatedDecision>, SplitReport)> {
    let ecfg = &setup.episode;
    let delay = ecfg.delay();
    let (tf, tl) = (*split.test.start(), *split.test.end());
    let train_last = *split.train.end();
    if tf < delay + 1 {
        bail!(Range, "split {}: test range starts before the first possible decision", split.index);
    }
    // Decisions dated `t − delay` take effect on `t`.
    let (dec_first, dec_last) = (tf - delay, tl - delay);
    let mut trained = None;
    let decisions = match model {
        ModelSpec::Baseline(kind) => {
            let visible = data.truncated(dec_last);
            let at: Vec<usize> = rebalance_dates(data, tf, tl, setup.baseline.rebalance)
                .into_iter()
                .map(|t| t - delay)
                .collect();
            baseline_decisions_at(*kind, &visible, &at, &setup.baseline)?
        }
        ModelSpec::Drl { trainer, .. } => {
            let train_data = data.truncated(train_last);
            let spec = &setup.observation;
            let scaler = ContextScaler::fit(&train_data, train_last)?;
            let first = spec.first_usable().max(*split.train.start());
            if train_last < first + delay {
                bail!(
                    Range,
                    "split {}: training range {}..={} too short for the observation lags",
                    split.index,
                    data.dates[*split.train.start()],
                    data.dates[train_last]
                );
            }
            let ep = build_episode(&train_data, spec, &scaler, first, train_last - delay, ecfg)?;
            let net = NetworkConfig::new(setup.architecture.clone(), data.strategy_count(), spec, data.context.len())?;
            let tcfg = TrainerConfig {
                seed: trainer.seed.wrapping_add(split.index as u64),
                ..trainer.clone()
            };
            let validation = match tcfg.selection {
                Selection::BestTest => Some(build_episode(data, spec, &scaler, dec_first, dec_last, ecfg)?),
                Selection::BestTrain => None,
            };
            let result = train(&ep, &net, &tcfg, ecfg, validation.as_ref())?;
            let decisions = policy_decisions(&result.params, &net, data, spec, &scaler, dec_first, dec_last, tcfg.use_context)?;
            trained = Some(result);
            decisions
        }
    };
    let path = run_episode(&decisions, data, tf, tl, ecfg)?;
    let report = SplitReport {
        index: split.index,
        train_dates: (data.dates[*split.train.start()], data.dates[train_last]),
        test_dates: (data.dates[tf], data.dates[tl]),
        train_reward: trained.as_ref().map(|r| r.best_reward),
        best_iteration: trained.as_ref().map(|r| r.best_iteration),
        test: path_metrics(model.name(), path.days() as f64 / TRADING_DAYS, &path),
        params: trained.as_ref().map(|r| r.params.clone()),
        log: trained.map(|r| r.log).unwrap_or_default(),
    };
    Ok((decisions, report))
}

/// Refits `model` on every split and replays all its out-of-sample
/// decisions over the union of the test ranges.
pub fn run_walkforward(
    model: &ModelSpec,
    data: &MarketData,
    setup: &WalkforwardSetup,
    plan: &SplitPlan,
) -> Result<StitchedResult> {
    if plan.is_empty() {
        bail!(Config, "walk-forward plan has no splits");
    }
    if *plan.test_window().end() >= data.len() {
        bail!(Data, "plan reaches index {} beyond {} dates", plan.test_window().end(), data.len());
    }
    let outcomes: Vec<Result<(Vec<DatedDecision>, SplitReport)>> =
        plan.splits.par_iter().map(|s| run_split(model, data, setup, s)).collect();
    let mut decisions = Vec::new();
    let mut splits = Vec::with_capacity(outcomes.len());
    let mut failure = None;
    for (s, o) in plan.splits.iter().zip(outcomes) {
        match o {
            Ok((d, r)) => {
                decisions.extend(d);
                splits.push(r);
            }
            Err(e) => {
                log::error!("{}: split {} ({}) failed: {e}", model.name(), s.index, data.dates[*s.test.start()]);
                failure.get_or_insert(e);
            }
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }
    let window = plan.test_window();
    let path = run_episode(&decisions, data, *window.start(), *window.end(), &setup.episode)?;
    Ok(StitchedResult {
        model: model.name().to_string(),
        strategy_names: data.strategy_names(),
        path,
        decisions,
        splits,
    })
}

/// Metrics over the trailing `years` of each stitched path. A path shorter
/// than the window is used whole.
pub fn comparison_rows(results: &[StitchedResult], windows: &[f64]) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for &years in windows {
        for r in results {
            let days = (years * TRADING_DAYS).round() as usize;
            if days > r.path.days() {
                log::warn!(
                    "{}: {years}-year window longer than the {}-day out-of-sample path; using all of it",
                    r.model,
                    r.path.days()
                );
            }
            rows.push(path_metrics(&r.model, years, &r.path.tail(days)));
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationCell {
    pub reward: RewardKind,
    pub adversarial: bool,
    pub context: bool,
    pub lag: usize,
}

impl AblationCell {
    pub fn label(&self) -> String {
        format!(
            "{}{}{}_lag{}",
            self.reward.name(),
            if self.adversarial { "_adv" } else { "" },
            if self.context { "_ctx" } else { "" },
            self.lag
        )
    }
}

/// reward × adversarial × context × lag, lag-1 cells first.
pub fn ablation_grid() -> Vec<AblationCell> {
    let mut cells = Vec::with_capacity(16);
    for lag in [1, 0] {
        for reward in [RewardKind::NetProfit, RewardKind::Sortino] {
            for adversarial in [true, false] {
                for context in [true, false] {
                    cells.push(AblationCell {
                        reward,
                        adversarial,
                        context,
                        lag,
                    });
                }
            }
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    /// 1-based position in the sorted table.
    pub rank: usize,
    pub cell: AblationCell,
    /// Net profit of the stitched out-of-sample path.
    pub performance: f64,
}

/// Walk-forward of one learned model per cell, derived from `base`.
pub fn run_cell(
    cell: AblationCell,
    data: &MarketData,
    setup: &WalkforwardSetup,
    plan: &SplitPlan,
    base: &TrainerConfig,
) -> Result<StitchedResult> {
    let trainer = TrainerConfig {
        reward: cell.reward,
        adversarial: cell.adversarial,
        use_context: cell.context,
        ..base.clone()
    };
    let setup = WalkforwardSetup {
        episode: EpisodeConfig {
            lag: cell.lag,
            ..setup.episode.clone()
        },
        ..setup.clone()
    };
    let model = ModelSpec::Drl {
        name: cell.label(),
        trainer,
    };
    run_walkforward(&model, data, &setup, plan)
}

/// Runs the 16 cells; rows come sorted by decreasing performance within
/// each lag group, lag 1 first.
pub fn ablation_matrix(
    data: &MarketData,
    setup: &WalkforwardSetup,
    plan: &SplitPlan,
    base: &TrainerConfig,
) -> Result<Vec<AblationRow>> {
    let results = ablation_grid()
        .into_par_iter()
        .map(|cell| run_cell(cell, data, setup, plan, base).map(|r| (cell, r.performance())))
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_cells(results))
}

pub fn rank_cells(mut cells: Vec<(AblationCell, f64)>) -> Vec<AblationRow> {
    // stable: ties keep grid order
    cells.sort_by(|(a, pa), (b, pb)| b.lag.cmp(&a.lag).then(pb.total_cmp(pa)));
    cells
        .into_iter()
        .enumerate()
        .map(|(i, (cell, performance))| AblationRow {
            rank: i + 1,
            cell,
            performance,
        })
        .collect()
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Writes `model,reward,adversarial,context,day_lag,performance`.
pub fn write_ablation_csv(path: impl AsRef<Path>, rows: &[AblationRow]) -> Result<()> {
    let file = path.as_ref();
    let mut w = csv::Writer::from_path(file).map_err(|e| Error::csv(file, e))?;
    w.write_record(["model", "reward", "adversarial", "context", "day_lag", "performance"])
        .map_err(|e| Error::csv(file, e))?;
    for r in rows {
        w.write_record([
            r.rank.to_string(),
            r.cell.reward.name().to_string(),
            yes_no(r.cell.adversarial).to_string(),
            yes_no(r.cell.context).to_string(),
            yes_no(r.cell.lag > 0).to_string(),
            format!("{}", r.performance),
        ])
        .map_err(|e| Error::csv(file, e))?;
    }
    w.flush().map_err(|e| Error::io(file, e))
}

#[cfg(test)]
mod tests;
