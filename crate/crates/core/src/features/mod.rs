//! Market panels, returns, rolling volatilities and observation tensors.
//!
//! Everything downstream of ingestion is indexed on the *returns calendar*:
//! index `i` is the return earned from price date `i` to price date `i + 1`
//! and carries the later date.

mod io;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{bail, Result};
use crate::scalar::Scalar;

pub use io::{read_context_csv, read_price_csv, write_context_csv, write_price_csv};

/// Number of derived context rows appended after the raw features:
/// max strategy return, min strategy return, max strategy volatility.
pub const DERIVED_CONTEXT_ROWS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

impl Series {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Series {
            name: name.into(),
            values,
        }
    }
}

/// Close prices of the risky asset and the hedging strategies.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePanel {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<Series>,
    /// Index into `assets` of the risky asset.
    pub risky: usize,
    /// Indices into `assets` of the hedging strategies, in model order.
    pub strategies: Vec<usize>,
}

impl PricePanel {
    pub fn new(
        dates: Vec<NaiveDate>,
        assets: Vec<Series>,
        risky: usize,
        strategies: Vec<usize>,
    ) -> Result<Self> {
        check_calendar(&dates)?;
        if risky >= assets.len() || strategies.iter().any(|&s| s >= assets.len()) {
            bail!(Config, "risky/strategy index outside the {} assets", assets.len());
        }
        if strategies.is_empty() {
            bail!(Config, "at least one hedging strategy is required");
        }
        if strategies.contains(&risky) {
            bail!(Config, "the risky asset cannot also be a hedging strategy");
        }
        for a in &assets {
            if a.values.len() != dates.len() {
                bail!(
                    Data,
                    "series {} has {} values for {} dates",
                    a.name,
                    a.values.len(),
                    dates.len()
                );
            }
            if let Some(i) = a.values.iter().position(|v| !v.is_finite()) {
                bail!(Data, "missing price for {} on {}", a.name, dates[i]);
            }
        }
        Ok(PricePanel {
            dates,
            assets,
            risky,
            strategies,
        })
    }

    pub fn strategy_count(&self) -> usize {
        self.strategies.len()
    }

    pub fn strategy_names(&self) -> Vec<String> {
        self.strategies
            .iter()
            .map(|&s| self.assets[s].name.clone())
            .collect()
    }

    fn restrict(&self, keep: &[usize]) -> PricePanel {
        PricePanel {
            dates: keep.iter().map(|&i| self.dates[i]).collect(),
            assets: self
                .assets
                .iter()
                .map(|a| Series::new(a.name.clone(), keep.iter().map(|&i| a.values[i]).collect()))
                .collect(),
            risky: self.risky,
            strategies: self.strategies.clone(),
        }
    }
}

/// Context features; before alignment, missing cells are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextPanel {
    pub dates: Vec<NaiveDate>,
    pub series: Vec<Series>,
}

impl ContextPanel {
    pub fn new(dates: Vec<NaiveDate>, series: Vec<Series>) -> Result<Self> {
        check_calendar(&dates)?;
        for s in &series {
            if s.values.len() != dates.len() {
                bail!(Data, "context series {} has {} values for {} dates", s.name, s.values.len(), dates.len());
            }
        }
        Ok(ContextPanel { dates, series })
    }

    pub fn names(&self) -> Vec<String> {
        self.series.iter().map(|s| s.name.clone()).collect()
    }
}

/// `n` consecutive Monday–Friday dates starting on or after `start`.
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    use chrono::{Datelike, Weekday};
    start
        .iter_days()
        .filter(|d| !matches!(d.weekday(), Weekday::Sat | Weekday::Sun))
        .take(n)
        .collect()
}

fn check_calendar(dates: &[NaiveDate]) -> Result<()> {
    if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
        bail!(Data, "dates not strictly increasing at {} → {}", w[0], w[1]);
    }
    Ok(())
}

/// Simple returns `p_t / p_{t−1} − 1`, one row per price date after the first.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsPanel {
    pub dates: Vec<NaiveDate>,
    pub series: Vec<Series>,
}

pub fn compute_returns(panel: &PricePanel) -> Result<ReturnsPanel> {
    if panel.dates.len() < 2 {
        bail!(Data, "need at least two price dates, got {}", panel.dates.len());
    }
    let mut series = Vec::with_capacity(panel.assets.len());
    for asset in &panel.assets {
        if let Some(i) = asset.values.iter().position(|&p| !(p > 0.0)) {
            bail!(
                Data,
                "non-positive price {} for {} on {}",
                asset.values[i],
                asset.name,
                panel.dates[i]
            );
        }
        let r = asset.values.windows(2).map(|w| w[1] / w[0] - 1.0).collect();
        series.push(Series::new(asset.name.clone(), r));
    }
    Ok(ReturnsPanel {
        dates: panel.dates[1..].to_vec(),
        series,
    })
}

/// Population standard deviation over trailing windows of `window` returns.
#[derive(Debug, Clone, PartialEq)]
pub struct RollingVol {
    pub window: usize,
    /// `values[j]` is the volatility at returns index `j + window − 1`.
    pub values: Vec<f64>,
}

impl RollingVol {
    /// Volatility at returns index `i`, if a full window ends there.
    pub fn at(&self, i: usize) -> Option<f64> {
        i.checked_sub(self.window - 1)
            .and_then(|j| self.values.get(j).copied())
    }
}

pub fn rolling_vol(returns: &[f64], window: usize) -> Result<RollingVol> {
    if window < 2 {
        bail!(Config, "volatility window must be at least 2, got {window}");
    }
    if returns.len() < window {
        bail!(Range, "{} returns are fewer than the window {window}", returns.len());
    }
    let d = window as f64;
    let values = returns
        .windows(window)
        .map(|w| {
            // Deviations from the first element keep constant windows exactly zero.
            let shift = w[0];
            let mu = w.iter().map(|r| r - shift).sum::<f64>() / d;
            (w.iter().map(|r| (r - shift - mu).powi(2)).sum::<f64>() / d).sqrt()
        })
        .collect();
    Ok(RollingVol { window, values })
}

/// Lag structure of the observation tensors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSpec {
    /// Offsets into the past for returns and volatilities; starts at 0.
    pub lags: Vec<usize>,
    /// Rolling volatility window.
    pub vol_window: usize,
    /// Offsets into the past for context rows.
    pub context_lags: Vec<usize>,
}

impl Default for ObservationSpec {
    fn default() -> Self {
        ObservationSpec {
            lags: vec![0, 1, 2, 3, 4, 20, 60],
            vol_window: 20,
            context_lags: vec![0, 1, 2, 3, 4, 20, 60],
        }
    }
}

impl ObservationSpec {
    pub fn validate(&self) -> Result<()> {
        for (what, lags) in [("lags", &self.lags), ("context_lags", &self.context_lags)] {
            if lags.first() != Some(&0) {
                bail!(Config, "{what} must start at 0, got {lags:?}");
            }
            if lags.windows(2).any(|w| w[0] >= w[1]) {
                bail!(Config, "{what} must be strictly increasing, got {lags:?}");
            }
        }
        if self.vol_window < 2 {
            bail!(Config, "vol_window must be at least 2, got {}", self.vol_window);
        }
        Ok(())
    }

    pub fn max_lag(&self) -> usize {
        let a = self.lags.last().copied().unwrap_or(0);
        let c = self.context_lags.last().copied().unwrap_or(0);
        a.max(c)
    }

    /// First returns index with enough history for a full observation.
    pub fn first_usable(&self) -> usize {
        self.max_lag() + self.vol_window - 1
    }
}

/// Observation at one date: returns `a1` and volatilities `a2`
/// (strategies × lags), and the context matrix `c`
/// ((raw features + 3) × context lags).
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBatch<T> {
    pub a1: Tensor<T>,
    pub a2: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> ObservationBatch<T> {
    pub fn strategies(&self) -> usize {
        self.a1.rows()
    }

    pub fn lags(&self) -> usize {
        self.a1.cols()
    }

    pub fn context_rows(&self) -> usize {
        self.c.rows()
    }

    pub fn context_lags(&self) -> usize {
        self.c.cols()
    }

    pub fn cast<U: Scalar>(&self) -> ObservationBatch<U> {
        let conv = |t: &Tensor<T>| {
            Tensor::from_vec(
                t.shape(),
                t.data().iter().map(|&v| U::lit(v.as_f64())).collect(),
            )
            .expect("shape preserved")
        };
        ObservationBatch {
            a1: conv(&self.a1),
            a2: conv(&self.a2),
            c: conv(&self.c),
        }
    }
}

/// Many observations stacked for batched evaluation.
///
/// `asset` stacks each date's `[A1; A2]` plane (2·strategies rows);
/// `context` stacks each date's context matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationStack<T> {
    pub count: usize,
    pub asset: Tensor<T>,
    pub context: Tensor<T>,
}

impl<T: Scalar> ObservationStack<T> {
    pub fn from_batches(batches: &[ObservationBatch<T>]) -> Result<Self> {
        let first = match batches.first() {
            Some(b) => b,
            None => bail!(Domain, "cannot stack zero observations"),
        };
        let (l, lags) = (first.strategies(), first.lags());
        let (p, clags) = (first.context_rows(), first.context_lags());
        let mut asset = Vec::with_capacity(batches.len() * 2 * l * lags);
        let mut context = Vec::with_capacity(batches.len() * p * clags);
        for b in batches {
            if b.a1.shape() != [l, lags] || b.a2.shape() != [l, lags] || b.c.shape() != [p, clags] {
                bail!(Shape, "observation shapes differ within a stack");
            }
            asset.extend_from_slice(b.a1.data());
            asset.extend_from_slice(b.a2.data());
            context.extend_from_slice(b.c.data());
        }
        Ok(ObservationStack {
            count: batches.len(),
            asset: Tensor::from_vec(&[batches.len() * 2 * l, lags], asset)?,
            context: Tensor::from_vec(&[batches.len() * p, clags], context)?,
        })
    }

    pub fn asset_rows_per_sample(&self) -> usize {
        self.asset.rows() / self.count
    }

    pub fn context_rows_per_sample(&self) -> usize {
        self.context.rows() / self.count
    }

    /// Zeroes the context plane (context-off ablation).
    pub fn without_context(mut self) -> Self {
        self.context.fill(T::zero());
        self
    }
}

/// Standardisation of raw context features with statistics from a fitting
/// range; derived rows are left unscaled.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ContextScaler {
    pub fn identity(features: usize) -> Self {
        ContextScaler {
            mean: vec![0.0; features],
            std: vec![1.0; features],
        }
    }

    /// Fits on returns indices `0..=last` only.
    pub fn fit(data: &MarketData, last: usize) -> Result<Self> {
        if last >= data.len() {
            bail!(Range, "scaler range ends at {last} beyond {} dates", data.len());
        }
        let n = (last + 1) as f64;
        let mut mean = Vec::with_capacity(data.context.len());
        let mut std = Vec::with_capacity(data.context.len());
        for s in &data.context {
            let window = &s.values[..=last];
            let mu = window.iter().sum::<f64>() / n;
            let sd = (window.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt();
            mean.push(mu);
            std.push(if sd > 1e-12 { sd } else { 1.0 });
        }
        Ok(ContextScaler { mean, std })
    }

    #[inline]
    fn apply(&self, feature: usize, v: f64) -> f64 {
        (v - self.mean[feature]) / self.std[feature]
    }
}

/// Aligned returns, volatilities and context on one returns calendar.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketData {
    pub dates: Vec<NaiveDate>,
    pub risky_name: String,
    pub risky: Vec<f64>,
    pub strategies: Vec<Series>,
    pub vols: Vec<RollingVol>,
    /// Raw context on the returns calendar (value on the same date).
    pub context: Vec<Series>,
}

impl MarketData {
    /// Builds the feature store from aligned panels.
    pub fn from_panels(prices: &PricePanel, context: &ContextPanel, vol_window: usize) -> Result<Self> {
        if prices.dates != context.dates {
            bail!(Data, "price and context calendars differ; align them first");
        }
        let returns = compute_returns(prices)?;
        let strategies: Vec<Series> = prices
            .strategies
            .iter()
            .map(|&s| returns.series[s].clone())
            .collect();
        let vols = strategies
            .iter()
            .map(|s| rolling_vol(&s.values, vol_window))
            .collect::<Result<Vec<_>>>()?;
        let context = context
            .series
            .iter()
            .map(|s| {
                if let Some(i) = s.values.iter().position(|v| !v.is_finite()) {
                    bail!(Data, "context {} missing on {}", s.name, context.dates[i]);
                }
                Ok(Series::new(s.name.clone(), s.values[1..].to_vec()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MarketData {
            dates: returns.dates,
            risky_name: prices.assets[prices.risky].name.clone(),
            risky: returns.series[prices.risky].values.clone(),
            strategies,
            vols,
            context,
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn strategy_count(&self) -> usize {
        self.strategies.len()
    }

    pub fn strategy_names(&self) -> Vec<String> {
        self.strategies.iter().map(|s| s.name.clone()).collect()
    }

    pub fn context_rows(&self) -> usize {
        self.context.len() + DERIVED_CONTEXT_ROWS
    }

    pub fn vol_window(&self) -> usize {
        self.vols.first().map_or(2, |v| v.window)
    }

    /// Returns of strategy `k` over a returns-index range.
    pub fn strategy_returns(&self, k: usize) -> &[f64] {
        &self.strategies[k].values
    }

    /// Index of the first date on or after `date`.
    pub fn index_on_or_after(&self, date: NaiveDate) -> Option<usize> {
        let i = self.dates.partition_point(|d| *d < date);
        (i < self.dates.len()).then_some(i)
    }

    /// Index of the last date on or before `date`.
    pub fn index_on_or_before(&self, date: NaiveDate) -> Option<usize> {
        self.dates.partition_point(|d| *d <= date).checked_sub(1)
    }

    /// Copy restricted to returns indices `0..=last`.
    pub fn truncated(&self, last: usize) -> MarketData {
        let cut = |s: &Series| Series::new(s.name.clone(), s.values[..=last].to_vec());
        MarketData {
            dates: self.dates[..=last].to_vec(),
            risky_name: self.risky_name.clone(),
            risky: self.risky[..=last].to_vec(),
            strategies: self.strategies.iter().map(cut).collect(),
            vols: self
                .vols
                .iter()
                .map(|v| RollingVol {
                    window: v.window,
                    values: v.values[..(last + 2).saturating_sub(v.window).min(v.values.len())].to_vec(),
                })
                .collect(),
            context: self.context.iter().map(cut).collect(),
        }
    }
}

/// Observation at returns index `t`, reading only data dated at or before `t`.
pub fn assemble_observation(
    data: &MarketData,
    t: usize,
    spec: &ObservationSpec,
    scaler: &ContextScaler,
) -> Result<ObservationBatch<f64>> {
    if t >= data.len() {
        bail!(Range, "observation index {t} beyond {} dates", data.len());
    }
    if t < spec.first_usable() {
        bail!(
            Range,
            "observation at index {t} needs {} days of history",
            spec.first_usable()
        );
    }
    let vol_window = data.vol_window();
    if vol_window != spec.vol_window {
        bail!(Config, "features were built with window {vol_window}, spec asks for {}", spec.vol_window);
    }
    if scaler.mean.len() != data.context.len() {
        bail!(Shape, "scaler covers {} features, data has {}", scaler.mean.len(), data.context.len());
    }
    let l = data.strategy_count();
    let lags = spec.lags.len();
    let mut a1 = Vec::with_capacity(l * lags);
    let mut a2 = Vec::with_capacity(l * lags);
    for k in 0..l {
        for &lag in &spec.lags {
            a1.push(data.strategies[k].values[t - lag]);
        }
    }
    for k in 0..l {
        for &lag in &spec.lags {
            a2.push(data.vols[k].at(t - lag).expect("history checked"));
        }
    }
    let rows = data.context_rows();
    let clags = spec.context_lags.len();
    let mut c = Vec::with_capacity(rows * clags);
    for (f, s) in data.context.iter().enumerate() {
        for &lag in &spec.context_lags {
            c.push(scaler.apply(f, s.values[t - lag]));
        }
    }
    let fold = |init: f64, f: fn(f64, f64) -> f64, get: &dyn Fn(usize, usize) -> f64| {
        spec.context_lags
            .iter()
            .map(|&lag| (0..l).map(|k| get(k, t - lag)).fold(init, f))
            .collect::<Vec<f64>>()
    };
    let ret = |k: usize, i: usize| data.strategies[k].values[i];
    let vol = |k: usize, i: usize| data.vols[k].at(i).expect("history checked");
    c.extend(fold(f64::NEG_INFINITY, f64::max, &ret));
    c.extend(fold(f64::INFINITY, f64::min, &ret));
    c.extend(fold(f64::NEG_INFINITY, f64::max, &vol));
    Ok(ObservationBatch {
        a1: Tensor::from_vec(&[l, lags], a1)?,
        a2: Tensor::from_vec(&[l, lags], a2)?,
        c: Tensor::from_vec(&[rows, clags], c)?,
    })
}

/// Observations for every index in `indices`, stacked.
pub fn observation_stack(
    data: &MarketData,
    indices: impl IntoIterator<Item = usize>,
    spec: &ObservationSpec,
    scaler: &ContextScaler,
) -> Result<ObservationStack<f64>> {
    let batches = indices
        .into_iter()
        .map(|t| assemble_observation(data, t, spec, scaler))
        .collect::<Result<Vec<_>>>()?;
    ObservationStack::from_batches(&batches)
}

/// Restricts both panels to their overlapping date range on the price
/// calendar, forward-filling context gaps of at most `fill_limit` days.
pub fn align_calendars(
    prices: &PricePanel,
    context: &ContextPanel,
    fill_limit: usize,
) -> Result<(PricePanel, ContextPanel)> {
    let (p0, p1) = match (prices.dates.first(), prices.dates.last()) {
        (Some(a), Some(b)) => (*a, *b),
        _ => bail!(Data, "price panel is empty"),
    };
    let (c0, c1) = match (context.dates.first(), context.dates.last()) {
        (Some(a), Some(b)) => (*a, *b),
        _ => bail!(Data, "context panel is empty"),
    };
    let (start, end) = (p0.max(c0), p1.min(c1));
    if start > end {
        bail!(Data, "price ({p0}..{p1}) and context ({c0}..{c1}) ranges do not overlap");
    }
    let keep: Vec<usize> = (0..prices.dates.len())
        .filter(|&i| prices.dates[i] >= start && prices.dates[i] <= end)
        .collect();
    let prices = prices.restrict(&keep);

    let mut series = Vec::with_capacity(context.series.len());
    for s in &context.series {
        let mut out = Vec::with_capacity(prices.dates.len());
        let mut cursor = 0;
        let mut last: Option<f64> = None;
        let mut gap = 0;
        for &date in &prices.dates {
            while cursor < context.dates.len() && context.dates[cursor] < date {
                if s.values[cursor].is_finite() {
                    last = Some(s.values[cursor]);
                }
                cursor += 1;
            }
            let exact = (cursor < context.dates.len() && context.dates[cursor] == date)
                .then(|| s.values[cursor])
                .filter(|v| v.is_finite());
            match exact {
                Some(v) => {
                    out.push(v);
                    gap = 0;
                }
                None => {
                    gap += 1;
                    match last {
                        Some(v) if gap <= fill_limit => out.push(v),
                        Some(_) => bail!(
                            Data,
                            "context {} has a gap longer than {fill_limit} days ending {date}",
                            s.name
                        ),
                        None => bail!(Data, "context {} has no value on or before {date}", s.name),
                    }
                }
            }
        }
        series.push(Series::new(s.name.clone(), out));
    }
    let context = ContextPanel::new(prices.dates.clone(), series)?;
    Ok((prices, context))
}
