//! Regime-switching synthetic markets.
//!
//! A hidden Markov chain picks the regime of each day; asset returns are
//! correlated Gaussians with regime-dependent means and volatilities, and
//! the context carries one (optionally smoothed and noised) indicator per
//! regime. Column 0 of every per-regime vector is the risky asset.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::features::{business_days, ContextPanel, MarketData, PricePanel, Series};

/// Daily returns are floored here so prices stay positive.
pub const RETURN_FLOOR: f64 = -0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSpec {
    /// Daily means, `[regime][asset]`.
    pub means: Vec<Vec<f64>>,
    /// Daily volatilities, `[regime][asset]`.
    pub vols: Vec<Vec<f64>>,
    /// Return correlations, `[regime][asset][asset]`.
    pub correlations: Vec<Vec<Vec<f64>>>,
    /// Markov transition matrix, rows sum to one.
    pub transition: Vec<Vec<f64>>,
    /// Mix between the regime indicator (0) and pure noise (1).
    pub context_noise: f64,
    /// EMA weight on the new indicator value; 1 means no smoothing.
    #[serde(default = "one")]
    pub context_smoothing: f64,
    #[serde(default = "default_start")]
    pub start: NaiveDate,
}

fn one() -> f64 {
    1.0
}

fn default_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2000, 1, 3).unwrap()
}

impl RegimeSpec {
    pub fn regimes(&self) -> usize {
        self.means.len()
    }

    /// Risky asset plus strategies.
    pub fn assets(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.regimes();
        let n = self.assets();
        if k == 0 {
            bail!(Config, "regime spec needs at least one regime");
        }
        if n < 2 {
            bail!(Config, "regime spec needs the risky asset and at least one strategy");
        }
        if self.vols.len() != k || self.correlations.len() != k || self.transition.len() != k {
            bail!(Config, "regime spec: means, vols, correlations and transition must all have {k} regimes");
        }
        for r in 0..k {
            if self.means[r].len() != n || self.vols[r].len() != n {
                bail!(Config, "regime {r}: expected {n} means and vols");
            }
            if self.means[r].iter().any(|m| !m.is_finite()) {
                bail!(Config, "regime {r}: non-finite mean");
            }
            if self.vols[r].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                bail!(Config, "regime {r}: volatilities must be finite and ≥ 0");
            }
            cholesky(&self.correlations[r]).map_err(|e| crate::Error::Config(format!("regime {r}: {e}")))?;
            let row = &self.transition[r];
            if row.len() != k || row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                bail!(Config, "transition row {r} must have {k} non-negative entries");
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                bail!(Config, "transition row {r} sums to {s}, not 1");
            }
        }
        if !(0.0..=1.0).contains(&self.context_noise) {
            bail!(Config, "context_noise must lie in [0, 1], got {}", self.context_noise);
        }
        if !(self.context_smoothing > 0.0 && self.context_smoothing <= 1.0) {
            bail!(Config, "context_smoothing must lie in (0, 1], got {}", self.context_smoothing);
        }
        Ok(())
    }

    /// Long-run regime occupancy (power iteration from uniform).
    pub fn stationary(&self) -> Vec<f64> {
        let k = self.regimes();
        let mut pi = vec![1.0 / k as f64; k];
        for _ in 0..10_000 {
            let next: Vec<f64> = (0..k)
                .map(|j| (0..k).map(|i| pi[i] * self.transition[i][j]).sum())
                .collect();
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < 1e-15 {
                break;
            }
        }
        pi
    }
}

/// Lower Cholesky factor of a correlation matrix. Semidefinite inputs are
/// accepted: a (near-)zero pivot zeroes its column.
fn cholesky(c: &[Vec<f64>]) -> std::result::Result<Vec<Vec<f64>>, String> {
    let n = c.len();
    if c.iter().any(|r| r.len() != n) {
        return Err(format!("correlation matrix must be {n}×{n}"));
    }
    for i in 0..n {
        if (c[i][i] - 1.0).abs() > 1e-12 {
            return Err(format!("correlation diagonal entry {i} is {}", c[i][i]));
        }
        for j in 0..i {
            if (c[i][j] - c[j][i]).abs() > 1e-12 || c[i][j].abs() > 1.0 {
                return Err(format!("correlation entry ({i},{j}) invalid"));
            }
        }
    }
    let mut l = vec![vec![0.0; n]; n];
    for j in 0..n {
        let d = c[j][j] - (0..j).map(|k| l[j][k] * l[j][k]).sum::<f64>();
        if d < -1e-10 {
            return Err("correlation matrix is not positive semidefinite".into());
        }
        let d = d.max(0.0).sqrt();
        l[j][j] = d;
        for i in j + 1..n {
            let v = c[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            l[i][j] = if d > 1e-12 {
                v / d
            } else if v.abs() > 1e-8 {
                return Err("correlation matrix is not positive semidefinite".into());
            } else {
                0.0
            };
        }
    }
    Ok(l)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticMarket {
    pub prices: PricePanel,
    pub context: ContextPanel,
    /// Regime of every price date; diagnostics only.
    pub regimes: Vec<usize>,
}

impl SyntheticMarket {
    pub fn market_data(&self, vol_window: usize) -> Result<MarketData> {
        MarketData::from_panels(&self.prices, &self.context, vol_window)
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect()
}

fn sample_index(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding: last non-zero entry
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Samples `n_days` price dates. Prices start at 1; the first regime is
/// drawn from the stationary distribution.
pub fn generate(spec: &RegimeSpec, n_days: usize, seed: u64) -> Result<SyntheticMarket> {
    spec.validate()?;
    if n_days == 0 {
        bail!(Config, "n_days must be at least 1");
    }
    let k = spec.regimes();
    let n = spec.assets();
    let chol: Vec<Vec<Vec<f64>>> = spec
        .correlations
        .iter()
        .map(|c| cholesky(c).expect("validated"))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut regimes = Vec::with_capacity(n_days);
    regimes.push(sample_index(&mut rng, &spec.stationary()));
    for t in 1..n_days {
        let prev = regimes[t - 1];
        regimes.push(sample_index(&mut rng, &spec.transition[prev]));
    }

    let mut prices = vec![vec![1.0; n_days]; n];
    let mut clamped = 0usize;
    for t in 1..n_days {
        let r = regimes[t];
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for a in 0..n {
            let e: f64 = (0..=a).map(|j| chol[r][a][j] * z[j]).sum();
            let mut ret = spec.means[r][a] + spec.vols[r][a] * e;
            if ret < RETURN_FLOOR {
                ret = RETURN_FLOOR;
                clamped += 1;
            }
            prices[a][t] = prices[a][t - 1] * (1.0 + ret);
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} synthetic returns clamped at {RETURN_FLOOR}");
    }

    let nu = spec.context_noise;
    let alpha = spec.context_smoothing;
    let mut context = vec![vec![0.0; n_days]; k];
    let mut smooth = vec![0.0; k];
    for t in 0..n_days {
        for (j, s) in smooth.iter_mut().enumerate() {
            let ind = f64::from(u8::from(regimes[t] == j));
            *s = if t == 0 { ind } else { alpha * ind + (1.0 - alpha) * *s };
            let noise: f64 = rng.sample(StandardNormal);
            context[j][t] = (1.0 - nu) * *s + nu * noise;
        }
    }

    let dates = business_days(spec.start, n_days);
    let mut assets = vec![Series::new("risky", prices[0].clone())];
    assets.extend((1..n).map(|a| Series::new(format!("hedge{a}"), prices[a].clone())));
    let prices = PricePanel::new(dates.clone(), assets, 0, (1..n).collect())?;
    let context = ContextPanel::new(
        dates,
        context
            .into_iter()
            .enumerate()
            .map(|(j, v)| Series::new(format!("regime{j}"), v))
            .collect(),
    )?;
    Ok(SyntheticMarket {
        prices,
        context,
        regimes,
    })
}

/// Symmetric chain leaving each regime with probability `1/duration`.
pub fn switching_chain(regimes: usize, mean_duration: f64) -> Vec<Vec<f64>> {
    if regimes == 1 {
        return vec![vec![1.0]];
    }
    let leave = (1.0 / mean_duration).clamp(0.0, 1.0);
    let other = leave / (regimes - 1) as f64;
    (0..regimes)
        .map(|i| (0..regimes).map(|j| if i == j { 1.0 - leave } else { other }).collect())
        .collect()
}

/// Two regimes over four strategies; hedge 1 wins in regime 0, hedge 2 in
/// regime 1, hedges 3–4 bleed. Daily noise dominates the drift so the
/// regime is hard to read off returns but plain in the context.
pub fn separable(mean_duration: f64, context_noise: f64) -> RegimeSpec {
    let vol = vec![0.01, 0.008, 0.008, 0.008, 0.008];
    RegimeSpec {
        means: vec![
            vec![0.0003, 0.003, -0.003, -0.001, -0.001],
            vec![0.0003, -0.003, 0.003, -0.001, -0.001],
        ],
        vols: vec![vol.clone(), vol],
        correlations: vec![identity(5), identity(5)],
        transition: switching_chain(2, mean_duration),
        context_noise,
        context_smoothing: 1.0,
        start: default_start(),
    }
}

/// Calm regime with a slow bleed on hedges; rare crashes where the risky
/// asset falls hard and the hedges pay.
pub fn crisis() -> RegimeSpec {
    let calm_corr = identity(5);
    let mut crash_corr = identity(5);
    for i in 1..5 {
        for j in 1..5 {
            if i != j {
                crash_corr[i][j] = 0.5;
            }
        }
    }
    RegimeSpec {
        means: vec![
            vec![0.0005, -0.0002, -0.0002, -0.0001, 0.0],
            vec![-0.004, 0.003, 0.002, 0.001, 0.0],
        ],
        vols: vec![vec![0.009, 0.004, 0.004, 0.003, 0.002], vec![0.03, 0.01, 0.01, 0.008, 0.004]],
        correlations: vec![calm_corr, crash_corr],
        transition: vec![vec![0.995, 0.005], vec![0.05, 0.95]],
        context_noise: 0.3,
        context_smoothing: 0.5,
        start: default_start(),
    }
}

/// One constant regime: hedge 1 drifts +10 %/yr, the others −10 %/yr,
/// without noise.
pub fn dominant() -> RegimeSpec {
    let d = 0.1 / 250.0;
    RegimeSpec {
        means: vec![vec![0.0, d, -d, -d, -d]],
        vols: vec![vec![0.0; 5]],
        correlations: vec![identity(5)],
        transition: vec![vec![1.0]],
        context_noise: 0.0,
        context_smoothing: 1.0,
        start: default_start(),
    }
}

pub const PRESET_NAMES: [&str; 4] = ["separable", "crisis", "no-signal", "dominant"];

/// Named presets; the list is stable.
pub fn canned_scenarios() -> Vec<(&'static str, RegimeSpec)> {
    vec![
        ("separable", separable(10.0, 0.0)),
        ("crisis", crisis()),
        ("no-signal", separable(10.0, 1.0)),
        ("dominant", dominant()),
    ]
}

pub fn preset(name: &str) -> Result<RegimeSpec> {
    match canned_scenarios().into_iter().find(|(n, _)| *n == name) {
        Some((_, s)) => Ok(s),
        None => bail!(Config, "unknown synthetic preset {name:?}; known: {}", PRESET_NAMES.join(", ")),
    }
}
