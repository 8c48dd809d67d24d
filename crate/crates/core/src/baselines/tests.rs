use chrono::NaiveDate;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::features::{business_days, RollingVol, Series};

fn market(strategies: Vec<Vec<f64>>, start: NaiveDate) -> MarketData {
    let n = strategies[0].len();
    MarketData {
        dates: business_days(start, n),
        risky_name: "risky".into(),
        risky: vec![0.0; n],
        vols: strategies
            .iter()
            .map(|_| RollingVol {
                window: 2,
                values: vec![0.0; n - 1],
            })
            .collect(),
        strategies: strategies
            .into_iter()
            .enumerate()
            .map(|(i, v)| Series::new(format!("s{i}"), v))
            .collect(),
        context: vec![],
    }
}

fn jan(year: i32) -> NaiveDate {
    NaiveDate::from_ymd_opt(year, 1, 3).unwrap()
}

fn input(mu: Vec<f64>, sigma: Vec<Vec<f64>>, r_min: Option<f64>) -> MarkowitzInput {
    MarkowitzInput { mu, sigma, r_min }
}

#[test]
fn markowitz_symmetric_pair() {
    let w = markowitz_weights(&input(vec![0.1, 0.1], vec![vec![1.0, 0.0], vec![0.0, 1.0]], Some(0.05))).unwrap();
    assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
}

#[test]
fn markowitz_diagonal_hand_case() {
    // min w² + 4(1−w)² ⇒ w = 4/5.
    let w = markowitz_weights(&input(vec![0.1, 0.1], vec![vec![1.0, 0.0], vec![0.0, 4.0]], None)).unwrap();
    assert!((w[0] - 0.8).abs() < 1e-12 && (w[1] - 0.2).abs() < 1e-12);
}

#[test]
fn markowitz_binding_return_constraint() {
    // Variance prefers asset 0, the return floor forces weight onto asset 1:
    // μᵀw = 0.0·w0 + 0.2·w1 ≥ 0.15 ⇒ w1 = 0.75.
    let w = markowitz_weights(&input(vec![0.0, 0.2], vec![vec![1.0, 0.0], vec![0.0, 4.0]], Some(0.15))).unwrap();
    assert!((w[1] - 0.75).abs() < 1e-12, "{w:?}");
}

#[test]
fn markowitz_infeasible_floor() {
    let r = markowitz_weights(&input(vec![0.1, 0.05], vec![vec![1.0, 0.0], vec![0.0, 1.0]], Some(0.2)));
    assert!(matches!(r, Err(Error::Infeasible(_))));
}

fn random_instance(rng: &mut ChaCha8Rng, l: usize) -> MarkowitzInput {
    // Σ = AᵀA/l + small ridge: PSD by construction.
    let a: Vec<Vec<f64>> = (0..l).map(|_| (0..l).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let sigma = (0..l)
        .map(|i| {
            (0..l)
                .map(|j| (0..l).map(|k| a[k][i] * a[k][j]).sum::<f64>() / l as f64 + if i == j { 0.01 } else { 0.0 })
                .collect()
        })
        .collect();
    let mu: Vec<f64> = (0..l).map(|_| rng.random_range(-0.1..0.2)).collect();
    let lo = mu.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let r_min = if rng.random_bool(0.2) { None } else { Some(rng.random_range(lo..hi)) };
    input(mu, sigma, r_min)
}

/// Best objective over the simplex grid with step 1/100 (feasible points only).
fn grid_oracle(inp: &MarkowitzInput) -> f64 {
    let l = inp.mu.len();
    let mut best = f64::INFINITY;
    let mut w = vec![0usize; l];
    fn rec(k: usize, left: usize, w: &mut Vec<usize>, inp: &MarkowitzInput, best: &mut f64) {
        let l = w.len();
        if k == l - 1 {
            w[k] = left;
            let x: Vec<f64> = w.iter().map(|&v| v as f64 / 100.0).collect();
            let ret: f64 = inp.mu.iter().zip(&x).map(|(m, v)| m * v).sum();
            if inp.r_min.is_none_or(|r| ret >= r) {
                *best = best.min(inp.objective(&x));
            }
            return;
        }
        for v in 0..=left {
            w[k] = v;
            rec(k + 1, left - v, w, inp, best);
        }
    }
    rec(0, 100, &mut w, inp, &mut best);
    best
}

#[test]
fn markowitz_beats_the_grid_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..40 {
        let inp = random_instance(&mut rng, 3 + case % 2);
        let w = markowitz_weights(&inp).unwrap();
        assert!(w.iter().all(|&x| x >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        if let Some(r) = inp.r_min {
            assert!(inp.mu.iter().zip(&w).map(|(m, x)| m * x).sum::<f64>() >= r - 1e-8);
        }
        let oracle = grid_oracle(&inp);
        assert!(inp.objective(&w) <= oracle + 1e-4, "case {case}: {} vs {oracle}", inp.objective(&w));
    }
}

#[test]
fn estimates_are_annualised_and_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let strategies: Vec<Vec<f64>> = (0..3).map(|_| (0..300).map(|_| rng.random_range(-0.01..0.01)).collect()).collect();
    let data = market(strategies.clone(), jan(2005));
    let inp = estimate_markowitz(&data, 299, 250, None).unwrap();
    let window = &strategies[0][50..300];
    let mean = window.iter().sum::<f64>() / 250.0;
    assert!((inp.mu[0] - mean * 250.0).abs() < 1e-12);
    let var = window.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 250.0 * 250.0;
    assert!((inp.sigma[0][0] - var).abs() < 1e-12);
    assert!((inp.r_min.unwrap() - inp.mu.iter().sum::<f64>() / 3.0).abs() < 1e-15);
    assert!(matches!(estimate_markowitz(&data, 100, 250, None), Err(Error::Range(_))));
}

#[test]
fn winner_and_loser_hand_cases() {
    // Cumulative returns over a 2-day window: s0 −1%, s1 +4%, s2 +2%.
    let s0 = vec![0.0, -0.01, 0.0];
    let s1 = vec![0.0, 0.02, 1.04 / 1.02 - 1.0];
    let s2 = vec![0.0, 0.0, 0.02];
    let data = market(vec![s0, s1, s2], jan(2010));
    let cum = trailing_cumulative(&data, 2, 2).unwrap();
    assert!((cum[1] - 0.04).abs() < 1e-12, "{cum:?}");
    assert_eq!(follow_winner(&data, 2, 2).unwrap(), vec![0.0, 1.0, 0.0]);
    assert_eq!(follow_loser(&data, 2, 2).unwrap(), vec![1.0, 0.0, 0.0]);
}

#[test]
fn ties_go_to_the_lowest_index() {
    let data = market(vec![vec![0.01; 5], vec![0.0; 5], vec![0.01; 5]], jan(2010));
    assert_eq!(follow_winner(&data, 4, 5).unwrap(), vec![1.0, 0.0, 0.0]);
    let flat = market(vec![vec![0.0; 5]; 3], jan(2010));
    assert_eq!(follow_loser(&flat, 4, 5).unwrap(), vec![1.0, 0.0, 0.0]);
    assert_eq!(follow_winner(&flat, 4, 5).unwrap(), vec![1.0, 0.0, 0.0]);
}

#[test]
fn dominant_strategy_is_followed() {
    let data = market(vec![vec![0.001; 30], vec![0.002; 30], vec![-0.001; 30]], jan(2010));
    assert_eq!(follow_winner(&data, 29, 20).unwrap(), vec![0.0, 1.0, 0.0]);
    assert_eq!(follow_loser(&data, 29, 20).unwrap(), vec![0.0, 0.0, 1.0]);
    assert!(matches!(follow_winner(&data, 10, 20), Err(Error::Range(_))));
}

proptest! {
    #[test]
    fn winner_loser_duality(scores in prop::collection::vec(-3i32..3, 1..8)) {
        let s: Vec<f64> = scores.iter().map(|&v| v as f64 / 10.0).collect();
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert_eq!(pick_winner(&s), pick_loser(&neg));
        prop_assert_eq!(pick_loser(&s), pick_winner(&neg));
    }
}

#[test]
fn annual_calendar_on_two_years() {
    let n = 520;
    let data = market(vec![vec![0.001; n], vec![0.0; n]], jan(2004));
    let year_end = data.dates.iter().rposition(|d| *d < jan(2006)).unwrap();
    let cfg = BaselineConfig {
        lookback: 5,
        ..BaselineConfig::default()
    };
    let d = baseline_allocator(BaselineKind::Winner, &data, 10, year_end, &cfg).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d[1].date, NaiveDate::from_ymd_opt(2005, 1, 3).unwrap());
    assert_eq!(d[0].decision.leverage, 1.0);
    let monthly = rebalance_dates(&data, 0, year_end, Rebalance::Monthly);
    assert_eq!(monthly.len(), 24);
}

#[test]
fn risky_baseline_has_no_overlay() {
    let data = market(vec![vec![0.001; 300], vec![0.0; 300]], jan(2004));
    let d = baseline_allocator(BaselineKind::Risky, &data, 0, 299, &BaselineConfig::default()).unwrap();
    assert!(d.iter().all(|x| x.decision.leverage == 0.0));
}

#[test]
fn baselines_are_pure_and_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let strategies: Vec<Vec<f64>> = (0..3).map(|_| (0..800).map(|_| rng.random_range(-0.01..0.012)).collect()).collect();
    let data = market(strategies, jan(2004));
    let cfg = BaselineConfig::default();
    for kind in BaselineKind::ALL {
        let a = baseline_allocator(kind, &data, 300, 700, &cfg).unwrap();
        assert_eq!(a, baseline_allocator(kind, &data, 300, 700, &cfg).unwrap());
        // Garbage after the last decision date changes nothing.
        let last = data.dates.binary_search(&a.last().unwrap().date).unwrap();
        let mut future = data.clone();
        for s in &mut future.strategies {
            s.values[last + 1..].fill(0.5);
        }
        assert_eq!(a, baseline_allocator(kind, &future, 300, 700, &cfg).unwrap());
        for d in &a {
            d.decision.validate(3.0).unwrap();
        }
    }
}

#[test]
fn weights_csv_layout() {
    let data = market(vec![vec![0.001; 300], vec![0.0; 300]], jan(2004));
    let d = baseline_allocator(BaselineKind::Winner, &data, 260, 260, &BaselineConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.csv");
    write_weights_csv(&path, &[("winner".into(), data.strategy_names(), d)]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        text,
        "date,model,strategy,weight\n2005-01-03,winner,s0,1\n2005-01-03,winner,s1,0\n"
    );
}
