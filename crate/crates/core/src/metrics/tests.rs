use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check;

// Textbook formulas, evaluated the naive way.
fn oracle_mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn oracle_std(x: &[f64]) -> f64 {
    let m = oracle_mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

fn oracle_sharpe(r: &[f64]) -> f64 {
    oracle_mean(r) * 250.0 / (oracle_std(r) * 250f64.sqrt())
}

fn oracle_sortino(r: &[f64]) -> f64 {
    let neg: Vec<f64> = r.iter().copied().filter(|v| *v < 0.0).collect();
    oracle_mean(r) * 250.0 / (250f64.sqrt() * oracle_std(&neg))
}

fn oracle_mdd(p: &[f64]) -> f64 {
    let mut best = 0.0f64;
    for t in 0..p.len() {
        let rm = p[..=t].iter().cloned().fold(f64::MIN, f64::max);
        best = best.max((rm - p[t]) / rm);
    }
    best
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

#[test]
fn net_profit_cases() {
    assert_eq!(net_profit(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
    assert!(close(net_profit(&[1.0, 1.1, 0.99]).unwrap(), -0.01, 1e-12));
    assert_eq!(net_profit(&[5.0]).unwrap(), 0.0);
    assert!(net_profit::<f64>(&[]).is_err());
}

#[test]
fn sharpe_cases() {
    assert_eq!(annualized_sharpe(&[0.001; 30]), None);
    assert_eq!(annualized_sharpe(&[0.01, -0.01, 0.01, -0.01]), Some(0.0));
    assert_eq!(annualized_sharpe(&[0.01]), None);
    // mean 0.005, population variance 0.000125
    let r = [0.01, 0.00, 0.02, -0.01];
    let expected = 0.005 * 250.0 / (0.000125f64.sqrt() * 250f64.sqrt());
    assert!(close(annualized_sharpe(&r).unwrap(), expected, 1e-12));
    assert!(close(expected, 7.0710678118654755, 1e-12));
}

#[test]
fn sortino_cases() {
    assert_eq!(sortino(&[0.01, 0.02, 0.0]), None);
    assert_eq!(sortino(&[-0.01, 0.02, -0.01]), None);
    // mean 0.0025; negatives (−0.01, −0.03) have population std 0.01
    let r = [0.02, -0.01, 0.03, -0.03];
    let expected = 0.0025 * 250.0 / (250f64.sqrt() * 0.01);
    assert!(close(sortino(&r).unwrap(), expected, 1e-12));
}

#[test]
fn drawdown_cases() {
    assert_eq!(max_drawdown(&[1.0, 1.1, 1.2, 1.3]).unwrap(), 0.0);
    assert!(close(max_drawdown(&[100.0, 110.0, 99.0, 121.0]).unwrap(), 0.1, 1e-15));
    assert_eq!(max_drawdown(&[100.0, 50.0, 100.0]).unwrap(), 0.5);
    assert!(max_drawdown(&[1.0, 0.0]).is_err());
}

#[test]
fn annualized_return_compounds() {
    let v: Vec<f64> = (0..=250).map(|i| 1.0005f64.powi(i)).collect();
    assert!(close(annualized_return(&v).unwrap(), 1.0005f64.powi(250) - 1.0, 1e-12));
    assert_eq!(annualized_return(&[1.0]), None);
}

#[test]
fn metrics_match_oracles_on_random_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let n = rng.random_range(2..300);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-0.05..0.05)).collect();
        let mut values = vec![1.0];
        for x in &r {
            values.push(values.last().unwrap() * (1.0 + x));
        }
        let np = values.last().unwrap() / values[0] - 1.0;
        assert!(close(net_profit(&values).unwrap(), np, 1e-10));
        assert!(close(annualized_sharpe(&r).unwrap(), oracle_sharpe(&r), 1e-10));
        if r.iter().filter(|v| **v < 0.0).count() >= 2 {
            assert!(close(sortino(&r).unwrap(), oracle_sortino(&r), 1e-10));
        }
        assert!(close(max_drawdown(&values).unwrap(), oracle_mdd(&values), 1e-10));
    }
}

#[test]
fn reward_nodes_agree_with_metrics() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let n = rng.random_range(3..120);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-0.03..0.03)).collect();
        for kind in RewardKind::ALL {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::vector(r.clone()));
            let node = reward_node(&mut tape, kind, x).unwrap();
            let got = tape.value(node.node).item();
            match reward_value(kind, &r) {
                Some(v) => {
                    assert_eq!(node.kind, kind);
                    assert!(close(got, v, 1e-10), "{kind:?}: {got} vs {v}");
                }
                None => assert_eq!(node.kind, RewardKind::NetProfit),
            }
        }
    }
}

#[test]
fn degenerate_reward_falls_back() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.01, 0.02, 0.03]));
    let node = reward_node(&mut tape, RewardKind::Sortino, x).unwrap();
    assert_eq!(node.kind, RewardKind::NetProfit);
    assert!(close(tape.value(node.node).item(), 1.01 * 1.02 * 1.03 - 1.0, 1e-14));
}

#[test]
fn reward_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in RewardKind::ALL {
        for _ in 0..10 {
            let r: Vec<f64> = (0..25).map(|_| rng.random_range(-0.03..0.03)).collect();
            let err = grad_check(
                |tape: &mut Tape<f64>, ids: &[crate::autodiff::NodeId]| Ok(reward_node(tape, kind, ids[0])?.node),
                &[Tensor::vector(r)],
                1e-7,
            )
            .unwrap();
            assert!(err < 1e-4, "{kind:?}: {err}");
        }
    }
}

#[test]
fn net_profit_gradient_through_constant_exposure() {
    // Return stream risky + e·s; gradient with respect to the exposure e.
    let risky = [0.01, -0.02, 0.005, 0.0];
    let strat = [0.0, 0.03, -0.01, 0.02];
    let err = grad_check(
        |tape: &mut Tape<f64>, ids: &[crate::autodiff::NodeId]| {
            let s = tape.constant(Tensor::vector(strat.to_vec()));
            let r = tape.constant(Tensor::vector(risky.to_vec()));
            let es = tape.mul(s, ids[0])?;
            let port = tape.add(r, es)?;
            Ok(reward_node(tape, RewardKind::NetProfit, port)?.node)
        },
        &[Tensor::scalar(0.7)],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn metrics_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let rows = vec![
        MetricsRow {
            model: "drl".into(),
            window_years: 3.0,
            return_ann: Some(0.1),
            sharpe: Some(1.25),
            sortino: None,
            max_dd: Some(0.2),
        },
        MetricsRow {
            model: "risky".into(),
            window_years: 5.0,
            return_ann: Some(-0.03),
            sharpe: None,
            sortino: Some(-0.5),
            max_dd: Some(0.0),
        },
    ];
    write_metrics_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("model,window_years,return_ann,sharpe,sortino,max_dd\n"));
    assert!(text.contains("drl,3,0.1,1.25,NA,0.2"));
    assert_eq!(read_metrics_csv(&path).unwrap(), rows);
}

proptest! {
    #[test]
    fn sharpe_is_scale_invariant(
        r in prop::collection::vec(-0.05f64..0.05, 5..60),
        c in 0.1f64..10.0,
    ) {
        if let Some(a) = annualized_sharpe(&r) {
            let scaled: Vec<f64> = r.iter().map(|x| x * c).collect();
            let b = annualized_sharpe(&scaled).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn drawdown_bounds(r in prop::collection::vec(-0.2f64..0.2, 1..80)) {
        let mut v = vec![1.0];
        for x in &r {
            v.push(v.last().unwrap() * (1.0 + x));
        }
        let mdd = max_drawdown(&v).unwrap();
        prop_assert!((0.0..1.0).contains(&mdd));
        let declines = v.windows(2).any(|w| w[1] < w[0]);
        prop_assert_eq!(mdd == 0.0, !declines);
    }

    #[test]
    fn sortino_dominates_sharpe_when_premise_holds(r in prop::collection::vec(-0.03f64..0.04, 5..80)) {
        if let (Some(sh), Some(so)) = (annualized_sharpe(&r), sortino(&r)) {
            let neg: Vec<f64> = r.iter().copied().filter(|v| *v < 0.0).collect();
            if oracle_mean(&r) >= 0.0 && oracle_std(&neg) <= oracle_std(&r) {
                prop_assert!(so >= sh - 1e-12);
            }
        }
    }
}
