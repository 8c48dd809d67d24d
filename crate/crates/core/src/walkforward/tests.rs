use chrono::NaiveDate;

use super::*;
use crate::baselines::baseline_allocator;
use crate::features::business_days;
use crate::policy::BranchConfig;
use crate::synthgen::{generate, preset};

fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

fn calendar(end: NaiveDate) -> Vec<NaiveDate> {
    business_days(ymd(2000, 1, 3), 6000).into_iter().take_while(|d| *d <= end).collect()
}

#[test]
fn fourteen_splits_to_mid_2020() {
    let cal = calendar(ymd(2020, 6, 19));
    let plan = make_splits(&cal, &PlanConfig::default()).unwrap();
    assert_eq!(plan.len(), 14);
    for (k, s) in plan.splits.iter().enumerate() {
        assert_eq!(*s.train.start(), 0);
        assert_eq!(*s.train.end() + 1, *s.test.start());
        if k > 0 {
            let prev = &plan.splits[k - 1];
            assert_eq!(*prev.test.end() + 1, *s.test.start());
            assert_eq!(*s.train.end(), *prev.test.end());
        }
    }
    let w = plan.test_window();
    assert_eq!(cal[*w.start()], ymd(2007, 1, 1));
    assert_eq!(cal[*w.end()], ymd(2020, 6, 19));
    assert_eq!(cal[*plan.splits[13].test.start()], ymd(2020, 1, 1));
}

#[test]
fn two_splits_to_end_2008() {
    let cal = calendar(ymd(2020, 6, 19));
    let cfg = PlanConfig {
        end: Some(ymd(2008, 12, 31)),
        ..PlanConfig::default()
    };
    let plan = make_splits(&cal, &cfg).unwrap();
    assert_eq!(plan.len(), 2);
    assert_eq!(cal[*plan.test_window().end()], ymd(2008, 12, 31));
}

#[test]
fn short_history_is_a_config_error() {
    let cal = calendar(ymd(2020, 6, 19));
    let early = PlanConfig {
        first_test_year: 2005,
        ..PlanConfig::default()
    };
    assert!(matches!(make_splits(&cal, &early), Err(Error::Config(_))));
    let late: Vec<NaiveDate> = cal.iter().copied().filter(|d| *d >= ymd(2003, 1, 1)).collect();
    assert!(matches!(make_splits(&late, &PlanConfig::default()), Err(Error::Config(_))));
    let ends_early = calendar(ymd(2006, 6, 1));
    assert!(matches!(make_splits(&ends_early, &PlanConfig::default()), Err(Error::Config(_))));
}

fn small_setup() -> WalkforwardSetup {
    WalkforwardSetup {
        observation: ObservationSpec {
            lags: vec![0, 1, 2, 5],
            vol_window: 5,
            context_lags: vec![0, 1],
        },
        architecture: Architecture {
            asset: BranchConfig {
                filters: 2,
                kernel: 2,
                hidden: 4,
            },
            context: BranchConfig {
                filters: 2,
                kernel: 1,
                hidden: 4,
            },
            merge: 4,
            ..Architecture::default()
        },
        baseline: BaselineConfig {
            lookback: 60,
            estimation_window: 60,
            ..BaselineConfig::default()
        },
        ..WalkforwardSetup::default()
    }
}

fn small_plan() -> PlanConfig {
    PlanConfig {
        first_test_year: 2002,
        min_train_years: 2,
        ..PlanConfig::default()
    }
}

/// About 3.2 years of the separable preset.
fn synthetic(seed: u64) -> MarketData {
    let m = generate(&preset("separable").unwrap(), 830, seed).unwrap();
    MarketData::from_panels(&m.prices, &m.context, 5).unwrap()
}

fn drl(iterations: usize) -> ModelSpec {
    ModelSpec::Drl {
        name: "drl".into(),
        trainer: TrainerConfig {
            max_iterations: iterations,
            patience: iterations,
            seed: 7,
            ..TrainerConfig::default()
        },
    }
}

#[test]
fn risky_model_replays_the_risky_asset() {
    let data = synthetic(1);
    let plan = make_splits(&data.dates, &small_plan()).unwrap();
    assert_eq!(plan.len(), 2);
    let r = run_walkforward(&ModelSpec::Baseline(BaselineKind::Risky), &data, &small_setup(), &plan).unwrap();
    let w = plan.test_window();
    assert_eq!(r.path.dates[1..], data.dates[w.clone()]);
    let mut v = 1.0;
    for (k, s) in w.enumerate() {
        v *= 1.0 + data.risky[s];
        assert_eq!(r.path.values[k + 1], v);
    }
}

#[test]
fn stitched_baseline_matches_manual_runs() {
    let data = synthetic(2);
    let setup = small_setup();
    let plan = make_splits(&data.dates, &small_plan()).unwrap();
    let r = run_walkforward(&ModelSpec::Baseline(BaselineKind::Winner), &data, &setup, &plan).unwrap();
    let delay = setup.episode.delay();
    let mut manual = Vec::new();
    for s in &plan.splits {
        let t = *s.test.start() - delay;
        manual.extend(baseline_allocator(BaselineKind::Winner, &data, t, t, &setup.baseline).unwrap());
    }
    assert_eq!(r.decisions, manual);
    assert_eq!(r.splits.len(), 2);
}

#[test]
fn test_data_never_reaches_training() {
    let data = synthetic(3);
    let setup = small_setup();
    let plan = make_splits(&data.dates, &small_plan()).unwrap();
    let model = drl(8);
    let a = run_walkforward(&model, &data, &setup, &plan).unwrap();
    // Scramble everything after the first split's training range.
    let cut = *plan.splits[0].train.end();
    let mut probe = data.clone();
    for s in probe.strategies.iter_mut().chain(probe.context.iter_mut()) {
        for (i, v) in s.values.iter_mut().enumerate().skip(cut + 1) {
            *v = 0.03 * ((i * 7919) % 13) as f64 - 0.18;
        }
    }
    for (i, v) in probe.risky.iter_mut().enumerate().skip(cut + 1) {
        *v = -0.01 * (i % 3) as f64;
    }
    let b = run_walkforward(&model, &probe, &setup, &plan).unwrap();
    assert_eq!(a.splits[0].params, b.splits[0].params);
    assert_eq!(a.splits[0].log.len(), b.splits[0].log.len());
    // later splits see the probe in training, so they may differ
}

#[test]
fn split_seeds_and_determinism() {
    let data = synthetic(4);
    let setup = small_setup();
    let plan = make_splits(&data.dates, &small_plan()).unwrap();
    let a = run_walkforward(&drl(5), &data, &setup, &plan).unwrap();
    let b = run_walkforward(&drl(5), &data, &setup, &plan).unwrap();
    assert_eq!(a.path, b.path);
    assert_eq!(a.decisions, b.decisions);
    // seed = master + split index
    assert_ne!(a.splits[0].params, a.splits[1].params);
}

#[test]
fn failed_split_aborts() {
    let data = synthetic(5);
    let mut setup = small_setup();
    // 600-day lags cannot fit in the first training range.
    setup.observation.lags = vec![0, 600];
    let plan = make_splits(&data.dates, &small_plan()).unwrap();
    assert!(matches!(run_walkforward(&drl(2), &data, &setup, &plan), Err(Error::Range(_))));
}

#[test]
fn grid_has_sixteen_distinct_cells() {
    let g = ablation_grid();
    assert_eq!(g.len(), 16);
    for (i, a) in g.iter().enumerate() {
        assert!(g[i + 1..].iter().all(|b| b != a));
    }
    assert_eq!(g.iter().filter(|c| c.lag == 1).count(), 8);
}

#[test]
fn ranking_sorts_within_lag_groups() {
    let cells: Vec<(AblationCell, f64)> = ablation_grid()
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c, ((i * 5) % 16) as f64 / 10.0))
        .collect();
    let rows = rank_cells(cells);
    assert!(rows[..8].iter().all(|r| r.cell.lag == 1));
    assert!(rows[8..].iter().all(|r| r.cell.lag == 0));
    for g in [&rows[..8], &rows[8..]] {
        assert!(g.windows(2).all(|w| w[0].performance >= w[1].performance));
    }
    assert_eq!(rows.iter().map(|r| r.rank).collect::<Vec<_>>(), (1..=16).collect::<Vec<_>>());
}

#[test]
fn ablation_end_to_end_small() {
    let data = synthetic(6);
    let setup = small_setup();
    let plan = make_splits(&data.dates, &small_plan()).unwrap();
    let base = TrainerConfig {
        max_iterations: 3,
        patience: 3,
        ..TrainerConfig::default()
    };
    let rows = ablation_matrix(&data, &setup, &plan, &base).unwrap();
    assert_eq!(rows.len(), 16);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ablation.csv");
    write_ablation_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "model,reward,adversarial,context,day_lag,performance");
    assert_eq!(lines.len(), 17);
    assert!(lines[1].starts_with("1,"));
    assert!(lines[1..9].iter().all(|l| l.split(',').nth(4) == Some("yes")));
}

#[test]
fn context_off_cell_keeps_context_params_zero() {
    let data = synthetic(7);
    let plan = make_splits(&data.dates, &small_plan()).unwrap();
    let cell = AblationCell {
        reward: RewardKind::NetProfit,
        adversarial: true,
        context: false,
        lag: 1,
    };
    let r = run_cell(cell, &data, &small_setup(), &plan, &TrainerConfig {
        max_iterations: 4,
        patience: 4,
        ..TrainerConfig::default()
    })
    .unwrap();
    for s in &r.splits {
        for (name, t) in s.params.as_ref().unwrap().iter() {
            if crate::policy::is_context_param(name) {
                assert!(t.data().iter().all(|v| *v == 0.0), "{name}");
            }
        }
    }
}

#[test]
fn comparison_windows() {
    let data = synthetic(8);
    let plan = make_splits(&data.dates, &small_plan()).unwrap();
    let setup = small_setup();
    let results: Vec<StitchedResult> = [BaselineKind::Risky, BaselineKind::Markowitz]
        .into_iter()
        .map(|k| run_walkforward(&ModelSpec::Baseline(k), &data, &setup, &plan).unwrap())
        .collect();
    let rows = comparison_rows(&results, &[0.5, 5.0]);
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].model, "risky");
    assert_eq!(rows[0].window_years, 0.5);
    let full = path_metrics("risky", 5.0, &results[0].path);
    assert_eq!(rows[2], full);
}
