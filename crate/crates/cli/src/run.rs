use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};

use hedgeplan::baselines::{write_weights_csv, BaselineKind};
use hedgeplan::features::{align_calendars, read_context_csv, read_price_csv, MarketData};
use hedgeplan::metrics::write_metrics_csv;
use hedgeplan::policy::save_checkpoint;
use hedgeplan::simulator::write_path_csv;
use hedgeplan::synthgen::{generate, preset};
use hedgeplan::trainer::write_training_log;
use hedgeplan::walkforward::{
    ablation_matrix, comparison_rows, make_splits, run_walkforward, write_ablation_csv, ModelSpec, SplitPlan,
    StitchedResult, WalkforwardSetup,
};

use crate::config::{resolve_output, ExperimentConfig, Source};
use crate::error::CliError;

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const COMPARISON: &str = "comparison.csv";
pub const WEIGHTS: &str = "weights.csv";
pub const RISKY_PATH: &str = "risky_path.csv";
pub const SPLITS: &str = "splits.csv";
pub const ABLATION: &str = "ablation.csv";

pub fn load_data(cfg: &ExperimentConfig) -> Result<MarketData, CliError> {
    let d = &cfg.data;
    let vol = cfg.observation.vol_window;
    Ok(match d.source {
        Source::Synthetic => {
            let spec = preset(&d.preset)?;
            generate(&spec, d.days, d.seed)?.market_data(vol)?
        }
        Source::Files => {
            let (Some(prices), Some(context)) = (&d.prices, &d.context) else {
                return Err(CliError::Config("file source needs prices and context".into()));
            };
            for p in [prices, context] {
                if !p.is_file() {
                    return Err(CliError::Data(format!("missing data file {}", p.display())));
                }
            }
            let prices = read_price_csv(prices, &d.risky, &d.strategies)?;
            let context = read_context_csv(context, &d.context_features)?;
            let (prices, context) = align_calendars(&prices, &context, d.fill_limit)?;
            MarketData::from_panels(&prices, &context, vol)?
        }
    })
}

fn setup(cfg: &ExperimentConfig) -> WalkforwardSetup {
    WalkforwardSetup {
        observation: cfg.observation.clone(),
        architecture: cfg.architecture.clone(),
        episode: cfg.episode.clone(),
        baseline: cfg.baseline.clone(),
    }
}

fn write_splits_csv(path: &Path, results: &[StitchedResult]) -> Result<(), CliError> {
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x}"));
    let mut out = String::from(
        "model,split,train_start,train_end,test_start,test_end,train_reward,best_iteration,return_ann,sharpe,sortino,max_dd\n",
    );
    for r in results {
        for s in &r.splits {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.model,
                s.index,
                s.train_dates.0,
                s.train_dates.1,
                s.test_dates.0,
                s.test_dates.1,
                opt(s.train_reward),
                s.best_iteration.map_or_else(|| "NA".to_string(), |k| k.to_string()),
                opt(s.test.return_ann),
                opt(s.test.sharpe),
                opt(s.test.sortino),
                opt(s.test.max_dd),
            ));
        }
    }
    fs::write(path, out).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    results: &[StitchedResult],
    reference: &StitchedResult,
) -> Result<(), CliError> {
    for r in results {
        write_path_csv(dir.join(format!("stitched_path_{}.csv", r.model)), &r.path)?;
        for s in &r.splits {
            if let Some(p) = &s.params {
                write_training_log(dir.join(format!("training_log_{}_split{:02}.csv", r.model, s.index)), &s.log)?;
                save_checkpoint(dir.join(format!("checkpoint_{}_split{:02}.txt", r.model, s.index)), p)?;
            }
        }
    }
    write_path_csv(dir.join(RISKY_PATH), &reference.path)?;
    write_metrics_csv(dir.join(COMPARISON), &comparison_rows(results, &cfg.comparison_windows))?;
    let weights: Vec<_> = results
        .iter()
        .map(|r| (r.model.clone(), r.strategy_names.clone(), r.decisions.clone()))
        .collect();
    write_weights_csv(dir.join(WEIGHTS), &weights)?;
    write_splits_csv(&dir.join(SPLITS), results)
}

fn run_models(cfg: &ExperimentConfig, data: &MarketData, plan: &SplitPlan, dir: &Path) -> Result<(), CliError> {
    let setup = setup(cfg);
    let mut results = Vec::new();
    for model in cfg.model_specs()? {
        info!("walk-forward: {} over {} splits", model.name(), plan.len());
        results.push(run_walkforward(&model, data, &setup, plan)?);
    }
    let reference = run_walkforward(&ModelSpec::Baseline(BaselineKind::Risky), data, &setup, plan)?;
    write_outputs(dir, cfg, &results, &reference)?;
    if cfg.ablation {
        info!("ablation: 16 cells");
        let rows = ablation_matrix(data, &setup, plan, &cfg.trainer)?;
        write_ablation_csv(dir.join(ABLATION), &rows)?;
    }
    Ok(())
}

fn is_previous_run(dir: &Path) -> bool {
    dir.join(CONFIG_SNAPSHOT).is_file()
}

/// Runs every configured model and writes the results directory.
///
/// Everything is written to a sibling staging directory first and moved
/// into place at the end, so a failed run leaves no partial results.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let out = resolve_output(&cfg.output_dir);
    if out.exists() && !is_previous_run(&out) {
        return Err(CliError::Config(format!(
            "{} exists and is not a results directory; refusing to replace it",
            out.display()
        )));
    }
    let data = load_data(cfg)?;
    let plan = make_splits(&data.dates, &cfg.plan)?;
    info!(
        "{} days {}..{}, {} strategies, {} splits",
        data.len(),
        data.dates[0],
        data.dates[data.len() - 1],
        data.strategy_count(),
        plan.len()
    );
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    let staging = out.with_file_name(format!(".{name}.partial"));
    let io = |p: &Path, e: std::io::Error| CliError::Data(format!("{}: {e}", p.display()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| io(&staging, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let result = pool.install(|| {
        fs::write(staging.join(CONFIG_SNAPSHOT), cfg.to_toml()).map_err(|e| io(&staging, e))?;
        run_models(cfg, &data, &plan, &staging)
    });
    if let Err(e) = result {
        if let Err(rm) = fs::remove_dir_all(&staging) {
            warn!("could not remove {}: {rm}", staging.display());
        }
        return Err(e);
    }
    if out.exists() {
        fs::remove_dir_all(&out).map_err(|e| io(&out, e))?;
    }
    fs::rename(&staging, &out).map_err(|e| io(&out, e))?;
    Ok(out)
}
