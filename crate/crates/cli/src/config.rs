//! Experiment configuration: one TOML file, overridable by `--set` flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hedgeplan::baselines::{BaselineConfig, BaselineKind};
use hedgeplan::features::ObservationSpec;
use hedgeplan::policy::Architecture;
use hedgeplan::simulator::EpisodeConfig;
use hedgeplan::synthgen::PRESET_NAMES;
use hedgeplan::trainer::TrainerConfig;
use hedgeplan::walkforward::{ModelSpec, PlanConfig};

use crate::error::CliError;

pub const OUTPUT_ROOT_VAR: &str = "HEDGE_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Synthetic,
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: Source,
    // synthetic
    pub preset: String,
    pub seed: u64,
    pub days: usize,
    // files; relative paths are taken from the config file's directory
    pub prices: Option<PathBuf>,
    pub context: Option<PathBuf>,
    pub risky: String,
    pub strategies: Vec<String>,
    /// Context columns to use; all of them when empty.
    pub context_features: Vec<String>,
    /// Longest context gap (days) bridged by forward fill.
    pub fill_limit: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: Source::Synthetic,
            preset: "separable".into(),
            seed: 0,
            // 2000-01-03 .. mid-2020 in business days
            days: 5340,
            prices: None,
            context: None,
            risky: "risky".into(),
            strategies: Vec::new(),
            context_features: Vec::new(),
            fill_limit: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Results directory, relative to the output root.
    pub output_dir: PathBuf,
    /// Worker threads for split jobs.
    pub parallelism: usize,
    /// `risky`, `markowitz`, `winner`, `loser` or `drl`.
    pub models: Vec<String>,
    /// Trailing windows (years) of the comparison table.
    pub comparison_windows: Vec<f64>,
    /// Also run the 16-cell ablation grid (trainer settings as the base).
    pub ablation: bool,
    pub data: DataConfig,
    pub observation: ObservationSpec,
    pub architecture: Architecture,
    pub trainer: TrainerConfig,
    pub episode: EpisodeConfig,
    pub baseline: BaselineConfig,
    pub plan: PlanConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("runs/default"),
            parallelism: 1,
            models: ["risky", "markowitz", "winner", "loser", "drl"].map(String::from).to_vec(),
            comparison_windows: vec![3.0, 5.0],
            ablation: false,
            data: DataConfig::default(),
            observation: ObservationSpec::default(),
            architecture: Architecture::default(),
            trainer: TrainerConfig::default(),
            episode: EpisodeConfig::default(),
            baseline: BaselineConfig::default(),
            plan: PlanConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parses `value` as a TOML literal; bare words fall back to strings so
/// `--set data.preset=crisis` works unquoted.
fn parse_literal(value: &str) -> toml::Value {
    let probe = format!("v = {value}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key was just written"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Applies one `dotted.key=value` override to a TOML tree.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("--set expects key=value, got `{assignment}`")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("--set: bad key `{key}`")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("--set: `{part}` in `{key}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_literal(value.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text, applies overrides, validates.
    pub fn from_toml(text: &str, overrides: &[String], origin: &str) -> Result<Self, CliError> {
        let mut tree: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err(format!("{origin}: {e}")))?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: ExperimentConfig = if overrides.is_empty() {
            toml::from_str(text)
        } else {
            // re-render so the diagnostics still point at a line
            toml::from_str(&toml::to_string(&tree).expect("a parsed tree renders"))
        }
        .map_err(|e| config_err(format!("{origin}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative data paths are anchored at its
    /// directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text, overrides, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = std::path::absolute(base).unwrap_or_else(|_| base.to_path_buf());
        for p in [&mut cfg.data.prices, &mut cfg.data.context].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.parallelism == 0 {
            return Err(config_err("parallelism must be at least 1"));
        }
        if self.models.is_empty() && !self.ablation {
            return Err(config_err("nothing to run: no models and ablation = false"));
        }
        self.model_specs()?;
        if let Some(w) = self.comparison_windows.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(config_err(format!("comparison window must be positive, got {w}")));
        }
        match self.data.source {
            Source::Synthetic => {
                if !PRESET_NAMES.contains(&self.data.preset.as_str()) {
                    return Err(config_err(format!(
                        "unknown preset `{}` (have {})",
                        self.data.preset,
                        PRESET_NAMES.join(", ")
                    )));
                }
                if self.data.days < 2 {
                    return Err(config_err("data.days must be at least 2"));
                }
            }
            Source::Files => {
                if self.data.prices.is_none() {
                    return Err(config_err("data.source = files needs data.prices"));
                }
                if self.data.context.is_none() {
                    return Err(config_err("data.source = files needs data.context"));
                }
                if self.data.strategies.is_empty() {
                    return Err(config_err("data.source = files needs data.strategies"));
                }
            }
        }
        self.observation.validate()?;
        self.trainer.validate()?;
        self.episode.validate()?;
        self.baseline.validate()?;
        if (self.architecture.leverage_cap - self.episode.leverage_cap).abs() > 0.0 {
            return Err(config_err(format!(
                "architecture.leverage_cap {} differs from episode.leverage_cap {}",
                self.architecture.leverage_cap, self.episode.leverage_cap
            )));
        }
        Ok(())
    }

    pub fn model_specs(&self) -> Result<Vec<ModelSpec>, CliError> {
        let mut out: Vec<ModelSpec> = Vec::with_capacity(self.models.len());
        for name in &self.models {
            let spec = match BaselineKind::ALL.iter().find(|k| k.name() == name) {
                Some(&k) => ModelSpec::Baseline(k),
                None if name == "drl" => ModelSpec::Drl {
                    name: name.clone(),
                    trainer: self.trainer.clone(),
                },
                None => return Err(config_err(format!("unknown model `{name}` (risky, markowitz, winner, loser, drl)"))),
            };
            if out.iter().any(|m| m.name() == spec.name()) {
                return Err(config_err(format!("model `{name}` listed twice")));
            }
            out.push(spec);
        }
        Ok(out)
    }
}

/// Root for relative output paths: `$HEDGE_OUTPUT_ROOT`, else the working
/// directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn resolve_output(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        output_root().join(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text, &[], "snapshot").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn overrides_win() {
        let cfg = ExperimentConfig::from_toml(
            "[trainer]\nmax_iterations = 40\n",
            &[
                "trainer.max_iterations=7".into(),
                "trainer.patience=7".into(),
                "data.preset=crisis".into(),
                "models=[\"risky\"]".into(),
                "plan.end=\"2008-12-31\"".into(),
            ],
            "t",
        )
        .unwrap();
        assert_eq!(cfg.trainer.max_iterations, 7);
        assert_eq!(cfg.data.preset, "crisis");
        assert_eq!(cfg.models, vec!["risky"]);
        assert_eq!(cfg.plan.end, chrono::NaiveDate::from_ymd_opt(2008, 12, 31));
    }

    #[test]
    fn errors_are_config_errors_with_lines() {
        let err = ExperimentConfig::from_toml("[trainer]\nmax_iterations = \"x\"\n", &[], "bad.toml").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = ExperimentConfig::from_toml("[trainer]\nbogus = 1\n", &[], "bad.toml").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        for bad in ["models=[\"magic\"]", "data.preset=nope", "parallelism=0", "trainer", "trainer.lr.x=1"] {
            let r = ExperimentConfig::from_toml("", &[bad.into()], "t");
            assert!(matches!(r, Err(CliError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn bare_words_become_strings() {
        assert_eq!(parse_literal("crisis"), toml::Value::String("crisis".into()));
        assert_eq!(parse_literal("3"), toml::Value::Integer(3));
        assert_eq!(parse_literal("0.5"), toml::Value::Float(0.5));
        assert_eq!(parse_literal("true"), toml::Value::Boolean(true));
    }
}
