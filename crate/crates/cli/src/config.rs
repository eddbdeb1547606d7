//! Experiment configuration files.
//!
//! One TOML file describes one experiment. The `seed` key is required; every
//! random stream in a run is derived from it.
//!
//! ```toml
//! seed = 42
//!
//! [schedule]
//! name = "linear-linear"
//!
//! [target]
//! kind = "mixture"
//! eta = 0.0
//! components = [{ weight = 1.0, mean = [0.0], covariance = [[1.0]] }]
//!
//! [g]
//! kind = "follmer"
//!
//! [integrator]
//! step_count = 1000
//! paths = 10000
//! ```

use std::path::{Path, PathBuf};

use follmer_core::analysis::SyntheticError;
use follmer_core::drift::{EstimatorSpec, FeatureBasis, GSpec};
use follmer_core::sde::{GridKind, IntegratorConfig, Scheme};
use follmer_core::target::TargetSpec;
use follmer_core::ScheduleSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub schedule: ScheduleSpec,
    pub target: TargetSpec,
    #[serde(default)]
    pub drift: DriftSpec,
    #[serde(default = "default_g")]
    pub g: GSpec,
    #[serde(default)]
    pub integrator: IntegratorSection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

fn default_g() -> GSpec {
    GSpec::Baseline
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriftSpec {
    /// Exact drift from the target's posterior oracle.
    #[default]
    Oracle,
    /// Estimator file written by `fit`; relative paths resolve against the
    /// config file's directory.
    Estimated { estimator: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorSection {
    pub step_count: usize,
    pub paths: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub terminal_clip: f64,
    pub grid: GridKind,
    pub record_stride: usize,
    /// Also write the ensemble as CSV.
    pub csv: bool,
}

impl Default for IntegratorSection {
    fn default() -> Self {
        Self {
            step_count: 1000,
            paths: 10_000,
            t_start: 0.0,
            t_end: 1.0,
            terminal_clip: 1e-3,
            grid: GridKind::Uniform,
            record_stride: 1,
            csv: false,
        }
    }
}

impl IntegratorSection {
    pub fn to_config(&self, scheme: Scheme, seed: u64) -> IntegratorConfig {
        IntegratorConfig {
            scheme,
            step_count: self.step_count,
            t_start: self.t_start,
            t_end: self.t_end,
            terminal_clip: self.terminal_clip,
            seed,
            grid: self.grid,
            record_stride: self.record_stride,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Regress the interpolant velocity.
    #[default]
    Interpolant,
    /// Regress the Föllmer control against the reference process.
    Follmer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub samples: usize,
    pub objective: Objective,
    pub estimator: EstimatorSpec,
}

impl Default for FitSection {
    fn default() -> Self {
        Self {
            samples: 10_000,
            objective: Objective::Interpolant,
            estimator: EstimatorSpec::new(FeatureBasis::Affine),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Truncation `δ` of KL integrals.
    pub delta: f64,
    /// Constant drift-error level `L_t` used by `tune`.
    pub error_level: f64,
    /// Number of interior rows in the `tune` table.
    pub table_points: usize,
    /// Schedules compared by `invariance`.
    pub schedules: Vec<ScheduleSpec>,
    /// Synthetic score error; defaults to `0.1 e^{−r}` along the first axis.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_error: Option<SyntheticError>,
    pub r_max: f64,
    pub mc_samples: usize,
    /// Largest accepted relative gap in `invariance`.
    pub tolerance: f64,
    pub permutations: usize,
    pub bootstrap: usize,
    /// Paths used by `sample`'s energy test (subsampled when larger).
    pub energy_samples: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            delta: 1e-3,
            error_level: 1.0,
            table_points: 99,
            schedules: Vec::new(),
            score_error: None,
            r_max: 50.0,
            mc_samples: 1000,
            tolerance: 0.01,
            permutations: 200,
            bootstrap: 200,
            energy_samples: 5000,
        }
    }
}

impl ExperimentConfig {
    /// Parses a config, letting `seed_override` stand in for or replace the
    /// file's seed.
    pub fn parse(text: &str, seed_override: Option<u64>) -> Result<Self, CliError> {
        let mut value: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if let Some(seed) = seed_override {
            let seed = i64::try_from(seed).map_err(|_| CliError::Config(format!("seed {seed} exceeds the TOML integer range")))?;
            value.insert("seed".into(), toml::Value::Integer(seed));
        }
        if !value.contains_key("seed") {
            return Err(CliError::Config(
                "missing required field `seed` (set it in the config or pass --seed)".into(),
            ));
        }
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, seed_override)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(CliError::config)
    }

    fn check(&self) -> Result<(), CliError> {
        if self.target.dim() == 0 {
            return Err(CliError::Config("target has no components".into()));
        }
        if self.integrator.paths == 0 {
            return Err(CliError::Config("integrator.paths must be positive".into()));
        }
        Ok(())
    }

    pub fn score_error(&self) -> SyntheticError {
        self.analysis.score_error.clone().unwrap_or_else(|| {
            let mut direction = vec![0.0; self.target.dim()];
            direction[0] = 1.0;
            SyntheticError::ExponentialDecay {
                amplitude: 0.1,
                direction,
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7

[schedule]
name = "linear-linear"

[target]
kind = "mixture"
components = [{ weight = 1.0, mean = [0.0], covariance = [[1.0]] }]
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL, None).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.drift, DriftSpec::Oracle);
        assert_eq!(cfg.g, GSpec::Baseline);
        assert_eq!(cfg.integrator, IntegratorSection::default());
    }

    #[test]
    fn seed_is_mandatory_and_overridable() {
        let text = MINIMAL.replace("seed = 7", "");
        let err = ExperimentConfig::parse(&text, None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("seed"));
        assert_eq!(ExperimentConfig::parse(&text, Some(3)).unwrap().seed, 3);
        assert_eq!(ExperimentConfig::parse(MINIMAL, Some(9)).unwrap().seed, 9);
    }

    #[test]
    fn round_trip_is_identity() {
        let full = format!(
            "{MINIMAL}\n[g]\nkind = \"table\"\ntimes = [0.0, 1.0]\nvalues = [1.0, 0.5]\n\n[drift]\nkind = \"estimated\"\nestimator = \"est.json\"\n\n[analysis]\nschedules = [{{ name = \"linear-sqrt\" }}, {{ name = \"power\", beta_power = 2.0, sigma_power = 1.0 }}]\nscore_error = {{ kind = \"scaled-score\", amplitude = 0.2 }}\n"
        );
        let cfg = ExperimentConfig::parse(&full, None).unwrap();
        let again = ExperimentConfig::parse(&cfg.to_toml().unwrap(), None).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[integrator]\nsteps = 10\n");
        assert!(ExperimentConfig::parse(&text, None).is_err());
    }
}
