//! Run configuration: one JSON document drives every CLI mode.
//!
//! Parsing is strict (unknown keys are fatal) and the documented defaults are
//! filled in by [`RunConfig::effective`], so the config actually used by a
//! run can be emitted, re-parsed, and compared bit for bit.

use crate::cost::{ModelProfile, ModelVariant};
use crate::error::{Error, Result};
use crate::expert::{ActivationKind, ActivationPlacement};
use crate::gating::GateLevel;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// What the run does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Wall-clock forward-pass comparison across the selection sweep.
    Bench,
    /// Analytic cost table for the profile.
    Flops,
    /// Merged-versus-mixed output gap sweep.
    Equiv,
    /// Backward passes against finite differences.
    Gradcheck,
    /// Small synthetic classification run training both layer kinds.
    TrainToy,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Bench => "bench",
            Mode::Flops => "flops",
            Mode::Equiv => "equiv",
            Mode::Gradcheck => "gradcheck",
            Mode::TrainToy => "train-toy",
        }
    }

    fn default_profile(self) -> ModelProfile {
        match self {
            // Full-size encoder profile so the printed table carries the
            // numbers the cost model is validated against.
            Mode::Flops => ModelProfile::bert_base(ModelVariant::Moe, GateLevel::Sequence, 4),
            // Small enough for sub-minute desk runs, large enough that the
            // expert matmuls dominate the timings.
            Mode::Bench | Mode::Equiv | Mode::Gradcheck => ModelProfile {
                layers: 1,
                d_model: 256,
                d_ff: 1024,
                seq_len: 128,
                vocab: 0,
                n_experts: 32,
                m_selected: 4,
                level: GateLevel::Sequence,
                variant: ModelVariant::Moe,
                r: 64,
            },
            Mode::TrainToy => ModelProfile {
                layers: 1,
                d_model: 8,
                d_ff: 8,
                seq_len: 1,
                vocab: 0,
                n_experts: 8,
                m_selected: 2,
                level: GateLevel::Sequence,
                variant: ModelVariant::Moe,
                r: 64,
            },
        }
    }

    fn default_m_sweep(self, profile: &ModelProfile) -> Vec<u64> {
        match self {
            Mode::Bench => vec![1, 2, 4, 8, 16],
            _ => vec![profile.m_selected],
        }
    }
}

/// Scalar width used by the wall-clock kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Knobs for the synthetic classification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyOptions {
    pub classes: usize,
    pub per_class: usize,
    pub noise: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub activation: ActivationKind,
    pub placement: ActivationPlacement,
}

impl Default for ToyOptions {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 50,
            noise: 0.6,
            epochs: 500,
            learning_rate: 0.5,
            activation: ActivationKind::Identity,
            placement: ActivationPlacement::OutsideExperts,
        }
    }
}

fn default_repeats() -> usize {
    10
}

fn default_warmup() -> usize {
    3
}

fn default_seed() -> u64 {
    42
}

fn default_renormalize() -> bool {
    true
}

/// Everything a run needs. Optional fields are filled by [`effective`]
/// according to the mode; the result is fully concrete and round-trips
/// through JSON unchanged.
///
/// [`effective`]: RunConfig::effective
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub profile: Option<ModelProfile>,
    #[serde(default)]
    pub m_sweep: Option<Vec<u64>>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub output_path: Option<String>,
    #[serde(default = "default_renormalize")]
    pub renormalize: bool,
    #[serde(default)]
    pub toy: ToyOptions,
}

impl RunConfig {
    /// Bare config for a mode, defaults everywhere.
    pub fn for_mode(mode: Mode) -> Self {
        Self {
            mode,
            profile: None,
            m_sweep: None,
            repeats: default_repeats(),
            warmup: default_warmup(),
            seed: default_seed(),
            precision: Precision::default(),
            output_path: None,
            renormalize: default_renormalize(),
            toy: ToyOptions::default(),
        }
    }

    /// Fills every optional field with its documented mode-dependent default
    /// and validates the result.
    pub fn effective(mut self) -> Result<RunConfig> {
        let profile = self.profile.take().unwrap_or_else(|| self.mode.default_profile());
        let m_sweep =
            self.m_sweep.take().unwrap_or_else(|| self.mode.default_m_sweep(&profile));
        let output_path = self
            .output_path
            .take()
            .unwrap_or_else(|| format!("meo_{}.csv", self.mode.name()));
        let resolved = RunConfig {
            profile: Some(profile),
            m_sweep: Some(m_sweep),
            output_path: Some(output_path),
            ..self
        };
        resolved.validate()?;
        Ok(resolved)
    }

    /// The profile of a resolved config. Panics on an unresolved one, which
    /// never leaves this module.
    pub fn profile(&self) -> &ModelProfile {
        self.profile.as_ref().expect("config was resolved by effective()")
    }

    pub fn m_sweep(&self) -> &[u64] {
        self.m_sweep.as_deref().expect("config was resolved by effective()")
    }

    pub fn output_path(&self) -> &str {
        self.output_path.as_deref().expect("config was resolved by effective()")
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(profile) = &self.profile {
            profile.validate()?;
            if let Some(sweep) = &self.m_sweep {
                if sweep.is_empty() {
                    return Err(Error::InvalidConfig("m_sweep must not be empty".into()));
                }
                for &m in sweep {
                    if m == 0 {
                        return Err(Error::InvalidConfig(
                            "m_sweep value 0 is not a valid selection count".into(),
                        ));
                    }
                    if m > profile.n_experts {
                        return Err(Error::InvalidConfig(format!(
                            "m_sweep value {m} exceeds n_experts = {}",
                            profile.n_experts
                        )));
                    }
                }
            }
        }
        if self.mode == Mode::Bench {
            if self.repeats < 3 {
                return Err(Error::InvalidConfig(format!(
                    "bench needs repeats >= 3, got {}",
                    self.repeats
                )));
            }
            if self.warmup < 3 {
                return Err(Error::InvalidConfig(format!(
                    "bench needs warmup >= 3, got {}",
                    self.warmup
                )));
            }
        }
        if self.mode == Mode::TrainToy {
            let t = &self.toy;
            if t.classes < 2 {
                return Err(Error::InvalidConfig(format!(
                    "toy task needs at least 2 classes, got {}",
                    t.classes
                )));
            }
            if t.per_class == 0 || t.epochs == 0 {
                return Err(Error::InvalidConfig(
                    "toy per_class and epochs must be at least 1".into(),
                ));
            }
            if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "toy learning_rate {} must be positive and finite",
                    t.learning_rate
                )));
            }
            if !(t.noise >= 0.0 && t.noise.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "toy noise {} must be nonnegative and finite",
                    t.noise
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses a config document from text. Error messages carry the offending
/// key or value as reported by the JSON parser.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    serde_json::from_str(text).map_err(|e| Error::Json(e.to_string()))
}

/// Reads and parses a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Json(msg) => Error::Json(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_documented_defaults() {
        let cfg = parse_config_str("{\"mode\":\"flops\"}").unwrap().effective().unwrap();
        assert_eq!(cfg.repeats, 10);
        assert_eq!(cfg.warmup, 3);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.precision, Precision::F32);
        assert!(cfg.renormalize);
        assert_eq!(cfg.output_path(), "meo_flops.csv");
        let p = cfg.profile();
        assert_eq!((p.layers, p.d_model, p.d_ff), (12, 768, 3072));
        assert_eq!(p.r, 64);
        assert_eq!(cfg.m_sweep(), [4]);
    }

    #[test]
    fn bench_defaults_sweep_the_selection_counts() {
        let cfg = parse_config_str("{\"mode\":\"bench\"}").unwrap().effective().unwrap();
        assert_eq!(cfg.m_sweep(), [1, 2, 4, 8, 16]);
        let p = cfg.profile();
        assert_eq!((p.d_model, p.d_ff, p.seq_len, p.n_experts), (256, 1024, 128, 32));
        assert_eq!(cfg.output_path(), "meo_bench.csv");
    }

    #[test]
    fn effective_config_round_trips_unchanged() {
        for mode in ["bench", "flops", "equiv", "gradcheck", "train-toy"] {
            let cfg = parse_config_str(&format!("{{\"mode\":\"{mode}\"}}"))
                .unwrap()
                .effective()
                .unwrap();
            let back = parse_config_str(&cfg.to_json()).unwrap();
            assert_eq!(back, cfg, "{mode}");
            // Resolving again must be a fixed point.
            assert_eq!(back.effective().unwrap(), cfg, "{mode}");
        }
    }

    #[test]
    fn unknown_keys_are_fatal_and_named() {
        let err = parse_config_str("{\"mode\":\"flops\",\"bogus\":1}").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err =
            parse_config_str("{\"mode\":\"train-toy\",\"toy\":{\"classez\":2}}").unwrap_err();
        assert!(err.to_string().contains("classez"), "{err}");
    }

    #[test]
    fn oversized_sweep_value_is_named() {
        let cfg = parse_config_str("{\"mode\":\"bench\",\"m_sweep\":[1,33]}").unwrap();
        let err = cfg.effective().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("33") && msg.contains("32"), "{msg}");
    }

    #[test]
    fn bench_floor_on_repeats_and_warmup() {
        let cfg = parse_config_str("{\"mode\":\"bench\",\"repeats\":2}").unwrap();
        assert!(cfg.effective().is_err());
        let cfg = parse_config_str("{\"mode\":\"bench\",\"warmup\":1}").unwrap();
        assert!(cfg.effective().is_err());
        // The floors apply to bench only.
        let cfg = parse_config_str("{\"mode\":\"flops\",\"repeats\":1,\"warmup\":0}").unwrap();
        assert!(cfg.effective().is_ok());
    }

    #[test]
    fn toy_options_validate() {
        let cfg = parse_config_str("{\"mode\":\"train-toy\",\"toy\":{\"classes\":1}}").unwrap();
        assert!(cfg.effective().is_err());
        let cfg =
            parse_config_str("{\"mode\":\"train-toy\",\"toy\":{\"learning_rate\":0.0}}").unwrap();
        assert!(cfg.effective().is_err());
    }

    #[test]
    fn missing_file_error_names_the_path() {
        let err = parse_config(Path::new("/nonexistent/meo.json")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/meo.json"), "{err}");
    }

    #[test]
    fn mode_names_use_kebab_case() {
        let cfg = parse_config_str("{\"mode\":\"train-toy\"}").unwrap();
        assert_eq!(cfg.mode, Mode::TrainToy);
        assert_eq!(cfg.mode.name(), "train-toy");
        assert!(parse_config_str("{\"mode\":\"train_toy\"}").is_err());
    }

    #[test]
    fn explicit_profile_overrides_the_default() {
        let text = "{\"mode\":\"flops\",\"profile\":{\"layers\":4,\"d_model\":512,\
                    \"d_ff\":2048,\"seq_len\":128,\"vocab\":30522,\"n_experts\":32,\
                    \"m_selected\":8,\"level\":\"token\",\"variant\":\"moe\"}}";
        let cfg = parse_config_str(text).unwrap().effective().unwrap();
        assert_eq!(cfg.profile().d_model, 512);
        assert_eq!(cfg.m_sweep(), [8]);
    }
}
