//! Run configuration: presets, JSON loading and environment overrides.

use std::path::{Path, PathBuf};

use phasepos::mle::ResidualMode;
use phasepos::models::{default_sparsity, FeatureOptions, ModelHyperparams, ModelKind};
use phasepos::scenario::ScenarioConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const ENV_SEED: &str = "PHASEPOS_SEED";
pub const ENV_OUTPUT_DIR: &str = "PHASEPOS_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Optimizer and schedule settings shared by all models. The target
/// sparsity comes from [`SparsityConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2_coeff: f64,
    pub prune_start_epoch: usize,
    pub prune_end_epoch: usize,
    pub decay_power: f64,
    pub checkpoint_every: usize,
}

/// Per-model pruning targets; `None` selects the published default for the
/// carrier frequency.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsityConfig {
    pub mlp: Option<f64>,
    pub ae: Option<f64>,
    pub cnn: Option<f64>,
}

impl SparsityConfig {
    pub fn resolve(&self, kind: ModelKind, carrier_frequency: f64) -> f64 {
        let set = match kind {
            ModelKind::Mlp => self.mlp,
            ModelKind::Ae => self.ae,
            ModelKind::Cnn => self.cnn,
        };
        set.unwrap_or_else(|| default_sparsity(kind, carrier_frequency))
    }
}

/// Performance-matched MLE grid for one carrier frequency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceGrid {
    pub carrier_frequency: f64,
    pub n_grid: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSettings {
    /// Test samples processed by the MLE baselines.
    pub mle_samples: usize,
    pub refine_steps: usize,
    pub residual: ResidualMode,
    pub reference_grids: Vec<ReferenceGrid>,
    /// Also run the MLE at the performance-matched grid (expensive).
    pub run_reference_mle: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub desk_scale: bool,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub scenario: ScenarioConfig,
    pub frequencies: Vec<f64>,
    pub powers_dbm: Vec<f64>,
    pub hyperparams: ModelHyperparams,
    pub features: FeatureOptions,
    pub sizes: DatasetSizes,
    pub train: TrainSettings,
    pub sparsity: SparsityConfig,
    pub bench: BenchSettings,
    /// Worker threads; `Some(1)` gives the deterministic single-worker mode.
    pub workers: Option<usize>,
}

impl RunConfig {
    /// Full-scale experiment grid.
    pub fn full() -> Self {
        RunConfig {
            desk_scale: false,
            seed: 0,
            output_dir: PathBuf::from("runs/full"),
            scenario: ScenarioConfig::default(),
            frequencies: vec![800e6, 1.8e9],
            powers_dbm: vec![-30.0, -20.0, -10.0, 0.0],
            hyperparams: ModelHyperparams::default(),
            features: FeatureOptions::default(),
            sizes: DatasetSizes {
                train: 700_000,
                val: 150_000,
                test: 150_000,
            },
            train: TrainSettings {
                batch_size: 1000,
                epochs: 1000,
                learning_rate: 1e-4,
                l2_coeff: 1e-5,
                prune_start_epoch: 100,
                prune_end_epoch: 400,
                decay_power: 3.0,
                checkpoint_every: 25,
            },
            sparsity: SparsityConfig::default(),
            bench: BenchSettings {
                mle_samples: 1000,
                refine_steps: 100,
                residual: ResidualMode::Wrapped,
                reference_grids: vec![
                    ReferenceGrid {
                        carrier_frequency: 800e6,
                        n_grid: 750 * 750,
                    },
                    ReferenceGrid {
                        carrier_frequency: 1.8e9,
                        n_grid: 1800 * 1800,
                    },
                ],
                run_reference_mle: false,
            },
            workers: None,
        }
    }

    /// Reduced grid that trains on a desktop CPU in a few hours.
    pub fn desk() -> Self {
        let full = RunConfig::full();
        RunConfig {
            desk_scale: true,
            output_dir: PathBuf::from("runs/desk"),
            frequencies: vec![800e6],
            hyperparams: ModelHyperparams {
                a: 64,
                b: 64,
                c: 16,
                d: 64,
            },
            sizes: DatasetSizes {
                train: 50_000,
                val: 10_000,
                test: 10_000,
            },
            train: TrainSettings {
                batch_size: 100,
                epochs: 150,
                learning_rate: 1e-3,
                prune_start_epoch: 15,
                prune_end_epoch: 60,
                ..full.train.clone()
            },
            bench: BenchSettings {
                mle_samples: 200,
                ..full.bench.clone()
            },
            ..full
        }
    }

    /// Preset selected by `desk_scale`, overlaid with the keys of `overrides`.
    ///
    /// Objects merge recursively; any other value replaces the preset value.
    pub fn from_value(overrides: Value, force_desk: bool) -> Result<Self, CliError> {
        let desk = force_desk || overrides.get("desk_scale").and_then(Value::as_bool).unwrap_or(false);
        let base = if desk { RunConfig::desk() } else { RunConfig::full() };
        let mut merged = serde_json::to_value(base).expect("config serializes");
        merge(&mut merged, overrides);
        if desk {
            merged["desk_scale"] = Value::Bool(true);
        }
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads a JSON config file (or the preset when `path` is `None`) and
    /// applies environment overrides.
    pub fn load(path: Option<&Path>, force_desk: bool) -> Result<Self, CliError> {
        let overrides = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        let mut cfg = RunConfig::from_value(overrides, force_desk)?;
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), CliError> {
        if let Some(s) = get(ENV_SEED) {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{ENV_SEED}: not an unsigned integer: {s:?}")))?;
        }
        if let Some(d) = get(ENV_OUTPUT_DIR) {
            self.output_dir = PathBuf::from(d);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        let s = &self.sizes;
        if s.train == 0 || s.val == 0 || s.test == 0 {
            return bad("sizes: every split needs at least one sample");
        }
        if self.powers_dbm.is_empty() || self.powers_dbm.iter().any(|p| !p.is_finite()) {
            return bad("powers_dbm: need at least one finite power");
        }
        if self.frequencies.is_empty() || self.frequencies.iter().any(|f| !(*f > 0.0)) {
            return bad("frequencies: need at least one positive frequency");
        }
        if self.train.checkpoint_every == 0 {
            return bad("train.checkpoint_every must be positive");
        }
        if self.bench.refine_steps == 0 {
            return bad("bench.refine_steps must be positive");
        }
        if self.workers == Some(0) {
            return bad("workers must be positive");
        }
        for kind in ModelKind::ALL {
            for &f in &self.frequencies {
                let r = self.sparsity.resolve(kind, f);
                if !(0.0..1.0).contains(&r) {
                    return bad("sparsity: targets must lie in [0, 1)");
                }
            }
        }
        self.scenario.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.hyperparams.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train_config(ModelKind::Mlp, self.frequencies[0], 0)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    /// Scenario settings for one carrier frequency. AP positions depend only
    /// on the run seed, so every frequency shares one layout.
    pub fn scenario_config(&self, carrier_frequency: f64) -> ScenarioConfig {
        ScenarioConfig {
            carrier_frequency,
            rng_seed: self.seed,
            ..self.scenario.clone()
        }
    }

    pub fn train_config(&self, kind: ModelKind, carrier_frequency: f64, seed: u64) -> phasepos_nn::TrainConfig {
        let t = &self.train;
        phasepos_nn::TrainConfig {
            batch_size: t.batch_size,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            l2_coeff: t.l2_coeff,
            prune_start_epoch: t.prune_start_epoch,
            prune_end_epoch: t.prune_end_epoch,
            target_sparsity: self.sparsity.resolve(kind, carrier_frequency),
            decay_power: t.decay_power,
            seed,
        }
    }

    pub fn reference_grid(&self, carrier_frequency: f64) -> Option<usize> {
        self.bench
            .reference_grids
            .iter()
            .find(|g| g.carrier_frequency == carrier_frequency)
            .map(|g| g.n_grid)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn presets_validate() {
        RunConfig::full().validate().unwrap();
        RunConfig::desk().validate().unwrap();
    }

    #[test]
    fn desk_preset_sizes() {
        let d = RunConfig::desk();
        assert_eq!((d.sizes.train, d.sizes.val, d.sizes.test), (50_000, 10_000, 10_000));
        let p = RunConfig::full();
        assert_eq!((p.sizes.train, p.sizes.val, p.sizes.test), (700_000, 150_000, 150_000));
    }

    #[test]
    fn default_sparsities() {
        let s = SparsityConfig::default();
        assert_eq!(s.resolve(ModelKind::Mlp, 800e6), 0.5);
        assert_eq!(s.resolve(ModelKind::Ae, 800e6), 0.5);
        assert_eq!(s.resolve(ModelKind::Ae, 1.8e9), 0.0);
        assert_eq!(s.resolve(ModelKind::Cnn, 1.8e9), 0.75);
    }

    #[test]
    fn overrides_merge_into_the_preset() {
        let cfg = RunConfig::from_value(json!({"desk_scale": true, "train": {"epochs": 80}, "seed": 9}), false).unwrap();
        assert_eq!(cfg.train.epochs, 80);
        assert_eq!(cfg.train.batch_size, 100);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.hyperparams.a, 64);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = RunConfig::from_value(json!({"trian": {}}), false).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn environment_overrides() {
        let mut cfg = RunConfig::full();
        cfg.apply_env(|k| match k {
            ENV_SEED => Some("42".into()),
            ENV_OUTPUT_DIR => Some("/tmp/x".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/x"));
        assert!(cfg.apply_env(|_| Some("nope".into())).is_err());
    }

    #[test]
    fn empty_power_list_is_rejected() {
        let mut cfg = RunConfig::desk();
        cfg.powers_dbm.clear();
        assert!(cfg.validate().is_err());
    }
}
