//! Declarative run configuration: a TOML file with one section per stage.
//! Command-line flags override file values; `FORGE_SEED` is the last seed
//! fallback before zero.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use forge_core::distill::{DistillConfig, DistilledEvalConfig, DsaConfig};
use forge_core::eval::experiment::ExperimentConfig;
use forge_core::merge::CoeffOptimConfig;
use forge_core::model::{AdapterConfig, EncoderConfig, TrainConfig};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub iterations: usize,
    pub ipc: usize,
    pub learning_rate: f32,
    pub final_learning_rate: f32,
    pub momentum: f32,
    pub inner_steps: usize,
    pub dsa_enabled: bool,
    pub dsa: DsaConfig,
    pub persist_adapter: bool,
    pub init_from_real: bool,
    pub real_batch: usize,
    pub reinit_std: f32,
    /// Iterations of the adapter trained on the distilled set when scoring it.
    pub eval_iterations: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self {
            iterations: d.iterations,
            ipc: d.ipc,
            learning_rate: d.learning_rate,
            final_learning_rate: d.final_learning_rate,
            momentum: d.momentum,
            inner_steps: d.inner_steps,
            dsa_enabled: d.dsa_enabled,
            dsa: d.dsa,
            persist_adapter: d.persist_adapter,
            init_from_real: d.init_from_real,
            real_batch: d.real_batch,
            reinit_std: d.reinit_std,
            eval_iterations: DistilledEvalConfig::default().iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    pub ipc: usize,
    pub distill_iterations: usize,
    pub eval_iterations: usize,
    pub raw_guidance_fraction: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            data_seed: e.data_seed,
            seeds: e.seeds,
            ipc: e.distill.ipc,
            distill_iterations: e.distill.iterations,
            eval_iterations: e.distilled_eval.iterations,
            raw_guidance_fraction: e.raw_guidance_fraction,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub train: TrainSection,
    pub distill: DistillSection,
    pub merge: CoeffOptimConfig,
    pub experiment: ExperimentSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text)
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }

    /// Flag, then file, then `FORGE_SEED`, then zero.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let seed = match flag.or(self.seed) {
            Some(s) => s,
            None => match std::env::var("FORGE_SEED") {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| UsageError(format!("FORGE_SEED={v:?} is not an integer")))?,
                Err(_) => 0,
            },
        };
        self.seed = Some(seed);
        Ok(seed)
    }

    pub fn train_config(&self, adapter: &AdapterConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            adapter: adapter.clone(),
            epochs: self.train.epochs,
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            batch_size: self.train.batch_size,
            seed,
        }
    }

    pub fn distill_config(&self, adapter: &AdapterConfig, seed: u64) -> DistillConfig {
        let d = &self.distill;
        DistillConfig {
            iterations: d.iterations,
            ipc: d.ipc,
            learning_rate: d.learning_rate,
            final_learning_rate: d.final_learning_rate,
            momentum: d.momentum,
            inner_steps: d.inner_steps,
            dsa_enabled: d.dsa_enabled,
            dsa: d.dsa.clone(),
            persist_adapter: d.persist_adapter,
            init_from_real: d.init_from_real,
            real_batch: d.real_batch,
            reinit_std: d.reinit_std,
            train: self.train_config(adapter, seed),
            seed,
        }
    }

    pub fn distilled_eval_config(&self, adapter: &AdapterConfig, seed: u64) -> DistilledEvalConfig {
        DistilledEvalConfig {
            iterations: self.distill.eval_iterations,
            train: self.train_config(adapter, seed),
        }
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        let e = &self.experiment;
        let seed = self.seed.unwrap_or(0);
        let mut distill = self.distill_config(&self.adapter, seed);
        distill.ipc = e.ipc;
        distill.iterations = e.distill_iterations;
        let mut distilled_eval = self.distilled_eval_config(&self.adapter, seed);
        distilled_eval.iterations = e.eval_iterations;
        ExperimentConfig {
            data_seed: e.data_seed,
            seeds: e.seeds.clone(),
            encoder: self.encoder.clone(),
            train: self.train_config(&self.adapter, seed),
            distill,
            distilled_eval,
            merge: self.merge.clone(),
            raw_guidance_fraction: e.raw_guidance_fraction,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.distill.ipc, 20);
        assert_eq!(cfg.merge.max_iterations, 40);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nepochz = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("colour = 1\n").is_err());
        let ok: RunConfig =
            toml::from_str("[train]\nepochs = 3\n[merge]\nl1_lambda = 0.1\n").unwrap();
        assert_eq!(ok.train.epochs, 3);
        assert_eq!(ok.merge.l1_lambda, 0.1);
        assert_eq!(ok.merge.max_iterations, 40);
    }
}
