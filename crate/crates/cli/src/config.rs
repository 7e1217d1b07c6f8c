//! Experiment configuration: one JSON file per experiment.

use std::path::Path;

use metaloss::adapt::{PretrainConfig, TaskConfig};
use metaloss::arm::{ArmModel, Gains};
use metaloss::loss::LossVariant;
use metaloss::meta::{EvalConfig, MetaConfig};
use metaloss::model::{ModelSpec, OptimizerKind, Standardizer};
use metaloss::dataset::{DynDataset, SineSchedule};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: Vec<f64>,
    pub test: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    /// z-score inputs with meta-train statistics.
    pub normalize_inputs: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            normalize_inputs: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaSection {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub iters_max: usize,
    pub unroll: usize,
    pub resample_halves: bool,
    pub divergence_threshold: f64,
}

impl Default for MetaSection {
    fn default() -> Self {
        let d = MetaConfig::default();
        Self {
            epochs: d.epochs,
            batches_per_epoch: d.batches_per_epoch,
            batch_size: d.batch_size,
            inner_lr: d.inner_lr,
            outer_lr: d.outer_lr,
            iters_max: d.iters_max,
            unroll: d.unroll,
            resample_halves: d.resample_halves,
            divergence_threshold: d.divergence_threshold,
        }
    }
}

/// Fresh-model training runs; seeds are offsets added to the experiment seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub steps: usize,
    pub seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            steps: 100,
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    pub task: TaskConfig,
    /// Model-initialization seeds (offsets).
    pub seeds: Vec<u64>,
    /// Number of perturbed task trials.
    pub trials: usize,
    pub learned_lr: f64,
    pub mse_lrs: Vec<f64>,
    pub adam_lr: f64,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
}

impl Default for AdaptSection {
    fn default() -> Self {
        Self {
            task: TaskConfig::default(),
            seeds: (0..5).collect(),
            trials: 3,
            learned_lr: 0.001,
            mse_lrs: vec![0.001, 0.01],
            adam_lr: 0.001,
            pretrain_steps: 2000,
            pretrain_batch: 256,
            pretrain_lr: 0.001,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arm: ArmModel,
    pub gains: Gains,
    pub collection: SineSchedule,
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub meta: MetaSection,
    /// Evaluation run after every meta-training epoch.
    #[serde(default = "default_epoch_eval")]
    pub epoch_eval: EvalSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub adapt: AdaptSection,
    #[serde(default = "default_variants")]
    pub variants: Vec<LossVariant>,
    /// Stride through the dataset when picking probe states for φ export.
    #[serde(default = "default_probe_stride")]
    pub probe_stride: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
}

fn default_epoch_eval() -> EvalSection {
    EvalSection {
        steps: 100,
        seeds: vec![0],
    }
}

fn default_variants() -> Vec<LossVariant> {
    LossVariant::LEARNED.to_vec()
}

fn default_probe_stride() -> usize {
    24
}

fn default_out_dir() -> String {
    "out".into()
}

fn hundredths(range: std::ops::RangeInclusive<u32>) -> Vec<f64> {
    range.map(|i| f64::from(i) / 100.0).collect()
}

impl ExperimentConfig {
    /// Simulated 3-joint arm, sine motions at 0.01–0.09 Hz for 10 s at 240 Hz.
    pub fn sim() -> Self {
        Self {
            arm: ArmModel::planar(3),
            gains: Gains::default_for(3),
            collection: SineSchedule {
                dt: 1.0 / 240.0,
                duration: 10.0,
                frequencies: hundredths(1..=9),
                amplitude: vec![0.5; 3],
                q_rest: vec![0.0; 3],
                noise_std: 0.0,
            },
            split: SplitConfig {
                train: vec![0.01, 0.03, 0.05, 0.06, 0.07, 0.08],
                test: vec![0.02, 0.04, 0.09],
            },
            model: ModelConfig::default(),
            meta: MetaSection::default(),
            epoch_eval: default_epoch_eval(),
            eval: EvalSection::default(),
            adapt: AdaptSection::default(),
            variants: default_variants(),
            probe_stride: default_probe_stride(),
            seed: 0,
            out_dir: default_out_dir(),
        }
    }

    /// Hardware-style schedule: 0.02–0.08 Hz for 30 s at 250 Hz.
    pub fn hardware() -> Self {
        let mut c = Self::sim();
        c.collection.dt = 1.0 / 250.0;
        c.collection.duration = 30.0;
        c.collection.frequencies = hundredths(2..=8);
        c.split = SplitConfig {
            train: vec![0.02, 0.03, 0.04, 0.06, 0.08],
            test: vec![0.05, 0.07],
        };
        c.adapt.task.dt = 1.0 / 250.0;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "sim" => Ok(Self::sim()),
            "hardware" => Ok(Self::hardware()),
            other => Err(CliError::Config(format!("unknown preset `{other}` (expected sim or hardware)"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn joints(&self) -> usize {
        self.arm.joints()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        let j = self.joints();
        self.arm.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.gains.validate(j).map_err(|e| CliError::Config(format!("gains: {e}")))?;
        let c = &self.collection;
        if c.amplitude.len() != j || c.q_rest.len() != j {
            return bad(format!("collection amplitude and q_rest need {j} entries"));
        }
        if !(c.dt > 0.0 && c.duration > 0.0 && c.noise_std >= 0.0) {
            return bad("collection dt and duration must be positive, noise_std nonnegative".into());
        }
        if c.frequencies.is_empty() || c.frequencies.iter().any(|f| !(*f > 0.0)) {
            return bad("collection frequencies must be nonempty and positive".into());
        }
        let same = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(1.0);
        for (i, f) in c.frequencies.iter().enumerate() {
            if c.frequencies[..i].iter().any(|g| same(*f, *g)) {
                return bad(format!("frequency {f} is collected twice"));
            }
            let tr = self.split.train.iter().any(|g| same(*f, *g));
            let te = self.split.test.iter().any(|g| same(*f, *g));
            if tr && te {
                return bad(format!("frequency {f} is in both the train and the test split"));
            }
            if !tr && !te {
                return bad(format!("frequency {f} is in neither split"));
            }
        }
        for f in self.split.train.iter().chain(&self.split.test) {
            if !c.frequencies.iter().any(|g| same(*f, *g)) {
                return bad(format!("split frequency {f} is not collected"));
            }
        }
        if self.split.train.is_empty() || self.split.test.is_empty() {
            return bad("both splits need at least one frequency".into());
        }
        self.meta_config(None).validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.variants.contains(&LossVariant::Mse) {
            return bad("variants lists meta-trainable losses; mse is always evaluated as the baseline".into());
        }
        for (name, e) in [("eval", &self.eval), ("epoch_eval", &self.epoch_eval)] {
            if e.steps == 0 || e.seeds.is_empty() {
                return bad(format!("{name} needs steps > 0 and at least one seed"));
            }
        }
        let a = &self.adapt;
        a.task.validate(j).map_err(|e| CliError::Config(format!("adapt.task: {e}")))?;
        if a.seeds.is_empty() || a.trials == 0 {
            return bad("adapt needs at least one seed and one trial".into());
        }
        if [a.learned_lr, a.adam_lr, a.pretrain_lr].iter().chain(&a.mse_lrs).any(|lr| !(*lr > 0.0)) {
            return bad("adaptation learning rates must be positive".into());
        }
        if a.pretrain_batch == 0 {
            return bad("adapt.pretrain_batch must be positive".into());
        }
        if self.probe_stride == 0 {
            return bad("probe_stride must be positive".into());
        }
        Ok(())
    }

    /// Task-model spec; input statistics come from `train` when enabled.
    pub fn model_spec(&self, train: &DynDataset) -> ModelSpec {
        let input_norm = if self.model.normalize_inputs {
            let rows: Vec<Vec<f64>> = train
                .records()
                .map(|r| r.q.iter().chain(&r.dq).chain(&r.ddq_next).copied().collect())
                .collect();
            Standardizer::fit(rows.iter().map(|r| r.as_slice()))
        } else {
            None
        };
        ModelSpec {
            hidden: self.model.hidden.clone(),
            input_norm,
        }
    }

    pub fn meta_config(&self, model: Option<ModelSpec>) -> MetaConfig {
        let m = &self.meta;
        MetaConfig {
            epochs: m.epochs,
            batches_per_epoch: m.batches_per_epoch,
            batch_size: m.batch_size,
            inner_lr: m.inner_lr,
            outer_lr: m.outer_lr,
            iters_max: m.iters_max,
            unroll: m.unroll,
            resample_halves: m.resample_halves,
            divergence_threshold: m.divergence_threshold,
            model: model.unwrap_or_else(|| ModelSpec {
                hidden: self.model.hidden.clone(),
                input_norm: None,
            }),
            seed: self.seed,
        }
    }

    pub fn eval_config(&self, section: &EvalSection, model: ModelSpec) -> EvalConfig {
        EvalConfig {
            steps: section.steps,
            seeds: section.seeds.iter().map(|s| self.seed.wrapping_add(*s)).collect(),
            batch_size: self.meta.batch_size,
            lr: self.meta.inner_lr,
            model,
        }
    }

    pub fn pretrain_config(&self, model: ModelSpec, seed: u64) -> PretrainConfig {
        PretrainConfig {
            steps: self.adapt.pretrain_steps,
            batch_size: self.adapt.pretrain_batch,
            optimizer: OptimizerKind::adam(self.adapt.pretrain_lr),
            model,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ExperimentConfig::sim().validate().unwrap();
        ExperimentConfig::hardware().validate().unwrap();
        assert_eq!(ExperimentConfig::sim().collection.frequencies.len(), 9);
        assert_eq!(ExperimentConfig::hardware().collection.frequencies.len(), 7);
    }

    #[test]
    fn json_round_trip() {
        let c = ExperimentConfig::hardware();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), c);
    }

    #[test]
    fn split_errors() {
        let mut c = ExperimentConfig::sim();
        c.split.test.push(0.01);
        assert!(matches!(c.validate(), Err(CliError::Config(m)) if m.contains("both")));
        let mut c = ExperimentConfig::sim();
        c.split.test.pop();
        assert!(matches!(c.validate(), Err(CliError::Config(m)) if m.contains("neither")));
        let mut c = ExperimentConfig::sim();
        c.split.train.push(0.5);
        assert!(c.validate().is_err());
    }

    #[test]
    fn other_validation() {
        let mut c = ExperimentConfig::sim();
        c.meta.batch_size = 255;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::sim();
        c.variants.push(LossVariant::Mse);
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::sim();
        c.collection.amplitude.pop();
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::preset("lab").is_err());
    }
}
