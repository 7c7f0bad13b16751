use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::prompt::TRAIN_QUERY_CAP;

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Applied to matrices with more than one row and column; vectors and
    /// scalars are not decayed.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub decay: Decay,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            epochs: 10,
            warmup_epochs: 5,
            decay: Decay::Cosine,
        }
    }
}

impl ScheduleConfig {
    /// Learning rate before optimizer step `step` (0-based): linear ramp from
    /// 0 to `peak` over the warmup steps, then the post-warmup decay.
    pub fn learning_rate(&self, peak: f64, step: usize, steps_per_epoch: usize) -> f64 {
        let warmup = self.warmup_epochs * steps_per_epoch;
        let total = self.epochs * steps_per_epoch;
        if step < warmup {
            return peak * step as f64 / warmup as f64;
        }
        match self.decay {
            Decay::Constant => peak,
            Decay::Cosine => {
                let span = total.saturating_sub(warmup).max(1);
                let progress = ((step - warmup) as f64 / span as f64).min(1.0);
                0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Queries per training prompt, positives included.
    pub cap: usize,
    /// Newline-separated negative queries. Without it, negatives come from the
    /// queries of the training set itself.
    pub negative_pool_path: Option<PathBuf>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            cap: TRAIN_QUERY_CAP,
            negative_pool_path: None,
        }
    }
}

/// Everything that determines a training or evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub prompt: PromptConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            batch_size: 4,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            prompt: PromptConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate(self.model.fpn_levels)?;
        self.eval.validate()?;
        if self.batch_size == 0 || self.prompt.cap == 0 {
            return Err(Error::Config("batch_size and prompt.cap must be positive".into()));
        }
        if self.schedule.epochs == 0 || self.schedule.warmup_epochs > self.schedule.epochs {
            return Err(Error::Config(format!(
                "need 0 < epochs and warmup_epochs <= epochs, got {} and {}",
                self.schedule.epochs, self.schedule.warmup_epochs
            )));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.weight_decay >= 0.0 && o.eps > 0.0 && o.grad_clip >= 0.0)
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
        {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable in TOML")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let json: RunConfig = serde_json::from_value(cfg.to_json()).unwrap();
        assert_eq!(json, cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml("seed = 7\n[model]\nd_model = 16\n[schedule]\nepochs = 3\nwarmup_epochs = 1\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.d_model, 16);
        assert_eq!(cfg.model.num_heads, 4);
        assert_eq!(cfg.schedule.epochs, 3);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(RunConfig::from_toml("sed = 7").is_err());
        assert!(RunConfig::from_toml("[model]\ndmodel = 16").is_err());
        assert!(RunConfig::from_toml("[schedule]\nepochs = 2\nwarmup_epochs = 3").is_err());
    }

    #[test]
    fn warmup_then_cosine() {
        let s = ScheduleConfig::default();
        let spe = 8;
        assert_eq!(s.learning_rate(1e-3, 0, spe), 0.0);
        assert!((s.learning_rate(1e-3, 20, spe) - 0.5e-3).abs() < 1e-15);
        assert_eq!(s.learning_rate(1e-3, 40, spe), 1e-3);
        assert!((s.learning_rate(1e-3, 60, spe) - 0.5e-3).abs() < 1e-12);
        assert!(s.learning_rate(1e-3, 79, spe) < 1e-5);
        let lrs: Vec<f64> = (40..80).map(|k| s.learning_rate(1e-3, k, spe)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
