//! Run configuration: optimizer, schedule, data sizes, objective subset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::model::ModelConfig;

use super::TrainError;

/// Which of the five objectives contribute to the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Objectives {
    pub rmim: bool,
    pub ifr: bool,
    pub itc: bool,
    pub itm: bool,
    pub mlm: bool,
}

impl Objectives {
    pub fn all() -> Objectives {
        Objectives {
            rmim: true,
            ifr: true,
            itc: true,
            itm: true,
            mlm: true,
        }
    }

    /// The contrastive-family baseline: ITC + ITM + MLM only.
    pub fn baseline() -> Objectives {
        Objectives {
            rmim: false,
            ifr: false,
            itc: true,
            itm: true,
            mlm: true,
        }
    }

    pub fn from_names(names: &[String]) -> Result<Objectives, TrainError> {
        let mut o = Objectives {
            rmim: false,
            ifr: false,
            itc: false,
            itm: false,
            mlm: false,
        };
        for n in names {
            match n.as_str() {
                "rmim" => o.rmim = true,
                "ifr" => o.ifr = true,
                "itc" => o.itc = true,
                "itm" => o.itm = true,
                "mlm" => o.mlm = true,
                other => {
                    return Err(TrainError::Config(format!(
                        "unknown objective '{other}' (expected rmim/ifr/itc/itm/mlm)"
                    )))
                }
            }
        }
        // ITC+ITM+MLM is the baseline every ablation keeps
        if !(o.itc && o.itm && o.mlm) {
            return Err(TrainError::Config(
                "objectives must include itc, itm and mlm".into(),
            ));
        }
        Ok(o)
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.rmim {
            v.push("rmim");
        }
        if self.ifr {
            v.push("ifr");
        }
        if self.itc {
            v.push("itc");
        }
        if self.itm {
            v.push("itm");
        }
        if self.mlm {
            v.push("mlm");
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_iters: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// EMA coefficient for the momentum shadow.
    pub momentum: f64,
    /// Overrides the model's mask ratio during training when set.
    pub mask_ratio: Option<f64>,
    /// Distillation weight for the contrastive targets.
    pub distill_lambda: f64,
    pub seed: u64,
    pub train_pairs: usize,
    pub held_out_pairs: usize,
    /// Global-norm gradient clip; absent disables clipping.
    pub grad_clip: Option<f64>,
    /// Objective subset; must always contain itc, itm and mlm.
    pub objectives: Vec<String>,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub manifest_path: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 32,
            base_lr: 3e-4,
            min_lr: 3e-5,
            warmup_iters: 200,
            weight_decay: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            momentum: 0.995,
            mask_ratio: None,
            distill_lambda: 0.4,
            seed: 0,
            train_pairs: 2048,
            held_out_pairs: 128,
            grad_clip: Some(1.0),
            objectives: vec![
                "rmim".into(),
                "ifr".into(),
                "itc".into(),
                "itm".into(),
                "mlm".into(),
            ],
            checkpoint_path: PathBuf::from("model.ckpt"),
            metrics_path: PathBuf::from("metrics.jsonl"),
            manifest_path: PathBuf::from("dataset-manifest.jsonl"),
        }
    }
}

impl TrainConfig {
    pub fn objectives(&self) -> Result<Objectives, TrainError> {
        Objectives::from_names(&self.objectives)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_pairs.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.warmup_iters < 1 {
            return Err(TrainError::Config("warmup_iters must be >= 1".into()));
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.base_lr) {
            return Err(TrainError::Config(format!(
                "need 0 < min_lr <= base_lr, got {} and {}",
                self.min_lr, self.base_lr
            )));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config(
                "batch_size must be >= 2 (contrastive loss needs negatives)".into(),
            ));
        }
        if self.epochs == 0 || self.train_pairs == 0 || self.held_out_pairs == 0 {
            return Err(TrainError::Config(
                "epochs, train_pairs and held_out_pairs must be positive".into(),
            ));
        }
        if self.train_pairs % self.batch_size == 1 {
            return Err(TrainError::Config(
                "train_pairs leaves a trailing batch of 1; contrastive loss needs >= 2".into(),
            ));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(TrainError::Config(format!("{name} {v} outside [0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!(
                "momentum {} outside [0, 1]",
                self.momentum
            )));
        }
        if !(0.0..=1.0).contains(&self.distill_lambda) {
            return Err(TrainError::Config(format!(
                "distill_lambda {} outside [0, 1]",
                self.distill_lambda
            )));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return Err(TrainError::Config(format!("grad_clip {c} must be > 0")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::Config("weight_decay must be >= 0".into()));
        }
        self.objectives()?;
        Ok(())
    }
}

/// Whole-run configuration file: [model], [data] and [train] tables.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig, TrainError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: FileConfig = toml::from_str(&text)
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        self.data
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        self.train.validate()?;
        if self.model.image_size != self.data.image_size {
            return Err(TrainError::Config(format!(
                "model.image_size {} != data.image_size {}",
                self.model.image_size, self.data.image_size
            )));
        }
        // worst-case caption: [CLS] + 3 words per object + a relation between
        // each pair = 4k tokens for k described objects
        let worst = 4 * self.data.object_count_max;
        if worst > self.model.l_max {
            return Err(TrainError::Config(format!(
                "captions may reach {worst} tokens but l_max is {}",
                self.model.l_max
            )));
        }
        if let Some(alpha) = self.train.mask_ratio {
            let mut m = self.model.clone();
            m.mask_ratio = alpha;
            m.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Training-time mask ratio (train override or the model default).
    pub fn mask_ratio(&self) -> f64 {
        self.train.mask_ratio.unwrap_or(self.model.mask_ratio)
    }

    /// Flattened key -> value view for config-echo comparison.
    pub fn flatten(&self) -> BTreeMap<String, String> {
        fn walk(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) {
            match v {
                serde_json::Value::Object(map) => {
                    for (k, val) in map {
                        let key = if prefix.is_empty() {
                            k.clone()
                        } else {
                            format!("{prefix}.{k}")
                        };
                        walk(&key, val, out);
                    }
                }
                other => {
                    out.insert(prefix.to_string(), other.to_string());
                }
            }
        }
        let mut out = BTreeMap::new();
        let v = serde_json::to_value(self).expect("config serializes");
        walk("", &v, &mut out);
        out
    }

    /// Human-readable field-level differences against another config.
    pub fn diff(&self, other: &FileConfig) -> Vec<String> {
        let a = self.flatten();
        let b = other.flatten();
        let mut out = Vec::new();
        for (k, av) in &a {
            match b.get(k) {
                Some(bv) if bv == av => {}
                Some(bv) => out.push(format!("{k}: {av} -> {bv}")),
                None => out.push(format!("{k}: {av} -> (absent)")),
            }
        }
        for (k, bv) in &b {
            if !a.contains_key(k) {
                out.push(format!("{k}: (absent) -> {bv}"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        FileConfig::default().validate().unwrap();
    }

    #[test]
    fn objectives_must_keep_baseline() {
        assert!(Objectives::from_names(&["itc".into(), "itm".into()]).is_err());
        assert!(Objectives::from_names(&["rmim".into(), "itc".into(), "itm".into(), "mlm".into()])
            .is_ok());
        assert!(Objectives::from_names(&["bogus".into()]).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let toml_text = "[train]\nepochs = 3\nnot_a_field = 1\n";
        let r: Result<FileConfig, _> = toml::from_str(toml_text);
        assert!(r.is_err());
    }

    #[test]
    fn trailing_singleton_batch_is_rejected() {
        let mut cfg = FileConfig::default();
        cfg.train.train_pairs = 33;
        cfg.train.batch_size = 32;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn caption_budget_is_cross_checked() {
        let mut cfg = FileConfig::default();
        cfg.data.object_count_max = 5; // 20 tokens > l_max 16
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn diff_lists_changed_fields() {
        let a = FileConfig::default();
        let mut b = a.clone();
        b.train.epochs = 7;
        b.model.mask_ratio = 0.75;
        let d = a.diff(&b);
        assert_eq!(d.len(), 2);
        assert!(d.iter().any(|s| s.contains("train.epochs")));
        assert!(d.iter().any(|s| s.contains("model.mask_ratio")));
    }
}
