use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kvfile::{self, parse_value, KvError};

/// Upper bound on weight samples; the pairwise regulariser is quadratic in M.
pub const MAX_WEIGHT_SAMPLES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Cib,
    Point,
    Ct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

macro_rules! keyword_enum {
    ($ty:ty, $($name:literal => $variant:expr),+) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(format!("expected one of: {}", [$($name),+].join(", "))),
                }
            }
        }
        impl $ty {
            pub fn as_str(self) -> &'static str {
                $(if self == $variant { return $name; })+
                unreachable!()
            }
        }
    };
}

keyword_enum!(ModelKind, "cib" => ModelKind::Cib, "point" => ModelKind::Point, "ct" => ModelKind::Ct);
keyword_enum!(EncoderKind, "mlp" => EncoderKind::Mlp, "cnn" => EncoderKind::Cnn);
keyword_enum!(OptimizerKind, "adamw" => OptimizerKind::AdamW, "sgd" => OptimizerKind::Sgd);

/// Every hyperparameter of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Context samples per step (N).
    pub n: usize,
    /// Weight samples (M).
    pub m: usize,
    /// Representation samples (L).
    pub l: usize,
    pub alpha: f64,
    /// Weight-function regulariser weight.
    pub beta: f64,
    /// Input-representation KL weight.
    pub gamma: f64,
    /// Context-representation KL weight.
    pub mu_c: f64,
    /// Bayesian-weight KL weight.
    pub epsilon: f64,
    /// `None` picks the model's default.
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub model: ModelKind,
    pub dataset: String,
    pub encoder_kind: EncoderKind,
    pub repr_dim: usize,
    pub hidden: usize,
    pub encoder_hidden: usize,
    /// Validation cadence in optimiser steps; 0 means once per epoch.
    pub eval_every_steps: usize,
    /// Validation accuracy that defines steps-to-threshold.
    pub accuracy_threshold: f64,
    pub ce_weight: f64,
    pub recon_weight: f64,
    pub kl_weight: f64,
    /// Reconstruction-only epochs before joint CT training.
    pub ct_pretrain_epochs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n: 16,
            m: 16,
            l: 1,
            alpha: 0.4,
            beta: 0.01,
            gamma: 1e-6,
            mu_c: 1e-6,
            epsilon: 1e-6,
            lr: None,
            weight_decay: 0.01,
            optimizer: OptimizerKind::AdamW,
            batch_size: 64,
            epochs: 50,
            seed: 0,
            model: ModelKind::Cib,
            dataset: "confounded".to_string(),
            encoder_kind: EncoderKind::Mlp,
            repr_dim: 16,
            hidden: 32,
            encoder_hidden: 64,
            eval_every_steps: 0,
            accuracy_threshold: 0.7,
            ce_weight: 1.0,
            recon_weight: 1.0,
            kl_weight: 1e-3,
            ct_pretrain_epochs: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn effective_lr(&self) -> f64 {
        self.lr.unwrap_or(match self.model {
            ModelKind::Cib => 0.01,
            ModelKind::Point | ModelKind::Ct => 0.005,
        })
    }

    /// Parses a config file body on top of the defaults.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in kvfile::parse(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its text form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), KvError> {
        match key {
            "n" => self.n = parse_value(key, value)?,
            "m" => self.m = parse_value(key, value)?,
            "l" => self.l = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "mu_c" => self.mu_c = parse_value(key, value)?,
            "epsilon" => self.epsilon = parse_value(key, value)?,
            "lr" => self.lr = if value == "default" { None } else { Some(parse_value(key, value)?) },
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "optimizer" => self.optimizer = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "model" => self.model = parse_value(key, value)?,
            "dataset" => self.dataset = value.to_string(),
            "encoder_kind" => self.encoder_kind = parse_value(key, value)?,
            "repr_dim" => self.repr_dim = parse_value(key, value)?,
            "hidden" => self.hidden = parse_value(key, value)?,
            "encoder_hidden" => self.encoder_hidden = parse_value(key, value)?,
            "eval_every_steps" => self.eval_every_steps = parse_value(key, value)?,
            "accuracy_threshold" => self.accuracy_threshold = parse_value(key, value)?,
            "ce_weight" => self.ce_weight = parse_value(key, value)?,
            "recon_weight" => self.recon_weight = parse_value(key, value)?,
            "kl_weight" => self.kl_weight = parse_value(key, value)?,
            "ct_pretrain_epochs" => self.ct_pretrain_epochs = parse_value(key, value)?,
            _ => return Err(KvError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        for (name, v) in [("n", self.n), ("m", self.m), ("l", self.l)] {
            if v < 1 {
                return bad(name, format!("must be at least 1, got {v}"));
            }
        }
        if self.m > MAX_WEIGHT_SAMPLES {
            return bad("m", format!("at most {MAX_WEIGHT_SAMPLES} weight samples are supported, got {}", self.m));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha", format!("must lie in [0, 1], got {}", self.alpha));
        }
        let non_negative = [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("mu_c", self.mu_c),
            ("epsilon", self.epsilon),
            ("weight_decay", self.weight_decay),
            ("ce_weight", self.ce_weight),
            ("recon_weight", self.recon_weight),
            ("kl_weight", self.kl_weight),
            ("lr", self.effective_lr()),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return bad(name, format!("must be finite and non-negative, got {v}"));
            }
        }
        if self.batch_size < 2 {
            return bad("batch_size", format!("batch normalisation needs at least 2, got {}", self.batch_size));
        }
        if self.epochs < 1 {
            return bad("epochs", "must be at least 1".into());
        }
        for (name, v) in [("repr_dim", self.repr_dim), ("hidden", self.hidden), ("encoder_hidden", self.encoder_hidden)] {
            if v < 1 {
                return bad(name, "must be at least 1".into());
            }
        }
        if !(self.accuracy_threshold > 0.0 && self.accuracy_threshold <= 1.0) {
            return bad("accuracy_threshold", format!("must lie in (0, 1], got {}", self.accuracy_threshold));
        }
        if self.model == ModelKind::Ct && self.ce_weight == 0.0 && self.recon_weight == 0.0 && self.kl_weight == 0.0 {
            return bad("ce_weight", "CT loss weights are all zero".into());
        }
        Ok(())
    }

    /// Resolved snapshot in the same text format.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let lr = self.effective_lr();
        let rows: Vec<(&str, String)> = vec![
            ("n", self.n.to_string()),
            ("m", self.m.to_string()),
            ("l", self.l.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("gamma", self.gamma.to_string()),
            ("mu_c", self.mu_c.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("lr", lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("optimizer", self.optimizer.as_str().to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("model", self.model.as_str().to_string()),
            ("dataset", self.dataset.clone()),
            ("encoder_kind", self.encoder_kind.as_str().to_string()),
            ("repr_dim", self.repr_dim.to_string()),
            ("hidden", self.hidden.to_string()),
            ("encoder_hidden", self.encoder_hidden.to_string()),
            ("eval_every_steps", self.eval_every_steps.to_string()),
            ("accuracy_threshold", self.accuracy_threshold.to_string()),
            ("ce_weight", self.ce_weight.to_string()),
            ("recon_weight", self.recon_weight.to_string()),
            ("kl_weight", self.kl_weight.to_string()),
            ("ct_pretrain_epochs", self.ct_pretrain_epochs.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
