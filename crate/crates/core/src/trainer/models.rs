use std::collections::BTreeMap;

use crate::baselines::{CtModel, PointModel};
use crate::error::{Error, Result};
use crate::model::{CibModel, ExperimentConfig, InputShape, ModelKind};
use crate::nn::{Checkpoint, ParamStore};

/// Any of the three trainable model families.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Cib(CibModel),
    Point(PointModel),
    Ct(CtModel),
}

impl AnyModel {
    pub fn new(cfg: &ExperimentConfig, input: InputShape, classes: usize) -> Result<Self> {
        Ok(match cfg.model {
            ModelKind::Cib => AnyModel::Cib(CibModel::new(cfg, input, classes)?),
            ModelKind::Point => AnyModel::Point(PointModel::new(cfg, input, classes)?),
            ModelKind::Ct => AnyModel::Ct(CtModel::new(cfg, input, classes)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Cib(_) => ModelKind::Cib,
            AnyModel::Point(_) => ModelKind::Point,
            AnyModel::Ct(_) => ModelKind::Ct,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            AnyModel::Cib(m) => m.classes,
            AnyModel::Point(m) => m.classes,
            AnyModel::Ct(m) => m.classes,
        }
    }

    pub fn input(&self) -> InputShape {
        match self {
            AnyModel::Cib(m) => m.encoder.input,
            AnyModel::Point(m) => m.encoder.input,
            AnyModel::Ct(m) => m.input,
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            AnyModel::Cib(m) => &m.store,
            AnyModel::Point(m) => &m.store,
            AnyModel::Ct(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            AnyModel::Cib(m) => &mut m.store,
            AnyModel::Point(m) => &mut m.store,
            AnyModel::Ct(m) => &mut m.store,
        }
    }

    /// Checkpoint carrying the resolved configuration and input layout, so
    /// the model can be rebuilt without the original files.
    pub fn checkpoint(&self, cfg: &ExperimentConfig) -> Checkpoint {
        let mut metadata = BTreeMap::new();
        metadata.insert("config".to_string(), cfg.to_kv_text());
        metadata.insert("model".to_string(), self.kind().as_str().to_string());
        metadata.insert("classes".to_string(), self.classes().to_string());
        metadata.insert("input".to_string(), input_to_text(self.input()));
        Checkpoint { metadata, params: self.store().clone() }
    }

    /// Rebuilds the architecture recorded in `ckpt` and loads its weights.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, ExperimentConfig)> {
        let meta = |k: &str| {
            ckpt.metadata.get(k).ok_or_else(|| Error::Shape(format!("checkpoint metadata has no `{k}` entry")))
        };
        let cfg = ExperimentConfig::from_kv_text(meta("config")?)?;
        let classes: usize =
            meta("classes")?.parse().map_err(|_| Error::Shape("checkpoint metadata: bad class count".into()))?;
        let input = input_from_text(meta("input")?)?;
        let mut model = AnyModel::new(&cfg, input, classes)?;
        model.store_mut().load_from(&ckpt.params)?;
        Ok((model, cfg))
    }
}

fn input_to_text(input: InputShape) -> String {
    match input {
        InputShape::Vector(d) => format!("vector {d}"),
        InputShape::Image { channels, height, width } => format!("image {channels} {height} {width}"),
    }
}

fn input_from_text(s: &str) -> Result<InputShape> {
    let bad = || Error::Shape(format!("checkpoint metadata: bad input layout {s:?}"));
    let parts: Vec<&str> = s.split_whitespace().collect();
    let num = |i: usize| parts.get(i).and_then(|p| p.parse::<usize>().ok()).ok_or_else(bad);
    match parts.first().copied() {
        Some("vector") if parts.len() == 2 => Ok(InputShape::Vector(num(1)?)),
        Some("image") if parts.len() == 4 => Ok(InputShape::Image { channels: num(1)?, height: num(2)?, width: num(3)? }),
        _ => Err(bad()),
    }
}
