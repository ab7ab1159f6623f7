use std::path::{Path, PathBuf};

use super::HarnessError;
use crate::kv::{KvMap, KvWriter};
use crate::model::{ModelConfig, MODEL_KEYS};

/// Training recipe plus the model it trains. Defaults follow the reference
/// recipe: Adam at 5e-4 with betas (0.9, 0.998), weight decay 1e-3, plateau
/// halving after 9 epochs without dev BLEU-4 improvement, batch 32,
/// smoothing 0.4, and unit knowledge-transfer weight.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Corpus directory written by `gen-data`.
    pub data: Option<PathBuf>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub decay_factor: f64,
    /// Training stops once the scheduled rate falls below this.
    pub min_learning_rate: f64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub lambda_kt: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data: None,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.998,
            adam_eps: 1e-8,
            weight_decay: 1e-3,
            patience: 9,
            decay_factor: 0.5,
            min_learning_rate: 1e-7,
            batch_size: 32,
            label_smoothing: 0.4,
            lambda_kt: 1.0,
            epochs: 50,
            seed: 42,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "data",
    "learning_rate",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "patience",
    "decay_factor",
    "min_learning_rate",
    "batch_size",
    "label_smoothing",
    "lambda_kt",
    "epochs",
    "seed",
];

impl TrainConfig {
    /// Parses key=value text over the defaults. Model keys and training
    /// keys share one flat namespace.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let map = KvMap::parse(text)?;
        let known: Vec<&str> = MODEL_KEYS.iter().chain(TRAIN_KEYS).copied().collect();
        map.check_known(&known)?;
        let mut c = Self::default();
        c.model.apply(&map)?;
        if let Some(d) = map.get_str("data") {
            c.data = Some(PathBuf::from(d));
        }
        map.read_into("learning_rate", &mut c.learning_rate)?;
        map.read_into("beta1", &mut c.beta1)?;
        map.read_into("beta2", &mut c.beta2)?;
        map.read_into("adam_eps", &mut c.adam_eps)?;
        map.read_into("weight_decay", &mut c.weight_decay)?;
        map.read_into("patience", &mut c.patience)?;
        map.read_into("decay_factor", &mut c.decay_factor)?;
        map.read_into("min_learning_rate", &mut c.min_learning_rate)?;
        map.read_into("batch_size", &mut c.batch_size)?;
        map.read_into("label_smoothing", &mut c.label_smoothing)?;
        map.read_into("lambda_kt", &mut c.lambda_kt)?;
        map.read_into("epochs", &mut c.epochs)?;
        map.read_into("seed", &mut c.seed)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.lambda_kt < 0.0 {
            return bad(format!("lambda_kt {} must be non-negative", self.lambda_kt));
        }
        if !(0.0 < self.decay_factor && self.decay_factor < 1.0) {
            return bad(format!("decay_factor {} outside (0, 1)", self.decay_factor));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 for batch statistics".into());
        }
        Ok(())
    }

    /// The resolved configuration as key=value lines.
    pub fn to_kv(&self) -> String {
        let mut w = KvWriter::new();
        self.model.write(&mut w);
        if let Some(d) = &self.data {
            w.put("data", d.display());
        }
        w.put("learning_rate", self.learning_rate)
            .put("beta1", self.beta1)
            .put("beta2", self.beta2)
            .put("adam_eps", self.adam_eps)
            .put("weight_decay", self.weight_decay)
            .put("patience", self.patience)
            .put("decay_factor", self.decay_factor)
            .put("min_learning_rate", self.min_learning_rate)
            .put("batch_size", self.batch_size)
            .put("label_smoothing", self.label_smoothing)
            .put("lambda_kt", self.lambda_kt)
            .put("epochs", self.epochs)
            .put("seed", self.seed);
        w.finish()
    }
}
