//! Run configuration parsed from a single TOML file with sections
//! `model`, `train`, `reg`, `data`, and `search`. Unknown keys are
//! rejected so a typo in a coefficient or scope name cannot silently turn
//! a sweep into a baseline. Every section has defaults; an empty file is
//! a valid desk-scale run.

use serde::{Deserialize, Serialize};

use crate::data::{DataConfig, Task};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::prox::RegKind;
use crate::search::SearchSpace;
use crate::sizing::Scope;
use crate::train::TrainConfig;

/// Standard row-norm coefficient grid for sweep runs, baseline included.
pub const L21_SWEEP: [f64; 6] = [0.0, 0.1, 0.25, 0.5, 1.0, 10.0];

/// Standard row-max coefficient grid for sweep runs.
pub const LINF1_SWEEP: [f64; 6] = [0.1, 0.25, 0.5, 1.0, 10.0, 100.0];

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 32,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_dim: 64,
            dropout: 0.0,
            max_len: 32,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub label_smoothing: f64,
    pub lr_decay: f64,
    pub patience: usize,
    pub lr_floor: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            clip_norm: t.clip_norm,
            label_smoothing: t.label_smoothing,
            lr_decay: t.lr_decay,
            patience: t.patience,
            lr_floor: t.lr_floor,
            seed: t.seed,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RegSection {
    /// "none", "l21", or "linf1".
    pub kind: String,
    /// Single coefficient; mutually exclusive with `lambda_sweep`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Coefficient list; the train command runs one training per entry.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_sweep: Option<Vec<f64>>,
    /// "{encoder|decoder|both}-{ffn|all}".
    pub scope: String,
}

impl Default for RegSection {
    fn default() -> Self {
        RegSection {
            kind: "none".to_string(),
            lambda: None,
            lambda_sweep: None,
            scope: "both-ffn".to_string(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// "copy", "reverse", or "cipher".
    pub task: String,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DataConfig::default();
        DataSection {
            task: d.task.to_string(),
            vocab_size: d.vocab_size,
            min_len: d.min_len,
            max_len: d.max_len,
            train: d.train,
            dev: d.dev,
            test: d.test,
            seed: d.seed,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    /// "random" trains each draw once with the `reg` settings;
    /// "autosizing" trains three arms per draw.
    pub mode: String,
    pub heads: Vec<usize>,
    pub d_model: Vec<usize>,
    pub encoder_layers: Vec<usize>,
    pub decoder_layers: Vec<usize>,
    pub ffn_dims: Vec<usize>,
    pub budget: usize,
    pub seed: u64,
    pub lambda_l21: f64,
    pub lambda_linf: f64,
    pub concurrent: bool,
}

impl Default for SearchSection {
    fn default() -> Self {
        let s = SearchSpace::desk();
        SearchSection {
            mode: "autosizing".to_string(),
            heads: s.heads_choices,
            d_model: s.d_model_choices,
            encoder_layers: s.encoder_layer_choices,
            decoder_layers: s.decoder_layer_choices,
            ffn_dims: s.ffn_dim_choices,
            budget: s.trial_budget,
            seed: s.seed,
            lambda_l21: 1.0,
            lambda_linf: 10.0,
            concurrent: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SearchMode {
    Random,
    Autosizing,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub reg: RegSection,
    pub data: DataSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchSection>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        // An unreadable file is an I/O failure, not a malformed config.
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("cannot read config {}: {e}", path.display()),
            ))
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config sections serialize")
    }

    pub fn validate(&self) -> Result<()> {
        self.reg_kind()?;
        self.scope()?;
        Task::parse(&self.data.task)?;
        if self.reg.lambda.is_some() && self.reg.lambda_sweep.is_some() {
            return Err(Error::Config(
                "set either reg.lambda or reg.lambda_sweep, not both".to_string(),
            ));
        }
        let all_lambdas: Vec<f64> = self
            .reg
            .lambda
            .iter()
            .copied()
            .chain(self.reg.lambda_sweep.iter().flatten().copied())
            .collect();
        for lambda in all_lambdas {
            if !(lambda.is_finite() && lambda >= 0.0) {
                return Err(Error::Config(format!(
                    "regularizer coefficients must be finite and >= 0, got {lambda}"
                )));
            }
        }
        if self.reg_kind()?.is_none()
            && (self.reg.lambda.is_some() || self.reg.lambda_sweep.is_some())
        {
            return Err(Error::Config(
                "reg.kind is \"none\" but a coefficient was given; set kind to l21 or linf1"
                    .to_string(),
            ));
        }
        if self.reg_kind()?.is_some()
            && self.reg.lambda.is_none()
            && self.reg.lambda_sweep.is_none()
        {
            return Err(Error::Config(format!(
                "reg.kind is {:?} but neither reg.lambda nor reg.lambda_sweep is set",
                self.reg.kind
            )));
        }
        if let Some(sweep) = &self.reg.lambda_sweep {
            if sweep.is_empty() {
                return Err(Error::Config(
                    "reg.lambda_sweep must not be empty".to_string(),
                ));
            }
        }
        if self.data.max_len + 2 > self.model.max_len {
            return Err(Error::Config(format!(
                "data.max_len {} plus sentinel tokens exceeds model.max_len {}",
                self.data.max_len, self.model.max_len
            )));
        }
        if let Some(search) = &self.search {
            self.search_mode()?;
            if search.budget == 0 {
                return Err(Error::Config(
                    "search.budget must be at least 1".to_string(),
                ));
            }
        }
        self.model_config().validate()?;
        self.data_config().validate()?;
        self.train_config(self.single_lambda())?.validate()?;
        if let Some(space) = self.search_space() {
            space.validate()?;
        }
        Ok(())
    }

    pub fn reg_kind(&self) -> Result<Option<RegKind>> {
        match self.reg.kind.as_str() {
            "none" => Ok(None),
            "l21" => Ok(Some(RegKind::L21)),
            "linf1" => Ok(Some(RegKind::LInf1)),
            other => Err(Error::Config(format!(
                "reg.kind must be one of none, l21, linf1; got {other:?}"
            ))),
        }
    }

    pub fn scope(&self) -> Result<Scope> {
        Scope::parse(&self.reg.scope)
    }

    pub fn search_mode(&self) -> Result<SearchMode> {
        let Some(search) = &self.search else {
            return Err(Error::Config(
                "no [search] section in this config".to_string(),
            ));
        };
        match search.mode.as_str() {
            "random" => Ok(SearchMode::Random),
            "autosizing" => Ok(SearchMode::Autosizing),
            other => Err(Error::Config(format!(
                "search.mode must be random or autosizing; got {other:?}"
            ))),
        }
    }

    /// Coefficients this config asks to train, in order. No regularizer
    /// means one unregularized run, reported as the baseline.
    pub fn lambdas(&self) -> Vec<Option<f64>> {
        match (&self.reg.lambda, &self.reg.lambda_sweep) {
            (Some(l), _) => vec![Some(*l)],
            (None, Some(sweep)) => sweep.iter().map(|&l| Some(l)).collect(),
            (None, None) => vec![None],
        }
    }

    fn single_lambda(&self) -> Option<f64> {
        self.lambdas().first().copied().flatten()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::uniform(
            self.model.encoder_layers,
            self.model.decoder_layers,
            self.model.d_model,
            self.model.heads,
            self.model.ffn_dim,
            self.data.vocab_size,
            self.model.max_len,
            self.model.dropout,
        )
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            task: Task::parse(&self.data.task).expect("validated"),
            vocab_size: self.data.vocab_size,
            min_len: self.data.min_len,
            max_len: self.data.max_len,
            train: self.data.train,
            dev: self.data.dev,
            test: self.data.test,
            seed: self.data.seed,
        }
    }

    /// Trainer settings with the regularizer fixed to `lambda`. `None`
    /// trains without a prox step.
    pub fn train_config(&self, lambda: Option<f64>) -> Result<TrainConfig> {
        let reg = match (self.reg_kind()?, lambda) {
            (Some(kind), Some(l)) => Some((kind, l)),
            (None, Some(l)) if l > 0.0 => {
                return Err(Error::Config(
                    "a coefficient was requested but reg.kind is none".to_string(),
                ));
            }
            _ => None,
        };
        Ok(TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            clip_norm: self.train.clip_norm,
            label_smoothing: self.train.label_smoothing,
            reg,
            scope: self.scope()?,
            lr_decay: self.train.lr_decay,
            patience: self.train.patience,
            lr_floor: self.train.lr_floor,
            seed: self.train.seed,
        })
    }

    pub fn search_space(&self) -> Option<SearchSpace> {
        let search = self.search.as_ref()?;
        Some(SearchSpace {
            heads_choices: search.heads.clone(),
            d_model_choices: search.d_model.clone(),
            encoder_layer_choices: search.encoder_layers.clone(),
            decoder_layer_choices: search.decoder_layers.clone(),
            ffn_dim_choices: search.ffn_dims.clone(),
            vocab_size: self.data.vocab_size,
            max_len: self.model.max_len,
            dropout: self.model.dropout,
            trial_budget: search.budget,
            seed: search.seed,
        })
    }

    /// Copy of this config with the sweep resolved to one coefficient,
    /// as written into each run directory.
    pub fn with_lambda(&self, lambda: Option<f64>) -> Self {
        let mut out = self.clone();
        out.reg.lambda = lambda;
        out.reg.lambda_sweep = None;
        if lambda.is_none() {
            out.reg.kind = "none".to_string();
        }
        out
    }
}
