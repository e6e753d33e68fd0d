//! Run configuration: one JSON document describing stream, learner,
//! strategy, coreset, budget and clock.
//!
//! Unknown keys are rejected and every error names the offending key path,
//! e.g. `coreset.ratio: ratio must be in (0, 1]`.

use crate::coreset::LossOrder;
use crate::datagen::{read_stream, FactUniverse, Stream, StreamConfig, StreamMode, TemplateSet};
use crate::extproto::{ExternalConfig, ExternalLearner};
use crate::learners::{
    CostModel, Eviction, FactMemoryLearner, HashedSoftmaxConfig, HashedSoftmaxLearner, Learner, LearnerError,
    Rehearsal, StrategyConfig, StrategyKind,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("cannot read {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error(transparent)]
    Datagen(#[from] crate::datagen::DatagenError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
}

impl ConfigError {
    fn invalid(path: &str, message: impl Into<String>) -> Self {
        Self::Invalid {
            path: path.to_string(),
            message: message.into(),
        }
    }

    /// Key path of a schema error, if this is one.
    pub fn key_path(&self) -> Option<&str> {
        match self {
            Self::Invalid { path, .. } => Some(path),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamSource {
    /// Generate a synthetic stream.
    Generate(StreamConfig),
    /// Read `knowledge.jsonl` / `qa.jsonl` files.
    Files(StreamFiles),
}

impl Default for StreamSource {
    fn default() -> Self {
        Self::Generate(StreamConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamFiles {
    pub knowledge: PathBuf,
    pub qa: PathBuf,
    /// Number of built-in relation templates the texts were rendered with.
    #[serde(default = "default_relations")]
    pub relations: usize,
    #[serde(default)]
    pub mode: Option<StreamMode>,
}

fn default_relations() -> usize {
    12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum LearnerSpec {
    FactMemory {
        /// `None` is unbounded.
        #[serde(default)]
        capacity: Option<usize>,
        #[serde(default)]
        eviction: Eviction,
    },
    HashedSoftmax {
        #[serde(default = "default_lr")]
        lr: f64,
    },
    External(ExternalConfig),
}

fn default_lr() -> f64 {
    HashedSoftmaxConfig::default().lr
}

impl Default for LearnerSpec {
    fn default() -> Self {
        Self::HashedSoftmax { lr: default_lr() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoresetMethod {
    #[default]
    None,
    Random,
    Kcenter,
    ModelBased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoresetConfig {
    pub method: CoresetMethod,
    pub ratio: f64,
    pub order: LossOrder,
    /// Selection cost as a fraction of the training cost of the arrived items.
    pub selection_cost_fraction: f64,
}

impl Default for CoresetConfig {
    fn default() -> Self {
        Self {
            method: CoresetMethod::None,
            ratio: 1.0,
            order: LossOrder::Ascending,
            selection_cost_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum BudgetConfig {
    #[default]
    Unlimited,
    /// Same budget at every step.
    PerStep { seconds: f64 },
    /// `fraction` of the reference strategy's dry-run cost at each step.
    Reference { fraction: f64, strategy: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    #[default]
    Simulated,
    Wall,
}

/// Which token count feeds the acquisition rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenAccounting {
    /// Tokens actually trained on, replays included.
    #[default]
    Trained,
    /// Tokens that arrived on the stream.
    Arrived,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for learner, coreset, rehearsal and probe sampling.
    pub seed: u64,
    pub stream: StreamSource,
    pub learner: LearnerSpec,
    pub strategy: StrategyConfig,
    pub coreset: CoresetConfig,
    pub budget: BudgetConfig,
    pub clock: ClockMode,
    pub kg_probes: usize,
    pub embed_dim: usize,
    /// Simulated seconds per token before the strategy multiplier.
    pub per_token_cost: f64,
    pub token_accounting: TokenAccounting,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stream: StreamSource::default(),
            learner: LearnerSpec::default(),
            strategy: StrategyConfig::default(),
            coreset: CoresetConfig::default(),
            budget: BudgetConfig::default(),
            clock: ClockMode::default(),
            kg_probes: 64,
            embed_dim: crate::text::DEFAULT_EMBED_DIM,
            per_token_cost: 0.001,
            token_accounting: TokenAccounting::default(),
        }
    }
}

/// Seeds derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub learner: u64,
    pub coreset: u64,
    pub rehearsal: u64,
    pub probes: u64,
}

impl Seeds {
    pub fn derive(master: u64) -> Self {
        let mix = |salt: u64| splitmix(master ^ salt);
        Self {
            master,
            learner: mix(0x1ea7),
            coreset: mix(0xc0de),
            rehearsal: mix(0x7e4e),
            probes: mix(0x9b0b),
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RunConfig {
    /// Parses a JSON document, reporting the key path of the first error.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::invalid(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::derive(self.seed)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.coreset;
        if !(c.ratio > 0.0 && c.ratio <= 1.0) {
            return Err(ConfigError::invalid("coreset.ratio", "ratio must be in (0, 1]"));
        }
        if !(c.selection_cost_fraction >= 0.0 && c.selection_cost_fraction.is_finite()) {
            return Err(ConfigError::invalid("coreset.selection_cost_fraction", "must be a finite value >= 0"));
        }
        match &self.budget {
            BudgetConfig::Unlimited => {}
            BudgetConfig::PerStep { seconds } => {
                if !(*seconds >= 0.0) {
                    return Err(ConfigError::invalid("budget.seconds", "budget must be >= 0"));
                }
            }
            BudgetConfig::Reference { fraction, strategy } => {
                if !(*fraction > 0.0 && fraction.is_finite()) {
                    return Err(ConfigError::invalid("budget.fraction", "fraction must be > 0"));
                }
                if strategy.parse::<StrategyKind>().is_err() {
                    return Err(ConfigError::invalid("budget.strategy", format!("unknown strategy `{strategy}`")));
                }
            }
        }
        if self.embed_dim == 0 {
            return Err(ConfigError::invalid("embed_dim", "must be >= 1"));
        }
        if !(self.per_token_cost >= 0.0 && self.per_token_cost.is_finite()) {
            return Err(ConfigError::invalid("per_token_cost", "must be a finite value >= 0"));
        }
        match &self.learner {
            LearnerSpec::FactMemory { capacity: Some(0), .. } => {
                return Err(ConfigError::invalid("learner.capacity", "must be >= 1"));
            }
            LearnerSpec::HashedSoftmax { lr } if !(*lr > 0.0 && lr.is_finite()) => {
                return Err(ConfigError::invalid("learner.lr", "must be > 0"));
            }
            LearnerSpec::External(ext) => {
                if ext.command.is_empty() {
                    return Err(ConfigError::invalid("learner.command", "must name a program"));
                }
                if !(ext.timeout_s > 0.0 && ext.timeout_s.is_finite()) {
                    return Err(ConfigError::invalid("learner.timeout_s", "must be > 0"));
                }
            }
            _ => {}
        }
        if let LearnerSpec::FactMemory { .. } = self.learner {
            if !matches!(self.strategy.kind, StrategyKind::Vanilla | StrategyKind::Rehearsal) {
                return Err(ConfigError::invalid(
                    "strategy.kind",
                    format!("`{}` needs a parametric learner", self.strategy.kind.name()),
                ));
            }
        }
        self.strategy
            .validate()
            .map_err(|e| ConfigError::invalid("strategy", e.to_string()))
    }

    /// Cost model of the configured strategy.
    pub fn cost_model(&self) -> CostModel {
        CostModel {
            per_token_cost: self.per_token_cost,
            multiplier: self.strategy.multiplier(),
        }
    }

    /// Cost model used for the reference dry run of `kind`.
    pub fn reference_cost_model(&self, kind: StrategyKind) -> CostModel {
        let multiplier = if kind == self.strategy.kind {
            self.strategy.multiplier()
        } else {
            kind.default_multiplier()
        };
        CostModel {
            per_token_cost: self.per_token_cost,
            multiplier,
        }
    }

    /// Whether the run calls `embed` on the learner.
    pub fn needs_embed(&self) -> bool {
        self.kg_probes > 0 || self.coreset.method == CoresetMethod::Kcenter
    }
}

/// A loaded stream plus the templates needed to parse its texts.
#[derive(Debug, Clone)]
pub struct LoadedStream {
    pub stream: Stream,
    pub templates: TemplateSet,
    pub universe: Option<FactUniverse>,
}

pub fn load_stream(source: &StreamSource) -> Result<LoadedStream, ConfigError> {
    match source {
        StreamSource::Generate(cfg) => {
            let (universe, stream) = cfg.generate()?;
            Ok(LoadedStream {
                stream,
                templates: universe.templates.clone(),
                universe: Some(universe),
            })
        }
        StreamSource::Files(f) => Ok(LoadedStream {
            stream: read_stream(&f.knowledge, &f.qa, f.mode)?,
            templates: TemplateSet::builtin(f.relations),
            universe: None,
        }),
    }
}

/// Builds the configured learner, wrapping it for rehearsal when asked.
pub fn build_learner(cfg: &RunConfig, loaded: &LoadedStream) -> Result<Box<dyn Learner>, ConfigError> {
    let seeds = cfg.seeds();
    let cost = cfg.cost_model();
    let base: Box<dyn Learner> = match &cfg.learner {
        LearnerSpec::FactMemory { capacity, eviction } => Box::new(FactMemoryLearner::new(
            loaded.templates.clone(),
            *capacity,
            *eviction,
            seeds.learner,
            cost,
            cfg.embed_dim,
        )?),
        LearnerSpec::HashedSoftmax { lr } => Box::new(HashedSoftmaxLearner::new(
            cfg.embed_dim,
            loaded.stream.answer_vocabulary(),
            loaded.templates.clone(),
            HashedSoftmaxConfig {
                lr: *lr,
                seed: seeds.learner,
            },
            cfg.strategy.clone(),
            cost,
        )?),
        LearnerSpec::External(ext) => {
            let mut required = Vec::new();
            if cfg.needs_embed() {
                required.push("embed");
            }
            if cfg.coreset.method == CoresetMethod::ModelBased {
                required.push("predict_loss");
            }
            Box::new(ExternalLearner::spawn(ext, cfg.embed_dim, &required).map_err(LearnerError::from)?)
        }
    };
    Ok(if cfg.strategy.kind == StrategyKind::Rehearsal {
        Box::new(Rehearsal::new(base, cfg.strategy.rehearsal.clone(), seeds.rehearsal))
    } else {
        base
    })
}

/// A sweep over one configuration axis; presets are pure config deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPreset {
    pub name: String,
    pub axis: String,
    pub cells: Vec<(String, RunConfig)>,
}

pub const RATIO_SWEEP: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// Coreset-ratio sweep over `base`.
pub fn preset_ratio(base: &RunConfig) -> Result<ExperimentPreset, ConfigError> {
    if base.coreset.method == CoresetMethod::None {
        return Err(ConfigError::invalid("coreset.method", "ratio sweep needs a coreset method"));
    }
    let cells = RATIO_SWEEP
        .iter()
        .map(|&r| {
            let mut cfg = base.clone();
            cfg.coreset.ratio = r;
            (format!("{r}"), cfg)
        })
        .collect();
    Ok(ExperimentPreset {
        name: "ratio".into(),
        axis: "coreset.ratio".into(),
        cells,
    })
}

pub fn preset_by_name(name: &str, base: &RunConfig) -> Result<ExperimentPreset, ConfigError> {
    match name {
        "ratio" => preset_ratio(base),
        other => Err(ConfigError::invalid("preset", format!("unknown preset `{other}`"))),
    }
}
