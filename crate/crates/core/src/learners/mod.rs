//! The learner contract, toy learners and continual-learning strategies.
//!
//! Two in-process learners are provided:
//! - [`FactMemoryLearner`]: a capacity-limited associative store that parses
//!   knowledge items back into triples.
//! - [`HashedSoftmaxLearner`]: a single-pass SGD softmax classifier over
//!   hashed query features, hosting the regularization, low-rank, adapter
//!   and distillation analogues.
//!
//! Rehearsal is a wrapper ([`Rehearsal`]) usable around any learner.

mod fact_memory;
mod hashed_softmax;
mod rehearsal;

pub use fact_memory::{Eviction, FactMemoryLearner};
pub use hashed_softmax::{distill_term, HashedSoftmaxConfig, HashedSoftmaxLearner, UNLEARNABLE_LOSS};
pub use rehearsal::Rehearsal;


use crate::types::{EmbeddingVector, KnowledgeItem};
use serde::{Deserialize, Serialize};
use std::str::FromStr;
use thiserror::Error;

/// Answer returned when a learner abstains.
pub const UNKNOWN_ANSWER: &str = "<unk>";

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("strategy `{0}` is not supported by this learner")]
    UnsupportedStrategy(&'static str),
    #[error("rank {rank} is not low-rank for a {rows}x{cols} weight matrix")]
    RankTooLarge { rank: usize, rows: usize, cols: usize },
    #[error("invalid learner configuration: {0}")]
    Config(String),
    #[error("external learner failed")]
    Protocol(#[from] crate::extproto::ProtocolError),
}

/// Simulated cost of training: `per_token_cost * tokens * multiplier`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub per_token_cost: f64,
    pub multiplier: f64,
}

impl CostModel {
    pub fn seconds(&self, tokens: u64) -> f64 {
        self.per_token_cost * tokens as f64 * self.multiplier
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Tokens trained on, including rehearsal replays.
    pub tokens_processed: u64,
    pub cost_seconds: f64,
    pub items_seen: usize,
    /// Items that could not be learned (unparseable or out of vocabulary).
    pub skipped: usize,
    /// Portion of `tokens_processed` that came from replayed items.
    pub replay_tokens: u64,
}

/// Operations every learner provides. All calls take `&mut self` so that
/// out-of-process learners fit the same contract; in-process learners keep
/// `answer`, `embed` and `predict_loss` free of observable side effects.
pub trait Learner {
    /// Called once at the start of stream step `t` (1-based), before any
    /// other call for that step.
    fn begin_step(&mut self, _t: usize) -> Result<(), LearnerError> {
        Ok(())
    }

    /// Single pass over `items`.
    fn train_batch(&mut self, items: &[KnowledgeItem]) -> Result<TrainReport, LearnerError>;

    fn answer(&mut self, queries: &[String]) -> Result<Vec<String>, LearnerError>;

    /// Model-knowledge embeddings of `texts`.
    fn embed(&mut self, texts: &[String]) -> Result<Vec<EmbeddingVector>, LearnerError>;

    fn predict_loss(&mut self, items: &[KnowledgeItem]) -> Result<Vec<f64>, LearnerError>;

    /// Changes iff the learner's parameters changed.
    fn snapshot_id(&mut self) -> Result<u64, LearnerError>;
}

impl<L: Learner + ?Sized> Learner for Box<L> {
    fn begin_step(&mut self, t: usize) -> Result<(), LearnerError> {
        (**self).begin_step(t)
    }
    fn train_batch(&mut self, items: &[KnowledgeItem]) -> Result<TrainReport, LearnerError> {
        (**self).train_batch(items)
    }
    fn answer(&mut self, queries: &[String]) -> Result<Vec<String>, LearnerError> {
        (**self).answer(queries)
    }
    fn embed(&mut self, texts: &[String]) -> Result<Vec<EmbeddingVector>, LearnerError> {
        (**self).embed(texts)
    }
    fn predict_loss(&mut self, items: &[KnowledgeItem]) -> Result<Vec<f64>, LearnerError> {
        (**self).predict_loss(items)
    }
    fn snapshot_id(&mut self) -> Result<u64, LearnerError> {
        (**self).snapshot_id()
    }
}

// ---------------------------------------------------------------------------
// Strategies
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    #[default]
    Vanilla,
    Rehearsal,
    RegAnneal,
    Lowrank,
    Adapter,
    Distill,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        Self::Vanilla,
        Self::Rehearsal,
        Self::RegAnneal,
        Self::Lowrank,
        Self::Adapter,
        Self::Distill,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::Rehearsal => "rehearsal",
            Self::RegAnneal => "reg_anneal",
            Self::Lowrank => "lowrank",
            Self::Adapter => "adapter",
            Self::Distill => "distill",
        }
    }

    /// Default simulated per-token cost multiplier.
    pub fn default_multiplier(self) -> f64 {
        match self {
            Self::Vanilla | Self::Rehearsal => 1.0,
            Self::RegAnneal => 1.15,
            Self::Lowrank => 0.7,
            Self::Adapter => 0.8,
            Self::Distill => 2.0,
        }
    }
}

impl FromStr for StrategyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RehearsalConfig {
    pub capacity: usize,
    pub m0: f64,
    pub gamma: f64,
    pub placement: ReplayPlacement,
}

/// Where replayed items go in the training batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReplayPlacement {
    #[default]
    Before,
    /// Seeded shuffle of replays and new items.
    Interleaved,
    After,
}

impl Default for RehearsalConfig {
    fn default() -> Self {
        Self {
            capacity: 512,
            m0: 0.5,
            gamma: 0.9,
            placement: ReplayPlacement::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AnnealSchedule {
    /// `λ0 / (1 + t)`.
    #[default]
    Inverse,
    /// `λ0 · rate^t`, `rate` in `[0, 1]`.
    Exponential { rate: f64 },
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    pub lambda0: f64,
    pub schedule: AnnealSchedule,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            lambda0: 0.1,
            schedule: AnnealSchedule::Inverse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LowrankConfig {
    pub rank: usize,
}

impl Default for LowrankConfig {
    fn default() -> Self {
        Self { rank: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// Width of the reserved feature sub-space.
    pub dim: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { dim: 160 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub alpha: f64,
    /// Teacher refresh period in steps.
    pub cadence: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            cadence: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub rehearsal: RehearsalConfig,
    pub reg_anneal: RegConfig,
    pub lowrank: LowrankConfig,
    pub adapter: AdapterConfig,
    pub distill: DistillConfig,
    /// Overrides the kind's default multiplier.
    pub cost_multiplier: Option<f64>,
}

impl StrategyConfig {
    pub fn of(kind: StrategyKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn multiplier(&self) -> f64 {
        self.cost_multiplier.unwrap_or(self.kind.default_multiplier())
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |m: &str| Err(LearnerError::Config(m.to_string()));
        let r = &self.rehearsal;
        if !(r.m0 >= 0.0) {
            return bad("rehearsal.m0 must be >= 0");
        }
        if !(0.0..1.0).contains(&r.gamma) {
            return bad("rehearsal.gamma must be in [0, 1)");
        }
        if !(self.reg_anneal.lambda0 >= 0.0) {
            return bad("reg_anneal.lambda0 must be >= 0");
        }
        if let AnnealSchedule::Exponential { rate } = self.reg_anneal.schedule {
            if !(0.0..=1.0).contains(&rate) {
                return bad("reg_anneal.schedule.rate must be in [0, 1]");
            }
        }
        if !(self.distill.alpha >= 0.0) {
            return bad("distill.alpha must be >= 0");
        }
        if self.distill.cadence == 0 {
            return bad("distill.cadence must be >= 1");
        }
        if self.lowrank.rank == 0 {
            return bad("lowrank.rank must be >= 1");
        }
        if self.adapter.dim == 0 {
            return bad("adapter.dim must be >= 1");
        }
        if let Some(m) = self.cost_multiplier {
            if !(m >= 0.0) {
                return bad("cost_multiplier must be >= 0");
            }
        }
        Ok(())
    }
}

/// Rehearsal mix ratio at 0-based step `t`: `m0 · γ^t`.
pub fn strategy_mix_ratio(t: usize, m0: f64, gamma: f64) -> f64 {
    m0 * gamma.powi(t.min(i32::MAX as usize) as i32)
}

/// Regularization strength at 0-based step `t`.
pub fn strategy_reg_strength(t: usize, lambda0: f64, schedule: AnnealSchedule) -> f64 {
    match schedule {
        AnnealSchedule::Inverse => lambda0 / (1.0 + t as f64),
        AnnealSchedule::Exponential { rate } => lambda0 * rate.powi(t.min(i32::MAX as usize) as i32),
        AnnealSchedule::Constant => lambda0,
    }
}
