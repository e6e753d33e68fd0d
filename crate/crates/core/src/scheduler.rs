//! The online update/evaluate loop.
//!
//! Per step `t`: pre-evaluate on task `t` (`R[t-1][t]`), select a coreset,
//! apply the compute budget, train once, post-evaluate on tasks `t` and
//! `t-1` (`R[t][t]`, `R[t][t-1]`), capture knowledge gaps on the frozen
//! probe set and recompute the running metrics. Only those adjacent cells of
//! the accuracy matrix are ever filled.

use crate::config::{
    build_learner, load_stream, BudgetConfig, ClockMode, ConfigError, CoresetMethod, RunConfig, Seeds, TokenAccounting,
};
use crate::coreset::{select_kcenter, select_model_based, select_random, CoresetError};
use crate::datagen::{Stream, StreamStep};
use crate::learners::{CostModel, Learner, LearnerError, StrategyKind};
use crate::metrics::{bwt, exact_match, fwt, kar, knowledge_gap, MetricError, MetricsRecord};
use crate::text::hash_embed;
use crate::types::{AccuracyMatrix, EmbeddingVector, KnowledgeItem, MatrixError};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Coreset(#[from] CoresetError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error("task has no QA items")]
    EmptyQa,
}

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("stream has {0} steps; at least 2 are required")]
    TooFewSteps(usize),
    #[error("budget must be >= 0, got {0}")]
    NegativeBudget(f64),
    #[error("item {0} has a negative or undefined cost")]
    NegativeCost(usize),
    #[error("budget fraction must be > 0, got {0}")]
    Fraction(f64),
    #[error("unknown reference strategy `{0}`")]
    UnknownStrategy(String),
    #[error("step {step}, {phase}: {source}")]
    Step {
        step: usize,
        phase: &'static str,
        #[source]
        source: StepError,
    },
    #[error("learner setup failed: {0}")]
    Setup(#[source] StepError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl SchedulerError {
    /// 1-based step at which the run failed, if it failed inside the loop.
    pub fn step(&self) -> Option<usize> {
        match self {
            Self::Step { step, .. } => Some(*step),
            _ => None,
        }
    }
}

/// Where each arrived token of a step went.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StepAccounting {
    pub t: usize,
    pub items_arrived: usize,
    pub items_selected_out: usize,
    pub items_discarded: usize,
    pub items_trained: usize,
    pub tokens_arrived: u64,
    pub tokens_selected_out: u64,
    pub tokens_discarded: u64,
    /// New items plus replays.
    pub tokens_trained: u64,
    pub tokens_replayed: u64,
    /// `None` when unlimited.
    pub budget_s: Option<f64>,
    pub selection_cost_s: f64,
    /// Time charged at this step, selection included.
    pub time_s: f64,
    pub snapshot_changed: bool,
}

impl StepAccounting {
    /// `arrived = selected_out + discarded + (trained - replayed)`.
    pub fn conserves_tokens(&self) -> bool {
        self.tokens_trained >= self.tokens_replayed
            && self.tokens_arrived == self.tokens_selected_out + self.tokens_discarded + self.tokens_trained - self.tokens_replayed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Totals {
    pub tokens_arrived: u64,
    pub tokens_trained: u64,
    pub tokens_replayed: u64,
    pub tokens_selected_out: u64,
    pub tokens_discarded: u64,
    pub items_arrived: usize,
    pub items_trained: usize,
    pub items_selected_out: usize,
    pub items_discarded: usize,
    pub train_time_s: f64,
}

impl Totals {
    fn from_steps(steps: &[StepAccounting]) -> Self {
        let mut t = Self::default();
        for s in steps {
            t.tokens_arrived += s.tokens_arrived;
            t.tokens_trained += s.tokens_trained;
            t.tokens_replayed += s.tokens_replayed;
            t.tokens_selected_out += s.tokens_selected_out;
            t.tokens_discarded += s.tokens_discarded;
            t.items_arrived += s.items_arrived;
            t.items_trained += s.items_trained;
            t.items_selected_out += s.items_selected_out;
            t.items_discarded += s.items_discarded;
            t.train_time_s += s.time_s;
        }
        t
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<MetricsRecord>,
    pub matrix: AccuracyMatrix,
    pub steps: Vec<StepAccounting>,
    pub totals: Totals,
    /// Final model evaluated on the QA of every task.
    pub final_em_seen: f64,
    pub n_probes: usize,
    pub config: RunConfig,
    pub seeds: Seeds,
}

impl RunResult {
    pub fn last(&self) -> &MetricsRecord {
        self.records.last().expect("runs have at least two steps")
    }

    /// Mean of the per-step post-training EM.
    pub fn mean_em(&self) -> f64 {
        self.records.iter().map(|r| r.em).sum::<f64>() / self.records.len() as f64
    }
}

/// Number of leading costs whose running sum stays within `budget`.
pub fn budget_prefix(costs: &[f64], budget: f64) -> Result<usize, SchedulerError> {
    if !(budget >= 0.0) {
        return Err(SchedulerError::NegativeBudget(budget));
    }
    if let Some(i) = costs.iter().position(|c| !(*c >= 0.0)) {
        return Err(SchedulerError::NegativeCost(i));
    }
    let mut spent = 0.0;
    for (i, c) in costs.iter().enumerate() {
        spent += c;
        if spent > budget {
            return Ok(i);
        }
    }
    Ok(costs.len())
}

/// Splits `items` into the kept prefix and the discarded rest.
pub fn budget_filter<'a>(
    items: &'a [KnowledgeItem],
    budget_seconds: f64,
    cost: &CostModel,
) -> Result<(&'a [KnowledgeItem], &'a [KnowledgeItem]), SchedulerError> {
    let costs: Vec<f64> = items.iter().map(|k| cost.seconds(k.token_count as u64)).collect();
    let keep = budget_prefix(&costs, budget_seconds)?;
    Ok(items.split_at(keep))
}

/// Predicted cost of training on all of `items`, summed in arrival order.
pub fn dry_run_cost(items: &[KnowledgeItem], cost: &CostModel) -> f64 {
    items.iter().map(|k| cost.seconds(k.token_count as u64)).sum()
}

/// Per-step budgets: `fraction` of the reference strategy's dry-run cost.
pub fn resolve_reference_budget(
    fraction: f64,
    reference_strategy: &str,
    stream: &Stream,
    cfg: &RunConfig,
) -> Result<Vec<f64>, SchedulerError> {
    if !(fraction > 0.0 && fraction.is_finite()) {
        return Err(SchedulerError::Fraction(fraction));
    }
    let kind: StrategyKind = reference_strategy
        .parse()
        .map_err(|_| SchedulerError::UnknownStrategy(reference_strategy.to_string()))?;
    let cost = cfg.reference_cost_model(kind);
    Ok(stream
        .steps
        .iter()
        .map(|s| fraction * dry_run_cost(&s.knowledge, &cost))
        .collect())
}

/// Per-step budget in seconds (`INFINITY` when unlimited).
pub fn step_budgets(cfg: &RunConfig, stream: &Stream) -> Result<Vec<f64>, SchedulerError> {
    match &cfg.budget {
        BudgetConfig::Unlimited => Ok(vec![f64::INFINITY; stream.len()]),
        BudgetConfig::PerStep { seconds } => {
            if !(*seconds >= 0.0) {
                return Err(SchedulerError::NegativeBudget(*seconds));
            }
            Ok(vec![*seconds; stream.len()])
        }
        BudgetConfig::Reference { fraction, strategy } => resolve_reference_budget(*fraction, strategy, stream, cfg),
    }
}

/// The frozen KG probe set: per task, a seeded sample of its QA queries.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub queries: Vec<String>,
    /// 1-based task of each probe.
    pub tasks: Vec<usize>,
}

impl ProbeSet {
    /// Draws `ceil(total / T)` probes from each task (fewer if it has fewer
    /// QA items).
    pub fn stratified(stream: &Stream, total: usize, seed: u64) -> Self {
        let mut queries = Vec::new();
        let mut tasks = Vec::new();
        if total == 0 || stream.is_empty() {
            return Self { queries, tasks };
        }
        let quota = total.div_ceil(stream.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for step in &stream.steps {
            let n = step.qa.len();
            let mut picks = sample(&mut rng, n, quota.min(n)).into_vec();
            picks.sort_unstable();
            for i in picks {
                queries.push(step.qa[i].query.clone());
                tasks.push(step.index);
            }
        }
        Self { queries, tasks }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

fn subset(vs: &[EmbeddingVector], tasks: &[usize], keep: impl Fn(usize) -> bool) -> Vec<EmbeddingVector> {
    vs.iter()
        .zip(tasks)
        .filter(|(_, &t)| keep(t))
        .map(|(v, _)| v.clone())
        .collect()
}

/// Gap over a possibly empty probe subset; empty subsets score 0.
fn gap_or_zero(a: &[EmbeddingVector], b: &[EmbeddingVector]) -> Result<f64, MetricError> {
    if a.is_empty() {
        Ok(0.0)
    } else {
        knowledge_gap(a, b)
    }
}

fn evaluate(learner: &mut dyn Learner, step: &StreamStep) -> Result<f64, StepError> {
    if step.qa.is_empty() {
        return Err(StepError::EmptyQa);
    }
    let queries: Vec<String> = step.qa.iter().map(|q| q.query.clone()).collect();
    let answers = learner.answer(&queries)?;
    let golds: Vec<&str> = step.qa.iter().map(|q| q.gold.as_str()).collect();
    Ok(exact_match(&answers, &golds)?)
}

fn select(
    learner: &mut dyn Learner,
    cfg: &RunConfig,
    items: &[KnowledgeItem],
    seed: u64,
) -> Result<Vec<usize>, StepError> {
    let ratio = cfg.coreset.ratio;
    let picked = match cfg.coreset.method {
        CoresetMethod::None => return Ok((0..items.len()).collect()),
        CoresetMethod::Random => select_random(items.len(), ratio, seed)?,
        CoresetMethod::Kcenter => {
            let texts: Vec<String> = items.iter().map(|k| k.text.clone()).collect();
            select_kcenter(&learner.embed(&texts)?, ratio)?
        }
        CoresetMethod::ModelBased => select_model_based(&learner.predict_loss(items)?, ratio, cfg.coreset.order)?,
    };
    Ok(picked.indices)
}

fn tokens(items: &[KnowledgeItem]) -> u64 {
    items.iter().map(|k| k.token_count as u64).sum()
}

/// Runs the online loop of `cfg` over `stream` with `learner`.
pub fn run_experiment(cfg: &RunConfig, stream: &Stream, learner: &mut dyn Learner) -> Result<RunResult, SchedulerError> {
    let n_steps = stream.len();
    if n_steps < 2 {
        return Err(SchedulerError::TooFewSteps(n_steps));
    }
    let seeds = cfg.seeds();
    let budgets = step_budgets(cfg, stream)?;
    let cost = cfg.cost_model();
    let probes = ProbeSet::stratified(stream, cfg.kg_probes, seeds.probes);
    let world: Vec<EmbeddingVector> = probes.queries.iter().map(|q| hash_embed(q, cfg.embed_dim)).collect();
    let mut prev_embed = if probes.is_empty() {
        Vec::new()
    } else {
        learner
            .embed(&probes.queries)
            .map_err(|e| SchedulerError::Setup(e.into()))?
    };
    let mut coreset_rng = ChaCha8Rng::seed_from_u64(seeds.coreset);

    let mut matrix = AccuracyMatrix::new();
    let mut records = Vec::with_capacity(n_steps);
    let mut steps = Vec::with_capacity(n_steps);
    let mut cum_trained = 0u64;
    let mut cum_arrived = 0u64;
    let mut cum_time = 0.0f64;

    for (k, step) in stream.steps.iter().enumerate() {
        let t = k + 1;
        let at = |phase: &'static str| move |e: StepError| SchedulerError::Step { step: t, phase, source: e };
        let fail = |phase: &'static str| move |e: LearnerError| SchedulerError::Step {
            step: t,
            phase,
            source: e.into(),
        };

        learner.begin_step(t).map_err(fail("begin"))?;
        let snapshot_before = learner.snapshot_id().map_err(fail("snapshot"))?;

        // PRE-EVAL
        let pre = evaluate(learner, step).map_err(at("pre-eval"))?;
        matrix.set(t - 1, t, pre).map_err(|e| at("pre-eval")(e.into()))?;

        // SELECT
        let items = &step.knowledge;
        let mut acct = StepAccounting {
            t,
            items_arrived: items.len(),
            tokens_arrived: tokens(items),
            budget_s: budgets[k].is_finite().then_some(budgets[k]),
            ..Default::default()
        };
        let selected: Vec<KnowledgeItem> = if items.is_empty() {
            Vec::new()
        } else {
            let seed = rand::Rng::gen::<u64>(&mut coreset_rng);
            let idx = select(learner, cfg, items, seed).map_err(at("select"))?;
            idx.into_iter().map(|i| items[i].clone()).collect()
        };
        acct.items_selected_out = items.len() - selected.len();
        acct.tokens_selected_out = acct.tokens_arrived - tokens(&selected);
        if cfg.coreset.method != CoresetMethod::None && !items.is_empty() {
            acct.selection_cost_s = cfg.coreset.selection_cost_fraction * dry_run_cost(items, &cost);
        }

        // BUDGET
        let remaining = (budgets[k] - acct.selection_cost_s).max(0.0);
        let (kept, dropped) = budget_filter(&selected, remaining, &cost)?;
        acct.items_discarded = dropped.len();
        acct.tokens_discarded = tokens(dropped);
        acct.items_trained = kept.len();

        // TRAIN
        let started = Instant::now();
        let report = learner.train_batch(kept).map_err(fail("train"))?;
        let elapsed = started.elapsed().as_secs_f64();
        acct.tokens_replayed = report.replay_tokens;
        acct.tokens_trained = tokens(kept) + report.replay_tokens;
        let train_time = match cfg.clock {
            ClockMode::Simulated => report.cost_seconds,
            ClockMode::Wall => elapsed,
        };
        acct.time_s = acct.selection_cost_s + train_time;
        acct.snapshot_changed = learner.snapshot_id().map_err(fail("snapshot"))? != snapshot_before;

        // POST-EVAL
        let post = evaluate(learner, step).map_err(at("post-eval"))?;
        matrix.set(t, t, post).map_err(|e| at("post-eval")(e.into()))?;
        if t >= 2 {
            let back = evaluate(learner, &stream.steps[k - 1]).map_err(at("post-eval"))?;
            matrix.set(t, t - 1, back).map_err(|e| at("post-eval")(e.into()))?;
        }

        // KG
        let (kg_alignment, kg_forgetting, kg_updating) = if probes.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            let cur = learner.embed(&probes.queries).map_err(fail("kg"))?;
            let seen = |task: usize| task <= t;
            let earlier = |task: usize| task < t;
            let latest = |task: usize| task == t;
            let kg = || -> Result<(f64, f64, f64), MetricError> {
                Ok((
                    gap_or_zero(&subset(&world, &probes.tasks, seen), &subset(&cur, &probes.tasks, seen))?,
                    gap_or_zero(&subset(&prev_embed, &probes.tasks, earlier), &subset(&cur, &probes.tasks, earlier))?,
                    gap_or_zero(&subset(&cur, &probes.tasks, latest), &subset(&prev_embed, &probes.tasks, latest))?,
                ))
            };
            let triple = kg().map_err(|e| at("kg")(e.into()))?;
            prev_embed = cur;
            triple
        };

        // METRICS
        cum_trained += acct.tokens_trained;
        cum_arrived += acct.tokens_arrived;
        cum_time += acct.time_s;
        let (b, f) = if t >= 2 {
            (
                bwt(&matrix, t).map_err(|e| at("metrics")(e.into()))?,
                fwt(&matrix, t).map_err(|e| at("metrics")(e.into()))?,
            )
        } else {
            (0.0, 0.0)
        };
        let token_basis = match cfg.token_accounting {
            TokenAccounting::Trained => cum_trained,
            TokenAccounting::Arrived => cum_arrived,
        };
        let rate = if cum_time > 0.0 {
            kar(f, b, token_basis as f64, cum_time).map_err(|e| at("metrics")(e.into()))?
        } else {
            0.0
        };
        records.push(MetricsRecord {
            t,
            em: post,
            bwt: b,
            fwt: f,
            kar: rate,
            kg_alignment,
            kg_forgetting,
            kg_updating,
            tokens_trained: cum_trained,
            train_time_s: cum_time,
            discarded_items: acct.items_discarded,
        });
        steps.push(acct);
    }

    let all_qa: Vec<String> = stream.qa().map(|q| q.query.clone()).collect();
    let all_gold: Vec<&str> = stream.qa().map(|q| q.gold.as_str()).collect();
    let final_fail = |e: StepError| SchedulerError::Step {
        step: n_steps,
        phase: "final-eval",
        source: e,
    };
    let answers = learner.answer(&all_qa).map_err(|e| final_fail(e.into()))?;
    let final_em_seen = exact_match(&answers, &all_gold).map_err(|e| final_fail(e.into()))?;

    Ok(RunResult {
        totals: Totals::from_steps(&steps),
        records,
        matrix,
        steps,
        final_em_seen,
        n_probes: probes.len(),
        config: cfg.clone(),
        seeds,
    })
}

/// Loads the stream, builds the learner and runs `cfg` end to end.
pub fn execute(cfg: &RunConfig) -> Result<RunResult, SchedulerError> {
    let loaded = load_stream(&cfg.stream)?;
    let mut learner = build_learner(cfg, &loaded)?;
    run_experiment(cfg, &loaded.stream, &mut *learner)
}
