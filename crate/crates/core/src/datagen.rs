//! Synthetic fact universes and the knowledge / QA streams built from them.
//!
//! A universe is a grid of `n_entities × n_relations` fact chains. A chosen
//! fraction of chains is time-variant and receives extra versions at
//! distinct days inside the horizon. Streams split the horizon into equal
//! date windows, one per step; every fact version is emitted in the step
//! whose window contains its `valid_from`, together with one QA probe.

use crate::text::token_count;
use crate::types::{Day, Fact, KnowledgeItem, QAItem};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("variant_fraction {0} is outside [0, 1]")]
    VariantFraction(f64),
    #[error("{0} must be at least {1}")]
    TooSmall(&'static str, u64),
    #[error("horizon {horizon} cannot hold {versions} distinct version dates")]
    HorizonTooShort { horizon: u32, versions: u32 },
    #[error("no template for relation `{0}`")]
    MissingTemplate(String),
    #[error("universe has no facts")]
    NoFacts,
    #[error("step {0} received no fact versions; use fewer steps or a larger universe")]
    EmptyStep(usize),
    #[error("horizon {horizon} is shorter than the number of steps {steps}")]
    HorizonBelowSteps { horizon: u32, steps: usize },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error("stream record refers to step 0 or has no steps")]
    BadStep,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

/// How objects of a relation are drawn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Entity,
    Number,
    /// 1-3 words from the lexicon.
    Words(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTemplate {
    pub relation: String,
    /// Statement with `{s}` and `{o}` placeholders.
    pub statement: String,
    /// Question with a `{s}` placeholder.
    pub question: String,
    pub values: ValueKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Lit(String),
    Subject,
    Object,
}

fn compile(template: &str) -> Vec<Segment> {
    let mut segs = Vec::new();
    let mut rest = template;
    while !rest.is_empty() {
        let next = [("{s}", Segment::Subject), ("{o}", Segment::Object)]
            .into_iter()
            .filter_map(|(pat, seg)| rest.find(pat).map(|at| (at, seg)))
            .min_by_key(|(at, _)| *at);
        match next {
            Some((at, seg)) => {
                if at > 0 {
                    segs.push(Segment::Lit(rest[..at].to_string()));
                }
                segs.push(seg);
                rest = &rest[at + 3..];
            }
            None => {
                segs.push(Segment::Lit(rest.to_string()));
                rest = "";
            }
        }
    }
    segs
}

/// Matches `text` against compiled segments. Slots are non-greedy except the
/// slot before the final literal, which extends to that literal at the end.
fn match_segments<'t>(segs: &[Segment], text: &'t str) -> Option<(Option<&'t str>, Option<&'t str>)> {
    let mut pos = 0usize;
    let mut subject = None;
    let mut object = None;
    let mut i = 0;
    while i < segs.len() {
        match &segs[i] {
            Segment::Lit(lit) => {
                if !text[pos..].starts_with(lit.as_str()) {
                    return None;
                }
                pos += lit.len();
                i += 1;
            }
            slot => {
                let end = match segs.get(i + 1) {
                    None => text.len(),
                    Some(Segment::Lit(lit)) if i + 2 == segs.len() => {
                        if !text.ends_with(lit.as_str()) || text.len() < pos + lit.len() {
                            return None;
                        }
                        text.len() - lit.len()
                    }
                    Some(Segment::Lit(lit)) => pos + text[pos..].find(lit.as_str())?,
                    Some(_) => return None,
                };
                let value = &text[pos..end];
                if value.is_empty() || value.trim() != value {
                    return None;
                }
                match slot {
                    Segment::Subject => subject = Some(value),
                    Segment::Object => object = Some(value),
                    Segment::Lit(_) => unreachable!(),
                }
                pos = end;
                i += 1;
            }
        }
    }
    (pos == text.len()).then_some((subject, object))
}

/// Parsed (subject, relation, object) triple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

/// Parsed query: the (subject, relation) key plus an optional date qualifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedQuery {
    pub subject: String,
    pub relation: String,
    pub as_of: Option<Day>,
}

const DATE_PREFIX: &str = "As of day ";

/// Ordered per-relation render templates. Parsing tries templates in order,
/// so the lowest index wins when a text matches several.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub relations: Vec<RelationTemplate>,
}

fn words(list: &[&str]) -> ValueKind {
    ValueKind::Words(list.iter().map(|s| s.to_string()).collect())
}

impl TemplateSet {
    /// Shipped relation templates, padded with generic linked-by relations
    /// when more than the shipped count is requested.
    pub fn builtin(n_relations: usize) -> Self {
        let places = [
            "North", "South", "Port", "Lake", "Amber", "Vale", "Harbor", "Ridge", "Cedar", "Falls",
            "Stone", "Marsh",
        ];
        let titles = [
            "president", "minister", "mayor", "chair", "director", "governor", "senator",
            "ambassador", "deputy", "acting", "chief", "secretary",
        ];
        let schools = [
            "Institute", "College", "Academy", "Polytechnic", "Royal", "Central", "Western",
            "Eastern", "Technical", "Normal",
        ];
        let awards = [
            "Gold", "Silver", "Star", "Medal", "Prize", "Order", "Laurel", "Cross", "Merit", "Honor",
        ];
        let shipped = vec![
            ("employer", "{s} works for {o}.", "{s} works for?", ValueKind::Entity),
            ("position_held", "{s} holds the position of {o}.", "{s} holds the position of?", words(&titles)),
            ("residence", "{s} lives in {o}.", "{s} lives in?", words(&places)),
            ("member_of_team", "{s} plays for {o}.", "{s} plays for?", ValueKind::Entity),
            ("spouse", "{s} is married to {o}.", "{s} is married to?", ValueKind::Entity),
            ("population", "{s} has a population of {o}.", "{s} has a population of?", ValueKind::Number),
            ("head_of", "{s} is led by {o}.", "{s} is led by?", ValueKind::Entity),
            ("educated_at", "{s} studied at {o}.", "{s} studied at?", words(&schools)),
            ("owned_by", "{s} is owned by {o}.", "{s} is owned by?", ValueKind::Entity),
            ("capital", "{s} has its capital in {o}.", "{s} has its capital in?", words(&places)),
            ("award_received", "{s} received the award {o}.", "{s} received the award?", words(&awards)),
            ("citizenship", "{s} is a citizen of {o}.", "{s} is a citizen of?", words(&places)),
        ];
        let mut relations: Vec<RelationTemplate> = shipped
            .into_iter()
            .take(n_relations)
            .map(|(r, st, q, v)| RelationTemplate {
                relation: r.to_string(),
                statement: st.to_string(),
                question: q.to_string(),
                values: v,
            })
            .collect();
        for k in relations.len()..n_relations {
            relations.push(RelationTemplate {
                relation: format!("P{k}"),
                statement: format!("{{s}} is linked by P{k} to {{o}}."),
                question: format!("{{s}} is linked by P{k} to?"),
                values: ValueKind::Entity,
            });
        }
        Self { relations }
    }

    pub fn get(&self, relation: &str) -> Option<&RelationTemplate> {
        self.relations.iter().find(|t| t.relation == relation)
    }

    pub fn render_statement(&self, subject: &str, relation: &str, object: &str) -> Result<String, DatagenError> {
        let t = self
            .get(relation)
            .ok_or_else(|| DatagenError::MissingTemplate(relation.to_string()))?;
        Ok(t.statement.replace("{s}", subject).replace("{o}", object))
    }

    /// Date-qualified question for a (subject, relation) key.
    pub fn render_query(&self, subject: &str, relation: &str, as_of: Day) -> Result<String, DatagenError> {
        let t = self
            .get(relation)
            .ok_or_else(|| DatagenError::MissingTemplate(relation.to_string()))?;
        Ok(format!("{DATE_PREFIX}{as_of}, {}", t.question.replace("{s}", subject)))
    }

    /// Inverse of [`render_statement`](Self::render_statement).
    pub fn parse_statement(&self, text: &str) -> Option<Triple> {
        self.relations.iter().find_map(|t| {
            let (s, o) = match_segments(&compile(&t.statement), text)?;
            Some(Triple {
                subject: s?.to_string(),
                relation: t.relation.clone(),
                object: o?.to_string(),
            })
        })
    }

    /// Parses a question with or without the `As of day N, ` qualifier.
    pub fn parse_query(&self, text: &str) -> Option<ParsedQuery> {
        let text = text.trim();
        let (as_of, body) = match text.strip_prefix(DATE_PREFIX) {
            Some(rest) => {
                let (num, body) = rest.split_once(", ")?;
                (Some(num.parse::<Day>().ok()?), body)
            }
            None => (None, text),
        };
        self.relations.iter().find_map(|t| {
            let (s, _) = match_segments(&compile(&t.question), body)?;
            Some(ParsedQuery {
                subject: s?.to_string(),
                relation: t.relation.clone(),
                as_of,
            })
        })
    }
}

/// Renders one fact version as a knowledge item.
pub fn render_knowledge_item(fact: &Fact, templates: &TemplateSet, item_id: String, step: usize) -> Result<KnowledgeItem, DatagenError> {
    let text = templates.render_statement(&fact.subject, &fact.relation, &fact.object)?;
    Ok(KnowledgeItem {
        item_id,
        token_count: token_count(&text),
        text,
        date: fact.valid_from,
        source: fact.source(),
        step,
    })
}

/// Recovers the triple from a rendered knowledge item; `None` if no template
/// matches.
pub fn parse_knowledge_item(text: &str, templates: &TemplateSet) -> Option<Triple> {
    templates.parse_statement(text)
}

fn render_qa_item(fact: &Fact, templates: &TemplateSet, qa_id: String, step: usize) -> Result<QAItem, DatagenError> {
    Ok(QAItem {
        qa_id,
        query: templates.render_query(&fact.subject, &fact.relation, fact.valid_from)?,
        gold: fact.object.clone(),
        date: fact.valid_from,
        source: fact.source(),
        step,
    })
}

// ---------------------------------------------------------------------------
// Universe
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniverseConfig {
    pub seed: u64,
    pub n_entities: usize,
    pub n_relations: usize,
    pub variant_fraction: f64,
    pub horizon: u32,
    pub updates_per_variant: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactUniverse {
    /// One version chain per (subject, relation), versions in order.
    pub chains: Vec<Vec<Fact>>,
    pub templates: TemplateSet,
    pub seed: u64,
    pub horizon: u32,
    pub variant_fraction: f64,
}

impl FactUniverse {
    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn n_variant(&self) -> usize {
        self.chains.iter().filter(|c| c[0].time_variant).count()
    }

    pub fn versions(&self) -> impl Iterator<Item = &Fact> {
        self.chains.iter().flatten()
    }
}

fn entity_label(i: usize, width: usize) -> String {
    format!("E{:0width$}", i + 1, width = width)
}

fn draw_object(kind: &ValueKind, subject: usize, previous: Option<&str>, entities: &[String], rng: &mut ChaCha8Rng) -> String {
    let candidates = || {
        entities
            .iter()
            .enumerate()
            .filter(|(i, e)| *i != subject && Some(e.as_str()) != previous)
            .map(|(_, e)| e)
            .collect::<Vec<_>>()
    };
    loop {
        let value = match kind {
            ValueKind::Entity => {
                let pool = candidates();
                if pool.is_empty() {
                    return draw_object(&ValueKind::Number, subject, previous, entities, rng);
                }
                pool[rng.gen_range(0..pool.len())].clone()
            }
            ValueKind::Number => rng.gen_range(1_000u32..1_000_000).to_string(),
            ValueKind::Words(lexicon) => {
                let n = rng.gen_range(1..=3usize);
                (0..n)
                    .map(|_| lexicon[rng.gen_range(0..lexicon.len())].as_str())
                    .collect::<Vec<_>>()
                    .join(" ")
            }
        };
        if Some(value.as_str()) != previous {
            return value;
        }
    }
}

/// Builds a deterministic synthetic universe.
pub fn generate_universe(cfg: &UniverseConfig) -> Result<FactUniverse, DatagenError> {
    if !(0.0..=1.0).contains(&cfg.variant_fraction) {
        return Err(DatagenError::VariantFraction(cfg.variant_fraction));
    }
    if cfg.n_entities < 1 {
        return Err(DatagenError::TooSmall("n_entities", 1));
    }
    if cfg.n_relations < 1 {
        return Err(DatagenError::TooSmall("n_relations", 1));
    }
    if cfg.updates_per_variant < 1 {
        return Err(DatagenError::TooSmall("updates_per_variant", 1));
    }
    if cfg.horizon < 2 {
        return Err(DatagenError::TooSmall("horizon", 2));
    }
    let n_chains = cfg.n_entities * cfg.n_relations;
    let n_variant = (cfg.variant_fraction * n_chains as f64).round() as usize;
    let versions_per_variant = cfg.updates_per_variant + 1;
    if n_variant > 0 && cfg.horizon < versions_per_variant {
        return Err(DatagenError::HorizonTooShort {
            horizon: cfg.horizon,
            versions: versions_per_variant,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let templates = TemplateSet::builtin(cfg.n_relations);
    let width = cfg.n_entities.to_string().len().max(4);
    let entities: Vec<String> = (0..cfg.n_entities).map(|i| entity_label(i, width)).collect();

    let mut order: Vec<usize> = (0..n_chains).collect();
    order.shuffle(&mut rng);
    let variant: BTreeSet<usize> = order[..n_variant].iter().copied().collect();

    let mut chains = Vec::with_capacity(n_chains);
    for subject in 0..cfg.n_entities {
        for (r, tmpl) in templates.relations.iter().enumerate() {
            let chain_idx = subject * cfg.n_relations + r;
            let time_variant = variant.contains(&chain_idx);
            let mut days: Vec<u32> = if time_variant {
                sample(&mut rng, cfg.horizon as usize, versions_per_variant as usize)
                    .into_iter()
                    .map(|d| d as u32)
                    .collect()
            } else {
                vec![rng.gen_range(0..cfg.horizon)]
            };
            days.sort_unstable();
            let mut chain: Vec<Fact> = Vec::with_capacity(days.len());
            for (version, day) in days.into_iter().enumerate() {
                let previous = chain.last().map(|f| f.object.as_str());
                let object = draw_object(&tmpl.values, subject, previous, &entities, &mut rng);
                chain.push(Fact {
                    fact_id: format!("F{chain_idx:06}"),
                    subject: entities[subject].clone(),
                    relation: tmpl.relation.clone(),
                    object,
                    valid_from: day,
                    version: version as u32,
                    time_variant,
                });
            }
            chains.push(chain);
        }
    }
    Ok(FactUniverse {
        chains,
        templates,
        seed: cfg.seed,
        horizon: cfg.horizon,
        variant_fraction: cfg.variant_fraction,
    })
}

// ---------------------------------------------------------------------------
// Streams
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum StreamMode {
    #[serde(rename = "redundant")]
    Redundant,
    #[default]
    #[serde(rename = "redundancy-free")]
    RedundancyFree,
}

impl std::str::FromStr for StreamMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "redundant" => Ok(Self::Redundant),
            "redundancy-free" => Ok(Self::RedundancyFree),
            other => Err(format!("unknown stream mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamStep {
    /// 1-based step index; the task index of the transfer metrics.
    pub index: usize,
    /// First day of the step's date window.
    pub date: Day,
    pub knowledge: Vec<KnowledgeItem>,
    pub qa: Vec<QAItem>,
}

impl StreamStep {
    pub fn tokens(&self) -> usize {
        self.knowledge.iter().map(|k| k.token_count).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stream {
    pub steps: Vec<StreamStep>,
    pub mode: Option<StreamMode>,
}

impl Stream {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn knowledge(&self) -> impl Iterator<Item = &KnowledgeItem> {
        self.steps.iter().flat_map(|s| s.knowledge.iter())
    }

    pub fn qa(&self) -> impl Iterator<Item = &QAItem> {
        self.steps.iter().flat_map(|s| s.qa.iter())
    }

    /// Sorted distinct answers across the QA stream.
    pub fn answer_vocabulary(&self) -> Vec<String> {
        self.qa()
            .map(|q| q.gold.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Rebuilds steps from flat records using their `step` field.
    pub fn from_records(knowledge: Vec<KnowledgeItem>, qa: Vec<QAItem>, mode: Option<StreamMode>) -> Result<Self, DatagenError> {
        let n_steps = knowledge
            .iter()
            .map(|k| k.step)
            .chain(qa.iter().map(|q| q.step))
            .max()
            .unwrap_or(0);
        if n_steps == 0 || knowledge.iter().any(|k| k.step == 0) || qa.iter().any(|q| q.step == 0) {
            return Err(DatagenError::BadStep);
        }
        let mut steps: Vec<StreamStep> = (1..=n_steps)
            .map(|index| StreamStep {
                index,
                date: Day::MAX,
                knowledge: Vec::new(),
                qa: Vec::new(),
            })
            .collect();
        for k in knowledge {
            let s = &mut steps[k.step - 1];
            s.date = s.date.min(k.date);
            s.knowledge.push(k);
        }
        for q in qa {
            steps[q.step - 1].qa.push(q);
        }
        // Window start is not stored on disk; keep dates monotone.
        let mut floor = 0;
        for s in &mut steps {
            if s.date == Day::MAX || s.date < floor {
                s.date = floor;
            }
            floor = s.date;
        }
        Ok(Self { steps, mode })
    }
}

/// 0-based window index of `day` when `horizon` is split into `n_steps`
/// equal windows.
pub fn window_of(day: Day, horizon: u32, n_steps: usize) -> usize {
    let w = (u64::from(day) * n_steps as u64 / u64::from(horizon)) as usize;
    w.min(n_steps - 1)
}

fn window_start(w: usize, horizon: u32, n_steps: usize) -> Day {
    // Smallest day d with d * n_steps / horizon >= w.
    ((w as u64 * u64::from(horizon)).div_ceil(n_steps as u64)) as Day
}

/// Builds the knowledge and QA streams from a universe.
pub fn build_streams(universe: &FactUniverse, n_steps: usize, items_per_step: usize, mode: StreamMode, seed: u64) -> Result<Stream, DatagenError> {
    if n_steps < 2 {
        return Err(DatagenError::TooSmall("n_steps", 2));
    }
    let mut versions: Vec<&Fact> = universe.versions().collect();
    if versions.is_empty() {
        return Err(DatagenError::NoFacts);
    }
    if (universe.horizon as usize) < n_steps {
        return Err(DatagenError::HorizonBelowSteps {
            horizon: universe.horizon,
            steps: n_steps,
        });
    }
    versions.sort_by(|a, b| {
        (a.valid_from, &a.fact_id, a.version).cmp(&(b.valid_from, &b.fact_id, b.version))
    });

    let mut buckets: Vec<Vec<&Fact>> = vec![Vec::new(); n_steps];
    for f in versions {
        buckets[window_of(f.valid_from, universe.horizon, n_steps)].push(f);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut emitted: Vec<&Fact> = Vec::new();
    let mut next_k = 0usize;
    let mut next_q = 0usize;
    let mut steps = Vec::with_capacity(n_steps);
    for (w, fresh) in buckets.into_iter().enumerate() {
        let index = w + 1;
        if fresh.is_empty() && (mode == StreamMode::RedundancyFree || emitted.is_empty()) {
            return Err(DatagenError::EmptyStep(index));
        }
        let mut chosen: Vec<&Fact> = fresh.clone();
        if mode == StreamMode::Redundant && chosen.len() < items_per_step && !emitted.is_empty() {
            for _ in chosen.len()..items_per_step {
                chosen.push(emitted[rng.gen_range(0..emitted.len())]);
            }
        }
        let mut knowledge = Vec::with_capacity(chosen.len());
        let mut qa = Vec::with_capacity(chosen.len());
        for fact in &chosen {
            next_k += 1;
            next_q += 1;
            knowledge.push(render_knowledge_item(fact, &universe.templates, format!("K{next_k:07}"), index)?);
            qa.push(render_qa_item(fact, &universe.templates, format!("Q{next_q:07}"), index)?);
        }
        emitted.extend(fresh);
        steps.push(StreamStep {
            index,
            date: window_start(w, universe.horizon, n_steps),
            knowledge,
            qa,
        });
    }
    Ok(Stream {
        steps,
        mode: Some(mode),
    })
}

// ---------------------------------------------------------------------------
// One-call generation
// ---------------------------------------------------------------------------

/// Everything needed to regenerate a stream exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub seed: u64,
    pub n_entities: usize,
    pub n_relations: usize,
    pub variant_fraction: f64,
    pub horizon: u32,
    pub updates_per_variant: u32,
    pub n_steps: usize,
    pub items_per_step: usize,
    pub mode: StreamMode,
}

impl Default for StreamConfig {
    /// The default synthetic redundancy-free stream.
    fn default() -> Self {
        Self {
            seed: 7,
            n_entities: 24,
            n_relations: 8,
            variant_fraction: 0.624,
            horizon: 400,
            updates_per_variant: 2,
            n_steps: 20,
            items_per_step: 16,
            mode: StreamMode::RedundancyFree,
        }
    }
}

impl StreamConfig {
    pub fn universe(&self) -> UniverseConfig {
        UniverseConfig {
            seed: self.seed,
            n_entities: self.n_entities,
            n_relations: self.n_relations,
            variant_fraction: self.variant_fraction,
            horizon: self.horizon,
            updates_per_variant: self.updates_per_variant,
        }
    }

    /// Stream seed is derived from the universe seed so one number pins both.
    pub fn stream_seed(&self) -> u64 {
        self.seed ^ 0x5eed_5eed_5eed_5eed
    }

    pub fn generate(&self) -> Result<(FactUniverse, Stream), DatagenError> {
        let universe = generate_universe(&self.universe())?;
        let stream = build_streams(&universe, self.n_steps, self.items_per_step, self.mode, self.stream_seed())?;
        Ok((universe, stream))
    }
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamStats {
    pub n_items: usize,
    pub avg_text_len: f64,
    pub avg_token_len: f64,
    pub variant_fraction_measured: f64,
    /// `(Δ tokens, cumulative fraction)`.
    pub token_change_cdf: Vec<(u64, f64)>,
    /// `(Δ days, cumulative fraction)`.
    pub date_change_cdf: Vec<(u64, f64)>,
}

impl StreamStats {
    /// Fraction of version changes whose token change is at least `delta`.
    pub fn token_change_at_least(&self, delta: u64) -> f64 {
        let below = self
            .token_change_cdf
            .iter()
            .take_while(|(d, _)| *d < delta)
            .last()
            .map_or(0.0, |(_, c)| *c);
        1.0 - below
    }
}

fn cdf(mut values: Vec<u64>) -> Vec<(u64, f64)> {
    values.sort_unstable();
    let n = values.len() as f64;
    let mut out: Vec<(u64, f64)> = Vec::new();
    for (i, v) in values.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some((last, c)) if *last == *v => *c = frac,
            _ => out.push((*v, frac)),
        }
    }
    out
}

/// Token-level change between two renderings: length difference plus the
/// number of aligned positions whose tokens differ.
pub fn token_change(a: &str, b: &str) -> u64 {
    let ta = crate::text::tokenize(a);
    let tb = crate::text::tokenize(b);
    let len_diff = ta.len().abs_diff(tb.len());
    let changed = ta.iter().zip(&tb).filter(|(x, y)| x != y).count();
    (len_diff + changed) as u64
}

/// Summary statistics over the knowledge side of a stream.
pub fn compute_stream_stats(stream: &Stream) -> StreamStats {
    let items: Vec<&KnowledgeItem> = stream.knowledge().collect();
    let n = items.len();
    let (chars, toks) = items.iter().fold((0usize, 0usize), |(c, t), k| {
        (c + k.text.chars().count(), t + k.token_count)
    });
    // fact_id -> version -> first rendering
    let mut chains: BTreeMap<&str, BTreeMap<u32, &KnowledgeItem>> = BTreeMap::new();
    for k in &items {
        chains
            .entry(k.source.fact_id.as_str())
            .or_default()
            .entry(k.source.version)
            .or_insert(k);
    }
    let n_variant = chains.values().filter(|v| v.keys().any(|&ver| ver > 0)).count();
    let mut token_deltas = Vec::new();
    let mut date_deltas = Vec::new();
    for versions in chains.values() {
        for ((va, a), (vb, b)) in versions.iter().zip(versions.iter().skip(1)) {
            if vb - va != 1 {
                continue;
            }
            token_deltas.push(token_change(&a.text, &b.text));
            date_deltas.push(u64::from(b.date.abs_diff(a.date)));
        }
    }
    let avg = |total: usize| if n == 0 { 0.0 } else { total as f64 / n as f64 };
    StreamStats {
        n_items: n,
        avg_text_len: avg(chars),
        avg_token_len: avg(toks),
        variant_fraction_measured: if chains.is_empty() {
            0.0
        } else {
            n_variant as f64 / chains.len() as f64
        },
        token_change_cdf: cdf(token_deltas),
        date_change_cdf: cdf(date_deltas),
    }
}

// ---------------------------------------------------------------------------
// JSON Lines
// ---------------------------------------------------------------------------

pub fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<(), DatagenError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, &r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatagenError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| DatagenError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

/// Writes `knowledge.jsonl` and `qa.jsonl` into `dir`.
pub fn write_stream(stream: &Stream, dir: &Path) -> Result<(), DatagenError> {
    write_jsonl(&dir.join("knowledge.jsonl"), stream.knowledge())?;
    write_jsonl(&dir.join("qa.jsonl"), stream.qa())?;
    Ok(())
}

pub fn read_stream(knowledge: &Path, qa: &Path, mode: Option<StreamMode>) -> Result<Stream, DatagenError> {
    Stream::from_records(read_jsonl(knowledge)?, read_jsonl(qa)?, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ucfg(seed: u64, e: usize, r: usize, vf: f64, h: u32, u: u32) -> UniverseConfig {
        UniverseConfig {
            seed,
            n_entities: e,
            n_relations: r,
            variant_fraction: vf,
            horizon: h,
            updates_per_variant: u,
        }
    }

    #[test]
    fn universe_counts() {
        let u = generate_universe(&ucfg(1, 10, 3, 0.6, 5, 1)).unwrap();
        assert_eq!(u.n_chains(), 30);
        assert_eq!(u.n_variant(), 18);
        for chain in &u.chains {
            let variant = chain[0].time_variant;
            assert_eq!(chain.len(), if variant { 2 } else { 1 });
            for (v, f) in chain.iter().enumerate() {
                assert_eq!(f.version as usize, v);
                assert_eq!(f.time_variant, variant);
                assert!(f.valid_from < 5);
            }
            for w in chain.windows(2) {
                assert!(w[0].valid_from < w[1].valid_from);
                assert_ne!(w[0].object, w[1].object);
            }
        }
    }

    #[test]
    fn universe_is_deterministic() {
        let a = generate_universe(&ucfg(1, 10, 3, 0.6, 5, 1)).unwrap();
        let b = generate_universe(&ucfg(1, 10, 3, 0.6, 5, 1)).unwrap();
        assert_eq!(a, b);
        let c = generate_universe(&ucfg(2, 10, 3, 0.6, 5, 1)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invariant_universe_has_single_versions() {
        let u = generate_universe(&ucfg(1, 10, 3, 0.0, 5, 1)).unwrap();
        assert!(u.chains.iter().all(|c| c.len() == 1 && !c[0].time_variant));
    }

    #[test]
    fn universe_errors() {
        assert!(matches!(
            generate_universe(&ucfg(1, 10, 3, 1.5, 5, 1)),
            Err(DatagenError::VariantFraction(_))
        ));
        assert!(matches!(
            generate_universe(&ucfg(1, 10, 3, -0.1, 5, 1)),
            Err(DatagenError::VariantFraction(_))
        ));
        assert!(generate_universe(&ucfg(1, 10, 3, 0.5, 1, 1)).is_err());
        assert!(generate_universe(&ucfg(1, 0, 3, 0.5, 5, 1)).is_err());
        assert!(matches!(
            generate_universe(&ucfg(1, 2, 1, 0.5, 3, 3)),
            Err(DatagenError::HorizonTooShort { .. })
        ));
    }

    #[test]
    fn render_obama_example() {
        let templates = TemplateSet {
            relations: vec![RelationTemplate {
                relation: "holds-position".into(),
                statement: "{s} holds the position of {o}.".into(),
                question: "{s} holds the position of?".into(),
                values: ValueKind::Entity,
            }],
        };
        let fact = Fact {
            fact_id: "F1".into(),
            subject: "Obama".into(),
            relation: "holds-position".into(),
            object: "president".into(),
            valid_from: 120,
            version: 0,
            time_variant: false,
        };
        let item = render_knowledge_item(&fact, &templates, "K1".into(), 1).unwrap();
        assert_eq!(item.text, "Obama holds the position of president.");
        assert_eq!(item.date, 120);
        assert_eq!(item.token_count, 6);
        let again = render_knowledge_item(&fact, &templates, "K1".into(), 1).unwrap();
        assert_eq!(item, again);

        let mut v1 = fact.clone();
        v1.version = 1;
        v1.object = "former president".into();
        v1.valid_from = 300;
        let item1 = render_knowledge_item(&v1, &templates, "K2".into(), 2).unwrap();
        assert_ne!(item.text, item1.text);
        assert_ne!(item.date, item1.date);

        let t = parse_knowledge_item(&item1.text, &templates).unwrap();
        assert_eq!(t.object, "former president");
        assert_eq!(t.subject, "Obama");

        let q = templates.parse_query("Obama holds the position of?").unwrap();
        assert_eq!(q.subject, "Obama");
        assert_eq!(q.as_of, None);
        let q = templates.parse_query("As of day 17, Obama holds the position of?").unwrap();
        assert_eq!(q.as_of, Some(17));

        let mut missing = fact.clone();
        missing.relation = "nope".into();
        assert!(matches!(
            render_knowledge_item(&missing, &templates, "K".into(), 1),
            Err(DatagenError::MissingTemplate(_))
        ));
    }

    #[test]
    fn parse_failure_and_tie_break() {
        let t = TemplateSet::builtin(12);
        assert!(parse_knowledge_item("garbage text", &t).is_none());
        let ambiguous = TemplateSet {
            relations: vec![
                RelationTemplate {
                    relation: "a".into(),
                    statement: "{s} is {o}.".into(),
                    question: "{s} is?".into(),
                    values: ValueKind::Entity,
                },
                RelationTemplate {
                    relation: "b".into(),
                    statement: "{s} is the {o}.".into(),
                    question: "{s} is the?".into(),
                    values: ValueKind::Entity,
                },
            ],
        };
        let triple = ambiguous.parse_statement("X is the Y.").unwrap();
        assert_eq!(triple.relation, "a");
        assert_eq!(triple.object, "the Y");
    }

    #[test]
    fn round_trip_on_generated_universe() {
        let u = generate_universe(&ucfg(3, 20, 15, 0.5, 50, 2)).unwrap();
        for f in u.versions() {
            let item = render_knowledge_item(f, &u.templates, "K".into(), 1).unwrap();
            let t = parse_knowledge_item(&item.text, &u.templates).unwrap();
            assert_eq!((t.subject.as_str(), t.relation.as_str(), t.object.as_str()), (f.subject.as_str(), f.relation.as_str(), f.object.as_str()));
            let q = u.templates.render_query(&f.subject, &f.relation, f.valid_from).unwrap();
            let pq = u.templates.parse_query(&q).unwrap();
            assert_eq!((pq.subject.as_str(), pq.relation.as_str(), pq.as_of), (f.subject.as_str(), f.relation.as_str(), Some(f.valid_from)));
        }
    }

    #[test]
    fn redundant_fill_counts() {
        // 4 new versions in step 2, target 8 -> 4 re-emissions.
        let mut u = generate_universe(&ucfg(5, 8, 1, 0.0, 2, 1)).unwrap();
        for (i, chain) in u.chains.iter_mut().enumerate() {
            chain[0].valid_from = if i < 4 { 0 } else { 1 };
        }
        let s = build_streams(&u, 2, 8, StreamMode::Redundant, 1).unwrap();
        assert_eq!(s.steps[0].knowledge.len(), 4);
        assert_eq!(s.steps[1].knowledge.len(), 8);
        let new: BTreeSet<_> = u.chains[4..].iter().map(|c| c[0].source()).collect();
        let fresh = s.steps[1].knowledge.iter().filter(|k| new.contains(&k.source)).count();
        assert_eq!(fresh, 4);
        assert_eq!(s.steps[1].knowledge.len() - fresh, 4);
        assert_eq!(s.steps[1].qa.len(), 8);
    }

    #[test]
    fn streams_are_deterministic_and_share_versions() {
        let cfg = StreamConfig::default();
        let (_, a) = cfg.generate().unwrap();
        let (_, b) = cfg.generate().unwrap();
        assert_eq!(a, b);
        let red = StreamConfig {
            mode: StreamMode::Redundant,
            ..cfg.clone()
        };
        let (_, r) = red.generate().unwrap();
        let set = |s: &Stream| s.knowledge().map(|k| k.source.clone()).collect::<BTreeSet<_>>();
        assert_eq!(set(&a), set(&r));
        assert!(r.knowledge().count() > a.knowledge().count());
    }

    #[test]
    fn build_errors() {
        let u = generate_universe(&ucfg(1, 4, 1, 0.0, 10, 1)).unwrap();
        assert!(build_streams(&u, 1, 4, StreamMode::Redundant, 0).is_err());
        let mut empty = u.clone();
        empty.chains.clear();
        assert!(matches!(
            build_streams(&empty, 2, 4, StreamMode::Redundant, 0),
            Err(DatagenError::NoFacts)
        ));
    }

    #[test]
    fn single_token_updates_give_step_cdf() {
        // Only entity-valued relation -> each update swaps one token.
        let cfg = StreamConfig {
            seed: 11,
            n_entities: 30,
            n_relations: 1,
            variant_fraction: 1.0,
            horizon: 60,
            updates_per_variant: 3,
            n_steps: 4,
            items_per_step: 8,
            mode: StreamMode::RedundancyFree,
        };
        let (_, s) = cfg.generate().unwrap();
        let stats = compute_stream_stats(&s);
        assert_eq!(stats.token_change_cdf, vec![(1, 1.0)]);
        assert_eq!(stats.variant_fraction_measured, 1.0);
        assert_eq!(stats.date_change_cdf.last().unwrap().1, 1.0);
        assert_eq!(compute_stream_stats(&s), stats);
    }

    #[test]
    fn measured_variant_fraction_tracks_config() {
        let cfg = StreamConfig::default();
        let (u, s) = cfg.generate().unwrap();
        let stats = compute_stream_stats(&s);
        let chains = u.n_chains() as f64;
        assert!((stats.variant_fraction_measured - 0.624).abs() <= 1.0 / chains);
        assert!(stats.avg_token_len > 0.0);
        assert!(stats.token_change_at_least(1) > 0.99);
    }

    #[test]
    fn jsonl_round_trip() {
        let (_, s) = StreamConfig::default().generate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_stream(&s, dir.path()).unwrap();
        let back = read_stream(&dir.path().join("knowledge.jsonl"), &dir.path().join("qa.jsonl"), s.mode).unwrap();
        assert_eq!(back.len(), s.len());
        for (a, b) in back.steps.iter().zip(&s.steps) {
            assert_eq!(a.knowledge, b.knowledge);
            assert_eq!(a.qa, b.qa);
        }
    }
}
