use super::{CostModel, Learner, LearnerError, TrainReport, UNKNOWN_ANSWER};
use crate::datagen::{ParsedQuery, TemplateSet};
use crate::text::hash_embed;
use crate::types::{Day, EmbeddingVector, KnowledgeItem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Eviction {
    #[default]
    Lru,
    Random,
}

#[derive(Debug, Clone)]
struct Entry {
    /// valid-from day -> object
    versions: BTreeMap<Day, String>,
    last_touched: u64,
}

/// Associative (subject, relation) store with optional capacity.
///
/// Each entry keeps the object per valid-from date so date-qualified
/// questions resolve to the version in force on that day.
#[derive(Debug, Clone)]
pub struct FactMemoryLearner {
    table: BTreeMap<(String, String), Entry>,
    capacity: Option<usize>,
    eviction: Eviction,
    rng: ChaCha8Rng,
    templates: TemplateSet,
    cost: CostModel,
    embed_dim: usize,
    clock: u64,
    snapshot: u64,
}

impl FactMemoryLearner {
    pub fn new(
        templates: TemplateSet,
        capacity: Option<usize>,
        eviction: Eviction,
        seed: u64,
        cost: CostModel,
        embed_dim: usize,
    ) -> Result<Self, LearnerError> {
        if capacity == Some(0) {
            return Err(LearnerError::Config("fact memory capacity must be >= 1".into()));
        }
        if embed_dim == 0 {
            return Err(LearnerError::Config("embed_dim must be >= 1".into()));
        }
        Ok(Self {
            table: BTreeMap::new(),
            capacity,
            eviction,
            rng: ChaCha8Rng::seed_from_u64(seed),
            templates,
            cost,
            embed_dim,
            clock: 0,
            snapshot: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    fn upsert(&mut self, subject: String, relation: String, object: String, date: Day) {
        self.clock += 1;
        let key = (subject, relation);
        let fresh = !self.table.contains_key(&key);
        let entry = self.table.entry(key.clone()).or_insert_with(|| Entry {
            versions: BTreeMap::new(),
            last_touched: 0,
        });
        entry.versions.insert(date, object);
        entry.last_touched = self.clock;
        if fresh {
            if let Some(cap) = self.capacity {
                while self.table.len() > cap {
                    let victim = self.pick_victim(&key);
                    self.table.remove(&victim);
                }
            }
        }
    }

    fn pick_victim(&mut self, keep: &(String, String)) -> (String, String) {
        let candidates: Vec<&(String, String)> = self.table.keys().filter(|k| *k != keep).collect();
        match self.eviction {
            Eviction::Lru => candidates
                .into_iter()
                .min_by_key(|k| self.table[*k].last_touched)
                .cloned()
                .expect("table holds more than one entry"),
            Eviction::Random => {
                let i = self.rng.gen_range(0..candidates.len());
                candidates[i].clone()
            }
        }
    }

    fn lookup(&self, q: &ParsedQuery) -> Option<&str> {
        let entry = self.table.get(&(q.subject.clone(), q.relation.clone()))?;
        let found = match q.as_of {
            Some(day) => entry.versions.range(..=day).next_back(),
            None => entry.versions.iter().next_back(),
        };
        found.map(|(_, o)| o.as_str())
    }

    fn answer_one(&self, query: &str) -> Option<&str> {
        self.templates.parse_query(query).and_then(|q| self.lookup(&q))
    }
}

impl Learner for FactMemoryLearner {
    fn train_batch(&mut self, items: &[KnowledgeItem]) -> Result<TrainReport, LearnerError> {
        if items.is_empty() {
            return Ok(TrainReport::default());
        }
        let mut report = TrainReport::default();
        for item in items {
            report.items_seen += 1;
            report.tokens_processed += item.token_count as u64;
            match self.templates.parse_statement(&item.text) {
                Some(t) => self.upsert(t.subject, t.relation, t.object, item.date),
                None => report.skipped += 1,
            }
        }
        if report.skipped < report.items_seen {
            self.snapshot += 1;
        }
        report.cost_seconds = self.cost.seconds(report.tokens_processed);
        Ok(report)
    }

    fn answer(&mut self, queries: &[String]) -> Result<Vec<String>, LearnerError> {
        Ok(queries
            .iter()
            .map(|q| self.answer_one(q).unwrap_or(UNKNOWN_ANSWER).to_string())
            .collect())
    }

    /// The query's hashed embedding, extended with the recalled answer
    /// when one exists.
    fn embed(&mut self, texts: &[String]) -> Result<Vec<EmbeddingVector>, LearnerError> {
        Ok(texts
            .iter()
            .map(|t| match self.answer_one(t) {
                Some(a) => hash_embed(&format!("{t} {a}"), self.embed_dim),
                None => hash_embed(t, self.embed_dim),
            })
            .collect())
    }

    fn predict_loss(&mut self, items: &[KnowledgeItem]) -> Result<Vec<f64>, LearnerError> {
        Ok(items
            .iter()
            .map(|item| {
                let known = self.templates.parse_statement(&item.text).is_some_and(|t| {
                    let q = ParsedQuery {
                        subject: t.subject,
                        relation: t.relation,
                        as_of: Some(item.date),
                    };
                    self.lookup(&q) == Some(t.object.as_str())
                });
                if known {
                    0.0
                } else {
                    1.0
                }
            })
            .collect())
    }

    fn snapshot_id(&mut self) -> Result<u64, LearnerError> {
        Ok(self.snapshot)
    }
}
