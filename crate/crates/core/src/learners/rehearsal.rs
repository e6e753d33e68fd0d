use super::{strategy_mix_ratio, Learner, LearnerError, RehearsalConfig, ReplayPlacement, TrainReport};
use crate::types::{EmbeddingVector, KnowledgeItem};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mix-review style rehearsal around any learner.
///
/// Each non-empty batch is preceded by `round(m0 · γ^t · batch_len)` items
/// sampled without replacement from a reservoir of previously trained items.
pub struct Rehearsal<L> {
    inner: L,
    cfg: RehearsalConfig,
    buffer: Vec<KnowledgeItem>,
    /// Items offered to the reservoir so far.
    offered: u64,
    step0: usize,
    rng: ChaCha8Rng,
}

impl<L: Learner> Rehearsal<L> {
    pub fn new(inner: L, cfg: RehearsalConfig, seed: u64) -> Self {
        Self {
            inner,
            buffer: Vec::with_capacity(cfg.capacity.min(4096)),
            cfg,
            offered: 0,
            step0: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn buffer(&self) -> &[KnowledgeItem] {
        &self.buffer
    }

    pub fn inner(&self) -> &L {
        &self.inner
    }

    pub fn mix_ratio(&self) -> f64 {
        strategy_mix_ratio(self.step0, self.cfg.m0, self.cfg.gamma)
    }

    fn replay_count(&self, batch: usize) -> usize {
        ((self.mix_ratio() * batch as f64).round() as usize).min(self.buffer.len())
    }

    fn offer(&mut self, item: &KnowledgeItem) {
        self.offered += 1;
        if self.buffer.len() < self.cfg.capacity {
            self.buffer.push(item.clone());
        } else if self.cfg.capacity > 0 {
            let j = self.rng.gen_range(0..self.offered);
            if (j as usize) < self.cfg.capacity {
                self.buffer[j as usize] = item.clone();
            }
        }
    }
}

impl<L: Learner> Learner for Rehearsal<L> {
    fn begin_step(&mut self, t: usize) -> Result<(), LearnerError> {
        self.step0 = t.saturating_sub(1);
        self.inner.begin_step(t)
    }

    fn train_batch(&mut self, items: &[KnowledgeItem]) -> Result<TrainReport, LearnerError> {
        if items.is_empty() {
            return Ok(TrainReport::default());
        }
        let n_replay = self.replay_count(items.len());
        let mut picks = sample(&mut self.rng, self.buffer.len(), n_replay).into_vec();
        picks.sort_unstable();
        let replays: Vec<KnowledgeItem> = picks.iter().map(|&i| self.buffer[i].clone()).collect();
        let replay_tokens: u64 = replays.iter().map(|k| k.token_count as u64).sum();
        let batch = match self.cfg.placement {
            ReplayPlacement::Before => [replays, items.to_vec()].concat(),
            ReplayPlacement::After => [items.to_vec(), replays].concat(),
            ReplayPlacement::Interleaved => {
                let mut b = [replays, items.to_vec()].concat();
                b.shuffle(&mut self.rng);
                b
            }
        };
        let mut report = self.inner.train_batch(&batch)?;
        report.replay_tokens += replay_tokens;
        for item in items {
            self.offer(item);
        }
        Ok(report)
    }

    fn answer(&mut self, queries: &[String]) -> Result<Vec<String>, LearnerError> {
        self.inner.answer(queries)
    }

    fn embed(&mut self, texts: &[String]) -> Result<Vec<EmbeddingVector>, LearnerError> {
        self.inner.embed(texts)
    }

    fn predict_loss(&mut self, items: &[KnowledgeItem]) -> Result<Vec<f64>, LearnerError> {
        self.inner.predict_loss(items)
    }

    fn snapshot_id(&mut self) -> Result<u64, LearnerError> {
        self.inner.snapshot_id()
    }
}
