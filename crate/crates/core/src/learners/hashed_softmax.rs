use super::{
    strategy_reg_strength, CostModel, Learner, LearnerError, StrategyConfig, StrategyKind, TrainReport, UNKNOWN_ANSWER,
};
use crate::datagen::TemplateSet;
use crate::text::{hash_embed, hash_embed_tokens, tokenize};
use crate::types::{EmbeddingVector, KnowledgeItem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Loss reported for items the learner cannot represent.
pub const UNLEARNABLE_LOSS: f64 = f64::MAX;

const ADAPTER_SALT: &str = "\u{1}adapter:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HashedSoftmaxConfig {
    pub lr: f64,
    /// Seeds the low-rank factor initialization.
    pub seed: u64,
}

impl Default for HashedSoftmaxConfig {
    fn default() -> Self {
        Self { lr: 2.0, seed: 0 }
    }
}

#[derive(Debug, Clone)]
enum Params {
    /// `W` itself is trainable.
    Full { w: Vec<f64> },
    /// `W = W0 + A·B`, `A: D×r`, `B: r×V`.
    LowRank { a: Vec<f64>, b: Vec<f64>, rank: usize },
    /// `W0` plus a trainable block over a separately hashed sub-space.
    Adapter { wa: Vec<f64>, dim: usize },
}

type Sparse = Vec<(usize, f64)>;

fn sparse(v: EmbeddingVector) -> Sparse {
    v.into_values()
        .into_iter()
        .enumerate()
        .filter(|(_, x)| *x != 0.0)
        .collect()
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// `KL(student ‖ teacher)` over softmax outputs and its gradient with
/// respect to the student logits.
pub fn distill_term(student_logits: &[f64], teacher_logits: &[f64]) -> (f64, Vec<f64>) {
    let ls = log_softmax(student_logits);
    let lt = log_softmax(teacher_logits);
    let ps: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
    let kl: f64 = ps.iter().zip(ls.iter().zip(&lt)).map(|(p, (a, b))| p * (a - b)).sum();
    let grad = ps
        .iter()
        .zip(ls.iter().zip(&lt))
        .map(|(p, (a, b))| p * (a - b - kl))
        .collect();
    (kl, grad)
}

/// Single-pass softmax classifier from hashed query features to a closed
/// answer vocabulary.
#[derive(Debug, Clone)]
pub struct HashedSoftmaxLearner {
    dim: usize,
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    templates: TemplateSet,
    cfg: HashedSoftmaxConfig,
    strategy: StrategyConfig,
    cost: CostModel,
    /// Frozen base weights, `D×V` row-major.
    w0: Vec<f64>,
    params: Params,
    /// Pre-step weights for the annealed L2 pull.
    anchor: Vec<f64>,
    reg_strength: f64,
    teacher: Vec<f64>,
    snapshot: u64,
}

impl HashedSoftmaxLearner {
    pub fn new(
        dim: usize,
        vocab: Vec<String>,
        templates: TemplateSet,
        cfg: HashedSoftmaxConfig,
        strategy: StrategyConfig,
        cost: CostModel,
    ) -> Result<Self, LearnerError> {
        strategy.validate()?;
        if dim == 0 {
            return Err(LearnerError::Config("feature dimension must be >= 1".into()));
        }
        if vocab.is_empty() {
            return Err(LearnerError::Config("answer vocabulary is empty".into()));
        }
        if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
            return Err(LearnerError::Config("lr must be positive".into()));
        }
        let v = vocab.len();
        let w0 = vec![0.0; dim * v];
        let params = match strategy.kind {
            StrategyKind::Vanilla | StrategyKind::Rehearsal | StrategyKind::RegAnneal | StrategyKind::Distill => {
                Params::Full { w: w0.clone() }
            }
            StrategyKind::Lowrank => {
                let rank = strategy.lowrank.rank;
                if rank >= dim.min(v) {
                    return Err(LearnerError::RankTooLarge { rank, rows: dim, cols: v });
                }
                // Gaussian-free init: uniform with variance 1/rank so that
                // |Aᵀx|² ≈ 1 for unit x.
                let bound = (3.0 / rank as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let a = (0..dim * rank).map(|_| rng.gen_range(-bound..bound)).collect();
                Params::LowRank {
                    a,
                    b: vec![0.0; rank * v],
                    rank,
                }
            }
            StrategyKind::Adapter => {
                let dim_a = strategy.adapter.dim;
                Params::Adapter {
                    wa: vec![0.0; dim_a * v],
                    dim: dim_a,
                }
            }
        };
        let index = vocab.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Ok(Self {
            dim,
            index,
            vocab,
            templates,
            cfg,
            cost,
            anchor: w0.clone(),
            teacher: w0.clone(),
            reg_strength: strategy_reg_strength(0, strategy.reg_anneal.lambda0, strategy.reg_anneal.schedule),
            strategy,
            w0,
            params,
            snapshot: 0,
        })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// Frozen base weights.
    pub fn base_weights(&self) -> &[f64] {
        &self.w0
    }

    pub fn trainable_params(&self) -> usize {
        match &self.params {
            Params::Full { w } => w.len(),
            Params::LowRank { a, b, .. } => a.len() + b.len(),
            Params::Adapter { wa, .. } => wa.len(),
        }
    }

    /// Hashed unigram + bigram features of a query.
    fn features(&self, text: &str) -> Sparse {
        sparse(hash_embed_tokens(grams(text, ""), self.dim))
    }

    fn adapter_features(&self, text: &str, dim_a: usize) -> Sparse {
        sparse(hash_embed_tokens(grams(text, ADAPTER_SALT), dim_a))
    }

    fn base(&self) -> &[f64] {
        match &self.params {
            Params::Full { w } => w,
            _ => &self.w0,
        }
    }

    fn logits(&self, text: &str) -> Vec<f64> {
        let v = self.vocab.len();
        let x = self.features(text);
        let mut z = vec![0.0; v];
        accumulate_rows(&mut z, &x, self.base(), v);
        match &self.params {
            Params::Full { .. } => {}
            Params::LowRank { a, b, rank } => {
                let h = project(&x, a, *rank);
                for (r, hr) in h.iter().enumerate() {
                    if *hr != 0.0 {
                        for (zk, bk) in z.iter_mut().zip(&b[r * v..(r + 1) * v]) {
                            *zk += hr * bk;
                        }
                    }
                }
            }
            Params::Adapter { wa, dim } => {
                let xa = self.adapter_features(text, *dim);
                accumulate_rows(&mut z, &xa, wa, v);
            }
        }
        z
    }

    fn teacher_logits(&self, x: &Sparse) -> Vec<f64> {
        let v = self.vocab.len();
        let mut z = vec![0.0; v];
        accumulate_rows(&mut z, x, &self.teacher, v);
        z
    }

    fn label_and_query(&self, item: &KnowledgeItem) -> Option<(usize, String)> {
        let t = self.templates.parse_statement(&item.text)?;
        let y = *self.index.get(&t.object)?;
        let q = self.templates.render_query(&t.subject, &t.relation, item.date).ok()?;
        Some((y, q))
    }

    fn sgd_step(&mut self, query: &str, y: usize) {
        let v = self.vocab.len();
        let lr = self.cfg.lr;
        let x = self.features(query);
        let z = self.logits(query);
        let mut g: Vec<f64> = log_softmax(&z).into_iter().map(f64::exp).collect();
        g[y] -= 1.0;
        if self.strategy.kind == StrategyKind::Distill && self.strategy.distill.alpha > 0.0 {
            let (_, kg) = distill_term(&z, &self.teacher_logits(&x));
            let alpha = self.strategy.distill.alpha;
            for (gk, d) in g.iter_mut().zip(kg) {
                *gk += alpha * d;
            }
        }
        let reg = if self.strategy.kind == StrategyKind::RegAnneal {
            self.reg_strength
        } else {
            0.0
        };
        match &mut self.params {
            Params::Full { w } => {
                if reg > 0.0 {
                    for (we, ae) in w.iter_mut().zip(&self.anchor) {
                        *we -= lr * reg * (*we - ae);
                    }
                }
                for &(i, xi) in &x {
                    for (we, gk) in w[i * v..(i + 1) * v].iter_mut().zip(&g) {
                        *we -= lr * xi * gk;
                    }
                }
            }
            Params::LowRank { a, b, rank } => {
                let r = *rank;
                let h = project(&x, a, r);
                let bg: Vec<f64> = (0..r)
                    .map(|ri| b[ri * v..(ri + 1) * v].iter().zip(&g).map(|(bk, gk)| bk * gk).sum())
                    .collect();
                // Logits move by -lr·(|h|² + |x|²·BᵀB)·g; rescale so the move
                // along g matches the full-rank step -lr·|x|²·g.
                let x2: f64 = x.iter().map(|(_, xi)| xi * xi).sum();
                let g2: f64 = g.iter().map(|gk| gk * gk).sum();
                let h2: f64 = h.iter().map(|hr| hr * hr).sum();
                let bg2: f64 = bg.iter().map(|q| q * q).sum();
                let curvature = h2 + if g2 > 0.0 { x2 * bg2 / g2 } else { 0.0 };
                let step = if curvature > 0.0 { lr * x2 / curvature } else { lr };
                for &(i, xi) in &x {
                    for (ae, bgr) in a[i * r..(i + 1) * r].iter_mut().zip(&bg) {
                        *ae -= step * xi * bgr;
                    }
                }
                for (ri, hr) in h.iter().enumerate() {
                    for (be, gk) in b[ri * v..(ri + 1) * v].iter_mut().zip(&g) {
                        *be -= step * hr * gk;
                    }
                }
            }
            Params::Adapter { wa, dim } => {
                let xa = sparse(hash_embed_tokens(grams(query, ADAPTER_SALT), *dim));
                for &(j, xj) in &xa {
                    for (we, gk) in wa[j * v..(j + 1) * v].iter_mut().zip(&g) {
                        *we -= lr * xj * gk;
                    }
                }
            }
        }
    }

    /// `W_eff · p` folded back into feature space; the adapter block lives
    /// outside that space and does not contribute.
    fn feature_projection(&self, p: &[f64]) -> Vec<f64> {
        let v = self.vocab.len();
        let mut out: Vec<f64> = self
            .base()
            .chunks_exact(v)
            .map(|row| row.iter().zip(p).map(|(w, pk)| w * pk).sum())
            .collect();
        if let Params::LowRank { a, b, rank } = &self.params {
            let bp: Vec<f64> = (0..*rank)
                .map(|r| b[r * v..(r + 1) * v].iter().zip(p).map(|(bk, pk)| bk * pk).sum())
                .collect();
            for (i, o) in out.iter_mut().enumerate() {
                *o += a[i * rank..(i + 1) * rank].iter().zip(&bp).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        out
    }
}

fn grams(text: &str, salt: &str) -> Vec<String> {
    let toks = tokenize(text);
    let mut out: Vec<String> = toks.iter().map(|t| format!("{salt}{t}")).collect();
    out.extend(toks.windows(2).map(|w| format!("{salt}{}\u{1f}{}", w[0], w[1])));
    out
}

fn accumulate_rows(z: &mut [f64], x: &Sparse, w: &[f64], v: usize) {
    for &(i, xi) in x {
        for (zk, wk) in z.iter_mut().zip(&w[i * v..(i + 1) * v]) {
            *zk += xi * wk;
        }
    }
}

fn project(x: &Sparse, a: &[f64], rank: usize) -> Vec<f64> {
    let mut h = vec![0.0; rank];
    for &(i, xi) in x {
        for (hr, ar) in h.iter_mut().zip(&a[i * rank..(i + 1) * rank]) {
            *hr += xi * ar;
        }
    }
    h
}

fn decide(z: &[f64]) -> Option<usize> {
    let mut best = 0;
    for (k, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = k;
        }
    }
    let unique = z.iter().enumerate().all(|(k, v)| k == best || *v < z[best]);
    if z.len() == 1 {
        return (z[0] > 0.0).then_some(0);
    }
    unique.then_some(best)
}

impl Learner for HashedSoftmaxLearner {
    fn begin_step(&mut self, t: usize) -> Result<(), LearnerError> {
        let step0 = t.saturating_sub(1);
        if let Params::Full { w } = &self.params {
            match self.strategy.kind {
                StrategyKind::RegAnneal => {
                    self.anchor.clone_from(w);
                    self.reg_strength =
                        strategy_reg_strength(step0, self.strategy.reg_anneal.lambda0, self.strategy.reg_anneal.schedule);
                }
                StrategyKind::Distill if step0.is_multiple_of(self.strategy.distill.cadence) => {
                    self.teacher.clone_from(w);
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn train_batch(&mut self, items: &[KnowledgeItem]) -> Result<TrainReport, LearnerError> {
        if items.is_empty() {
            return Ok(TrainReport::default());
        }
        let mut report = TrainReport::default();
        for item in items {
            report.items_seen += 1;
            report.tokens_processed += item.token_count as u64;
            match self.label_and_query(item) {
                Some((y, q)) => self.sgd_step(&q, y),
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
            .map(|q| match decide(&self.logits(q)) {
                Some(k) => self.vocab[k].clone(),
                None => UNKNOWN_ANSWER.to_string(),
            })
            .collect())
    }

    /// `normalize(hash_embed(text) + W_eff · softmax(logits))`.
    fn embed(&mut self, texts: &[String]) -> Result<Vec<EmbeddingVector>, LearnerError> {
        Ok(texts
            .iter()
            .map(|t| {
                let p: Vec<f64> = log_softmax(&self.logits(t)).into_iter().map(f64::exp).collect();
                let proj = self.feature_projection(&p);
                let base = hash_embed(t, self.dim).into_values();
                EmbeddingVector::normalized(base.into_iter().zip(proj).map(|(a, b)| a + b).collect())
            })
            .collect())
    }

    fn predict_loss(&mut self, items: &[KnowledgeItem]) -> Result<Vec<f64>, LearnerError> {
        Ok(items
            .iter()
            .map(|item| match self.label_and_query(item) {
                Some((y, q)) => -log_softmax(&self.logits(&q))[y],
                None => UNLEARNABLE_LOSS,
            })
            .collect())
    }

    fn snapshot_id(&mut self) -> Result<u64, LearnerError> {
        Ok(self.snapshot)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::StreamConfig;
    use crate::learners::LowrankConfig;
    use crate::types::SourceRef;

    fn cost(m: f64) -> CostModel {
        CostModel {
            per_token_cost: 0.001,
            multiplier: m,
        }
    }

    fn setup(kind: StrategyKind) -> (HashedSoftmaxLearner, Vec<KnowledgeItem>, Vec<crate::types::QAItem>) {
        let (u, s) = StreamConfig::default().generate().unwrap();
        let strategy = StrategyConfig::of(kind);
        let mult = strategy.multiplier();
        let l = HashedSoftmaxLearner::new(256, s.answer_vocabulary(), u.templates, HashedSoftmaxConfig::default(), strategy, cost(mult)).unwrap();
        (l, s.steps[0].knowledge.clone(), s.steps[0].qa.clone())
    }

    #[test]
    fn untrained_answers_unknown() {
        let (mut l, _, qa) = setup(StrategyKind::Vanilla);
        let a = l.answer(&[qa[0].query.clone(), "random words".into()]).unwrap();
        assert_eq!(a, vec![UNKNOWN_ANSWER, UNKNOWN_ANSWER]);
    }

    #[test]
    fn repeated_single_fact_converges() {
        let (mut l, k, qa) = setup(StrategyKind::Vanilla);
        let before = l.predict_loss(&k[..1]).unwrap()[0];
        for _ in 0..50 {
            l.train_batch(&k[..1]).unwrap();
        }
        assert_eq!(l.answer(&[qa[0].query.clone()]).unwrap()[0], qa[0].gold);
        let after = l.predict_loss(&k[..1]).unwrap()[0];
        assert!(after < before);
    }

    #[test]
    fn losses_drop_after_training() {
        let (mut l, k, _) = setup(StrategyKind::Vanilla);
        let before = l.predict_loss(&k).unwrap();
        l.train_batch(&k).unwrap();
        let after = l.predict_loss(&k).unwrap();
        let (b, a): (f64, f64) = (before.iter().sum(), after.iter().sum());
        assert!(a < b, "{a} !< {b}");
        assert!(after.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn lowrank_freezes_base_and_counts_params() {
        let (mut l, k, _) = setup(StrategyKind::Lowrank);
        let w0 = l.base_weights().to_vec();
        l.train_batch(&k).unwrap();
        assert_eq!(l.base_weights(), &w0[..]);
        let r = LowrankConfig::default().rank;
        let (d, v) = (256, l.vocab().len());
        assert_eq!(l.trainable_params(), r * (d + v));
        assert!(l.trainable_params() < d * v);
    }

    #[test]
    fn adapter_freezes_base() {
        let (mut l, k, qa) = setup(StrategyKind::Adapter);
        let w0 = l.base_weights().to_vec();
        let probes: Vec<String> = qa.iter().map(|q| q.query.clone()).collect();
        let emb_before = l.embed(&probes).unwrap();
        l.train_batch(&k).unwrap();
        assert_eq!(l.base_weights(), &w0[..]);
        // Adapter lives outside the embedding space.
        assert_eq!(l.embed(&probes).unwrap(), emb_before);
    }

    #[test]
    fn rank_too_large_is_rejected() {
        let (u, s) = StreamConfig::default().generate().unwrap();
        let mut strategy = StrategyConfig::of(StrategyKind::Lowrank);
        strategy.lowrank.rank = 256;
        let err = HashedSoftmaxLearner::new(256, s.answer_vocabulary(), u.templates, HashedSoftmaxConfig::default(), strategy, cost(0.7));
        assert!(matches!(err, Err(LearnerError::RankTooLarge { .. })));
    }

    #[test]
    fn distill_self_term_is_zero() {
        let z = vec![0.3, -1.2, 2.0, 0.0];
        let (kl, grad) = distill_term(&z, &z);
        assert_eq!(kl, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
        let (kl, _) = distill_term(&z, &[0.0, 0.0, 0.0, 0.0]);
        assert!(kl > 0.0);
    }

    #[test]
    fn distill_gradient_matches_finite_differences() {
        let zs = vec![0.5, -0.3, 1.1];
        let zt = vec![-0.2, 0.4, 0.9];
        let (_, grad) = distill_term(&zs, &zt);
        for k in 0..3 {
            let h = 1e-6;
            let mut up = zs.clone();
            up[k] += h;
            let mut dn = zs.clone();
            dn[k] -= h;
            let fd = (distill_term(&up, &zt).0 - distill_term(&dn, &zt).0) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-7, "{k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn zero_strength_regularizer_matches_vanilla_bitwise() {
        let (u, s) = StreamConfig::default().generate().unwrap();
        let mut reg = StrategyConfig::of(StrategyKind::RegAnneal);
        reg.reg_anneal.lambda0 = 0.0;
        let make = |st: StrategyConfig| {
            HashedSoftmaxLearner::new(256, s.answer_vocabulary(), u.templates.clone(), HashedSoftmaxConfig::default(), st, cost(1.0)).unwrap()
        };
        let mut a = make(StrategyConfig::of(StrategyKind::Vanilla));
        let mut b = make(reg);
        for step in s.steps.iter().take(5) {
            a.begin_step(step.index).unwrap();
            b.begin_step(step.index).unwrap();
            a.train_batch(&step.knowledge).unwrap();
            b.train_batch(&step.knowledge).unwrap();
        }
        let (Params::Full { w: wa }, Params::Full { w: wb }) = (&a.params, &b.params) else {
            panic!("full params expected")
        };
        assert!(wa.iter().zip(wb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn empty_and_unparseable_items() {
        let (mut l, _, _) = setup(StrategyKind::Vanilla);
        let id = l.snapshot_id().unwrap();
        assert_eq!(l.train_batch(&[]).unwrap(), TrainReport::default());
        let junk = KnowledgeItem {
            item_id: "X".into(),
            text: "nothing to see".into(),
            date: 0,
            token_count: 3,
            source: SourceRef {
                fact_id: "F".into(),
                version: 0,
            },
            step: 1,
        };
        let r = l.train_batch(std::slice::from_ref(&junk)).unwrap();
        assert_eq!((r.skipped, r.tokens_processed), (1, 3));
        assert_eq!(l.snapshot_id().unwrap(), id);
        assert_eq!(l.predict_loss(&[junk]).unwrap(), vec![UNLEARNABLE_LOSS]);
    }

    #[test]
    fn untrained_embedding_is_hashed_input() {
        let (mut l, _, qa) = setup(StrategyKind::Vanilla);
        let e = l.embed(&[qa[0].query.clone()]).unwrap();
        assert_eq!(e[0], hash_embed(&qa[0].query, 256));
    }
}
