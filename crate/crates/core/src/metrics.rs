//! Stream-learning metrics.
//!
//! Transfer metrics use the adjacent-task forms over the sparse accuracy
//! matrix `R[i][j]` (model after task `i`, evaluated on task `j`):
//!
//! ```text
//! BWT = 1/(T-1) * sum_{i=2..T} (R[i][i-1] - R[i-1][i-1])
//! FWT = 1/(T-1) * sum_{i=2..T} (R[i][i]   - R[i-1][i])
//! KAR = (FWT + BWT) * total_tokens / training_time
//! ```
//!
//! The knowledge gap is the mean Euclidean distance between paired,
//! renormalized item embeddings.

use crate::learners::{Learner, LearnerError};
use crate::text::{hash_embed, normalize_answer};
use crate::types::{AccuracyMatrix, EmbeddingVector, MatrixError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("training time must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("total tokens must be non-negative, got {0}")]
    NegativeTokens(f64),
    #[error("no previous snapshot for a temporal knowledge-gap configuration")]
    MissingSnapshot,
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
}

/// One row of per-step metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub t: usize,
    pub em: f64,
    pub bwt: f64,
    pub fwt: f64,
    pub kar: f64,
    pub kg_alignment: f64,
    pub kg_forgetting: f64,
    pub kg_updating: f64,
    /// Cumulative.
    pub tokens_trained: u64,
    /// Cumulative seconds (simulated or wall).
    pub train_time_s: f64,
    /// Items discarded at this step by the budget.
    pub discarded_items: usize,
}

/// Fraction of positions where trimmed prediction and trimmed gold agree.
pub fn exact_match<P: AsRef<str>, G: AsRef<str>>(predictions: &[P], golds: &[G]) -> Result<f64, MetricError> {
    if predictions.len() != golds.len() {
        return Err(MetricError::LengthMismatch(predictions.len(), golds.len()));
    }
    if predictions.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| normalize_answer(p.as_ref()) == normalize_answer(g.as_ref()))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

fn check_tasks(tasks: usize) -> Result<(), MetricError> {
    if tasks < 2 {
        return Err(MatrixError::TooFewTasks(tasks).into());
    }
    Ok(())
}

/// Adjacent-task backward transfer over tasks `1..=tasks`.
pub fn bwt(matrix: &AccuracyMatrix, tasks: usize) -> Result<f64, MetricError> {
    check_tasks(tasks)?;
    let mut sum = 0.0;
    for i in 2..=tasks {
        sum += matrix.require(i, i - 1)? - matrix.require(i - 1, i - 1)?;
    }
    Ok(sum / (tasks - 1) as f64)
}

/// Adjacent-task forward transfer over tasks `1..=tasks`.
pub fn fwt(matrix: &AccuracyMatrix, tasks: usize) -> Result<f64, MetricError> {
    check_tasks(tasks)?;
    let mut sum = 0.0;
    for i in 2..=tasks {
        sum += matrix.require(i, i)? - matrix.require(i - 1, i)?;
    }
    Ok(sum / (tasks - 1) as f64)
}

/// Knowledge acquisition rate.
pub fn kar(fwt: f64, bwt: f64, total_tokens: f64, training_time_s: f64) -> Result<f64, MetricError> {
    if total_tokens < 0.0 {
        return Err(MetricError::NegativeTokens(total_tokens));
    }
    if training_time_s <= 0.0 || training_time_s.is_nan() {
        return Err(MetricError::NonPositiveTime(training_time_s));
    }
    Ok((fwt + bwt) * total_tokens / training_time_s)
}

/// Mean Euclidean distance between paired, renormalized embeddings.
pub fn knowledge_gap(set_a: &[EmbeddingVector], set_b: &[EmbeddingVector]) -> Result<f64, MetricError> {
    if set_a.len() != set_b.len() {
        return Err(MetricError::LengthMismatch(set_a.len(), set_b.len()));
    }
    if set_a.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut total = 0.0;
    for (a, b) in set_a.iter().zip(set_b) {
        if a.dim() != b.dim() {
            return Err(MetricError::DimensionMismatch(a.dim(), b.dim()));
        }
        total += a.renormalized().distance(&b.renormalized());
    }
    Ok(total / set_a.len() as f64)
}

/// Which pair of knowledge representations the gap compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KgConfig {
    /// Hashed input embedding vs the current model embedding.
    Alignment,
    /// Previous vs current model embeddings on probes of earlier tasks.
    Forgetting,
    /// Current vs previous model embeddings on probes of the latest task.
    Updating,
}

/// Knowledge gap of a learner on `probes` in one configuration.
///
/// `previous` holds the model embeddings of the same probes captured at the
/// previous snapshot; temporal configurations require it.
pub fn kg_capture(
    learner: &mut dyn Learner,
    probes: &[String],
    config: KgConfig,
    previous: Option<&[EmbeddingVector]>,
    dim: usize,
) -> Result<f64, MetricError> {
    if probes.is_empty() {
        return Err(MetricError::Empty);
    }
    let current = learner.embed(probes)?;
    match config {
        KgConfig::Alignment => {
            let world: Vec<EmbeddingVector> = probes.iter().map(|p| hash_embed(p, dim)).collect();
            knowledge_gap(&world, &current)
        }
        KgConfig::Forgetting => knowledge_gap(previous.ok_or(MetricError::MissingSnapshot)?, &current),
        KgConfig::Updating => knowledge_gap(&current, previous.ok_or(MetricError::MissingSnapshot)?),
    }
}

/// Percent display scale used by reports.
pub fn as_percent(x: f64) -> f64 {
    x * 100.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(cells: &[((usize, usize), f64)]) -> AccuracyMatrix {
        let mut m = AccuracyMatrix::new();
        for &((i, j), v) in cells {
            m.set(i, j, v).unwrap();
        }
        m
    }

    #[test]
    fn em_examples() {
        assert_eq!(exact_match(&["Paris"], &["Paris"]).unwrap(), 1.0);
        assert_eq!(exact_match(&[" Paris ", "London"], &["Paris", "Berlin"]).unwrap(), 0.5);
        assert_eq!(exact_match(&["paris"], &["Paris"]).unwrap(), 0.0);
        assert!(matches!(exact_match(&["a"], &["a", "b"]), Err(MetricError::LengthMismatch(1, 2))));
        let empty: [&str; 0] = [];
        assert!(matches!(exact_match(&empty, &empty), Err(MetricError::Empty)));
    }

    #[test]
    fn bwt_examples() {
        let m = matrix(&[((2, 1), 0.6), ((1, 1), 0.8)]);
        assert!((bwt(&m, 2).unwrap() - (-0.2)).abs() < 1e-15);
        // Direct summation: ((0.6-0.8) + (0.5-0.7)) / 2 = -0.2
        let m = matrix(&[((2, 1), 0.6), ((1, 1), 0.8), ((3, 2), 0.5), ((2, 2), 0.7)]);
        let oracle = ((0.6 - 0.8) + (0.5 - 0.7)) / 2.0;
        assert_eq!(bwt(&m, 3).unwrap(), oracle);
        assert!((oracle - (-0.2)).abs() < 1e-15);
        let mut c = AccuracyMatrix::new();
        for i in 1..=5 {
            for j in 1..=5 {
                c.set(i, j, 0.37).unwrap();
            }
        }
        assert_eq!(bwt(&c, 5).unwrap(), 0.0);
    }

    #[test]
    fn fwt_examples() {
        let m = matrix(&[((2, 2), 0.9), ((1, 2), 0.1)]);
        assert!((fwt(&m, 2).unwrap() - 0.8).abs() < 1e-15);
        let m = matrix(&[((2, 2), 0.9), ((1, 2), 0.1), ((3, 3), 0.4), ((2, 3), 0.3)]);
        let oracle = ((0.9 - 0.1) + (0.4 - 0.3)) / 2.0;
        assert_eq!(fwt(&m, 3).unwrap(), oracle);
        let m = matrix(&[((2, 2), 0.3), ((1, 2), 0.3), ((3, 3), 0.6), ((2, 3), 0.6)]);
        assert_eq!(fwt(&m, 3).unwrap(), 0.0);
    }

    #[test]
    fn transfer_errors() {
        let m = matrix(&[((1, 1), 0.5)]);
        assert!(matches!(bwt(&m, 1), Err(MetricError::Matrix(MatrixError::TooFewTasks(1)))));
        assert!(matches!(fwt(&m, 2), Err(MetricError::Matrix(MatrixError::Missing(2, 2)))));
    }

    #[test]
    fn kar_examples() {
        assert_eq!(kar(0.5, -0.1, 1000.0, 10.0).unwrap(), 40.0);
        assert_eq!(kar(0.25, -0.25, 1234.0, 7.0).unwrap(), 0.0);
        // (9.27 - 4.18) * 100 / 1 = 509.0
        assert!((kar(9.27, -4.18, 100.0, 1.0).unwrap() - 509.0).abs() < 1e-9);
        assert!(matches!(kar(0.1, 0.1, 10.0, 0.0), Err(MetricError::NonPositiveTime(_))));
        assert!(matches!(kar(0.1, 0.1, 10.0, -1.0), Err(MetricError::NonPositiveTime(_))));
    }

    #[test]
    fn kg_examples() {
        let e1 = EmbeddingVector::new(vec![1.0, 0.0, 0.0]);
        let e2 = EmbeddingVector::new(vec![0.0, 1.0, 0.0]);
        assert_eq!(knowledge_gap(std::slice::from_ref(&e1), std::slice::from_ref(&e1)).unwrap(), 0.0);
        assert!((knowledge_gap(std::slice::from_ref(&e1), std::slice::from_ref(&e2)).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(matches!(knowledge_gap(std::slice::from_ref(&e1), &[]), Err(MetricError::LengthMismatch(1, 0))));
        let short = EmbeddingVector::new(vec![1.0]);
        assert!(matches!(knowledge_gap(&[e1], &[short]), Err(MetricError::DimensionMismatch(3, 1))));
    }

    proptest! {
        #[test]
        fn em_in_unit_interval(pairs in prop::collection::vec(("[ab ]{0,3}", "[ab ]{0,3}"), 1..20)) {
            let (p, g): (Vec<String>, Vec<String>) = pairs.into_iter().unzip();
            let em = exact_match(&p, &g).unwrap();
            prop_assert!((0.0..=1.0).contains(&em));
            let all = p.iter().zip(&g).all(|(a, b)| a.trim() == b.trim());
            prop_assert_eq!(em == 1.0, all);
        }

        #[test]
        fn transfer_bounded(vals in prop::collection::vec(0.0f64..=1.0, 64), t in 2usize..8) {
            let mut m = AccuracyMatrix::new();
            for i in 0..=t {
                for j in 1..=t {
                    m.set(i, j, vals[(i * 8 + j) % 64]).unwrap();
                }
            }
            prop_assert!(bwt(&m, t).unwrap().abs() <= 1.0);
            prop_assert!(fwt(&m, t).unwrap().abs() <= 1.0);
        }

        #[test]
        fn kar_sign_and_scaling(f in -1.0f64..1.0, b in -1.0f64..1.0, tok in 1.0f64..1e6, time in 0.01f64..1e4) {
            let k = kar(f, b, tok, time).unwrap();
            prop_assert_eq!(k.signum() == (f + b).signum() || k == 0.0, true);
            let k2 = kar(f, b, 2.0 * tok, time).unwrap();
            prop_assert!((k2 - 2.0 * k).abs() <= 1e-9 * k.abs().max(1.0));
            let k3 = kar(f, b, tok, 2.0 * time).unwrap();
            prop_assert!((2.0 * k3 - k).abs() <= 1e-9 * k.abs().max(1.0));
        }
    }
}
