//! Shared domain records.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Day index relative to the stream epoch.
pub type Day = u32;

/// One version of a (subject, relation) fact chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    /// Identifies the chain; shared by every version.
    pub fact_id: String,
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub valid_from: Day,
    pub version: u32,
    pub time_variant: bool,
}

impl Fact {
    pub fn source(&self) -> SourceRef {
        SourceRef {
            fact_id: self.fact_id.clone(),
            version: self.version,
        }
    }
}

/// Points a stream record back at the fact version it was rendered from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SourceRef {
    pub fact_id: String,
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub item_id: String,
    pub text: String,
    pub date: Day,
    pub token_count: usize,
    pub source: SourceRef,
    /// 1-based stream step the item belongs to.
    #[serde(default)]
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAItem {
    pub qa_id: String,
    pub query: String,
    pub gold: String,
    pub date: Day,
    pub source: SourceRef,
    #[serde(default)]
    pub step: usize,
}

/// Fixed-length real vector. Values are stored as produced; `norm` is
/// computed on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    /// Scales `values` to unit norm; the zero vector is returned unchanged.
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = l2(&values);
        if norm > 0.0 {
            for v in &mut values {
                *v /= norm;
            }
        }
        Self { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        l2(&self.values)
    }

    /// Unit-norm copy (zero stays zero).
    pub fn renormalized(&self) -> Self {
        Self::normalized(self.values.clone())
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

fn l2(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Debug, Error, PartialEq)]
pub enum MatrixError {
    #[error("accuracy {value} at ({model_step}, {task}) is outside [0, 1]")]
    OutOfRange {
        model_step: usize,
        task: usize,
        value: f64,
    },
    #[error("accuracy matrix has no entry at ({0}, {1})")]
    Missing(usize, usize),
    #[error("at least two tasks are required, got {0}")]
    TooFewTasks(usize),
}

/// Sparse `R[i][j]`: accuracy on task `j` of the model after training on
/// tasks `1..=i`. Row `0` is the untrained model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    entries: BTreeMap<(usize, usize), f64>,
    tasks: usize,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, model_step: usize, task: usize, value: f64) -> Result<(), MatrixError> {
        if !(0.0..=1.0).contains(&value) {
            return Err(MatrixError::OutOfRange {
                model_step,
                task,
                value,
            });
        }
        self.entries.insert((model_step, task), value);
        self.tasks = self.tasks.max(task);
        Ok(())
    }

    pub fn get(&self, model_step: usize, task: usize) -> Option<f64> {
        self.entries.get(&(model_step, task)).copied()
    }

    pub fn require(&self, model_step: usize, task: usize) -> Result<f64, MatrixError> {
        self.get(model_step, task)
            .ok_or(MatrixError::Missing(model_step, task))
    }

    /// Number of tasks seen (largest task index stored).
    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.entries.iter().map(|(k, v)| (*k, *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_rejects_out_of_range() {
        let mut m = AccuracyMatrix::new();
        assert!(m.set(1, 1, 1.2).is_err());
        assert!(m.set(1, 1, -0.1).is_err());
        assert!(m.set(1, 1, f64::NAN).is_err());
        m.set(2, 3, 0.5).unwrap();
        assert_eq!(m.tasks(), 3);
        assert_eq!(m.require(1, 1), Err(MatrixError::Missing(1, 1)));
    }

    #[test]
    fn knowledge_item_field_names() {
        let item = KnowledgeItem {
            item_id: "K1".into(),
            text: "E1 lives in E2.".into(),
            date: 4,
            token_count: 4,
            source: SourceRef {
                fact_id: "F1".into(),
                version: 0,
            },
            step: 1,
        };
        let v: serde_json::Value = serde_json::to_value(&item).unwrap();
        for key in ["item_id", "text", "date", "source"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["source"]["fact_id"], "F1");
    }

    #[test]
    fn distance_between_basis_vectors() {
        let a = EmbeddingVector::new(vec![1.0, 0.0]);
        let b = EmbeddingVector::new(vec![0.0, 1.0]);
        assert!((a.distance(&b) - 2f64.sqrt()).abs() < 1e-15);
    }
}
