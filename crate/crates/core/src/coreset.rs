//! Coreset selection over one step's knowledge items.

use crate::types::EmbeddingVector;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CoresetError {
    #[error("selection ratio {0} is outside (0, 1]")]
    Ratio(f64),
    #[error("nothing to select from")]
    Empty,
    #[error("embedding {index} has dimension {found}, expected {expected}")]
    Dimension {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("predicted loss at index {0} is NaN")]
    NanLoss(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Random,
    Kcenter,
    ModelBased,
}

/// Ranking direction for model-based selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossOrder {
    /// Lowest predicted loss first.
    #[default]
    Ascending,
    Descending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Sorted, unique, in `[0, n)`.
    pub indices: Vec<usize>,
    pub ratio: f64,
    pub method: SelectionMethod,
}

/// `max(1, round(ratio * n))`, rounding halves up.
pub fn subset_size(n: usize, ratio: f64) -> Result<usize, CoresetError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(CoresetError::Ratio(ratio));
    }
    if n == 0 {
        return Err(CoresetError::Empty);
    }
    Ok(((ratio * n as f64).round() as usize).clamp(1, n))
}

pub fn select_random(n: usize, ratio: f64, seed: u64) -> Result<SelectionResult, CoresetError> {
    let k = subset_size(n, ratio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = sample(&mut rng, n, k).into_vec();
    indices.sort_unstable();
    Ok(SelectionResult {
        indices,
        ratio,
        method: SelectionMethod::Random,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy farthest-point traversal returning centers in the order chosen.
///
/// The first center is the point farthest from the centroid; each later one
/// maximizes the distance to its nearest chosen center. Ties go to the
/// lowest index.
pub fn kcenter_order<P: AsRef<[f64]>>(points: &[P], k: usize) -> Result<Vec<usize>, CoresetError> {
    let n = points.len();
    if n == 0 {
        return Err(CoresetError::Empty);
    }
    let dim = points[0].as_ref().len();
    for (index, p) in points.iter().enumerate() {
        let found = p.as_ref().len();
        if found != dim {
            return Err(CoresetError::Dimension {
                index,
                expected: dim,
                found,
            });
        }
    }
    let k = k.min(n);
    let mut centroid = vec![0.0; dim];
    for p in points {
        for (c, v) in centroid.iter_mut().zip(p.as_ref()) {
            *c += v;
        }
    }
    for c in &mut centroid {
        *c /= n as f64;
    }

    let mut chosen = vec![false; n];
    let mut order = Vec::with_capacity(k);
    // Squared distances preserve the argmax and its ties.
    let mut best = 0;
    let mut best_d = f64::NEG_INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = sq_dist(p.as_ref(), &centroid);
        if d > best_d {
            best_d = d;
            best = i;
        }
    }
    let mut min_d = vec![f64::INFINITY; n];
    while order.len() < k {
        chosen[best] = true;
        order.push(best);
        let center = points[best].as_ref();
        let mut next = None;
        let mut next_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p.as_ref(), center);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !chosen[i] && min_d[i] > next_d {
                next_d = min_d[i];
                next = Some(i);
            }
        }
        match next {
            Some(i) => best = i,
            None => break,
        }
    }
    Ok(order)
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        self.values()
    }
}

pub fn select_kcenter(embeddings: &[EmbeddingVector], ratio: f64) -> Result<SelectionResult, CoresetError> {
    let k = subset_size(embeddings.len(), ratio)?;
    let mut indices = kcenter_order(embeddings, k)?;
    indices.sort_unstable();
    Ok(SelectionResult {
        indices,
        ratio,
        method: SelectionMethod::Kcenter,
    })
}

pub fn select_model_based(predicted_losses: &[f64], ratio: f64, order: LossOrder) -> Result<SelectionResult, CoresetError> {
    let k = subset_size(predicted_losses.len(), ratio)?;
    if let Some(i) = predicted_losses.iter().position(|l| l.is_nan()) {
        return Err(CoresetError::NanLoss(i));
    }
    let mut ranked: Vec<usize> = (0..predicted_losses.len()).collect();
    ranked.sort_by(|&a, &b| {
        let (la, lb) = (predicted_losses[a], predicted_losses[b]);
        let by_loss = match order {
            LossOrder::Ascending => la.total_cmp(&lb),
            LossOrder::Descending => lb.total_cmp(&la),
        };
        by_loss.then(a.cmp(&b))
    });
    let mut indices = ranked[..k].to_vec();
    indices.sort_unstable();
    Ok(SelectionResult {
        indices,
        ratio,
        method: SelectionMethod::ModelBased,
    })
}
