//! Scoring, ranking loss, cross-view contrastive loss, the combined
//! multi-task objective, and negative sampling.
//!
//! The contrastive denominator sums over the other instances only; the
//! positive pair appears in the numerator alone, so the loss can go
//! negative. `include_positive` switches to the conventional form where
//! the positive also enters the denominator.

use crate::data::{InteractionGraph, ItemId, UserId};
use crate::numerics::{cosine_similarity, COSINE_EPS};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use rand::Rng;
use thiserror::Error;

/// Large negative used to blank the positive column out of a row-wise
/// logsumexp; exp underflows to exactly 0 after max subtraction.
const MASK_NEG: f64 = -1e30;

/// Resample attempts before falling back to an explicit complement draw.
const NEG_SAMPLE_CAP: usize = 100;

#[derive(Error, Debug)]
pub enum ObjectiveError {
    #[error("user {0:?} interacts with every item, no negative exists")]
    DegenerateUser(UserId),
    #[error("contrastive loss needs at least 2 instances, got {0}")]
    TooFewInstances(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Loss hyperparameters. Margin is fixed at 1.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 2e-4,
            lambda2: 1e-4,
            tau: 0.5,
        }
    }
}

/// One training triple: user, observed item, sampled negative item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainTriple {
    pub user: UserId,
    pub pos: ItemId,
    pub neg: ItemId,
}

/// Inner-product preference score between pooled representations.
pub fn score(z_u: &[f64], z_v: &[f64]) -> f64 {
    assert_eq!(z_u.len(), z_v.len());
    z_u.iter().zip(z_v).map(|(a, b)| a * b).sum()
}

/// Pairwise margin loss: sum of max(0, 1 - pos + neg) over the batch.
pub fn margin_loss(pairs: &[(f64, f64)]) -> f64 {
    pairs
        .iter()
        .map(|&(pos, neg)| (1.0 - pos + neg).max(0.0))
        .sum()
}

/// Cross-view contrastive loss between paired rows of two embedding
/// matrices. Row i of both views is the same instance; similarity is
/// cosine, tempered by `tau`.
pub fn infonce(
    local: &Tensor,
    global: &Tensor,
    tau: f64,
    include_positive: bool,
) -> Result<f64, ObjectiveError> {
    let n = local.rows();
    if n < 2 {
        return Err(ObjectiveError::TooFewInstances(n));
    }
    assert_eq!(local.shape(), global.shape());
    let mut loss = 0.0;
    for u in 0..n {
        let pos = cosine_similarity(local.row(u), global.row(u)) / tau;
        let mut terms: Vec<f64> = (0..n)
            .filter(|&v| v != u)
            .map(|v| cosine_similarity(local.row(u), global.row(v)) / tau)
            .collect();
        if include_positive {
            terms.push(pos);
        }
        let row = Tensor::row_vector(terms);
        loss += crate::numerics::logsumexp_row(&row) - pos;
    }
    Ok(loss)
}

/// Tape version of [`infonce`] over full matrices.
pub fn infonce_var(
    tape: &Tape,
    local: Var,
    global: Var,
    tau: f64,
    include_positive: bool,
) -> Result<Var, ObjectiveError> {
    let n = tape.shape(local)[0];
    if n < 2 {
        return Err(ObjectiveError::TooFewInstances(n));
    }
    let ln = tape.normalize_rows(local, COSINE_EPS);
    let gn = tape.normalize_rows(global, COSINE_EPS);
    let sims = tape.scale(tape.matmul(ln, tape.transpose(gn))?, 1.0 / tau);
    let pos = tape.diag(sims);
    let denom_in = if include_positive {
        sims
    } else {
        let mut mask = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            mask.set(i, i, MASK_NEG);
        }
        tape.add(sims, tape.constant(mask))?
    };
    let lse = tape.logsumexp_rows(denom_in);
    Ok(tape.sum_all(tape.sub(lse, pos)?))
}

/// L = L_m + lambda1 (L_c^u + L_c^v) + lambda2 ||Theta||^2.
pub fn total_loss(
    l_margin: f64,
    l_c_user: f64,
    l_c_item: f64,
    params_sq_norm: f64,
    weights: &LossWeights,
) -> f64 {
    l_margin + weights.lambda1 * (l_c_user + l_c_item) + weights.lambda2 * params_sq_norm
}

/// Uniform draw from the items the user has not interacted with.
pub fn sample_negatives<R: Rng>(
    graph: &InteractionGraph,
    u: UserId,
    rng: &mut R,
) -> Result<ItemId, ObjectiveError> {
    let n_items = graph.n_items();
    if graph.user_degree(u) >= n_items {
        return Err(ObjectiveError::DegenerateUser(u));
    }
    for _ in 0..NEG_SAMPLE_CAP {
        let v = ItemId(rng.gen_range(0..n_items));
        if !graph.has_edge(u, v) {
            return Ok(v);
        }
    }
    // Dense user: draw an index into the explicit complement.
    let complement: Vec<usize> = (0..n_items)
        .filter(|&v| !graph.has_edge(u, ItemId(v)))
        .collect();
    Ok(ItemId(complement[rng.gen_range(0..complement.len())]))
}
