//! Training objectives: continuation likelihood, identity classification,
//! batch-hard triplet, and their balanced combination.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Euclidean,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletConfig {
    pub margin: f64,
    pub distance: Distance,
    pub reduction: Reduction,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            margin: 0.3,
            distance: Distance::Euclidean,
            reduction: Reduction::Mean,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.margin.is_finite() || self.margin < 0.0 {
            return Err(Error::Config(format!("triplet margin {} invalid", self.margin)));
        }
        Ok(())
    }
}

/// Scalar loss values recorded per training step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lm_nll: f64,
    pub id_loss: f64,
    pub triplet_loss: f64,
    pub overall: f64,
    pub lambda: f64,
}

/// Mean negative log-likelihood of the masked (answer) tokens, with
/// next-token alignment: the logits at position `i-1` score token `i`.
/// Unmasked positions contribute nothing, exactly.
pub fn lm_nll(tape: &mut Tape, logits: Var, seq: &TokenSequence) -> Result<Var> {
    let (rows, _) = tape.shape(logits);
    if rows != seq.len() {
        return Err(Error::BadShape {
            op: "lm_nll",
            expected: format!("{} logit rows", seq.len()),
            got: vec![rows],
        });
    }
    if seq.len() < 2 {
        return Err(Error::EmptyLossMask);
    }
    let context: Vec<usize> = (0..seq.len() - 1).collect();
    let pred = tape.select_rows(logits, &context)?;
    let targets = &seq.ids[1..];
    let weights = &seq.loss_mask[1..];
    tape.softmax_cross_entropy(pred, targets, Some(weights))
}

/// Mean cross-entropy of identity logits over a P·K batch.
pub fn id_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels, None)
}

/// Pairwise distance matrix `[n, n]` between embedding rows, on the tape.
pub fn pairwise_distances(tape: &mut Tape, embeddings: Var, distance: Distance) -> Result<Var> {
    let et = tape.transpose(embeddings)?;
    let gram = tape.matmul(embeddings, et)?;
    match distance {
        Distance::Euclidean => {
            // D² = s_i + s_j − 2·e_i·e_j, clamped before the root so
            // identical rows come out exactly 0
            let sq = tape.mul(embeddings, embeddings)?;
            let s = tape.row_sum(sq)?;
            let st = tape.transpose(s)?;
            let neg2 = tape.scale(gram, -2.0)?;
            let d2 = tape.add_col_broadcast(neg2, s)?;
            let d2 = tape.add_row_broadcast(d2, st)?;
            let d2 = tape.clamp_min(d2, 0.0)?;
            tape.sqrt0(d2)
        }
        Distance::Cosine => {
            let sq = tape.mul(embeddings, embeddings)?;
            let s = tape.row_sum(sq)?;
            let norms = tape.sqrt0(s)?;
            let nt = tape.transpose(norms)?;
            let outer = tape.matmul(norms, nt)?;
            let outer = tape.clamp_min(outer, 1e-12)?;
            let inv = tape.recip(outer)?;
            let cos = tape.mul(gram, inv)?;
            let neg = tape.scale(cos, -1.0)?;
            tape.add_scalar(neg, 1.0)
        }
    }
}

/// Verify the P×K layout and return (p, k).
fn pk_structure(labels: &[usize]) -> Result<(usize, usize)> {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let p = counts.len();
    let k = labels.len() / p.max(1);
    let uniform = counts.values().all(|&c| c == k) && p * k == labels.len();
    if !uniform || p < 2 || k < 2 {
        return Err(Error::BadTripletBatch { p, k });
    }
    Ok((p, k))
}

/// Batch-hard triplet loss. Each row is an anchor; the hinge is
/// `[margin + max(same-ID distance) − min(other-ID distance)]₊`, where the
/// positive max ranges over all K samples of the anchor's identity
/// (anchor included, contributing distance 0).
pub fn triplet_loss(
    tape: &mut Tape,
    embeddings: Var,
    labels: &[usize],
    cfg: &TripletConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (n, _) = tape.shape(embeddings);
    if labels.len() != n {
        return Err(Error::BadShape {
            op: "triplet_loss",
            expected: format!("{n} labels"),
            got: vec![labels.len()],
        });
    }
    pk_structure(labels)?;
    let d = pairwise_distances(tape, embeddings, cfg.distance)?;
    let mut pos_mask = vec![false; n * n];
    let mut neg_mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] {
                pos_mask[i * n + j] = true;
            } else {
                neg_mask[i * n + j] = true;
            }
        }
    }
    let hard_pos = tape.masked_row_max(d, &pos_mask)?;
    let hard_neg = tape.masked_row_min(d, &neg_mask)?;
    let gap = tape.sub(hard_pos, hard_neg)?;
    let shifted = tape.add_scalar(gap, cfg.margin)?;
    let hinges = tape.relu(shifted)?;
    match cfg.reduction {
        Reduction::Sum => tape.sum(hinges),
        Reduction::Mean => tape.mean(hinges),
    }
}

/// `λ·lm + (1−λ)·(id + triplet)`, all on the tape so every term backprops.
/// At λ=1 the result aliases the LM term; at λ=0 it is exactly id+triplet.
pub fn overall_loss(tape: &mut Tape, lm: Var, id: Var, triplet: Var, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::LambdaOutOfRange(lambda));
    }
    if lambda == 1.0 {
        return Ok(lm);
    }
    let reid = tape.add(id, triplet)?;
    if lambda == 0.0 {
        return Ok(reid);
    }
    let a = tape.scale(lm, lambda)?;
    let b = tape.scale(reid, 1.0 - lambda)?;
    tape.add(a, b)
}
