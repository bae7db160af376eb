//! Mode predictor, repeat and explore decoders, and their mixture.

use std::collections::BTreeMap;

use crate::data::Batch;
use crate::encoder::EncodedBatch;
use crate::model::{Ablation, Bound, BoundAttention, ModelConfig, Phase, Result};
use crate::tensor::{EmptyRow, Tape, Tensor, Var};

/// Unnormalized attention scores `[B × T]` of every position against the
/// last state, `vᵀ tanh(W h_t + U h_τ)`.
fn attention_scores(tape: &mut Tape, enc: &EncodedBatch, att: BoundAttention) -> Result<Var> {
    let query = tape.linear(enc.last, att.w)?;
    let query = tape.repeat_rows(query, enc.steps);
    let keys = tape.linear(enc.states_flat, att.u)?;
    let pre = tape.add(query, keys)?;
    let act = tape.tanh(pre);
    let e = tape.linear(act, att.v)?;
    Ok(tape.reshape(e, &[enc.size, enc.steps])?)
}

/// `[B × T]` masked softmax of the attention scores over real positions.
pub fn attention_weights(tape: &mut Tape, enc: &EncodedBatch, att: BoundAttention) -> Result<Var> {
    let scores = attention_scores(tape, enc, att)?;
    Ok(tape.softmax_rows(scores, Some(&enc.mask), EmptyRow::Error)?)
}

/// `[B × 2]` mode probabilities, column 0 repeat and column 1 explore.
pub fn predict_mode(tape: &mut Tape, enc: &EncodedBatch, bound: &Bound) -> Result<Var> {
    let alpha = attention_weights(tape, enc, bound.mode)?;
    let context = tape.attend(alpha, enc.states)?;
    let logits = tape.linear(context, bound.mode_out)?;
    Ok(tape.softmax_rows(logits, None, EmptyRow::Error)?)
}

/// `[B × |I|]` repeat distribution. Position weights are summed per item, so
/// an item seen twice collects both attention weights and items outside the
/// prefix get exactly zero.
pub fn repeat_distribution(
    tape: &mut Tape,
    enc: &EncodedBatch,
    batch: &Batch,
    bound: &Bound,
    num_items: usize,
) -> Result<Var> {
    let alpha = attention_weights(tape, enc, bound.repeat)?;
    let index: Vec<usize> = batch
        .items
        .iter()
        .zip(&batch.mask)
        .map(|(&i, &m)| if m { i } else { 0 })
        .collect();
    Ok(tape.scatter_cols(alpha, &index, &batch.mask, num_items)?)
}

#[derive(Debug, Clone)]
pub struct ExploreOutput {
    /// `[B × |I|]`
    pub dist: Var,
    /// Rows whose prefix already contains every item. Their distribution is
    /// all zero.
    pub covered: Vec<bool>,
}

/// `[B × |I|]` explore distribution over items outside each prefix.
///
/// The hybrid state is `[h_t, c^e]`, or `[h_t, h_t]` without attention. Under
/// the no-repeat ablation the explore decoder is the whole model, so nothing
/// is masked.
pub fn explore_distribution(
    tape: &mut Tape,
    enc: &EncodedBatch,
    batch: &Batch,
    bound: &Bound,
    cfg: &ModelConfig,
    phase: &mut Phase<'_>,
) -> Result<ExploreOutput> {
    let context = match cfg.ablation {
        Ablation::NoAttention => enc.last,
        _ => {
            let alpha = attention_weights(tape, enc, bound.explore)?;
            tape.attend(alpha, enc.states)?
        }
    };
    let mut hybrid = tape.concat_cols(&[enc.last, context])?;
    if let Some((p, rng)) = phase.dropout_hybrid() {
        hybrid = tape.dropout(hybrid, p, Some(rng))?;
    }
    let logits = tape.linear(hybrid, bound.explore_out)?;

    let n = cfg.num_items;
    if cfg.ablation == Ablation::NoRepeat {
        let dist = tape.softmax_rows(logits, None, EmptyRow::Error)?;
        return Ok(ExploreOutput {
            dist,
            covered: vec![false; batch.size],
        });
    }
    let mut allowed = vec![true; batch.size * n];
    for b in 0..batch.size {
        for &i in batch.prefix(b) {
            allowed[b * n + i] = false;
        }
    }
    let covered = allowed.chunks(n).map(|row| !row.contains(&true)).collect();
    let dist = tape.softmax_rows(logits, Some(&allowed), EmptyRow::Zero)?;
    Ok(ExploreOutput { dist, covered })
}

/// `p_r · P_repeat + p_e · P_explore`, row by row. Rows flagged in `covered`
/// have no explore support and use mode weights (1, 0) instead.
pub fn mix(tape: &mut Tape, p_mode: Var, p_repeat: Var, p_explore: Var, covered: &[bool]) -> Result<Var> {
    let weights = if covered.contains(&true) {
        let forced: Vec<f64> = covered.iter().flat_map(|_| [1.0, 0.0]).collect();
        let forced = tape.constant(Tensor::constant(&[covered.len(), 2], forced)?);
        let keep: Vec<bool> = covered.iter().map(|c| !c).collect();
        tape.select_rows(&keep, p_mode, forced)?
    } else {
        p_mode
    };
    let p_r = tape.column(weights, 0)?;
    let p_e = tape.column(weights, 1)?;
    let rep = tape.scale_rows(p_repeat, p_r)?;
    let exp = tape.scale_rows(p_explore, p_e)?;
    Ok(tape.add(rep, exp)?)
}

/// Single-prefix mixture over plain values; `repeat` is keyed by item.
pub fn mix_distributions(p_mode: (f64, f64), repeat: &BTreeMap<usize, f64>, explore: &[f64]) -> Vec<f64> {
    let (mut p_r, mut p_e) = p_mode;
    if explore.iter().all(|&x| x == 0.0) {
        (p_r, p_e) = (1.0, 0.0);
    }
    let mut out: Vec<f64> = explore.iter().map(|x| p_e * x).collect();
    for (&i, &p) in repeat {
        out[i] += p_r * p;
    }
    out
}

#[cfg(test)]
mod tests;
