//! Item embedding lookup and GRU encoding of padded session prefixes.

use crate::data::Batch;
use crate::model::{Bound, ModelError, Phase, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Hidden states of a batch of prefixes.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    /// `[B × T·d]`, row `b` holds `h_1 … h_T` back to back.
    pub states: Var,
    /// The same values viewed as `[B·T × d]`.
    pub states_flat: Var,
    /// `[B × d]`, the state at each row's last valid position.
    pub last: Var,
    pub mask: Vec<bool>,
    pub size: usize,
    pub steps: usize,
    pub hidden: usize,
}

/// Runs the GRU from `h_0 = 0` over every prefix in `batch`.
///
/// Padded steps carry the previous state forward unchanged, so `last` is the
/// state after the final real item and padding never touches real positions.
/// Embedding dropout applies only in the training phase.
pub fn encode(
    tape: &mut Tape,
    bound: &Bound,
    batch: &Batch,
    num_items: usize,
    phase: &mut Phase<'_>,
) -> Result<EncodedBatch> {
    if batch.size == 0 || batch.lengths.contains(&0) {
        return Err(ModelError::EmptyPrefix);
    }
    for (&item, &valid) in batch.items.iter().zip(&batch.mask) {
        if valid && item >= num_items {
            return Err(ModelError::Vocabulary {
                index: item,
                size: num_items,
            });
        }
    }
    let hidden = tape.shape(bound.w_z)[0];
    let (b, steps) = (batch.size, batch.steps);

    let mut h = tape.constant(Tensor::zeros(&[b, hidden]));
    let mut states = Vec::with_capacity(steps);
    for t in 0..steps {
        let valid = batch.step_mask(t);
        let idx: Vec<usize> = (0..b)
            .map(|r| if valid[r] { batch.items[r * steps + t] } else { 0 })
            .collect();
        let mut x = tape.gather_rows(bound.embedding, &idx)?;
        if let Some((p, rng)) = phase.dropout_embedding() {
            x = tape.dropout(x, p, Some(rng))?;
        }
        let h_new = gru_step(tape, bound, x, h)?;
        h = tape.select_rows(&valid, h_new, h)?;
        states.push(h);
    }
    let stacked = tape.concat_cols(&states)?;
    let flat = tape.reshape(stacked, &[b * steps, hidden])?;
    Ok(EncodedBatch {
        states: stacked,
        states_flat: flat,
        last: h,
        mask: batch.mask.clone(),
        size: b,
        steps,
        hidden,
    })
}

/// z = σ(W_z[x, h] + b_z), r = σ(W_r[x, h] + b_r),
/// h̃ = tanh(W_h[x, r ⊙ h] + b_h), h' = (1 − z) ⊙ h + z ⊙ h̃
fn gru_step(tape: &mut Tape, p: &Bound, x: Var, h: Var) -> Result<Var> {
    let xh = tape.concat_cols(&[x, h])?;
    let z = tape.linear(xh, p.w_z)?;
    let z = tape.add_bias(z, p.b_z)?;
    let z = tape.sigmoid(z);
    let r = tape.linear(xh, p.w_r)?;
    let r = tape.add_bias(r, p.b_r)?;
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, h)?;
    let xrh = tape.concat_cols(&[x, rh])?;
    let cand = tape.linear(xrh, p.w_h)?;
    let cand = tape.add_bias(cand, p.b_h)?;
    let cand = tape.tanh(cand);
    let keep = tape.one_minus(z);
    let keep = tape.mul(keep, h)?;
    let update = tape.mul(z, cand)?;
    Ok(tape.add(keep, update)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PrefixExample, PAD};
    use crate::model::{ModelConfig, ModelParams};

    fn run(params: &ModelParams, prefixes: &[Vec<usize>]) -> (Tape, EncodedBatch) {
        let ex: Vec<PrefixExample> = prefixes.iter().map(|p| PrefixExample::new(p.clone(), 0)).collect();
        let batch = Batch::from_examples(&ex, PAD);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let enc = encode(&mut tape, &bound, &batch, params.config.num_items, &mut Phase::Eval).unwrap();
        (tape, enc)
    }

    #[test]
    fn zero_parameters_give_zero_states() {
        let p = ModelParams::zeros(ModelConfig::with_sizes(4, 3, 3));
        let (tape, enc) = run(&p, &[vec![0, 1, 2, 3]]);
        assert!(tape.data(enc.states).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_item_prefix() {
        let p = ModelParams::seeded(ModelConfig::with_sizes(4, 3, 3), 5);
        let (tape, enc) = run(&p, &[vec![2]]);
        assert_eq!(tape.shape(enc.states_flat), &[1, 3]);
        assert_eq!(tape.data(enc.states), tape.data(enc.last));
    }

    #[test]
    fn scalar_gru_by_hand() {
        // d_emb = d_hid = 1, W_z = W_r = 0, W_h = [1, 0], emb(A) = 1
        let mut p = ModelParams::zeros(ModelConfig::with_sizes(1, 1, 1));
        p.embedding.data_mut()[0] = 1.0;
        p.gru.w_h.data_mut().copy_from_slice(&[1.0, 0.0]);
        let (tape, enc) = run(&p, &[vec![0]]);
        let h1 = tape.data(enc.last)[0];
        // oracle: z = σ(0) = 0.5, h̃ = tanh(1), h1 = 0.5 · tanh(1)
        let expected = 0.5 * 1f64.tanh();
        assert!((h1 - expected).abs() < 1e-15);
        assert!((h1 - 0.380797).abs() < 1e-6);
    }

    #[test]
    fn states_stay_inside_unit_interval() {
        let p = ModelParams::seeded(ModelConfig::with_sizes(6, 4, 5), 11);
        let (tape, enc) = run(&p, &[vec![0, 1, 2, 3, 4, 5, 0, 1], vec![5, 5]]);
        assert!(tape.data(enc.states).iter().all(|x| x.abs() < 1.0));
    }

    #[test]
    fn padding_does_not_change_real_states() {
        let p = ModelParams::seeded(ModelConfig::with_sizes(6, 4, 5), 3);
        let short = vec![1, 4];
        let (solo_tape, solo) = run(&p, &[short.clone()]);
        let (tape, enc) = run(&p, &[short, vec![0, 1, 2, 3, 4]]);
        let d = enc.hidden;
        let padded_row = &tape.data(enc.states)[..2 * d];
        for (a, b) in padded_row.iter().zip(solo_tape.data(solo.states)) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in tape.data(enc.last)[..d].iter().zip(solo_tape.data(solo.last)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_vocabulary_index_is_rejected() {
        let p = ModelParams::zeros(ModelConfig::with_sizes(3, 2, 2));
        let ex = PrefixExample::new(vec![0, 7], 0);
        let batch = Batch::from_examples([&ex], PAD);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let err = encode(&mut tape, &bound, &batch, 3, &mut Phase::Eval).unwrap_err();
        assert_eq!(err, ModelError::Vocabulary { index: 7, size: 3 });
    }
}
