use proptest::prelude::*;

use super::*;
use crate::data::{PrefixExample, PAD};
use crate::encoder::encode;
use crate::model::{forward, ForwardOutput, ModelParams};

fn cfg(n: usize, d: usize) -> ModelConfig {
    ModelConfig::with_sizes(n, d, d)
}

fn batch_of(prefixes: &[Vec<usize>]) -> Batch {
    let ex: Vec<PrefixExample> = prefixes.iter().map(|p| PrefixExample::new(p.clone(), 0)).collect();
    Batch::from_examples(&ex, PAD)
}

fn run(params: &ModelParams, prefixes: &[Vec<usize>]) -> (Tape, ForwardOutput) {
    let batch = batch_of(prefixes);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = forward(&mut tape, params, &bound, &batch, &mut Phase::Eval).unwrap();
    (tape, out)
}

fn row(tape: &Tape, v: Var, b: usize) -> Vec<f64> {
    let n = tape.value(v).cols();
    tape.data(v)[b * n..(b + 1) * n].to_vec()
}

// Plain-f64 reference helpers.

fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let c = w.cols();
    (0..w.rows()).map(|r| w.data()[r * c..(r + 1) * c].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Attention weights by explicit per-position evaluation.
fn reference_weights(att: &crate::model::AttentionParams, states: &[Vec<f64>]) -> Vec<f64> {
    let last = states.last().unwrap();
    let q = matvec(&att.w, last);
    let scores: Vec<f64> = states
        .iter()
        .map(|h| {
            let k = matvec(&att.u, h);
            q.iter().zip(&k).zip(att.v.data()).map(|((a, b), v)| v * (a + b).tanh()).sum()
        })
        .collect();
    softmax(&scores)
}

fn states_of(tape: &Tape, out: &ForwardOutput, b: usize, len: usize) -> Vec<Vec<f64>> {
    let r = row(tape, out.encoded.states, b);
    r.chunks(out.encoded.hidden).take(len).map(<[f64]>::to_vec).collect()
}

#[test]
fn zero_mode_projection_is_uniform() {
    let mut p = ModelParams::seeded(cfg(6, 4), 1);
    p.mode.w_c.data_mut().fill(0.0);
    let (tape, out) = run(&p, &[vec![0, 3, 1]]);
    assert_eq!(tape.data(out.p_mode.unwrap()), &[0.5, 0.5]);
}

#[test]
fn single_position_attention_reads_that_state() {
    let p = ModelParams::seeded(cfg(6, 4), 2);
    let (tape, out) = run(&p, &[vec![4]]);
    let h1 = states_of(&tape, &out, 0, 1).remove(0);
    let expected = softmax(&matvec(&p.mode.w_c, &h1));
    for (a, b) in tape.data(out.p_mode.unwrap()).iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(row(&tape, out.p_repeat.unwrap(), 0)[4], 1.0);
}

#[test]
fn equal_scores_sum_by_occurrence() {
    // A = 0, B = 1
    let mut p = ModelParams::seeded(cfg(4, 3), 3);
    p.repeat.attention.v.data_mut().fill(0.0);
    let (tape, out) = run(&p, &[vec![0, 1, 0]]);
    let r = row(&tape, out.p_repeat.unwrap(), 0);
    assert!((r[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((r[1] - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(&r[2..], &[0.0, 0.0]);
}

#[test]
fn zero_explore_projection_is_uniform_off_prefix() {
    let mut p = ModelParams::seeded(cfg(3, 3), 4);
    p.explore.w_c.data_mut().fill(0.0);
    let (tape, out) = run(&p, &[vec![0]]);
    assert_eq!(row(&tape, out.p_explore, 0), vec![0.0, 0.5, 0.5]);
}

#[test]
fn masked_logits_by_hand() {
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::constant(&[1, 4], vec![9.0, 0.0, 2f64.ln(), 2f64.ln()]).unwrap());
    let d = tape.softmax_rows(f, Some(&[false, true, true, true]), EmptyRow::Zero).unwrap();
    let expected = [0.0, 0.2, 0.4, 0.4];
    for (a, b) in tape.data(d).iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn repeat_matches_position_enumeration() {
    let p = ModelParams::seeded(cfg(7, 5), 9);
    let prefix = vec![3, 1, 3, 6, 1];
    let (tape, out) = run(&p, &[prefix.clone()]);
    let states = states_of(&tape, &out, 0, prefix.len());
    let alpha = reference_weights(&p.repeat.attention, &states);
    let mut expected = vec![0.0; 7];
    for (&i, a) in prefix.iter().zip(alpha) {
        expected[i] += a;
    }
    for (a, b) in row(&tape, out.p_repeat.unwrap(), 0).iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn explore_matches_direct_evaluation() {
    let p = ModelParams::seeded(cfg(6, 4), 10);
    let prefix = vec![2, 5, 2];
    let (tape, out) = run(&p, &[prefix.clone()]);
    let states = states_of(&tape, &out, 0, prefix.len());
    let alpha = reference_weights(&p.explore.attention, &states);
    let mut hybrid = states.last().unwrap().clone();
    let mut ctx = vec![0.0; 4];
    for (h, a) in states.iter().zip(&alpha) {
        ctx.iter_mut().zip(h).for_each(|(c, x)| *c += a * x);
    }
    hybrid.extend(ctx);
    let f = matvec(&p.explore.w_c, &hybrid);
    let keep: Vec<usize> = (0..6).filter(|i| !prefix.contains(i)).collect();
    let sm = softmax(&keep.iter().map(|&i| f[i]).collect::<Vec<_>>());
    let mut expected = vec![0.0; 6];
    keep.iter().zip(sm).for_each(|(&i, v)| expected[i] = v);
    for (a, b) in row(&tape, out.p_explore, 0).iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn no_attention_uses_last_state_twice() {
    let mut c = cfg(6, 4);
    c.ablation = Ablation::NoAttention;
    let mut p = ModelParams::seeded(c, 12);
    let prefix = vec![1, 2, 3];
    let (tape, out) = run(&p, &[prefix.clone()]);
    let before = row(&tape, out.p_explore, 0);
    // explore attention parameters must not matter
    p.explore.attention.v.data_mut().fill(3.0);
    let (tape, out) = run(&p, &[prefix]);
    assert_eq!(before, row(&tape, out.p_explore, 0));
}

#[test]
fn no_repeat_is_unmasked_explore() {
    let mut c = cfg(5, 3);
    c.ablation = Ablation::NoRepeat;
    let p = ModelParams::seeded(c, 13);
    let (tape, out) = run(&p, &[vec![0, 1]]);
    assert!(out.p_mode.is_none() && out.p_repeat.is_none());
    let r = row(&tape, out.p_final, 0);
    assert!(r.iter().all(|&x| x > 0.0));
    let pred = out.prediction(&tape, 0, &[0, 1]);
    assert_eq!((pred.p_repeat, pred.p_explore), (0.0, 1.0));
    assert!(pred.repeat_dist.is_empty());
}

#[test]
fn full_coverage_falls_back_to_repeat() {
    let p = ModelParams::seeded(cfg(3, 3), 5);
    let (tape, out) = run(&p, &[vec![0, 1, 2, 1]]);
    assert!(row(&tape, out.p_explore, 0).iter().all(|&x| x == 0.0));
    assert_eq!(row(&tape, out.p_final, 0), row(&tape, out.p_repeat.unwrap(), 0));
}

#[test]
fn mixture_examples() {
    let repeat = BTreeMap::from([(0, 0.7), (2, 0.3)]);
    let explore = vec![0.0, 0.6, 0.0, 0.4];
    assert_eq!(mix_distributions((1.0, 0.0), &repeat, &explore), vec![0.7, 0.0, 0.3, 0.0]);

    let a_only = BTreeMap::from([(0, 1.0)]);
    let c_only = vec![0.0, 0.0, 1.0];
    assert_eq!(mix_distributions((0.5, 0.5), &a_only, &c_only), vec![0.5, 0.0, 0.5]);
}

#[test]
fn tape_mixture_agrees_with_plain_mixture() {
    let p = ModelParams::seeded(cfg(8, 4), 21);
    let prefix = vec![5, 0, 5, 2];
    let (tape, out) = run(&p, &prefix.iter().map(|_| prefix.clone()).take(1).collect::<Vec<_>>());
    let pred = out.prediction(&tape, 0, &prefix);
    let plain = mix_distributions((pred.p_repeat, pred.p_explore), &pred.repeat_dist, &pred.explore_dist);
    for (a, b) in plain.iter().zip(&pred.final_dist) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn padding_leaves_outputs_unchanged() {
    let p = ModelParams::seeded(cfg(9, 4), 17);
    let short = vec![3, 8];
    let (solo_tape, solo) = run(&p, &[short.clone()]);
    let (tape, out) = run(&p, &[vec![0, 1, 2, 3, 4, 5, 6], short]);
    for (a, b) in row(&tape, out.p_final, 1).iter().zip(row(&solo_tape, solo.p_final, 0)) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn gradients_match_finite_differences() {
    const H: f64 = 1e-6;
    let params = ModelParams::seeded(cfg(5, 3), 31);
    let prefixes = vec![vec![0, 3, 0], vec![4, 1]];
    let targets = [0usize, 2];
    let loss_of = |p: &ModelParams, tape: &mut Tape| -> (Var, crate::model::Bound) {
        let batch = batch_of(&prefixes);
        let bound = p.bind(tape);
        let out = forward(tape, p, &bound, &batch, &mut Phase::Eval).unwrap();
        let picked = tape.pick(out.p_final, &targets).unwrap();
        let logs = tape.log_clamped(picked, 1e-12);
        let m = tape.mean(logs);
        (tape.scale(m, -1.0), bound)
    };
    let mut tape = Tape::new();
    let (loss, bound) = loss_of(&params, &mut tape);
    tape.backward(loss).unwrap();
    let mut analytic = params.clone();
    analytic.absorb_grads(&tape, &bound);

    let eval = |p: &ModelParams| {
        let mut t = Tape::new();
        let (l, _) = loss_of(p, &mut t);
        t.data(l)[0]
    };
    for (name, t) in analytic.named() {
        let g = t.grad().map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()]);
        for j in 0..t.len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[j] += H;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let rel = (g[j] - numeric).abs() / g[j].abs().max(numeric.abs()).max(1e-5);
            assert!(rel < 1e-4, "{name}[{j}]: analytic {} numeric {numeric}", g[j]);
        }
    }
}

#[test]
fn encoder_rejects_unknown_items_through_forward() {
    let p = ModelParams::seeded(cfg(3, 2), 1);
    let batch = batch_of(&[vec![0, 5]]);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    assert!(encode(&mut tape, &bound, &batch, 3, &mut Phase::Eval).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn distributions_are_well_formed(
        seed in 0u64..1000,
        prefixes in prop::collection::vec(prop::collection::vec(0usize..6, 1..7), 1..4),
    ) {
        let p = ModelParams::seeded(cfg(6, 3), seed);
        let (tape, out) = run(&p, &prefixes);
        let mode = tape.data(out.p_mode.unwrap());
        for (b, prefix) in prefixes.iter().enumerate() {
            prop_assert!(mode[2 * b] > 0.0 && mode[2 * b + 1] > 0.0);
            prop_assert!((mode[2 * b] + mode[2 * b + 1] - 1.0).abs() < 1e-9);

            let rep = row(&tape, out.p_repeat.unwrap(), b);
            prop_assert!((rep.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (i, &v) in rep.iter().enumerate() {
                prop_assert!(v >= 0.0);
                if !prefix.contains(&i) {
                    prop_assert_eq!(v, 0.0);
                }
            }

            let exp = row(&tape, out.p_explore, b);
            let covered = (0..6).all(|i| prefix.contains(&i));
            let total: f64 = exp.iter().sum();
            let ok = if covered { total == 0.0 } else { (total - 1.0).abs() < 1e-9 };
            prop_assert!(ok);
            for &i in prefix {
                prop_assert_eq!(exp[i], 0.0);
            }

            let fin = row(&tape, out.p_final, b);
            prop_assert!((fin.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mixture_preserves_mass(
        p_r in 0.0f64..=1.0,
        rep in prop::collection::vec(0.01f64..1.0, 1..5),
        exp in prop::collection::vec(0.01f64..1.0, 1..5),
    ) {
        let rs: f64 = rep.iter().sum();
        let es: f64 = exp.iter().sum();
        let repeat: BTreeMap<usize, f64> = rep.iter().enumerate().map(|(i, v)| (i, v / rs)).collect();
        let mut explore = vec![0.0; rep.len()];
        explore.extend(exp.iter().map(|v| v / es));
        let out = mix_distributions((p_r, 1.0 - p_r), &repeat, &explore);
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
