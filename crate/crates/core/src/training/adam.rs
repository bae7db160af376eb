use crate::model::ModelParams;

use super::{Result, TrainError};

/// First and second moments per parameter, in [`ModelParams::named`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.named().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip: f64,
}

/// One bias-corrected Adam update from the gradients stored on `params`.
///
/// Every gradient entry is clipped to `[-clip, clip]` before the moments see
/// it. Parameters that received no gradient are left alone. Gradients are
/// cleared afterwards. Any non-finite gradient aborts before anything moves.
pub fn adam_step(params: &mut ModelParams, state: &mut AdamState, hp: &AdamHyper) -> Result<()> {
    for (name, t) in params.named() {
        if let Some(g) = t.grad() {
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteGrad {
                    name: name.to_string(),
                    index: j,
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (k, (_, p)) in params.named_mut().into_iter().enumerate() {
        let Some(g) = p.take_grad() else { continue };
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = g[j].clamp(-hp.clip, hp.clip);
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= hp.lr * m_hat / (v_hat.sqrt() + hp.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn hyper() -> AdamHyper {
        AdamHyper {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip: 5.0,
        }
    }

    fn with_grad(value: f64) -> ModelParams {
        let mut p = ModelParams::zeros(ModelConfig::with_sizes(2, 2, 2));
        for (_, t) in p.named_mut() {
            let g = vec![value; t.len()];
            t.accumulate_grad(&g);
        }
        p
    }

    #[test]
    fn unit_gradient_moves_by_lr() {
        let mut p = with_grad(1.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &mut s, &hyper()).unwrap();
        // m̂ = v̂ = 1, delta = -lr · 1 / (1 + ε)
        let expected = -0.001 / (1.0 + 1e-8);
        for (_, t) in p.named() {
            assert!(t.data().iter().all(|&x| (x - expected).abs() < 1e-15));
            assert!(t.grad().is_none());
        }
        assert_eq!(s.step, 1);
    }

    #[test]
    fn large_gradient_is_clipped() {
        let mut clipped = with_grad(7.0);
        let mut five = with_grad(5.0);
        let (mut s1, mut s2) = (AdamState::new(&clipped), AdamState::new(&five));
        adam_step(&mut clipped, &mut s1, &hyper()).unwrap();
        adam_step(&mut five, &mut s2, &hyper()).unwrap();
        assert_eq!(clipped, five);
        assert_eq!(s1, s2);
        assert!(s1.m.iter().flatten().all(|&m| (m - 0.5).abs() < 1e-15));
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = with_grad(0.0);
        let before = ModelParams::zeros(p.config.clone());
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &mut s, &hyper()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = ModelParams::zeros(ModelConfig::with_sizes(2, 2, 2));
        let n = p.gru.b_r.len();
        let mut g = vec![0.0; n];
        g[1] = f64::NAN;
        p.gru.b_r.accumulate_grad(&g);
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &mut s, &hyper()).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGrad { ref name, index: 1 } if name == "gru.b_r"));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn missing_gradients_are_skipped() {
        let mut p = ModelParams::seeded(ModelConfig::with_sizes(3, 2, 2), 1);
        let before = p.clone();
        p.embedding.accumulate_grad(&[1.0; 6]);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &mut s, &hyper()).unwrap();
        assert_ne!(p.embedding, before.embedding);
        assert_eq!(p.explore, before.explore);
    }
}
