//! ADAM with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    1e-8
}

impl SolverConfig {
    /// Solver used while overfitting the support batch.
    pub const SUPPORT: SolverConfig = SolverConfig {
        learning_rate: 1e-4,
        weight_decay: 0.1,
        beta1: 0.99,
        beta2: 0.999,
        epsilon: 1e-8,
    };

    /// Solver used while overfitting the selfish sample.
    pub const SELFISH: SolverConfig = SolverConfig {
        learning_rate: 1e-4,
        weight_decay: 0.0,
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
    };

    pub fn adam(learning_rate: f64) -> Self {
        SolverConfig {
            learning_rate,
            ..SolverConfig::SELFISH
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid solver parameters {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first_moment: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        AdamState {
            step: 0,
            second_moment: first_moment.clone(),
            first_moment,
        }
    }
}

/// One bias-corrected ADAM update. Weight decay scales the parameters by
/// `1 - lr * weight_decay` before the ADAM delta is applied.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &SolverConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Dimension(format!(
            "adam: {} params, {} grads, {} moment tensors",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
            return Err(Error::Dimension(format!(
                "adam: tensor {i} has param {:?}, grad {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                state.first_moment[i].shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                what: "gradient",
                sample: None,
                step: state.step as usize + 1,
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(
        state
            .first_moment
            .iter_mut()
            .zip(state.second_moment.iter_mut()),
    ) {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = *mv / bias1;
            let v_hat = *vv / bias2;
            *pv = *pv * decay - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn first_step_hand_value() {
        let mut p = scalar(0.0);
        let g = scalar(1.0);
        let mut state = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[g], &mut state, &SolverConfig::adam(1e-4)).unwrap();
        assert_eq!(state.step, 1);
        // m̂ = v̂ = 1, so the delta is lr / (1 + eps)
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-18);
        assert!((p.data()[0] + 9.9999999e-5).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_identity_without_decay() {
        let mut p = Tensor::new(vec![3], vec![0.5, -2.0, 7.0]).unwrap();
        let before = p.clone();
        let mut state = AdamState::new([&p]);
        for _ in 0..5 {
            adam_step(
                &mut [&mut p],
                &[Tensor::zeros(&[3])],
                &mut state,
                &SolverConfig::SELFISH,
            )
            .unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(state.step, 5);
    }

    #[test]
    fn decay_shrinks_parameters() {
        let mut p = scalar(2.0);
        let mut state = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[scalar(0.0)], &mut state, &SolverConfig::SUPPORT).unwrap();
        assert_eq!(p.data()[0], 2.0 * (1.0 - 1e-4 * 0.1));
    }

    #[test]
    fn non_finite_gradient_fails() {
        let mut p = scalar(0.0);
        let mut state = AdamState::new([&p]);
        let err = adam_step(
            &mut [&mut p],
            &[scalar(f64::NAN)],
            &mut state,
            &SolverConfig::SELFISH,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = scalar(0.0);
        let mut state = AdamState::new([&p]);
        assert!(adam_step(
            &mut [&mut p],
            &[Tensor::zeros(&[2])],
            &mut state,
            &SolverConfig::SELFISH
        )
        .is_err());
    }

    #[test]
    fn validation() {
        assert!(SolverConfig::SUPPORT.validate().is_ok());
        assert!(SolverConfig {
            beta1: 1.0,
            ..SolverConfig::SELFISH
        }
        .validate()
        .is_err());
        assert!(SolverConfig::adam(0.0).validate().is_err());
    }
}
