//! SGD and Adam parameter updates.

use crate::error::{Error, Result};
use crate::net::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptKind {
    Sgd,
    Adam,
}

/// Optimizer state for one parameter set. Adam moments are allocated lazily
/// on the first step and mirror the parameter shapes from then on.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first_moment: Option<Parameters>,
    second_moment: Option<Parameters>,
}

impl OptimizerState {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptKind::Sgd,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: None,
            second_moment: None,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptKind::Adam,
            ..Self::sgd(learning_rate)
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update: `p -= lr * g` for SGD, the bias-corrected moment
    /// update for Adam. Rejects non-finite gradients.
    pub fn step(&mut self, params: &mut Parameters, grads: &Parameters) -> Result<()> {
        if params.layers.len() != grads.layers.len()
            || params
                .layers
                .iter()
                .zip(&grads.layers)
                .any(|(p, g)| p.weights.len() != g.weights.len() || p.biases.len() != g.biases.len())
        {
            return Err(Error::shape(
                "optimizer step",
                params.layers.len(),
                grads.layers.len(),
            ));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient passed to optimizer".into()));
        }
        match self.kind {
            OptKind::Sgd => {
                for (p, g) in params.values_mut().zip(grads.values()) {
                    *p -= self.learning_rate * g;
                }
            }
            OptKind::Adam => {
                self.step += 1;
                let m = self
                    .first_moment
                    .get_or_insert_with(|| zeros_matching(grads));
                let v = self
                    .second_moment
                    .get_or_insert_with(|| zeros_matching(grads));
                let t = self.step as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                for (((p, g), m), v) in params
                    .values_mut()
                    .zip(grads.values())
                    .zip(m.values_mut())
                    .zip(v.values_mut())
                {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                }
            }
        }
        Ok(())
    }
}

fn zeros_matching(like: &Parameters) -> Parameters {
    let mut z = like.clone();
    for v in z.values_mut() {
        *v = 0.0;
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::LayerParams;

    fn scalar_params(p: f64) -> Parameters {
        Parameters {
            layers: vec![LayerParams {
                weights: vec![p],
                biases: vec![],
            }],
        }
    }

    fn value(p: &Parameters) -> f64 {
        p.layers[0].weights[0]
    }

    #[test]
    fn sgd_step_definition() {
        let mut opt = OptimizerState::sgd(0.1);
        let mut p = scalar_params(1.0);
        opt.step(&mut p, &scalar_params(2.0)).unwrap();
        assert!((value(&p) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_matches_hand_computed_recurrence() {
        let mut opt = OptimizerState::adam(1e-3);
        let mut p = scalar_params(0.5);
        opt.step(&mut p, &scalar_params(4.0)).unwrap();
        // m = 0.1*4 = 0.4, m_hat = 0.4/0.1 = 4
        // v = 0.001*16 = 0.016, v_hat = 0.016/0.001 = 16
        // update = -1e-3 * 4 / (4 + 1e-8)
        let expected = 0.5 - 1e-3 * 4.0 / (4.0 + 1e-8);
        assert!((value(&p) - expected).abs() < 1e-15);
        // roughly a unit sign step scaled by the learning rate
        assert!((0.5 - value(&p) - 1e-3).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut sgd = OptimizerState::sgd(0.1);
        let mut p = scalar_params(3.0);
        sgd.step(&mut p, &scalar_params(0.0)).unwrap();
        assert_eq!(value(&p), 3.0);

        let mut adam = OptimizerState::adam(0.1);
        let mut q = scalar_params(3.0);
        adam.step(&mut q, &scalar_params(0.0)).unwrap();
        assert_eq!(value(&q), 3.0);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut opt = OptimizerState::sgd(0.1);
        let mut p = scalar_params(1.0);
        assert!(matches!(
            opt.step(&mut p, &scalar_params(f64::NAN)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn both_optimizers_descend_a_convex_quadratic() {
        // f(x, y) = (x - 3)^2 + 2 (y + 1)^2, gradient (2(x-3), 4(y+1))
        for kind in [OptKind::Sgd, OptKind::Adam] {
            let mut opt = match kind {
                OptKind::Sgd => OptimizerState::sgd(1e-3),
                OptKind::Adam => OptimizerState::adam(1e-3),
            };
            let mut p = Parameters {
                layers: vec![LayerParams {
                    weights: vec![0.0, 0.0],
                    biases: vec![],
                }],
            };
            let f = |p: &Parameters| {
                let w = &p.layers[0].weights;
                (w[0] - 3.0).powi(2) + 2.0 * (w[1] + 1.0).powi(2)
            };
            let mut losses = Vec::new();
            for _ in 0..200 {
                let w = p.layers[0].weights.clone();
                let g = Parameters {
                    layers: vec![LayerParams {
                        weights: vec![2.0 * (w[0] - 3.0), 4.0 * (w[1] + 1.0)],
                        biases: vec![],
                    }],
                };
                opt.step(&mut p, &g).unwrap();
                losses.push(f(&p));
            }
            for w in losses.windows(2).skip(10) {
                assert!(w[1] <= w[0] + 1e-12, "{kind:?} not monotone: {w:?}");
            }
        }
    }
}
