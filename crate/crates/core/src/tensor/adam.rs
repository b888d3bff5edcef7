use super::Tensor;
use crate::error::{invalid_arg, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one first/second moment tensor per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first_moment: Vec<Tensor> = params.into_iter().map(Tensor::zeros_like).collect();
        let second_moment = first_moment.clone();
        Self {
            config,
            step: 0,
            first_moment,
            second_moment,
        }
    }

    /// Rebuilds a state from persisted parts.
    pub fn from_parts(
        config: AdamConfig,
        step: u64,
        first_moment: Vec<Tensor>,
        second_moment: Vec<Tensor>,
    ) -> Result<Self> {
        if first_moment.len() != second_moment.len()
            || first_moment
                .iter()
                .zip(&second_moment)
                .any(|(m, v)| m.shape() != v.shape())
        {
            return Err(invalid_arg!(
                "adam moment tensors disagree in count or shape"
            ));
        }
        Ok(Self {
            config,
            step,
            first_moment,
            second_moment,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.second_moment
    }

    /// Applies one update in place.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Tensor],
    ) -> Result<()> {
        let mut params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(invalid_arg!(
                "adam: {} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.first_moment.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first_moment[i].shape() {
                return Err(invalid_arg!(
                    "adam: parameter {i} has shape {:?}, gradient {:?}, moment {:?}",
                    p.shape(),
                    g.shape(),
                    self.first_moment[i].shape()
                ));
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);

        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / correction1;
                let v_hat = *v / correction2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::from_fn(&[5], |i| i as f64 - 2.0);
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig::default(), [&p]);
        adam.step([&mut p], &[Tensor::zeros(&[5])]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001 -> m_hat = v_hat = 1 -> update = lr / (1 + eps)
        let mut p = Tensor::full(&[1], 0.5);
        let config = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(config, [&p]);
        adam.step([&mut p], &[Tensor::full(&[1], 1.0)]).unwrap();
        let expected = 0.5 - 0.1 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn identical_inputs_give_identical_results() {
        let run = || {
            let mut p = Tensor::from_fn(&[4], |i| 0.1 * i as f64);
            let mut adam = AdamState::new(AdamConfig::default(), [&p]);
            for k in 0..5 {
                let g = Tensor::from_fn(&[4], |i| ((i + k) as f64).sin());
                adam.step([&mut p], &[g]).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut adam = AdamState::new(AdamConfig::default(), [&p]);
        assert!(adam.step([&mut p], &[Tensor::zeros(&[3])]).is_err());
        assert_eq!(adam.step_count(), 0);
    }
}
