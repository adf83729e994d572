use crate::config::RegistrationConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S = f64> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn from_config(config: &RegistrationConfig) -> Self {
        Self::new(config.learning_rate, config.beta1, config.beta2, config.epsilon)
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<S>], &[Tensor<S>]) {
        (&self.first, &self.second)
    }

    /// Restores saved state, e.g. when resuming from a checkpoint.
    pub fn restore(&mut self, step: u64, first: Vec<Tensor<S>>, second: Vec<Tensor<S>>) -> Result<()> {
        if first.len() != second.len() || first.iter().zip(&second).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Shape("adam moment buffers disagree".into()));
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// Applies one update. Every parameter needs a gradient of its own shape.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Option<&Tensor<S>>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        let mut checked = Vec::with_capacity(grads.len());
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let g = g.ok_or_else(|| Error::Contract(format!("missing gradient for parameter {i}")))?;
            p.expect_same_shape(g)?;
            checked.push(g);
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
        {
            return Err(Error::Shape("parameter set changed between adam steps".into()));
        }

        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let (one_b1, one_b2) = (S::lit(1.0 - self.beta1), S::lit(1.0 - self.beta2));
        let c1 = S::lit(1.0 / (1.0 - self.beta1.powf(t)));
        let c2 = S::lit(1.0 / (1.0 - self.beta2.powf(t)));
        let (lr, eps) = (S::lit(self.learning_rate), S::lit(self.epsilon));
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(checked)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi * c1;
                let v_hat = *vi * c2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut adam = Adam::<f64>::new(1e-3, 0.9, 0.999, 1e-8);
        let mut p = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros([3]);
        adam.step(&mut [&mut p], &[Some(&g)]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::<f64>::new(1e-3, 0.9, 0.999, 1e-8);
        let mut p = Tensor::scalar(0.0);
        adam.step(&mut [&mut p], &[Some(&Tensor::scalar(1.0))]).unwrap();
        assert!((p.item().unwrap() + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn descends_a_parabola() {
        let mut adam = Adam::<f64>::new(1e-1, 0.9, 0.999, 1e-8);
        let mut x = Tensor::scalar(1.0);
        let mut last = 1.0;
        for _ in 0..10 {
            let g = Tensor::scalar(2.0 * x.item().unwrap());
            adam.step(&mut [&mut x], &[Some(&g)]).unwrap();
            let f = x.item().unwrap().powi(2);
            assert!(f < last);
            last = f;
        }
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut adam = Adam::<f64>::new(1e-3, 0.9, 0.999, 1e-8);
        let mut p = Tensor::scalar(0.0);
        assert!(matches!(adam.step(&mut [&mut p], &[None]), Err(Error::Contract(_))));
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut adam = Adam::<f64>::new(1e-2, 0.9, 0.999, 1e-8);
            let mut p = Tensor::new([2], vec![0.3, -0.7]).unwrap();
            for i in 0..5 {
                let g = Tensor::new([2], vec![i as f64 * 0.1 - 0.2, 0.05]).unwrap();
                adam.step(&mut [&mut p], &[Some(&g)]).unwrap();
            }
            (p, adam)
        };
        assert_eq!(run(), run());
    }
}
