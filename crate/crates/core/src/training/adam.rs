//! Adam optimizer with bias-corrected moment estimates.

use ndarray::{ArrayD, ArrayViewMutD};

use crate::numeric::Scalar;

/// Optimizer constants. The learning rate defaults to 2e-4 and the moment
/// constants to the conventional values.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam state: first/second moment estimates per parameter tensor, allocated
/// lazily from the first step's gradient shapes.
#[derive(Debug)]
pub struct Adam<T> {
    params: AdamParams,
    step_count: u64,
    first_moment: Vec<ArrayD<T>>,
    second_moment: Vec<ArrayD<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: AdamParams) -> Self {
        Adam {
            params,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// Applies one update. `weights` and `grads` must stay aligned (same
    /// tensors, same order) across every call on this optimizer.
    pub fn step(&mut self, weights: &mut [ArrayViewMutD<'_, T>], grads: &[ArrayD<T>]) {
        assert_eq!(weights.len(), grads.len(), "weights/grads misaligned");
        if self.first_moment.is_empty() {
            self.first_moment = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
            self.second_moment = self.first_moment.clone();
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let beta1 = T::from_f64(self.params.beta1);
        let beta2 = T::from_f64(self.params.beta2);
        let one_minus_beta1 = T::from_f64(1.0 - self.params.beta1);
        let one_minus_beta2 = T::from_f64(1.0 - self.params.beta2);
        let eps = T::from_f64(self.params.epsilon);
        // Fold both bias corrections into the step size.
        let corrected_lr = T::from_f64(
            self.params.learning_rate * (1.0 - self.params.beta2.powi(t)).sqrt()
                / (1.0 - self.params.beta1.powi(t)),
        );

        for ((weight, grad), (m, v)) in weights
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(&mut self.second_moment))
        {
            debug_assert_eq!(weight.shape(), grad.shape());
            ndarray::Zip::from(weight)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = beta1 * *m + one_minus_beta1 * g;
                    *v = beta2 * *v + one_minus_beta2 * g * g;
                    *w = *w - corrected_lr * *m / (v.sqrt() + eps);
                });
        }
    }
}
