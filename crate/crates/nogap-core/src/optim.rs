//! Adaptive-moment gradient descent over a flat parameter vector.

/// Adam with bias correction; the defaults are the standard
/// (β₁, β₂, ε) = (0.9, 0.999, 1e-8).
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(learning_rate: f64, n_params: usize) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One in-place update of `params` from `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = vec![3.0, -2.0, 1.5];
        let target = [1.0, 0.5, -0.25];
        let mut opt = Adam::new(0.05, 3);
        for _ in 0..2000 {
            let grads: Vec<f64> = params.iter().zip(&target).map(|(p, t)| 2.0 * (p - t)).collect();
            opt.step(&mut params, &grads);
        }
        for (p, t) in params.iter().zip(&target) {
            assert!((p - t).abs() < 1e-6, "{p} vs {t}");
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point_from_start() {
        let mut params = vec![1.0, 2.0];
        let mut opt = Adam::new(0.1, 2);
        opt.step(&mut params, &[0.0, 0.0]);
        assert_eq!(params, vec![1.0, 2.0]);
    }
}
