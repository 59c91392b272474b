use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `param` in place.
    pub fn update(&mut self, cfg: &AdamConfig, param: &mut [T], grad: &[T]) {
        assert_eq!(param.len(), grad.len());
        assert_eq!(param.len(), self.m.len());
        self.step += 1;
        let b1 = T::lit(cfg.beta1);
        let b2 = T::lit(cfg.beta2);
        let one = T::one();
        let c1 = one - T::lit(cfg.beta1.powi(self.step as i32));
        let c2 = one - T::lit(cfg.beta2.powi(self.step as i32));
        let lr = T::lit(cfg.lr);
        let eps = T::lit(cfg.eps);
        for i in 0..param.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            param[i] = param[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut st = AdamState::<f64>::new(2);
        let mut p = vec![1.0, -1.0];
        st.update(&cfg, &mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let cfg = AdamConfig { lr: 0.05, beta1: 0.93, ..Default::default() };
        let mut st = AdamState::<f64>::new(1);
        let mut p = vec![4.0];
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 1.5)];
            st.update(&cfg, &mut p, &g);
        }
        assert!((p[0] - 1.5).abs() < 1e-3);
    }
}
