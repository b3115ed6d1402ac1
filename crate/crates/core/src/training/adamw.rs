use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter, in registry order.
#[derive(Clone, Debug)]
pub struct AdamWState<S> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    step: u64,
}

impl<S: Scalar> AdamWState<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| vec![S::zero(); p.value.numel()])
                .collect()
        };
        AdamWState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Decays every parameter by `1 - lr * wd`, applies the bias-corrected
    /// Adam update, then zeroes the gradients. A non-finite gradient aborts
    /// before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore<S>, cfg: &AdamWConfig) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        if let Some(p) = params
            .iter()
            .find(|p| p.grad.data().iter().any(|g| !g.is_finite()))
        {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter '{}'",
                p.name
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let s = S::from_f64_lossy;
        let (b1, b2) = (s(cfg.beta1), s(cfg.beta2));
        let (one_b1, one_b2) = (s(1.0 - cfg.beta1), s(1.0 - cfg.beta2));
        let decay = s(1.0 - cfg.learning_rate * cfg.weight_decay);
        let lr = s(cfg.learning_rate);
        let (inv_c1, inv_c2) = (s(1.0 / c1), s(1.0 / c2));
        let eps = s(cfg.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data_mut();
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.iter_mut())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + one_b1 * *g;
                *v = b2 * *v + one_b2 * *g * *g;
                let m_hat = *m * inv_c1;
                let v_hat = *v * inv_c2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
                *g = S::zero();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            learning_rate: lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    fn scalar_store(theta: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.register("theta", Tensor::scalar(theta));
        s.accumulate_grad(id, &[grad]);
        s
    }

    #[test]
    fn single_step_moves_by_lr() {
        let mut s = scalar_store(1.0, 1.0);
        let mut opt = AdamWState::new(&s);
        opt.step(&mut s, &cfg(0.1, 0.0)).unwrap();
        let theta = s.by_name("theta").unwrap().value.item();
        assert!((theta - 0.9).abs() < 1e-7, "{theta}");
        assert_eq!(s.by_name("theta").unwrap().grad.item(), 0.0);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = scalar_store(0.37, 0.0);
        let mut opt = AdamWState::new(&s);
        for _ in 0..3 {
            opt.step(&mut s, &cfg(0.1, 0.0)).unwrap();
        }
        assert_eq!(s.by_name("theta").unwrap().value.item(), 0.37);
    }

    #[test]
    fn decay_alone_shrinks_by_exact_factor() {
        let mut s = scalar_store(2.0, 0.0);
        let mut opt = AdamWState::new(&s);
        opt.step(&mut s, &cfg(0.1, 0.01)).unwrap();
        assert_eq!(
            s.by_name("theta").unwrap().value.item(),
            2.0 * (1.0 - 0.1 * 0.01)
        );
    }

    #[test]
    fn matches_reference_adam_without_decay() {
        // independent scalar Adam on a fixed gradient sequence
        let grads = [0.5, -1.25, 2.0, 0.1, -0.3, 0.7, 0.0, -2.2];
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let (mut theta, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
        let mut s = scalar_store(0.3, 0.0);
        let mut opt = AdamWState::new(&s);
        for (t, &g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            theta -= lr * mh / (vh.sqrt() + eps);

            let id = s.id("theta").unwrap();
            s.accumulate_grad(id, &[g]);
            opt.step(&mut s, &cfg(lr, 0.0)).unwrap();
            let got = s.value(id).item();
            assert!((got - theta).abs() < 1e-14, "step {t}: {got} vs {theta}");
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut s = scalar_store(1.0, f64::NAN);
        let mut opt = AdamWState::new(&s);
        match opt.step(&mut s, &cfg(0.1, 0.0)) {
            Err(Error::Numeric(m)) => assert!(m.contains("theta")),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.by_name("theta").unwrap().value.item(), 1.0);
    }
}
