//! Adam with bias correction over a [`ParamSet`].

use crate::error::{Error, Result};
use crate::net::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: f64| b > 0.0 && b < 1.0;
        if !ok(self.beta1) || !ok(self.beta2) || self.epsilon.partial_cmp(&0.0) != Some(core::cmp::Ordering::Greater) {
            return Err(Error::InvalidConfig(alloc::format!("adam parameters {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl AdamState {
    pub fn new(like: &ParamSet) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
        }
    }

    /// One Adam step on `params` with gradient `grads`.
    ///
    /// With `lr == 0` the parameters are left bitwise untouched (moments and
    /// the step counter still advance).
    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64, cfg: &AdamConfig) -> Result<()> {
        if !params.same_shapes(grads) || !params.same_shapes(&self.m) {
            return Err(Error::ShapeMismatch("adam state, parameters and gradients differ".into()));
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(cfg.beta1, t);
        let c2 = 1.0 - libm::pow(cfg.beta2, t);
        let (b1, b2, eps) = (cfg.beta1 as f32, cfg.beta2 as f32, cfg.epsilon);
        for (((w, g), m), v) in params
            .tensors_mut()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for (((wi, gi), mi), vi) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                if lr != 0.0 {
                    let m_hat = *mi as f64 / c1;
                    let v_hat = *vi as f64 / c2;
                    *wi -= (lr * m_hat / (libm::sqrt(v_hat) + eps)) as f32;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::LayerParams;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn single(w: f32) -> ParamSet {
        ParamSet::new(vec![Some(LayerParams {
            weight: Tensor::new(vec![1, 1], vec![w]).unwrap(),
            bias: Tensor::zeros(&[1]),
        })])
    }

    fn w0(p: &ParamSet) -> f32 {
        p.layer(0).unwrap().weight.data()[0]
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut p = single(0.7);
        let mut st = AdamState::new(&p);
        st.update(&mut p, &single(0.0), 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(w0(&p), 0.7);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        for g in [0.5f32, -2.0, 1e-3] {
            let mut p = single(1.0);
            let mut st = AdamState::new(&p);
            st.update(&mut p, &single(g), 0.01, &AdamConfig::default()).unwrap();
            // m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps)
            let expected = 1.0 - 0.01 * g.signum();
            assert!((w0(&p) - expected).abs() < 1e-6, "g = {g}: {}", w0(&p));
        }
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut p = single(0.0);
        let mut st = AdamState::new(&p);
        let lr = 1e-3;
        let mut prev = 0.0;
        for _ in 0..2000 {
            st.update(&mut p, &single(0.3), lr, &AdamConfig::default()).unwrap();
            let w = w0(&p);
            let step = (prev - w) as f64;
            assert!(step <= lr * 1.0001);
            prev = w;
        }
        let mut last = p.clone();
        st.update(&mut last, &single(0.3), lr, &AdamConfig::default()).unwrap();
        let step = (w0(&p) - w0(&last)) as f64;
        assert!((step - lr).abs() < 1e-5 * 10.0, "{step}");
    }

    #[test]
    fn zero_learning_rate_is_bitwise_identity() {
        let mut p = single(-0.0);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            st.update(&mut p, &single(-1.0), 0.0, &AdamConfig::default()).unwrap();
        }
        assert_eq!(w0(&p).to_bits(), w0(&before).to_bits());
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let mut p = single(0.0);
        let mut st = AdamState::new(&p);
        let other = ParamSet::new(vec![None]);
        assert!(st.update(&mut p, &other, 0.1, &AdamConfig::default()).is_err());
        assert!(AdamConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
    }
}
