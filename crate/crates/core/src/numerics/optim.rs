use super::params::{round_single, ParameterStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clipping threshold applied before each step.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-6,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: Some(1.0),
        }
    }
}

/// AdamW moments for one [`ParameterStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, store: &ParameterStore) -> Self {
        Self {
            config,
            first_moment: vec![0.0; store.len()],
            second_moment: vec![0.0; store.len()],
            step: 0,
        }
    }

    /// One decoupled-weight-decay Adam update from the store's gradient
    /// buffer. Gradients are zeroed afterwards. A non-finite gradient aborts
    /// the update before anything is modified.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        if self.first_moment.len() != store.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("state for {} params, store has {}", self.first_moment.len(), store.len()),
            ));
        }
        if let Some(i) = store.grads().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(i));
        }
        let scale = match self.config.max_grad_norm {
            Some(max) => {
                let norm = store.grads().iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let grads: Vec<f64> = store.grads().iter().map(|g| g * scale).collect();
        let values = store.values_mut();
        for i in 0..values.len() {
            let g = grads[i];
            let m = c.beta1 * self.first_moment[i] + (1.0 - c.beta1) * g;
            let v = c.beta2 * self.second_moment[i] + (1.0 - c.beta2) * g * g;
            self.first_moment[i] = round_single(m);
            self.second_moment[i] = round_single(v);
            let m_hat = m / bias1;
            let v_hat = v / bias2;
            let mut w = values[i];
            w -= c.lr * c.weight_decay * w;
            let denom = v_hat.sqrt() + c.eps;
            if denom > 0.0 {
                w -= c.lr * m_hat / denom;
            }
            values[i] = round_single(w);
        }
        store.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.add_constant("w", 1, 1, w);
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = ParameterStore::new();
        s.add("w", 2, 3, || 0.37);
        let before = s.values().to_vec();
        let mut opt = AdamWState::new(AdamWConfig { lr: 0.1, ..Default::default() }, &s);
        for _ in 0..5 {
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.values(), &before[..]);
        assert_eq!(opt.step, 5);
    }

    #[test]
    fn degenerate_betas_give_a_sign_step() {
        let mut s = single(1.0);
        s.grads_mut()[0] = 1.0;
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            weight_decay: 0.0,
            max_grad_norm: None,
        };
        let mut opt = AdamWState::new(cfg, &s);
        opt.step(&mut s).unwrap();
        assert_eq!(s.values()[0], 0.9f32 as f64);
        assert_eq!(s.grads()[0], 0.0);
    }

    #[test]
    fn non_finite_gradient_aborts_with_index() {
        let mut s = ParameterStore::new();
        s.add("w", 1, 3, || 1.0);
        s.grads_mut()[2] = f64::NAN;
        let mut opt = AdamWState::new(AdamWConfig::default(), &s);
        match opt.step(&mut s) {
            Err(Error::NonFiniteGradient(2)) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.values(), &[1.0, 1.0, 1.0]);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn clipping_bounds_the_update_direction() {
        let mut s = single(0.0);
        s.grads_mut()[0] = 1e6;
        let mut opt = AdamWState::new(
            AdamWConfig {
                lr: 1.0,
                beta1: 0.0,
                beta2: 0.0,
                eps: 0.0,
                ..Default::default()
            },
            &s,
        );
        opt.step(&mut s).unwrap();
        assert_eq!(s.values()[0], -1.0);
        assert_eq!(opt.first_moment[0], 1.0);
    }
}
