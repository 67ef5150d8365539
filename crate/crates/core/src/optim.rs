//! Adam with L2 regularisation folded into the gradient.

use crate::error::{Error, Result};
use crate::graph::{Gradients, ParamGrad};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added as `l2 * theta` to the gradient of every decayed parameter.
    pub l2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2: 1e-4,
        }
    }
}

/// Optimizer moments for one [`ParamStore`].
///
/// Sparse (row) gradients from embedding gathers update only the touched rows,
/// including their moments; untouched rows keep stale moments ("lazy" Adam).
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient entry are left alone.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);

        for (id, g) in grads.iter() {
            let decay = if store.param(id).decay {
                T::lit(c.l2)
            } else {
                T::zero()
            };
            let i = id.index();
            let update = |theta: &mut T, m: &mut T, v: &mut T, grad: T| {
                let grad = grad + decay * *theta;
                *m = b1 * *m + (T::one() - b1) * grad;
                *v = b2 * *v + (T::one() - b2) * grad * grad;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
            };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let value = store.get_mut(id);
            match g {
                ParamGrad::Dense(dg) => {
                    for (((theta, m), v), &grad) in value
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(dg.data())
                    {
                        update(theta, m, v, grad);
                    }
                }
                ParamGrad::Rows { rows, .. } => {
                    let d = value.cols();
                    for (&r, vals) in rows {
                        let span = r * d..(r + 1) * d;
                        let thetas = &mut value.data_mut()[span.clone()];
                        let ms = &mut m.data_mut()[span.clone()];
                        let vs = &mut v.data_mut()[span];
                        for (((theta, m), v), &grad) in
                            thetas.iter_mut().zip(ms).zip(vs).zip(vals)
                        {
                            update(theta, m, v, grad);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, decay: bool) -> (ParamStore<f64>, crate::params::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::row(vec![value, -value]), decay);
        (store, id)
    }

    #[test]
    fn zero_gradient_without_l2_leaves_parameters() {
        let (mut store, id) = single(1.0, true);
        let mut adam = Adam::new(
            AdamConfig {
                l2: 0.0,
                ..AdamConfig::default()
            },
            &store,
        );
        let mut grads = Gradients::empty(store.len());
        grads.set(id, ParamGrad::Dense(Tensor::zeros(vec![1, 2])));
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(store.get(id).data(), &[1.0, -1.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        // m_hat = g, v_hat = g^2 after bias correction, so the step is lr * g / (|g| + eps).
        let (mut store, id) = single(0.0, false);
        let cfg = AdamConfig {
            lr: 1e-3,
            l2: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &store);
        let mut grads = Gradients::empty(store.len());
        grads.set(id, ParamGrad::Dense(Tensor::row(vec![0.37, -4.0])));
        adam.step(&mut store, &grads).unwrap();
        let expected = [-1e-3 * 0.37 / (0.37 + 1e-8), 1e-3 * 4.0 / (4.0 + 1e-8)];
        for (got, want) in store.get(id).data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn l2_term_shrinks_weights_with_zero_gradient() {
        let (mut store, id) = single(1.0, true);
        let cfg = AdamConfig {
            lr: 1e-3,
            l2: 1e-4,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &store);
        let mut grads = Gradients::empty(store.len());
        grads.set(id, ParamGrad::Dense(Tensor::zeros(vec![1, 2])));
        adam.step(&mut store, &grads).unwrap();
        // effective gradient 1e-4 * theta; first Adam step = lr * g/(|g| + eps)
        let g: f64 = 1e-4;
        let want = 1.0 - 1e-3 * g / (g + 1e-8);
        assert!((store.get(id).data()[0] - want).abs() < 1e-15);
        assert!((store.get(id).data()[1] + want).abs() < 1e-15);
    }

    #[test]
    fn biases_are_not_decayed() {
        let (mut store, id) = single(1.0, false);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let mut grads = Gradients::empty(store.len());
        grads.set(id, ParamGrad::Dense(Tensor::zeros(vec![1, 2])));
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(store.get(id).data(), &[1.0, -1.0]);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (mut store, id) = single(0.75, true);
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            &store,
        );
        let mut grads = Gradients::empty(store.len());
        grads.set(id, ParamGrad::Dense(Tensor::row(vec![3.0, -2.0])));
        for _ in 0..5 {
            adam.step(&mut store, &grads).unwrap();
        }
        assert_eq!(store.get(id).data(), &[0.75, -0.75]);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut store, id) = single(1.0, true);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let mut grads = Gradients::empty(store.len());
        grads.set(id, ParamGrad::Dense(Tensor::row(vec![f64::NAN, 0.0])));
        assert_eq!(
            adam.step(&mut store, &grads),
            Err(Error::NonFiniteGradient("theta".into()))
        );
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn sparse_rows_touch_only_their_rows() {
        let mut store = ParamStore::new();
        let id = store.add("emb", Tensor::full(vec![3, 2], 1.0f64), true);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let mut rows = std::collections::BTreeMap::new();
        rows.insert(1usize, vec![0.5, -0.5]);
        let mut grads = Gradients::empty(store.len());
        grads.set(
            id,
            ParamGrad::Rows {
                shape: vec![3, 2],
                rows,
            },
        );
        adam.step(&mut store, &grads).unwrap();
        let d = store.get(id).data();
        assert_eq!(&d[0..2], &[1.0, 1.0]);
        assert_eq!(&d[4..6], &[1.0, 1.0]);
        assert!(d[2] < 1.0 && d[3] > 1.0);
    }
}
