use super::{NumericsError, ParamStore};

/// Adam with bias correction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Updates every parameter holding a gradient, then clears all gradients.
    ///
    /// Parameters without a gradient (never reached by the loss) are left
    /// untouched, including their moment estimates.
    pub fn step(&self, store: &mut ParamStore) -> Result<(), NumericsError> {
        if store.iter().all(|(_, p)| p.grad.is_none()) {
            return Err(NumericsError::MissingGradients);
        }
        for p in store.iter_mut() {
            let Some(grad) = p.grad.take() else { continue };
            let state = &mut p.adam;
            state.step += 1;
            let t = state.step as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let values = p.tensor.data_mut();
            for i in 0..values.len() {
                let g = grad[i];
                state.m[i] = self.beta1 * state.m[i] + (1.0 - self.beta1) * g;
                state.v[i] = self.beta2 * state.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};

    fn quadratic_step(store: &mut ParamStore, adam: &Adam) {
        let grads = {
            let mut tape = Tape::new(store);
            let x = tape.param_named("x").unwrap();
            let sq = tape.mul(x, x).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap()
        };
        store.accumulate(&grads);
        adam.step(store).unwrap();
    }

    #[test]
    fn single_step_descends() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::row_vector(vec![1.0])).unwrap();
        quadratic_step(&mut store, &Adam::new(1e-3));
        let x = store.by_name("x").unwrap().tensor.data()[0];
        assert!(x < 1.0);
        // first bias-corrected Adam step moves by lr * sign(g)
        assert!((x - (1.0 - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::row_vector(vec![0.7, -0.3])).unwrap();
        store.get_mut(id).grad = Some(vec![0.0, 0.0]);
        Adam::default().step(&mut store).unwrap();
        assert_eq!(store.value(id).data(), &[0.7, -0.3]);
        assert!(store.get(id).grad.is_none());
    }

    #[test]
    fn converges_on_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::row_vector(vec![1.0, -0.5])).unwrap();
        let adam = Adam::new(1e-2);
        for _ in 0..500 {
            quadratic_step(&mut store, &adam);
        }
        let x = store.by_name("x").unwrap().tensor.data();
        let norm = (x[0] * x[0] + x[1] * x[1]).sqrt();
        assert!(norm < 1e-2, "|x| = {norm}");
    }

    #[test]
    fn missing_gradients_rejected() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::row_vector(vec![1.0])).unwrap();
        assert_eq!(Adam::default().step(&mut store), Err(NumericsError::MissingGradients));
    }
}
