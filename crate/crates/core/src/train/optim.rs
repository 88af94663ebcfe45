//! Adaptive-moment optimizer with decoupled weight decay.

use ndarray::ArrayD;

use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar> {
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shapes: &[ndarray::IxDyn]) -> Self {
        AdamState {
            m: shapes.iter().map(|s| ArrayD::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| ArrayD::zeros(s.clone())).collect(),
            step: 0,
        }
    }

    /// One update over a parameter list and its gradients, in slot order.
    pub fn apply(
        &mut self,
        params: &mut [&mut ArrayD<T>],
        grads: &[ArrayD<T>],
        lr: f64,
        beta1: f64,
        beta2: f64,
        weight_decay: f64,
    ) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let t = self.step as f64;
        let b1 = T::cast_from(beta1);
        let b2 = T::cast_from(beta2);
        let one_b1 = T::cast_from(1.0 - beta1);
        let one_b2 = T::cast_from(1.0 - beta2);
        let corr1 = T::cast_from(1.0 / (1.0 - beta1.powf(t)));
        let corr2 = T::cast_from(1.0 / (1.0 - beta2.powf(t)));
        let lr_t = T::cast_from(lr);
        let wd = T::cast_from(weight_decay);
        let eps = T::cast_from(1e-8);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(&mut **param)
                .and(grad)
                .and(&mut *m)
                .and(&mut *v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    let m_hat = *m * corr1;
                    let v_hat = *v * corr2;
                    *p = *p - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, IxDyn};

    #[test]
    fn first_step_moves_against_gradient() {
        let mut opt = AdamState::<f64>::new(&[IxDyn(&[2])]);
        let mut p = arr1(&[1.0, -1.0]).into_dyn();
        let g = arr1(&[0.5, -0.5]).into_dyn();
        opt.apply(&mut [&mut p], &[g], 0.1, 0.9, 0.999, 0.0);
        // bias-corrected first step is lr * sign(g) up to epsilon
        assert!((p[[0]] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((p[[1]] - (-1.0 + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut opt = AdamState::<f64>::new(&[IxDyn(&[1])]);
        let mut p = arr1(&[2.0]).into_dyn();
        let g = arr1(&[0.0]).into_dyn();
        opt.apply(&mut [&mut p], &[g], 0.1, 0.9, 0.999, 0.01);
        // zero gradient: only the decay term acts
        assert!((p[[0]] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-12);
    }
}
