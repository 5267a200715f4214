//! Decoupled-weight-decay Adam. Parameters that received no gradient in a
//! step are left completely untouched (moments included), so disabled
//! heads never drift.

use crate::autodiff::{GradStore, ParamId, ParamStore};
use crate::scalar::Scalar;
use ndarray::ArrayD;

#[derive(Debug, Clone)]
pub struct AdamW<F: Scalar> {
    pub m: Vec<ArrayD<F>>,
    pub v: Vec<ArrayD<F>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let m = store
            .iter()
            .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamW {
            m,
            v,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &GradStore<F>,
        lr: f64,
        weight_decay: f64,
    ) {
        self.t += 1;
        let b1 = F::of_f64(self.beta1);
        let b2 = F::of_f64(self.beta2);
        let one = F::one();
        let bc1 = F::of_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = F::of_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr_f = F::of_f64(lr);
        let wd = F::of_f64(weight_decay);
        let eps = F::of_f64(self.eps);

        for i in 0..store.len() {
            let id = ParamId(i);
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |mv, gv| *mv = b1 * *mv + (one - b1) * *gv);
            v.zip_mut_with(g, |vv, gv| *vv = b2 * *vv + (one - b2) * *gv * *gv);
            let p = store.value_mut(id);
            ndarray::Zip::from(p)
                .and(&*m)
                .and(&*v)
                .for_each(|pv, mv, vv| {
                    let m_hat = *mv / bc1;
                    let v_hat = *vv / bc2;
                    *pv = *pv - lr_f * (m_hat / (v_hat.sqrt() + eps) + wd * *pv);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GradStore;
    use ndarray::IxDyn;

    #[test]
    fn quadratic_bowl_converges() {
        // minimize 0.5 * x^2 with gradient x
        let mut store = ParamStore::<f64>::new();
        let id = store.register("x", ArrayD::from_elem(IxDyn(&[1]), 5.0));
        let mut opt = AdamW::new(&store);
        for _ in 0..2000 {
            let x = store.value(id)[[0]];
            let mut grads = GradStore::zeros(1);
            grads.add_scaled(id, &ArrayD::from_elem(IxDyn(&[1]), x), 1.0);
            opt.step(&mut store, &grads, 0.05, 0.0);
        }
        let x = store.value(id)[[0]];
        assert!(x.abs() < 1e-3, "did not converge: {x}");
    }

    #[test]
    fn params_without_gradients_are_untouched() {
        let mut store = ParamStore::<f64>::new();
        let a = store.register("a", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let b = store.register("b", ArrayD::from_elem(IxDyn(&[2]), 2.0));
        let mut opt = AdamW::new(&store);
        let mut grads = GradStore::zeros(2);
        grads.add_scaled(a, &ArrayD::from_elem(IxDyn(&[2]), 0.5), 1.0);
        opt.step(&mut store, &grads, 0.1, 0.01);
        assert_ne!(store.value(a)[[0]], 1.0);
        assert_eq!(store.value(b)[[0]], 2.0);
        assert!(opt.m[b.0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn weight_decay_shrinks_parameters() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("x", ArrayD::from_elem(IxDyn(&[1]), 1.0));
        let mut opt = AdamW::new(&store);
        let mut grads = GradStore::zeros(1);
        grads.add_scaled(id, &ArrayD::zeros(IxDyn(&[1])), 1.0);
        opt.step(&mut store, &grads, 0.1, 0.5);
        let x = store.value(id)[[0]];
        assert!((x - (1.0 - 0.1 * 0.5)).abs() < 1e-12);
    }
}
