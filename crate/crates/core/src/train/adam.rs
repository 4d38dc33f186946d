//! Adam with bias correction; the single optimizer shared by both training
//! stages.

use crate::model::ParamStore;
use crate::tensor::Elem;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam<E: Elem> {
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
    t: u64,
}

impl<E: Elem> Adam<E> {
    pub fn new(store: &ParamStore<E>) -> Self {
        let zeros: Vec<Vec<E>> = (0..store.len())
            .map(|i| vec![E::ZERO; store.values(i).len()])
            .collect();
        Adam { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn from_state(m: Vec<Vec<E>>, v: Vec<Vec<E>>, t: u64) -> Self {
        Adam { m, v, t }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Vec<E>], &[Vec<E>]) {
        (&self.m, &self.v)
    }

    /// One update over all parameters. `grads` must align with the store.
    pub fn step(&mut self, store: &mut ParamStore<E>, grads: &[Vec<E>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "gradient vector count mismatch");
        self.t += 1;
        let b1 = E::from_f64(ADAM_BETA1);
        let b2 = E::from_f64(ADAM_BETA2);
        let one_m_b1 = E::from_f64(1.0 - ADAM_BETA1);
        let one_m_b2 = E::from_f64(1.0 - ADAM_BETA2);
        let eps = E::from_f64(ADAM_EPS);
        let corr1 = E::from_f64(1.0 / (1.0 - ADAM_BETA1.powi(self.t as i32)));
        let corr2 = E::from_f64(1.0 / (1.0 - ADAM_BETA2.powi(self.t as i32)));
        let lr_e = E::from_f64(lr);
        for i in 0..grads.len() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = store.values_mut(i);
            for ((pj, (mj, vj)), &g) in
                p.iter_mut().zip(m.iter_mut().zip(v.iter_mut())).zip(&grads[i])
            {
                *mj = b1 * *mj + one_m_b1 * g;
                *vj = b2 * *vj + one_m_b2 * g * g;
                let m_hat = *mj * corr1;
                let v_hat = *vj * corr2;
                *pj -= lr_e * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Euclidean norm of a gradient set, in f64.
pub fn grad_norm<E: Elem>(grads: &[Vec<E>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| {
            let v = x.to_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}
