//! Adam with bias correction; state round-trips through the archive so
//! training runs can resume exactly.

use crate::graph::{ParamId, ParamStore};
use ndarray::ArrayD;
use std::collections::HashMap;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store
            .ids()
            .map(|id| ArrayD::zeros(store.value(id).raw_dim()))
            .collect();
        let v = store
            .ids()
            .map(|id| ArrayD::zeros(store.value(id).raw_dim()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    /// One update from accumulated gradients. Parameters without a gradient
    /// entry are left untouched (their moments do not advance either).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, ArrayD<f64>)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut seen: HashMap<usize, &ArrayD<f64>> = HashMap::new();
        for (id, g) in grads {
            seen.insert(id.0, g);
        }
        for (idx, g) in seen {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            m.zip_mut_with(g, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(g, |vi, &gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            let p = store.value_mut(ParamId(idx));
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|pi, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// Expose state for checkpointing: (t, first moments, second moments).
    pub fn state(&self) -> (u64, &[ArrayD<f64>], &[ArrayD<f64>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: Vec<ArrayD<f64>>, v: Vec<ArrayD<f64>>) {
        assert_eq!(m.len(), self.m.len(), "optimizer state length mismatch");
        assert_eq!(v.len(), self.v.len(), "optimizer state length mismatch");
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use ndarray::arr1;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("x", arr1(&[5.0, -3.0]).into_dyn());
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(&store, p);
            let sq = g.square(x);
            let loss = g.sum(sq);
            g.backward(loss);
            opt.step(&mut store, &g.param_grads());
        }
        for &v in store.value(p).iter() {
            assert!(v.abs() < 1e-3, "did not converge: {v}");
        }
    }
}
