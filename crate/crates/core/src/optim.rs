//! Adam with global-norm gradient clipping.

use crate::tape::{Gradients, ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients are rescaled to at most this global L2 norm; `None` disables
    /// clipping.
    pub clip_norm: Option<f64>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64, clip_norm: Option<f64>) -> Self {
        let zeros = |store: &ParamStore| -> Vec<Tensor> {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.rows, p.value.cols))
                .collect()
        };
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            m: zeros(store),
            v: zeros(store),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> f64 {
        let norm = grads.global_norm();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = self.learning_rate * bc2.sqrt() / bc1;
        for (id, g) in grads.iter() {
            let i = id.0;
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[i].data, &mut self.v[i].data);
            for k in 0..p.data.len() {
                let gk = g.data[k] as f64 * scale;
                let mk = self.beta1 * m[k] as f64 + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v[k] as f64 + (1.0 - self.beta2) * gk * gk;
                m[k] = mk as f32;
                v[k] = vk as f32;
                p.data[k] -= (step * mk / (vk.sqrt() + self.eps * bc2.sqrt())) as f32;
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Graph;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = Adam::new(&store, 0.1, None);
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&store);
                let x = g.param(id);
                let sq = g.mul(x, x);
                let loss = g.sum(sq);
                g.backward(loss)
            };
            opt.step(&mut store, &grads);
        }
        assert!(store.get(id).data.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr * sign(g), whatever
        // the gradient scale or clipping, up to the eps term.
        for clip in [None, Some(1e-3)] {
            let mut store = ParamStore::new();
            let id = store.add("x", Tensor::from_vec(1, 2, vec![1.0, 1.0]));
            let mut grads = Gradients::default();
            grads.accumulate(id, &Tensor::from_vec(1, 2, vec![50.0, -0.5]));
            let mut opt = Adam::new(&store, 0.01, clip);
            opt.step(&mut store, &grads);
            let x = &store.get(id).data;
            assert!((x[0] - 0.99).abs() < 1e-4 && (x[1] - 1.01).abs() < 1e-4, "{x:?}");
        }
    }

    #[test]
    fn reports_unclipped_norm() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec(1, 2, vec![0.0, 0.0]));
        let mut grads = Gradients::default();
        grads.accumulate(id, &Tensor::from_vec(1, 2, vec![3.0, 4.0]));
        let mut opt = Adam::new(&store, 0.01, Some(1.0));
        assert!((opt.step(&mut store, &grads) - 5.0).abs() < 1e-9);
    }
}
