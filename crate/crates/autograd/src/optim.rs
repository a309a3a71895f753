//! Stochastic gradient descent with momentum.

use crate::graph::Gradients;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, clip_norm: Option<f64>) -> Self {
        Self {
            momentum,
            weight_decay,
            clip_norm,
            velocity: Vec::new(),
        }
    }

    /// Momentum buffers, one slot per parameter of the store (`None` until
    /// the parameter first receives a gradient).
    pub fn velocity(&self) -> &[Option<Tensor>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Option<Tensor>>) {
        self.velocity = velocity;
    }

    /// Apply one update. Parameters without a gradient this step are left
    /// untouched, momentum included. Returns the pre-clipping gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> f64 {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let norm = grads
            .param_grads()
            .filter_map(|(_, g)| g)
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = match self.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        let updates: Vec<_> = grads
            .param_grads()
            .filter_map(|(id, g)| g.map(|g| (id, g.clone())))
            .collect();
        for (id, g) in updates {
            if !store.is_trainable(id) {
                continue;
            }
            let p = store.get_mut(id);
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                let d = gv * clip + self.weight_decay * *pv;
                *vv = self.momentum * *vv + d;
                *pv -= lr * *vv;
            }
        }
        norm
    }
}

/// Cosine decay from `base` at step 0 to 0 at `total` steps.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn descends_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec(&[2], vec![3.0, -2.0]));
        let mut opt = Sgd::new(0.9, 0.0, None);
        for _ in 0..200 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let sq = g.square(x);
            let loss = g.sum(sq);
            let grads = g.backward(loss);
            opt.step(&mut store, &grads, 0.05);
        }
        assert!(store.get(id).norm() < 1e-3);
    }

    #[test]
    fn untouched_params_do_not_move() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_vec(&[1], vec![1.0]));
        let b = store.add("b", Tensor::from_vec(&[1], vec![1.0]));
        let mut opt = Sgd::new(0.9, 0.1, None);
        let mut g = Graph::new();
        let x = g.param(&store, a);
        let loss = g.sum(x);
        let grads = g.backward(loss);
        opt.step(&mut store, &grads, 0.1);
        assert_ne!(store.get(a).data()[0], 1.0);
        assert_eq!(store.get(b).data()[0], 1.0);
        assert!(opt.velocity()[b.index()].is_none());
    }

    #[test]
    fn clipping_bounds_the_step() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec(&[1], vec![0.0]));
        let mut opt = Sgd::new(0.0, 0.0, Some(1.0));
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let y = g.scale(x, 100.0);
        let loss = g.sum(y);
        let grads = g.backward(loss);
        let norm = opt.step(&mut store, &grads, 1.0);
        assert_eq!(norm, 100.0);
        assert!((store.get(id).data()[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.01, 0, 100), 0.01);
        assert!(cosine_lr(0.01, 100, 100).abs() < 1e-15);
        assert!((cosine_lr(0.01, 50, 100) - 0.005).abs() < 1e-12);
    }
}
