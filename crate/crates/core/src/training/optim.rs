//! Adam with optional gradient clipping and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::graph::Gradients;
use crate::params::{round_f32, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero over the stage.
    Cosine,
}

pub fn lr_at(base: f64, schedule: Schedule, step: usize, total: usize) -> f64 {
    match schedule {
        Schedule::Constant => base,
        Schedule::Cosine => {
            let p = step as f64 / total.max(1) as f64;
            0.5 * base * (1.0 + (std::f64::consts::PI * p).cos())
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![None; n_params],
            v: vec![None; n_params],
            t: 0,
        }
    }

    /// One update on every parameter that has a gradient; the rest are not
    /// touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.v[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let w = store.value_mut(id);
            for (((w, m), v), &g) in w
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w = round_f32(*w - lr * mh / (vh.sqrt() + self.eps));
            }
        }
    }
}

/// Rescale so the global norm is at most `max_norm`; returns the norm before
/// clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let n = grads.global_norm();
    if n > max_norm && n > 0.0 {
        grads.scale(max_norm / n);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::params::{Expert, ExpertSet, Init};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_moves_by_lr() {
        // bias correction makes the first Adam step exactly lr·sign(g)
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let w = store.add("w", Expert::Planning, 1, 3, Init::Zeros, &mut rng);
        let grads = {
            let mut g = Graph::new(&store, ExpertSet::ALL);
            let p = g.param(w);
            let loss = g.mse(p, &Matrix::row_vector(&[1.0, -2.0, 0.5]));
            g.backward(loss)
        };
        let mut adam = Adam::new(store.len());
        adam.step(&mut store, &grads, 0.01);
        let got = store.value(w).data().to_vec();
        for (g, want) in got.iter().zip([0.01, -0.01, 0.01]) {
            assert!((g - want).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(lr_at(1e-3, Schedule::Cosine, 0, 100), 1e-3);
        assert!(lr_at(1e-3, Schedule::Cosine, 100, 100).abs() < 1e-18);
        assert!((lr_at(1e-3, Schedule::Cosine, 50, 100) - 5e-4).abs() < 1e-15);
        assert_eq!(lr_at(1e-3, Schedule::Constant, 70, 100), 1e-3);
    }
}
