use serde::{Deserialize, Serialize};

use super::{Grads, Matrix, ParamStore};
use crate::{Error, Result};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = |s: &ParamStore| {
            s.iter()
                .map(|(_, p)| Matrix::zeros(p.rows(), p.cols()))
                .collect::<Vec<_>>()
        };
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Matrix] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Matrix] {
        &self.v
    }

    /// Applies one update. Parameters without a gradient see a zero gradient.
    /// A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        if grads.len() > store.len() {
            return Err(Error::usage("gradient set larger than parameter store"));
        }
        if let Some(name) = grads.first_non_finite(store) {
            return Err(Error::NonFinite(format!(
                "gradient of `{name}` at optimizer step {}",
                self.step + 1
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id);
            match grads.get(id) {
                Some(g) => {
                    for (((pi, mi), vi), &gi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                        *pi -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                    }
                }
                None => {
                    for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()) {
                        *mi *= self.beta1;
                        *vi *= self.beta2;
                        *pi -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Exponential moving average copy of a parameter store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaTarget {
    pub shadow: ParamStore,
    pub tau: f64,
}

impl EmaTarget {
    pub fn new(source: &ParamStore, tau: f64) -> Self {
        EmaTarget {
            shadow: source.clone(),
            tau,
        }
    }

    /// `shadow <- tau * source + (1 - tau) * shadow`.
    pub fn update(&mut self, source: &ParamStore) {
        let tau = self.tau;
        for (s, (_, p)) in self.shadow.values_mut().zip(source.iter()) {
            for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = tau * b + (1.0 - tau) * *a;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, ParamId};

    fn quadratic_grad(store: &ParamStore, w: ParamId) -> (f64, Grads) {
        let mut g = Graph::new();
        let x = g.param(store, w);
        let sq = g.square(x);
        let loss = g.sum(sq);
        (g.value(loss).item(), g.backward(loss))
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::from_vec(1, 2, vec![1.0, -2.0]));
        let mut adam = Adam::new(&store, 0.1);
        let mut grads = Grads::empty(1);
        grads.accumulate(w, Matrix::zeros(1, 2));
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(store.get(w).data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn one_step_descends() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::scalar(1.0));
        let mut adam = Adam::new(&store, 0.1);
        let (_, grads) = quadratic_grad(&store, w);
        adam.step(&mut store, &grads).unwrap();
        assert!(store.get(w).item().abs() < 1.0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::from_vec(1, 3, vec![1.0, -0.5, 0.25]));
        let mut adam = Adam::new(&store, 0.05);
        let mut loss = f64::MAX;
        for _ in 0..500 {
            let (l, grads) = quadratic_grad(&store, w);
            loss = l;
            adam.step(&mut store, &grads).unwrap();
        }
        assert!(loss <= 1e-6, "loss {loss}");
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::scalar(1.0));
        let mut adam = Adam::new(&store, 0.1);
        let mut grads = Grads::empty(1);
        grads.accumulate(w, Matrix::scalar(f64::NAN));
        let err = adam.step(&mut store, &grads).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(store.get(w).item(), 1.0);
    }

    #[test]
    fn ema_halves_gap_on_schedule() {
        let mut source = ParamStore::new();
        let id = source.add("w", Matrix::scalar(1.0));
        let mut target = EmaTarget::new(&source, 0.005);
        *target.shadow.get_mut(id) = Matrix::scalar(0.0);
        let half_life = (std::f64::consts::LN_2 / 0.005).ceil() as usize;
        let mut gap = 1.0;
        for _ in 0..4 {
            for _ in 0..half_life {
                target.update(&source);
            }
            let new_gap = (1.0 - target.shadow.get(id).item()).abs();
            let ratio = new_gap / gap;
            assert!((ratio - 0.5).abs() <= 0.05 * 0.5, "ratio {ratio}");
            gap = new_gap;
        }
    }
}
