//! Adam over the trainable entries of a parameter store.

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::nn::graph::Gradients;
use crate::nn::params::ParamStore;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second-moment state plus step counter, resumable via
/// [`Adam::snapshot`] / [`Adam::restore`].
pub struct Adam {
    hp: AdamParams,
    t: u64,
    ids: Vec<usize>,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

/// Serializable optimizer state.
#[derive(Clone)]
pub struct AdamState {
    pub t: u64,
    /// `(parameter name, first moment, second moment)` per trainable entry.
    pub moments: Vec<(String, ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(store: &ParamStore, hp: AdamParams) -> Self {
        let ids = store.trainable_ids();
        let m = ids
            .iter()
            .map(|&id| ArrayD::zeros(store.value(id).raw_dim()))
            .collect();
        let v = ids
            .iter()
            .map(|&id| ArrayD::zeros(store.value(id).raw_dim()))
            .collect();
        Adam {
            hp,
            t: 0,
            ids,
            m,
            v,
        }
    }

    pub fn hyperparams(&self) -> AdamParams {
        self.hp
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update. Parameters without a gradient this step keep their
    /// moments unchanged.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.hp.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.hp.beta2.powi(self.t as i32);
        for (slot, &id) in self.ids.iter().enumerate() {
            let Some(g) = grads.param(id) else {
                continue;
            };
            let gv = g.view_dyn();
            if gv.shape() != store.value(id).shape() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} does not match parameter {}",
                    gv.shape(),
                    store.name(id)
                )));
            }
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let p = store.value_mut(id);
            for ((pv, (mv, vv)), &ge) in p
                .iter_mut()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .zip(gv.iter())
            {
                *mv = self.hp.beta1 * *mv + (1.0 - self.hp.beta1) * ge;
                *vv = self.hp.beta2 * *vv + (1.0 - self.hp.beta2) * ge * ge;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.hp.lr * mhat / (vhat.sqrt() + self.hp.eps);
            }
        }
        Ok(())
    }

    pub fn snapshot(&self, store: &ParamStore) -> AdamState {
        AdamState {
            t: self.t,
            moments: self
                .ids
                .iter()
                .enumerate()
                .map(|(slot, &id)| {
                    (
                        store.name(id).to_string(),
                        self.m[slot].clone(),
                        self.v[slot].clone(),
                    )
                })
                .collect(),
        }
    }

    pub fn restore(&mut self, store: &ParamStore, state: &AdamState) -> Result<()> {
        if state.moments.len() != self.ids.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state holds {} entries, model has {}",
                state.moments.len(),
                self.ids.len()
            )));
        }
        for (slot, &id) in self.ids.iter().enumerate() {
            let (name, m, v) = &state.moments[slot];
            if name != store.name(id) {
                return Err(Error::Checkpoint(format!(
                    "optimizer state entry {slot} is {name}, expected {}",
                    store.name(id)
                )));
            }
            if m.shape() != store.value(id).shape() || v.shape() != store.value(id).shape() {
                return Err(Error::Checkpoint(format!("moment shape mismatch for {name}")));
            }
            self.m[slot] = m.clone();
            self.v[slot] = v.clone();
        }
        self.t = state.t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;
    use ndarray::{Array1, Array3, Array4};

    #[test]
    fn first_step_moves_by_lr_per_coordinate() {
        // With fresh moments, Adam's first update is lr * sign(g) up to eps.
        let mut store = ParamStore::new();
        store
            .add_param("w", Array4::from_elem((2, 2, 1, 1), 0.5).into_dyn())
            .unwrap();
        let before = store.value(store.id("w").unwrap()).clone();
        let grads = {
            let mut g = Graph::new(&mut store, true);
            let x = g.input4(Array4::from_elem((1, 2, 2, 2), 1.0));
            let w = g.param_named("w").unwrap();
            let y = g.conv2d(x, w, None, 1, 0, 1).unwrap();
            let target = Array3::<u8>::from_elem((1, 2, 2), 1);
            let loss = g.seg_ce(y, &target).unwrap();
            g.backward(loss).unwrap()
        };
        let mut opt = Adam::new(
            &store,
            AdamParams {
                lr: 0.01,
                ..AdamParams::default()
            },
        );
        opt.step(&mut store, &grads).unwrap();
        let after = store.value(store.id("w").unwrap());
        for (b, a) in before.iter().zip(after.iter()) {
            let delta = (b - a).abs();
            assert!(delta > 0.009 && delta < 0.0101, "step size {delta}");
        }
    }

    #[test]
    fn snapshot_restore_round_trips() {
        let mut store = ParamStore::new();
        store
            .add_param("w", Array1::from_vec(vec![1.0, 2.0]).into_dyn())
            .unwrap();
        let mut opt = Adam::new(&store, AdamParams::default());
        opt.t = 7;
        opt.m[0][[0]] = 0.25;
        opt.v[0][[1]] = 0.5;
        let snap = opt.snapshot(&store);
        let mut opt2 = Adam::new(&store, AdamParams::default());
        opt2.restore(&store, &snap).unwrap();
        assert_eq!(opt2.t, 7);
        assert_eq!(opt2.m[0][[0]], 0.25);
        assert_eq!(opt2.v[0][[1]], 0.5);
    }
}
