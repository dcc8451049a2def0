//! Named parameter storage and per-step binding onto a tape.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::nn::RunningStats;
use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// All model tensors by name. Non-trainable entries (batch-norm running
/// statistics) are stored alongside and skipped by optimizers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    trainable: Vec<bool>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(id)
    }

    /// Glorot-uniform initialized trainable matrix.
    pub fn add_weight(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("consistent weight shape");
        self.add(name, t, true)
    }

    pub fn add_filled(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Tensor::filled(shape, v), true)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.trainable[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable_ids().map(|id| self.values[id.0].len()).sum()
    }

    /// Replaces a value, requiring the same shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &self.values[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::shape("param set", cur.shape(), value.shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn running_stats(&self, stats: BnStatsIds) -> RunningStats {
        RunningStats {
            mean: self.values[stats.mean.0].data().to_vec(),
            var: self.values[stats.var.0].data().to_vec(),
        }
    }

    pub fn add_running_stats(&mut self, prefix: &str, channels: usize) -> BnStatsIds {
        BnStatsIds {
            mean: self.add(
                format!("{prefix}.running_mean"),
                Tensor::zeros(&[channels]),
                false,
            ),
            var: self.add(
                format!("{prefix}.running_var"),
                Tensor::filled(&[channels], 1.0),
                false,
            ),
        }
    }

    pub fn apply_bn_update(&mut self, update: &BnUpdate, momentum: f64) {
        let mut stats = self.running_stats(update.ids);
        stats.update(&update.mean, &update.var, momentum);
        self.values[update.ids.mean.0]
            .data_mut()
            .copy_from_slice(&stats.mean);
        self.values[update.ids.var.0]
            .data_mut()
            .copy_from_slice(&stats.var);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnStatsIds {
    pub mean: ParamId,
    pub var: ParamId,
}

/// Batch statistics observed during a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub ids: BnStatsIds,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Lazily records parameters as tape leaves, once per tape.
pub struct Binding<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    vars: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 's> Binding<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Binding {
            tape,
            store,
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = if self.store.is_trainable(id) {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable parameter after `Tape::backward`.
    pub fn gradients(&self) -> Vec<(ParamId, Tensor)> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| Some((ParamId(i), v.as_ref()?.grad()?)))
            .collect()
    }
}

impl ParamStore {
    /// Adds gradients collected from a binding into the stored accumulators.
    pub fn accumulate(&mut self, grads: &[(ParamId, Tensor)]) {
        for (id, g) in grads {
            self.grads[id.0]
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binding_routes_gradients_to_named_params() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![2.0, 3.0]), true);
        let c = store.add("c", Tensor::vector(vec![1.0, 1.0]), false);
        let tape = Tape::new();
        let grads = {
            let b = Binding::new(&tape, &store);
            let loss = b.get(w).mul(b.get(c)).unwrap().mul(b.get(w)).unwrap().sum();
            tape.backward(loss).unwrap();
            b.gradients()
        };
        assert_eq!(grads.len(), 1);
        store.accumulate(&grads);
        store.accumulate(&grads);
        assert_eq!(store.grad(w).data(), &[8.0, 12.0]);
        store.zero_grads();
        assert_eq!(store.grad(w).data(), &[0.0, 0.0]);
        assert_eq!(store.id("c"), Some(c));
        assert_eq!(store.num_trainable(), 2);
    }
}
