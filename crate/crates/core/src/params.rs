//! Named parameter storage, graph binding, and the Adam optimiser.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Var};

/// Parameters keyed by dotted name (`"mdec.layer0.ffn.fc1.w"`), iterated in
/// lexicographic order so hashing and serialisation are stable.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    /// Names and shapes, the architecture fingerprint of the store.
    pub fn descriptor(&self) -> Vec<(String, [usize; 2])> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), [v.nrows(), v.ncols()]))
            .collect()
    }

    /// SHA-256 over names, shapes, and little-endian values.
    pub fn hash(&self) -> String {
        self.hash_filtered(|_| true)
    }

    pub fn hash_filtered(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.params.iter().filter(|(k, _)| keep(k)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((v.nrows() as u64).to_le_bytes());
            h.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copy every parameter whose name passes `keep` from `other`.
    pub fn copy_from(&mut self, other: &ParamStore, keep: impl Fn(&str) -> bool) {
        for (k, v) in other.params.iter().filter(|(k, _)| keep(k)) {
            self.params.insert(k.clone(), v.clone());
        }
    }

    /// The subset of parameters whose names pass `keep`.
    pub fn subset(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|v| v.iter().all(|x| x.is_finite()))
    }

    // ---- initialisers ----

    /// Weight `in×out` uniform in ±1/√in, zero bias `1×out`.
    pub fn init_linear(&mut self, rng: &mut impl Rng, prefix: &str, fan_in: usize, fan_out: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..bound));
        self.insert(format!("{prefix}.w"), w);
        self.insert(format!("{prefix}.b"), Array2::zeros((1, fan_out)));
    }

    pub fn init_layer_norm(&mut self, prefix: &str, dim: usize) {
        self.insert(format!("{prefix}.g"), Array2::ones((1, dim)));
        self.insert(format!("{prefix}.b"), Array2::zeros((1, dim)));
    }

    pub fn init_normal(&mut self, rng: &mut impl Rng, name: &str, shape: (usize, usize), std: f64) {
        let v = Array2::from_shape_fn(shape, |_| std * crate::rng::standard_normal(rng));
        self.insert(name, v);
    }
}

/// Lazily lifts parameters of one store onto a graph. Parameters selected by
/// the trainable predicate become leaves; the rest become constants.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    vars: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: impl Fn(&str) -> bool + 'a) -> Self {
        Self {
            store,
            trainable: Box::new(trainable),
            vars: BTreeMap::new(),
        }
    }

    /// Every parameter is a constant.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, |_| false)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// The graph node for `name`; panics if the store lacks it, which means
    /// the architecture descriptor was not validated.
    pub fn p(&mut self, g: &mut Graph, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .clone();
        let v = if (self.trainable)(name) {
            g.leaf(value)
        } else {
            g.constant(value)
        };
        self.vars.insert(name.to_string(), v);
        v
    }

    /// Bound parameter nodes by name.
    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Gradients of every bound trainable parameter; parameters that did not
    /// receive any gradient get zeros.
    pub fn grads(&self, g: &Graph, grads: &Gradients) -> BTreeMap<String, Array2<f64>> {
        self.vars
            .iter()
            .filter(|(_, v)| g.requires_grad(**v))
            .map(|(k, v)| {
                let grad = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(g.shape(*v)));
                (k.clone(), grad)
            })
            .collect()
    }
}

/// Sum gradient maps key by key.
pub fn accumulate(into: &mut BTreeMap<String, Array2<f64>>, from: BTreeMap<String, Array2<f64>>) {
    for (k, v) in from {
        match into.get_mut(&k) {
            Some(acc) => *acc += &v,
            None => {
                into.insert(k, v);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: ParamStore,
    v: ParamStore,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }

    /// First and second moment estimates.
    pub fn moments(&self) -> (&ParamStore, &ParamStore) {
        (&self.m, &self.v)
    }

    pub fn with_moments(mut self, m: ParamStore, v: ParamStore) -> Self {
        self.m = m;
        self.v = v;
        self
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Array2<f64>>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Array2::zeros(g.dim()));
                self.v.insert(name.clone(), Array2::zeros(g.dim()));
            }
            let m = self.m.get_mut(name).expect("moment");
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
            let v = self.v.get_mut(name).expect("moment");
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let m = self.m.get(name).expect("moment");
            let v = self.v.get(name).expect("moment");
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}
