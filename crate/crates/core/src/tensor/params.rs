//! Named parameter storage with Adam updates.
//!
//! Initialization is derived from `(seed, name)` so that parameter creation
//! order never affects the values — a prerequisite for the bitwise-rerun
//! guarantee.

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use super::graph::{Graph, Op, Tid};

pub struct ParamEntry {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    m: ArrayD<f64>,
    v: ArrayD<f64>,
    /// Lazy rows: elements with an exactly-zero gradient are skipped by Adam.
    /// Used for embedding tables so untouched rows stay untouched.
    pub sparse_updates: bool,
}

/// Ordered map of named trainable arrays plus optimizer state.
pub struct ParamStore {
    pub seed: u64,
    entries: IndexMap<String, ParamEntry>,
    step: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { seed, entries: IndexMap::new(), step: 0 }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        let shape = value.raw_dim();
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                grad: ArrayD::zeros(shape.clone()),
                m: ArrayD::zeros(shape.clone()),
                v: ArrayD::zeros(shape),
                sparse_updates: false,
            },
        );
    }

    pub fn mark_sparse(&mut self, name: &str) {
        if let Some(e) = self.entries.get_mut(name) {
            e.sparse_updates = true;
        }
    }

    /// Deterministic rng for one parameter, independent of creation order.
    fn rng_for(&self, name: &str) -> ChaCha12Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        let d = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&d);
        ChaCha12Rng::from_seed(key)
    }

    /// Fetch-or-create with uniform init in `[-bound, bound]`.
    pub fn get_or_init_uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> &ArrayD<f64> {
        if !self.contains(name) {
            let mut rng = self.rng_for(name);
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
            self.insert(name, ArrayD::from_shape_vec(IxDyn(shape), data).unwrap());
        }
        self.get(name).unwrap()
    }

    pub fn get_or_init_zeros(&mut self, name: &str, shape: &[usize]) -> &ArrayD<f64> {
        if !self.contains(name) {
            self.insert(name, ArrayD::zeros(IxDyn(shape)));
        }
        self.get(name).unwrap()
    }

    pub fn get_or_init_const(&mut self, name: &str, shape: &[usize], c: f64) -> &ArrayD<f64> {
        if !self.contains(name) {
            self.insert(name, ArrayD::from_elem(IxDyn(shape), c));
        }
        self.get(name).unwrap()
    }

    /// Insert the parameter into a graph as a leaf node.
    pub fn node(&self, g: &mut Graph, name: &str) -> Tid {
        let v = self
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        g.param_node(name, v)
    }

    /// Pull gradients of all `Param` nodes out of a finished backward pass,
    /// adding them to the per-parameter accumulators.
    pub fn absorb_grads(&mut self, g: &Graph) {
        for (i, node) in g.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if let Some(grad) = g.grad(Tid(i)) {
                    if let Some(e) = self.entries.get_mut(name.as_str()) {
                        e.grad += grad;
                    }
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(0.0);
        }
    }

    /// One Adam step over all parameters; clears gradients afterwards.
    pub fn adam_step(&mut self, lr: f64) {
        self.adam_step_config(lr, 0.9, 0.999, 1e-8);
    }

    pub fn adam_step_config(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        for e in self.entries.values_mut() {
            let sparse = e.sparse_updates;
            let val = e.value.as_slice_mut().unwrap();
            let grad = e.grad.as_slice_mut().unwrap();
            let m = e.m.as_slice_mut().unwrap();
            let v = e.v.as_slice_mut().unwrap();
            for k in 0..val.len() {
                let gk = grad[k];
                if sparse && gk == 0.0 {
                    continue;
                }
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                val[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
            grad.fill(0.0);
        }
    }

    /// Gradient L-inf norm across all parameters (NaN detection included).
    pub fn grad_linf(&self) -> f64 {
        let mut mx = 0.0f64;
        for e in self.entries.values() {
            for &g in e.grad.iter() {
                if g.is_nan() {
                    return f64::NAN;
                }
                mx = mx.max(g.abs());
            }
        }
        mx
    }

    /// SHA-256 over names, shapes and raw values, in insertion order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, e) in &self.entries {
            h.update(name.as_bytes());
            for &d in e.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in e.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    /// Copy all entries (values only) into a fresh store.
    pub fn clone_values(&self, seed: u64) -> ParamStore {
        let mut out = ParamStore::new(seed);
        for (k, e) in &self.entries {
            out.insert(k, e.value.clone());
            if e.sparse_updates {
                out.mark_sparse(k);
            }
        }
        out
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::new(7);
        a.get_or_init_uniform("x", &[4], 1.0);
        a.get_or_init_uniform("y", &[4], 1.0);
        let mut b = ParamStore::new(7);
        b.get_or_init_uniform("y", &[4], 1.0);
        b.get_or_init_uniform("x", &[4], 1.0);
        assert_eq!(a.get("x"), b.get("x"));
        assert_eq!(a.get("y"), b.get("y"));
    }

    #[test]
    fn sparse_rows_stay_untouched() {
        let mut s = ParamStore::new(0);
        s.insert("table", ArrayD::zeros(ndarray::IxDyn(&[3, 2])));
        s.mark_sparse("table");
        let before = s.get("table").unwrap().clone();
        // gradient only on row 1
        {
            let e = s.entries.get_mut("table").unwrap();
            e.grad[[1, 0]] = 1.0;
        }
        s.adam_step(0.1);
        let after = s.get("table").unwrap();
        assert_eq!(after[[0, 0]], before[[0, 0]]);
        assert_eq!(after[[2, 1]], before[[2, 1]]);
        assert!(after[[1, 0]] < 0.0);
    }
}
