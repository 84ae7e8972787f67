//! Named parameter storage shared across training steps.
//!
//! Parameters live outside any tape. A [`Session`] wraps one forward pass:
//! it registers parameters as leaves on a fresh tape (creating them on
//! first use, in a deterministic order) and routes gradients back into the
//! store after the backward sweep.

use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{container, sc, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal(0, std²) resampled until within two standard deviations.
    TruncNormal { std: f64 },
    Zeros,
    Constant(f64),
}

pub struct Param<T: Scalar> {
    pub value: Rc<Tensor<T>>,
    /// Accumulated gradient across micro-batches; cleared by the optimizer.
    pub grad: Option<Tensor<T>>,
    /// Adam first and second moments.
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Named parameters plus the RNG that initializes them.
pub struct ParamStore<T: Scalar> {
    params: IndexMap<String, Param<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> ParamStore<T> {
        ParamStore { params: IndexMap::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn value(&self, name: &str) -> Option<&Rc<Tensor<T>>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_or_create(&mut self, name: &str, dims: &[usize], init: Init) -> Rc<Tensor<T>> {
        if let Some(p) = self.params.get(name) {
            assert!(
                p.value.dims() == dims,
                "parameter {} exists with shape {:?}, requested {:?}",
                name,
                p.value.dims(),
                dims
            );
            return Rc::clone(&p.value);
        }
        let n: usize = dims.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Constant(c) => vec![sc(c); n],
            Init::TruncNormal { std } => (0..n)
                .map(|_| {
                    loop {
                        let z: f64 = self.rng.sample(StandardNormal);
                        if z.abs() <= 2.0 {
                            return sc(z * std);
                        }
                    }
                })
                .collect(),
        };
        let value = Rc::new(Tensor::from_vec(dims.to_vec(), data));
        let zeros = Tensor::zeros(dims.to_vec());
        self.params.insert(
            name.to_string(),
            Param { value: Rc::clone(&value), grad: None, m: zeros.clone(), v: zeros },
        );
        value
    }

    pub fn accumulate_grad(&mut self, name: &str, g: Tensor<T>) {
        let p = self.params.get_mut(name).expect("accumulate_grad on unknown parameter");
        match &mut p.grad {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|p| p.grad.as_ref())
    }

    pub fn scale_grads(&mut self, f: f64) {
        for p in self.params.values_mut() {
            if let Some(g) = &mut p.grad {
                g.scale_assign(sc(f));
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn params(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Write every parameter (and its optimizer moments) as container files
    /// under `dir`, plus an index listing the parameter order.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut names = Vec::new();
        for (i, (name, p)) in self.params.iter().enumerate() {
            let stem = format!("p{:04}", i);
            container::save_scalar(dir.join(format!("{stem}.value.o3vt")), &p.value)?;
            container::save_scalar(dir.join(format!("{stem}.m.o3vt")), &p.m)?;
            container::save_scalar(dir.join(format!("{stem}.v.o3vt")), &p.v)?;
            names.push((stem, name.clone()));
        }
        let index: Vec<serde_json::Value> = names
            .iter()
            .map(|(stem, name)| serde_json::json!({ "file": stem, "name": name }))
            .collect();
        let path = dir.join("params.json");
        let text = serde_json::to_string_pretty(&index).expect("serialize param index");
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    /// Load parameters saved by [`ParamStore::save_dir`]. Replaces current
    /// contents.
    pub fn load_dir(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let path = dir.join("params.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: Vec<serde_json::Value> =
            serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        self.params.clear();
        for entry in index {
            let stem = entry["file"].as_str().ok_or_else(|| {
                Error::Checkpoint(format!("bad param index entry: {entry}"))
            })?;
            let name = entry["name"].as_str().ok_or_else(|| {
                Error::Checkpoint(format!("bad param index entry: {entry}"))
            })?;
            let value: Tensor<T> = container::load_scalar(dir.join(format!("{stem}.value.o3vt")))?;
            let m: Tensor<T> = container::load_scalar(dir.join(format!("{stem}.m.o3vt")))?;
            let v: Tensor<T> = container::load_scalar(dir.join(format!("{stem}.v.o3vt")))?;
            self.params.insert(
                name.to_string(),
                Param { value: Rc::new(value), grad: None, m, v },
            );
        }
        Ok(())
    }
}

/// One forward/backward pass over a fresh tape with parameters bound from a
/// store.
pub struct Session<'a, T: Scalar> {
    pub tape: Tape<T>,
    store: &'a mut ParamStore<T>,
    bound: HashMap<String, Var<T>>,
    trainable: bool,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>) -> Session<'a, T> {
        Session { tape: Tape::new(), store, bound: HashMap::new(), trainable: true }
    }

    /// A session recording onto an existing tape (gradient checks drive
    /// model forwards this way).
    pub fn on(tape: &Tape<T>, store: &'a mut ParamStore<T>) -> Session<'a, T> {
        Session { tape: tape.clone(), store, bound: HashMap::new(), trainable: true }
    }

    /// A session whose parameters do not require gradients (evaluation).
    pub fn frozen(store: &'a mut ParamStore<T>) -> Session<'a, T> {
        Session { tape: Tape::new(), store, bound: HashMap::new(), trainable: false }
    }

    /// Bind (creating if needed) the named parameter as a tape leaf.
    /// Repeated binds of one name return the same var, so shared layers
    /// accumulate gradients through fan-out as usual.
    pub fn weight(&mut self, name: &str, dims: &[usize], init: Init) -> Var<T> {
        if let Some(v) = self.bound.get(name) {
            assert!(v.dims() == dims, "weight {} bound with shape {:?}, requested {:?}", name, v.dims(), dims);
            return v.clone();
        }
        let value = self.store.get_or_create(name, dims, init);
        let var = self.tape.leaf(value, self.trainable);
        self.bound.insert(name.to_string(), var.clone());
        var
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Backward from `root` and add each bound parameter's gradient to the
    /// store. Returns false (accumulating nothing) if any gradient is
    /// non-finite.
    pub fn backward_accumulate(self, root: &Var<T>) -> Result<bool> {
        let grads = self.tape.backward(root)?;
        let mut updates: Vec<(String, Tensor<T>)> = Vec::with_capacity(self.bound.len());
        for (name, var) in &self.bound {
            let g = grads.get_or_zeros(var);
            if !g.is_finite() {
                return Ok(false);
            }
            updates.push((name.clone(), g));
        }
        for (name, g) in updates {
            self.store.accumulate_grad(&name, g);
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn creation_is_seed_deterministic() {
        let make = || {
            let mut s = ParamStore::<f32>::new(7);
            let a = s.get_or_create("a", &[4, 3], Init::TruncNormal { std: 0.02 });
            let b = s.get_or_create("b", &[5], Init::TruncNormal { std: 0.02 });
            (a.data().to_vec(), b.data().to_vec())
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn truncated_normal_respects_bound() {
        let mut s = ParamStore::<f64>::new(3);
        let w = s.get_or_create("w", &[1000], Init::TruncNormal { std: 0.1 });
        assert!(w.data().iter().all(|v| v.abs() <= 0.2 + 1e-12));
        let rms = (w.data().iter().map(|v| v * v).sum::<f64>() / 1000.0).sqrt();
        assert!(rms > 0.05 && rms < 0.15, "rms {}", rms);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f32>::new(1);
        s.get_or_create("x", &[2, 2], Init::TruncNormal { std: 1.0 });
        s.get_or_create("y", &[3], Init::Constant(2.5));
        s.save_dir(dir.path()).unwrap();
        let mut s2 = ParamStore::<f32>::new(99);
        s2.load_dir(dir.path()).unwrap();
        assert_eq!(s2.len(), 2);
        assert_eq!(s.value("x").unwrap(), s2.value("x").unwrap());
        assert_eq!(s.value("y").unwrap(), s2.value("y").unwrap());
    }

    #[test]
    fn session_accumulates_gradients_additively() {
        let mut store = ParamStore::<f64>::new(0);
        for _ in 0..2 {
            let mut sess = Session::new(&mut store);
            let w = sess.weight("w", &[2], Init::Constant(3.0));
            let loss = w.mul(&w).sum_all();
            assert!(sess.backward_accumulate(&loss).unwrap());
        }
        // d(w²)/dw = 2w = 6, accumulated twice.
        assert_eq!(store.grad("w").unwrap().data(), &[12.0, 12.0]);
    }
}
