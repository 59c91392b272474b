//! Named parameter tensors, freeze flags, graph binding and Adam updates.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use sarreg_autodiff::{AdamConfig, AdamState, BnMode, BnStats, Gradients, Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SarError};
use crate::sart::{self, SartTensor};

const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BN_MOMENTUM: f64 = 0.1;
pub(crate) const BN_EPS: f64 = 1e-5;

/// Layer name of a tensor: everything before the last `.`.
pub fn layer_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(l, _)| l)
}

/// Named tensors grouped into layers by name prefix. Buffers (running
/// statistics) are never trainable; parameters are trainable unless their
/// layer is frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
    buffers: BTreeSet<String>,
    frozen: BTreeSet<String>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            tensors: BTreeMap::new(),
            buffers: BTreeSet::new(),
            frozen: BTreeSet::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        self.buffers.remove(&name);
        self.tensors.insert(name, value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        self.buffers.insert(name.clone());
        self.tensors.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub(crate) fn expect(&self, name: &str) -> &Tensor<T> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn layers(&self) -> BTreeSet<&str> {
        self.tensors.keys().map(|n| layer_of(n)).collect()
    }

    pub fn is_buffer(&self, name: &str) -> bool {
        self.buffers.contains(name)
    }

    pub fn is_frozen(&self, layer: &str) -> bool {
        self.frozen.contains(layer)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.tensors.contains_key(name) && !self.is_buffer(name) && !self.is_frozen(layer_of(name))
    }

    pub fn set_frozen(&mut self, layer: &str, frozen: bool) {
        if frozen {
            self.frozen.insert(layer.to_string());
        } else {
            self.frozen.remove(layer);
        }
    }

    /// Freeze every layer except `layer`.
    pub fn freeze_all_except(&mut self, layer: &str) {
        self.frozen = self
            .layers()
            .into_iter()
            .filter(|l| *l != layer)
            .map(str::to_string)
            .collect();
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.clone(),
            frozen: self.frozen.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Fold batch statistics into the running mean and variance of the
    /// normalization layer `layer`.
    pub fn update_running_stats(&mut self, layer: &str, stats: &BnStats<T>) {
        let m = T::from_f64(BN_MOMENTUM).unwrap();
        for (suffix, fresh) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let t = self
                .tensors
                .get_mut(&format!("{layer}.{suffix}"))
                .unwrap_or_else(|| panic!("missing running statistics for {layer}"));
            for (r, &f) in t.data_mut().iter_mut().zip(fresh) {
                *r = (T::one() - m) * *r + m * f;
            }
        }
    }
}

impl ParamStore<f32> {
    /// Write one SART file per tensor plus a JSON manifest.
    pub fn save_checkpoint(&self, dir: &Path, config: &serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut layers: BTreeMap<&str, LayerEntry> = BTreeMap::new();
        for (name, t) in &self.tensors {
            let file = format!("{name}.sart");
            sart::write(&dir.join(&file), &SartTensor::f32(t.shape(), t.data().to_vec()))?;
            let layer = layer_of(name);
            layers
                .entry(layer)
                .or_insert_with(|| LayerEntry {
                    name: layer.to_string(),
                    frozen: self.is_frozen(layer),
                    tensors: Vec::new(),
                })
                .tensors
                .push(TensorEntry {
                    name: name.clone(),
                    file,
                    shape: t.shape().to_vec(),
                    buffer: self.is_buffer(name),
                });
        }
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            config: config.clone(),
            layers: layers.into_values().collect(),
        };
        std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Returns the store and the config echo recorded in the manifest.
    pub fn load_checkpoint(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let path = dir.join(MANIFEST);
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        let bad = |reason: String| SarError::Format {
            path: path.clone(),
            reason,
        };
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {}", manifest.format_version)));
        }
        let mut store = Self::default();
        for layer in &manifest.layers {
            if layer.frozen {
                store.frozen.insert(layer.name.clone());
            }
            for entry in &layer.tensors {
                let rec = sart::read(&dir.join(&entry.file))?;
                let data = rec
                    .as_f32()
                    .ok_or_else(|| bad(format!("{} is not float32", entry.file)))?;
                if rec.dims_usize() != entry.shape {
                    return Err(bad(format!("{} shape disagrees with manifest", entry.file)));
                }
                let t = Tensor::new(&entry.shape, data.to_vec());
                if entry.buffer {
                    store.insert_buffer(entry.name.clone(), t);
                } else {
                    store.insert_param(entry.name.clone(), t);
                }
            }
        }
        Ok((store, manifest.config))
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: serde_json::Value,
    layers: Vec<LayerEntry>,
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    frozen: bool,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
    buffer: bool,
}

/// How normalization layers behave in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics; running statistics are collected for later update.
    Train,
    /// Running statistics.
    Eval,
}

/// Lazily binds store tensors into one graph. Trainable tensors become
/// differentiable leaves, everything else constants.
pub struct Binder<'s, 'g, T: Real> {
    store: &'s ParamStore<T>,
    graph: &'g Graph<T>,
    phase: Phase,
    trainable: Option<Vec<String>>,
    vars: RefCell<BTreeMap<String, Var<'g, T>>>,
    bn_stats: RefCell<Vec<(String, BnStats<T>)>>,
}

impl<'s, 'g, T: Real> Binder<'s, 'g, T> {
    pub fn new(store: &'s ParamStore<T>, graph: &'g Graph<T>, phase: Phase) -> Self {
        Self {
            store,
            graph,
            phase,
            trainable: None,
            vars: RefCell::new(BTreeMap::new()),
            bn_stats: RefCell::new(Vec::new()),
        }
    }

    /// Only tensors whose names start with one of `prefixes` (and are
    /// trainable in the store) become differentiable.
    pub fn restricted(mut self, prefixes: &[&str]) -> Self {
        self.trainable = Some(prefixes.iter().map(|p| p.to_string()).collect());
        self
    }

    fn differentiable(&self, name: &str) -> bool {
        self.store.is_trainable(name)
            && self
                .trainable
                .as_ref()
                .map_or(true, |ps| ps.iter().any(|p| name.starts_with(p.as_str())))
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn var(&self, name: &str) -> Var<'g, T> {
        if let Some(v) = self.vars.borrow().get(name) {
            return *v;
        }
        let t = self.store.expect(name).clone();
        let v = if self.differentiable(name) {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.vars.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Batch normalization with parameters under `layer`.
    pub fn batch_norm(&self, layer: &str, x: Var<'g, T>) -> Var<'g, T> {
        let gamma = self.var(&format!("{layer}.gamma"));
        let beta = self.var(&format!("{layer}.beta"));
        let eps = T::from_f64(BN_EPS).unwrap();
        match self.phase {
            Phase::Train => {
                let (y, stats) = x.batch_norm(gamma, beta, &BnMode::Train { eps });
                self.bn_stats.borrow_mut().push((layer.to_string(), stats));
                y
            }
            Phase::Eval => {
                let mode = BnMode::Eval {
                    mean: self.store.expect(&format!("{layer}.running_mean")).data().to_vec(),
                    var: self.store.expect(&format!("{layer}.running_var")).data().to_vec(),
                    eps,
                };
                x.batch_norm(gamma, beta, &mode).0
            }
        }
    }

    /// Batch statistics collected in training phase, in call order.
    pub fn take_bn_stats(&self) -> Vec<(String, BnStats<T>)> {
        std::mem::take(&mut self.bn_stats.borrow_mut())
    }

    /// Gradients of every bound trainable tensor whose name starts with
    /// `prefix`.
    pub fn gradients(&self, grads: &Gradients<T>, prefix: &str) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .borrow()
            .iter()
            .filter(|(n, _)| n.starts_with(prefix) && self.differentiable(n))
            .map(|(n, v)| (n.clone(), grads.get_or_zero(*v)))
            .collect()
    }
}

/// Adam state per named tensor.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: AdamConfig,
    states: BTreeMap<String, AdamState<f32>>,
}

impl Optimizer {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: BTreeMap::new(),
        }
    }

    /// Apply one update to every tensor in `grads`. Frozen or buffer
    /// tensors are skipped.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>) {
        for (name, g) in grads {
            if !store.is_trainable(name) {
                continue;
            }
            let p = store.get_mut(name).expect("gradient for a stored tensor");
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(p.numel()));
            state.update(&self.config, p.data_mut(), g.data());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::default();
        s.insert_param("g.a.weight", Tensor::new(&[2, 1], vec![1.0, 2.0]));
        s.insert_param("g.a.bias", Tensor::new(&[1], vec![0.5]));
        s.insert_param("g.head.weight", Tensor::new(&[1], vec![0.0]));
        s.insert_buffer("g.a.running_mean", Tensor::new(&[1], vec![0.0]));
        s
    }

    #[test]
    fn layers_and_freezing() {
        let mut s = store();
        assert_eq!(s.layers().into_iter().collect::<Vec<_>>(), ["g.a", "g.head"]);
        assert!(s.is_trainable("g.a.weight"));
        assert!(!s.is_trainable("g.a.running_mean"));
        s.freeze_all_except("g.head");
        assert!(!s.is_trainable("g.a.weight"));
        assert!(s.is_trainable("g.head.weight"));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store();
        s.set_frozen("g.a", true);
        let cfg = serde_json::json!({"width": 8});
        s.save_checkpoint(dir.path(), &cfg).unwrap();
        let (back, echo) = ParamStore::load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, s);
        assert_eq!(echo, cfg);
    }

    #[test]
    fn binder_only_differentiates_trainable() {
        let mut s = store();
        s.set_frozen("g.a", true);
        let g = Graph::new();
        let b = Binder::new(&s, &g, Phase::Eval);
        let loss = (b.var("g.a.weight").sum() * b.var("g.head.weight").sum()).sum();
        let grads = g.backward(loss);
        let gs = b.gradients(&grads, "g.");
        assert_eq!(gs.keys().collect::<Vec<_>>(), ["g.head.weight"]);
        assert_eq!(gs["g.head.weight"].data(), &[3.0]);
    }
}
