//! Parameters, layers and optimizer built on the autodiff tape.

mod adam;
mod attention;
mod layers;

pub use adam::{Adam, AdamConfig};
pub use attention::{attention_core, MultiHeadAttention};
pub use layers::{Conv2d, LayerNorm, Linear, Mlp};

use std::collections::HashMap;
use std::fs;
use std::ops::{Deref, DerefMut};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{CatrError, Result};
use crate::tensor::{read_tensor, write_tensor, DType, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

const MANIFEST: &str = "manifest.json";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    params: Vec<ManifestEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(CatrError::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replaces the value of a parameter, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.tensors[id.0];
        if slot.shape() != value.shape() {
            return Err(CatrError::shapes("set parameter", slot.shape(), value.shape()));
        }
        *slot = value.with_requires_grad(true);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn accumulate(&mut self, grads: &[(ParamId, Vec<f64>)]) -> Result<()> {
        for (id, g) in grads {
            self.tensors[id.0].accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Writes one tensor file per parameter plus `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CatrError::io(dir, e))?;
        let mut params = Vec::with_capacity(self.len());
        for (i, (name, t)) in self.iter().enumerate() {
            let file = format!("p{i:04}.t");
            write_tensor(&dir.join(&file), t, DType::F64)?;
            params.push(ManifestEntry { name: name.to_string(), file, shape: t.shape().to_vec() });
        }
        let manifest = Manifest { version: CHECKPOINT_VERSION, params };
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| CatrError::io(&path, e))
    }

    /// Loads values saved by [`ParamStore::save`] into an already-built store.
    /// Every parameter must be present with the same shape.
    pub fn load_into(&mut self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| CatrError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(CatrError::Format { path, msg: format!("unsupported checkpoint version {}", manifest.version) });
        }
        if manifest.params.len() != self.len() {
            return Err(CatrError::Config(format!(
                "checkpoint has {} parameters, model expects {}",
                manifest.params.len(),
                self.len()
            )));
        }
        for entry in manifest.params {
            let id = self
                .id(&entry.name)
                .ok_or_else(|| CatrError::Config(format!("checkpoint parameter {} unknown to model", entry.name)))?;
            let t = read_tensor(&dir.join(&entry.file))?;
            self.set(id, t)?;
        }
        Ok(())
    }
}

/// A tape bound to a parameter store for one forward/backward pass.
///
/// Parameters are placed on the tape lazily, once each, on first use.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { tape: Tape::new(), params, bound: vec![None; params.len()] }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Gradients of every parameter that took part in the pass.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let g = grads.get((*v)?)?;
                Some((ParamId(i), g.to_vec()))
            })
            .collect()
    }
}

/// Gradient check over every parameter in `store` plus extra `inputs`.
///
/// `f` runs the forward pass on a graph whose parameters are the perturbed
/// copies; `vars` holds the extra inputs in order.
pub fn gradcheck_module<F>(store: &ParamStore, inputs: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    module_check(store, inputs, f, |g, xs| crate::autodiff::gradcheck_many(g, xs, eps))
}

/// [`gradcheck_module`] perturbing at most `per_tensor` sampled coordinates of
/// each parameter and input; for models too large to check exhaustively.
pub fn gradcheck_module_sampled<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    eps: f64,
    per_tensor: usize,
    seed: u64,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    module_check(store, inputs, f, |g, xs| crate::autodiff::gradcheck_sampled(g, xs, eps, per_tensor, seed))
}

fn module_check<F, C>(store: &ParamStore, inputs: &[Tensor], f: F, check: C) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
    C: FnOnce(&dyn Fn(&mut Tape, &[Var]) -> Result<Var>, &[Tensor]) -> Result<f64>,
{
    let n = store.len();
    let mut xs: Vec<Tensor> = store.ids().map(|id| store.get(id).clone()).collect();
    xs.extend(inputs.iter().cloned());
    let run = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let mut g = Graph { tape: std::mem::take(tape), params: store, bound: vars[..n].iter().copied().map(Some).collect() };
        let out = f(&mut g, &vars[n..]);
        *tape = g.tape;
        out
    };
    check(&run, &xs)
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
