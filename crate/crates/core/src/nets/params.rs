use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Named trainable tensors, ordered by name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    /// Parameters whose name starts with one of `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> ParamStore {
        ParamStore {
            vars: self
                .vars
                .iter()
                .filter(|(k, _)| prefixes.iter().any(|p| has_prefix(k, p)))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Fresh variables holding copies of every tensor.
    pub fn deep_copy(&self) -> Result<ParamStore> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(ParamStore { vars })
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and raw values.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in &self.vars {
            h.update(k.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let vals = v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            for x in vals {
                h.update(x.to_le_bytes());
            }
        }
        Ok(format!("{:x}", h.finalize()))
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites values from `tensors`; every name must exist with the same shape.
    pub fn assign(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.vars.len(),
                tensors.len()
            )));
        }
        for (k, var) in &self.vars {
            let t = tensors
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{k}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{k}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

fn has_prefix(name: &str, prefix: &str) -> bool {
    name == prefix
        || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}

/// Initialization scheme for a fresh parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    /// He-normal with the given fan-in.
    Kaiming { fan_in: usize },
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanInUniform { fan_in: usize },
}

pub(crate) struct BuildState {
    store: ParamStore,
    rng: Rng,
    dtype: DType,
    device: Device,
    allow_init: bool,
    training: Arc<AtomicBool>,
}

/// Creates or looks up parameters under a dotted name prefix.
///
/// With a fresh store every parameter is initialized from the builder's
/// generator. With a populated store the existing variables are reused, which
/// is how shadow networks and checkpoint restores are built.
pub struct ParamBuilder<'a> {
    state: &'a RefCell<BuildState>,
    prefix: String,
}

pub struct BuildContext(RefCell<BuildState>);

impl BuildContext {
    pub fn fresh(rng: Rng, dtype: DType, device: Device) -> Self {
        Self(RefCell::new(BuildState {
            store: ParamStore::new(),
            rng,
            dtype,
            device,
            allow_init: true,
            training: Arc::new(AtomicBool::new(true)),
        }))
    }

    /// Reuses variables from `store`; a missing name is an error.
    pub fn existing(store: ParamStore, dtype: DType, device: Device) -> Self {
        Self(RefCell::new(BuildState {
            store,
            rng: <Rng as rand::SeedableRng>::seed_from_u64(0),
            dtype,
            device,
            allow_init: false,
            training: Arc::new(AtomicBool::new(true)),
        }))
    }

    pub fn root(&self) -> ParamBuilder<'_> {
        ParamBuilder {
            state: &self.0,
            prefix: String::new(),
        }
    }

    /// Mode switch shared by every layer built from this context.
    pub fn training_flag(&self) -> Arc<AtomicBool> {
        self.0.borrow().training.clone()
    }

    pub fn into_store(self) -> ParamStore {
        self.0.into_inner().store
    }
}

impl<'a> ParamBuilder<'a> {
    pub fn pp(&self, name: &str) -> ParamBuilder<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            state: self.state,
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.state.borrow().dtype
    }

    pub fn training_flag(&self) -> Arc<AtomicBool> {
        self.state.borrow().training.clone()
    }

    pub fn device(&self) -> Device {
        self.state.borrow().device.clone()
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let full = self.pp(name).prefix;
        let mut st = self.state.borrow_mut();
        if let Some(v) = st.store.get(&full) {
            if v.dims() != shape {
                return Err(Error::Contract(format!(
                    "parameter `{full}` has shape {:?}, network expects {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.clone());
        }
        if !st.allow_init {
            return Err(Error::Checkpoint(format!("parameter `{full}` not found")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Kaiming { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(&mut st.rng)).collect()
            }
            Init::FanInUniform { fan_in } => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                let d = Uniform::new_inclusive(-b, b);
                (0..n).map(|_| d.sample(&mut st.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &st.device)?.to_dtype(st.dtype)?;
        let var = Var::from_tensor(&t)?;
        st.store.insert(full, var.clone());
        Ok(var)
    }
}
