//! Named parameter storage with seeded, order-independent initialization.
//!
//! Every parameter is created through a [`Scope`], which prefixes names with
//! a dotted path (`atcn.stage1.embed.conv.weight`). The initial value of a
//! parameter depends only on the store seed and its full name, so adding a
//! layer never perturbs the initialization of the others.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::rng::mix_seed;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

#[derive(Debug)]
struct Inner {
    seed: u64,
    vars: BTreeMap<String, Var>,
}

/// Shared handle to every trainable tensor of a model.
#[derive(Debug, Clone)]
pub struct VarStore {
    inner: Arc<Mutex<Inner>>,
    device: Device,
}

impl VarStore {
    pub fn new(seed: u64, device: Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                seed,
                vars: BTreeMap::new(),
            })),
            device,
        }
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// All variables, sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("var store poisoned");
        inner
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.named_vars().into_iter().map(|(_, v)| v).collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner
            .lock()
            .expect("var store poisoned")
            .vars
            .get(name)
            .cloned()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars().iter().map(|v| v.elem_count()).sum()
    }

    /// Overwrites existing variables in place. Every stored variable must be
    /// present in `values` with a matching shape.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let inner = self.inner.lock().expect("var store poisoned");
        for (name, var) in inner.vars.iter() {
            let value = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if value.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                    var.dims(),
                    value.dims()
                )));
            }
            var.set(&value.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    fn create(&self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.inner.lock().expect("var store poisoned");
        if let Some(existing) = inner.vars.get(&name) {
            return Err(Error::InvalidArgument(format!(
                "parameter `{name}` registered twice (shape {:?})",
                existing.dims()
            )));
        }
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Const(c) => vec![c as f32; numel],
            Init::Uniform(bound) => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(inner.seed, &name));
                let dist = Uniform::new_inclusive(-bound, bound)
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                (0..numel).map(|_| dist.sample(&mut rng) as f32).collect()
            }
        };
        let var = Var::from_vec(data, shape, &self.device)?;
        debug_assert_eq!(var.dtype(), DType::F32);
        let tensor = var.as_tensor().clone();
        inner.vars.insert(name, var);
        Ok(tensor)
    }
}

/// A dotted-path view into a [`VarStore`].
#[derive(Debug, Clone)]
pub struct Scope {
    store: VarStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn var(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(full, shape, init)
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }
}
