use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

/// Named trainable tensors.
///
/// Initial values are drawn from a stream keyed on `(seed, name)`, so a
/// parameter's starting point does not depend on construction order. Names
/// are dotted paths; the first segment names the parameter block a tensor is
/// checkpointed under.
#[derive(Clone, Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    seed: u64,
    dtype: DType,
    device: Device,
}

pub(crate) fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore { vars: BTreeMap::new(), seed, dtype, device: Device::Cpu }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Returns the parameter `name`, creating it with `init` if absent.
    /// An existing parameter must have exactly `shape`.
    pub fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, model expects {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.clone());
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(bound) => {
                let d = Uniform::new_inclusive(-bound, bound).expect("bound");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("std");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Stores a tensor under `name`, replacing any existing parameter.
    pub fn insert(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        let t = tensor.to_dtype(self.dtype)?;
        self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Variables whose name starts with any of `prefixes`.
    pub fn vars_with_prefixes(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Detached copies of every tensor, grouped by block (first name segment).
    pub fn blocks(&self) -> BTreeMap<String, BTreeMap<String, Tensor>> {
        let mut out: BTreeMap<String, BTreeMap<String, Tensor>> = BTreeMap::new();
        for (name, v) in &self.vars {
            let block = name.split('.').next().unwrap_or(name).to_string();
            out.entry(block).or_default().insert(name.clone(), v.as_tensor().detach());
        }
        out
    }

    /// Raw bit patterns of every value under `prefix`, for exact comparisons.
    pub fn fingerprint(&self, prefix: &str) -> Result<BTreeMap<String, Vec<u64>>> {
        let mut out = BTreeMap::new();
        for (name, v) in self.vars.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let flat = v.as_tensor().flatten_all()?;
            let bits = match flat.dtype() {
                DType::F64 => flat.to_vec1::<f64>()?.into_iter().map(f64::to_bits).collect(),
                _ => flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.into_iter().map(|x| x.to_bits() as u64).collect(),
            };
            out.insert(name.clone(), bits);
        }
        Ok(out)
    }
}
