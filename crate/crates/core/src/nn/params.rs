use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// How a freshly created tensor is filled.
#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Ones,
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    /// Explicit values in row-major order.
    Values(Vec<f32>),
}

#[derive(Debug, Clone)]
struct Entry {
    var: Var,
    trainable: bool,
}

/// Named parameter and buffer storage for one network.
///
/// Layers keep cheap `Var` handles into the store; the store owns the names
/// used by optimizers and checkpoints. Buffers (normalization statistics,
/// power-iteration vectors) are updated in place during training forwards.
#[derive(Debug, Clone)]
pub struct ParamStore {
    device: Device,
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new(device: &Device) -> Self {
        Self {
            device: device.clone(),
            entries: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root<'a>(&'a mut self, rng: &'a mut ChaCha8Rng) -> Scope<'a> {
        Scope {
            store: self,
            rng,
            prefix: String::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).map(|e| &e.var)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.clone(), e.var.clone()))
            .collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.var.elem_count())
            .sum()
    }

    /// Detached copies of every parameter and buffer.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.entries
            .iter()
            .map(|(k, e)| Ok((k.clone(), e.var.as_tensor().copy()?.detach())))
            .collect()
    }

    /// Overwrites every entry from `tensors`; names and shapes must match exactly.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter set has {} entries, expected {}",
                tensors.len(),
                self.entries.len()
            )));
        }
        for (name, entry) in &self.entries {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::ShapeMismatch(format!("missing parameter {name}")))?;
            if t.dims() != entry.var.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name}: {:?} vs {:?}",
                    t.dims(),
                    entry.var.dims()
                )));
            }
            entry
                .var
                .set(&t.to_dtype(DType::F32)?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

/// A prefixed view into a [`ParamStore`] used while building a network.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn sub(&mut self, name: impl AsRef<str>) -> Scope<'_> {
        Scope {
            prefix: self.path(name.as_ref()),
            store: self.store,
            rng: self.rng,
        }
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn create(&mut self, name: &str, shape: impl Into<Shape>, init: Init, trainable: bool) -> Result<Var> {
        let shape: Shape = shape.into();
        let n = shape.elem_count();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| (self.rng.sample::<f64, _>(StandardNormal) * std) as f32)
                .collect(),
            Init::Values(v) => {
                if v.len() != n {
                    return Err(Error::ShapeMismatch(format!(
                        "init values for {name}: {} vs {n}",
                        v.len()
                    )));
                }
                v
            }
        };
        let path = self.path(name);
        if self.store.entries.contains_key(&path) {
            return Err(Error::InvalidConfig(format!("duplicate parameter {path}")));
        }
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.store.device)?)?;
        self.store.entries.insert(
            path,
            Entry {
                var: var.clone(),
                trainable,
            },
        );
        Ok(var)
    }

    pub fn param(&mut self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        self.create(name, shape, init, true)
    }

    pub fn buffer(&mut self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        self.create(name, shape, init, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn build(seed: u64) -> ParamStore {
        let mut store = ParamStore::new(&Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut root = store.root(&mut rng);
        let mut a = root.sub("a");
        a.param("w", (3, 4), Init::Normal(1.0)).unwrap();
        a.buffer("stat", 4, Init::Ones).unwrap();
        root.param("b", 2, Init::Zeros).unwrap();
        store
    }

    #[test]
    fn names_and_counts() {
        let store = build(0);
        assert_eq!(store.names().collect::<Vec<_>>(), vec!["a.stat", "a.w", "b"]);
        assert_eq!(store.num_trainable(), 14);
        assert!(!store.is_trainable("a.stat"));
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = build(5).snapshot().unwrap();
        let b = build(5).snapshot().unwrap();
        let c = build(6).snapshot().unwrap();
        let v = |m: &BTreeMap<String, Tensor>| m["a.w"].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v(&a), v(&b));
        assert_ne!(v(&a), v(&c));
    }

    #[test]
    fn load_checks_names_and_shapes() {
        let store = build(1);
        let mut snap = build(2).snapshot().unwrap();
        store.load(&snap).unwrap();
        snap.insert("b".into(), Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap());
        assert!(store.load(&snap).is_err());
        snap.remove("b");
        assert!(store.load(&snap).is_err());
    }
}
