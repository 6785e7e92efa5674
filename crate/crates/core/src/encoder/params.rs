use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{DrexError, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Named trainable tensors of one model. Names are kept sorted so iteration,
/// checksums and serialization are deterministic.
#[derive(Debug)]
pub struct Params {
    vars: std::sync::Mutex<BTreeMap<String, Var>>,
    dtype: DType,
    device: Device,
}

/// Detached copies of every parameter, for best-epoch restore.
#[derive(Debug, Clone)]
pub struct Snapshot(BTreeMap<String, Tensor>);

impl Params {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: Default::default(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn insert(&self, name: &str, tensor: &Tensor) -> Result<Var> {
        let var = Var::from_tensor(&tensor.to_dtype(self.dtype)?.copy()?)?;
        self.vars.lock().unwrap().insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Existing parameter (shape checked) or a fresh one drawn with `init`.
    pub fn get_or_init<R: Rng>(
        &self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<Var> {
        if let Some(v) = self.vars.lock().unwrap().get(name) {
            if v.dims() != shape {
                return Err(DrexError::Shape(format!(
                    "parameter {name}: expected {shape:?}, found {:?}",
                    v.dims()
                )));
            }
            return Ok(v.clone());
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| normal.sample(rng)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.insert(name, &t)
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().unwrap().get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.lock().unwrap().keys().cloned().collect()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.lock().unwrap().values().cloned().collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.lock().unwrap().values().map(|v| v.elem_count()).sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let map: Vec<(String, Tensor)> = self
            .vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map.into_iter().collect(), path.as_ref())?;
        Ok(())
    }

    /// Load every tensor in a safetensors file as a parameter.
    pub fn load(path: impl AsRef<Path>, dtype: DType) -> Result<Self> {
        let params = Self::new(dtype);
        let tensors = candle_core::safetensors::load(path.as_ref(), &Device::Cpu)?;
        for (name, t) in tensors {
            params.insert(&name, &t)?;
        }
        Ok(params)
    }

    /// Deep copy into independent storage.
    pub fn duplicate(&self) -> Result<Self> {
        let out = Self::new(self.dtype);
        for (name, var) in self.vars.lock().unwrap().iter() {
            out.insert(name, var.as_tensor())?;
        }
        Ok(out)
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        let mut map = BTreeMap::new();
        for (name, var) in self.vars.lock().unwrap().iter() {
            map.insert(name.clone(), var.as_tensor().copy()?);
        }
        Ok(Snapshot(map))
    }

    pub fn restore(&self, snapshot: &Snapshot) -> Result<()> {
        for (name, var) in self.vars.lock().unwrap().iter() {
            let t = snapshot.0.get(name).ok_or_else(|| {
                DrexError::Shape(format!("snapshot lacks parameter {name}"))
            })?;
            var.set(t)?;
        }
        Ok(())
    }

    /// SHA-256 over names and raw little-endian values.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in self.vars.lock().unwrap().iter() {
            hasher.update(name.as_bytes());
            let flat = var.as_tensor().flatten_all()?;
            match flat.dtype() {
                DType::F64 => {
                    for x in flat.to_vec1::<f64>()? {
                        hasher.update(x.to_le_bytes());
                    }
                }
                _ => {
                    for x in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        hasher.update(x.to_le_bytes());
                    }
                }
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_seeded_and_checksummed() {
        let a = Params::new(DType::F32);
        let b = Params::new(DType::F32);
        a.get_or_init("w", &[3, 4], Init::Normal(0.02), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        b.get_or_init("w", &[3, 4], Init::Normal(0.02), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
    }

    #[test]
    fn snapshot_restore_and_duplicate_are_independent() {
        let p = Params::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = p.get_or_init("w", &[2], Init::Ones, &mut rng).unwrap();
        let snap = p.snapshot().unwrap();
        let copy = p.duplicate().unwrap();
        w.set(&Tensor::new(&[5.0f64, 6.0], &Device::Cpu).unwrap()).unwrap();
        assert_eq!(copy.get("w").unwrap().to_vec1::<f64>().unwrap(), vec![1.0, 1.0]);
        p.restore(&snap).unwrap();
        assert_eq!(w.to_vec1::<f64>().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_on_existing_parameter() {
        let p = Params::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        p.get_or_init("w", &[2], Init::Zeros, &mut rng).unwrap();
        assert!(p.get_or_init("w", &[3], Init::Zeros, &mut rng).is_err());
    }
}
