//! Parameter storage shared by every network in the crate.
//!
//! candle's stock `VarMap` initializes from the device RNG, which is not
//! seedable on CPU. [`ParamStore`] wraps a `VarMap` and draws every fresh
//! tensor from an explicit ChaCha stream instead, so a fixed seed always
//! yields bit-identical weights.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{FanInOut, NonLinearity, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Suffixes of buffers that live next to the weights but are never optimized.
const BUFFER_SUFFIXES: [&str; 2] = ["running_mean", "running_var"];

/// A named group of trainable variables with a seeded initializer.
#[derive(Clone)]
pub struct ParamStore {
    map: VarMap,
    rng: Arc<Mutex<ChaCha8Rng>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            map: VarMap::new(),
            rng: Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
            dtype,
            device: device.clone(),
        }
    }

    pub fn var_builder(&self) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), self.dtype, self.device.clone())
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// All variables sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.map.data().lock().expect("param map poisoned");
        let mut out: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Variables that receive gradient updates (normalization buffers excluded).
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.named_vars()
            .into_iter()
            .filter(|(name, _)| !is_buffer(name))
            .collect()
    }

    /// Deep copy of every tensor, detached from the graph.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.named_vars()
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrite every variable from `values`; names and shapes must match exactly.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let vars = self.named_vars();
        if vars.len() != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} tensors, got {}",
                vars.len(),
                values.len()
            )));
        }
        for (name, var) in vars {
            let src = values
                .get(&name)
                .ok_or_else(|| Error::ShapeMismatch(format!("missing tensor {name}")))?;
            if src.dims() != var.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected {:?}, got {:?}",
                    var.dims(),
                    src.dims()
                )));
            }
            var.set(&src.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    pub fn checksum(&self) -> Result<String> {
        checksum(&self.snapshot()?)
    }

    pub fn num_parameters(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }

    fn fresh(&self, shape: &Shape, init: Init) -> Result<Tensor> {
        let n = shape.elem_count();
        let mut rng = self.rng.lock().expect("param rng poisoned");
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Randn { mean, stdev } => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    mean + stdev * z
                })
                .collect(),
            Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..up)).collect(),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let dims = shape.dims();
                let receptive: usize = dims.iter().skip(2).product();
                let fan_n = match fan {
                    FanInOut::FanIn => dims.get(1).copied().unwrap_or(1) * receptive.max(1),
                    FanInOut::FanOut => dims.first().copied().unwrap_or(1) * receptive.max(1),
                } as f64;
                let gain = match non_linearity {
                    NonLinearity::ReLU => 2f64.sqrt(),
                    NonLinearity::Tanh => 5.0 / 3.0,
                    NonLinearity::Linear | NonLinearity::Sigmoid => 1.0,
                    NonLinearity::SELU => 0.75,
                    NonLinearity::ExplicitGain(g) => g,
                };
                let std = gain / fan_n.sqrt();
                match dist {
                    NormalOrUniform::Normal => (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut *rng);
                            std * z
                        })
                        .collect(),
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                }
            }
        };
        Ok(Tensor::from_vec(values, shape.clone(), &self.device)?.to_dtype(self.dtype)?)
    }
}

impl SimpleBackend for ParamStore {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        if let Some(var) = self
            .map
            .data()
            .lock()
            .expect("param map poisoned")
            .get(name)
        {
            if var.shape() != &s {
                candle_core::bail!("shape mismatch for {name}: {:?} vs {s:?}", var.shape());
            }
            return Ok(var.as_tensor().clone());
        }
        let t = self
            .fresh(&s, h)
            .map_err(|e| candle_core::Error::Msg(e.to_string()))?
            .to_dtype(dtype)?
            .to_device(dev)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.map
            .data()
            .lock()
            .expect("param map poisoned")
            .insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(
        &self,
        name: &str,
        _dtype: DType,
        _dev: &Device,
    ) -> candle_core::Result<Tensor> {
        match self
            .map
            .data()
            .lock()
            .expect("param map poisoned")
            .get(name)
        {
            Some(v) => Ok(v.as_tensor().clone()),
            None => candle_core::bail!("no parameter named {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.map
            .data()
            .lock()
            .expect("param map poisoned")
            .contains_key(name)
    }
}

pub fn is_buffer(name: &str) -> bool {
    BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s))
}

/// SHA-256 over names, shapes and little-endian f64 values, in name order.
pub fn checksum(tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update(name.as_bytes());
        for d in t.dims() {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hex(&hasher.finalize()))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Prefix every key, e.g. `conv1.weight` -> `encoder.conv1.weight`.
pub fn prefixed(prefix: &str, tensors: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    tensors
        .iter()
        .map(|(k, v)| (format!("{prefix}.{k}"), v.clone()))
        .collect()
}

/// Inverse of [`prefixed`]; keys without the prefix are dropped.
pub fn strip_prefix(prefix: &str, tensors: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    let p = format!("{prefix}.");
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
        .collect()
}

/// Metadata key under which checkpoints store their JSON header.
pub const METADATA_KEY: &str = "priorseg";

/// Write tensors plus one JSON metadata document as a safetensors file.
pub fn save_safetensors(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    metadata: &serde_json::Value,
) -> Result<()> {
    let mut meta = HashMap::new();
    meta.insert(METADATA_KEY.to_string(), serde_json::to_string(metadata)?);
    let data: Vec<(&str, &Tensor)> = tensors.iter().map(|(k, v)| (k.as_str(), v)).collect();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    safetensors::tensor::serialize_to_file(data, Some(meta), path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Read a file written by [`save_safetensors`].
pub fn load_safetensors(
    path: &Path,
    device: &Device,
) -> Result<(BTreeMap<String, Tensor>, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt_err = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let (_, header) =
        safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(e.to_string()))?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(METADATA_KEY))
        .ok_or_else(|| ckpt_err("missing metadata header".into()))?;
    let meta: serde_json::Value = serde_json::from_str(raw)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    Ok((tensors.into_iter().collect(), meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let build = |seed| {
            let store = ParamStore::new(seed, DType::F32, &Device::Cpu);
            let vb = store.var_builder();
            candle_nn::conv2d(3, 4, 3, Default::default(), vb.pp("c")).unwrap();
            candle_nn::batch_norm(4, 1e-5, vb.pp("bn")).unwrap();
            store.checksum().unwrap()
        };
        assert_eq!(build(3), build(3));
        assert_ne!(build(3), build(4));
    }

    #[test]
    fn buffers_are_not_trainable() {
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        candle_nn::batch_norm(4, 1e-5, store.var_builder().pp("bn")).unwrap();
        let names: Vec<_> = store.trainable().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["bn.bias".to_string(), "bn.weight".to_string()]);
        assert_eq!(store.named_vars().len(), 4);
    }

    #[test]
    fn safetensors_round_trip_keeps_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        let mut ts = BTreeMap::new();
        ts.insert(
            "a".to_string(),
            Tensor::new(&[1f32, 2., 3.], &Device::Cpu).unwrap(),
        );
        let meta = serde_json::json!({"kind": "test", "version": 1});
        save_safetensors(&path, &ts, &meta).unwrap();
        let (back, m) = load_safetensors(&path, &Device::Cpu).unwrap();
        assert_eq!(m, meta);
        assert_eq!(checksum(&back).unwrap(), checksum(&ts).unwrap());
    }
}
