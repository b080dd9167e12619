//! Parameter storage, the few layers the networks need, Adam, and the
//! checkpoint file format.
//!
//! Initialization draws from a seeded ChaCha stream rather than the device
//! RNG so that networks are reproducible from their seed.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
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

    pub fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        if self.vars.insert(name.to_string(), var).is_some() {
            return Err(Error::Precondition(format!("parameter `{name}` registered twice")));
        }
        Ok(handle)
    }

    pub fn uniform<R: Rng>(&mut self, rng: &mut R, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Precondition(format!("no parameter named `{name}`")))
    }

    /// Tensor handle for a parameter: tracked for gradients, or detached.
    pub fn tensor(&self, name: &str, trainable: bool) -> Result<Tensor> {
        let t = self.get(name)?.as_tensor();
        Ok(if trainable { t.clone() } else { t.detach() })
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named_vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Deep copy of the current values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites every parameter from `tensors`; names and shapes must match.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::Precondition(format!("missing parameter `{name}`")))?;
            if src.dims() != var.dims() {
                return Err(Error::shape(format!(
                    "parameter `{name}`: stored {:?} vs model {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        let snap: BTreeMap<&String, Tensor> = self.vars.iter().map(|(k, v)| (k, v.as_tensor().clone())).collect();
        hash_tensors(snap.iter().map(|(k, t)| (k.as_str(), t)))
    }
}

pub fn hash_tensors<'a, I>(tensors: I) -> Result<String>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update(name.as_bytes());
        hasher.update(format!("{:?}{:?}", t.dtype(), t.dims()).as_bytes());
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F64 => {
                for v in flat.to_vec1::<f64>()? {
                    hasher.update(v.to_le_bytes());
                }
            }
            _ => {
                for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

/// He-uniform bound for a layer with the given fan-in.
pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, &self.weight)
    }

    /// Convolution with a substitute kernel (used for normalized weights).
    pub fn forward_with(&self, x: &Tensor, weight: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(weight, self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.elem_count(), 1, 1))?)?,
            None => y,
        })
    }
}

/// Registers `name.weight` (He-uniform) and `name.bias` (zero).
pub fn conv2d<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
) -> Result<()> {
    let fan_in = c_in * kernel * kernel;
    store.uniform(rng, &format!("{name}.weight"), &[c_out, c_in, kernel, kernel], he_bound(fan_in))?;
    store.constant(&format!("{name}.bias"), &[c_out], 0.0)?;
    Ok(())
}

pub fn conv_handle(store: &ParamStore, name: &str, stride: usize, padding: usize, trainable: bool) -> Result<Conv2d> {
    Ok(Conv2d {
        weight: store.tensor(&format!("{name}.weight"), trainable)?,
        bias: Some(store.tensor(&format!("{name}.bias"), trainable)?),
        stride,
        padding,
    })
}

#[derive(Clone, Debug)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = match x.rank() {
            2 => x.matmul(&self.weight.t()?)?,
            _ => x.broadcast_matmul(&self.weight.t()?)?,
        };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

pub fn linear<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_in: usize, d_out: usize) -> Result<()> {
    let bound = 1.0 / (d_in as f64).sqrt();
    store.uniform(rng, &format!("{name}.weight"), &[d_out, d_in], bound)?;
    store.constant(&format!("{name}.bias"), &[d_out], 0.0)?;
    Ok(())
}

pub fn linear_handle(store: &ParamStore, name: &str, trainable: bool) -> Result<Linear> {
    Ok(Linear {
        weight: store.tensor(&format!("{name}.weight"), trainable)?,
        bias: Some(store.tensor(&format!("{name}.bias"), trainable)?),
    })
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::log_softmax(x, D::Minus1)?)
}

/// Adam with bias correction. State is exportable so training can resume
/// bit-for-bit.
#[derive(Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        let params: Vec<(String, Var)> = store.named_vars().map(|(k, v)| (k.clone(), v.clone())).collect();
        let m = params
            .iter()
            .map(|(_, v)| v.zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            params,
            m,
            v,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (_, var)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients can carry the graph of the step that produced them.
            let g = &g.detach();
            let m = ((&self.m[i] * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m / c1)?;
            let v_hat = (&v / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&var.as_tensor().detach().sub(&(update * self.lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }

    pub fn state(&self) -> Result<(usize, BTreeMap<String, Tensor>)> {
        let mut out = BTreeMap::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.insert(format!("adam_m/{name}"), self.m[i].copy()?);
            out.insert(format!("adam_v/{name}"), self.v[i].copy()?);
        }
        Ok((self.step, out))
    }

    pub fn load_state(&mut self, step: usize, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (i, (name, var)) in self.params.iter().enumerate() {
            for (prefix, slot) in [("adam_m", &mut self.m[i]), ("adam_v", &mut self.v[i])] {
                let key = format!("{prefix}/{name}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Precondition(format!("optimizer state lacks `{key}`")))?;
                *slot = t.to_dtype(var.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

const FORMAT: &str = "cfvqa-checkpoint/1";

/// A loaded checkpoint: kind tag, JSON metadata and named tensors.
#[derive(Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn meta_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.meta.clone())?)
    }
}

/// Writes a single self-describing safetensors file. The header carries the
/// kind, JSON metadata and hashes of both; loading re-verifies them.
pub fn save_checkpoint<M: Serialize>(
    path: &Path,
    kind: &str,
    meta: &M,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let meta_json = serde_json::to_string(meta)?;
    let mut info = HashMap::new();
    info.insert("format".to_string(), FORMAT.to_string());
    info.insert("kind".to_string(), kind.to_string());
    info.insert("config_hash".to_string(), hex::encode(Sha256::digest(meta_json.as_bytes())));
    info.insert(
        "weights_hash".to_string(),
        hash_tensors(tensors.iter().map(|(k, t)| (k.as_str(), t)))?,
    );
    info.insert("meta".to_string(), meta_json);
    let contiguous: BTreeMap<&String, Tensor> = tensors
        .iter()
        .map(|(k, t)| Ok((k, t.contiguous()?)))
        .collect::<Result<_>>()?;
    let bytes = safetensors::serialize(contiguous.iter().map(|(k, t)| (k.as_str(), t)), Some(info))
        .map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected_kind: &str) -> Result<Checkpoint> {
    let bad = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let info = header.metadata().clone().ok_or_else(|| bad("missing header metadata".into()))?;
    let field = |k: &str| info.get(k).cloned().ok_or_else(|| bad(format!("missing `{k}`")));
    if field("format")? != FORMAT {
        return Err(bad("unsupported format".into()));
    }
    let kind = field("kind")?;
    if kind != expected_kind {
        return Err(bad(format!("expected a {expected_kind} checkpoint, found {kind}")));
    }
    let meta_json = field("meta")?;
    if hex::encode(Sha256::digest(meta_json.as_bytes())) != field("config_hash")? {
        return Err(bad("config hash mismatch".into()));
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    let sorted: BTreeMap<&String, &Tensor> = tensors.iter().collect();
    if hash_tensors(sorted.iter().map(|(k, t)| (k.as_str(), *t)))? != field("weights_hash")? {
        return Err(bad("weights hash mismatch".into()));
    }
    Ok(Checkpoint {
        kind,
        meta: serde_json::from_str(&meta_json)?,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn seeded_init_is_reproducible() {
        let make = || {
            let mut s = ParamStore::new(DType::F32);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            conv2d(&mut s, &mut rng, "c", 3, 4, 3).unwrap();
            s.hash().unwrap()
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut s = ParamStore::new(DType::F64);
        let x = s.insert("x", vec![3.0, -2.0], &[2]).unwrap();
        let mut opt = Adam::new(&s, 0.1, 0.9, 0.999).unwrap();
        for _ in 0..300 {
            let loss = x.sqr().unwrap().sum_all().unwrap();
            opt.backward_step(&loss).unwrap();
        }
        let v: Vec<f64> = x.to_vec1().unwrap();
        assert!(v.iter().all(|a| a.abs() < 1e-2), "{v:?}");
    }

    #[test]
    fn softplus_is_stable_and_correct() {
        let x = Tensor::new(&[-800.0f64, -1.0, 0.0, 2.0, 800.0], &Device::Cpu).unwrap();
        let y: Vec<f64> = softplus(&x).unwrap().to_vec1().unwrap();
        let want = [0.0, (1.0f64 + (-1.0f64).exp()).ln(), 2f64.ln(), (1.0f64 + 2f64.exp()).ln(), 800.0];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        let mut tensors = BTreeMap::new();
        tensors.insert("a".to_string(), Tensor::new(&[1.0f32, 2.0], &Device::Cpu).unwrap());
        save_checkpoint(&path, "test", &serde_json::json!({"k": 1}), &tensors).unwrap();
        let ck = load_checkpoint(&path, "test").unwrap();
        assert_eq!(ck.meta["k"], 1);
        assert_eq!(ck.tensors["a"].to_vec1::<f32>().unwrap(), vec![1.0, 2.0]);
        assert!(load_checkpoint(&path, "other").is_err());

        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path, "test").unwrap_err();
        assert!(err.to_string().contains("weights hash"), "{err}");
    }
}
