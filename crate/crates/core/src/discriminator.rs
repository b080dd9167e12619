//! Patch discriminator with spectrally normalized kernels.
//!
//! Layout at 64×64: three 3×3 stride-2 convolutions (padding 1, 1, 0) with
//! leaky ReLU, then a 2×2 convolution to one logit per patch — a 6×6 grid
//! whose cells each see a 23×23 pixel window.

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ParamStore};

pub const CHECKPOINT_KIND: &str = "discriminator";
/// Floor for singular-value estimates and vector norms.
pub const SN_EPS: f64 = 1e-12;
const LEAK: f64 = 0.2;

fn normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_all()?.sqrt()?;
    Ok(x.broadcast_div(&(norm + SN_EPS)?)?)
}

/// Spectral normalization of a kernel of any rank, reshaped to
/// `c_out × (c_in·k_h·k_w)`.
///
/// Runs `iters` power-iteration rounds from `u` on the detached matrix,
/// then `v = Wᵀu / ‖Wᵀu‖` and `σ̂ = uᵀ W v`. The returned kernel is
/// `W / max(σ̂, ε)` and keeps the autograd path through `W` (including
/// through `σ̂`); `u`, `v` are constants. Returns `(Ŵ, u′, σ̂)`.
pub fn spectral_normalize(weight: &Tensor, u: &Tensor, iters: usize) -> Result<(Tensor, Tensor, f64)> {
    let c_out = weight.dim(0)?;
    if u.dims() != [c_out] {
        return Err(Error::shape(format!("power vector {:?} for {c_out} rows", u.dims())));
    }
    let w = weight.reshape((c_out, weight.elem_count() / c_out))?;
    let wd = w.detach();
    let mut u = u.detach().unsqueeze(1)?;
    for _ in 0..iters {
        let v = normalize(&wd.t()?.matmul(&u)?)?;
        u = normalize(&wd.matmul(&v)?)?;
    }
    let v = normalize(&wd.t()?.matmul(&u)?)?;
    let sigma = u.t()?.matmul(&w)?.matmul(&v)?.reshape(())?;
    let floor = Tensor::new(SN_EPS, weight.device())?.to_dtype(weight.dtype())?;
    let sigma = sigma.maximum(&floor)?;
    let sigma_value = sigma.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let normalized = weight.broadcast_div(&sigma)?;
    Ok((normalized, u.squeeze(1)?, sigma_value))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub config: DiscriminatorConfig,
    pub image_height: usize,
    pub image_width: usize,
}

/// `(kernel, stride, padding)` per layer, final logit layer included.
const LAYOUT: [(usize, usize, usize); 4] = [(3, 2, 1), (3, 2, 1), (3, 2, 0), (2, 1, 0)];

fn out_size(n: usize, (k, s, p): (usize, usize, usize)) -> Option<usize> {
    (n + 2 * p).checked_sub(k).map(|d| d / s + 1)
}

#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    spec: DiscriminatorSpec,
    store: ParamStore,
    layers: Vec<Conv2d>,
    /// Persistent left singular vector estimate per layer.
    u: Vec<Tensor>,
}

impl PatchDiscriminator {
    pub fn new(spec: DiscriminatorSpec, seed: u64, dtype: DType) -> Result<Self> {
        let ch = &spec.config.channels;
        if ch.len() != 3 {
            return Err(Error::Config("discriminator needs exactly three hidden layers".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let mut c_in = 3;
        for (i, c_out) in ch.iter().copied().chain([1]).enumerate() {
            nn::conv2d(&mut store, &mut rng, &format!("layer.{i}"), c_in, c_out, LAYOUT[i].0)?;
            c_in = c_out;
        }
        let u = ch
            .iter()
            .copied()
            .chain([1])
            .map(|n| {
                let init: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                normalize(&Tensor::from_vec(init, n, store.device())?.to_dtype(dtype)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut d = Self::assemble(spec, store, u)?;
        d.grid()?;
        d.normalized_kernels(d.spec.config.warmup_power_iters)?;
        Ok(d)
    }

    fn assemble(spec: DiscriminatorSpec, store: ParamStore, u: Vec<Tensor>) -> Result<Self> {
        let layers = LAYOUT
            .iter()
            .enumerate()
            .map(|(i, &(_, s, p))| nn::conv_handle(&store, &format!("layer.{i}"), s, p, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, store, layers, u })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn power_vectors(&self) -> &[Tensor] {
        &self.u
    }

    /// Patch-grid size at the configured input size.
    pub fn grid(&self) -> Result<(usize, usize)> {
        let mut hw = (self.spec.image_height, self.spec.image_width);
        for l in LAYOUT {
            hw = match (out_size(hw.0, l), out_size(hw.1, l)) {
                (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
                _ => return Err(Error::Config(format!("input {:?} too small for the discriminator", hw))),
            };
        }
        Ok(hw)
    }

    /// Normalized kernels for every layer. With `iters > 0` the power
    /// vectors advance and are persisted; `iters = 0` reuses them as is.
    pub fn normalized_kernels(&mut self, iters: usize) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.layers.len());
        for (layer, u) in self.layers.iter().zip(self.u.iter_mut()) {
            let (w, u_next, _) = spectral_normalize(&layer.weight, u, iters)?;
            if iters > 0 {
                *u = u_next;
            }
            out.push(w);
        }
        Ok(out)
    }

    /// Current `σ̂` per layer (no state change).
    pub fn sigma_estimates(&self) -> Result<Vec<f64>> {
        self.layers
            .iter()
            .zip(&self.u)
            .map(|(l, u)| Ok(spectral_normalize(&l.weight, u, 0)?.2))
            .collect()
    }

    /// Patch logits `(b, 1, gh, gw)` using the given normalized kernels.
    pub fn forward_with(&self, images: &Tensor, kernels: &[Tensor]) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || (h, w) != (self.spec.image_height, self.spec.image_width) {
            return Err(Error::shape(format!(
                "discriminator input {:?}, expected (_, 3, {}, {})",
                images.dims(),
                self.spec.image_height,
                self.spec.image_width
            )));
        }
        let last = self.layers.len() - 1;
        let mut x = images.clone();
        for (i, (layer, k)) in self.layers.iter().zip(kernels).enumerate() {
            x = layer.forward_with(&x, k)?;
            if i < last {
                x = nn::leaky_relu(&x, LEAK)?;
            }
        }
        Ok(x)
    }

    /// Forward pass with the persisted power vectors, no update.
    pub fn forward(&mut self, images: &Tensor) -> Result<Tensor> {
        let kernels = self.normalized_kernels(0)?;
        self.forward_with(images, &kernels)
    }

    fn tensors(&self) -> Result<std::collections::BTreeMap<String, Tensor>> {
        let mut t = self.store.snapshot()?;
        for (i, u) in self.u.iter().enumerate() {
            t.insert(format!("sn_u.{i}"), u.copy()?);
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        nn::save_checkpoint(path, CHECKPOINT_KIND, &self.spec, &self.tensors()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut ck = nn::load_checkpoint(path, CHECKPOINT_KIND)?;
        let spec: DiscriminatorSpec = ck.meta_as()?;
        let mut u = Vec::new();
        for i in 0..LAYOUT.len() {
            let key = format!("sn_u.{i}");
            u.push(ck.tensors.remove(&key).ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("missing {key}"),
            })?);
        }
        let dtype = u[0].dtype();
        let mut d = Self::new(spec, 0, dtype)?;
        d.store.load(&ck.tensors)?;
        for (slot, t) in d.u.iter_mut().zip(u) {
            if slot.dims() != t.dims() {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    reason: "power vector shape mismatch".into(),
                });
            }
            *slot = t;
        }
        Ok(d)
    }
}
