//! Language-conditioned encoder–decoder.
//!
//! The input `[I; M]` passes through `depth` stride-2 convolutions producing
//! `F_0 … F_{depth-1}`. The language vector `x̄ = [q̄; ā]` (zero-padded to a
//! multiple of `m`) is split into `m` slices; slice `j` is mapped by a linear
//! transform to a `C_j × C_j` kernel `K_j`, and `G_j = K_j ⋆ F_j` is a 1×1
//! convolution with that per-sample kernel. The decoder upsamples from the
//! deepest `G`, concatenating the conditioned skips, and a final 3×3 head
//! sees `[U_0; I; M]` and squashes to `[0, 1]`.

use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::GeneratorConfig;
use crate::error::{Error, Result};
use crate::gradcam::AttentionMap;
use crate::imaging::{stack_maps_to_tensor, stack_to_tensor, tensor_to_arrays, Image};
use crate::nn::{self, Conv2d, Linear, ParamStore};

pub const CHECKPOINT_KIND: &str = "generator";
const LEAK: f64 = 0.2;

/// `x̄ = [q̄; ā]`, zero-padded so its length is divisible by `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageEmbedding {
    pub x_bar: Vec<f32>,
    pub m: usize,
    /// Length before padding, `|q̄| + |ā|`.
    pub unpadded_len: usize,
}

impl LanguageEmbedding {
    pub fn slice_len(&self) -> usize {
        self.x_bar.len() / self.m
    }

    pub fn slices(&self) -> Vec<&[f32]> {
        self.x_bar.chunks(self.slice_len()).collect()
    }
}

pub fn padded_len(unpadded: usize, m: usize) -> usize {
    unpadded.div_ceil(m) * m
}

pub fn build_language_embedding(q_bar: &[f32], a_bar: &[f32], m: usize) -> Result<LanguageEmbedding> {
    if m == 0 {
        return Err(Error::Precondition("m must be positive".into()));
    }
    if q_bar.iter().chain(a_bar).any(|v| !v.is_finite()) {
        return Err(Error::Precondition("language vectors must be finite".into()));
    }
    let unpadded_len = q_bar.len() + a_bar.len();
    let mut x_bar = Vec::with_capacity(padded_len(unpadded_len, m));
    x_bar.extend_from_slice(q_bar);
    x_bar.extend_from_slice(a_bar);
    x_bar.resize(padded_len(unpadded_len, m), 0.0);
    Ok(LanguageEmbedding { x_bar, m, unpadded_len })
}

/// Batched `[q̄; ā]` with the same zero padding; `(b, padded_len)`.
pub fn language_tensor(q_bar: &Tensor, a_bar: &Tensor, m: usize) -> Result<Tensor> {
    let x = Tensor::cat(&[q_bar, a_bar], 1)?;
    let (b, n) = x.dims2()?;
    let pad = padded_len(n, m) - n;
    if pad == 0 {
        return Ok(x);
    }
    let zeros = Tensor::zeros((b, pad), x.dtype(), x.device())?;
    Ok(Tensor::cat(&[&x, &zeros], 1)?)
}

/// `G = K ⋆ F` for per-sample 1×1 kernels: `F` is `(b, C, h, w)`, `K` is
/// `(b, C, C)` (output channel first).
pub fn condition_features(features: &Tensor, kernels: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = features.dims4()?;
    if kernels.dims() != [b, c, c] {
        return Err(Error::shape(format!(
            "kernel {:?} for features with {c} channels and batch {b}",
            kernels.dims()
        )));
    }
    let flat = features.reshape((b, c, h * w))?;
    Ok(kernels.matmul(&flat)?.reshape((b, c, h, w))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub config: GeneratorConfig,
    pub image_height: usize,
    pub image_width: usize,
    pub question_dim: usize,
    pub answer_dim: usize,
    pub slices: usize,
    /// `|x̄|` after zero padding.
    pub language_len: usize,
}

impl GeneratorSpec {
    pub fn new(config: GeneratorConfig, image: (usize, usize), question_dim: usize, answer_dim: usize) -> Result<Self> {
        let depth = config.channels.len();
        if depth == 0 {
            return Err(Error::Config("generator needs at least one level".into()));
        }
        let slices = config.language_slices.unwrap_or(depth);
        if slices == 0 || slices > depth {
            return Err(Error::Config(format!("{slices} language slices for depth {depth}")));
        }
        let scale = 1 << depth;
        if !image.0.is_multiple_of(scale) || !image.1.is_multiple_of(scale) {
            return Err(Error::Config(format!("image {image:?} not divisible by 2^{depth}")));
        }
        Ok(Self {
            language_len: padded_len(question_dim + answer_dim, slices),
            config,
            image_height: image.0,
            image_width: image.1,
            question_dim,
            answer_dim,
            slices,
        })
    }

    pub fn slice_len(&self) -> usize {
        self.language_len / self.slices
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    spec: GeneratorSpec,
    store: ParamStore,
    encoder: Vec<Conv2d>,
    language: Vec<Linear>,
    decoder: Vec<Conv2d>,
    head: Conv2d,
}

impl Generator {
    pub fn new(spec: GeneratorSpec, seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let ch = &spec.config.channels;
        let depth = ch.len();
        let mut c_in = 4;
        for (j, &c) in ch.iter().enumerate() {
            nn::conv2d(&mut store, &mut rng, &format!("encoder.{j}"), c_in, c, 3)?;
            c_in = c;
        }
        let s = spec.slice_len();
        for (j, &c) in ch.iter().enumerate().take(spec.slices) {
            // Near-identity at init: W small, bias = vec(I).
            let bound = 1.0 / ((s * c) as f64).sqrt();
            store.uniform(&mut rng, &format!("language.{j}.weight"), &[c * c, s], bound)?;
            let eye = (0..c * c).map(|i| if i / c == i % c { 1.0 } else { 0.0 }).collect();
            store.insert(&format!("language.{j}.bias"), eye, &[c * c])?;
        }
        for j in (0..depth).rev() {
            let c_in = if j == depth - 1 { ch[j] } else { 2 * ch[j] };
            let c_out = if j == 0 { ch[0] } else { ch[j - 1] };
            nn::conv2d(&mut store, &mut rng, &format!("decoder.{j}"), c_in, c_out, 3)?;
        }
        nn::conv2d(&mut store, &mut rng, "head", ch[0] + 4, 3, 3)?;
        Self::assemble(spec, store)
    }

    fn assemble(spec: GeneratorSpec, store: ParamStore) -> Result<Self> {
        let depth = spec.config.channels.len();
        let encoder = (0..depth)
            .map(|j| nn::conv_handle(&store, &format!("encoder.{j}"), 2, 1, true))
            .collect::<Result<Vec<_>>>()?;
        let language = (0..spec.slices)
            .map(|j| nn::linear_handle(&store, &format!("language.{j}"), true))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..depth)
            .map(|j| nn::conv_handle(&store, &format!("decoder.{j}"), 1, 1, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            head: nn::conv_handle(&store, "head", 1, 1, true)?,
            encoder,
            language,
            decoder,
            spec,
            store,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Per-sample kernels `K_j`, `(b, C_j, C_j)`, for the conditioned level `j`.
    pub fn language_kernels(&self, x_bar: &Tensor, level: usize) -> Result<Tensor> {
        let (b, n) = x_bar.dims2()?;
        if n != self.spec.language_len {
            return Err(Error::shape(format!("|x̄| = {n}, expected {}", self.spec.language_len)));
        }
        let s = self.spec.slice_len();
        let c = self.spec.config.channels[level];
        let slice = x_bar.narrow(1, level * s, s)?;
        Ok(self.language[level].forward(&slice)?.reshape((b, c, c))?)
    }

    /// Raw generator output `Î`, `(b, 3, h, w)` in `[0, 1]`.
    pub fn forward(&self, images: &Tensor, maps: &Tensor, x_bar: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = images.dims4()?;
        if c != 3 || (h, w) != (self.spec.image_height, self.spec.image_width) {
            return Err(Error::shape(format!("generator input {:?}", images.dims())));
        }
        if maps.dims() != [b, 1, h, w] {
            return Err(Error::shape(format!("attention {:?} for images {:?}", maps.dims(), images.dims())));
        }
        let input = Tensor::cat(&[images, maps], 1)?;
        let mut x = input.clone();
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (j, conv) in self.encoder.iter().enumerate() {
            x = nn::leaky_relu(&conv.forward(&x)?, LEAK)?;
            let g = if j < self.spec.slices {
                condition_features(&x, &self.language_kernels(x_bar, j)?)?
            } else {
                x.clone()
            };
            skips.push(g);
        }
        let depth = skips.len();
        let mut y = skips[depth - 1].clone();
        for j in (0..depth).rev() {
            let (_, _, yh, yw) = y.dims4()?;
            let up = y.upsample_nearest2d(2 * yh, 2 * yw)?;
            y = nn::leaky_relu(&self.decoder[j].forward(&up)?, LEAK)?;
            if j > 0 {
                y = Tensor::cat(&[&y, &skips[j - 1]], 1)?;
            }
        }
        let out = self.head.forward(&Tensor::cat(&[&y, &input], 1)?)?;
        // sigmoid(x) = (tanh(x/2) + 1) / 2, stable at both tails.
        Ok((((out * 0.5)?.tanh()? + 1.0)? * 0.5)?)
    }

    /// Single-sample convenience wrapper.
    pub fn generate(&self, image: &Image, map: &AttentionMap, x: &LanguageEmbedding) -> Result<Image> {
        if (1, image.dim().1, image.dim().2) != map.dims() {
            return Err(Error::shape(format!("image {:?} vs attention {:?}", image.dim(), map.dims())));
        }
        if x.x_bar.len() != self.spec.language_len || x.m != self.spec.slices {
            return Err(Error::shape(format!(
                "language embedding of length {} with m = {}, generator expects {} with m = {}",
                x.x_bar.len(),
                x.m,
                self.spec.language_len,
                self.spec.slices
            )));
        }
        let dev = self.store.device();
        let images = stack_to_tensor([image], self.dtype(), dev)?;
        let maps = stack_maps_to_tensor([map.view()], self.dtype(), dev)?;
        let x_bar = Tensor::from_slice(&x.x_bar, (1, x.x_bar.len()), dev)?.to_dtype(self.dtype())?;
        Ok(tensor_to_arrays(&self.forward(&images, &maps, &x_bar)?)?.remove(0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        nn::save_checkpoint(path, CHECKPOINT_KIND, &self.spec, &self.store.snapshot()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = nn::load_checkpoint(path, CHECKPOINT_KIND)?;
        let spec: GeneratorSpec = ck.meta_as()?;
        let dtype = ck.tensors.values().next().map(|t| t.dtype()).unwrap_or(DType::F32);
        let g = Self::new(spec, 0, dtype)?;
        g.store.load(&ck.tensors)?;
        Ok(g)
    }
}

/// `I′ = M ⊙ Î + (1 − M) ⊙ I`, with `M` broadcast over channels.
pub fn composite(generated: &Image, image: &Image, map: &AttentionMap) -> Result<Image> {
    let (c, h, w) = image.dim();
    if generated.dim() != image.dim() || map.dims() != (1, h, w) {
        return Err(Error::shape(format!(
            "composite of {:?}, {:?} and attention {:?}",
            generated.dim(),
            image.dim(),
            map.dims()
        )));
    }
    let m = map.values();
    Ok(Array3::from_shape_fn((c, h, w), |(k, y, x)| {
        let a = m[[y, x]];
        a * generated[[k, y, x]] + (1.0 - a) * image[[k, y, x]]
    }))
}

/// Batched compositing on the autograd graph; `maps` is `(b, 1, h, w)`.
pub fn composite_tensor(generated: &Tensor, images: &Tensor, maps: &Tensor) -> Result<Tensor> {
    if generated.dims() != images.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", generated.dims(), images.dims())));
    }
    let keep = maps.affine(-1.0, 1.0)?;
    Ok((generated.broadcast_mul(maps)? + images.broadcast_mul(&keep)?)?)
}
