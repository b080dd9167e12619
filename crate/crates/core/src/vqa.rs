//! A small VQA classifier exposing what counterfactual generation needs:
//! the final convolutional activations, the pooled question embedding, and
//! the classifier weight row of any answer.
//!
//! Architecture: 3×3 convolutions with per-sample instance normalization
//! and ReLU; the last one (the designated Grad-CAM layer `φ`, `K × u × v`)
//! also sees the input average-pooled to its grid, so absolute color
//! survives the normalization. Questions are mean-pooled token embeddings
//! `q̄`. Fusion: multi-head scaled dot-product attention over the grid
//! cells, with keys from `φ`, queries from `q̄`, and values that add a
//! projection of the cell's mean input color to a projection of `φ`; the
//! attended vector is multiplied elementwise by a `tanh` gate of `q̄`. One
//! hidden layer and a linear classifier with bias follow. The answer embedding `ā` is the
//! classifier weight row, bias excluded.

use std::path::Path;

use candle_core::{DType, Device, IndexOp, Tensor, Var, D};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Fusion, VqaConfig};
use crate::error::{Error, Result};
use crate::imaging::{stack_to_tensor, tensor_to_arrays, Image};
use crate::nn::{self, Conv2d, Linear, ParamStore};
use crate::synth::{AnswerSpace, Vocabulary};

pub const CHECKPOINT_KIND: &str = "vqa";

/// Everything needed to rebuild the network around stored weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaSpec {
    pub config: VqaConfig,
    pub vocab: Vocabulary,
    pub answers: AnswerSpace,
    pub image_height: usize,
    pub image_width: usize,
}

#[derive(Clone, Debug)]
pub struct VqaOutput {
    pub logits: Vec<f32>,
    pub predicted: usize,
    pub probabilities: Vec<f32>,
    pub q_bar: Vec<f32>,
    pub a_bar: Vec<f32>,
    /// Designated layer activations, `K × u × v`.
    pub conv_activations: Array3<f32>,
}

/// Batched forward result, still on the autograd graph.
#[derive(Debug)]
pub struct BatchOutput {
    pub logits: Tensor,
    /// Mean input color per grid cell, `(b, 3, u, v)`.
    pub color: Tensor,
    pub q_bar: Tensor,
    pub activations: Tensor,
}

#[derive(Debug)]
pub struct Introspection {
    pub activations: Vec<Array3<f32>>,
    pub gradients: Vec<Array3<f32>>,
    /// Answer whose logit was differentiated, per sample.
    pub targets: Vec<usize>,
    pub predicted: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct VqaModel {
    spec: VqaSpec,
    store: ParamStore,
    encoder: Vec<Conv2d>,
    embedding: Tensor,
    image_proj: Conv2d,
    question_proj: Linear,
    color_proj: Conv2d,
    key: Conv2d,
    query: Linear,
    hidden: Linear,
    classifier: Linear,
}

/// `x` average-pooled to the spatial size of `like`.
fn cell_means(x: &Tensor, like: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (_, _, u, v) = like.dims4()?;
    Ok(x.avg_pool2d((h / u, w / v))?)
}

/// Per-sample, per-channel normalization over the spatial axes.
fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let centered = flat.broadcast_sub(&flat.mean_keepdim(2)?)?;
    let var = centered.sqr()?.mean_keepdim(2)?;
    Ok(centered.broadcast_div(&(var + INSTANCE_NORM_EPS)?.sqrt()?)?.reshape((b, c, h, w))?)
}

const INSTANCE_NORM_EPS: f64 = 1e-5;

fn grid_size(config: &VqaConfig, h: usize, w: usize) -> (usize, usize) {
    config
        .conv_strides
        .iter()
        .fold((h, w), |(h, w), &s| ((h - 1) / s + 1, (w - 1) / s + 1))
}

impl VqaModel {
    pub fn new(spec: VqaSpec, seed: u64, dtype: DType) -> Result<Self> {
        let c = &spec.config;
        if c.conv_channels.len() != c.conv_strides.len() || c.conv_channels.is_empty() {
            return Err(Error::Config("vqa conv layout is inconsistent".into()));
        }
        let total: usize = c.conv_strides.iter().product();
        if !spec.image_height.is_multiple_of(total) || !spec.image_width.is_multiple_of(total) {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by the encoder stride {total}",
                spec.image_height, spec.image_width
            )));
        }
        if c.attention_heads == 0 || !c.fused_dim.is_multiple_of(c.attention_heads) {
            return Err(Error::Config("vqa.fused_dim must be a multiple of vqa.attention_heads".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let mut c_in = 3;
        let last = c.conv_channels.len() - 1;
        for (i, &c_out) in c.conv_channels.iter().enumerate() {
            let skip = if i == last { 3 } else { 0 };
            nn::conv2d(&mut store, &mut rng, &format!("encoder.{i}"), c_in + skip, c_out, 3)?;
            c_in = c_out;
        }
        let k = c_in;
        let vocab = spec.vocab.len();
        store.uniform(&mut rng, "question.embedding", &[vocab, c.question_dim], 1.0)?;
        nn::conv2d(&mut store, &mut rng, "fusion.image", k, c.fused_dim, 1)?;
        nn::linear(&mut store, &mut rng, "fusion.question", c.question_dim, c.fused_dim)?;
        nn::conv2d(&mut store, &mut rng, "fusion.color", 3, c.fused_dim, 1)?;
        nn::conv2d(&mut store, &mut rng, "fusion.key", k, c.fused_dim, 1)?;
        nn::linear(&mut store, &mut rng, "fusion.query", c.question_dim, c.fused_dim)?;
        nn::linear(&mut store, &mut rng, "fusion.hidden", c.fused_dim, c.fused_dim)?;
        nn::linear(&mut store, &mut rng, "classifier", c.fused_dim, spec.answers.len())?;
        Self::assemble(spec, store, true)
    }

    fn assemble(spec: VqaSpec, store: ParamStore, trainable: bool) -> Result<Self> {
        let encoder = spec
            .config
            .conv_strides
            .iter()
            .enumerate()
            .map(|(i, &s)| nn::conv_handle(&store, &format!("encoder.{i}"), s, 1, trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embedding: store.tensor("question.embedding", trainable)?,
            image_proj: nn::conv_handle(&store, "fusion.image", 1, 0, trainable)?,
            question_proj: nn::linear_handle(&store, "fusion.question", trainable)?,
            color_proj: nn::conv_handle(&store, "fusion.color", 1, 0, trainable)?,
            key: nn::conv_handle(&store, "fusion.key", 1, 0, trainable)?,
            query: nn::linear_handle(&store, "fusion.query", trainable)?,
            hidden: nn::linear_handle(&store, "fusion.hidden", trainable)?,
            classifier: nn::linear_handle(&store, "classifier", trainable)?,
            encoder,
            spec,
            store,
        })
    }

    /// A view whose weights are constants on the autograd graph. Storage is
    /// shared with `self`.
    pub fn frozen(&self) -> Result<Self> {
        Self::assemble(self.spec.clone(), self.store.clone(), false)
    }

    pub fn spec(&self) -> &VqaSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn num_answers(&self) -> usize {
        self.spec.answers.len()
    }

    /// `(K, u, v)` of the designated layer at the configured image size.
    pub fn activation_shape(&self) -> (usize, usize, usize) {
        let (u, v) = grid_size(&self.spec.config, self.spec.image_height, self.spec.image_width);
        (*self.spec.config.conv_channels.last().unwrap(), u, v)
    }

    pub fn question_dim(&self) -> usize {
        self.spec.config.question_dim
    }

    /// Classifier input dimension, i.e. `|ā|`.
    pub fn answer_dim(&self) -> usize {
        self.spec.config.fused_dim
    }

    /// `(b, 3, h, w)` in `[0, 1]` → `φ`, `(b, K, u, v)`. Pixels are mapped
    /// to `[-1, 1]` first.
    pub fn encode_image(&self, images: &Tensor) -> Result<Tensor> {
        let raw = images.affine(2.0, -1.0)?;
        let (last, body) = self.encoder.split_last().expect("nonempty encoder");
        let mut x = raw.clone();
        for conv in body {
            x = instance_norm(&conv.forward(&x)?)?.relu()?;
        }
        let color = cell_means(&raw, &x)?;
        Ok(last.forward(&Tensor::cat(&[&x, &color], 1)?)?.relu()?)
    }

    /// Mean color of each `φ` grid cell in `[-1, 1]`, `(b, 3, u, v)`.
    pub fn local_color(&self, images: &Tensor) -> Result<Tensor> {
        let (_, u, v) = self.activation_shape();
        let (_, _, h, w) = images.dims4()?;
        Ok(images.affine(2.0, -1.0)?.avg_pool2d((h / u, w / v))?)
    }

    /// Mean of token embeddings over each question; `(b, D_q)`.
    pub fn encode_question(&self, questions: &[&[u32]]) -> Result<Tensor> {
        for q in questions {
            self.spec.vocab.check(q)?;
            if q.is_empty() {
                return Err(Error::Precondition("empty question".into()));
            }
        }
        let b = questions.len();
        let len = questions.iter().map(|q| q.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(b * len);
        let mut weights = Vec::with_capacity(b * len);
        for q in questions {
            let inv = 1.0 / q.len() as f64;
            for i in 0..len {
                ids.push(q.get(i).copied().unwrap_or(0));
                weights.push(if i < q.len() { inv } else { 0.0 });
            }
        }
        let device = self.store.device();
        let ids = Tensor::from_vec(ids, b * len, device)?;
        let weights = Tensor::from_vec(weights, (b, len, 1), device)?.to_dtype(self.dtype())?;
        let dq = self.question_dim();
        let emb = self.embedding.index_select(&ids, 0)?.reshape((b, len, dq))?;
        Ok(emb.broadcast_mul(&weights)?.sum(1)?)
    }

    /// Logits from designated-layer activations, cell colors (see
    /// [`Self::local_color`]) and question embeddings.
    pub fn head(&self, activations: &Tensor, color: &Tensor, q_bar: &Tensor) -> Result<Tensor> {
        let gate = self.question_proj.forward(q_bar)?.tanh()?;
        let pooled = match self.spec.config.fusion {
            Fusion::QuestionOnly => gate,
            Fusion::Product => {
                let (b, _, u, v) = activations.dims4()?;
                let d = self.spec.config.fused_dim;
                let heads = self.spec.config.attention_heads;
                let dh = d / heads;
                // (b, d, u, v) → (b, heads, u·v, dh)
                let split = |t: Tensor| -> Result<Tensor> {
                    Ok(t.reshape((b, heads, dh, u * v))?.transpose(2, 3)?.contiguous()?)
                };
                let values = split((self.image_proj.forward(activations)?.relu()? + self.color_proj.forward(color)?)?)?;
                let keys = split(self.key.forward(activations)?)?;
                let query = self.query.forward(q_bar)?.reshape((b, heads, dh, 1))?;
                let scores = (keys.matmul(&query)? / (dh as f64).sqrt())?;
                let weights = candle_nn::ops::softmax(&scores, 2)?;
                let attended = values.broadcast_mul(&weights)?.sum(2)?.reshape((b, d))?;
                attended.mul(&gate)?
            }
        };
        let hidden = self.hidden.forward(&pooled)?.relu()?;
        self.classifier.forward(&hidden)
    }

    pub fn images_tensor(&self, images: &[&Image]) -> Result<Tensor> {
        for img in images {
            let (c, h, w) = img.dim();
            if c != 3 || h != self.spec.image_height || w != self.spec.image_width {
                return Err(Error::shape(format!(
                    "image {:?}, model expects (3, {}, {})",
                    img.dim(),
                    self.spec.image_height,
                    self.spec.image_width
                )));
            }
        }
        stack_to_tensor(images.iter().copied(), self.dtype(), self.store.device())
    }

    pub fn forward_batch(&self, images: &Tensor, questions: &[&[u32]]) -> Result<BatchOutput> {
        let activations = self.encode_image(images)?;
        let color = self.local_color(images)?;
        let q_bar = self.encode_question(questions)?;
        let logits = self.head(&activations, &color, &q_bar)?;
        Ok(BatchOutput {
            logits,
            color,
            q_bar,
            activations,
        })
    }

    /// Full single-sample output including `q̄`, `ā` and `φ`.
    pub fn forward_one(&self, image: &Image, question: &[u32]) -> Result<VqaOutput> {
        let x = self.images_tensor(&[image])?;
        let out = self.forward_batch(&x, &[question])?;
        let logits: Vec<f32> = out.logits.i(0)?.to_dtype(DType::F32)?.to_vec1()?;
        let probabilities: Vec<f32> = nn::softmax_last(&out.logits.i(0)?.to_dtype(DType::F64)?)?
            .to_dtype(DType::F32)?
            .to_vec1()?;
        let predicted = argmax(&logits);
        let q_bar = out.q_bar.i(0)?.to_dtype(DType::F32)?.to_vec1()?;
        let conv_activations = tensor_to_arrays(&out.activations)?.remove(0);
        Ok(VqaOutput {
            a_bar: self.answer_embedding(predicted)?,
            logits,
            predicted,
            probabilities,
            q_bar,
            conv_activations,
        })
    }

    /// Classifier weight row for `answer`, copied out of the model.
    pub fn answer_embedding(&self, answer: usize) -> Result<Vec<f32>> {
        self.check_answer(answer)?;
        Ok(self
            .classifier
            .weight
            .i(answer)?
            .detach()
            .to_dtype(DType::F32)?
            .to_vec1()?)
    }

    /// Rows of the classifier for a batch of answers; `(b, |ā|)`, detached.
    pub fn answer_embeddings(&self, answers: &[usize]) -> Result<Tensor> {
        for &a in answers {
            self.check_answer(a)?;
        }
        let idx = Tensor::from_vec(
            answers.iter().map(|&a| a as u32).collect::<Vec<_>>(),
            answers.len(),
            self.store.device(),
        )?;
        Ok(self.classifier.weight.detach().index_select(&idx, 0)?)
    }

    fn check_answer(&self, answer: usize) -> Result<()> {
        if answer >= self.num_answers() {
            return Err(Error::AnswerOutOfRange {
                index: answer,
                size: self.num_answers(),
            });
        }
        Ok(())
    }

    /// `∂ logit[answer] / ∂ φ`, shape `K × u × v`.
    pub fn logit_gradient(&self, image: &Image, question: &[u32], answer: usize) -> Result<Array3<f32>> {
        let intro = self.introspect_batch(&[image], &[question], Some(&[answer]))?;
        Ok(intro.gradients.into_iter().next().expect("one sample"))
    }

    /// Activations and logit gradients for a batch. Samples do not interact,
    /// so differentiating the sum of the chosen logits yields every
    /// per-sample gradient at once.
    pub fn introspect_batch(
        &self,
        images: &[&Image],
        questions: &[&[u32]],
        answers: Option<&[usize]>,
    ) -> Result<Introspection> {
        if images.len() != questions.len() || answers.is_some_and(|a| a.len() != images.len()) {
            return Err(Error::shape("batch lengths differ"));
        }
        let x = self.images_tensor(images)?;
        let phi = self.encode_image(&x)?.detach();
        let leaf = Var::from_tensor(&phi)?;
        let q_bar = self.encode_question(questions)?.detach();
        let color = self.local_color(&x)?;
        let logits = self.head(leaf.as_tensor(), &color, &q_bar)?;
        let rows: Vec<Vec<f32>> = logits.to_dtype(DType::F32)?.to_vec2()?;
        let predicted: Vec<usize> = rows.iter().map(|r| argmax(r)).collect();
        let targets = match answers {
            Some(a) => {
                for &t in a {
                    self.check_answer(t)?;
                }
                a.to_vec()
            }
            None => predicted.clone(),
        };
        let idx = Tensor::from_vec(
            targets.iter().map(|&t| t as u32).collect::<Vec<_>>(),
            (targets.len(), 1),
            self.store.device(),
        )?;
        let chosen = logits.gather(&idx, 1)?.sum_all()?;
        let grads = chosen.backward()?;
        let grad = match grads.get(leaf.as_tensor()) {
            Some(g) => g.clone(),
            None => leaf.as_tensor().zeros_like()?,
        };
        Ok(Introspection {
            activations: tensor_to_arrays(&phi)?,
            gradients: tensor_to_arrays(&grad)?,
            targets,
            predicted,
        })
    }

    /// Predicted answers and probabilities for a batch, without gradients.
    pub fn predict(&self, images: &[&Image], questions: &[&[u32]]) -> Result<(Vec<usize>, Vec<Vec<f32>>)> {
        let x = self.images_tensor(images)?;
        let out = self.forward_batch(&x, questions)?;
        let probs: Vec<Vec<f32>> = nn::softmax_last(&out.logits.detach().to_dtype(DType::F64)?)?
            .to_dtype(DType::F32)?
            .to_vec2()?;
        Ok((probs.iter().map(|p| argmax(p)).collect(), probs))
    }

    /// Mean cross-entropy with label smoothing.
    pub fn loss(&self, logits: &Tensor, answers: &[usize], smoothing: f64) -> Result<Tensor> {
        let (b, n) = logits.dims2()?;
        let off = smoothing / n as f64;
        let mut target = vec![off; b * n];
        for (i, &a) in answers.iter().enumerate() {
            self.check_answer(a)?;
            target[i * n + a] += 1.0 - smoothing;
        }
        let target = Tensor::from_vec(target, (b, n), self.store.device())?.to_dtype(logits.dtype())?;
        let lsm = nn::log_softmax_last(logits)?;
        Ok((lsm * target)?.sum(D::Minus1)?.neg()?.mean_all()?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        nn::save_checkpoint(path, CHECKPOINT_KIND, &self.spec, &self.store.snapshot()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = nn::load_checkpoint(path, CHECKPOINT_KIND)?;
        let spec: VqaSpec = ck.meta_as()?;
        let dtype = ck
            .tensors
            .values()
            .next()
            .map(|t| t.dtype())
            .unwrap_or(DType::F32);
        let model = Self::new(spec, 0, dtype)?;
        model.store.load(&ck.tensors)?;
        Ok(model)
    }

    pub fn weights_hash(&self) -> Result<String> {
        self.store.hash()
    }
}

pub fn argmax(xs: &[f32]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

pub fn default_device() -> Device {
    Device::Cpu
}
