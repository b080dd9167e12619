use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ensure_dir, JsonlLog};
use crate::config::{AttentionPolicy, Config};
use crate::discriminator::{DiscriminatorSpec, PatchDiscriminator};
use crate::error::{Error, Result};
use crate::generator::{composite_tensor, language_tensor, Generator, GeneratorSpec};
use crate::gradcam::{attention_batch, AttentionMap};
use crate::imaging::{stack_maps_to_tensor, stack_to_tensor, tensor_to_arrays, Image};
use crate::nn::{self, Adam};
use crate::objectives::{
    combine, discriminator_loss, flip_loss, generator_adv_loss, scalar, total_generator_loss, weighted_recon_loss,
    LossWeights,
};
use crate::synth::{splitmix64, Dataset, Sample};
use crate::vqa::{argmax, VqaModel};

pub const GENERATOR_FILE: &str = "generator.safetensors";
pub const DISCRIMINATOR_FILE: &str = "discriminator.safetensors";
pub const CF_LOG_FILE: &str = "train_cf.jsonl";
const STATE_FILE: &str = "state.safetensors";
const STATE_KIND: &str = "cf-state";
const FLIP_WINDOW: usize = 20;
const CHUNK: usize = 64;

#[derive(Clone, Debug, Default)]
pub struct TrainCfOptions {
    /// Final checkpoints, `checkpoints/step-NNNNNN/` and the step log.
    pub out_dir: Option<PathBuf>,
    /// A `checkpoints/step-NNNNNN` directory to continue from.
    pub resume_from: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfStepLog {
    pub step: usize,
    pub d_loss: f64,
    /// Total generator objective.
    pub g_loss: f64,
    pub recon: f64,
    pub flip: f64,
    pub adv_g: f64,
    /// Mean batch flip rate over the last few steps.
    pub flip_rate_running: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfCheckpointState {
    pub step: usize,
    pub generator_adam_steps: usize,
    pub discriminator_adam_steps: usize,
    pub flip_window: Vec<f64>,
    pub config_hash: String,
    pub vqa_hash: String,
}

pub struct CfOutcome {
    pub generator: Generator,
    pub discriminator: PatchDiscriminator,
    pub log: Vec<CfStepLog>,
}

/// Per-sample generator conditioning: the VQA answer on the original image,
/// its attention map and the padded language vector.
#[derive(Clone, Debug)]
pub struct Conditions {
    pub answers: Vec<usize>,
    pub maps: Vec<AttentionMap>,
    /// `(n, |x̄|)`
    pub x_bar: Tensor,
}

pub fn precompute_conditions(vqa: &VqaModel, samples: &[Sample], slices: usize) -> Result<Conditions> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let questions: Vec<&[u32]> = samples.iter().map(|s| s.question.as_slice()).collect();
    conditions_for(vqa, &images, &questions, slices)
}

pub fn conditions_for(vqa: &VqaModel, images: &[&Image], questions: &[&[u32]], slices: usize) -> Result<Conditions> {
    if images.len() != questions.len() {
        return Err(Error::shape(format!("{} images for {} questions", images.len(), questions.len())));
    }
    let (mut answers, mut maps, mut xs) = (Vec::new(), Vec::new(), Vec::new());
    for (images, questions) in images.chunks(CHUNK).zip(questions.chunks(CHUNK)) {
        let (m, a) = attention_batch(vqa, images, questions, None)?;
        let q_bar = vqa.encode_question(questions)?.detach();
        let a_bar = vqa.answer_embeddings(&a)?;
        xs.push(language_tensor(&q_bar, &a_bar, slices)?);
        maps.extend(m);
        answers.extend(a);
    }
    if xs.is_empty() {
        return Err(Error::Dataset("no samples to condition on".into()));
    }
    Ok(Conditions {
        answers,
        maps,
        x_bar: Tensor::cat(&xs, 0)?,
    })
}

fn index_tensor(idx: &[usize], device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(
        idx.iter().map(|&i| i as u32).collect::<Vec<_>>(),
        idx.len(),
        device,
    )?)
}

fn batch_indices(n: usize, b: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(0xcf00 ^ step as u64)));
    rand::seq::index::sample(&mut rng, n, b.min(n)).into_vec()
}

fn step_dir(root: &Path, step: usize) -> PathBuf {
    root.join("checkpoints").join(format!("step-{step:06}"))
}

/// Everything that shapes the trajectory. Run length and checkpoint cadence
/// are excluded so a resumed run may be extended.
fn train_hash(config: &Config) -> String {
    let mut train = config.train.clone();
    train.cf_steps = 0;
    train.checkpoint_every = 0;
    crate::config::hash_json(&(&config.data, &config.generator, &config.discriminator, &train))
}

/// Composited counterfactuals for all samples under the current generator.
fn counterfactuals(g: &Generator, images: &Tensor, maps: &Tensor, x_bar: &Tensor) -> Result<Vec<Image>> {
    let n = images.dim(0)?;
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let len = CHUNK.min(n - start);
        let i = images.narrow(0, start, len)?;
        let m = maps.narrow(0, start, len)?;
        let hat = g.forward(&i, &m, &x_bar.narrow(0, start, len)?)?.detach();
        out.extend(tensor_to_arrays(&composite_tensor(&hat, &i, &m)?)?);
    }
    Ok(out)
}

/// Adversarial training of generator and discriminator against the frozen
/// VQA model on the train split. Each step performs one discriminator
/// update followed by one generator update.
pub fn train_cf(dataset: &Dataset, vqa: &VqaModel, config: &Config, options: &TrainCfOptions) -> Result<CfOutcome> {
    config.validate()?;
    let t = &config.train;
    let samples = &dataset.train;
    if samples.is_empty() {
        return Err(Error::Dataset("train split is empty".into()));
    }
    let vqa_hash = vqa.weights_hash()?;
    let frozen = vqa.frozen()?;
    let (h, w) = (dataset.config.height, dataset.config.width);
    let g_spec = GeneratorSpec::new(config.generator.clone(), (h, w), vqa.question_dim(), vqa.answer_dim())?;
    let d_spec = DiscriminatorSpec {
        config: config.discriminator.clone(),
        image_height: h,
        image_width: w,
    };
    let dtype = DType::F32;
    let device = Device::Cpu;

    let conditions = precompute_conditions(&frozen, samples, g_spec.slices)?;
    let images = stack_to_tensor(samples.iter().map(|s| &s.image), dtype, &device)?;
    let mut maps = stack_maps_to_tensor(conditions.maps.iter().map(|m| m.view()), dtype, &device)?;
    let x_bar = conditions.x_bar.to_dtype(dtype)?;
    let questions: Vec<&[u32]> = samples.iter().map(|s| s.question.as_slice()).collect();

    let mut g = Generator::new(g_spec, splitmix64(t.seed ^ 0x67), dtype)?;
    let mut d = PatchDiscriminator::new(d_spec, splitmix64(t.seed ^ 0x64), dtype)?;
    let mut g_adam = Adam::new(g.params(), t.generator_lr, t.gan_beta1, t.gan_beta2)?;
    let mut d_adam = Adam::new(d.params(), t.discriminator_lr, t.gan_beta1, t.gan_beta2)?;
    let mut window: VecDeque<f64> = VecDeque::new();
    let mut first_step = 1;
    let config_hash = train_hash(config);

    if let Some(dir) = &options.resume_from {
        g = Generator::load(&dir.join(GENERATOR_FILE))?;
        d = PatchDiscriminator::load(&dir.join(DISCRIMINATOR_FILE))?;
        g_adam = Adam::new(g.params(), t.generator_lr, t.gan_beta1, t.gan_beta2)?;
        d_adam = Adam::new(d.params(), t.discriminator_lr, t.gan_beta1, t.gan_beta2)?;
        let path = dir.join(STATE_FILE);
        let ck = nn::load_checkpoint(&path, STATE_KIND)?;
        let state: CfCheckpointState = ck.meta_as()?;
        if state.config_hash != config_hash || state.vqa_hash != vqa_hash {
            return Err(Error::Checkpoint {
                path,
                reason: "checkpoint was produced under a different config or VQA model".into(),
            });
        }
        let strip = |prefix: &str| -> std::collections::HashMap<String, Tensor> {
            ck.tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone())))
                .collect()
        };
        g_adam.load_state(state.generator_adam_steps, &strip("g/"))?;
        d_adam.load_state(state.discriminator_adam_steps, &strip("d/"))?;
        if let Some(m) = ck.tensors.get("maps") {
            maps = m.to_dtype(dtype)?;
        }
        window = state.flip_window.into_iter().collect();
        first_step = state.step + 1;
    }

    let mut log_file = match &options.out_dir {
        Some(dir) => {
            ensure_dir(dir)?;
            Some(JsonlLog::create(&dir.join(CF_LOG_FILE), options.resume_from.is_some())?)
        }
        None => None,
    };
    let weights = LossWeights {
        rec: t.lambda_rec,
        adv: t.lambda_adv,
        flip: t.lambda_flip,
    };
    let n = samples.len();
    let epoch_len = n.div_ceil(t.cf_batch_size);
    let mut log = Vec::new();

    for step in first_step..=t.cf_steps {
        if t.attention_policy == AttentionPolicy::PerEpoch && step > 1 && (step - 1) % epoch_len == 0 {
            let current = counterfactuals(&g, &images, &maps, &x_bar)?;
            let mut fresh = Vec::with_capacity(n);
            for (chunk, range) in current.chunks(CHUNK).zip((0..n).step_by(CHUNK)) {
                let imgs: Vec<&Image> = chunk.iter().collect();
                let end = range + chunk.len();
                let (m, _) = attention_batch(&frozen, &imgs, &questions[range..end], Some(&conditions.answers[range..end]))?;
                fresh.extend(m);
            }
            maps = stack_maps_to_tensor(fresh.iter().map(|m| m.view()), dtype, &device)?;
        }

        let idx = batch_indices(n, t.cf_batch_size, t.seed, step);
        let sel = index_tensor(&idx, &device)?;
        let img = images.index_select(&sel, 0)?;
        let m = maps.index_select(&sel, 0)?;
        let x = x_bar.index_select(&sel, 0)?;
        let qs: Vec<&[u32]> = idx.iter().map(|&i| questions[i]).collect();
        let answers: Vec<usize> = idx.iter().map(|&i| conditions.answers[i]).collect();

        let hat = g.forward(&img, &m, &x)?;
        let cf = composite_tensor(&hat, &img, &m)?;

        let kernels = d.normalized_kernels(config.discriminator.power_iters)?;
        let real = d.forward_with(&img, &kernels)?;
        let fake = d.forward_with(&cf.detach(), &kernels)?;
        let d_loss = discriminator_loss(&real, &fake)?;
        let d_value = scalar(&d_loss)?;
        if !d_value.is_finite() {
            return Err(Error::Divergence {
                step,
                what: "d_loss".into(),
            });
        }
        d_adam.backward_step(&d_loss)?;

        let kernels: Vec<Tensor> = d.normalized_kernels(0)?.iter().map(|k| k.detach()).collect();
        let adv = generator_adv_loss(&d.forward_with(&cf, &kernels)?)?;
        let logits = frozen.forward_batch(&cf, &qs)?.logits;
        let flip = flip_loss(&logits, &answers)?;
        let recon = weighted_recon_loss(&img, &hat, &m)?;
        let breakdown = total_generator_loss(scalar(&recon)?, scalar(&flip)?, scalar(&adv)?, weights, step)?;
        g_adam.backward_step(&combine(&recon, &flip, &adv, &weights)?)?;

        let rows: Vec<Vec<f32>> = logits.detach().to_vec2()?;
        let flipped = rows.iter().zip(&answers).filter(|(r, &a)| argmax(r) != a).count();
        window.push_back(flipped as f64 / answers.len() as f64);
        if window.len() > FLIP_WINDOW {
            window.pop_front();
        }
        let record = CfStepLog {
            step,
            d_loss: d_value,
            g_loss: breakdown.total,
            recon: breakdown.recon,
            flip: breakdown.flip,
            adv_g: breakdown.adv_g,
            flip_rate_running: window.iter().sum::<f64>() / window.len() as f64,
        };
        if step % 50 == 0 || step == 1 {
            info!(
                "cf step {step}: d {:.4} g {:.4} recon {:.5} flip {:.4} adv {:.4} flip-rate {:.3}",
                record.d_loss, record.g_loss, record.recon, record.flip, record.adv_g, record.flip_rate_running
            );
        }
        if let Some(f) = &mut log_file {
            f.write(&record)?;
        }
        log.push(record);

        if let Some(root) = &options.out_dir {
            if t.checkpoint_every > 0 && step % t.checkpoint_every == 0 {
                let dir = step_dir(root, step);
                ensure_dir(&dir)?;
                g.save(&dir.join(GENERATOR_FILE))?;
                d.save(&dir.join(DISCRIMINATOR_FILE))?;
                let (gs, gt) = g_adam.state()?;
                let (ds, dt) = d_adam.state()?;
                let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
                tensors.extend(gt.into_iter().map(|(k, v)| (format!("g/{k}"), v)));
                tensors.extend(dt.into_iter().map(|(k, v)| (format!("d/{k}"), v)));
                if t.attention_policy == AttentionPolicy::PerEpoch {
                    tensors.insert("maps".into(), maps.copy()?);
                }
                let state = CfCheckpointState {
                    step,
                    generator_adam_steps: gs,
                    discriminator_adam_steps: ds,
                    flip_window: window.iter().copied().collect(),
                    config_hash: config_hash.clone(),
                    vqa_hash: vqa_hash.clone(),
                };
                nn::save_checkpoint(&dir.join(STATE_FILE), STATE_KIND, &state, &tensors)?;
            }
        }
    }

    if vqa.weights_hash()? != vqa_hash {
        return Err(Error::Precondition("VQA weights changed during counterfactual training".into()));
    }
    if let Some(dir) = &options.out_dir {
        g.save(&dir.join(GENERATOR_FILE))?;
        d.save(&dir.join(DISCRIMINATOR_FILE))?;
    }
    Ok(CfOutcome {
        generator: g,
        discriminator: d,
        log,
    })
}
