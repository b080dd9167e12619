use std::path::PathBuf;

use candle_core::DType;
use log::info;
use serde::{Deserialize, Serialize};

use super::{ensure_dir, permutation, JsonlLog};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::objectives::scalar;
use crate::synth::{Dataset, QuestionType, Sample};
use crate::vqa::{argmax, VqaModel, VqaSpec};

pub const VQA_FILE: &str = "vqa.safetensors";
pub const VQA_LOG_FILE: &str = "train_vqa.jsonl";
const EVAL_BATCH: usize = 128;

#[derive(Clone, Debug, Default)]
pub struct TrainVqaOptions {
    /// Where to write the checkpoint and the per-epoch log.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many optimizer steps (smoke runs).
    pub max_steps: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub n: usize,
    pub overall: f64,
    pub color: Option<f64>,
    pub shape: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val: Option<Accuracy>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VqaMetrics {
    /// Loss at every optimizer step.
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochLog>,
}

pub fn evaluate_vqa(model: &VqaModel, samples: &[Sample]) -> Result<Accuracy> {
    if samples.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let mut hits = [(0usize, 0usize); 2];
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let questions: Vec<&[u32]> = chunk.iter().map(|s| s.question.as_slice()).collect();
        let (pred, _) = model.predict(&images, &questions)?;
        for (s, p) in chunk.iter().zip(pred) {
            let slot = &mut hits[(s.question_type == QuestionType::Shape) as usize];
            slot.0 += (p == s.answer) as usize;
            slot.1 += 1;
        }
    }
    let rate = |(c, n): (usize, usize)| (n > 0).then(|| c as f64 / n as f64);
    Ok(Accuracy {
        n: samples.len(),
        overall: (hits[0].0 + hits[1].0) as f64 / samples.len() as f64,
        color: rate(hits[0]),
        shape: rate(hits[1]),
    })
}

fn recolor_tag(epoch: usize, index: usize) -> u64 {
    0x7265_636f_6c00_0000 ^ ((epoch as u64) << 32) ^ index as u64
}

/// Trains the VQA classifier on the train split with Adam and label-smoothed
/// cross-entropy, evaluating on the val split after each epoch. With
/// `vqa_recolor`, every epoch sees each scene under its own palette
/// permutation.
pub fn train_vqa(dataset: &Dataset, config: &Config, options: &TrainVqaOptions) -> Result<(VqaModel, VqaMetrics)> {
    config.validate()?;
    let train = &dataset.train;
    if train.is_empty() {
        return Err(Error::Dataset("train split is empty".into()));
    }
    let t = &config.train;
    let spec = VqaSpec {
        config: config.vqa.clone(),
        vocab: dataset.language.vocab.clone(),
        answers: dataset.language.answers.clone(),
        image_height: dataset.config.height,
        image_width: dataset.config.width,
    };
    let model = VqaModel::new(spec, t.seed, DType::F32)?;
    let mut adam = Adam::new(model.params(), t.vqa_lr, 0.9, 0.999)?;
    let mut log = match &options.out_dir {
        Some(dir) => {
            ensure_dir(dir)?;
            Some(JsonlLog::create(&dir.join(VQA_LOG_FILE), false)?)
        }
        None => None,
    };

    let palette = dataset.config.palette.len();
    let mut metrics = VqaMetrics::default();
    let mut step = 0;
    'epochs: for epoch in 0..t.vqa_epochs {
        let order = permutation(train.len(), t.seed, epoch as u64);
        let (mut loss_sum, mut correct, mut seen, mut batches) = (0.0, 0usize, 0usize, 0usize);
        for batch in order.chunks(t.vqa_batch_size) {
            if options.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let recolored;
            let samples: Vec<&Sample> = if t.vqa_recolor {
                recolored = batch
                    .iter()
                    .map(|&i| {
                        let perm = permutation(palette, t.seed, recolor_tag(epoch, i));
                        train[i].recolored(&perm, &dataset.config, &dataset.language)
                    })
                    .collect::<Result<Vec<_>>>()?;
                recolored.iter().collect()
            } else {
                batch.iter().map(|&i| &train[i]).collect()
            };
            let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
            let questions: Vec<&[u32]> = samples.iter().map(|s| s.question.as_slice()).collect();
            let answers: Vec<usize> = samples.iter().map(|s| s.answer).collect();
            let x = model.images_tensor(&images)?;
            let out = model.forward_batch(&x, &questions)?;
            let loss = model.loss(&out.logits, &answers, t.vqa_label_smoothing)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step,
                    what: "vqa loss".into(),
                });
            }
            let rows: Vec<Vec<f32>> = out.logits.detach().to_vec2()?;
            correct += rows.iter().zip(&answers).filter(|(r, &a)| argmax(r) == a).count();
            seen += answers.len();
            adam.backward_step(&loss)?;
            metrics.step_losses.push(value);
            loss_sum += value;
            batches += 1;
            step += 1;
        }
        let val = if dataset.val.is_empty() {
            None
        } else {
            Some(evaluate_vqa(&model, &dataset.val)?)
        };
        let record = EpochLog {
            epoch,
            steps: step,
            train_loss: loss_sum / batches.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            val,
        };
        info!(
            "vqa epoch {epoch}: loss {:.4}, train acc {:.3}, val {:?}",
            record.train_loss, record.train_accuracy, record.val
        );
        if let Some(log) = &mut log {
            log.write(&record)?;
        }
        metrics.epochs.push(record);
    }
    if let Some(dir) = &options.out_dir {
        model.save(&dir.join(VQA_FILE))?;
    }
    Ok((model, metrics))
}
