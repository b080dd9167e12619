//! Quantitative evaluation of counterfactuals: flip rates, the ℓ1
//! minimality grid, attention/object overlap and background checks, plus
//! panel and study-bundle export.
//!
//! ℓ1 is the mean absolute difference per pixel and channel, so it lies in
//! `[0, 1]` for images in `[0, 1]` and is comparable across resolutions.

mod export;
mod report;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

pub use export::{
    export_panels, export_study_bundle, panel_dims, study_assignment, ImagePosition, PanelCaption, PanelFiles,
    StudyBundle, StudyHidden, StudyTask, BUNDLE_FILE,
};
pub use report::{
    build_report, l1_stats, render_table, semantic_change_rate, Counts, FlipRates, L1Cell, L1Grid, MetricsReport,
    OverlapStats, PublishedReference, SplitFlipRates, SplitGrid, GRID_COLUMNS, L1_CONVENTION, PUBLISHED_FLIP_RATES, PUBLISHED_L1,
};

use crate::error::{Error, Result};
use crate::generator::{composite_tensor, Generator};
use crate::gradcam::{attention_batch, AttentionMap};
use crate::imaging::{stack_maps_to_tensor, stack_to_tensor, tensor_to_arrays, Image, Mask};
use crate::synth::{QuestionType, Sample, Split};
use crate::training::conditions_for;
use crate::vqa::VqaModel;

/// Slack on the background-preservation bound.
pub const BACKGROUND_TOLERANCE: f32 = 1e-6;
const CHUNK: usize = 64;

/// One explained sample: `I`, `M`, `Î`, `I′ = M⊙Î + (1−M)⊙I`, and the VQA
/// model's answers and attention on both images.
#[derive(Clone, Debug)]
pub struct CounterfactualRecord {
    pub sample_id: String,
    pub split: Split,
    pub question_type: QuestionType,
    pub question: Vec<u32>,
    pub question_text: String,
    pub image: Image,
    /// `A`, the model's answer on `I`.
    pub answer: usize,
    pub answer_text: String,
    pub attention: AttentionMap,
    pub generated: Image,
    pub counterfactual: Image,
    /// `A′`, the model's answer on `I′`.
    pub cf_answer: usize,
    pub cf_answer_text: String,
    /// Grad-CAM of `A′` on `I′`.
    pub cf_attention: AttentionMap,
    pub l1: f64,
    pub flipped: bool,
    /// Mask of the object the question refers to, when known.
    pub target_mask: Option<Mask>,
}

/// Mean absolute difference per pixel and channel.
pub fn l1_distance(a: &Image, b: &Image) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("l1 of {:?} and {:?}", a.dim(), b.dim())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum();
    Ok(sum / a.len() as f64)
}

/// `|I′ − I| ≤ M + 1e-6` at every pixel and channel.
pub fn validate_background(record: &CounterfactualRecord) -> bool {
    let m = record.attention.values();
    if record.image.dim() != record.counterfactual.dim() || record.image.dim().1 != m.dim().0 || record.image.dim().2 != m.dim().1 {
        return false;
    }
    record
        .image
        .indexed_iter()
        .all(|((c, y, x), &v)| (record.counterfactual[[c, y, x]] - v).abs() <= m[[y, x]] + BACKGROUND_TOLERANCE)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    /// The argmax pixel of `M` lies inside the mask.
    pub hit: bool,
    /// `Σ M[mask] / Σ M`.
    pub mass_fraction: f64,
}

/// Where the attention mass falls relative to an object mask. An all-zero
/// map gives `hit = false`, `mass_fraction = 0`.
pub fn attention_overlap(map: &AttentionMap, mask: &Mask) -> Result<Overlap> {
    overlap_at(map, mask, 0.0)
}

/// [`attention_overlap`] with values of `M` below `threshold` ignored.
pub fn attention_overlap_thresholded(map: &AttentionMap, mask: &Mask, threshold: f64) -> Result<Overlap> {
    overlap_at(map, mask, threshold as f32)
}

fn overlap_at(map: &AttentionMap, mask: &Mask, threshold: f32) -> Result<Overlap> {
    let m = map.values();
    if m.dim() != mask.dim() {
        return Err(Error::shape(format!("attention {:?} vs mask {:?}", m.dim(), mask.dim())));
    }
    let (mut total, mut inside) = (0.0f64, 0.0f64);
    let mut best: Option<((usize, usize), f32)> = None;
    for (idx, &v) in m.indexed_iter() {
        if v < threshold || v <= 0.0 {
            continue;
        }
        total += v as f64;
        if mask[idx] {
            inside += v as f64;
        }
        // First maximum in row-major order.
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((idx, v));
        }
    }
    if total <= 0.0 {
        return Ok(Overlap {
            hit: false,
            mass_fraction: 0.0,
        });
    }
    Ok(Overlap {
        hit: best.is_some_and(|(idx, _)| mask[idx]),
        mass_fraction: (inside / total).clamp(0.0, 1.0),
    })
}

struct Outcome {
    answer: usize,
    attention: AttentionMap,
    generated: Image,
    counterfactual: Image,
    cf_answer: usize,
    cf_attention: AttentionMap,
}

fn generate_batch(vqa: &VqaModel, generator: &Generator, images: &[&Image], questions: &[&[u32]]) -> Result<Vec<Outcome>> {
    let dtype = generator.dtype();
    let device = Device::Cpu;
    let cond = conditions_for(vqa, images, questions, generator.spec().slices)?;
    let x = stack_to_tensor(images.iter().copied(), dtype, &device)?;
    let maps = stack_maps_to_tensor(cond.maps.iter().map(|m| m.view()), dtype, &device)?;
    let hat = generator.forward(&x, &maps, &cond.x_bar.to_dtype(dtype)?)?.detach();
    let cf = composite_tensor(&hat, &x, &maps)?;
    let generated = tensor_to_arrays(&hat.to_dtype(DType::F32)?)?;
    let counterfactuals = tensor_to_arrays(&cf.to_dtype(DType::F32)?)?;
    let cf_refs: Vec<&Image> = counterfactuals.iter().collect();
    let (cf_maps, cf_answers) = attention_batch(vqa, &cf_refs, questions, None)?;
    Ok(cond
        .answers
        .into_iter()
        .zip(cond.maps)
        .zip(generated.into_iter().zip(counterfactuals))
        .zip(cf_answers.into_iter().zip(cf_maps))
        .map(|(((answer, attention), (generated, counterfactual)), (cf_answer, cf_attention))| Outcome {
            answer,
            attention,
            generated,
            counterfactual,
            cf_answer,
            cf_attention,
        })
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn record(
    vqa: &VqaModel,
    sample_id: String,
    split: Split,
    question_type: QuestionType,
    question: Vec<u32>,
    question_text: String,
    image: Image,
    target_mask: Option<Mask>,
    o: Outcome,
) -> Result<CounterfactualRecord> {
    let answers = &vqa.spec().answers;
    Ok(CounterfactualRecord {
        sample_id,
        split,
        question_type,
        question,
        question_text,
        l1: l1_distance(&o.counterfactual, &image)?,
        image,
        answer: o.answer,
        answer_text: answers.name(o.answer)?.to_string(),
        attention: o.attention,
        generated: o.generated,
        counterfactual: o.counterfactual,
        cf_answer: o.cf_answer,
        cf_answer_text: answers.name(o.cf_answer)?.to_string(),
        cf_attention: o.cf_attention,
        flipped: o.answer != o.cf_answer,
        target_mask,
    })
}

/// Generates and scores counterfactuals for `samples`: `A` and `M` come
/// from the VQA model on `I`, `I′` is composited from the generator output,
/// and `A′`, `M′` come from the VQA model on `I′`.
pub fn build_records(vqa: &VqaModel, generator: &Generator, samples: &[Sample]) -> Result<Vec<CounterfactualRecord>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let questions: Vec<&[u32]> = chunk.iter().map(|s| s.question.as_slice()).collect();
        for (s, o) in chunk.iter().zip(generate_batch(vqa, generator, &images, &questions)?) {
            out.push(record(
                vqa,
                s.id.clone(),
                s.split,
                s.question_type,
                s.question.clone(),
                s.question_text.clone(),
                s.image.clone(),
                Some(s.target_mask().clone()),
                o,
            )?);
        }
    }
    Ok(out)
}

/// Counterfactual for a single free-standing image and question. The
/// record is labelled held-out (`Val`); the question type follows the
/// model's answer.
pub fn explain(vqa: &VqaModel, generator: &Generator, sample_id: &str, image: &Image, question: &str) -> Result<CounterfactualRecord> {
    let spec = vqa.spec();
    if image.dim() != (3, spec.image_height, spec.image_width) {
        return Err(Error::shape(format!(
            "image {:?}, model expects (3, {}, {})",
            image.dim(),
            spec.image_height,
            spec.image_width
        )));
    }
    let tokens = spec.vocab.tokenize(question)?;
    let o = generate_batch(vqa, generator, &[image], &[tokens.as_slice()])?
        .pop()
        .ok_or_else(|| Error::shape("empty batch"))?;
    let question_type = spec.answers.question_type_of(o.answer);
    let text = spec.vocab.detokenize(&tokens)?;
    record(vqa, sample_id.to_string(), Split::Val, question_type, tokens, text, image.clone(), None, o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    fn fixture(image: Image, cf: Image, m: f32) -> CounterfactualRecord {
        let (_, h, w) = image.dim();
        CounterfactualRecord {
            sample_id: "s".into(),
            split: Split::Val,
            question_type: QuestionType::Color,
            question: vec![1],
            question_text: "q".into(),
            generated: cf.clone(),
            l1: l1_distance(&image, &cf).unwrap(),
            image,
            answer: 0,
            answer_text: "red".into(),
            attention: AttentionMap::constant(h, w, m).unwrap(),
            counterfactual: cf,
            cf_answer: 1,
            cf_answer_text: "green".into(),
            cf_attention: AttentionMap::constant(h, w, m).unwrap(),
            flipped: true,
            target_mask: None,
        }
    }

    #[test]
    fn l1_basics() {
        let a = Array3::from_elem((3, 4, 4), 0.2f32);
        let b = Array3::from_elem((3, 4, 4), 0.7f32);
        assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);
        assert!((l1_distance(&a, &b).unwrap() - 0.5).abs() < 1e-6);
        assert_eq!(l1_distance(&a, &b).unwrap(), l1_distance(&b, &a).unwrap());
        assert!(l1_distance(&a, &Array3::zeros((3, 4, 5))).is_err());
    }

    #[test]
    fn background_check() {
        let i = Array3::from_elem((3, 4, 4), 0.5f32);
        assert!(validate_background(&fixture(i.clone(), i.clone(), 0.0)));
        let mut bad = i.clone();
        bad[[1, 2, 3]] = 0.6;
        assert!(!validate_background(&fixture(i.clone(), bad.clone(), 0.0)));
        assert!(validate_background(&fixture(i, bad, 0.1)));
    }

    #[test]
    fn overlap_cases() {
        let mut mask = Array2::from_elem((4, 4), false);
        mask.slice_mut(ndarray::s![..2, ..2]).fill(true);
        let uniform = AttentionMap::constant(4, 4, 1.0).unwrap();
        let o = attention_overlap(&uniform, &mask).unwrap();
        assert!((o.mass_fraction - 0.25).abs() < 1e-12);
        assert!(o.hit, "first maximum is (0, 0), inside the mask");
        let inside = AttentionMap::new(mask.mapv(|b| if b { 0.8 } else { 0.0 })).unwrap();
        assert_eq!(attention_overlap(&inside, &mask).unwrap(), Overlap { hit: true, mass_fraction: 1.0 });
        let outside = AttentionMap::new(mask.mapv(|b| if b { 0.0 } else { 0.8 })).unwrap();
        assert_eq!(attention_overlap(&outside, &mask).unwrap(), Overlap { hit: false, mass_fraction: 0.0 });
        let zero = AttentionMap::constant(4, 4, 0.0).unwrap();
        assert_eq!(attention_overlap(&zero, &mask).unwrap(), Overlap { hit: false, mass_fraction: 0.0 });
        let low = AttentionMap::new(mask.mapv(|b| if b { 0.3 } else { 0.9 })).unwrap();
        assert_eq!(attention_overlap_thresholded(&low, &mask, 0.5).unwrap().mass_fraction, 0.0);
    }
}
