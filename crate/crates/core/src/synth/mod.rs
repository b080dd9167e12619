//! Synthetic shapes-VQA data: scenes of colored shapes, templated color and
//! shape questions, and exact per-object masks.

mod io;
mod question;
mod scene;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{load_dataset, save_dataset, ManifestRecord, MANIFEST_FILE};
pub use question::{AnswerSpace, Language, Question, QuestionType, Vocabulary, PAD};
pub use scene::{generate_scene, render, ObjectSpec, SceneSpec, Shape};

use crate::config::DatasetConfig;
use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0000,
            Split::Val => 0x7661_6c00_0000_0000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub scene: SceneSpec,
    pub image: Image,
    pub question: Vec<u32>,
    pub question_text: String,
    pub answer: usize,
    pub masks: Vec<Mask>,
    pub question_type: QuestionType,
    pub target_object: usize,
}

impl Sample {
    pub fn target_mask(&self) -> &Mask {
        &self.masks[self.target_object]
    }

    /// The same scene and question with every palette index `c` replaced
    /// by `perm[c]`, re-rendered. Referent uniqueness is preserved because
    /// the map is a bijection.
    pub fn recolored(&self, perm: &[usize], config: &DatasetConfig, language: &Language) -> Result<Sample> {
        let n = config.palette.len();
        let mut seen = vec![false; n];
        if perm.len() != n || !perm.iter().all(|&c| c < n && !std::mem::replace(&mut seen[c], true)) {
            return Err(Error::Precondition(format!("not a permutation of {n} palette entries")));
        }
        let mut scene = self.scene.clone();
        scene.background_color = perm[scene.background_color];
        for o in &mut scene.objects {
            o.color = perm[o.color];
        }
        let question = language.question_for(&scene, self.question_type, self.target_object)?;
        let (image, masks) = render(&scene, &config.palette, config.height, config.width)?;
        Ok(Sample {
            scene,
            image,
            masks,
            question: question.tokens,
            question_text: question.text,
            answer: question.answer,
            ..self.clone()
        })
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub language: Language,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(self.val.iter())
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of the `k`th candidate scene in a split.
pub fn candidate_seed(base: u64, split: Split, k: u64) -> u64 {
    splitmix64(splitmix64(base ^ split.tag()) ^ k)
}

/// Builds one sample from a scene seed, or `None` when the scene cannot
/// host a question of the drawn type.
pub fn sample_from_seed(
    seed: u64,
    split: Split,
    index: usize,
    config: &DatasetConfig,
    language: &Language,
) -> Result<Option<Sample>> {
    let scene = match generate_scene(seed, config) {
        Ok(s) => s,
        Err(Error::Placement { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    let qtype = if rng.random_bool(config.color_question_fraction) {
        QuestionType::Color
    } else {
        QuestionType::Shape
    };
    let question = match language.make_question(&scene, qtype, &mut rng) {
        Ok(q) => q,
        Err(Error::TemplateExhausted { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let (image, masks) = render(&scene, &config.palette, config.height, config.width)?;
    Ok(Some(Sample {
        id: format!("{}-{index:05}", split.name()),
        split,
        seed,
        scene,
        image,
        question: question.tokens,
        question_text: question.text,
        answer: question.answer,
        masks,
        question_type: qtype,
        target_object: question.target_object,
    }))
}

/// Rejection sampler keeping every answer's share within its question
/// type below the configured cap.
struct BalanceTracker {
    cap: f64,
    counts: HashMap<(QuestionType, usize), usize>,
    totals: HashMap<QuestionType, usize>,
}

impl BalanceTracker {
    /// Before this many samples of a type the cap is not enforced.
    const WARMUP: usize = 10;

    fn new(cap: f64) -> Self {
        Self {
            cap,
            counts: HashMap::new(),
            totals: HashMap::new(),
        }
    }

    fn admit(&mut self, qtype: QuestionType, answer: usize) -> bool {
        let total = self.totals.get(&qtype).copied().unwrap_or(0);
        let count = self.counts.get(&(qtype, answer)).copied().unwrap_or(0);
        if total >= Self::WARMUP && (count + 1) as f64 > self.cap * (total + 1) as f64 {
            return false;
        }
        *self.totals.entry(qtype).or_default() += 1;
        *self.counts.entry((qtype, answer)).or_default() += 1;
        true
    }
}

/// Generates `n` samples for a split. Deterministic in `(config, split, n)`.
pub fn build_split(config: &DatasetConfig, language: &Language, split: Split, n: usize) -> Result<Vec<Sample>> {
    let mut balance = BalanceTracker::new(config.answer_cap);
    let mut out = Vec::with_capacity(n);
    let mut k = 0u64;
    let limit = 1000 + 100 * n as u64;
    while out.len() < n {
        if k >= limit {
            return Err(Error::Dataset(format!(
                "only {} of {n} {} samples after {k} candidate scenes",
                out.len(),
                split.name()
            )));
        }
        let seed = candidate_seed(config.seed, split, k);
        k += 1;
        if let Some(sample) = sample_from_seed(seed, split, out.len(), config, language)? {
            if balance.admit(sample.question_type, sample.answer) {
                out.push(sample);
            }
        }
    }
    Ok(out)
}

pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset> {
    let language = Language::new(config)?;
    let train = build_split(config, &language, Split::Train, config.train_size)?;
    let val = build_split(config, &language, Split::Val, config.val_size)?;
    Ok(Dataset {
        config: config.clone(),
        language,
        train,
        val,
    })
}
