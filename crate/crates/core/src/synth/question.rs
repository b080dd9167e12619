use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{SceneSpec, Shape};
use crate::config::DatasetConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Color,
    Shape,
}

impl QuestionType {
    pub fn name(self) -> &'static str {
        match self {
            QuestionType::Color => "color",
            QuestionType::Shape => "shape",
        }
    }
}

pub const PAD: &str = "<pad>";

/// Closed question vocabulary. Id 0 is reserved for padding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        Self::new(words)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    pub fn new(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words, index }
    }

    pub fn from_config(config: &DatasetConfig) -> Self {
        let mut words = vec![PAD.to_string()];
        let mut push = |w: &str| {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        };
        for template in [&config.templates.color, &config.templates.shape] {
            for w in template.split_whitespace() {
                if !w.starts_with('{') {
                    push(w);
                }
            }
        }
        for s in Shape::ALL {
            push(s.name());
        }
        for c in &config.palette {
            push(&c.name);
        }
        Self::new(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Whitespace tokenization; case-insensitive, a trailing `?` is ignored.
    /// Unknown words are an error.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let text = text.trim().trim_end_matches('?').to_lowercase();
        text.split_whitespace()
            .map(|w| {
                self.index
                    .get(w)
                    .copied()
                    .filter(|&id| id != 0)
                    .ok_or_else(|| Error::UnknownToken(w.to_string()))
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        self.check(ids)?;
        Ok(ids
            .iter()
            .map(|&i| self.words[i as usize].as_str())
            .collect::<Vec<_>>()
            .join(" "))
    }

    pub fn check(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&id| id == 0 || id as usize >= self.words.len()) {
            Some(&id) => Err(Error::TokenOutOfRange {
                id,
                size: self.words.len(),
            }),
            None => Ok(()),
        }
    }
}

/// Answer vocabulary: palette color names followed by shape names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpace {
    names: Vec<String>,
    num_colors: usize,
}

impl AnswerSpace {
    pub fn from_config(config: &DatasetConfig) -> Self {
        let mut names: Vec<String> = config.palette.iter().map(|c| c.name.clone()).collect();
        let num_colors = names.len();
        names.extend(Shape::ALL.iter().map(|s| s.name().to_string()));
        Self { names, num_colors }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn color(&self, palette_index: usize) -> usize {
        palette_index
    }

    pub fn shape(&self, shape: Shape) -> usize {
        self.num_colors + shape.index()
    }

    pub fn name(&self, index: usize) -> Result<&str> {
        self.names
            .get(index)
            .map(String::as_str)
            .ok_or(Error::AnswerOutOfRange {
                index,
                size: self.names.len(),
            })
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn question_type_of(&self, index: usize) -> QuestionType {
        if index < self.num_colors {
            QuestionType::Color
        } else {
            QuestionType::Shape
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Question {
    pub tokens: Vec<u32>,
    pub text: String,
    pub answer: usize,
    pub target_object: usize,
}

/// Templated question generator over a fixed vocabulary.
#[derive(Clone, Debug)]
pub struct Language {
    pub vocab: Vocabulary,
    pub answers: AnswerSpace,
    color_template: String,
    shape_template: String,
    color_names: Vec<String>,
}

impl Language {
    pub fn new(config: &DatasetConfig) -> Result<Self> {
        let vocab = Vocabulary::from_config(config);
        let answers = AnswerSpace::from_config(config);
        let mut seen = std::collections::HashSet::new();
        for n in answers.names() {
            if !seen.insert(n) {
                return Err(Error::Config(format!("answer name `{n}` is not unique")));
            }
        }
        Ok(Self {
            vocab,
            answers,
            color_template: config.templates.color.clone(),
            shape_template: config.templates.shape.clone(),
            color_names: config.palette.iter().map(|c| c.name.clone()).collect(),
        })
    }

    /// Builds a question whose referent is unique in the scene.
    pub fn make_question<R: Rng>(&self, scene: &SceneSpec, qtype: QuestionType, rng: &mut R) -> Result<Question> {
        let objects = &scene.objects;
        let candidates: Vec<usize> = (0..objects.len())
            .filter(|&i| {
                let o = &objects[i];
                let clash = objects.iter().enumerate().filter(|(j, p)| {
                    *j != i
                        && match qtype {
                            QuestionType::Color => p.shape == o.shape,
                            QuestionType::Shape => p.color == o.color,
                        }
                });
                clash.count() == 0
            })
            .collect();
        if candidates.is_empty() {
            return Err(Error::TemplateExhausted { qtype: qtype.name() });
        }
        let target = candidates[rng.random_range(0..candidates.len())];
        self.question_for(scene, qtype, target)
    }

    /// The templated question of type `qtype` about object `target`.
    /// Referent uniqueness is the caller's concern.
    pub fn question_for(&self, scene: &SceneSpec, qtype: QuestionType, target: usize) -> Result<Question> {
        let object = scene
            .objects
            .get(target)
            .ok_or_else(|| Error::Precondition(format!("no object {target} in scene")))?;
        let (text, answer) = match qtype {
            QuestionType::Color => (
                self.color_template.replace("{shape}", object.shape.name()),
                self.answers.color(object.color),
            ),
            QuestionType::Shape => (
                self.shape_template
                    .replace("{color}", &self.color_names[object.color]),
                self.answers.shape(object.shape),
            ),
        };
        let tokens = self.vocab.tokenize(&text)?;
        Ok(Question {
            tokens,
            text,
            answer,
            target_object: target,
        })
    }
}
