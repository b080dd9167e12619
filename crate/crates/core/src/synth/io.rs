//! On-disk dataset layout:
//!
//! ```text
//! <dir>/dataset.toml          resolved [data] config
//! <dir>/manifest.jsonl        one ManifestRecord per line, train then val
//! <dir>/images/<id>.png       8-bit RGB
//! <dir>/masks/<id>_<k>.png    8-bit grayscale, 255 inside object k
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Language, QuestionType, Sample, SceneSpec, Split};
use crate::config::DatasetConfig;
use crate::error::{Error, Result};
use crate::imaging::{load_mask, load_png, save_mask, save_png};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const CONFIG_FILE: &str = "dataset.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sample_id: String,
    pub split: Split,
    pub image_path: String,
    pub question_tokens: Vec<u32>,
    pub question_text: String,
    pub answer: usize,
    pub answer_text: String,
    pub question_type: QuestionType,
    pub target_object: usize,
    pub mask_paths: Vec<String>,
    pub seed: u64,
    pub scene: SceneSpec,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("masks"))?;
    let config_text = toml::to_string(&dataset.config).map_err(|e| Error::Config(e.to_string()))?;
    let config_path = dir.join(CONFIG_FILE);
    fs::write(&config_path, config_text).map_err(|e| Error::io(&config_path, e))?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut out = BufWriter::new(file);
    for sample in dataset.samples() {
        let image_path = format!("images/{}.png", sample.id);
        save_png(&sample.image, &dir.join(&image_path))?;
        let mut mask_paths = Vec::with_capacity(sample.masks.len());
        for (k, mask) in sample.masks.iter().enumerate() {
            let p = format!("masks/{}_{k}.png", sample.id);
            save_mask(mask, &dir.join(&p))?;
            mask_paths.push(p);
        }
        let record = ManifestRecord {
            sample_id: sample.id.clone(),
            split: sample.split,
            image_path,
            question_tokens: sample.question.clone(),
            question_text: sample.question_text.clone(),
            answer: sample.answer,
            answer_text: dataset.language.answers.name(sample.answer)?.to_string(),
            question_type: sample.question_type,
            target_object: sample.target_object,
            mask_paths,
            seed: sample.seed,
            scene: sample.scene.clone(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n").map_err(|e| Error::io(&manifest_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let config_path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
    let config: DatasetConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let language = Language::new(&config)?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let file = fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("manifest line {}: {e}", line_no + 1)))?;
        language.vocab.check(&r.question_tokens)?;
        language.answers.name(r.answer)?;
        let masks = r
            .mask_paths
            .iter()
            .map(|p| load_mask(&dir.join(p)))
            .collect::<Result<Vec<_>>>()?;
        if r.target_object >= masks.len() {
            return Err(Error::Dataset(format!("{}: target_object out of range", r.sample_id)));
        }
        let sample = Sample {
            id: r.sample_id,
            split: r.split,
            seed: r.seed,
            scene: r.scene,
            image: load_png(&dir.join(&r.image_path))?,
            question: r.question_tokens,
            question_text: r.question_text,
            answer: r.answer,
            masks,
            question_type: r.question_type,
            target_object: r.target_object,
        };
        match sample.split {
            Split::Train => train.push(sample),
            Split::Val => val.push(sample),
        }
    }
    Ok(Dataset {
        config,
        language,
        train,
        val,
    })
}
