use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CounterfactualRecord;
use crate::error::{Error, Result};
use crate::imaging::{heat_overlay, save_png, Image};
use crate::synth::splitmix64;

pub const BUNDLE_FILE: &str = "bundle.json";
const PANEL_BACKGROUND: f32 = 1.0;

/// Caption sidecar written next to each panel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelCaption {
    pub sample_id: String,
    pub question: String,
    pub answer: String,
    pub counterfactual_answer: String,
    pub flipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelFiles {
    pub panel: PathBuf,
    pub caption: PathBuf,
}

/// `(height, width)` of a 2×2 panel of `h×w` tiles with `margin` pixels
/// around and between tiles.
pub fn panel_dims(h: usize, w: usize, margin: usize) -> (usize, usize) {
    (2 * h + 3 * margin, 2 * w + 3 * margin)
}

fn tile(record: &CounterfactualRecord, margin: usize, opacity: f32) -> Result<Image> {
    let (_, h, w) = record.image.dim();
    let (ph, pw) = panel_dims(h, w, margin);
    let mut panel = Array3::from_elem((3, ph, pw), PANEL_BACKGROUND);
    let tiles = [
        record.image.clone(),
        heat_overlay(&record.image, record.attention.view(), opacity)?,
        record.counterfactual.clone(),
        heat_overlay(&record.counterfactual, record.cf_attention.view(), opacity)?,
    ];
    for (k, t) in tiles.iter().enumerate() {
        let y = margin + (k / 2) * (h + margin);
        let x = margin + (k % 2) * (w + margin);
        panel.slice_mut(s![.., y..y + h, x..x + w]).assign(t);
    }
    Ok(panel)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One PNG per record laid out as `[I, M over I; I′, M′ over I′]`, plus a
/// `{Q, A, A′}` JSON sidecar.
pub fn export_panels(
    records: &[CounterfactualRecord],
    out_dir: &Path,
    margin: usize,
    opacity: f32,
) -> Result<Vec<PanelFiles>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    records
        .iter()
        .map(|r| {
            let files = PanelFiles {
                panel: out_dir.join(format!("{}.png", r.sample_id)),
                caption: out_dir.join(format!("{}.json", r.sample_id)),
            };
            save_png(&tile(r, margin, opacity)?, &files.panel)?;
            let caption = PanelCaption {
                sample_id: r.sample_id.clone(),
                question: r.question_text.clone(),
                answer: r.answer_text.clone(),
                counterfactual_answer: r.cf_answer_text.clone(),
                flipped: r.flipped,
            };
            write_json(&caption, &files.caption)?;
            Ok(files)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImagePosition {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyHidden {
    pub original_is: ImagePosition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyTask {
    pub task_id: String,
    /// Relative to the bundle file.
    pub image_a_path: String,
    pub image_b_path: String,
    pub question_text: String,
    pub answer_a: String,
    pub answer_b: String,
    /// Never shown to raters.
    pub hidden: StudyHidden,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyBundle {
    pub bundle_id: String,
    pub tasks: Vec<StudyTask>,
}

/// Which records enter the study and where each original is placed: a
/// seeded sample of `n` distinct indices, each with a fair coin for the
/// original's position.
pub fn study_assignment(available: usize, n: usize, seed: u64) -> Result<Vec<(usize, ImagePosition)>> {
    if n > available {
        return Err(Error::NotEnoughRecords {
            requested: n,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x7374_7564_7900_0000));
    let picks = rand::seq::index::sample(&mut rng, available, n).into_vec();
    Ok(picks
        .into_iter()
        .map(|i| (i, if rng.random::<bool>() { ImagePosition::A } else { ImagePosition::B }))
        .collect())
}

/// Writes `bundle.json` and the task images under `out_dir`.
pub fn export_study_bundle(records: &[CounterfactualRecord], n: usize, seed: u64, out_dir: &Path) -> Result<StudyBundle> {
    let assignment = study_assignment(records.len(), n, seed)?;
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let ids: Vec<&str> = assignment.iter().map(|&(i, _)| records[i].sample_id.as_str()).collect();
    let bundle_id = crate::config::hash_json(&(seed, &ids))[..16].to_string();
    let mut tasks = Vec::with_capacity(n);
    for (k, &(i, original_is)) in assignment.iter().enumerate() {
        let r = &records[i];
        let task_id = format!("task-{k:04}");
        let original = (&r.image, &r.answer_text);
        let counterfactual = (&r.counterfactual, &r.cf_answer_text);
        let (a, b) = match original_is {
            ImagePosition::A => (original, counterfactual),
            ImagePosition::B => (counterfactual, original),
        };
        let image_a_path = format!("images/{task_id}-a.png");
        let image_b_path = format!("images/{task_id}-b.png");
        save_png(a.0, &out_dir.join(&image_a_path))?;
        save_png(b.0, &out_dir.join(&image_b_path))?;
        tasks.push(StudyTask {
            task_id,
            image_a_path,
            image_b_path,
            question_text: r.question_text.clone(),
            answer_a: a.1.clone(),
            answer_b: b.1.clone(),
            hidden: StudyHidden { original_is },
        });
    }
    let bundle = StudyBundle { bundle_id, tasks };
    write_json(&bundle, &out_dir.join(BUNDLE_FILE))?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panel_layout() {
        assert_eq!(panel_dims(64, 48, 4), (140, 108));
        assert_eq!(panel_dims(10, 10, 0), (20, 20));
    }

    #[test]
    fn assignment_rejects_oversized_requests() {
        assert!(matches!(
            study_assignment(3, 4, 0),
            Err(Error::NotEnoughRecords { requested: 4, available: 3 })
        ));
        let a = study_assignment(100, 100, 5).unwrap();
        let mut idx: Vec<usize> = a.iter().map(|p| p.0).collect();
        idx.sort();
        assert_eq!(idx, (0..100).collect::<Vec<_>>());
    }
}
