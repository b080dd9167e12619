//! Training loops: VQA pretraining and adversarial counterfactual training.
//!
//! Both loops draw their batches from `(seed, step)` or `(seed, epoch)`
//! alone, so a run is a pure function of its config and inputs, and a
//! resumed counterfactual run replays the same batches.

mod cf;
mod vqa;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use cf::{
    conditions_for, precompute_conditions, train_cf, CfCheckpointState, CfOutcome, CfStepLog, Conditions, TrainCfOptions,
    CF_LOG_FILE, DISCRIMINATOR_FILE, GENERATOR_FILE,
};
pub use vqa::{evaluate_vqa, train_vqa, Accuracy, EpochLog, TrainVqaOptions, VqaMetrics, VQA_FILE, VQA_LOG_FILE};

use crate::error::{Error, Result};
use crate::synth::splitmix64;

/// Deterministic permutation of `0..n` for a `(seed, tag)` pair.
pub(crate) fn permutation(n: usize, seed: u64, tag: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(tag))));
    idx
}

/// Line-delimited JSON log.
pub(crate) struct JsonlLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlLog {
    pub(crate) fn create(path: &Path, append: bool) -> Result<Self> {
        let file = File::options()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub(crate) fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}
