mod common;

use cfvqa_core::synth::build_dataset;
use cfvqa_core::training::{evaluate_vqa, train_vqa, TrainVqaOptions};
use cfvqa_core::vqa::VqaModel;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn fifty_steps_reduce_the_loss_for_most_seeds() {
    let mut config = common::smoke_config();
    config.vqa = Default::default();
    let data = build_dataset(&config.data).unwrap();
    let options = TrainVqaOptions {
        max_steps: Some(50),
        ..Default::default()
    };
    let mut decreased = 0;
    for seed in 0..5 {
        config.train.seed = seed;
        let (_, metrics) = train_vqa(&data, &config, &options).unwrap();
        let losses = &metrics.step_losses;
        assert_eq!(losses.len(), 50);
        assert!(losses.iter().all(|l| l.is_finite()));
        let (head, tail) = (mean(&losses[..10]), mean(&losses[40..]));
        eprintln!("seed {seed}: first-10 mean {head:.4}, last-10 mean {tail:.4}");
        decreased += (tail < head) as usize;
    }
    assert!(decreased as f64 >= 0.9 * 5.0, "loss decreased for {decreased}/5 seeds");
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let config = common::smoke_config();
    let data = build_dataset(&config.data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let options = TrainVqaOptions {
        out_dir: Some(dir.path().to_path_buf()),
        max_steps: Some(12),
    };
    let (a, ma) = train_vqa(&data, &config, &options).unwrap();
    let (b, mb) = train_vqa(&data, &config, &TrainVqaOptions { out_dir: None, ..options }).unwrap();
    assert_eq!(ma.step_losses, mb.step_losses);
    assert_eq!(a.weights_hash().unwrap(), b.weights_hash().unwrap());

    let loaded = VqaModel::load(&dir.path().join(cfvqa_core::training::VQA_FILE)).unwrap();
    assert_eq!(loaded.weights_hash().unwrap(), a.weights_hash().unwrap());
    assert_eq!(evaluate_vqa(&loaded, &data.val).unwrap(), evaluate_vqa(&a, &data.val).unwrap());
    let log = std::fs::read_to_string(dir.path().join(cfvqa_core::training::VQA_LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), ma.epochs.len());
}

#[test]
fn different_seeds_give_different_models() {
    let mut config = common::smoke_config();
    let data = build_dataset(&config.data).unwrap();
    let options = TrainVqaOptions {
        max_steps: Some(2),
        ..Default::default()
    };
    let (a, _) = train_vqa(&data, &config, &options).unwrap();
    config.train.seed += 1;
    let (b, _) = train_vqa(&data, &config, &options).unwrap();
    assert_ne!(a.weights_hash().unwrap(), b.weights_hash().unwrap());
}
