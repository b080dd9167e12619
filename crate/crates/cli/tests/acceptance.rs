//! Acceptance harness: runs every primary criterion in sequence and prints
//! one PASS/FAIL line per criterion, then fails if any criterion failed.
//!
//! The desk runs use the default config (2,000 train / 500 val, 64×64) and
//! take roughly 25 minutes on one CPU core. Artifacts are kept under
//! `$CARGO_TARGET_TMPDIR/acceptance`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use cfvqa_core::config::Config;
use cfvqa_core::eval::{build_records, build_report, render_table, validate_background, GRID_COLUMNS};
use cfvqa_core::imaging::save_png;
use cfvqa_core::synth::{build_dataset, QuestionType, Split};
use cfvqa_core::training::{train_cf, train_vqa, TrainCfOptions, TrainVqaOptions, GENERATOR_FILE, VQA_FILE};
use common::Check;

const VQA_BUDGET: Duration = Duration::from_secs(15 * 60);
const CF_BUDGET: Duration = Duration::from_secs(30 * 60);

/// Written straight to the stream so the lines survive test capture.
fn say(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

struct Harness {
    results: Vec<(String, bool)>,
}

impl Harness {
    fn record(&mut self, name: &str, started: Instant, limit: Option<Duration>, check: Check) {
        let elapsed = started.elapsed();
        let in_time = limit.is_none_or(|l| elapsed <= l);
        let passed = check.passed && in_time;
        let budget = limit.map(|l| format!(" (budget {}s)", l.as_secs())).unwrap_or_default();
        say(&format!(
            "{} {name} [{:.1}s{budget}]: {}",
            if passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            check.detail
        ));
        self.results.push((name.to_string(), passed));
    }
}

fn out_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn primary_acceptance_criteria() {
    let mut h = Harness { results: Vec::new() };
    let out = out_dir();

    let t = Instant::now();
    let fd = common::gradcam_finite_differences();
    let hand = common::gradcam_hand_example();
    h.record(
        "gradcam-oracle",
        t,
        Some(Duration::from_secs(60)),
        Check::new(fd.passed && hand.passed, format!("{}; 2×2 example {}", fd.detail, hand.detail)),
    );

    let t = Instant::now();
    h.record("spectral-norm-oracle", t, Some(Duration::from_secs(60)), common::spectral_norm_oracle(100));

    let t = Instant::now();
    h.record("compositing-invariants", t, Some(Duration::from_secs(60)), common::compositing_oracle(1000));

    let t = Instant::now();
    let trivial = common::loss_trivial_cases();
    let grads = common::loss_finite_differences();
    h.record(
        "loss-suite",
        t,
        Some(Duration::from_secs(120)),
        Check::new(trivial.passed && grads.passed, format!("{}; grad rel err: {}", trivial.detail, grads.detail)),
    );

    let t = Instant::now();
    h.record("gaussian-smoothing", t, None, common::blur_oracle());

    let t = Instant::now();
    h.record("dataset-soundness", t, Some(Duration::from_secs(120)), common::dataset_sweep(10_000));

    // Desk VQA run.
    let config = Config::default();
    let data = build_dataset(&config.data).unwrap();
    let vqa_dir = out.join("vqa");
    let t = Instant::now();
    let (vqa, metrics) = train_vqa(
        &data,
        &config,
        &TrainVqaOptions {
            out_dir: Some(vqa_dir.clone()),
            max_steps: None,
        },
    )
    .unwrap();
    let vqa_time = t.elapsed();
    let val = metrics.epochs.last().and_then(|e| e.val.clone()).unwrap();
    let color = val.color.unwrap_or(0.0);
    let epoch_steps = metrics.epochs[0].steps;
    let (_, replay) = train_vqa(
        &data,
        &config,
        &TrainVqaOptions {
            out_dir: None,
            max_steps: Some(epoch_steps),
        },
    )
    .unwrap();
    let deterministic = replay.step_losses[..] == metrics.step_losses[..epoch_steps];
    h.record(
        "desk-vqa",
        t,
        None,
        Check::new(
            color >= 0.90 && vqa_time <= VQA_BUDGET && deterministic,
            format!(
                "{} train / {} val; val color acc {color:.3} (≥ 0.90), shape {:.3}, overall {:.3}; trained in {:.0}s \
                 (≤ {}s); first-epoch replay bit-identical: {deterministic}",
                data.train.len(),
                data.val.len(),
                val.shape.unwrap_or(0.0),
                val.overall,
                vqa_time.as_secs_f64(),
                VQA_BUDGET.as_secs()
            ),
        ),
    );

    // Desk counterfactual run.
    let cf_dir = out.join("cf");
    let t = Instant::now();
    let outcome = train_cf(
        &data,
        &vqa,
        &config,
        &TrainCfOptions {
            out_dir: Some(cf_dir.clone()),
            resume_from: None,
        },
    )
    .unwrap();
    let cf_time = t.elapsed();
    let samples: Vec<_> = data.samples().cloned().collect();
    let records = build_records(&vqa, &outcome.generator, &samples).unwrap();
    let report = build_report(&records, config.eval.mass_threshold).unwrap();
    let table = render_table(&report);
    std::fs::write(out.join("report.txt"), &table).unwrap();
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report).unwrap()).unwrap();
    let held_out: Vec<_> = records
        .iter()
        .filter(|r| r.split == Split::Val && r.question_type == QuestionType::Color)
        .collect();
    let val_color_flip = held_out.iter().filter(|r| r.flipped).count() as f64 / held_out.len() as f64;
    let valid = records.iter().filter(|r| validate_background(r)).count();
    let grid_ok = GRID_COLUMNS.iter().all(|c| table.contains(c))
        && table.lines().filter(|l| l.split_whitespace().nth(2) == Some("ref")).count() == 4
        && [&report.l1.train, &report.l1.val].iter().all(|g| g.cells.len() == 9);
    h.record(
        "desk-counterfactuals",
        t,
        None,
        Check::new(
            report.flip_rates.overall.all > 0.0
                && val_color_flip >= 0.15
                && valid == records.len()
                && grid_ok
                && cf_time <= CF_BUDGET,
            format!(
                "{} steps in {:.0}s (≤ {}s); held-out color flip rate {val_color_flip:.3} (≥ 0.15) over {} questions; \
                 overall {:.3}; background preserved {valid}/{}; ℓ1 grid with reference rows rendered: {grid_ok}",
                config.train.cf_steps,
                cf_time.as_secs_f64(),
                CF_BUDGET.as_secs(),
                held_out.len(),
                report.flip_rates.overall.all,
                records.len()
            ),
        ),
    );
    for line in table.lines() {
        say(&format!("    {line}"));
    }

    // End-to-end explain through the binary on the trained checkpoints.
    let t = Instant::now();
    let sample = data.val.iter().find(|s| s.question_type == QuestionType::Color).unwrap();
    let image = out.join("explain-input.png");
    save_png(&sample.image, &image).unwrap();
    let explain_dir = out.join("explain");
    let o = Command::new(env!("CARGO_BIN_EXE_cfvqa"))
        .args(["explain", "--image"])
        .arg(&image)
        .args(["--question", &sample.question_text, "--vqa"])
        .arg(vqa_dir.join(VQA_FILE))
        .arg("--gen")
        .arg(cf_dir.join(GENERATOR_FILE))
        .arg("--out")
        .arg(&explain_dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&o.stdout);
    let answer = |prefix: &str| {
        stdout
            .lines()
            .find_map(|l| l.strip_prefix(prefix))
            .map(str::trim)
            .filter(|a| !a.is_empty())
            .map(str::to_string)
    };
    let (a, a2) = (answer("A: "), answer("A': "));
    let panel = explain_dir.join("panels").join("explain-input.png");
    let panel_dims = cfvqa_core::imaging::load_png(&panel).ok().map(|p| p.dim());
    let (ph, pw) = cfvqa_core::eval::panel_dims(64, 64, config.eval.panel_margin);
    h.record(
        "explain-smoke",
        t,
        None,
        Check::new(
            o.status.success() && a.is_some() && a2.is_some() && panel_dims == Some((3, ph, pw)),
            format!(
                "exit {:?}; question \"{}\"; A = {a:?}, A' = {a2:?}; 4-panel output {panel_dims:?}",
                o.status.code(),
                sample.question_text
            ),
        ),
    );

    let failed: Vec<_> = h.results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    say(&format!("{} of {} primary criteria passed", h.results.len() - failed.len(), h.results.len()));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
