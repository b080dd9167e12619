//! `cfvqa` — one subcommand per pipeline stage; every stage reads and
//! writes files only and leaves a `run_manifest.json` beside its outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cfvqa_core::config::{load_config, Config};
use cfvqa_core::eval::{
    build_records, build_report, explain, export_panels, export_study_bundle, render_table, validate_background,
    CounterfactualRecord, BUNDLE_FILE,
};
use cfvqa_core::generator::Generator;
use cfvqa_core::imaging::load_png;
use cfvqa_core::synth::{build_dataset, load_dataset, save_dataset, Dataset, Sample, Split};
use cfvqa_core::training::{
    train_cf, train_vqa, TrainCfOptions, TrainVqaOptions, GENERATOR_FILE, VQA_FILE,
};
use cfvqa_core::vqa::VqaModel;

const MANIFEST_FILE: &str = "run_manifest.json";
const OUT_ROOT_ENV: &str = "CFVQA_OUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "cfvqa", version, about = "Counterfactual explanations for a VQA model")]
struct Cli {
    /// Output root used when `--out` is not given; runs land in `<root>/<command>`.
    #[arg(long, global = true, env = OUT_ROOT_ENV, default_value = "runs")]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config; missing keys take defaults, unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the seed relevant to the command.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct DataArg {
    /// Dataset directory written by `gen-data`; regenerated from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset (seed overrides data.seed).
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the VQA classifier (seed overrides train.seed).
    TrainVqa {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Train the counterfactual generator against a frozen VQA checkpoint.
    TrainCf {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        vqa_checkpoint: PathBuf,
        /// A `checkpoints/step-NNNNNN` directory to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Explain one image/question pair: writes a 4-panel figure and prints A and A′.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long, alias = "vqa")]
        vqa_checkpoint: PathBuf,
        #[arg(long, alias = "gen")]
        gen_checkpoint: PathBuf,
    },
    /// Score counterfactuals on a dataset split: flip rates, ℓ1 grid, overlap.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, alias = "vqa")]
        vqa_checkpoint: PathBuf,
        #[arg(long, alias = "gen")]
        gen_checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        /// Use only the first N samples of the split.
        #[arg(long)]
        n: Option<usize>,
        /// Also write panels for the first K records.
        #[arg(long, default_value_t = 0)]
        panels: usize,
    },
    /// Export a human-study bundle of N counterfactual pairs (seed picks and orders them).
    ExportStudy {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, alias = "vqa")]
        vqa_checkpoint: PathBuf,
        #[arg(long, alias = "gen")]
        gen_checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long, default_value_t = 10)]
        n: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainVqa { .. } => "train-vqa",
            Command::TrainCf { .. } => "train-cf",
            Command::Explain { .. } => "explain",
            Command::Eval { .. } => "eval",
            Command::ExportStudy { .. } => "export-study",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::TrainVqa { common, .. }
            | Command::TrainCf { common, .. }
            | Command::Explain { common, .. }
            | Command::Eval { common, .. }
            | Command::ExportStudy { common, .. } => common,
        }
    }
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    config: Config,
    hashes: BTreeMap<String, String>,
    started_unix_ms: u128,
    finished_unix_ms: u128,
    artifacts: Vec<PathBuf>,
}

struct Run {
    out: PathBuf,
    config: Config,
    hashes: BTreeMap<String, String>,
    artifacts: Vec<PathBuf>,
}

impl Run {
    fn artifact(&mut self, name: impl AsRef<Path>) -> PathBuf {
        let path = self.out.join(name);
        self.artifacts.push(path.clone());
        path
    }

    fn hash(&mut self, key: &str, value: String) {
        self.hashes.insert(key.to_string(), value);
    }
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

fn git_commit() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

fn resolve_config(common: &Common) -> anyhow::Result<Config> {
    let config = match &common.config {
        Some(path) => load_config(path).with_context(|| format!("loading {}", path.display()))?,
        None => Config::default(),
    };
    config.validate()?;
    Ok(config)
}

fn dataset(config: &Config, data: &DataArg) -> anyhow::Result<Dataset> {
    match &data.data {
        Some(dir) => Ok(load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?),
        None => Ok(build_dataset(&config.data)?),
    }
}

fn select(dataset: &Dataset, split: SplitArg) -> Vec<Sample> {
    match split {
        SplitArg::Train => dataset.split(Split::Train).to_vec(),
        SplitArg::Val => dataset.split(Split::Val).to_vec(),
        SplitArg::All => dataset.samples().cloned().collect(),
    }
}

fn load_models(run: &mut Run, vqa: &Path, gen: &Path) -> anyhow::Result<(VqaModel, Generator)> {
    let vqa = VqaModel::load(vqa).with_context(|| format!("loading VQA checkpoint {}", vqa.display()))?;
    let gen = Generator::load(gen).with_context(|| format!("loading generator checkpoint {}", gen.display()))?;
    run.hash("vqa_weights", vqa.weights_hash()?);
    Ok((vqa, gen))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn write_panels(run: &mut Run, records: &[CounterfactualRecord]) -> anyhow::Result<()> {
    let e = &run.config.eval;
    let files = export_panels(records, &run.out.join("panels"), e.panel_margin, e.overlay_opacity as f32)?;
    for f in files {
        run.artifacts.push(f.panel);
        run.artifacts.push(f.caption);
    }
    Ok(())
}

fn execute(command: &Command, run: &mut Run) -> anyhow::Result<()> {
    let seed = command.common().seed;
    match command {
        Command::GenData { .. } => {
            if let Some(s) = seed {
                run.config.data.seed = s;
            }
            let data = build_dataset(&run.config.data)?;
            let dir = run.artifact("data");
            save_dataset(&data, &dir)?;
            println!("wrote {} train / {} val samples to {}", data.train.len(), data.val.len(), dir.display());
        }
        Command::TrainVqa { data, .. } => {
            if let Some(s) = seed {
                run.config.train.seed = s;
            }
            let data = dataset(&run.config, data)?;
            let options = TrainVqaOptions {
                out_dir: Some(run.out.clone()),
                max_steps: None,
            };
            let (model, metrics) = train_vqa(&data, &run.config, &options)?;
            run.artifact(VQA_FILE);
            run.artifact(cfvqa_core::training::VQA_LOG_FILE);
            run.hash("vqa_weights", model.weights_hash()?);
            if let Some(val) = metrics.epochs.last().and_then(|e| e.val.as_ref()) {
                println!("val accuracy {:.4} (color {:?}, shape {:?})", val.overall, val.color, val.shape);
            }
        }
        Command::TrainCf {
            data,
            vqa_checkpoint,
            resume,
            ..
        } => {
            if let Some(s) = seed {
                run.config.train.seed = s;
            }
            let data = dataset(&run.config, data)?;
            let vqa = VqaModel::load(vqa_checkpoint)?;
            run.hash("vqa_weights", vqa.weights_hash()?);
            let options = TrainCfOptions {
                out_dir: Some(run.out.clone()),
                resume_from: resume.clone(),
            };
            let outcome = train_cf(&data, &vqa, &run.config, &options)?;
            run.artifact(GENERATOR_FILE);
            run.artifact(cfvqa_core::training::DISCRIMINATOR_FILE);
            run.artifact(cfvqa_core::training::CF_LOG_FILE);
            if let Some(last) = outcome.log.last() {
                println!("step {}: running flip rate {:.3}", last.step, last.flip_rate_running);
            }
        }
        Command::Explain {
            image,
            question,
            vqa_checkpoint,
            gen_checkpoint,
            ..
        } => {
            let (vqa, gen) = load_models(run, vqa_checkpoint, gen_checkpoint)?;
            let img = load_png(image).with_context(|| format!("reading {}", image.display()))?;
            let id = image.file_stem().map_or("explain".into(), |s| s.to_string_lossy().into_owned());
            let record = explain(&vqa, &gen, &id, &img, question)?;
            if !validate_background(&record) {
                bail!("counterfactual changed pixels outside the attention map");
            }
            write_panels(run, std::slice::from_ref(&record))?;
            println!("A: {}", record.answer_text);
            println!("A': {}", record.cf_answer_text);
            println!("l1: {:.5}", record.l1);
        }
        Command::Eval {
            data,
            vqa_checkpoint,
            gen_checkpoint,
            split,
            n,
            panels,
            ..
        } => {
            let (vqa, gen) = load_models(run, vqa_checkpoint, gen_checkpoint)?;
            let data = dataset(&run.config, data)?;
            let mut samples = select(&data, *split);
            if let Some(n) = n {
                samples.truncate(*n);
            }
            let records = build_records(&vqa, &gen, &samples)?;
            let report = build_report(&records, run.config.eval.mass_threshold)?;
            let json = run.artifact("report.json");
            write_json(&report, &json)?;
            let table = render_table(&report);
            let txt = run.artifact("report.txt");
            fs::write(&txt, &table).with_context(|| format!("writing {}", txt.display()))?;
            write_panels(run, &records[..(*panels).min(records.len())])?;
            print!("{table}");
        }
        Command::ExportStudy {
            data,
            vqa_checkpoint,
            gen_checkpoint,
            split,
            n,
            ..
        } => {
            let (vqa, gen) = load_models(run, vqa_checkpoint, gen_checkpoint)?;
            let data = dataset(&run.config, data)?;
            let records = build_records(&vqa, &gen, &select(&data, *split))?;
            let bundle = export_study_bundle(&records, *n, seed.unwrap_or(run.config.train.seed), &run.out)?;
            run.artifact(BUNDLE_FILE);
            for t in &bundle.tasks {
                run.artifact(&t.image_a_path);
                run.artifact(&t.image_b_path);
            }
            println!("bundle {} with {} tasks", bundle.bundle_id, bundle.tasks.len());
        }
    }
    Ok(())
}

fn category(err: &anyhow::Error) -> &'static str {
    use cfvqa_core::Error as E;
    match err.chain().find_map(|e| e.downcast_ref::<E>()) {
        Some(E::Config(_)) => "config",
        Some(E::Io { .. }) => "io",
        Some(E::Checkpoint { .. }) => "checkpoint",
        Some(E::Dataset(_) | E::Placement { .. } | E::TemplateExhausted { .. }) => "data",
        Some(E::UnknownToken(_) | E::TokenOutOfRange { .. } | E::AnswerOutOfRange { .. }) => "input",
        Some(E::Divergence { .. }) => "training",
        Some(E::EmptyRecords | E::NotEnoughRecords { .. }) => "evaluation",
        Some(E::Shape(_) | E::Precondition(_)) => "input",
        Some(E::Image(_) | E::Json(_) | E::Tensor(_)) => "internal",
        None => "error",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let started = now_ms();
    let name = cli.command.name();
    let common = cli.command.common();
    let out = common.out.clone().unwrap_or_else(|| cli.out_root.join(name));

    let result = resolve_config(common).and_then(|config| {
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let mut run = Run {
            out: out.clone(),
            config,
            hashes: BTreeMap::new(),
            artifacts: Vec::new(),
        };
        execute(&cli.command, &mut run)?;
        run.hash("config", run.config.hash());
        if let Some(commit) = git_commit() {
            run.hash("git", commit);
        }
        let manifest = RunManifest {
            command: name.to_string(),
            argv: std::env::args().collect(),
            config: run.config,
            hashes: run.hashes,
            started_unix_ms: started,
            finished_unix_ms: now_ms(),
            artifacts: run.artifacts,
        };
        write_json(&manifest, &out.join(MANIFEST_FILE))
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error [{}]: {err:#}", category(&err));
            ExitCode::from(1)
        }
    }
}
