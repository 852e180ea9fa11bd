use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use akd::ablation::{run_ablation, to_csv, AblationAxis, AblationInputs};
use akd::eval::{export_attention, extract_features, knn_classify, linear_probe, LayerSelector};
use akd::gradcheck::run_suite;
use akd::io::{generate_splits, Dataset, ModelFile, RunConfig, ShapeSpec};
use akd::train::{pretrain_classifier, run_distillation, DistillSetup};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

/// Attention-guided distillation between vision transformers.
#[derive(Parser, Debug)]
#[command(name = "akd", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic train.akds / val.akds splits.
    GenData {
        #[arg(long, default_value_t = 5000)]
        count: usize,
        #[arg(long, default_value_t = 1000)]
        val_count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        classes: usize,
    },
    /// Supervised pretraining of the teacher described by `vit_teacher`.
    MakeTeacher {
        /// Directory holding train.akds and val.akds.
        #[arg(long)]
        data: PathBuf,
    },
    /// Distil the `vit_student` from a teacher checkpoint.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// k-NN accuracy of a checkpoint's class-token features, as JSON.
    EvalKnn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Linear-probe accuracy of a checkpoint's class-token features, as JSON.
    EvalLinear {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of every loss and a two-layer ViT.
    GradCheck {
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Per-head and aggregated attention heatmaps for one image.
    ExportAttn {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset file (.akds) holding the image.
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Zero-based layer; the last one by default.
        #[arg(long)]
        layer: Option<usize>,
        /// Second model whose aggregate the maps are compared against.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Run one ablation axis and write a CSV table.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Axis {
    Architecture,
    Aggregation,
    Loss,
}

impl From<Axis> for AblationAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::Architecture => AblationAxis::Architecture,
            Axis::Aggregation => AblationAxis::Aggregation,
            Axis::Loss => AblationAxis::Loss,
        }
    }
}

impl Global {
    fn config(&self) -> Result<RunConfig> {
        let path = self.config.as_ref().context("--config is required for this command")?;
        let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            if let Some(p) = cfg.pretrain.as_mut() {
                p.seed = seed;
            }
            cfg.eval.probe.seed = seed;
        }
        Ok(cfg)
    }

    fn out(&self) -> Result<&Path> {
        let out = self.out.as_deref().context("--out is required for this command")?;
        fs::create_dir_all(out)?;
        Ok(out)
    }
}

fn splits(dir: &Path) -> Result<(Dataset, Dataset)> {
    let load = |name: &str| {
        let p = dir.join(name);
        Dataset::load(&p).with_context(|| format!("loading {}", p.display()))
    };
    Ok((load("train.akds")?, load("val.akds")?))
}

fn load_model(path: &Path) -> Result<ModelFile> {
    ModelFile::load(path).with_context(|| format!("loading {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    match cli.command {
        Command::GenData {
            count,
            val_count,
            size,
            classes,
        } => {
            let out = g.out()?;
            let (train, val) = generate_splits(g.seed.unwrap_or(0), count, val_count, ShapeSpec { size, classes })?;
            train.save(out.join("train.akds"))?;
            val.save(out.join("val.akds"))?;
            log::info!("wrote {} + {} samples to {}", train.len(), val.len(), out.display());
        }
        Command::MakeTeacher { data } => {
            let cfg = g.config()?;
            let out = g.out()?;
            let (train, val) = splits(&data)?;
            let (model, history) = pretrain_classifier(&cfg.vit_teacher, &train, Some(&val), cfg.pretrain())?;
            let mut f = File::create(out.join("pretrain_metrics.jsonl"))?;
            for m in &history {
                writeln!(f, "{}", serde_json::to_string(m)?)?;
            }
            model.save(out.join("teacher.akd"))?;
            let last = history.last().expect("at least one epoch");
            println!("{}", json!({ "val_accuracy": last.val_accuracy, "train_accuracy": last.train_accuracy }));
        }
        Command::Distill { teacher, data } => {
            let cfg = g.config()?;
            let out = g.out()?;
            let teacher = load_model(&teacher)?;
            let (train, _) = splits(&data)?;
            let setup = DistillSetup {
                teacher: &teacher,
                data: &train,
                distill: &cfg.distill,
                train: &cfg.train,
            };
            let outcome = run_distillation(&setup, &cfg.vit_student, Some(out))?;
            let last = outcome.metrics.last().expect("at least one epoch");
            println!("{}", serde_json::to_string(last)?);
        }
        Command::EvalKnn { ckpt, data } => {
            let eval = match &g.config {
                Some(_) => g.config()?.eval,
                None => Default::default(),
            };
            let model = load_model(&ckpt)?;
            let (train, val) = splits(&data)?;
            let acc = knn_classify(&extract_features(&model, &train)?, &extract_features(&model, &val)?, &eval.knn)?;
            println!(
                "{}",
                json!({ "knn_accuracy": acc, "k": eval.knn.k, "temperature": eval.knn.temperature })
            );
        }
        Command::EvalLinear { ckpt, data } => {
            let eval = match &g.config {
                Some(_) => g.config()?.eval,
                None => Default::default(),
            };
            let model = load_model(&ckpt)?;
            let (train, val) = splits(&data)?;
            let acc = linear_probe(&extract_features(&model, &train)?, &extract_features(&model, &val)?, &eval.probe)?;
            println!(
                "{}",
                json!({ "linear_accuracy": acc, "epochs": eval.probe.epochs, "lr": eval.probe.lr })
            );
        }
        Command::GradCheck { seeds } => {
            let first = g.seed.unwrap_or(1);
            let list: Vec<u64> = (first..first + seeds).collect();
            let suite = run_suite(&list)?;
            for f in suite.failures() {
                log::error!("{} (seed {}): relative error {:.3e}", f.name, f.seed, f.rel_error);
            }
            println!("{}", serde_json::to_string(&suite)?);
            if !suite.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::ExportAttn {
            ckpt,
            image,
            index,
            layer,
            reference,
        } => {
            let distill = match &g.config {
                Some(_) => g.config()?.distill,
                None => Default::default(),
            };
            let out = g.out()?;
            let model = load_model(&ckpt)?;
            let data = Dataset::load(&image).with_context(|| format!("loading {}", image.display()))?;
            if index >= data.len() {
                bail!("image index {index} outside a dataset of {}", data.len());
            }
            let img = data.image(index);
            let selector = layer.map_or(LayerSelector::Last, LayerSelector::Index);
            let export = export_attention(&model, &img, selector, &distill)?;
            let written = export.write(out)?;
            let comparison = match reference {
                Some(r) => {
                    let reference = export_attention(&load_model(&r)?, &img, LayerSelector::Last, &distill)?;
                    Some(export.compare(&reference, &distill)?)
                }
                None => None,
            };
            println!(
                "{}",
                json!({
                    "layer": export.layer,
                    "files": written,
                    "comparison": comparison,
                })
            );
        }
        Command::Ablate { axis, teacher, data } => {
            let cfg = g.config()?;
            let out = g.out()?;
            let teacher = load_model(&teacher)?;
            let (train, val) = splits(&data)?;
            let axis = AblationAxis::from(axis);
            let inputs = AblationInputs {
                config: &cfg,
                teacher: &teacher,
                train: &train,
                val: &val,
            };
            let rows = run_ablation(axis, &inputs, Some(out))?;
            let table = to_csv(&rows)?;
            fs::write(out.join(format!("ablation_{axis}.csv")), &table)?;
            print!("{table}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AKD_LOG", "error")).init();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
