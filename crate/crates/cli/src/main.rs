use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use epmvg_core::data::{generate_dataset, load_dataset, save_dataset, GrammarConfig, Split, Vocab};
use epmvg_core::eval::{center_box_baseline, evaluate, evaluate_with};
use epmvg_core::gradsuite;
use epmvg_core::kv::{KvConfig, KvFile};
use epmvg_core::losses::{DistillKind, DistillMode, Modality};
use epmvg_core::numcore::FdConfig;
use epmvg_core::StudentModel;
use epmvg_train::ablation::{run_grid, save_results, GridKind};
use epmvg_train::teacher::{retrieval_accuracy, PretrainConfig, TeacherConfig, TeacherModel};
use epmvg_train::{pretrain_teacher, RunConfig, Trainer};

#[derive(Parser)]
#[command(name = "epmvg", version, about = "Visual grounding with cross-modal distillation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic grounding dataset.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Grammar overrides as key=value.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Contrastively pretrain the two-tower teacher on scene captions.
    PretrainTeacher {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Teacher or pretraining overrides as key=value.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train the student.
    Train(TrainArgs),
    /// Evaluate a student checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Where to write report.tsv; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run ablation grids and print one table per grid.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// distill, freeze, lambda or all; repeatable, comma-separated.
        #[arg(long, required = true)]
        grid: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Run every finite-difference gradient suite; exits 0 iff all pass.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Same as --distill-mode none.
    #[arg(long)]
    no_distill: bool,
    #[arg(long)]
    distill_mode: Option<String>,
    #[arg(long)]
    distill_loss: Option<String>,
    #[arg(long)]
    unfreeze_teacher: bool,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint written by a previous run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn split_pair(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .with_context(|| format!("expected KEY=VALUE, got `{s}`"))
}

fn apply_sets<C: KvConfig>(cfg: &mut C, sets: &[String]) -> Result<()> {
    for s in sets {
        let (k, v) = split_pair(s)?;
        if !cfg.set(k, v)? {
            bail!("unknown configuration key `{k}`");
        }
    }
    Ok(())
}

impl TrainArgs {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        apply_sets(&mut cfg, &self.set)?;
        let t = &mut cfg.train;
        if let Some(m) = &self.distill_mode {
            t.distill.modality = m.parse::<Modality>()?;
        }
        if let Some(k) = &self.distill_loss {
            t.distill.kind = k.parse::<DistillKind>()?;
        }
        if self.no_distill {
            t.distill = DistillMode::NONE;
        }
        if self.unfreeze_teacher {
            t.teacher_frozen = false;
        }
        if let Some(l) = self.lambda {
            t.weights.lambda = l;
        }
        if let Some(e) = self.epochs {
            t.epochs = e;
            t.lr_drop_epoch = t.lr_drop_epoch.min(e);
        }
        if let Some(s) = self.seed {
            t.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_teacher(path: Option<&Path>, needed: bool) -> Result<Option<TeacherModel<f64>>> {
    match path {
        Some(p) if needed => Ok(Some(
            TeacherModel::load(p).with_context(|| format!("loading teacher {}", p.display()))?,
        )),
        None if needed => bail!("distillation needs --teacher (or pass --no-distill)"),
        _ => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { n, seed, out, set } => {
            let mut cfg = GrammarConfig::default();
            apply_sets(&mut cfg, &set)?;
            let ds = generate_dataset(n, seed, &cfg)?;
            save_dataset(&out, &ds)?;
            println!(
                "wrote {} samples ({} train, {} val) to {}",
                ds.len(),
                ds.split(Split::Train).len(),
                ds.split(Split::Val).len(),
                out.display()
            );
        }
        Command::PretrainTeacher {
            data,
            out,
            epochs,
            seed,
            config,
            set,
        } => {
            let mut tcfg = TeacherConfig::default();
            let mut pcfg = PretrainConfig::default();
            let mut pairs: Vec<(String, String)> = Vec::new();
            if let Some(p) = &config {
                pairs.extend(KvFile::read(p)?.entries.into_iter().map(|(k, v, _)| (k, v)));
            }
            for s in &set {
                let (k, v) = split_pair(s)?;
                pairs.push((k.into(), v.into()));
            }
            for (k, v) in &pairs {
                if !tcfg.set(k, v)? && !pcfg.set(k, v)? {
                    bail!("unknown configuration key `{k}`");
                }
            }
            if let Some(e) = epochs {
                pcfg.epochs = e;
            }
            let ds = load_dataset(&data)?;
            let vocab = Vocab::standard();
            let train = ds.split(Split::Train);
            let (teacher, log) = pretrain_teacher(&train, &vocab, tcfg, &pcfg, seed)?;
            for (i, l) in log.epoch_losses.iter().enumerate() {
                println!("epoch {}\tcontrastive {l:.6}", i + 1);
            }
            let val = ds.split(Split::Val);
            if val.len() >= 16 {
                let r = retrieval_accuracy(&teacher, &val, &vocab, 16)?;
                println!(
                    "val retrieval top-1: image->text {:.2}%  text->image {:.2}%  ({} batches of 16)",
                    100.0 * r.image_to_text,
                    100.0 * r.text_to_image,
                    r.batches
                );
            }
            teacher.save(&out)?;
            println!("saved teacher to {}", out.display());
        }
        Command::Train(args) => {
            let ds = load_dataset(&args.data)?;
            let cfg = args.run_config()?;
            let needs_teacher = !cfg.train.distill.is_none();
            let mut trainer = match &args.resume {
                Some(p) => {
                    let t = load_teacher(args.teacher.as_deref(), needs_teacher && cfg.train.teacher_frozen)?;
                    Trainer::load_checkpoint(p, t)?
                }
                None => {
                    let t = load_teacher(args.teacher.as_deref(), needs_teacher)?;
                    Trainer::from_scratch(cfg.model.clone(), t, cfg.train.clone())?
                }
            };
            fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
            fs::write(args.out.join("config.txt"), cfg.to_text())?;
            let outcome = trainer.train(&ds, Some(&args.out))?;
            trainer.save_checkpoint(&args.out.join("last.ckpt"))?;
            print!("{}", outcome.log.metrics_tsv());
            println!(
                "best val acc@0.5 {:.2}% at epoch {}",
                100.0 * outcome.best_val_acc,
                outcome.best_epoch
            );
            if let Some(f) = &outcome.freeze {
                println!("teacher frozen check: {}", if f.passed { "identical" } else { "changed" });
            }
        }
        Command::Eval {
            data,
            checkpoint,
            split,
            out,
        } => {
            let ds = load_dataset(&data)?;
            let split: Split = split.parse()?;
            let model = StudentModel::load(&checkpoint)?;
            let samples = ds.split(split);
            let report = evaluate(&model, &Vocab::standard(), samples.iter().copied())?;
            let center = center_box_baseline(ds.split(Split::Train).iter().copied())?;
            let baseline = evaluate_with(samples.iter().copied(), |_| Ok(center))?;
            let dir = out.unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            report.save(&dir.join("report.tsv"))?;
            println!(
                "{split}: acc@0.5 {:.2}% ({}/{}), mean IoU {:.4}; center-box baseline {:.2}%",
                100.0 * report.accuracy,
                report.n_correct,
                report.n_samples,
                report.mean_iou,
                100.0 * baseline.accuracy
            );
        }
        Command::Ablate {
            data,
            teacher,
            grid,
            seeds,
            config,
            set,
            out,
        } => {
            let mut kinds = Vec::new();
            for g in grid.iter().flat_map(|g| g.split(',')) {
                if g == "all" {
                    kinds.extend(GridKind::ALL);
                } else {
                    kinds.push(g.parse::<GridKind>()?);
                }
            }
            let mut cfg = match &config {
                Some(p) => RunConfig::from_file(p)?,
                None => RunConfig::default(),
            };
            apply_sets(&mut cfg, &set)?;
            cfg.validate()?;
            let needs_teacher = kinds
                .iter()
                .any(|k| k.cells(&cfg.train).iter().any(|(_, c)| !c.distill.is_none()));
            let teacher = load_teacher(teacher.as_deref(), needs_teacher)?;
            let ds = load_dataset(&data)?;
            let mut results = Vec::new();
            for kind in kinds {
                results.push(run_grid(kind, &ds, &cfg.model, &cfg.train, teacher.as_ref(), &seeds)?);
            }
            print!("{}", save_results(&results, &out)?);
        }
        Command::GradCheck { seed } => {
            let suites = gradsuite::run_all(seed, FdConfig::default())?;
            let mut failed = 0;
            for s in &suites {
                println!(
                    "{}\t{}\tmax_rel_error {:.3e}",
                    if s.passed() { "pass" } else { "FAIL" },
                    s.name,
                    s.report.max_rel_error
                );
                failed += usize::from(!s.passed());
            }
            if failed > 0 {
                bail!("{failed} of {} gradient suites failed", suites.len());
            }
            println!("all {} gradient suites passed", suites.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
