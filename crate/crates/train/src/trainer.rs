//! Distillation training loop, checkpoints and metrics logs.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use epmvg_core::checkpoint::{Container, STUDENT_MAGIC};
use epmvg_core::data::{preprocess_image, Dataset, Sample, Split, Vocab};
use epmvg_core::eval::evaluate;
use epmvg_core::kv::{format_f64, parse_value, KvConfig};
use epmvg_core::losses::{batch_objective, distillation_terms, DistillTerms, LossBreakdown, SampleTerms};
use epmvg_core::model::{Ctx, ModelConfig, ParamGroup, StudentModel};
use epmvg_core::numcore::{Graph, Tensor};
use epmvg_core::rng::{stream_rng, Stream};
use epmvg_core::{Error, Result};

use crate::config::TrainConfig;
use crate::optim::AdamW;
use crate::teacher::{pool_to_dim, pool_to_dim_values, FreezeReport, TeacherConfig, TeacherModel};

pub const METRICS_FILE: &str = "metrics.tsv";
pub const STEPS_FILE: &str = "steps.tsv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_HEADER: &str = "epoch\tsmooth_l1\tgiou\tdistill_img\tdistill_txt\ttotal\tval_acc\n";

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// One-based.
    pub epoch: usize,
    /// Mean of each component over the epoch's steps; `total` is the mean of
    /// the per-step totals.
    pub loss: LossBreakdown,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochMetrics>,
}

impl TrainLog {
    pub fn metrics_tsv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        for e in &self.epochs {
            let l = &e.loss;
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.epoch,
                format_f64(l.smooth_l1),
                format_f64(l.giou),
                format_f64(l.distill_image),
                format_f64(l.distill_text),
                format_f64(l.total),
                format_f64(e.val_acc)
            );
        }
        out
    }

    pub fn steps_tsv(&self) -> String {
        let mut out = String::from("step\tepoch\tlr\tsmooth_l1\tgiou\tdistill_img\tdistill_txt\ttotal\n");
        for s in &self.steps {
            let l = &s.loss;
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                s.step,
                s.epoch + 1,
                format_f64(s.lr),
                format_f64(l.smooth_l1),
                format_f64(l.giou),
                format_f64(l.distill_image),
                format_f64(l.distill_text),
                format_f64(l.total)
            );
        }
        out
    }

    /// Trailing-window means of the per-step totals.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let totals: Vec<f64> = self.steps.iter().map(|s| s.loss.total).collect();
        if window == 0 || totals.len() < window {
            return Vec::new();
        }
        totals
            .windows(window)
            .map(|w| w.iter().sum::<f64>() / window as f64)
            .collect()
    }
}

/// Student, optional teacher and all mutable training state.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: StudentModel<f64>,
    pub teacher: Option<TeacherModel<f64>>,
    student_opt: AdamW<f64>,
    teacher_opt: Option<AdamW<f64>>,
    /// Steps taken so far.
    pub step: u64,
    /// Zero-based epoch the next step belongs to.
    pub epoch: usize,
    dropout: ChaCha8Rng,
    /// Pooled `[DIE]`/`[DTE]` per sample id; only used while the teacher is frozen.
    teacher_cache: HashMap<u64, (Tensor<f64>, Tensor<f64>)>,
    vocab: Vocab,
}

impl Trainer {
    pub fn new(model: StudentModel<f64>, teacher: Option<TeacherModel<f64>>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut teacher = teacher;
        if !config.distill.is_none() && teacher.is_none() {
            return Err(Error::Config(format!(
                "distillation mode {} needs a teacher",
                config.distill.modality
            )));
        }
        if let Some(t) = teacher.as_mut() {
            if config.teacher_frozen {
                t.freeze();
            } else {
                t.unfreeze();
            }
        }
        let student_opt = AdamW::new(model.params(), config.adam);
        let teacher_opt = match &teacher {
            Some(t) if !config.teacher_frozen => Some(AdamW::new(t.params(), config.adam)),
            _ => None,
        };
        let dropout = stream_rng(config.seed, Stream::Dropout, 0);
        Ok(Self {
            config,
            model,
            teacher,
            student_opt,
            teacher_opt,
            step: 0,
            epoch: 0,
            dropout,
            teacher_cache: HashMap::new(),
            vocab: Vocab::standard(),
        })
    }

    /// Fresh student from `seed`.
    pub fn from_scratch(model: ModelConfig, teacher: Option<TeacherModel<f64>>, config: TrainConfig) -> Result<Self> {
        let student = StudentModel::new(model, config.seed)?;
        Self::new(student, teacher, config)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn pooled_teacher(&mut self, s: &Sample) -> Result<(Tensor<f64>, Tensor<f64>)> {
        if let Some(hit) = self.teacher_cache.get(&s.id) {
            return Ok(hit.clone());
        }
        let t = self.teacher.as_ref().expect("distillation has a teacher");
        let e = t.embed_sample(s, &self.vocab)?;
        let d = self.model.config().joint_dim;
        let pooled = (pool_to_dim_values(&e.die, d)?, pool_to_dim_values(&e.dte, d)?);
        self.teacher_cache.insert(s.id, pooled.clone());
        Ok(pooled)
    }

    /// Forward, backward and one optimizer update on `batch`; returns the
    /// batch-mean loss components.
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Contract("train_step on an empty batch".into()));
        }
        let cfg = self.config.clone();
        let mcfg = self.model.config().clone();
        let distill = !cfg.distill.is_none();
        let live_teacher = distill && !cfg.teacher_frozen;

        let mut cached = Vec::new();
        if distill && !live_teacher {
            for s in batch {
                cached.push(self.pooled_teacher(s)?);
            }
        }

        let mut g = Graph::new();
        let sb = self.model.bind(&mut g, true);
        let tb = if live_teacher {
            self.teacher.as_ref().map(|t| t.bind(&mut g))
        } else {
            None
        };
        let mut terms = Vec::with_capacity(batch.len());
        for (i, s) in batch.iter().enumerate() {
            let (img, lb) = preprocess_image(&s.image, mcfg.image_size)?;
            let ids = self.vocab.tokenize(&s.expression, mcfg.max_tokens);
            let teacher_vars = match (&tb, self.teacher.as_ref()) {
                (Some(tb), Some(t)) => {
                    let mut tctx = Ctx::eval(&mut g, tb);
                    let (timg, _) = preprocess_image(&s.image, t.config().image_size)?;
                    let x = tctx.g.constant(&timg);
                    let die = t.encode_image(&mut tctx, x)?;
                    let tids = self.vocab.tokenize(&s.expression, t.config().max_tokens);
                    let dte = t.encode_text(&mut tctx, &tids)?;
                    let pi = pool_to_dim(tctx.g, die, mcfg.joint_dim)?;
                    let pt = pool_to_dim(tctx.g, dte, mcfg.joint_dim)?;
                    Some((pi, pt))
                }
                _ if distill => {
                    let (pi, pt) = &cached[i];
                    Some((g.constant(pi), g.constant(pt)))
                }
                _ => None,
            };
            let mut ctx = Ctx::train(&mut g, &sb, mcfg.dropout, &mut self.dropout);
            let x = ctx.g.constant(&img);
            let out = self.model.forward(&mut ctx, x, &ids)?;
            let distill_terms = match teacher_vars {
                Some((pi, pt)) => distillation_terms(ctx.g, out.vls, out.cls, pi, pt, cfg.distill)?,
                None => DistillTerms::zero(ctx.g),
            };
            let target = ctx.g.constant(&lb.map_box(&s.gt_box).to_tensor());
            terms.push(SampleTerms {
                pred: out.pred_box,
                target,
                distill: distill_terms,
            });
        }
        let nodes = batch_objective(&mut g, &terms, &cfg.weights)?;
        let loss = nodes.breakdown(&g, &cfg.weights);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "step {} epoch {}: smooth_l1={} giou={} distill_image={} distill_text={} total={}",
                self.step,
                self.epoch + 1,
                loss.smooth_l1,
                loss.giou,
                loss.distill_image,
                loss.distill_text,
                loss.total
            )));
        }
        let grads = g.backward(nodes.total)?;
        let scale = cfg.lr_scale(self.epoch);
        let (base, pre) = (cfg.base_lr * scale, cfg.pretrained_lr * scale);
        self.student_opt.update(
            self.model.params_mut(),
            |i| grads.get(sb.vars()[i]),
            |grp| match grp {
                ParamGroup::Pretrained => pre,
                ParamGroup::Base => base,
            },
            cfg.weight_decay,
        )?;
        if let (Some(tb), Some(opt), Some(t)) = (&tb, self.teacher_opt.as_mut(), self.teacher.as_mut()) {
            opt.update(t.params_mut()?, |i| grads.get(tb.vars()[i]), |_| pre, cfg.weight_decay)?;
        }
        self.step += 1;
        Ok(loss)
    }

    /// Current learning rates `(base, pretrained)`.
    pub fn learning_rates(&self) -> (f64, f64) {
        let s = self.config.lr_scale(self.epoch);
        (self.config.base_lr * s, self.config.pretrained_lr * s)
    }

    /// Full training state as a container: model configuration and
    /// parameters, training configuration, optimizer moments, counters and
    /// the dropout stream position.
    pub fn to_container(&self) -> Container<f64> {
        let mut config = self.model.config().pairs();
        config.extend(self.config.pairs().into_iter().map(|(k, v)| (format!("train.{k}"), v)));
        config.push(("state.step".into(), self.step.to_string()));
        config.push(("state.epoch".into(), self.epoch.to_string()));
        config.push(("state.adam_step".into(), self.student_opt.step.to_string()));
        config.push(("state.dropout_word_pos".into(), self.dropout.get_word_pos().to_string()));
        let mut tensors = self.model.params().named_tensors();
        tensors.extend(self.student_opt.named_state(self.model.params(), "adam."));
        if let (Some(t), Some(opt)) = (&self.teacher, &self.teacher_opt) {
            config.extend(t.config().pairs().into_iter().map(|(k, v)| (format!("teacher.{k}"), v)));
            config.push(("state.teacher_adam_step".into(), opt.step.to_string()));
            tensors.extend(
                t.params()
                    .named_tensors()
                    .into_iter()
                    .map(|(n, v)| (format!("teacher.{n}"), v)),
            );
            tensors.extend(opt.named_state(t.params(), "teacher_adam."));
        }
        Container { config, tensors }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_container().save(path, STUDENT_MAGIC)
    }

    /// Restores a trainer. `teacher` supplies the frozen teacher; an unfrozen
    /// teacher's weights and moments come from the checkpoint itself.
    pub fn from_container(c: Container<f64>, teacher: Option<TeacherModel<f64>>) -> Result<Self> {
        let mut train = TrainConfig::default();
        let mut teacher_cfg = TeacherConfig::default();
        let mut state: HashMap<&str, &str> = HashMap::new();
        let pairs = c.config.clone();
        for (k, v) in &pairs {
            if let Some(rest) = k.strip_prefix("train.") {
                train.set(rest, v)?;
            } else if let Some(rest) = k.strip_prefix("teacher.") {
                teacher_cfg.set(rest, v)?;
            } else if let Some(rest) = k.strip_prefix("state.") {
                state.insert(rest, v);
            }
        }
        let get = |key: &str| -> Result<&str> {
            state
                .get(key)
                .copied()
                .ok_or_else(|| Error::Format(format!("checkpoint lacks state.{key}")))
        };
        let step: u64 = parse_value("state.step", get("step")?)?;
        let epoch: usize = parse_value("state.epoch", get("epoch")?)?;
        let adam_step: u64 = parse_value("state.adam_step", get("adam_step")?)?;
        let word_pos: u128 = parse_value("state.dropout_word_pos", get("dropout_word_pos")?)?;

        let tensors = c.tensors.clone();
        let model = StudentModel::from_container(c)?;
        let mut teacher = teacher;
        let live = !train.teacher_frozen && !train.distill.is_none();
        if live {
            let mut t = match teacher.take() {
                Some(t) => t,
                None => TeacherModel::new(teacher_cfg, 0)?,
            };
            t.unfreeze();
            let named: Vec<(String, Tensor<f64>)> = tensors
                .iter()
                .filter_map(|(n, v)| n.strip_prefix("teacher.").map(|s| (s.to_string(), v.clone())))
                .collect();
            t.params_mut()?.assign_named(named)?;
            teacher = Some(t);
        }
        let mut tr = Self::new(model, teacher, train)?;
        tr.student_opt = AdamW::restore(tr.model.params(), tr.config.adam, adam_step, "adam.", &tensors)?;
        if live {
            let t = tr.teacher.as_ref().expect("restored above");
            let ts: u64 = parse_value("state.teacher_adam_step", get("teacher_adam_step")?)?;
            tr.teacher_opt = Some(AdamW::restore(t.params(), tr.config.adam, ts, "teacher_adam.", &tensors)?);
        }
        tr.step = step;
        tr.epoch = epoch;
        tr.dropout.set_word_pos(word_pos);
        Ok(tr)
    }

    pub fn load_checkpoint(path: &Path, teacher: Option<TeacherModel<f64>>) -> Result<Self> {
        Self::from_container(Container::load(path, STUDENT_MAGIC)?, teacher)
    }

    /// Runs the remaining epochs. Logs go to `out_dir` when given, together
    /// with the best-by-validation checkpoint.
    pub fn train(&mut self, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
        let train: Vec<&Sample> = dataset.split(Split::Train);
        let val: Vec<&Sample> = dataset.split(Split::Val);
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config(format!(
                "training needs both splits; got {} train and {} val samples",
                train.len(),
                val.len()
            )));
        }
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let snapshot = self.teacher.as_ref().map(|t| t.snapshot());
        let mut log = TrainLog::default();
        let mut best: Option<(f64, usize, StudentModel<f64>)> = None;
        while self.epoch < self.config.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut stream_rng(self.config.seed, Stream::Shuffle, self.epoch as u64));
            let mut sums = [0.0; 5];
            let mut count = 0usize;
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
                let lr = self.learning_rates().0;
                let loss = self.train_step(&batch)?;
                for (s, v) in sums.iter_mut().zip([
                    loss.smooth_l1,
                    loss.giou,
                    loss.distill_image,
                    loss.distill_text,
                    loss.total,
                ]) {
                    *s += v;
                }
                count += 1;
                log.steps.push(StepRecord {
                    step: self.step,
                    epoch: self.epoch,
                    lr,
                    loss,
                });
            }
            let n = count as f64;
            let report = evaluate(&self.model, &self.vocab, val.iter().copied())?;
            log.epochs.push(EpochMetrics {
                epoch: self.epoch + 1,
                loss: LossBreakdown {
                    smooth_l1: sums[0] / n,
                    giou: sums[1] / n,
                    distill_image: sums[2] / n,
                    distill_text: sums[3] / n,
                    total: sums[4] / n,
                },
                val_acc: report.accuracy,
            });
            self.epoch += 1;
            let improved = best.as_ref().is_none_or(|(acc, _, _)| report.accuracy > *acc);
            if improved {
                best = Some((report.accuracy, self.epoch, self.model.clone()));
                if let Some(dir) = out_dir {
                    self.save_checkpoint(&dir.join(BEST_CHECKPOINT))?;
                }
            }
            if let Some(dir) = out_dir {
                write(&dir.join(METRICS_FILE), &log.metrics_tsv())?;
                write(&dir.join(STEPS_FILE), &log.steps_tsv())?;
            }
        }
        let freeze = match (&self.teacher, &snapshot) {
            (Some(t), Some(s)) => {
                let r = t.assert_frozen(s)?;
                if !r.passed {
                    let names: Vec<&str> = r.changed().iter().map(|d| d.name.as_str()).collect();
                    return Err(Error::Contract(format!("frozen teacher changed: {}", names.join(", "))));
                }
                Some(r)
            }
            _ => None,
        };
        let (best_val_acc, best_epoch, best_model) = match best {
            Some(b) => b,
            None => (f64::NAN, self.epoch, self.model.clone()),
        };
        Ok(TrainOutcome {
            best_model,
            best_epoch,
            best_val_acc,
            log,
            freeze,
        })
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome {
    pub best_model: StudentModel<f64>,
    /// One-based epoch of the best validation accuracy.
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub log: TrainLog,
    pub freeze: Option<FreezeReport>,
}

/// Trains a fresh student on `dataset`.
pub fn train(
    dataset: &Dataset,
    model: ModelConfig,
    config: TrainConfig,
    teacher: Option<TeacherModel<f64>>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let teacher = if config.distill.is_none() { None } else { teacher };
    Trainer::from_scratch(model, teacher, config)?.train(dataset, out_dir)
}
