use epmvg_core::checkpoint::{Container, STUDENT_MAGIC};
use epmvg_core::data::{generate_dataset, Dataset, GrammarConfig, Sample, Split, Vocab};
use epmvg_core::losses::{DistillMode, LossBreakdown};
use epmvg_core::model::ModelConfig;
use epmvg_core::numcore::Graph;
use epmvg_core::Error;
use epmvg_train::teacher::{contrastive_loss, TeacherConfig, TeacherModel};
use epmvg_train::{TrainConfig, Trainer};

fn dataset(n: usize) -> Dataset {
    let cfg = GrammarConfig {
        image_size: 32,
        ..GrammarConfig::default()
    };
    generate_dataset(n, 3, &cfg).unwrap()
}

fn tiny_teacher() -> TeacherModel<f64> {
    let cfg = TeacherConfig {
        image_size: 16,
        stem_channels: vec![4, 4],
        hidden: 8,
        embed_dim: 12,
        text_dim: 8,
        max_tokens: 6,
        ffn_dim: 8,
        ..TeacherConfig::default()
    };
    TeacherModel::new(cfg, 1).unwrap()
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        lr_drop_epoch: 1,
        batch_size: 4,
        base_lr: 1e-3,
        pretrained_lr: 1e-4,
        ..TrainConfig::default()
    }
}

fn trainer(train: TrainConfig) -> Trainer {
    let teacher = (!train.distill.is_none()).then(tiny_teacher);
    Trainer::from_scratch(ModelConfig::tiny(), teacher, train).unwrap()
}

fn batch(ds: &Dataset, k: usize) -> Vec<&Sample> {
    ds.split(Split::Train).into_iter().take(k).collect()
}

fn student_bits(t: &Trainer) -> Vec<u64> {
    t.model.params().flatten().data().iter().map(|v| v.to_bits()).collect()
}

fn teacher_bits(t: &Trainer) -> Vec<u64> {
    let teacher = t.teacher.as_ref().unwrap();
    teacher.params().flatten().data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn zero_learning_rates_leave_parameters_unchanged() {
    let ds = dataset(24);
    let mut t = trainer(TrainConfig {
        base_lr: 0.0,
        pretrained_lr: 0.0,
        ..tiny_train()
    });
    let before = student_bits(&t);
    let loss = t.train_step(&batch(&ds, 4)).unwrap();
    assert!(loss.is_finite());
    assert_eq!(before, student_bits(&t));
}

fn recomputed(l: &LossBreakdown, t: &TrainConfig) -> f64 {
    let w = &t.weights;
    l.smooth_l1 + w.lambda * l.giou + w.alpha * l.distill_image + w.beta * l.distill_text
}

#[test]
fn no_distillation_reduces_to_box_losses() {
    let ds = dataset(24);
    let cfg = TrainConfig {
        distill: DistillMode::NONE,
        ..tiny_train()
    };
    let mut t = trainer(cfg.clone());
    assert!(t.teacher.is_none());
    let l = t.train_step(&batch(&ds, 4)).unwrap();
    assert_eq!((l.distill_image, l.distill_text), (0.0, 0.0));
    assert_eq!(l.total, l.smooth_l1 + cfg.weights.lambda * l.giou);
}

#[test]
fn logged_totals_match_their_components() {
    let ds = dataset(40);
    let cfg = tiny_train();
    let mut t = trainer(cfg.clone());
    let out = t.train(&ds, None).unwrap();
    assert!(!out.log.steps.is_empty());
    for s in &out.log.steps {
        assert!((s.loss.total - recomputed(&s.loss, &cfg)).abs() < 1e-12);
        assert!(s.loss.distill_image > 0.0 && s.loss.distill_text > 0.0);
    }
}

#[test]
fn learning_rate_drops_tenfold_at_the_drop_epoch() {
    let ds = dataset(40);
    let mut t = trainer(tiny_train());
    let out = t.train(&ds, None).unwrap();
    let first: Vec<f64> = out.log.steps.iter().filter(|s| s.epoch == 0).map(|s| s.lr).collect();
    let second: Vec<f64> = out.log.steps.iter().filter(|s| s.epoch == 1).map(|s| s.lr).collect();
    assert!(first.iter().all(|&l| l == 1e-3));
    assert!(second.iter().all(|&l| l == 1e-3 * 0.1));
    assert_eq!(t.learning_rates(), (1e-3 * 0.1, 1e-4 * 0.1));
}

#[test]
fn same_seed_same_metrics_and_outputs() {
    let ds = dataset(40);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let mut ta = trainer(tiny_train());
    let mut tb = trainer(tiny_train());
    ta.train(&ds, Some(&a)).unwrap();
    tb.train(&ds, Some(&b)).unwrap();
    for f in ["metrics.tsv", "steps.tsv", "best.ckpt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let metrics = std::fs::read_to_string(a.join("metrics.tsv")).unwrap();
    assert!(metrics.starts_with("epoch\tsmooth_l1\tgiou\tdistill_img\tdistill_txt\ttotal\tval_acc\n"));
    assert_eq!(metrics.lines().count(), 3);
    assert_eq!(student_bits(&ta), student_bits(&tb));
}

fn resume_matches(cfg: TrainConfig) {
    let ds = dataset(24);
    let b = batch(&ds, 4);
    let mut t = trainer(cfg);
    t.train_step(&b).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    t.save_checkpoint(&path).unwrap();
    let frozen_teacher = t.config.teacher_frozen.then(|| t.teacher.clone()).flatten();
    let mut r = Trainer::load_checkpoint(&path, frozen_teacher).unwrap();
    let la = t.train_step(&b).unwrap();
    let lb = r.train_step(&b).unwrap();
    assert_eq!(la, lb);
    assert_eq!(student_bits(&t), student_bits(&r));
    if t.teacher.is_some() {
        assert_eq!(teacher_bits(&t), teacher_bits(&r));
    }
    assert_eq!((t.step, t.epoch), (r.step, r.epoch));
}

#[test]
fn save_load_step_equals_uninterrupted_step() {
    resume_matches(tiny_train());
    resume_matches(TrainConfig {
        teacher_frozen: false,
        ..tiny_train()
    });
    resume_matches(TrainConfig {
        distill: DistillMode::NONE,
        ..tiny_train()
    });
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let t = trainer(tiny_train());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    t.save_checkpoint(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(Trainer::load_checkpoint(&path, t.teacher.clone()), Err(Error::Integrity(_))));
    let mut foreign = bytes.clone();
    foreign[..5].copy_from_slice(b"NOPE!");
    std::fs::write(&path, &foreign).unwrap();
    assert!(matches!(Trainer::load_checkpoint(&path, t.teacher.clone()), Err(Error::Format(_))));
    assert!(matches!(Container::<f64>::decode(&bytes, "OTHER"), Err(Error::Format(_))));
    assert!(Container::<f64>::decode(&bytes, STUDENT_MAGIC).is_ok());
}

#[test]
fn frozen_teacher_survives_training_and_unfrozen_moves() {
    let ds = dataset(24);
    let b = batch(&ds, 4);
    let mut frozen = trainer(tiny_train());
    let snap = frozen.teacher.as_ref().unwrap().snapshot();
    for _ in 0..10 {
        frozen.train_step(&b).unwrap();
    }
    let report = frozen.teacher.as_ref().unwrap().assert_frozen(&snap).unwrap();
    assert!(report.passed && report.identical);

    let mut live = trainer(TrainConfig {
        teacher_frozen: false,
        ..tiny_train()
    });
    let snap = live.teacher.as_ref().unwrap().snapshot();
    live.train_step(&b).unwrap();
    let report = live.teacher.as_ref().unwrap().assert_frozen(&snap).unwrap();
    assert!(!report.identical);
    assert!(report.drifts.iter().any(|d| d.max_drift > 0.0));
}

#[test]
fn frozen_teacher_gets_no_gradient() {
    let t = tiny_teacher();
    let mut t2 = t.clone();
    t2.freeze();
    let mut g = Graph::new();
    let bound = t2.bind(&mut g);
    let mut ctx = epmvg_core::model::Ctx::eval(&mut g, &bound);
    let ids = Vocab::standard().tokenize("red circle", 6);
    let e = t2.encode_text(&mut ctx, &ids).unwrap();
    let loss = g.sum(e);
    // Nothing on the tape requires a gradient, so backward yields none for
    // any teacher parameter.
    let grads = g.backward(loss).unwrap();
    assert!(bound.vars().iter().all(|&v| grads.get(v).is_none()));
    assert!(t2.clone().params_mut().is_err());
}

#[test]
fn teacher_text_ignores_padding_suffix_and_image_is_deterministic() {
    let t = tiny_teacher();
    let v = Vocab::standard();
    let short = v.tokenize("red", 6);
    let a = t.teacher_encode_text(&short).unwrap();
    // Changing the embedding of the pad token only affects masked keys and
    // the pad rows themselves, never the [CLS] read-out.
    let mut u = t.clone();
    u.unfreeze();
    let ps = u.params_mut().unwrap();
    let emb = ps.entries_mut().iter_mut().find(|e| e.name.ends_with("embedding")).unwrap();
    let width = emb.tensor.shape()[1];
    emb.tensor.data_mut()[..width].iter_mut().for_each(|x| *x += 1.0);
    assert_eq!(a.data(), u.teacher_encode_text(&short).unwrap().data());
    assert_eq!(a.shape(), [12]);

    let ds = dataset(4);
    let s = &ds.samples[0];
    let e1 = t.embed_sample(s, &v).unwrap();
    let e2 = t.embed_sample(s, &v).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(e1.die.shape(), [12]);
}

#[test]
fn contrastive_loss_at_uniform_logits_is_log_batch() {
    let mut g = Graph::new();
    let v: Vec<_> = (0..5)
        .map(|_| g.constant(&epmvg_core::numcore::Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap()))
        .collect();
    let s = g.constant_scalar(0.7);
    let l = contrastive_loss(&mut g, &v, &v, s).unwrap();
    assert!((g.scalar(l) - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn step_requires_a_nonempty_batch() {
    let mut t = trainer(tiny_train());
    assert!(matches!(t.train_step(&[]), Err(Error::Contract(_))));
}
