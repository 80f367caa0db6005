//! Two-tower image/text teacher, its contrastive pretraining, pooling to the
//! student width and the freeze contract.

use std::path::Path;

use epmvg_core::checkpoint::{Container, TEACHER_MAGIC};
use epmvg_core::data::{preprocess_image, Sample, Vocab};
use epmvg_core::kv::{format_f64, format_list, parse_list, parse_value, KvConfig};
use epmvg_core::model::layers::{Conv2d, Encoder, Linear};
use epmvg_core::model::{Bound, Ctx, Initializer, ParamGroup, ParamId, ParamSet};
use epmvg_core::numcore::{Graph, Tensor, Var};
use epmvg_core::rng::{stream_rng, Stream};
use epmvg_core::model::key_mask;
use epmvg_core::{Error, Real, Result};

use crate::optim::{AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    pub image_size: usize,
    pub stem_channels: Vec<usize>,
    pub hidden: usize,
    /// Embedding width `d`.
    pub embed_dim: usize,
    pub text_dim: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub ffn_dim: usize,
    /// Initial value of the log inverse temperature.
    pub init_logit_scale: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            stem_channels: vec![8, 16, 32],
            hidden: 64,
            embed_dim: 48,
            text_dim: 32,
            max_tokens: 20,
            vocab_size: Vocab::standard().len(),
            text_layers: 1,
            text_heads: 2,
            ffn_dim: 64,
            init_logit_scale: (1.0f64 / 0.07).ln(),
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("image_size", self.image_size),
            ("hidden", self.hidden),
            ("embed_dim", self.embed_dim),
            ("text_dim", self.text_dim),
            ("max_tokens", self.max_tokens),
            ("vocab_size", self.vocab_size),
            ("text_heads", self.text_heads),
            ("ffn_dim", self.ffn_dim),
        ];
        for (k, v) in pos {
            if v == 0 {
                return Err(Error::Config(format!("teacher {k} must be positive")));
            }
        }
        if self.stem_channels.is_empty() {
            return Err(Error::Config("teacher needs at least one stem stage".into()));
        }
        if !self.text_dim.is_multiple_of(self.text_heads) {
            return Err(Error::Config(format!(
                "teacher text_dim {} is not divisible by text_heads {}",
                self.text_dim, self.text_heads
            )));
        }
        Ok(())
    }
}

impl KvConfig for TeacherConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "image_size" => self.image_size = parse_value(key, value)?,
            "stem_channels" => self.stem_channels = parse_list(key, value)?,
            "hidden" => self.hidden = parse_value(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "text_dim" => self.text_dim = parse_value(key, value)?,
            "max_tokens" => self.max_tokens = parse_value(key, value)?,
            "vocab_size" => self.vocab_size = parse_value(key, value)?,
            "text_layers" => self.text_layers = parse_value(key, value)?,
            "text_heads" => self.text_heads = parse_value(key, value)?,
            "ffn_dim" => self.ffn_dim = parse_value(key, value)?,
            "init_logit_scale" => self.init_logit_scale = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(String, String)> {
        [
            ("image_size", self.image_size.to_string()),
            ("stem_channels", format_list(&self.stem_channels)),
            ("hidden", self.hidden.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("text_dim", self.text_dim.to_string()),
            ("max_tokens", self.max_tokens.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("text_layers", self.text_layers.to_string()),
            ("text_heads", self.text_heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("init_logit_scale", format_f64(self.init_logit_scale)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

#[derive(Clone, Debug)]
struct TeacherArch {
    stem: Vec<Conv2d>,
    image_fc: [Linear; 2],
    embedding: ParamId,
    text_pos: ParamId,
    encoder: Encoder,
    text_proj: Linear,
    logit_scale: ParamId,
}

/// `[DIE]` and `[DTE]` for one (image, expression) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherEmbeddings<T> {
    pub die: Tensor<T>,
    pub dte: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct TeacherModel<T> {
    config: TeacherConfig,
    params: ParamSet<T>,
    arch: TeacherArch,
    frozen: bool,
}

impl<T: Real> TeacherModel<T> {
    pub fn new(config: TeacherConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        // Index 1 keeps the teacher's draws apart from the student's.
        let mut init = Initializer::new(stream_rng(seed, Stream::Init, 1));
        let mut ps = ParamSet::new();
        let g = ParamGroup::Base;
        let c = &config;
        let mut stem = Vec::new();
        let mut in_ch = 3;
        for (i, &out) in c.stem_channels.iter().enumerate() {
            stem.push(Conv2d::new(&mut ps, &mut init, &format!("image.stem.{i}"), in_ch, out, 3, 2, g));
            in_ch = out;
        }
        let image_fc = [
            Linear::new(&mut ps, &mut init, "image.fc.0", in_ch, c.hidden, g),
            Linear::new(&mut ps, &mut init, "image.fc.1", c.hidden, c.embed_dim, g),
        ];
        let embedding = ps.register(
            "text.embedding",
            g,
            init.xavier(vec![c.vocab_size, c.text_dim], c.vocab_size, c.text_dim),
        );
        let text_pos = ps.register(
            "text.pos",
            g,
            init.xavier(vec![c.max_tokens, c.text_dim], c.max_tokens, c.text_dim),
        );
        let encoder = Encoder::new(
            &mut ps,
            &mut init,
            "text.encoder",
            c.text_layers,
            c.text_dim,
            c.text_heads,
            c.ffn_dim,
            g,
        );
        let text_proj = Linear::new(&mut ps, &mut init, "text.proj", c.text_dim, c.embed_dim, g);
        let logit_scale = ps.register("logit_scale", g, Tensor::full(vec![1], T::lit(c.init_logit_scale)));
        Ok(Self {
            config,
            params: ps,
            arch: TeacherArch {
                stem,
                image_fc,
                embedding,
                text_pos,
                encoder,
                text_proj,
                logit_scale,
            },
            frozen: false,
        })
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    /// Mutable parameter access for the unfrozen ablation. Refused while
    /// frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamSet<T>> {
        if self.frozen {
            return Err(Error::Contract("teacher is frozen".into()));
        }
        Ok(&mut self.params)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Binds the parameters; a frozen teacher is always bound as constants.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.params.bind(g, !self.frozen)
    }

    /// Image `[3, S, S]` to `[DIE]` of width `d`.
    pub fn encode_image(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<Var> {
        let s = self.config.image_size;
        if ctx.g.shape(image) != [3, s, s] {
            return Err(Error::Dimension(format!(
                "teacher expects [3, {s}, {s}], got {:?}",
                ctx.g.shape(image)
            )));
        }
        let mut z = image;
        for conv in &self.arch.stem {
            z = conv.forward(ctx, z)?;
            z = ctx.g.relu(z);
        }
        let (c, h, w) = match *ctx.g.shape(z) {
            [c, h, w] => (c, h, w),
            _ => unreachable!("conv output is rank 3"),
        };
        let flat = ctx.g.reshape(z, vec![c, h * w])?;
        let pooled = ctx.g.mean_last(flat);
        let [fc0, fc1] = &self.arch.image_fc;
        let hdn = fc0.forward_vec(ctx, pooled)?;
        let hdn = ctx.g.relu(hdn);
        fc1.forward_vec(ctx, hdn)
    }

    /// Token ids (length `max_tokens`) to `[DTE]`, read from the `[CLS]`
    /// position.
    pub fn encode_text(&self, ctx: &mut Ctx<'_, T>, ids: &[usize]) -> Result<Var> {
        let c = &self.config;
        if ids.len() != c.max_tokens {
            return Err(Error::Dimension(format!(
                "teacher expects {} token ids, got {}",
                c.max_tokens,
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= c.vocab_size) {
            return Err(Error::Data(format!("token id {bad} outside teacher vocabulary")));
        }
        let mask = key_mask(ids);
        let emb = ctx.g.gather_rows(ctx.p(self.arch.embedding), ids)?;
        let x = ctx.g.add(emb, ctx.p(self.arch.text_pos))?;
        let out = self.arch.encoder.forward(ctx, x, Some(&mask))?;
        let cls = ctx.g.row(out, 0)?;
        self.arch.text_proj.forward_vec(ctx, cls)
    }

    pub fn logit_scale(&self, ctx: &Ctx<'_, T>) -> Var {
        ctx.p(self.arch.logit_scale)
    }

    /// Inference-only `[DIE]` of an image already at the teacher's size.
    pub fn teacher_encode_image(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let mut ctx = Ctx::eval(&mut g, &b);
        let x = ctx.g.constant(image);
        let out = self.encode_image(&mut ctx, x)?;
        Ok(g.tensor(out))
    }

    pub fn teacher_encode_text(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let mut ctx = Ctx::eval(&mut g, &b);
        let out = self.encode_text(&mut ctx, ids)?;
        Ok(g.tensor(out))
    }

    /// Embeddings for a dataset sample: its image letterboxed to the teacher
    /// size and its expression.
    pub fn embed_sample(&self, sample: &Sample, vocab: &Vocab) -> Result<TeacherEmbeddings<T>> {
        let (img, _) = preprocess_image(&sample.image, self.config.image_size)?;
        Ok(TeacherEmbeddings {
            die: self.teacher_encode_image(&img.cast())?,
            dte: self.teacher_encode_text(&vocab.tokenize(&sample.expression, self.config.max_tokens))?,
        })
    }

    pub fn snapshot(&self) -> TeacherSnapshot<T> {
        TeacherSnapshot {
            tensors: self.params.named_tensors(),
        }
    }

    /// Byte-level comparison against `snapshot`. In frozen mode the report
    /// passes only when every tensor is identical.
    pub fn assert_frozen(&self, snapshot: &TeacherSnapshot<T>) -> Result<FreezeReport> {
        let current = self.params.named_tensors();
        if current.len() != snapshot.tensors.len() {
            return Err(Error::Contract(format!(
                "snapshot has {} tensors, teacher has {}",
                snapshot.tensors.len(),
                current.len()
            )));
        }
        let mut drifts = Vec::with_capacity(current.len());
        for ((name, now), (snap_name, then)) in current.iter().zip(&snapshot.tensors) {
            if name != snap_name || now.shape() != then.shape() {
                return Err(Error::Contract(format!(
                    "snapshot tensor {snap_name} {:?} does not match teacher tensor {name} {:?}",
                    then.shape(),
                    now.shape()
                )));
            }
            let drift = now
                .data()
                .iter()
                .zip(then.data())
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max);
            drifts.push(TensorDrift {
                name: name.clone(),
                identical: now.bit_eq(then),
                max_drift: drift,
            });
        }
        let identical = drifts.iter().all(|d| d.identical);
        Ok(FreezeReport {
            frozen: self.frozen,
            identical,
            passed: identical || !self.frozen,
            drifts,
        })
    }

    pub fn to_container(&self) -> Container<T> {
        let mut config = self.config.pairs();
        config.push(("frozen".into(), self.frozen.to_string()));
        Container {
            config,
            tensors: self.params.named_tensors(),
        }
    }

    pub fn from_container(c: Container<T>) -> Result<Self> {
        let mut config = TeacherConfig::default();
        let mut frozen = true;
        for (k, v) in &c.config {
            if k == "frozen" {
                frozen = parse_value(k, v)?;
            } else if !config.set(k, v)? {
                return Err(Error::Format(format!("unknown teacher configuration key {k:?}")));
            }
        }
        let mut m = Self::new(config, 0)?;
        m.params.assign_named(c.tensors)?;
        m.frozen = frozen;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path, TEACHER_MAGIC)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path, TEACHER_MAGIC)?)
    }
}

#[derive(Clone, Debug)]
pub struct TeacherSnapshot<T> {
    pub tensors: Vec<(String, Tensor<T>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorDrift {
    pub name: String,
    pub identical: bool,
    pub max_drift: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FreezeReport {
    pub frozen: bool,
    pub identical: bool,
    pub passed: bool,
    pub drifts: Vec<TensorDrift>,
}

impl FreezeReport {
    pub fn changed(&self) -> Vec<&TensorDrift> {
        self.drifts.iter().filter(|d| !d.identical).collect()
    }
}

/// Adaptive average pooling of a teacher vector `[d]` to width `out`.
pub fn pool_to_dim<T: Real>(g: &mut Graph<T>, v: Var, out: usize) -> Result<Var> {
    g.adaptive_avg_pool1d(v, out)
}

/// [`pool_to_dim`] on plain values.
pub fn pool_to_dim_values<T: Real>(v: &Tensor<T>, out: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(v);
    let y = pool_to_dim(&mut g, x, out)?;
    Ok(g.tensor(y))
}

fn unit<T: Real>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    let sq = g.mul(v, v)?;
    let ss = g.sum(sq);
    let ss = g.clamp_min(ss, T::lit(epmvg_core::losses::EPS * epmvg_core::losses::EPS));
    let n = g.sqrt(ss);
    let one = g.constant_scalar(T::one());
    let inv = g.div(one, n)?;
    g.mul_scalar_var(v, inv)
}

/// Cosine-similarity matrix `[B, B]` between image and text embeddings.
pub fn similarity<T: Real>(g: &mut Graph<T>, images: &[Var], texts: &[Var]) -> Result<Var> {
    let rows = |g: &mut Graph<T>, vs: &[Var]| -> Result<Var> {
        let mut out = Vec::with_capacity(vs.len());
        for &v in vs {
            let u = unit(g, v)?;
            let d = g.shape(u)[0];
            out.push(g.reshape(u, vec![1, d])?);
        }
        g.concat(&out)
    };
    let i = rows(g, images)?;
    let t = rows(g, texts)?;
    let tt = g.transpose(t)?;
    g.matmul(i, tt)
}

/// Symmetric in-batch cross-entropy over `exp(logit_scale) * cos` logits.
pub fn contrastive_loss<T: Real>(g: &mut Graph<T>, images: &[Var], texts: &[Var], logit_scale: Var) -> Result<Var> {
    if images.len() < 2 || images.len() != texts.len() {
        return Err(Error::Config(format!(
            "contrastive loss needs matched batches of at least 2, got {} images and {} texts",
            images.len(),
            texts.len()
        )));
    }
    let sim = similarity(g, images, texts)?;
    let s = g.reshape(logit_scale, vec![1])?;
    let s = g.index(s, 0)?;
    let temp = g.exp(s);
    let logits = g.mul_scalar_var(sim, temp)?;
    let li = g.log_softmax_rows(logits)?;
    let lt_in = g.transpose(logits)?;
    let lt = g.log_softmax_rows(lt_in)?;
    let di = g.diag(li)?;
    let dt = g.diag(lt)?;
    let a = g.mean(di);
    let b = g.mean(dt);
    let sum = g.add(a, b)?;
    Ok(g.scale(sum, T::lit(-0.5)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 16,
            lr: 2e-3,
            weight_decay: 1e-4,
            adam: AdamWConfig::default(),
        }
    }
}

impl KvConfig for PretrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            _ => return self.adam.set(key, value),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("epochs".to_string(), self.epochs.to_string()),
            ("batch_size".to_string(), self.batch_size.to_string()),
            ("lr".to_string(), format_f64(self.lr)),
            ("weight_decay".to_string(), format_f64(self.weight_decay)),
        ];
        out.extend(self.adam.pairs());
        out
    }
}

/// Per-epoch mean contrastive loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainLog {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

struct PairBatch<T> {
    images: Vec<Tensor<T>>,
    ids: Vec<Vec<usize>>,
}

fn pair_batch<T: Real>(samples: &[&Sample], cfg: &TeacherConfig, vocab: &Vocab) -> Result<PairBatch<T>> {
    let mut images = Vec::with_capacity(samples.len());
    let mut ids = Vec::with_capacity(samples.len());
    for s in samples {
        if s.caption.is_empty() {
            return Err(Error::Data(format!("sample {} has no caption for teacher pretraining", s.id)));
        }
        let (img, _) = preprocess_image(&s.image, cfg.image_size)?;
        images.push(img.cast());
        ids.push(vocab.tokenize(&s.caption, cfg.max_tokens));
    }
    Ok(PairBatch { images, ids })
}

impl<T: Real> TeacherModel<T> {
    /// Mean contrastive loss of one batch of (image, caption) pairs; trains
    /// one step when `opt` is given.
    fn contrastive_step(
        &mut self,
        batch: &PairBatch<T>,
        opt: Option<(&mut AdamW<T>, f64, f64)>,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, opt.is_some());
        let mut ctx = Ctx::eval(&mut g, &b);
        let mut iv = Vec::new();
        let mut tv = Vec::new();
        for (img, ids) in batch.images.iter().zip(&batch.ids) {
            let x = ctx.g.constant(img);
            iv.push(self.encode_image(&mut ctx, x)?);
            tv.push(self.encode_text(&mut ctx, ids)?);
        }
        let scale = self.logit_scale(&ctx);
        let loss = contrastive_loss(ctx.g, &iv, &tv, scale)?;
        let value = g.scalar(loss).as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("teacher contrastive loss {value}")));
        }
        if let Some((opt, lr, wd)) = opt {
            let grads = g.backward(loss)?;
            opt.update(&mut self.params, |i| grads.get(b.vars()[i]), |_| lr, wd)?;
        }
        Ok(value)
    }

    /// Contrastive loss of `samples` without training.
    pub fn contrastive_loss_on(&mut self, samples: &[&Sample], vocab: &Vocab) -> Result<f64> {
        let batch = pair_batch(samples, &self.config, vocab)?;
        self.contrastive_step(&batch, None)
    }
}

/// Trains both towers from scratch on `(image, caption)` pairs and returns
/// the frozen teacher.
pub fn pretrain_teacher(
    samples: &[&Sample],
    vocab: &Vocab,
    config: TeacherConfig,
    train: &PretrainConfig,
    seed: u64,
) -> Result<(TeacherModel<f64>, PretrainLog)> {
    use rand::seq::SliceRandom;
    if train.batch_size < 2 {
        return Err(Error::Config(format!(
            "contrastive pretraining needs batch_size >= 2, got {}",
            train.batch_size
        )));
    }
    if samples.len() < 2 {
        return Err(Error::Config("contrastive pretraining needs at least 2 pairs".into()));
    }
    let mut model = TeacherModel::new(config, seed)?;
    let mut opt = AdamW::new(&model.params, train.adam);
    let mut log = PretrainLog::default();
    for epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        // Index offset keeps these shuffles distinct from the student's.
        order.shuffle(&mut stream_rng(seed, Stream::Shuffle, (1 << 32) + epoch as u64));
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in order.chunks(train.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let picked: Vec<&Sample> = chunk.iter().map(|&i| samples[i]).collect();
            let batch = pair_batch(&picked, &model.config, vocab)?;
            let l = model.contrastive_step(&batch, Some((&mut opt, train.lr, train.weight_decay)))?;
            log.step_losses.push(l);
            sum += l;
            count += 1;
        }
        log.epoch_losses.push(sum / count.max(1) as f64);
    }
    model.freeze();
    Ok((model, log))
}

/// In-batch top-1 retrieval accuracy in both directions over consecutive
/// batches of `batch_size` held-out pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalReport {
    pub image_to_text: f64,
    pub text_to_image: f64,
    pub batches: usize,
}

pub fn retrieval_accuracy<T: Real>(
    teacher: &TeacherModel<T>,
    samples: &[&Sample],
    vocab: &Vocab,
    batch_size: usize,
) -> Result<RetrievalReport> {
    if batch_size < 2 {
        return Err(Error::Config("retrieval needs batch_size >= 2".into()));
    }
    let (mut i2t, mut t2i, mut n, mut batches) = (0usize, 0usize, 0usize, 0usize);
    for chunk in samples.chunks(batch_size) {
        if chunk.len() < batch_size {
            continue;
        }
        let batch = pair_batch::<T>(chunk, &teacher.config, vocab)?;
        let mut g = Graph::new();
        let b = teacher.params.bind(&mut g, false);
        let mut ctx = Ctx::eval(&mut g, &b);
        let mut iv = Vec::new();
        let mut tv = Vec::new();
        for (img, ids) in batch.images.iter().zip(&batch.ids) {
            let x = ctx.g.constant(img);
            iv.push(teacher.encode_image(&mut ctx, x)?);
            tv.push(teacher.encode_text(&mut ctx, ids)?);
        }
        let sim = similarity(ctx.g, &iv, &tv)?;
        let s: Vec<f64> = g.value(sim).iter().map(|v| v.as_f64()).collect();
        let k = chunk.len();
        let argmax = |it: &mut dyn Iterator<Item = f64>| {
            it.enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, v)| if v > best.1 { (j, v) } else { best })
                .0
        };
        for r in 0..k {
            if argmax(&mut (0..k).map(|c| s[r * k + c])) == r {
                i2t += 1;
            }
            if argmax(&mut (0..k).map(|c| s[c * k + r])) == r {
                t2i += 1;
            }
        }
        n += k;
        batches += 1;
    }
    if n == 0 {
        return Err(Error::Config(format!("fewer than {batch_size} held-out pairs")));
    }
    Ok(RetrievalReport {
        image_to_text: i2t as f64 / n as f64,
        text_to_image: t2i as f64 / n as f64,
        batches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_examples() {
        let v = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pool_to_dim_values(&v, 2).unwrap().data(), &[1.5, 3.5]);
        assert_eq!(pool_to_dim_values(&v, 4).unwrap().data(), v.data());
        let v = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(pool_to_dim_values(&v, 2).unwrap().data(), &[1.5, 2.5]);
        assert!(matches!(pool_to_dim_values(&v, 0), Err(Error::Parameter(_))));
    }

    fn tiny() -> TeacherConfig {
        TeacherConfig {
            image_size: 16,
            stem_channels: vec![4, 4],
            hidden: 8,
            embed_dim: 6,
            text_dim: 4,
            max_tokens: 6,
            text_heads: 2,
            ffn_dim: 8,
            ..TeacherConfig::default()
        }
    }

    #[test]
    fn towers_have_width_d_and_ignore_padding_suffix() {
        let t: TeacherModel<f64> = TeacherModel::new(tiny(), 3).unwrap();
        let img = Tensor::full(vec![3, 16, 16], 0.3);
        assert_eq!(t.teacher_encode_image(&img).unwrap().shape(), &[6]);
        let a = t.teacher_encode_text(&[1, 5, 6, 0, 0, 0]).unwrap();
        assert_eq!(a.shape(), &[6]);
        // Same tokens, same padding: identical.
        assert!(a.bit_eq(&t.teacher_encode_text(&[1, 5, 6, 0, 0, 0]).unwrap()));
        assert!(matches!(t.teacher_encode_image(&Tensor::zeros(vec![3, 8, 8])), Err(Error::Dimension(_))));
    }

    #[test]
    fn snapshot_mismatch_is_an_error() {
        let a: TeacherModel<f64> = TeacherModel::new(tiny(), 3).unwrap();
        let b: TeacherModel<f64> = TeacherModel::new(TeacherConfig { text_layers: 2, ..tiny() }, 3).unwrap();
        assert!(matches!(a.assert_frozen(&b.snapshot()), Err(Error::Contract(_))));
        let mut a = a;
        a.freeze();
        let r = a.assert_frozen(&a.snapshot()).unwrap();
        assert!(r.passed && r.identical);
        assert!(a.params_mut().is_err());
    }

    #[test]
    fn contrastive_loss_needs_two() {
        let mut g: Graph<f64> = Graph::new();
        let v = g.constant_from(vec![3], vec![1.0, 0.0, 0.0]).unwrap();
        let s = g.constant_from(vec![1], vec![0.0]).unwrap();
        assert!(matches!(contrastive_loss(&mut g, &[v], &[v], s), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_logits_give_ln_batch() {
        // Identical embeddings everywhere: every logit equal.
        let mut g: Graph<f64> = Graph::new();
        let v = g.constant_from(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = g.constant_from(vec![1], vec![2.0]).unwrap();
        let l = contrastive_loss(&mut g, &[v; 5], &[v; 5], s).unwrap();
        assert!((g.scalar(l) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn container_round_trip() {
        let mut t: TeacherModel<f64> = TeacherModel::new(tiny(), 9).unwrap();
        t.freeze();
        let back = TeacherModel::<f64>::from_container(
            Container::decode(&t.to_container().encode(TEACHER_MAGIC), TEACHER_MAGIC).unwrap(),
        )
        .unwrap();
        assert!(back.is_frozen());
        assert!(back.assert_frozen(&t.snapshot()).unwrap().identical);
        assert_eq!(back.config(), t.config());
    }
}
