//! Finite-difference suites over the tape operations, every loss and the
//! full student forward pass. Test points avoid kinks (ReLU at 0, `|x|` at 0,
//! min/max ties) by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::vocab::PAD_ID;
use crate::error::Result;
use crate::losses::{
    batch_objective, combine, cosine_loss, distillation_terms, giou_loss, l1_distance, smooth_l1, DistillKind,
    DistillMode, LossWeights, Modality, SampleTerms,
};
use crate::model::{BoundingBox, Ctx, ModelConfig, StudentModel};
use crate::numcore::{finite_diff_check, FdConfig, FdReport, Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub name: String,
    pub report: FdReport,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.report.passed
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

/// Values in `[-2, 2]` kept at least `margin` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(margin..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

struct Runner {
    cfg: FdConfig,
    out: Vec<SuiteOutcome>,
}

impl Runner {
    fn check<F>(&mut self, name: &str, x: &Tensor<f64>, f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
    {
        let report = finite_diff_check(f, x, self.cfg)?;
        self.out.push(SuiteOutcome {
            name: name.to_string(),
            report,
        });
        Ok(())
    }
}

/// Weighted sum with fixed coefficients, so every output element matters.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let n: usize = g.shape(y).iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wv = g.constant_from(g.shape(y).to_vec(), w)?;
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

pub fn op_suites(seed: u64, cfg: FdConfig) -> Result<Vec<SuiteOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = Runner { cfg, out: Vec::new() };

    let a = uniform(&mut rng, &[3, 5], -2.0, 2.0);
    let b = uniform(&mut rng, &[5, 4], -2.0, 2.0);
    let x = Tensor::new(vec![35], [a.data(), b.data()].concat())?;
    r.check("matmul", &x, |g, v| {
        let a = g.narrow(v, 0, vec![3, 5])?;
        let b = g.narrow(v, 15, vec![5, 4])?;
        let y = g.matmul(a, b)?;
        probe(g, y, 1)
    })?;

    let x = uniform(&mut rng, &[4, 6], -2.0, 2.0);
    r.check("transpose+add_row+add_col", &x, |g, v| {
        let t = g.transpose(v)?;
        let row = g.narrow(v, 0, vec![4])?;
        let y = g.add_row(t, row)?;
        let col = g.narrow(v, 4, vec![6])?;
        let y = g.add_col(y, col)?;
        probe(g, y, 2)
    })?;

    let x = uniform(&mut rng, &[2, 6], 0.2, 2.0);
    r.check("elementwise", &x, |g, v| {
        let a = g.narrow(v, 0, vec![6])?;
        let b = g.narrow(v, 6, vec![6])?;
        let m = g.mul(a, b)?;
        let d = g.div(a, b)?;
        let s = g.sub(m, d)?;
        let e = g.exp(s);
        let l = g.ln(b);
        let q = g.sqrt(a);
        let y = g.add(e, l)?;
        let y = g.add(y, q)?;
        let y = g.add_scalar(y, 0.5);
        let y = g.scale(y, 0.3);
        probe(g, y, 3)
    })?;

    let x = away_from_zero(&mut rng, &[8], 0.05);
    r.check("relu+abs+sigmoid+smooth_l1+clamp_min", &x, |g, v| {
        let a = g.relu(v);
        let b = g.abs(v);
        let c = g.sigmoid(v);
        let d = g.smooth_l1(v);
        let e = g.clamp_min(v, 0.0);
        let y = g.add(a, b)?;
        let y = g.add(y, c)?;
        let y = g.add(y, d)?;
        let y = g.add(y, e)?;
        probe(g, y, 4)
    })?;

    // Distinct pairs so neither min nor max sits on a tie.
    let mut pair = away_from_zero(&mut rng, &[8], 0.05);
    for i in 0..4 {
        let d = pair.data()[i] - pair.data()[i + 4];
        if d.abs() < 0.05 {
            pair.data_mut()[i + 4] += 0.2;
        }
    }
    r.check("minimum+maximum", &pair, |g, v| {
        let a = g.narrow(v, 0, vec![4])?;
        let b = g.narrow(v, 4, vec![4])?;
        let lo = g.minimum(a, b)?;
        let hi = g.maximum(a, b)?;
        let hi2 = g.mul(hi, hi)?;
        let y = g.add(lo, hi2)?;
        probe(g, y, 5)
    })?;

    let x = uniform(&mut rng, &[5], -2.0, 2.0);
    r.check("mul_scalar_var+sum+mean", &x, |g, v| {
        let s = g.index(v, 2)?;
        let y = g.mul_scalar_var(v, s)?;
        let t = g.sum(y);
        let m = g.mean(y);
        let m = g.mul(m, m)?;
        g.add(t, m)
    })?;

    let x = uniform(&mut rng, &[4, 5], -2.0, 2.0);
    r.check("softmax axis 0/1", &x, |g, v| {
        let a = g.softmax(v, 0)?;
        let b = g.softmax(v, 1)?;
        let y = g.add(a, b)?;
        probe(g, y, 6)
    })?;
    r.check("masked_softmax_rows", &x, |g, v| {
        let y = g.masked_softmax_rows(v, Some(&[true, false, true, true, false]))?;
        probe(g, y, 7)
    })?;
    r.check("log_softmax_rows+diag", &Tensor::new(vec![4, 4], x.data()[..16].to_vec())?, |g, v| {
        let y = g.log_softmax_rows(v)?;
        let d = g.diag(y)?;
        let s = g.sum(d);
        let p = probe(g, y, 8)?;
        g.add(s, p)
    })?;

    let x = uniform(&mut rng, &[3 * 6 + 12], -2.0, 2.0);
    r.check("layer_norm", &x, |g, v| {
        let x = g.narrow(v, 0, vec![3, 6])?;
        let gain = g.narrow(v, 18, vec![6])?;
        let bias = g.narrow(v, 24, vec![6])?;
        let y = g.layer_norm(x, gain, bias, 1e-5)?;
        probe(g, y, 9)
    })?;

    let x = uniform(&mut rng, &[2, 5, 5], -2.0, 2.0);
    r.check("im2col", &x, |g, v| {
        let y = g.im2col(v, 3, 2, 1)?;
        probe(g, y, 10)
    })?;

    let x = uniform(&mut rng, &[7], -2.0, 2.0);
    for out in [3, 7, 10] {
        r.check(&format!("adaptive_avg_pool1d 7->{out}"), &x, move |g, v| {
            let y = g.adaptive_avg_pool1d(v, out)?;
            probe(g, y, 11)
        })?;
    }

    let x = uniform(&mut rng, &[5, 3], -2.0, 2.0);
    r.check("gather_rows+reshape+slice/concat", &x, |g, v| {
        let rows = g.gather_rows(v, &[4, 0, 4, 2])?;
        let r0 = g.row(rows, 1)?;
        let c = g.slice_cols(rows, 1, 2)?;
        let c1 = g.column(rows, 0)?;
        let c1 = g.reshape(c1, vec![4, 1])?;
        let cc = g.concat_cols(&[c, c1])?;
        let r0 = g.reshape(r0, vec![1, 3])?;
        let y = g.concat(&[cc, r0])?;
        probe(g, y, 12)
    })?;

    let x = uniform(&mut rng, &[6, 4], -2.0, 2.0);
    r.check("mean_last", &x, |g, v| {
        let y = g.mean_last(v);
        probe(g, y, 13)
    })?;

    let x = uniform(&mut rng, &[10], -2.0, 2.0);
    r.check("dropout (fixed mask)", &x, |g, v| {
        let mut d = ChaCha8Rng::seed_from_u64(99);
        let y = g.dropout(v, 0.3, &mut d)?;
        probe(g, y, 14)
    })?;

    Ok(r.out)
}

fn boxes_point(a: BoundingBox<f64>, b: BoundingBox<f64>) -> Tensor<f64> {
    Tensor::new(vec![8], [a.to_array(), b.to_array()].concat()).expect("8 values")
}

pub fn loss_suites(seed: u64, cfg: FdConfig) -> Result<Vec<SuiteOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = Runner { cfg, out: Vec::new() };
    let overlap = boxes_point(
        BoundingBox::new(0.45, 0.52, 0.30, 0.25),
        BoundingBox::new(0.50, 0.48, 0.22, 0.31),
    );
    let disjoint = boxes_point(
        BoundingBox::new(0.20, 0.25, 0.10, 0.12),
        BoundingBox::new(0.70, 0.65, 0.20, 0.25),
    );
    let split = |g: &mut Graph<f64>, v: Var| -> Result<(Var, Var)> { Ok((g.narrow(v, 0, vec![4])?, g.narrow(v, 4, vec![4])?)) };

    for (label, x) in [("overlapping", &overlap), ("disjoint", &disjoint)] {
        r.check(&format!("smooth_l1 {label}"), x, |g, v| {
            let (p, t) = split(g, v)?;
            smooth_l1(g, p, t)
        })?;
        r.check(&format!("giou {label}"), x, |g, v| {
            let (p, t) = split(g, v)?;
            giou_loss(g, p, t)
        })?;
    }

    let x = uniform(&mut rng, &[16], -2.0, 2.0);
    r.check("cosine", &x, |g, v| {
        let a = g.narrow(v, 0, vec![8])?;
        let b = g.narrow(v, 8, vec![8])?;
        cosine_loss(g, a, b)
    })?;
    let mut x = uniform(&mut rng, &[16], -2.0, 2.0);
    for i in 0..8 {
        if (x.data()[i] - x.data()[i + 8]).abs() < 0.05 {
            x.data_mut()[i + 8] += 0.3;
        }
    }
    r.check("l1 distance", &x, |g, v| {
        let a = g.narrow(v, 0, vec![8])?;
        let b = g.narrow(v, 8, vec![8])?;
        l1_distance(g, a, b)
    })?;

    // Distillation combination: x = [vls, cls], teacher targets fixed.
    let teacher = uniform(&mut rng, &[16], -2.0, 2.0);
    let mut feats = uniform(&mut rng, &[16], -2.0, 2.0);
    for i in 0..16 {
        if (feats.data()[i] - teacher.data()[i]).abs() < 0.05 {
            feats.data_mut()[i] += 0.3;
        }
    }
    let w = LossWeights::default();
    for kind in [DistillKind::Cosine, DistillKind::L1] {
        for modality in [Modality::Both, Modality::ImageOnly, Modality::TextOnly] {
            let mode = DistillMode { modality, kind };
            let teacher = teacher.clone();
            r.check(&format!("distillation {kind} {modality}"), &feats, move |g, v| {
                let vls = g.narrow(v, 0, vec![8])?;
                let cls = g.narrow(v, 8, vec![8])?;
                let t = g.constant(&teacher);
                let ti = g.narrow(t, 0, vec![8])?;
                let tt = g.narrow(t, 8, vec![8])?;
                let d = distillation_terms(g, vls, cls, ti, tt, mode)?;
                d.weighted(g, &w)
            })?;
        }
    }

    // Total: x = [pred(4), vls(8), cls(8)].
    let x = Tensor::new(
        vec![20],
        [&overlap.data()[..4], feats.data()].concat(),
    )?;
    let gt = BoundingBox::new(0.50, 0.48, 0.22, 0.31).to_tensor();
    for lambda in [0.0, 1.0] {
        let w = LossWeights { lambda, ..LossWeights::default() };
        let (gt, teacher) = (gt.clone(), teacher.clone());
        r.check(&format!("total objective lambda={lambda}"), &x, move |g, v| {
            let p = g.narrow(v, 0, vec![4])?;
            let vls = g.narrow(v, 4, vec![8])?;
            let cls = g.narrow(v, 12, vec![8])?;
            let t = g.constant(&teacher);
            let ti = g.narrow(t, 0, vec![8])?;
            let tt = g.narrow(t, 8, vec![8])?;
            let d = distillation_terms(g, vls, cls, ti, tt, DistillMode::default())?;
            let target = g.constant(&gt);
            let s = smooth_l1(g, p, target)?;
            let gi = giou_loss(g, p, target)?;
            Ok(combine(g, s, gi, d, &w)?.total)
        })?;
    }
    Ok(r.out)
}

/// Batch-mean objective of a tiny student (D = 8, N_v = 4, N_l = 4) on two
/// samples, differentiated with respect to every parameter.
pub fn model_suite(seed: u64, cfg: FdConfig) -> Result<SuiteOutcome> {
    let config = ModelConfig::tiny();
    let model: StudentModel<f64> = StudentModel::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let s = config.image_size;
    let images = [uniform(&mut rng, &[3, s, s], 0.0, 1.0), uniform(&mut rng, &[3, s, s], 0.0, 1.0)];
    let ids = [vec![1, 5, 9, 7], vec![1, 12, PAD_ID, PAD_ID]];
    let targets = [
        BoundingBox::new(0.30, 0.40, 0.25, 0.20).to_tensor(),
        BoundingBox::new(0.65, 0.60, 0.15, 0.30).to_tensor(),
    ];
    let d = config.joint_dim;
    let teacher = [uniform(&mut rng, &[2 * d], -1.0, 1.0), uniform(&mut rng, &[2 * d], -1.0, 1.0)];
    let weights = LossWeights::default();
    let x = model.params().flatten();
    let rate = config.dropout;
    let f = |g: &mut Graph<f64>, flat: Var| -> Result<Var> {
        let bound = model.params().bind_flat(g, flat)?;
        let mut drop = ChaCha8Rng::seed_from_u64(seed ^ 0xd0);
        let mut ctx = Ctx::train(g, &bound, rate, &mut drop);
        let mut terms = Vec::new();
        for i in 0..2 {
            let img = ctx.g.constant(&images[i]);
            let out = model.forward(&mut ctx, img, &ids[i])?;
            let t = ctx.g.constant(&teacher[i]);
            let ti = ctx.g.narrow(t, 0, vec![d])?;
            let tt = ctx.g.narrow(t, d, vec![d])?;
            let distill = distillation_terms(ctx.g, out.vls, out.cls, ti, tt, DistillMode::default())?;
            let target = ctx.g.constant(&targets[i]);
            terms.push(SampleTerms {
                pred: out.pred_box,
                target,
                distill,
            });
        }
        Ok(batch_objective(ctx.g, &terms, &weights)?.total)
    };
    let report = finite_diff_check(f, &x, cfg)?;
    Ok(SuiteOutcome {
        name: format!("student forward, tiny dims, batch 2 ({} parameters)", x.len()),
        report,
    })
}

/// Every suite, in a fixed order.
pub fn run_all(seed: u64, cfg: FdConfig) -> Result<Vec<SuiteOutcome>> {
    let mut out = op_suites(seed, cfg)?;
    out.extend(loss_suites(seed, cfg)?);
    out.push(model_suite(seed, cfg)?);
    Ok(out)
}
