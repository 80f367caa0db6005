//! Training objectives: box regression, distillation and their total.
//!
//! Every loss is built on the tape so it differentiates with the model; the
//! `*_value` helpers evaluate the same graph on plain boxes.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::BoundingBox;
use crate::numcore::{Graph, Var};
use crate::scalar::Real;

/// Floor applied to norms and areas so degenerate inputs stay finite.
pub const EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Image distillation weight.
    pub alpha: f64,
    /// Text distillation weight.
    pub beta: f64,
    /// GIoU weight.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.5,
            beta: 2.0,
            lambda: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-component loss values. `total` is always
/// `smooth_l1 + lambda*giou + alpha*distill_image + beta*distill_text`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub smooth_l1: f64,
    pub giou: f64,
    pub distill_image: f64,
    pub distill_text: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn assemble(smooth_l1: f64, giou: f64, distill_image: f64, distill_text: f64, w: &LossWeights) -> Self {
        Self {
            smooth_l1,
            giou,
            distill_image,
            distill_text,
            total: smooth_l1 + w.lambda * giou + w.alpha * distill_image + w.beta * distill_text,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.smooth_l1, self.giou, self.distill_image, self.distill_text, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Which modalities are distilled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Both,
    ImageOnly,
    TextOnly,
    None,
}

/// Distance used between a student token and its teacher target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DistillKind {
    Cosine,
    /// Mean absolute elementwise difference.
    L1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DistillMode {
    pub modality: Modality,
    pub kind: DistillKind,
}

impl Default for DistillMode {
    fn default() -> Self {
        Self {
            modality: Modality::Both,
            kind: DistillKind::Cosine,
        }
    }
}

impl DistillMode {
    pub const NONE: Self = Self {
        modality: Modality::None,
        kind: DistillKind::Cosine,
    };

    pub fn image_enabled(&self) -> bool {
        matches!(self.modality, Modality::Both | Modality::ImageOnly)
    }

    pub fn text_enabled(&self) -> bool {
        matches!(self.modality, Modality::Both | Modality::TextOnly)
    }

    pub fn is_none(&self) -> bool {
        self.modality == Modality::None
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "both" => Modality::Both,
            "image_only" => Modality::ImageOnly,
            "text_only" => Modality::TextOnly,
            "none" => Modality::None,
            _ => return Err(Error::Config(format!("unknown distillation mode `{s}`"))),
        })
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Both => "both",
            Modality::ImageOnly => "image_only",
            Modality::TextOnly => "text_only",
            Modality::None => "none",
        })
    }
}

impl FromStr for DistillKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cosine" | "cos" => DistillKind::Cosine,
            "l1" => DistillKind::L1,
            _ => return Err(Error::Config(format!("unknown distillation loss `{s}`"))),
        })
    }
}

impl fmt::Display for DistillKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistillKind::Cosine => "cosine",
            DistillKind::L1 => "l1",
        })
    }
}

fn check_box<T: Real>(g: &Graph<T>, v: Var, what: &str) -> Result<()> {
    if g.shape(v) != [4] {
        return Err(Error::Dimension(format!("{what} box has shape {:?}, expected [4]", g.shape(v))));
    }
    Ok(())
}

/// Sum over the four coordinates of the smooth-L1 penalty on `pred - target`.
pub fn smooth_l1<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    check_box(g, pred, "predicted")?;
    check_box(g, target, "target")?;
    let d = g.sub(pred, target)?;
    let f = g.smooth_l1(d);
    Ok(g.sum(f))
}

struct Corners {
    x1: Var,
    y1: Var,
    x2: Var,
    y2: Var,
}

fn corners<T: Real>(g: &mut Graph<T>, b: Var) -> Result<Corners> {
    let (x, y, w, h) = (g.index(b, 0)?, g.index(b, 1)?, g.index(b, 2)?, g.index(b, 3)?);
    let hw = g.scale(w, T::lit(0.5));
    let hh = g.scale(h, T::lit(0.5));
    Ok(Corners {
        x1: g.sub(x, hw)?,
        y1: g.sub(y, hh)?,
        x2: g.add(x, hw)?,
        y2: g.add(y, hh)?,
    })
}

/// IoU and GIoU nodes for two centre-format boxes.
fn iou_giou<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<(Var, Var)> {
    check_box(g, pred, "predicted")?;
    check_box(g, target, "target")?;
    let eps = T::lit(EPS);
    let a = corners(g, pred)?;
    let b = corners(g, target)?;

    let area = |g: &mut Graph<T>, c: &Corners| -> Result<Var> {
        let w = g.sub(c.x2, c.x1)?;
        let h = g.sub(c.y2, c.y1)?;
        let w = g.relu(w);
        let h = g.relu(h);
        g.mul(w, h)
    };
    let area_a = area(g, &a)?;
    let area_b = area(g, &b)?;

    let ix1 = g.maximum(a.x1, b.x1)?;
    let iy1 = g.maximum(a.y1, b.y1)?;
    let ix2 = g.minimum(a.x2, b.x2)?;
    let iy2 = g.minimum(a.y2, b.y2)?;
    let iw = g.sub(ix2, ix1)?;
    let ih = g.sub(iy2, iy1)?;
    let iw = g.relu(iw);
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;

    let sum = g.add(area_a, area_b)?;
    let union = g.sub(sum, inter)?;
    let union_safe = g.clamp_min(union, eps);
    let iou = g.div(inter, union_safe)?;

    let cx1 = g.minimum(a.x1, b.x1)?;
    let cy1 = g.minimum(a.y1, b.y1)?;
    let cx2 = g.maximum(a.x2, b.x2)?;
    let cy2 = g.maximum(a.y2, b.y2)?;
    let cw = g.sub(cx2, cx1)?;
    let ch = g.sub(cy2, cy1)?;
    let enclose = g.mul(cw, ch)?;
    let enclose = g.clamp_min(enclose, eps);
    let gap = g.sub(enclose, union)?;
    let frac = g.div(gap, enclose)?;
    let giou = g.sub(iou, frac)?;
    Ok((iou, giou))
}

/// `1 - GIoU` between two centre-format boxes; lies in `[0, 2)`.
pub fn giou_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    let (_, giou) = iou_giou(g, pred, target)?;
    let neg = g.scale(giou, -T::one());
    Ok(g.add_scalar(neg, T::one()))
}

fn l2_norm<T: Real>(g: &mut Graph<T>, v: Var) -> Var {
    let eps = T::lit(EPS);
    let sq = g.mul(v, v).expect("same shape");
    let ss = g.sum(sq);
    let ss = g.clamp_min(ss, eps * eps);
    g.sqrt(ss)
}

/// `1 - u.v / (|u| |v|)` with both norms floored at [`EPS`].
pub fn cosine_loss<T: Real>(g: &mut Graph<T>, u: Var, v: Var) -> Result<Var> {
    if g.shape(u) != g.shape(v) || g.shape(u).len() != 1 {
        return Err(Error::Dimension(format!(
            "cosine_loss: vectors {:?} and {:?}",
            g.shape(u),
            g.shape(v)
        )));
    }
    let uv = g.mul(u, v)?;
    let dot = g.sum(uv);
    let nu = l2_norm(g, u);
    let nv = l2_norm(g, v);
    let denom = g.mul(nu, nv)?;
    let cos = g.div(dot, denom)?;
    let neg = g.scale(cos, -T::one());
    Ok(g.add_scalar(neg, T::one()))
}

/// Mean absolute difference between two vectors.
pub fn l1_distance<T: Real>(g: &mut Graph<T>, u: Var, v: Var) -> Result<Var> {
    let d = g.sub(u, v)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Unweighted per-modality distillation terms. A disabled modality is an
/// exact constant zero.
#[derive(Clone, Copy, Debug)]
pub struct DistillTerms {
    pub image: Var,
    pub text: Var,
}

impl DistillTerms {
    pub fn zero<T: Real>(g: &mut Graph<T>) -> Self {
        let z = g.constant_scalar(T::zero());
        Self { image: z, text: z }
    }

    /// `alpha * image + beta * text`.
    pub fn weighted<T: Real>(&self, g: &mut Graph<T>, w: &LossWeights) -> Result<Var> {
        let a = g.scale(self.image, T::lit(w.alpha));
        let b = g.scale(self.text, T::lit(w.beta));
        g.add(a, b)
    }
}

/// Distills the fused `[VLS]` / `[CLS]` tokens towards the pooled teacher
/// image / text embeddings.
pub fn distillation_terms<T: Real>(
    g: &mut Graph<T>,
    vls: Var,
    cls: Var,
    pooled_image: Var,
    pooled_text: Var,
    mode: DistillMode,
) -> Result<DistillTerms> {
    let dist = |g: &mut Graph<T>, a: Var, b: Var| match mode.kind {
        DistillKind::Cosine => cosine_loss(g, a, b),
        DistillKind::L1 => l1_distance(g, a, b),
    };
    let zero = g.constant_scalar(T::zero());
    let image = if mode.image_enabled() { dist(g, vls, pooled_image)? } else { zero };
    let text = if mode.text_enabled() { dist(g, cls, pooled_text)? } else { zero };
    Ok(DistillTerms { image, text })
}

/// Component nodes of the training objective.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub smooth_l1: Var,
    pub giou: Var,
    pub distill: DistillTerms,
    pub total: Var,
}

impl LossNodes {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>, w: &LossWeights) -> LossBreakdown {
        LossBreakdown::assemble(
            g.scalar(self.smooth_l1).as_f64(),
            g.scalar(self.giou).as_f64(),
            g.scalar(self.distill.image).as_f64(),
            g.scalar(self.distill.text).as_f64(),
            w,
        )
    }
}

/// Combines component nodes as `smooth_l1 + lambda*giou + alpha*img + beta*txt`,
/// accumulated left to right in that order.
pub fn combine<T: Real>(
    g: &mut Graph<T>,
    smooth_l1: Var,
    giou: Var,
    distill: DistillTerms,
    w: &LossWeights,
) -> Result<LossNodes> {
    w.validate()?;
    let lg = g.scale(giou, T::lit(w.lambda));
    let t = g.add(smooth_l1, lg)?;
    let ai = g.scale(distill.image, T::lit(w.alpha));
    let t = g.add(t, ai)?;
    let bt = g.scale(distill.text, T::lit(w.beta));
    let total = g.add(t, bt)?;
    Ok(LossNodes {
        smooth_l1,
        giou,
        distill,
        total,
    })
}

/// Full objective for one prediction.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    distill: DistillTerms,
    w: &LossWeights,
) -> Result<LossNodes> {
    let s = smooth_l1(g, pred, target)?;
    let gi = giou_loss(g, pred, target)?;
    combine(g, s, gi, distill, w)
}

/// One sample's contribution to a batch objective.
#[derive(Clone, Copy, Debug)]
pub struct SampleTerms {
    pub pred: Var,
    pub target: Var,
    pub distill: DistillTerms,
}

/// Batch-mean objective: each component is averaged over the samples, then
/// the means are combined with the weights.
pub fn batch_objective<T: Real>(g: &mut Graph<T>, samples: &[SampleTerms], w: &LossWeights) -> Result<LossNodes> {
    if samples.is_empty() {
        return Err(Error::Contract("batch objective over an empty batch".into()));
    }
    let inv = T::lit(1.0 / samples.len() as f64);
    let mut parts: [Vec<Var>; 4] = Default::default();
    for s in samples {
        parts[0].push(smooth_l1(g, s.pred, s.target)?);
        parts[1].push(giou_loss(g, s.pred, s.target)?);
        parts[2].push(s.distill.image);
        parts[3].push(s.distill.text);
    }
    let mut means = [parts[0][0]; 4];
    for (m, vars) in means.iter_mut().zip(&parts) {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = g.add(acc, v)?;
        }
        *m = g.scale(acc, inv);
    }
    let [s, gi, di, dt] = means;
    combine(g, s, gi, DistillTerms { image: di, text: dt }, w)
}

fn on_boxes<T: Real>(
    a: &BoundingBox<T>,
    b: &BoundingBox<T>,
    f: impl FnOnce(&mut Graph<T>, Var, Var) -> Result<Var>,
) -> T {
    let mut g = Graph::new();
    let av = g.constant(&a.to_tensor());
    let bv = g.constant(&b.to_tensor());
    let out = f(&mut g, av, bv).expect("4-vectors");
    g.scalar(out)
}

pub fn smooth_l1_value<T: Real>(pred: &BoundingBox<T>, target: &BoundingBox<T>) -> T {
    on_boxes(pred, target, smooth_l1)
}

pub fn giou_loss_value<T: Real>(pred: &BoundingBox<T>, target: &BoundingBox<T>) -> T {
    on_boxes(pred, target, giou_loss)
}

/// The GIoU itself (not the loss).
pub fn giou_value<T: Real>(a: &BoundingBox<T>, b: &BoundingBox<T>) -> T {
    on_boxes(a, b, |g, x, y| iou_giou(g, x, y).map(|(_, gi)| gi))
}

pub fn cosine_loss_value<T: Real>(u: &[T], v: &[T]) -> Result<T> {
    let mut g = Graph::new();
    let uv = g.constant_from(vec![u.len()], u.to_vec())?;
    let vv = g.constant_from(vec![v.len()], v.to_vec())?;
    let out = cosine_loss(&mut g, uv, vv)?;
    Ok(g.scalar(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BoundingBox<f64> {
        BoundingBox::new(x, y, w, h)
    }

    #[test]
    fn smooth_l1_examples() {
        let b = bb(0.4, 0.5, 0.2, 0.3);
        assert_eq!(smooth_l1_value(&b, &b), 0.0);
        let shifted = bb(0.9, 0.5, 0.2, 0.3);
        assert!((smooth_l1_value(&shifted, &b) - 0.125).abs() < 1e-15);
        // Unnormalised offsets exercise the linear branch.
        let far = bb(2.4, 0.5, 0.2, 0.3);
        assert!((smooth_l1_value(&far, &b) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn giou_examples() {
        let b = bb(0.4, 0.5, 0.2, 0.3);
        assert!(giou_loss_value(&b, &b).abs() < 1e-12);

        let a = bb(0.3, 0.3, 0.2, 0.2);
        let c = bb(0.7, 0.7, 0.2, 0.2);
        assert!((giou_loss_value(&a, &c) - (1.0 + 0.28 / 0.36)).abs() < 1e-12);

        // Corner boxes (0,0,2,2) and (1,1,3,3) scaled by 1/3.
        let s: f64 = 1.0 / 3.0;
        let a = BoundingBox::from_corners(0.0, 0.0, 2.0 * s, 2.0 * s);
        let c = BoundingBox::from_corners(s, s, 1.0, 1.0);
        let expected = 1.0 / 7.0 - 2.0 / 9.0;
        assert!((giou_value(&a, &c) - expected).abs() < 1e-12);
        assert!((giou_loss_value(&a, &c) - (1.0 - expected)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_boxes_stay_finite() {
        let zero = bb(0.5, 0.5, 0.0, 0.0);
        let v = giou_loss_value(&zero, &zero);
        assert!(v.is_finite());
        let mut g = Graph::new();
        let p = g.param(&zero.to_tensor());
        let t = g.constant(&bb(0.2, 0.2, 0.1, 0.1).to_tensor());
        let l = giou_loss(&mut g, p, t).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(p).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cosine_examples() {
        assert!(cosine_loss_value(&[0.3f64, -1.2, 2.0], &[0.3, -1.2, 2.0]).unwrap().abs() < 1e-15);
        assert!((cosine_loss_value(&[1.0f64, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        let v = cosine_loss_value(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((v - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-12);
        assert!((v - 0.29289).abs() < 1e-5);
        // Zero vector: floored, finite.
        assert!((cosine_loss_value(&[0.0f64, 0.0], &[1.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn modes_parse_and_reject_unknown() {
        assert_eq!("image_only".parse::<Modality>().unwrap(), Modality::ImageOnly);
        assert_eq!("l1".parse::<DistillKind>().unwrap(), DistillKind::L1);
        assert!(matches!("video".parse::<Modality>(), Err(Error::Config(_))));
        assert!(matches!("l2".parse::<DistillKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn disabled_modality_is_exactly_zero() {
        let mut g = Graph::new();
        let u = g.param(&crate::numcore::Tensor::vector(vec![1.0f64, 2.0, -0.5]).unwrap());
        let v = g.param(&crate::numcore::Tensor::vector(vec![-1.0, 0.5, 0.5]).unwrap());
        for kind in [DistillKind::Cosine, DistillKind::L1] {
            let t = distillation_terms(&mut g, u, u, v, v, DistillMode { modality: Modality::ImageOnly, kind }).unwrap();
            assert_eq!(g.scalar(t.text), 0.0);
            assert!(g.scalar(t.image) > 0.0);
            let t = distillation_terms(&mut g, u, u, v, v, DistillMode { modality: Modality::TextOnly, kind }).unwrap();
            assert_eq!(g.scalar(t.image), 0.0);
            assert!(g.scalar(t.text) > 0.0);
            let t = distillation_terms(&mut g, u, u, v, v, DistillMode { modality: Modality::None, kind }).unwrap();
            assert_eq!((g.scalar(t.image), g.scalar(t.text)), (0.0, 0.0));
        }
        // Identical features: zero up to rounding in the cosine.
        let t = distillation_terms(&mut g, u, v, u, v, DistillMode::default()).unwrap();
        assert!(g.scalar(t.image).abs() < 1e-15 && g.scalar(t.text).abs() < 1e-15);
    }

    #[test]
    fn total_matches_breakdown_and_lambda_zero_drops_giou() {
        let pred = bb(0.45, 0.5, 0.3, 0.2);
        let gt = bb(0.5, 0.55, 0.25, 0.25);
        for lambda in [0.0, 1.0] {
            let w = LossWeights { lambda, ..LossWeights::default() };
            let mut g = Graph::new();
            let p = g.param(&pred.to_tensor());
            let t = g.constant(&gt.to_tensor());
            let u = g.constant_from(vec![2], vec![1.0, 0.0]).unwrap();
            let v = g.constant_from(vec![2], vec![1.0, 1.0]).unwrap();
            let d = distillation_terms(&mut g, u, u, v, v, DistillMode::default()).unwrap();
            let nodes = total_loss(&mut g, p, t, d, &w).unwrap();
            let b = nodes.breakdown(&g, &w);
            assert_eq!(b.total, g.scalar(nodes.total));
            let recomputed = b.smooth_l1 + w.lambda * b.giou + w.alpha * b.distill_image + w.beta * b.distill_text;
            assert_eq!(b.total, recomputed);
            if lambda == 0.0 {
                let without = b.smooth_l1 + w.alpha * b.distill_image + w.beta * b.distill_text;
                assert_eq!(b.total, without);
            }
        }
    }

    #[test]
    fn perfect_prediction_costs_nothing() {
        let gt = bb(0.5, 0.5, 0.25, 0.25);
        let w = LossWeights::default();
        let mut g = Graph::new();
        let p = g.constant(&gt.to_tensor());
        let t = g.constant(&gt.to_tensor());
        let u = g.constant_from(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let d = distillation_terms(&mut g, u, u, u, u, DistillMode::default()).unwrap();
        let nodes = total_loss(&mut g, p, t, d, &w).unwrap();
        assert!(g.scalar(nodes.total).abs() < 1e-12);
    }

    #[test]
    fn negative_weights_rejected() {
        let w = LossWeights { beta: -1.0, ..LossWeights::default() };
        assert!(matches!(w.validate(), Err(Error::Config(_))));
    }
}
