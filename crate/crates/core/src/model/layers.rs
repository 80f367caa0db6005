//! Building blocks shared by the student and the teacher towers.

use rand_chacha::ChaCha8Rng;

use super::params::{Bound, Initializer, ParamGroup, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::numcore::{Graph, KeyMask, Tensor, Var};
use crate::scalar::Real;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// One forward pass: the tape, bound parameters and the dropout source.
/// Dropout is active only when built with [`Ctx::train`].
pub struct Ctx<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    pub params: &'a Bound,
    dropout: Option<(f64, &'a mut ChaCha8Rng)>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn eval(g: &'a mut Graph<T>, params: &'a Bound) -> Self {
        Self { g, params, dropout: None }
    }

    pub fn train(g: &'a mut Graph<T>, params: &'a Bound, rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            g,
            params,
            dropout: Some((rate, rng)),
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id]
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        match &mut self.dropout {
            Some((rate, rng)) => self.g.dropout(x, *rate, &mut **rng),
            None => Ok(x),
        }
    }
}

/// `y = x W + b` on row-major token matrices `x[n, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        init: &mut Initializer,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
    ) -> Self {
        let w = ps.register(format!("{name}.weight"), group, init.xavier(vec![in_dim, out_dim], in_dim, out_dim));
        let b = ps.register(format!("{name}.bias"), group, Tensor::zeros(vec![out_dim]));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = ctx.g.matmul(x, ctx.p(self.w))?;
        ctx.g.add_row(y, ctx.p(self.b))
    }

    /// Applies the layer to a single vector.
    pub fn forward_vec<T: Real>(&self, ctx: &mut Ctx<'_, T>, v: Var) -> Result<Var> {
        let row = ctx.g.reshape(v, vec![1, self.in_dim])?;
        let y = self.forward(ctx, row)?;
        ctx.g.reshape(y, vec![self.out_dim])
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, name: &str, dim: usize, group: ParamGroup) -> Self {
        let gain = ps.register(format!("{name}.gain"), group, Tensor::full(vec![dim], T::one()));
        let bias = ps.register(format!("{name}.bias"), group, Tensor::zeros(vec![dim]));
        Self { gain, bias }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (gain, bias) = (ctx.p(self.gain), ctx.p(self.bias));
        ctx.g.layer_norm(x, gain, bias, T::lit(LAYER_NORM_EPS))
    }
}

/// 2-D convolution over a single `[c, h, w]` image via im2col.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        init: &mut Initializer,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        group: ParamGroup,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let fan_out = out_ch * kernel * kernel;
        let w = ps.register(
            format!("{name}.weight"),
            group,
            init.xavier(vec![out_ch, fan_in], fan_in, fan_out),
        );
        let b = ps.register(format!("{name}.bias"), group, Tensor::zeros(vec![out_ch]));
        Self {
            w,
            b,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn output_size(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// `[in_ch, h, w] -> [out_ch, oh, ow]`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (h, w) = match *ctx.g.shape(x) {
            [c, h, w] if c == self.in_ch => (h, w),
            ref s => {
                return Err(Error::Dimension(format!(
                    "conv expects [{}, h, w], got {s:?}",
                    self.in_ch
                )))
            }
        };
        let cols = if self.kernel == 1 && self.stride == 1 {
            ctx.g.reshape(x, vec![self.in_ch, h * w])?
        } else {
            ctx.g.im2col(x, self.kernel, self.stride, self.pad)?
        };
        let y = ctx.g.matmul(ctx.p(self.w), cols)?;
        let y = ctx.g.add_col(y, ctx.p(self.b))?;
        ctx.g.reshape(y, vec![self.out_ch, self.output_size(h), self.output_size(w)])
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        init: &mut Initializer,
        name: &str,
        dim: usize,
        heads: usize,
        ffn: usize,
        group: ParamGroup,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "{name}: width {dim} not divisible by {heads} heads");
        Self {
            heads,
            q: Linear::new(ps, init, &format!("{name}.attn.q"), dim, dim, group),
            k: Linear::new(ps, init, &format!("{name}.attn.k"), dim, dim, group),
            v: Linear::new(ps, init, &format!("{name}.attn.v"), dim, dim, group),
            o: Linear::new(ps, init, &format!("{name}.attn.o"), dim, dim, group),
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim, group),
            ff1: Linear::new(ps, init, &format!("{name}.ffn.0"), dim, ffn, group),
            ff2: Linear::new(ps, init, &format!("{name}.ffn.1"), ffn, dim, group),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim, group),
        }
    }

    fn attention<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, mask: KeyMask<'_>) -> Result<Var> {
        let q = self.q.forward(ctx, x)?;
        let k = self.k.forward(ctx, x)?;
        let v = self.v.forward(ctx, x)?;
        let dim = self.q.out_dim;
        let dh = dim / self.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = ctx.g.slice_cols(q, h * dh, dh)?;
            let kh = ctx.g.slice_cols(k, h * dh, dh)?;
            let vh = ctx.g.slice_cols(v, h * dh, dh)?;
            let kt = ctx.g.transpose(kh)?;
            let scores = ctx.g.matmul(qh, kt)?;
            let scores = ctx.g.scale(scores, scale);
            let attn = ctx.g.masked_softmax_rows(scores, mask)?;
            outs.push(ctx.g.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { ctx.g.concat_cols(&outs)? };
        self.o.forward(ctx, cat)
    }

    /// Post-norm encoder layer over tokens `x[n, dim]`; dropout acts on the FFN.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, mask: KeyMask<'_>) -> Result<Var> {
        let a = self.attention(ctx, x, mask)?;
        let x = ctx.g.add(x, a)?;
        let x = self.ln1.forward(ctx, x)?;
        let h = self.ff1.forward(ctx, x)?;
        let h = ctx.g.relu(h);
        let h = ctx.dropout(h)?;
        let h = self.ff2.forward(ctx, h)?;
        let h = ctx.dropout(h)?;
        let x = ctx.g.add(x, h)?;
        self.ln2.forward(ctx, x)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        init: &mut Initializer,
        name: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        ffn: usize,
        group: ParamGroup,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| EncoderLayer::new(ps, init, &format!("{name}.{i}"), dim, heads, ffn, group))
            .collect();
        Self { layers }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, mut x: Var, mask: KeyMask<'_>) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(ctx, x, mask)?;
        }
        Ok(x)
    }
}
