use super::boxes::BoundingBox;
use super::config::ModelConfig;
use super::layers::{Conv2d, Ctx, Encoder, Linear};
use super::params::{Bound, Initializer, ParamGroup, ParamId, ParamSet};
use crate::data::vocab::PAD_ID;
use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Real;

/// Fused token matrix `[D, N_v + N_l + 1]`: column 0 is `[REG]`, column 1 the
/// first visual token (`[VLS]`), column `N_v + 1` the first linguistic token
/// (`[CLS]`).
#[derive(Clone, Copy, Debug)]
pub struct JointSequence {
    pub tokens: Var,
    pub visual_tokens: usize,
    pub text_tokens: usize,
}

impl JointSequence {
    pub const REG: usize = 0;
    pub const VLS: usize = 1;

    pub fn width(&self) -> usize {
        self.visual_tokens + self.text_tokens + 1
    }

    pub fn cls_index(&self) -> usize {
        self.visual_tokens + 1
    }

    pub fn column<T: Real>(&self, g: &mut Graph<T>, j: usize) -> Result<Var> {
        g.column(self.tokens, j)
    }
}

/// Graph nodes produced by one student forward pass.
#[derive(Clone, Copy, Debug)]
pub struct StudentOutput {
    /// `[4]` normalised `(x, y, w, h)`.
    pub pred_box: Var,
    /// Fused `[VLS]` column, `[D]`.
    pub vls: Var,
    /// Fused `[CLS]` column, `[D]`.
    pub cls: Var,
    pub fused: JointSequence,
}

#[derive(Clone, Debug)]
struct StudentArch {
    stem: Vec<Conv2d>,
    reduce: Conv2d,
    visual_pos: ParamId,
    visual_encoder: Encoder,
    token_embedding: ParamId,
    text_pos: ParamId,
    text_encoder: Encoder,
    project_visual: Linear,
    project_text: Linear,
    reg: ParamId,
    fusion_pos: ParamId,
    fusion: Encoder,
    head: [Linear; 3],
}

/// The grounding network: visual branch, linguistic branch, joint-token
/// fusion transformer and box head.
#[derive(Clone, Debug)]
pub struct StudentModel<T> {
    config: ModelConfig,
    params: ParamSet<T>,
    arch: StudentArch,
}

impl<T: Real> StudentModel<T> {
    /// Builds a freshly initialised model: Xavier-uniform weights, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(stream_rng(seed, Stream::Init, 0));
        let mut ps = ParamSet::new();
        let c = &config;
        let pre = ParamGroup::Pretrained;
        let base = ParamGroup::Base;

        let mut stem = Vec::new();
        let mut in_ch = 3;
        for (i, &out) in c.stem_channels.iter().enumerate() {
            stem.push(Conv2d::new(&mut ps, &mut init, &format!("visual.stem.{i}"), in_ch, out, 3, 2, pre));
            in_ch = out;
        }
        let reduce = Conv2d::new(&mut ps, &mut init, "visual.reduce", in_ch, c.visual_channels, 1, 1, base);
        let nv = c.visual_tokens();
        let visual_pos = ps.register(
            "visual.pos",
            base,
            init.xavier(vec![nv, c.visual_channels], nv, c.visual_channels),
        );
        let visual_encoder = Encoder::new(
            &mut ps,
            &mut init,
            "visual.encoder",
            c.visual_layers,
            c.visual_channels,
            c.visual_heads,
            c.ffn_dim,
            base,
        );

        let token_embedding = ps.register(
            "text.embedding",
            pre,
            init.xavier(vec![c.vocab_size, c.text_channels], c.vocab_size, c.text_channels),
        );
        let text_pos = ps.register(
            "text.pos",
            base,
            init.xavier(vec![c.max_tokens, c.text_channels], c.max_tokens, c.text_channels),
        );
        let text_encoder = Encoder::new(
            &mut ps,
            &mut init,
            "text.encoder",
            c.text_layers,
            c.text_channels,
            c.text_heads,
            c.ffn_dim,
            base,
        );

        let d = c.joint_dim;
        let project_visual = Linear::new(&mut ps, &mut init, "fusion.project_visual", c.visual_channels, d, base);
        let project_text = Linear::new(&mut ps, &mut init, "fusion.project_text", c.text_channels, d, base);
        let reg = ps.register("fusion.reg", base, init.xavier(vec![d], 1, d));
        let n = c.joint_tokens();
        let fusion_pos = ps.register("fusion.pos", base, init.xavier(vec![n, d], n, d));
        let fusion = Encoder::new(
            &mut ps,
            &mut init,
            "fusion.encoder",
            c.fusion_layers,
            d,
            c.fusion_heads,
            c.ffn_dim,
            base,
        );
        let head = [
            Linear::new(&mut ps, &mut init, "head.0", d, d, base),
            Linear::new(&mut ps, &mut init, "head.1", d, d, base),
            Linear::new(&mut ps, &mut init, "head.2", d, 4, base),
        ];

        Ok(Self {
            config,
            params: ps,
            arch: StudentArch {
                stem,
                reduce,
                visual_pos,
                visual_encoder,
                token_embedding,
                text_pos,
                text_encoder,
                project_visual,
                project_text,
                reg,
                fusion_pos,
                fusion,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Image `[3, H0, W0]` to visual features `f_v` of shape `[C_v, N_v]`.
    pub fn visual_encode(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<Var> {
        let s = self.config.image_size;
        if ctx.g.shape(image) != [3, s, s] {
            return Err(Error::Dimension(format!(
                "image shape {:?} does not match configured [3, {s}, {s}]",
                ctx.g.shape(image)
            )));
        }
        let mut z = image;
        for conv in &self.arch.stem {
            z = conv.forward(ctx, z)?;
            z = ctx.g.relu(z);
        }
        let z = self.arch.reduce.forward(ctx, z)?;
        let nv = self.config.visual_tokens();
        let zv = ctx.g.reshape(z, vec![self.config.visual_channels, nv])?;
        let tokens = ctx.g.transpose(zv)?;
        let tokens = ctx.g.add(tokens, ctx.p(self.arch.visual_pos))?;
        let out = self.arch.visual_encoder.forward(ctx, tokens, None)?;
        ctx.g.transpose(out)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.len() != self.config.max_tokens {
            return Err(Error::Dimension(format!(
                "expected {} token ids, got {}",
                self.config.max_tokens,
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Token ids (length `N_l`) to linguistic features `f_l` of shape
    /// `[C_l, N_l]`. Padding positions are excluded from attention.
    pub fn linguistic_encode(&self, ctx: &mut Ctx<'_, T>, ids: &[usize]) -> Result<Var> {
        self.check_ids(ids)?;
        let mask = key_mask(ids);
        let emb = ctx.g.gather_rows(ctx.p(self.arch.token_embedding), ids)?;
        let x = ctx.g.add(emb, ctx.p(self.arch.text_pos))?;
        let out = self.arch.text_encoder.forward(ctx, x, Some(&mask))?;
        ctx.g.transpose(out)
    }

    /// Projects both modalities to width `D` and prepends the learnable
    /// `[REG]` embedding.
    pub fn project_and_join(&self, ctx: &mut Ctx<'_, T>, f_v: Var, f_l: Var) -> Result<JointSequence> {
        let c = &self.config;
        if ctx.g.shape(f_v) != [c.visual_channels, c.visual_tokens()] {
            return Err(Error::Dimension(format!(
                "visual features {:?}, expected [{}, {}]",
                ctx.g.shape(f_v),
                c.visual_channels,
                c.visual_tokens()
            )));
        }
        if ctx.g.shape(f_l) != [c.text_channels, c.max_tokens] {
            return Err(Error::Dimension(format!(
                "linguistic features {:?}, expected [{}, {}]",
                ctx.g.shape(f_l),
                c.text_channels,
                c.max_tokens
            )));
        }
        let v_rows = ctx.g.transpose(f_v)?;
        let l_rows = ctx.g.transpose(f_l)?;
        let p_v = self.arch.project_visual.forward(ctx, v_rows)?;
        let p_l = self.arch.project_text.forward(ctx, l_rows)?;
        let reg = ctx.g.reshape(ctx.p(self.arch.reg), vec![1, c.joint_dim])?;
        let rows = ctx.g.concat(&[reg, p_v, p_l])?;
        Ok(JointSequence {
            tokens: ctx.g.transpose(rows)?,
            visual_tokens: c.visual_tokens(),
            text_tokens: c.max_tokens,
        })
    }

    /// Visual-linguistic transformer over the whole joint sequence. Only
    /// padded text positions are masked; the modalities attend freely.
    pub fn fuse(&self, ctx: &mut Ctx<'_, T>, x: &JointSequence, ids: &[usize]) -> Result<JointSequence> {
        self.check_ids(ids)?;
        let mut mask = vec![true; x.visual_tokens + 1];
        mask.extend(key_mask(ids));
        let rows = ctx.g.transpose(x.tokens)?;
        let rows = ctx.g.add(rows, ctx.p(self.arch.fusion_pos))?;
        let out = self.arch.fusion.forward(ctx, rows, Some(&mask))?;
        Ok(JointSequence {
            tokens: ctx.g.transpose(out)?,
            ..*x
        })
    }

    /// MLP, ReLU, MLP, ReLU, MLP to width 4, then sigmoid.
    pub fn predict_box(&self, ctx: &mut Ctx<'_, T>, reg_out: Var) -> Result<Var> {
        let [l0, l1, l2] = &self.arch.head;
        let h = l0.forward_vec(ctx, reg_out)?;
        let h = ctx.g.relu(h);
        let h = l1.forward_vec(ctx, h)?;
        let h = ctx.g.relu(h);
        let h = l2.forward_vec(ctx, h)?;
        Ok(ctx.g.sigmoid(h))
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, image: Var, ids: &[usize]) -> Result<StudentOutput> {
        let f_v = self.visual_encode(ctx, image)?;
        let f_l = self.linguistic_encode(ctx, ids)?;
        let joint = self.project_and_join(ctx, f_v, f_l)?;
        let fused = self.fuse(ctx, &joint, ids)?;
        let reg = fused.column(ctx.g, JointSequence::REG)?;
        let vls = fused.column(ctx.g, JointSequence::VLS)?;
        let cls = fused.column(ctx.g, fused.cls_index())?;
        let pred_box = self.predict_box(ctx, reg)?;
        Ok(StudentOutput { pred_box, vls, cls, fused })
    }

    /// Eval-mode prediction without gradients.
    pub fn predict(&self, image: &Tensor<T>, ids: &[usize]) -> Result<BoundingBox<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let mut ctx = Ctx::eval(&mut g, &bound);
        let img = ctx.g.constant(image);
        let out = self.forward(&mut ctx, img, ids)?;
        BoundingBox::from_slice(g.value(out.pred_box))
    }

    /// Rebuilds a model from a configuration and named parameter payloads.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.assign_named(tensors)?;
        Ok(m)
    }
}

/// `true` for every non-padding position.
pub fn key_mask(ids: &[usize]) -> Vec<bool> {
    ids.iter().map(|&i| i != PAD_ID).collect()
}
