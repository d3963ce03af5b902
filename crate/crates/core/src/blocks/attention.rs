use super::params::{Conv2d, ConvBn, ForwardCtx, Init, Linear, ParamBuilder};
use super::residual::ResidualStack;
use crate::error::Result;
use crate::tensor::{Real, Var};

/// Guards the confidence-weighted average against all-zero confidences.
pub const ATTENTION_EPS: f64 = 1e-8;

/// Segmentation-supervised mask branch: two 1×1 conv-bn-relu layers, two
/// residual blocks, and a final 1×1 conv to one logit channel.
#[derive(Clone, Debug)]
pub struct MaskBranch {
    pub reduce: ConvBn,
    pub hidden: ConvBn,
    pub refine: ResidualStack,
    pub out: Conv2d,
}

impl MaskBranch {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, hidden: usize, init: Init) -> Self {
        MaskBranch {
            reduce: ConvBn::build(pb, &format!("{name}.reduce"), channels, hidden, 1, 1, true, init),
            hidden: ConvBn::build(pb, &format!("{name}.hidden"), hidden, hidden, 1, 1, true, init),
            refine: ResidualStack::build(pb, &format!("{name}.refine"), hidden, 2, init),
            out: pb.conv(&format!("{name}.out"), hidden, 1, 1, 1, 0, true, init),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let h = self.reduce.forward(ctx, x)?;
        let h = self.hidden.forward(ctx, h)?;
        let h = self.refine.forward(ctx, h)?;
        self.out.forward(ctx, h)
    }
}

/// Side-branch head. With a mask branch the fused feature is gated by
/// `sigmoid(seg_logits)` first; then per-attribute sigmoid confidences pool
/// the feature into one descriptor per attribute, each scored by its own
/// linear classifier.
#[derive(Clone, Debug)]
pub struct MaskedAttention {
    pub mask: Option<MaskBranch>,
    pub attention: Conv2d,
    pub classifier: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub side_logits: Var,
    pub seg_logits: Option<Var>,
    pub gate: Option<Var>,
    /// Attention logits `[B, C, H, W]`.
    pub attention_logits: Var,
}

impl MaskedAttention {
    pub fn build<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        hidden: usize,
        attributes: usize,
        with_mask: bool,
        init: Init,
    ) -> Self {
        MaskedAttention {
            mask: with_mask.then(|| MaskBranch::build(pb, &format!("{name}.mask"), channels, hidden, init)),
            attention: pb.conv(&format!("{name}.attention"), channels, attributes, 1, 1, 0, true, init),
            classifier: pb.attribute_linear(&format!("{name}.classifier"), attributes, channels, init),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, fused: Var) -> Result<AttentionOutput> {
        let (features, seg_logits, gate) = match &self.mask {
            Some(mask) => {
                let seg = mask.forward(ctx, fused)?;
                let gate = ctx.graph.sigmoid(seg);
                (ctx.graph.gate(fused, gate)?, Some(seg), Some(gate))
            }
            None => (fused, None, None),
        };
        let attention_logits = self.attention.forward(ctx, features)?;
        let confidence = ctx.graph.sigmoid(attention_logits);
        let descriptors = ctx.graph.confidence_pool(confidence, features, ATTENTION_EPS)?;
        let side_logits = self.classifier.forward_per_attribute(ctx, descriptors)?;
        Ok(AttentionOutput {
            side_logits,
            seg_logits,
            gate,
            attention_logits,
        })
    }
}
