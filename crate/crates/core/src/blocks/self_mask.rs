use super::params::{Conv2d, ConvBn, ForwardCtx, Init, ParamBuilder};
use crate::error::Result;
use crate::tensor::{Real, Var};

/// Coarse distraction-awareness: a three-layer 1×1 mask stack predicts a
/// single-channel saliency map `m` from the block's own input, and the input
/// is gated as `f ⊙ m`.
#[derive(Clone, Debug)]
pub struct SelfMask {
    pub reduce: ConvBn,
    pub hidden: ConvBn,
    pub out: Conv2d,
}

impl SelfMask {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, init: Init) -> Self {
        let mid = (channels / 4).max(1);
        SelfMask {
            reduce: ConvBn::build(pb, &format!("{name}.reduce"), channels, mid, 1, 1, true, init),
            hidden: ConvBn::build(pb, &format!("{name}.hidden"), mid, mid, 1, 1, true, init),
            out: pb.conv(&format!("{name}.out"), mid, 1, 1, 1, 0, true, init),
        }
    }

    /// Returns the gated features and the saliency map.
    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, f: Var) -> Result<(Var, Var)> {
        let h = self.reduce.forward(ctx, f)?;
        let h = self.hidden.forward(ctx, h)?;
        let logits = self.out.forward(ctx, h)?;
        let m = ctx.graph.sigmoid(logits);
        let gated = ctx.graph.gate(f, m)?;
        Ok((gated, m))
    }
}
