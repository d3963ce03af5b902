use super::params::{ConvBn, ForwardCtx, Init, ParamBuilder};
use crate::error::{Error, Result};
use crate::tensor::{Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResidualBlockSpec {
    pub in_channels: usize,
    pub bottleneck_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl ResidualBlockSpec {
    /// Bottleneck ratio 4, floored at one channel.
    pub fn bottleneck(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        ResidualBlockSpec {
            in_channels,
            bottleneck_channels: (out_channels / 4).max(1),
            out_channels,
            stride,
        }
    }

    pub fn needs_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.stride != 1
    }
}

/// Bottleneck residual block: 1×1 reduce, 3×3 (carrying the stride), 1×1
/// expand, each with batch norm; `relu(shortcut(x) + residual(x))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub spec: ResidualBlockSpec,
    pub reduce: ConvBn,
    pub spatial: ConvBn,
    pub expand: ConvBn,
    pub projection: Option<ConvBn>,
}

impl ResidualBlock {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, spec: ResidualBlockSpec, init: Init) -> Self {
        let ResidualBlockSpec {
            in_channels: cin,
            bottleneck_channels: mid,
            out_channels: cout,
            stride,
        } = spec;
        ResidualBlock {
            spec,
            reduce: ConvBn::build(pb, &format!("{name}.reduce"), cin, mid, 1, 1, true, init),
            spatial: ConvBn::build(pb, &format!("{name}.spatial"), mid, mid, 3, stride, true, init),
            expand: ConvBn::build(pb, &format!("{name}.expand"), mid, cout, 1, 1, false, init),
            projection: spec
                .needs_projection()
                .then(|| ConvBn::build(pb, &format!("{name}.projection"), cin, cout, 1, stride, false, init)),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let c = ctx.graph.shape(x).get(1).copied();
        if c != Some(self.spec.in_channels) {
            return Err(Error::Config(format!(
                "residual block expects {} input channels, got {:?}",
                self.spec.in_channels,
                ctx.graph.shape(x)
            )));
        }
        let r = self.reduce.forward(ctx, x)?;
        let r = self.spatial.forward(ctx, r)?;
        let r = self.expand.forward(ctx, r)?;
        let shortcut = match &self.projection {
            Some(p) => p.forward(ctx, x)?,
            None => x,
        };
        let sum = ctx.graph.add(shortcut, r)?;
        Ok(ctx.graph.relu(sum))
    }
}

/// A run of stride-1 residual blocks at constant width.
#[derive(Clone, Debug)]
pub struct ResidualStack {
    pub blocks: Vec<ResidualBlock>,
}

impl ResidualStack {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, width: usize, depth: usize, init: Init) -> Self {
        ResidualStack {
            blocks: (0..depth)
                .map(|i| ResidualBlock::build(pb, &format!("{name}.{i}"), ResidualBlockSpec::bottleneck(width, width, 1), init))
                .collect(),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(ctx, x)?;
        }
        Ok(x)
    }
}
